//! Offline demonstrations stored as JSON Lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dmpo_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DmpoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub episode: u64,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    /// Checks that the set is nonempty, finite and dimensionally consistent.
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(DmpoError::InvalidArgument("dataset has no records".into()));
        };
        let (d_obs, d_a) = (first.obs.len(), first.action.len());
        if d_obs == 0 || d_a == 0 {
            return Err(DmpoError::InvalidArgument("dataset records have empty vectors".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.obs.len() != d_obs || r.action.len() != d_a {
                return Err(DmpoError::InvalidArgument(format!(
                    "record {i}: dims ({}, {}) differ from ({d_obs}, {d_a})",
                    r.obs.len(),
                    r.action.len()
                )));
            }
            if r.obs.iter().chain(&r.action).any(|x| !x.is_finite()) {
                return Err(DmpoError::InvalidArgument(format!("record {i}: non-finite value")));
            }
        }
        Ok(Dataset { records })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.records[0].obs.len()
    }

    pub fn action_dim(&self) -> usize {
        self.records[0].action.len()
    }

    /// `(N x d_obs, N x d_a)` matrices in record order.
    pub fn tensors(&self) -> Result<(Tensor, Tensor)> {
        let n = self.len();
        let obs = self.records.iter().flat_map(|r| r.obs.iter().copied()).collect();
        let act = self.records.iter().flat_map(|r| r.action.iter().copied()).collect();
        Ok((
            Tensor::new(n, self.obs_dim(), obs)?,
            Tensor::new(n, self.action_dim(), act)?,
        ))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| DmpoError::InvalidArgument(format!("dataset line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Dataset::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::read_jsonl(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(obs: &[f64], action: &[f64]) -> Record {
        Record {
            obs: obs.to_vec(),
            action: action.to_vec(),
            episode: 0,
            t: 0,
        }
    }

    #[test]
    fn jsonl_roundtrip_is_exact() {
        let d = Dataset::new(vec![
            rec(&[0.1 + 0.2, -1e-300], &[std::f64::consts::PI]),
            rec(&[1.0 / 3.0, 7.0], &[-0.0]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        for (a, b) in d.records().iter().zip(back.records()) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.obs), bits(&b.obs));
            assert_eq!(bits(&a.action), bits(&b.action));
        }
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"obs\":["));
    }

    #[test]
    fn inconsistent_dims_rejected() {
        assert!(Dataset::new(vec![rec(&[1.0], &[1.0]), rec(&[1.0, 2.0], &[1.0])]).is_err());
        assert!(Dataset::new(vec![]).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let line = r#"{"obs":[1],"action":[2],"episode":0,"t":0,"extra":1}"#;
        assert!(Dataset::read_jsonl(line.as_bytes()).is_err());
    }
}
