//! CSV metrics. Every file has a header row; the pre-training log also
//! starts with a `#` comment line echoing the regularizer settings.

use std::io::Write;

use serde::Serialize;

use crate::bench::BenchRow;
use crate::error::Result;
use crate::meanflow::{Stage1Config, Stage1Row};
use crate::ppo::Stage2Row;

#[derive(Serialize)]
struct PretrainRecord {
    epoch: usize,
    mf_loss: f64,
    disp_loss: f64,
    total: f64,
    d_eff: usize,
}

/// Streams pre-training rows as they arrive.
pub struct PretrainCsv<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> PretrainCsv<W> {
    pub fn new(mut w: W, config: &Stage1Config) -> Result<Self> {
        writeln!(
            w,
            "# alpha_disp={} disp_kind={} disp_temperature={} seed={}",
            config.alpha_disp, config.disp_kind, config.disp_temperature, config.seed
        )?;
        Ok(PretrainCsv {
            inner: csv::Writer::from_writer(w),
        })
    }

    pub fn write(&mut self, row: &Stage1Row) -> Result<()> {
        self.inner.serialize(PretrainRecord {
            epoch: row.epoch,
            mf_loss: row.mf_loss,
            disp_loss: row.disp_loss,
            total: row.total_loss,
            d_eff: row.d_eff,
        })?;
        Ok(self.inner.flush()?)
    }
}

pub struct FinetuneCsv<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> FinetuneCsv<W> {
    pub fn new(w: W) -> Self {
        FinetuneCsv {
            inner: csv::Writer::from_writer(w),
        }
    }

    pub fn write(&mut self, row: &Stage2Row) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(self.inner.flush()?)
    }
}

pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    Ok(out.flush()?)
}

/// Reader that skips `#` comment lines.
pub fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r)
}
