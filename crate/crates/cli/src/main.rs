use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dmpo_core::bench::bench_latency;
use dmpo_core::dataset::Dataset;
use dmpo_core::dispersive::effective_rank;
use dmpo_core::envs::{evaluate, gen_demos, probe_observations, EnvKind};
use dmpo_core::io::{write_bench_csv, Checkpoint, CheckpointKind, FinetuneCsv, PretrainCsv, RunConfig};
use dmpo_core::meanflow::pretrain_with;
use dmpo_core::nn::{VelocityField, VelocityNet};
use dmpo_core::ppo::{finetune_with, ActorCritic};
use dmpo_core::rng::RngState;
use dmpo_core::DmpoError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dmpo", version, about = "One-step flow policies: pre-train, fine-tune, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write demonstrations as JSONL.
    GenData {
        #[arg(long)]
        env: EnvKind,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the velocity network to demonstrations.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `dataset` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PPO fine-tuning starting from a checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministic K-step evaluation; prints one JSON line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: Option<EnvKind>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(short = 'K', long = "steps", default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median single-observation latency and NFE per K.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: Option<EnvKind>,
        #[arg(short = 'K', long = "steps", value_delimiter = ',', default_value = "1,2,5,20")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Dimensions, parameter checksum and embedding rank of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: Option<EnvKind>,
        #[arg(long, default_value_t = 256)]
        probe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_env(flag: Option<EnvKind>, ck: &Checkpoint) -> Result<EnvKind> {
    match flag.or(ck.env) {
        Some(e) => Ok(e),
        None => bail!(DmpoError::InvalidArgument("checkpoint has no environment; pass --env".into())),
    }
}

fn gen_data(env: EnvKind, episodes: usize, seed: u64, out: &Path) -> Result<()> {
    let data = gen_demos(env, episodes, seed)?;
    data.save(out)?;
    println!("{}", json!({"records": data.len(), "episodes": episodes, "out": out}));
    Ok(())
}

fn pretrain(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(d) = data {
        cfg.dataset = Some(d);
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let Some(path) = cfg.dataset.clone() else {
        bail!(DmpoError::Config("no dataset: pass --data or set `dataset`".into()));
    };
    let data = Dataset::load(&path).with_context(|| format!("dataset {}", path.display()))?;
    let dir = cfg.output_dir.clone();
    cfg.write_echo(&dir)?;
    let net = VelocityNet::init(cfg.stage1.seed, data.obs_dim(), data.action_dim(), &cfg.net)?;
    let mut csv = PretrainCsv::new(BufWriter::new(File::create(dir.join("pretrain.csv"))?), &cfg.stage1)?;
    let mut csv_err = None;
    let result = pretrain_with(net, &data, &cfg.stage1, |row| {
        if let Err(e) = csv.write(row) {
            csv_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = csv_err {
        return Err(e.into());
    }
    let mut ck = Checkpoint::pretrained(result.net, Some(cfg.env), cfg.to_value()?);
    ck.optimizers.insert("stage1".into(), result.optimizer);
    ck.rng = Some(RngState::capture(&result.rng));
    let ck_path = dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    let last = result.metrics.last();
    println!(
        "{}",
        json!({
            "checkpoint": ck_path,
            "epochs": result.metrics.len(),
            "mf_loss": last.map(|r| r.mf_loss),
            "d_eff": last.map(|r| r.d_eff),
            "parameter_checksum": ck.parameter_checksum(),
        })
    );
    Ok(())
}

fn finetune(config: Option<&Path>, checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let input = Checkpoint::load(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let dir = cfg.output_dir.clone();
    cfg.write_echo(&dir)?;
    let s2 = &cfg.stage2;
    let policy = input.policy.clone();
    let nets = match (&input.value, &input.log_sigma) {
        (Some(v), Some(ls)) => ActorCritic {
            policy: policy.clone(),
            value: v.clone(),
            log_sigma: ls.clone(),
            learnable_sigma: s2.learnable_sigma,
        },
        _ => dmpo_core::ppo::init_actor_critic(policy.clone(), policy.config(), s2)?,
    };
    let mut csv = FinetuneCsv::new(BufWriter::new(File::create(dir.join("finetune.csv"))?));
    let mut csv_err = None;
    let result = finetune_with(nets, &policy, cfg.env, s2, |row| {
        if let Err(e) = csv.write(row) {
            csv_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = csv_err {
        return Err(e.into());
    }
    let mut ck = Checkpoint::pretrained(result.nets.policy, Some(cfg.env), cfg.to_value()?);
    ck.kind = CheckpointKind::Finetuned;
    ck.value = Some(result.nets.value);
    ck.log_sigma = Some(result.nets.log_sigma);
    ck.learnable_sigma = result.nets.learnable_sigma;
    ck.optimizers.insert("policy".into(), result.policy_optimizer);
    ck.optimizers.insert("value".into(), result.value_optimizer);
    ck.rng = Some(RngState::capture(&result.rng));
    let ck_path = dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    let last = result.metrics.last();
    println!(
        "{}",
        json!({
            "checkpoint": ck_path,
            "iterations": result.metrics.len(),
            "mean_return": last.map(|r| r.mean_return),
            "success_rate": last.map(|r| r.success_rate),
            "policy_checksum": ck.policy.checksum(),
        })
    );
    Ok(())
}

fn eval(checkpoint: &Path, env: Option<EnvKind>, episodes: usize, k: usize, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let env = resolve_env(env, &ck)?;
    let report = evaluate(&ck.policy, env, episodes, k, seed)?;
    let mut v = serde_json::to_value(&report)?;
    v["env"] = json!(env);
    v["k"] = json!(k);
    println!("{v}");
    Ok(())
}

fn bench(checkpoint: &Path, env: Option<EnvKind>, ks: &[usize], runs: usize, warmup: usize, seed: u64, csv: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let env = resolve_env(env, &ck)?;
    let obs = probe_observations(env, 1, seed);
    let rows = bench_latency(&ck.policy, obs.row_slice(0), ks, runs, warmup, seed)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if csv {
        write_bench_csv(&mut out, &rows)?;
    } else {
        writeln!(out, "{:>4} {:>5} {:>12} {:>12} {:>12}", "K", "NFE", "median_us", "p10_us", "p90_us")?;
        for r in &rows {
            writeln!(
                out,
                "{:>4} {:>5} {:>12.2} {:>12.2} {:>12.2}",
                r.k, r.nfe, r.median_us, r.p10_us, r.p90_us
            )?;
        }
    }
    Ok(())
}

fn inspect(checkpoint: &Path, env: Option<EnvKind>, probe: usize, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let d_eff = match env.or(ck.env) {
        Some(e) if probe >= 2 => {
            let h = ck.policy.encode(&probe_observations(e, probe, seed))?;
            Some(effective_rank(&h, 1e-3)?)
        }
        _ => None,
    };
    println!(
        "{}",
        json!({
            "kind": ck.kind,
            "env": env.or(ck.env),
            "obs_dim": ck.policy.obs_dim(),
            "action_dim": ck.policy.action_dim(),
            "embed_dim": ck.policy.embed_dim(),
            "num_params": ck.policy.num_params(),
            "has_value": ck.value.is_some(),
            "sigma": ck.log_sigma.as_ref().map(|t| t.data().iter().map(|l| l.exp()).collect::<Vec<_>>()),
            "parameter_checksum": ck.parameter_checksum(),
            "probe_size": probe,
            "d_eff": d_eff,
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { env, episodes, seed, out } => gen_data(env, episodes, seed, &out),
        Command::Pretrain { config, data, out } => pretrain(config.as_deref(), data, out),
        Command::Finetune { config, checkpoint, out } => finetune(config.as_deref(), &checkpoint, out),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            k,
            seed,
        } => eval(&checkpoint, env, episodes, k, seed),
        Command::Bench {
            checkpoint,
            env,
            k,
            runs,
            warmup,
            seed,
            csv,
        } => bench(&checkpoint, env, &k, runs, warmup, seed, csv),
        Command::Inspect {
            checkpoint,
            env,
            probe,
            seed,
        } => inspect(&checkpoint, env, probe, seed),
    }
}

/// One line, `error kind=<id> msg=<text>`, with newlines flattened.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<DmpoError>())
        .map_or("other", DmpoError::kind);
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error kind={kind} msg={msg}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DMPO_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
