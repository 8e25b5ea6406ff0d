use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmod_core::config::{AblationKind, ConfigError, RunConfig};
use pmod_core::costmodel::{model_cost, CostError};
use pmod_core::harness::{
    emit_trace, evaluate, gen_task, probe_layer_groups, run_reweight_ablation, run_schedule_ablation, train,
    train_probe_model, write_ablation_csv, write_loss_csv, write_probe_csv, write_trace_csv, HarnessError, Split,
};
use pmod_core::model::checkpoint::{self, CheckpointError};
use pmod_core::model::{Model, ModelError};
use pmod_core::overflow::overflow_demo;
use pmod_core::schedule::{mean_retention, ScheduleError};

#[derive(Parser)]
#[command(name = "pmod", version, about = "Progressive mixture-of-depths toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file, or `toy` / `7b` for a shipped preset.
    #[arg(long, default_value = "toy")]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer retention schedule and its mean.
    Schedule(Common),
    /// FLOPs and KV-cache report for the configured workload.
    Cost(Common),
    /// Train one model and save checkpoint, loss curve and evaluation.
    Train(Common),
    /// Reweighting and schedule ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run independent arms on a thread pool.
        #[arg(long)]
        parallel: bool,
    },
    /// Inference-time retention sweep per layer group.
    Probe(Common),
    /// Per-token selection trace of a trained model.
    Trace(Common),
    /// Repeated reweighting in 16-bit and 64-bit range.
    OverflowDemo {
        #[arg(long, default_value_t = 32)]
        layers: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.out.clone());
    std::fs::create_dir_all(&out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    Ok((cfg, out))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Io { path, source })
}

fn finish(mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(|source| CliError::Io {
        path: PathBuf::from("<output>"),
        source,
    })
}

/// Shortest decimal that reads back as `v` after rounding to 12 places.
fn short(v: f64) -> String {
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

fn cmd_schedule(c: &Common) -> Result<(), CliError> {
    let (cfg, out) = load(c)?;
    let s = cfg.ratio_schedule()?;
    let mut w = create(&out, "schedule.csv")?;
    s.write_csv(&mut w)?;
    finish(w)?;
    for (l, r) in s.ratios().iter().enumerate() {
        println!("layer {:>3}  ratio {}", l + 1, short(*r));
    }
    println!("mean retention {}", short(mean_retention(&s)));
    Ok(())
}

fn cmd_cost(c: &Common) -> Result<(), CliError> {
    let (cfg, out) = load(c)?;
    let s = cfg.ratio_schedule()?;
    let report = model_cost(&cfg.model, &s, &cfg.workload)?;
    let mut w = create(&out, "cost.csv")?;
    report.write_csv(&mut w)?;
    finish(w)?;
    println!("{report}");
    Ok(())
}

fn cmd_train(c: &Common) -> Result<(), CliError> {
    let (cfg, out) = load(c)?;
    let task = cfg.task();
    let mut model = Model::init(cfg.model, cfg.seed)?.with_routing(cfg.routing()?)?;
    let report = train(&mut model, &task, &cfg.train)?;
    let mut w = create(&out, "checkpoint.bin")?;
    checkpoint::write(&model.params, &mut w)?;
    finish(w)?;
    let mut w = create(&out, "loss.csv")?;
    write_loss_csv(&report, &mut w)?;
    finish(w)?;
    let e = evaluate(&model, &task, cfg.train.eval_samples)?;
    let mut w = create(&out, "eval.csv")?;
    let io = |source| CliError::Io {
        path: out.join("eval.csv"),
        source,
    };
    writeln!(w, "# pmod eval v1").map_err(io)?;
    writeln!(w, "accuracy,loss,deep_auc").map_err(io)?;
    let auc = e.deep_auc.map_or(String::new(), |v| v.to_string());
    writeln!(w, "{},{},{}", e.accuracy, e.loss, auc).map_err(io)?;
    finish(w)?;
    println!("steps {}  accuracy {}  loss {:.6}  deep router auc {}", cfg.train.steps, e.accuracy, e.loss, auc);
    Ok(())
}

fn cmd_ablate(c: &Common, parallel: bool) -> Result<(), CliError> {
    let (cfg, out) = load(c)?;
    let a = cfg.ablation;
    let seeds = cfg.seed..cfg.seed + a.seeds as u64;
    if matches!(a.kind, AblationKind::Reweight | AblationKind::Both) {
        let prd = cfg.schedule_config()?;
        let mut rows = Vec::new();
        for s in seeds.clone() {
            rows.extend(run_reweight_ablation(&cfg.experiment(s), &prd, parallel)?);
        }
        let mut w = create(&out, "ablation_reweight.csv")?;
        write_ablation_csv(&rows, &mut w)?;
        finish(w)?;
        for r in &rows {
            println!("reweight  seed {:<3} {:<22} accuracy {:.3}  mean retention {:.4}", r.seed, r.label, r.accuracy, r.mean_retention);
        }
    }
    if matches!(a.kind, AblationKind::Schedule | AblationKind::Both) {
        let mut rows = Vec::new();
        for s in seeds {
            rows.extend(run_schedule_ablation(&cfg.experiment(s), a.schedule_target, a.schedule_beta, parallel)?);
        }
        let mut w = create(&out, "ablation_schedule.csv")?;
        write_ablation_csv(&rows, &mut w)?;
        finish(w)?;
        for r in &rows {
            println!("schedule  seed {:<3} {:<22} accuracy {:.3}  mean retention {:.4}", r.seed, r.label, r.accuracy, r.mean_retention);
        }
    }
    Ok(())
}

fn cmd_probe(c: &Common) -> Result<(), CliError> {
    let (cfg, out) = load(c)?;
    let (model, base) = train_probe_model(&cfg.experiment(cfg.seed), cfg.probe.base_ratio)?;
    if base.diverged {
        return Err(CliError::Failed("probe model diverged during training".into()));
    }
    let points = probe_layer_groups(&model, &cfg.task(), &cfg.probe.ratios, cfg.probe.eval_samples)?;
    let mut w = create(&out, "probe.csv")?;
    write_probe_csv(&points, &mut w)?;
    finish(w)?;
    println!("base accuracy {}", base.accuracy);
    for p in &points {
        println!("{:<8} ratio {:<5} accuracy {:.3}  kl {:.6}", p.group.label(), p.ratio, p.accuracy, p.kl);
    }
    Ok(())
}

fn cmd_trace(c: &Common) -> Result<(), CliError> {
    let (cfg, out) = load(c)?;
    let task = cfg.task();
    let mut model = Model::init(cfg.model, cfg.seed)?.with_routing(cfg.routing()?)?;
    train(&mut model, &task, &cfg.train)?;
    let mut records = Vec::new();
    for (i, ts) in gen_task(&task, cfg.model.d_model, Split::Eval, 0, cfg.trace.samples).iter().enumerate() {
        records.extend(emit_trace(&model, &model.sequence(&ts.sample)?, i)?);
    }
    let mut w = create(&out, "trace.csv")?;
    write_trace_csv(&records, &mut w)?;
    finish(w)?;
    println!("{} trace records for {} samples", records.len(), cfg.trace.samples);
    Ok(())
}

fn cmd_overflow(layers: usize) -> Result<(), CliError> {
    let cases = overflow_demo(layers);
    println!("{layers} layers, start value 1.0");
    for o in &cases {
        println!("{o}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Schedule(c) => cmd_schedule(c),
        Cmd::Cost(c) => cmd_cost(c),
        Cmd::Train(c) => cmd_train(c),
        Cmd::Ablate { common, parallel } => cmd_ablate(common, *parallel),
        Cmd::Probe(c) => cmd_probe(c),
        Cmd::Trace(c) => cmd_trace(c),
        Cmd::OverflowDemo { layers } => cmd_overflow(*layers),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
