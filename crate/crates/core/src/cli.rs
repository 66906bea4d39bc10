//! Command-line front end. Every subcommand resolves an
//! [`ExperimentConfig`], writes it next to its outputs and exits with 0 on
//! success, 1 on a configuration error and 2 on any other failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::flops::{format_table, write_flops_csv};
use crate::analysis::inspect::InspectWriters;
use crate::analysis::{
    bench, collapse_experiment, cumulative_weight_curves, flop_estimate, slot_correlation,
    throughput_bench, token_contribution, write_collapse_csv, write_collapse_long_csv, Orientation,
};
use crate::config::{parse_override, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::train::write_metrics_csv;
use crate::model::{build_encoder, evaluate, train, EncoderConfig, SynthTask, TrainState};
use crate::rng::Rng;
use crate::sparse::{dropping_sweep, write_sweep_csv};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Files written into every output directory.
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "softmoe", version = VERSION, about = "Soft MoE routing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the encoder on the synthetic task.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Token-dropping statistics of sparse routers.
    DropSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Max dispatch/combine weight against width.
    Collapse {
        #[command(flatten)]
        common: Common,
    },
    /// Per-image FLOPs of a preset.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        res: Option<usize>,
    },
    /// Forward+backward timing of single layers.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Routing-weight statistics of a checkpoint.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::DropSweep { .. } => "drop-sweep",
            Command::Collapse { .. } => "collapse",
            Command::Flops { .. } => "flops",
            Command::Bench { .. } => "bench",
            Command::Inspect { .. } => "inspect",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::DropSweep { common }
            | Command::Collapse { common }
            | Command::Flops { common, .. }
            | Command::Bench { common }
            | Command::Inspect { common, .. } => common,
        }
    }
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn resolve(cmd: &Command) -> Result<ExperimentConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::config("--config", format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    let overrides = common
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    cfg.apply(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match cmd {
        Command::Flops { model, res, .. } => {
            if let Some(m) = model {
                cfg.flops.model = m.clone();
            }
            if let Some(r) = res {
                cfg.flops.resolution = *r;
            }
        }
        Command::Inspect {
            checkpoint: Some(path),
            ..
        } => cfg.inspect.checkpoint = Some(path.clone()),
        _ => {}
    }
    if common.parallel == 0 {
        return Err(Error::config("--parallel", "must be at least 1"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config and the manifest.
pub fn write_run_metadata(dir: &Path, cmd: &str, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    write_file(
        &dir.join(MANIFEST_FILE),
        &format!("command = {cmd}\nversion = {VERSION}\nseed = {}\n", cfg.seed),
    )
}

/// Runs a parsed command. Output goes to `cfg.out`.
pub fn execute(cmd: &Command) -> Result<ExperimentConfig> {
    let cfg = resolve(cmd)?;
    let out = cfg.out.clone();
    write_run_metadata(&out, cmd.name(), &cfg)?;
    let rng = Rng::new(cfg.seed);
    match cmd {
        Command::Train { .. } => run_train(&cfg, &out, &rng)?,
        Command::DropSweep { common } => {
            let rows = dropping_sweep(&cfg.sweep, &rng, common.parallel)?;
            write_sweep_csv(&out.join("drop_sweep.csv"), &rows)?;
            println!("{} sweep rows -> {}", rows.len(), out.join("drop_sweep.csv").display());
        }
        Command::Collapse { .. } => {
            let mut reports = Vec::new();
            for normalized in [false, true] {
                let c = crate::analysis::CollapseConfig {
                    normalized,
                    ..cfg.collapse.clone()
                };
                reports.push(collapse_experiment(&c, &rng)?);
            }
            write_collapse_csv(&out.join("collapse.csv"), &reports)?;
            write_collapse_long_csv(&out.join("collapse_long.csv"), &reports)?;
            for rep in &reports {
                for r in &rep.records {
                    println!(
                        "d={:<5} normalized={:<5} max_dispatch={:.4} max_combine={:.4}",
                        r.d,
                        r.normalized,
                        r.mean_max_dispatch(),
                        r.mean_max_combine()
                    );
                }
            }
        }
        Command::Flops { .. } => {
            let model = EncoderConfig::preset(&cfg.flops.model)
                .ok_or_else(|| Error::config("flops.model", "unknown preset"))?;
            let cost = flop_estimate(&model, cfg.flops.resolution)?;
            write_flops_csv(&out.join("flops.csv"), &cfg.flops.model, cfg.flops.resolution, &cost)?;
            print!("{}", format_table(&cfg.flops.model, cfg.flops.resolution, &cost));
        }
        Command::Bench { .. } => {
            let rows = throughput_bench(&cfg.bench, &rng)?;
            bench::write_bench_csv(&out.join("bench.csv"), &cfg.bench, &rows)?;
            bench::write_bench_long_csv(&out.join("bench_long.csv"), &rows)?;
            for r in &rows {
                println!("{:<14} E={:<4} median {:.3} ms", r.router.name(), r.experts, r.median_ms);
            }
        }
        Command::Inspect { .. } => run_inspect(&cfg, &out)?,
    }
    Ok(cfg)
}

fn task(cfg: &ExperimentConfig) -> SynthTask {
    SynthTask {
        seed: cfg.seed,
        classes: cfg.model.num_classes,
        image_size: cfg.model.image_size,
        channels: cfg.model.channels,
        noise: cfg.data.noise,
    }
}

fn run_train(cfg: &ExperimentConfig, out: &Path, rng: &Rng) -> Result<()> {
    let task = task(cfg);
    let train_set = task.sample(cfg.data.train_size, 0);
    let test_set = task.sample(cfg.data.test_size, 1);
    let (encoder, params) = build_encoder(&cfg.model, &mut rng.fork(1))?;
    println!(
        "encoder: {} parameters, {} tokens per image",
        params.total_values(),
        cfg.model.tokens()
    );
    let mut state = TrainState::new(params, rng.fork(2));
    let ckpt_dir = out.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let rows = train(&encoder, &mut state, &train_set, &cfg.train, Some(&ckpt_dir))?;
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    checkpoint::save(&out.join("final.smoe"), &state.params)?;

    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    w.write_record(["split", "accuracy", "loss"])?;
    for (name, data) in [("train", &train_set), ("test", &test_set)] {
        let m = evaluate(&encoder, &state.params, data, cfg.data.eval_batch)?;
        println!("{name}: accuracy {:.4}, loss {:.4}", m.accuracy, m.loss);
        w.write_record([name.to_string(), m.accuracy.to_string(), m.loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(out, e))
}

fn run_inspect(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let path = cfg
        .inspect
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("inspect.checkpoint", "no checkpoint given"))?;
    let (encoder, mut params) = build_encoder(&cfg.model, &mut Rng::new(cfg.seed).fork(1))?;
    checkpoint::load_into(path, &mut params)?;
    let images = task(cfg).sample(cfg.inspect.images, 1);
    let fwd = encoder.forward(&params, &images.images, true)?;

    let mut w = InspectWriters::create(out)?;
    for cap in &fwd.routing {
        let d = &cap.weights.dispatch;
        w.contribution(cap.layer, cap.sequence, &token_contribution(d)?)?;
        w.curves(cap.layer, cap.sequence, Orientation::Dispatch, &cumulative_weight_curves(d, Orientation::Dispatch)?)?;
        let c = &cap.weights.combine;
        w.curves(cap.layer, cap.sequence, Orientation::Combine, &cumulative_weight_curves(c, Orientation::Combine)?)?;
    }
    for (layer, moe) in encoder.soft_layers() {
        w.correlation(layer, &slot_correlation(params.get(moe.phi))?)?;
    }
    w.flush(out)?;
    println!(
        "inspected {} soft layers over {} images",
        encoder.soft_layers().len(),
        images.len()
    );
    Ok(())
}

/// Exit status for an error: 1 for configuration problems, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
