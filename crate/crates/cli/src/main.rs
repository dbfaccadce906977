mod commands;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};
use sphere_ssm::analysis::TrackingAllocator;
use sphere_ssm::model::load_checkpoint;
use sphere_ssm::training::Strategy;

use commands::{checkpoint_kind, write_json_file, Outcome};
use config::{key_help, Resolver, RunConfig, SEED_ENV};
use error::{CliError, ErrorKind};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "sphere-ssm", version, about = "Icosphere patch sequence models: data, training, analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.epochs=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (overrides the config and $SPHERE_SSM_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write an icosphere mesh as JSON.
    Mesh {
        #[arg(long)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic cohort (manifest.csv, .simf files, synth_meta.json).
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set synth.num_subjects=N`.
        #[arg(long)]
        subjects: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Autoregressive next-patch pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised fine-tuning of a checkpoint's backbone.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Per-vertex nullification sensitivity on the test split.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `all` or a channel name; repeatable. Overrides sensitivity.modes.
        #[arg(long = "mode")]
        modes: Vec<String>,
        /// Overrides sensitivity.vertex_stride.
        #[arg(long)]
        vertex_stride: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Time scan and attention blocks across patch orders.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated patch orders. Overrides bench.orders.
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<usize>>,
        /// Overrides bench.repeats.
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Mesh { .. } => "mesh",
            Cmd::GenData { .. } => "gen-data",
            Cmd::Train { .. } => "train",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::Finetune { .. } => "finetune",
            Cmd::Eval { .. } => "eval",
            Cmd::Sensitivity { .. } => "sensitivity",
            Cmd::Bench { .. } => "bench",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::Mesh { common, .. }
            | Cmd::GenData { common, .. }
            | Cmd::Train { common, .. }
            | Cmd::Pretrain { common, .. }
            | Cmd::Finetune { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::Sensitivity { common, .. }
            | Cmd::Bench { common, .. } => common,
        }
    }

    /// Directory receiving run.json / error.json.
    fn run_dir(&self) -> PathBuf {
        match self {
            Cmd::Mesh { out, .. } => out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
            Cmd::GenData { out, .. }
            | Cmd::Train { out, .. }
            | Cmd::Pretrain { out, .. }
            | Cmd::Finetune { out, .. }
            | Cmd::Eval { out, .. }
            | Cmd::Sensitivity { out, .. }
            | Cmd::Bench { out, .. } => out.clone(),
        }
    }

    /// Defaults before any file or override; fine-tuning picks its schedule
    /// from the kind of checkpoint it starts from.
    fn defaults(&self) -> Result<RunConfig, CliError> {
        Ok(match self {
            Cmd::Pretrain { .. } => RunConfig::for_strategy(Strategy::ArPretrain),
            Cmd::Finetune { checkpoint, .. } => {
                let ck = load_checkpoint(checkpoint)?;
                let s = if checkpoint_kind(&ck) == Some("ar") {
                    Strategy::ArFinetune
                } else {
                    Strategy::Finetune
                };
                RunConfig::for_strategy(s)
            }
            _ => RunConfig::default(),
        })
    }

    /// Subcommand flags that stand in for config keys.
    fn flag_overrides(&self) -> Vec<(String, Value)> {
        let mut v = Vec::new();
        if let Some(w) = self.common().workers {
            v.push(("workers".into(), json!(w)));
        }
        match self {
            Cmd::GenData { subjects: Some(n), .. } => v.push(("synth.num_subjects".into(), json!(n))),
            Cmd::Sensitivity { modes, vertex_stride, .. } => {
                if !modes.is_empty() {
                    v.push(("sensitivity.modes".into(), json!(modes)));
                }
                if let Some(s) = vertex_stride {
                    v.push(("sensitivity.vertex_stride".into(), json!(s)));
                }
            }
            Cmd::Bench { orders, repeats, .. } => {
                if let Some(o) = orders {
                    v.push(("bench.orders".into(), json!(o)));
                }
                if let Some(r) = repeats {
                    v.push(("bench.repeats".into(), json!(r)));
                }
            }
            _ => {}
        }
        v
    }
}

fn help_strategy(name: &str) -> Strategy {
    match name {
        "pretrain" => Strategy::ArPretrain,
        "finetune" => Strategy::Finetune,
        _ => Strategy::Scratch,
    }
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let mut text = key_help(help_strategy(&name));
        if name == "finetune" {
            text.push_str("\nFrom an autoregressive checkpoint the train.* defaults are those of ar_finetune.\n");
        }
        cmd = cmd.mut_subcommand(&name, |c| c.after_help(text));
    }
    cmd
}

fn resolve(cmd: &Cmd) -> Result<(RunConfig, &'static str), CliError> {
    let common = cmd.common();
    let mut r = Resolver::new(&cmd.defaults()?);
    if let Some(p) = &common.config {
        r.merge_file(p)?;
    }
    for s in &common.set {
        r.set(s)?;
    }
    for (k, v) in cmd.flag_overrides() {
        r.set(&format!("{k}={v}"))?;
    }
    let env = std::env::var(SEED_ENV).ok();
    r.finish(common.seed, env.as_deref())
}

fn execute(cmd: &Cmd, cfg: &RunConfig) -> Result<Outcome, CliError> {
    match cmd {
        Cmd::Mesh { order, out, .. } => commands::mesh(*order, out),
        Cmd::GenData { out, .. } => commands::gen_data(cfg, out),
        Cmd::Train { data, out, .. } => commands::train(cfg, data, out),
        Cmd::Pretrain { data, out, .. } => commands::pretrain(cfg, data, out),
        Cmd::Finetune {
            checkpoint, data, out, ..
        } => commands::finetune(cfg, checkpoint, data, out),
        Cmd::Eval {
            checkpoint,
            data,
            out,
            split,
            ..
        } => commands::eval(checkpoint, data, out, split),
        Cmd::Sensitivity {
            checkpoint, data, out, ..
        } => commands::sensitivity(cfg, checkpoint, data, out),
        Cmd::Bench { out, .. } => commands::bench(cfg, out),
    }
}

fn run(cmd: &Cmd) -> Result<(), CliError> {
    let (cfg, seed_source) = resolve(cmd)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| CliError::usage(format!("workers: {e}")))?;
    }
    let result = execute(cmd, &cfg);
    let (status, outcome) = match &result {
        Ok(o) => ("ok", Some(o)),
        Err(_) => ("error", None),
    };
    let dir = cmd.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    write_json_file(
        &dir.join("run.json"),
        &json!({
            "schema": "sphere-ssm-run/1",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": cmd.name(),
            "status": status,
            "seed": cfg.seed,
            "seed_source": seed_source,
            "config": cfg,
            "outputs": outcome.map(|o| &o.outputs),
            "results": outcome.map(|o| &o.results),
        }),
    )?;
    result.map(|_| ())
}

fn report_error(e: &CliError, dir: Option<&Path>, subcommand: &str) {
    eprintln!("error: {e}");
    let Some(dir) = dir else { return };
    let body = json!({
        "code": e.kind.exit_code(),
        "kind": e.kind,
        "subcommand": subcommand,
        "message": e.message,
    });
    if std::fs::create_dir_all(dir).is_ok() {
        if let Err(w) = write_json_file(&dir.join("error.json"), &body) {
            eprintln!("error: could not write error.json: {w}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { ErrorKind::Usage.exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(ErrorKind::Usage.exit_code() as u8);
        }
    };
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, Some(&cli.cmd.run_dir()), cli.cmd.name());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
