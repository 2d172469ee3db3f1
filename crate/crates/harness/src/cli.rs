//! The `sera` command line: argument parsing, artifact layout and exit codes
//! (0 success, 1 usage, 2 runtime error, 3 verification failure).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sera_core::checkpoint;
use sera_synth::{generate_dataset, write_dataset, Dialect};

use crate::config::RunConfig;
use crate::data::{load_data, load_val};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, with_top_k};
use crate::experiments::{ablate_components, ablate_topk, cross_dialect, Runner};
use crate::tables::{components_csv, routing_csv, topk_csv, write};
use crate::train::train;
use crate::{gradcheck, plot};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "sera",
    version,
    about = "Mixture-of-experts referring segmentation at desk scale"
)]
pub struct Cli {
    /// Run configuration (JSON). Defaults to the built-in preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed (the dataset seed for gen-data).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "sera-out")]
    pub out: PathBuf,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Reduced sizes for a single CPU core.
    Desk,
    /// The full toy configuration (64×64 images, depth-6 backbone, 30 epochs).
    Default,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DialectArg {
    Spatial,
    Appearance,
    Relational,
}

impl From<DialectArg> for Dialect {
    fn from(d: DialectArg) -> Self {
        match d {
            DialectArg::Spatial => Dialect::Spatial,
            DialectArg::Appearance => Dialect::Appearance,
            DialectArg::Relational => Dialect::Relational,
        }
    }
}

#[derive(Args, Debug)]
pub struct CheckpointArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val splits and write them under --out.
    GenData {
        #[arg(long, value_enum)]
        dialect: Option<DialectArg>,
        /// Number of training samples.
        #[arg(long)]
        train: Option<usize>,
        /// Number of validation samples.
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train one model; writes report.json, best.ckpt and routing.csv.
    Train {
        #[arg(long, value_enum)]
        dialect: Option<DialectArg>,
        /// Shortens the run (smoke tests).
        #[arg(long)]
        epochs: Option<usize>,
        /// Number of training samples.
        #[arg(long)]
        train_size: Option<usize>,
        /// Number of validation samples.
        #[arg(long)]
        val_size: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured validation split.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Route through this many experts instead of the trained K.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train and evaluate the full model for every K and seed.
    AblateTopk {
        /// Comma-separated expert counts.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
        ks: Vec<usize>,
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Train baseline, +adapter and full models for every seed.
    AblateComponents {
        /// Comma-separated run seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Zero-shot evaluation of a checkpoint on other dialects.
    CrossEval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Comma-separated target dialects.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [DialectArg::Appearance, DialectArg::Relational])]
        targets: Vec<DialectArg>,
    },
    /// Finite-difference gradient verification of every component.
    GradCheck {
        /// Restrict to these components (default: all).
        #[arg(long, value_delimiter = ',')]
        components: Vec<String>,
    },
    /// Per-expert routing statistics of a checkpoint, optionally for several K.
    RouteStats {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Comma-separated K values to evaluate (default: the trained K).
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Render SVGs from reports and CSVs (no model execution).
    Plot {
        /// Input files: report JSON, routing CSV or ablation CSV.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Serialize)]
struct OutputManifest<'a> {
    command: &'a str,
    config_hash: Option<String>,
    seed: Option<u64>,
    files: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, content: &str) -> Result<()> {
        write(&self.dir.join(name), content)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn finish(mut self, command: &str, cfg: Option<&RunConfig>) -> Result<()> {
        self.files.sort();
        let m = OutputManifest {
            command,
            config_hash: cfg.map(RunConfig::hash),
            seed: cfg.map(|c| c.seed),
            files: self.files.clone(),
        };
        write(
            &self.dir.join("manifest.json"),
            &(serde_json::to_string_pretty(&m)? + "\n"),
        )
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => match cli.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Default => RunConfig::default(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.out_dir = Some(cli.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint and checks that it can consume the configured data.
fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<sera_core::SeraModel> {
    let model = checkpoint::load(path)?;
    let b = &model.cfg.backbone;
    if b.image_size != cfg.data.synth.image_size {
        return Err(HarnessError::Config(format!(
            "checkpoint expects {}px images but the data config produces {}px",
            b.image_size, cfg.data.synth.image_size
        )));
    }
    if b.text_vocab < sera_synth::vocab::vocab_size() {
        return Err(HarnessError::Config(format!(
            "checkpoint vocabulary ({}) does not cover the expression vocabulary ({})",
            b.text_vocab,
            sera_synth::vocab::vocab_size()
        )));
    }
    Ok(model)
}

/// Executes a parsed command.
pub fn execute(cli: &Cli) -> Result<i32> {
    let mut out = Outputs::new(&cli.out)?;
    let mut cfg = load_config(cli)?;
    let name = match &cli.command {
        Command::GenData {
            dialect,
            train,
            val,
        } => {
            if let Some(d) = dialect {
                cfg.data.dialect = (*d).into();
            }
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            cfg.data.train = train.unwrap_or(cfg.data.train);
            cfg.data.val = val.unwrap_or(cfg.data.val);
            let ds = generate_dataset(&cfg.data)?;
            write_dataset(&cli.out, &ds)?;
            eprintln!(
                "wrote {} train / {} val {} samples to {}",
                ds.train.len(),
                ds.val.len(),
                cfg.data.dialect.as_str(),
                cli.out.display()
            );
            // The dataset manifest already occupies manifest.json.
            return Ok(EXIT_OK);
        }
        Command::Train {
            dialect,
            epochs,
            train_size,
            val_size,
        } => {
            if let Some(d) = dialect {
                cfg.data.dialect = (*d).into();
            }
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.data.train = train_size.unwrap_or(cfg.data.train);
            cfg.data.val = val_size.unwrap_or(cfg.data.val);
            cfg.validate()?;
            let data = load_data(&cfg)?;
            let ckpt = cli.out.join("best.ckpt");
            let outcome = train(&cfg, &data, Some(&ckpt), &mut |r| {
                eprintln!(
                    "epoch {:>3}  lr {:.1e}  loss {:.4}  val mIoU {:.2}  oIoU {:.2}",
                    r.epoch, r.lr, r.train_loss, r.val.miou, r.val.oiou
                )
            })?;
            out.files.push("best.ckpt".into());
            out.json("config.json", &cfg)?;
            out.json("report.json", &outcome.report)?;
            let ev = evaluate(&outcome.best, &data.val, cfg.eval_batch_size, "val")?;
            if let Some(s) = ev.per_expert_stats {
                out.text(
                    "routing.csv",
                    &routing_csv(&[(cfg.model.fusion.router.top_k, s)])?,
                )?;
            }
            if !outcome.report.frozen_unchanged {
                out.finish("train", Some(&cfg))?;
                return Err(HarnessError::Verification(
                    "frozen parameters changed during training".into(),
                ));
            }
            "train"
        }
        Command::Eval { ckpt, k } => {
            let model = load_checkpoint(&ckpt.checkpoint, &cfg)?;
            let model = match k {
                Some(k) => with_top_k(&model, *k)?,
                None => model,
            };
            let val = load_val(&cfg)?;
            let ev = evaluate(&model, &val, cfg.eval_batch_size, "val")?;
            println!(
                "val mIoU {:.4}  oIoU {:.4}  ({} samples)",
                ev.miou, ev.oiou, ev.n_samples
            );
            if let Some(s) = &ev.per_expert_stats {
                out.text(
                    "routing.csv",
                    &routing_csv(&[(model.cfg.fusion.router.top_k, s.clone())])?,
                )?;
            }
            out.json("metrics.json", &ev)?;
            "eval"
        }
        Command::AblateTopk { ks, seeds } => {
            let mut runner = progress_runner();
            let rows = ablate_topk(&mut runner, &cfg, ks, seeds)?;
            out.text("topk.csv", &topk_csv(&rows)?)?;
            out.json("topk.json", &rows)?;
            "ablate-topk"
        }
        Command::AblateComponents { seeds } => {
            let mut runner = progress_runner();
            let rows = ablate_components(&mut runner, &cfg, seeds)?;
            out.text("components.csv", &components_csv(&rows)?)?;
            out.json("components.json", &rows)?;
            "ablate-components"
        }
        Command::CrossEval { ckpt, targets } => {
            let model = load_checkpoint(&ckpt.checkpoint, &cfg)?;
            let mut runner = Runner::new();
            let mut dialects: Vec<Dialect> = vec![cfg.data.dialect];
            dialects.extend(
                targets
                    .iter()
                    .map(|&t| Dialect::from(t))
                    .filter(|d| *d != cfg.data.dialect),
            );
            let rows = cross_dialect(&mut runner, &cfg, &model, cfg.seed, &dialects)?;
            for r in &rows {
                println!(
                    "{} -> {}: mIoU {:.2} (random object {:.2})",
                    r.source, r.target, r.eval.miou, r.random_object_miou
                );
            }
            out.json("transfer.json", &rows)?;
            "cross-eval"
        }
        Command::GradCheck { components } => {
            let summary = gradcheck::run(components).map_err(HarnessError::Config)?;
            for c in &summary.components {
                println!(
                    "{:<26} max rel err {:.3e}  ({} coords)  {}",
                    c.component,
                    c.max_rel_error,
                    c.coords_checked,
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
            out.json("gradcheck.json", &summary)?;
            out.finish("grad-check", None)?;
            return Ok(if summary.passed { EXIT_OK } else { EXIT_VERIFY });
        }
        Command::RouteStats { ckpt, ks } => {
            let model = load_checkpoint(&ckpt.checkpoint, &cfg)?;
            if model.fusion.is_empty() {
                return Err(HarnessError::Config(
                    "checkpoint has no fusion router".into(),
                ));
            }
            let ks = if ks.is_empty() {
                vec![model.cfg.fusion.router.top_k]
            } else {
                ks.clone()
            };
            let val = load_val(&cfg)?;
            let mut stats = Vec::new();
            for k in ks {
                let ev = evaluate(&with_top_k(&model, k)?, &val, cfg.eval_batch_size, "val")?;
                stats.push((
                    k,
                    ev.per_expert_stats.expect("fusion model reports routing"),
                ));
            }
            out.text("routing.csv", &routing_csv(&stats)?)?;
            "route-stats"
        }
        Command::Plot { inputs } => {
            for input in inputs {
                let svg = plot::render_file(input)?;
                let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
                out.text(&format!("{stem}.svg"), &svg)?;
            }
            out.finish("plot", None)?;
            return Ok(EXIT_OK);
        }
    };
    out.finish(name, Some(&cfg))?;
    Ok(EXIT_OK)
}

fn progress_runner() -> Runner {
    let mut r = Runner::new();
    r.on_epoch = Some(Box::new(|cfg: &RunConfig, e| {
        eprintln!(
            "[{} K={} seed {}] epoch {:>3}  loss {:.4}  val mIoU {:.2}",
            cfg.model.components.as_str(),
            cfg.model.fusion.router.top_k,
            cfg.seed,
            e.epoch,
            e.train_loss,
            e.val.miou
        )
    }));
    r
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(HarnessError::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            EXIT_VERIFY
        }
        Err(HarnessError::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
