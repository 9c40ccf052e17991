use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossloc::config::{Overrides, RunConfig};
use crossloc::experiments::{self, find_sample, load_data, PIPELINE_GRAD_TOL};
use crossloc::report::report_table;
use crossloc::{Error, Result};
use crossloc_core::dataset::Split;
use crossloc_core::model::Variant;

/// Cross-view object localization.
#[derive(Parser)]
#[command(name = "crossloc", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Interaction rounds.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Feature dimension.
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Anchor file (nine `w h` lines).
    #[arg(long, global = true)]
    anchors: Option<PathBuf>,
    /// JSON Lines annotations; synthetic data is used when omitted.
    #[arg(long, global = true)]
    annotations: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CROSSLOC_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster nine anchors from the training split.
    Anchors,
    /// Train and save a checkpoint.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Predict one sample and render its box and heatmap.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id, from any split.
        #[arg(long)]
        id: String,
    },
    /// Finite-difference check of the micro configuration.
    Gradcheck {
        #[arg(long, default_value = "full", value_parser = parse_variant)]
        variant: Variant,
        /// Weights probed per parameter tensor.
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
    },
    /// Write the synthetic dataset to disk.
    GenData,
    /// Train and evaluate one model per k.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
        ks: Vec<usize>,
    },
    /// Train baseline, +CVCAM and +CVCAM+MHSAM with matched budgets.
    Ablate,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (train, val, test)"))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?} (baseline, cvcam, full)"))
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        epochs: c.epochs,
        lr: c.lr,
        k: c.k,
        heads: c.heads,
        dim: c.dim,
        anchors: c.anchors.clone(),
        out: c.out.clone(),
    });
    if let Some(a) = &c.annotations {
        cfg.data.annotations = Some(a.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Anchors => {
            let (path, anchors) = experiments::run_anchors(&cfg)?;
            for (w, h) in anchors.as_slice() {
                println!("{w:.3} {h:.3}");
            }
            println!("wrote {}", path.display());
        }
        Command::Train => {
            let a = experiments::run_train(&cfg, true)?;
            println!("wrote {}", a.checkpoint.display());
        }
        Command::Eval { checkpoint, split } => {
            let report = experiments::run_eval(&cfg, &checkpoint, split)?;
            print!("{}", report_table(&report));
        }
        Command::Infer { checkpoint, id } => {
            let data = load_data(&cfg.data)?;
            let sample = find_sample(&data, &id)?;
            let a = experiments::run_infer(&checkpoint, &sample, &cfg.out)?;
            let b = a.prediction.bbox;
            println!(
                "{}: box ({:.1}, {:.1}, {:.1}, {:.1}) confidence {:.4} IoU {:.4}",
                a.prediction.id, b.x, b.y, b.w, b.h, a.prediction.confidence, a.prediction.iou
            );
            println!("wrote {} and {}", a.boxes.display(), a.heatmap.display());
        }
        Command::Gradcheck { variant, per_tensor } => {
            let err = experiments::run_gradcheck(variant, cfg.model.seed, per_tensor)?;
            println!("max relative error {err:.3e} (tolerance {PIPELINE_GRAD_TOL:.0e})");
            if err.is_nan() || err >= PIPELINE_GRAD_TOL {
                return Err(Error::Config(format!("gradient check failed: {err:.3e}")));
            }
        }
        Command::GenData => {
            let path = experiments::run_gen_data(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::SweepK { ks } => {
            let rows = experiments::run_sweep_k(&cfg, &ks, true)?;
            print!("{}", experiments::sweep_table(&rows));
        }
        Command::Ablate => {
            let rows = experiments::run_ablate(&cfg, true)?;
            print!("{}", experiments::ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
