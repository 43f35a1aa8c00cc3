use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bas::checkpoint::Checkpoint;
use bas::config::{ProtocolKind, RunConfig};
use bas::dataset::{load_split, SplitKind};
use bas::evaluate::{evaluate, write_evaluation, EvalOptions};
use bas::gen_data::generate_dataset;
use bas::probe::{parse_n_range, run_probe, write_probe, ProbeOptions};
use bas::sweep::{auto_tau, sweep, SweepAxis};
use bas::train::{eval_options, train};
use bas::visualize::{select, visualize};
use bas_core::model::MaskingLevel;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bas", version, about = "Background activation suppression for weakly supervised localization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `loss.lam=0.5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Dataset root (same as `--set dataset.root=...`).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct InferenceArgs {
    /// Number of top categories fused into the map.
    #[arg(long)]
    topk: Option<usize>,
    /// Box threshold as a fraction of the map maximum, or `auto`.
    #[arg(long)]
    tau: Option<String>,
    /// gt_known, top1 or top5.
    #[arg(long)]
    protocol: Option<ProtocolKind>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inf: InferenceArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitKind,
    },
    /// Sweep one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lam, k, tau or split_point.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Model for k and tau sweeps; trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mask probe: activation and entropy against mask area.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitKind,
        /// Inclusive erosion/dilation steps, e.g. -4..4.
        #[arg(long, default_value = "-4..4", allow_hyphen_values = true)]
        n_range: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Mask the input image instead of the feature map.
        #[arg(long)]
        image_level: bool,
    },
    /// Heatmap overlays with ground truth in red and prediction in green.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inf: InferenceArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitKind,
        /// Comma-separated image ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Number of images when no ids are given.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Write the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

/// Config from `--config`, else the checkpoint's own, else defaults; then overrides.
fn resolve(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, checkpoint) {
        (Some(p), _) => RunConfig::load(p, &[])?,
        (None, Some(ck)) => Checkpoint::load(ck)?
            .header
            .config
            .map(|v| RunConfig::from_value(v, &[]))
            .transpose()?
            .unwrap_or_default(),
        (None, None) => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&common.set)?;
    if let Some(root) = &common.data_root {
        cfg.dataset.root = root.clone();
    }
    if let Some(out) = &common.out_dir {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

enum Tau {
    Fixed(f64),
    Auto,
}

fn apply_inference(cfg: &mut RunConfig, inf: &InferenceArgs) -> Result<Tau> {
    if let Some(k) = inf.topk {
        cfg.eval.k = k;
    }
    if let Some(p) = inf.protocol {
        cfg.eval.protocol = p;
    }
    let tau = match inf.tau.as_deref() {
        Some("auto") => Tau::Auto,
        Some(t) => Tau::Fixed(t.parse().with_context(|| format!("--tau `{t}` is neither a number nor `auto`"))?),
        None => Tau::Fixed(cfg.eval.tau),
    };
    if let Tau::Fixed(t) = tau {
        cfg.eval.tau = t;
    }
    cfg.validate()?;
    Ok(tau)
}

/// Picks tau on the training split when asked to.
fn resolve_tau(tau: Tau, model: &bas_core::model::BasModel<f32>, cfg: &RunConfig, opts: &mut EvalOptions) -> Result<()> {
    if let Tau::Auto = tau {
        let (train, _) = load_split(&cfg.dataset, SplitKind::Train)?;
        let (best, table) = auto_tau(model, &train, opts)?;
        for (t, acc) in table {
            eprintln!("tau {t:.2}: gt_known {acc:.2}");
        }
        eprintln!("selected tau {best:.2}");
        opts.tau = best;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, resume } => {
            let cfg = resolve(&common, None)?;
            let outcome = train(&cfg, resume.as_deref())?;
            match &outcome.final_eval {
                Some(ev) => println!("{}", serde_json::to_string_pretty(&ev.metrics)?),
                None => println!("stopped after {} steps; resume from {}", outcome.steps, cfg.output_dir.join("checkpoints/last.ckpt").display()),
            }
        }
        Cmd::Eval { common, inf, checkpoint, split } => {
            let mut cfg = resolve(&common, Some(&checkpoint))?;
            let tau = apply_inference(&mut cfg, &inf)?;
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let mut opts = eval_options(&cfg);
            resolve_tau(tau, &model, &cfg, &mut opts)?;
            let (samples, _) = load_split(&cfg.dataset, split)?;
            let ev = evaluate(&model, &samples, &opts)?;
            write_evaluation(&cfg.output_dir, &ev)?;
            println!("{}", serde_json::to_string_pretty(&ev.metrics)?);
        }
        Cmd::Sweep { common, axis, values, checkpoint } => {
            let cfg = resolve(&common, None)?;
            let rows = sweep(&cfg, axis, &values, checkpoint.as_deref())?;
            println!("{axis},gt_known,top1_loc,top5_loc");
            for r in rows {
                let m = &r.metrics.report;
                println!("{},{:.2},{:.2},{:.2}", r.value, m.gt_known, m.top1_loc, m.top5_loc);
            }
        }
        Cmd::Probe { common, checkpoint, split, n_range, samples, image_level } => {
            let cfg = resolve(&common, Some(&checkpoint))?;
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let (data, _) = load_split(&cfg.dataset, split)?;
            let opts = ProbeOptions {
                n_range: parse_n_range(&n_range)?,
                samples,
                masking: if image_level { MaskingLevel::Image } else { MaskingLevel::Feature },
                input_size: cfg.dataset.input_size,
            };
            let run = run_probe(&model, &data, &opts)?;
            write_probe(&cfg.output_dir, &run)?;
            println!("{}", serde_json::to_string_pretty(&run.summary)?);
        }
        Cmd::Visualize { common, inf, checkpoint, split, ids, count } => {
            let mut cfg = resolve(&common, Some(&checkpoint))?;
            let tau = apply_inference(&mut cfg, &inf)?;
            let model = Checkpoint::load(&checkpoint)?.model()?;
            let mut opts = eval_options(&cfg);
            resolve_tau(tau, &model, &cfg, &mut opts)?;
            let (samples, _) = load_split(&cfg.dataset, split)?;
            let chosen = select(&samples, &ids, count)?;
            for p in visualize(&model, &chosen, &opts, &cfg.output_dir.join("overlays"))? {
                println!("{}", p.display());
            }
        }
        Cmd::GenData { common } => {
            let cfg = resolve(&common, None)?;
            let root = common.out_dir.unwrap_or(cfg.dataset.root);
            let n = generate_dataset(&cfg.dataset.synthetic, &root)?;
            println!("wrote {n} images to {}", root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
