//! The training loop.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bas_core::data::{augment_train, Sample};
use bas_core::losses::{sample_objective, LossBundle};
use bas_core::model::{BasModel, ModelParams};
use bas_core::optim::Sgd;
use bas_core::CoreError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::dataset::{load_split, SplitKind};
use crate::evaluate::{evaluate, write_evaluation, EvalOptions, Evaluation};

pub const LOG_HEADER: [&str; 7] = ["step", "l_cls", "l_frg", "l_ac", "l_bas_raw", "l_bas_clamped", "total"];

/// Training stopped because a quantity became non-finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainAbort {
    pub step: u64,
    /// Loss component or stage that went non-finite.
    pub component: String,
    pub last_good: PathBuf,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted at step {}: {} became non-finite; last good checkpoint at {}",
            self.step,
            self.component,
            self.last_good.display()
        )
    }
}

impl std::error::Error for TrainAbort {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs: usize,
    /// Set when `max_steps` ended the run before the last epoch.
    pub interrupted: bool,
    pub final_eval: Option<Evaluation>,
    pub best_gt_known: Option<f64>,
}

/// Data order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Augmentation stream for position `pos` of epoch `epoch`.
pub fn augment_rng(seed: u64, epoch: usize, pos: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | pos as u64);
    rng
}

pub fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        k: cfg.eval.k,
        tau: cfg.eval.tau,
        protocol: cfg.eval.protocol,
        input_size: cfg.dataset.input_size,
        ten_crop: cfg.eval.ten_crop,
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    package_version: &'a str,
    config_hash: String,
    os: &'a str,
    arch: &'a str,
    threads: usize,
    seed: u64,
}

fn fnv_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_run_files(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
    let json = serde_json::to_string_pretty(cfg)?;
    fs::write(dir.join("config.json"), &json)?;
    let record = RunRecord {
        package_version: env!("CARGO_PKG_VERSION"),
        config_hash: fnv_hex(json.as_bytes()),
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
        threads: 1,
        seed: cfg.seed,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: BasModel<f32>,
    sgd: Sgd<f32>,
    step: u64,
    log: csv::Writer<fs::File>,
}

enum StepError {
    Abort(String),
    Other(anyhow::Error),
}

impl Trainer<'_> {
    fn checkpoint(&self, epoch: usize, rng: RngState, metrics: Option<serde_json::Value>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(&self.model, Some(&self.sgd.velocity));
        ck.header.epoch = epoch;
        ck.header.step = self.step;
        ck.header.rng = rng;
        ck.header.metrics = metrics;
        ck.header.config = Some(serde_json::to_value(self.cfg)?);
        Ok(ck)
    }

    fn batch_gradient(&self, train: &[Sample], positions: &[usize], order: &[usize], epoch: usize) -> Result<(ModelParams<f32>, LossBundle), StepError> {
        let cfg = self.cfg;
        let scale = 1.0 / positions.len() as f64;
        let mut grads = self.model.params().zeros_like();
        let mut bundles = Vec::with_capacity(positions.len());
        for &pos in positions {
            let sample = &train[order[pos]];
            let mut rng = augment_rng(cfg.seed, epoch, pos);
            let aug = augment_train(sample, cfg.dataset.input_size, cfg.dataset.flip, &mut rng);
            let traced = self.model.amc_forward(&aug.image, sample.category);
            let (out, trace) = match traced {
                Ok(v) => v,
                Err(CoreError::Numerical { what, .. }) => return Err(StepError::Abort(what)),
                Err(e) => return Err(StepError::Other(e.into())),
            };
            let (bundle, g) = match sample_objective(&out, &cfg.loss, scale) {
                Ok(v) => v,
                Err(CoreError::Numerical { what, .. }) => return Err(StepError::Abort(what)),
                Err(e) => return Err(StepError::Other(e.into())),
            };
            self.model.amc_backward(&trace, &g, &mut grads);
            bundles.push(bundle);
        }
        if !grads.all_finite() {
            return Err(StepError::Abort("gradient".into()));
        }
        Ok((grads, LossBundle::mean(&bundles)))
    }

    fn log_step(&mut self, b: &LossBundle) -> Result<()> {
        let row = [b.l_cls, b.l_frg, b.l_ac, b.l_bas_raw, b.l_bas_clamped, b.total];
        let mut rec = vec![self.step.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        self.log.write_record(&rec)?;
        Ok(())
    }

    fn abort(&self, component: String, epoch: usize, batch: usize) -> anyhow::Error {
        let path = self.cfg.output_dir.join("checkpoints").join("last_good.ckpt");
        let rng = RngState { seed: self.cfg.seed, epoch, batch };
        if let Err(e) = self.checkpoint(epoch, rng, None).and_then(|ck| ck.save(&path)) {
            return e.context(format!("{component} became non-finite and the last good checkpoint could not be saved"));
        }
        TrainAbort {
            step: self.step,
            component,
            last_good: path,
        }
        .into()
    }
}

/// Trains according to `cfg`, optionally continuing from a checkpoint.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    write_run_files(cfg)?;
    let (train, categories) = load_split(&cfg.dataset, SplitKind::Train)?;
    let (test, _) = load_split(&cfg.dataset, SplitKind::Test)?;
    anyhow::ensure!(!train.is_empty(), "training split is empty");
    let spec = cfg.model.backbone(cfg.dataset.input_size, categories.len());
    let mut model = BasModel::<f32>::build(spec, cfg.seed)?.with_masking(cfg.model.masking);
    let mut sgd = Sgd::new(cfg.optim, &model);
    let (mut start_epoch, mut start_batch, mut step) = (0, 0, 0);
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        anyhow::ensure!(
            ck.header.spec == *model.spec(),
            "checkpoint {} was trained with a different model spec",
            path.display()
        );
        model = ck.model()?;
        if let Some(v) = ck.velocity {
            sgd.velocity = v;
        }
        start_epoch = ck.header.rng.epoch;
        start_batch = ck.header.rng.batch;
        step = ck.header.step;
    }

    let log_path = cfg.output_dir.join("train_log.csv");
    let append = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = csv::Writer::from_writer(file);
    if !append {
        log.write_record(LOG_HEADER)?;
    }
    let mut t = Trainer {
        cfg,
        model,
        sgd,
        step,
        log,
    };

    let opts = eval_options(cfg);
    let mut best: Option<f64> = None;
    let mut final_eval = None;
    let epoch_path = cfg.output_dir.join("epoch_metrics.csv");
    let append = resume.is_some() && epoch_path.exists();
    let mut epoch_log = csv::Writer::from_writer(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&epoch_path)?,
    );
    if !append {
        epoch_log.write_record(["epoch", "gt_known", "top1_loc", "top5_loc", "top1_cls", "peak_iou"])?;
    }
    let batches = train.len().div_ceil(cfg.batch_size);
    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train.len());
        let first = if epoch == start_epoch { start_batch } else { 0 };
        for batch in first..batches {
            let positions: Vec<usize> = (batch * cfg.batch_size..((batch + 1) * cfg.batch_size).min(train.len())).collect();
            let (grads, bundle) = match t.batch_gradient(&train, &positions, &order, epoch) {
                Ok(v) => v,
                Err(StepError::Abort(what)) => return Err(t.abort(what, epoch, batch)),
                Err(StepError::Other(e)) => return Err(e),
            };
            if let Some(name) = bundle.non_finite_component() {
                return Err(t.abort(name.to_string(), epoch, batch));
            }
            let before = t.model.params().clone();
            let velocity = t.sgd.velocity.clone();
            t.sgd.step(&mut t.model, &grads, epoch);
            if !t.model.params().all_finite() {
                *t.model.params_mut() = before;
                t.sgd.velocity = velocity;
                return Err(t.abort("parameters".into(), epoch, batch));
            }
            t.step += 1;
            t.log_step(&bundle)?;
            if cfg.max_steps.is_some_and(|m| t.step >= m) {
                t.log.flush()?;
                let (e, b) = if batch + 1 == batches { (epoch + 1, 0) } else { (epoch, batch + 1) };
                let rng = RngState { seed: cfg.seed, epoch: e, batch: b };
                t.checkpoint(e, rng, None)?.save(&cfg.output_dir.join("checkpoints").join("last.ckpt"))?;
                return Ok(TrainOutcome {
                    steps: t.step,
                    epochs: e,
                    interrupted: true,
                    final_eval: None,
                    best_gt_known: best,
                });
            }
        }
        t.log.flush()?;
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval.every > 0 && (epoch + 1) % cfg.eval.every == 0;
        let mut metrics = None;
        if (due || last) && !test.is_empty() {
            let ev = evaluate(&t.model, &test, &opts)?;
            let r = &ev.metrics.report;
            epoch_log.write_record([
                (epoch + 1).to_string(),
                r.gt_known.to_string(),
                r.top1_loc.to_string(),
                r.top5_loc.to_string(),
                r.top1_cls.to_string(),
                r.peak_iou.to_string(),
            ])?;
            epoch_log.flush()?;
            metrics = Some(serde_json::to_value(&ev.metrics)?);
            if best.is_none_or(|b| r.gt_known > b) {
                best = Some(r.gt_known);
                let rng = RngState { seed: cfg.seed, epoch: epoch + 1, batch: 0 };
                t.checkpoint(epoch + 1, rng, metrics.clone())?
                    .save(&cfg.output_dir.join("checkpoints").join("best.ckpt"))?;
            }
            if last {
                final_eval = Some(ev);
            }
        }
        let rng = RngState { seed: cfg.seed, epoch: epoch + 1, batch: 0 };
        t.checkpoint(epoch + 1, rng, metrics)?
            .save(&cfg.output_dir.join("checkpoints").join("last.ckpt"))?;
    }
    if let Some(ev) = &final_eval {
        write_evaluation(&cfg.output_dir, ev)?;
    }
    Ok(TrainOutcome {
        steps: t.step,
        epochs: cfg.epochs,
        interrupted: false,
        final_eval,
        best_gt_known: best,
    })
}

/// Model in the state written by the last completed step.
pub fn load_model(path: &Path) -> Result<(BasModel<f32>, Option<RunConfig>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck
        .header
        .config
        .clone()
        .map(serde_json::from_value::<RunConfig>)
        .transpose()
        .context("checkpoint carries an unreadable run configuration")?;
    Ok((ck.model()?, cfg))
}
