//! One-axis hyperparameter sweeps.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bas_core::data::Sample;
use bas_core::model::BasModel;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{load_split, SplitKind};
use crate::evaluate::{evaluate, EvalOptions, Metrics};
use crate::plot::{line_chart, Series, BLUE, GREEN, ORANGE};
use crate::train::{eval_options, load_model, train};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lam,
    K,
    Tau,
    SplitPoint,
}

impl SweepAxis {
    /// Axes that need a new training run per value.
    pub fn retrains(self) -> bool {
        matches!(self, SweepAxis::Lam | SweepAxis::SplitPoint)
    }
}

impl FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lam" | "lambda" => SweepAxis::Lam,
            "k" => SweepAxis::K,
            "tau" => SweepAxis::Tau,
            "split_point" | "split-point" => SweepAxis::SplitPoint,
            _ => bail!("unknown sweep axis `{s}` (expected lam, k, tau or split_point)"),
        })
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Lam => "lam",
            SweepAxis::K => "k",
            SweepAxis::Tau => "tau",
            SweepAxis::SplitPoint => "split_point",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub metrics: Metrics,
    pub seconds: f64,
}

/// Candidate thresholds of the automatic tau search.
pub fn auto_tau_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

/// Threshold from the grid with the best GT-known accuracy on `samples`;
/// the smallest wins ties.
pub fn auto_tau(model: &BasModel<f32>, samples: &[Sample], opts: &EvalOptions) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut table = Vec::new();
    for tau in auto_tau_grid() {
        let ev = evaluate(model, samples, &EvalOptions { tau, ..*opts })?;
        table.push((tau, ev.metrics.report.gt_known));
    }
    let best = table.iter().fold(table[0], |b, &r| if r.1 > b.1 { r } else { b });
    Ok((best.0, table))
}

fn parse_num<T: FromStr>(axis: SweepAxis, v: &str) -> Result<T> {
    v.trim().parse().ok().with_context(|| format!("`{v}` is not a valid {axis} value"))
}

/// Runs the sweep and writes `sweep_<axis>.csv|png` under `cfg.output_dir`.
///
/// Retraining axes train one run per value in `output_dir/<axis>_<value>`.
/// The others evaluate a single model: `checkpoint` when given, otherwise
/// one trained from `cfg` in `output_dir/base`.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String], checkpoint: Option<&Path>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("sweep over {axis} needs at least one value");
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::with_capacity(values.len());
    if axis.retrains() {
        for v in values {
            let mut run = cfg.clone();
            match axis {
                SweepAxis::Lam => run.loss.lam = parse_num(axis, v)?,
                _ => run.model.split_point = v.trim().to_string(),
            }
            run.output_dir = out.join(format!("{axis}_{}", v.trim()));
            run.validate()?;
            let start = Instant::now();
            let outcome = train(&run, None).with_context(|| format!("training with {axis}={v}"))?;
            let ev = outcome.final_eval.context("the test split is empty, nothing to report")?;
            rows.push(SweepRow {
                value: v.trim().to_string(),
                metrics: ev.metrics,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    } else {
        let (model, base) = match checkpoint {
            Some(p) => {
                let (m, c) = load_model(p)?;
                (m, c.unwrap_or_else(|| cfg.clone()))
            }
            None => {
                let mut run = cfg.clone();
                run.output_dir = out.join("base");
                train(&run, None)?;
                let (m, _) = load_model(&run.output_dir.join("checkpoints").join("last.ckpt"))?;
                (m, run)
            }
        };
        let (test, _) = load_split(&base.dataset, SplitKind::Test)?;
        let opts = eval_options(&base);
        for v in values {
            let o = match axis {
                SweepAxis::K => EvalOptions { k: parse_num(axis, v)?, ..opts },
                _ => EvalOptions { tau: parse_num(axis, v)?, ..opts },
            };
            let start = Instant::now();
            let ev = evaluate(&model, &test, &o).with_context(|| format!("evaluating {axis}={v}"))?;
            rows.push(SweepRow {
                value: v.trim().to_string(),
                metrics: ev.metrics,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    write_sweep(&out, axis, &rows)?;
    Ok(rows)
}

pub fn write_sweep(dir: &Path, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(format!("sweep_{axis}.csv")))?;
    w.write_record([
        axis.to_string().as_str(),
        "gt_known",
        "top1_loc",
        "top5_loc",
        "top1_cls",
        "top5_cls",
        "peak_t",
        "peak_iou",
        "seconds",
    ])?;
    for r in rows {
        let m = &r.metrics.report;
        w.write_record([
            r.value.clone(),
            m.gt_known.to_string(),
            m.top1_loc.to_string(),
            m.top5_loc.to_string(),
            m.top1_cls.to_string(),
            m.top5_cls.to_string(),
            m.peak_t.to_string(),
            m.peak_iou.to_string(),
            r.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    // Non-numeric values (stage names) are plotted at their position.
    let x = |i: usize, v: &str| v.parse::<f64>().unwrap_or(i as f64);
    let pts = |f: fn(&Metrics) -> f64| -> Vec<(f64, f64)> {
        rows.iter().enumerate().map(|(i, r)| (x(i, &r.value), f(&r.metrics))).collect()
    };
    let (gt, t1, t5) = (pts(|m| m.report.gt_known), pts(|m| m.report.top1_loc), pts(|m| m.report.top5_loc));
    line_chart(
        &dir.join(format!("sweep_{axis}.png")),
        &[
            Series { points: &gt, color: BLUE },
            Series { points: &t1, color: ORANGE },
            Series { points: &t5, color: GREEN },
        ],
        &[],
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse() {
        assert_eq!("lam".parse::<SweepAxis>().unwrap(), SweepAxis::Lam);
        assert_eq!("split-point".parse::<SweepAxis>().unwrap(), SweepAxis::SplitPoint);
        assert!("gamma".parse::<SweepAxis>().is_err());
        assert!(SweepAxis::Lam.retrains() && !SweepAxis::Tau.retrains());
    }

    #[test]
    fn tau_grid() {
        let g = auto_tau_grid();
        assert_eq!(g.len(), 10);
        assert!((g[0] - 0.05).abs() < 1e-12 && (g[9] - 0.5).abs() < 1e-12);
    }
}
