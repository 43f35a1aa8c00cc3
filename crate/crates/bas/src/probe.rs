//! Mask-probe runner: per-sample curves, the averaged curve and rank correlations.

use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use bas_core::data::{augment_eval, Sample};
use bas_core::model::{BasModel, MaskingLevel};
use bas_core::morphology::build_mask_family;
use bas_core::probe::{probe_correlations, probe_model, ProbePoint};
use serde::{Deserialize, Serialize};

use crate::plot::{line_chart, Series, BLUE, GREEN, ORANGE};

pub const CURVE_HEADER: [&str; 5] = ["n", "area_fraction", "entropy", "fg_activation", "bg_activation"];

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub n_range: RangeInclusive<i32>,
    pub samples: usize,
    pub masking: MaskingLevel,
    pub input_size: usize,
}

/// Parses `a..b` (inclusive) with optional signs, e.g. `-4..4`.
pub fn parse_n_range(s: &str) -> Result<RangeInclusive<i32>> {
    let (a, b) = s.split_once("..").with_context(|| format!("n-range `{s}` must look like -4..4"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let lo: i32 = a.trim().parse().with_context(|| format!("bad n-range start `{a}`"))?;
    let hi: i32 = b.trim().parse().with_context(|| format!("bad n-range end `{b}`"))?;
    ensure!(lo <= hi, "n-range `{s}` is empty");
    Ok(lo..=hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub samples: usize,
    pub n_min: i32,
    pub n_max: i32,
    pub masking: MaskingLevel,
    /// Mean over samples of Spearman(area, fg activation).
    pub mean_spearman_fg: Option<f64>,
    /// Mean over samples of Spearman(area, entropy).
    pub mean_spearman_entropy: Option<f64>,
    /// Samples whose correlation was undefined (constant column).
    pub undefined_fg: usize,
    pub undefined_entropy: usize,
    /// Erosion steps dropped for emptying the mask, summed over samples.
    pub dropped_members: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRun {
    pub summary: ProbeSummary,
    pub per_sample: Vec<(String, Vec<ProbePoint>)>,
    pub mean_curve: Vec<ProbePoint>,
}

/// `count` indices spread evenly over `0..len`.
fn spread(len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-`n` average over samples; members missing in some samples are averaged over the rest.
fn average_curve(per_sample: &[(String, Vec<ProbePoint>)]) -> Vec<ProbePoint> {
    let mut ns: Vec<i32> = per_sample.iter().flat_map(|(_, p)| p.iter().map(|q| q.n)).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let pts: Vec<&ProbePoint> = per_sample.iter().flat_map(|(_, p)| p.iter().filter(move |q| q.n == n)).collect();
            let avg = |f: fn(&ProbePoint) -> f64| pts.iter().map(|p| f(p)).sum::<f64>() / pts.len() as f64;
            ProbePoint {
                n,
                area_fraction: avg(|p| p.area_fraction),
                entropy: avg(|p| p.entropy),
                fg_activation: avg(|p| p.fg_activation),
                bg_activation: avg(|p| p.bg_activation),
            }
        })
        .collect()
}

/// Probes up to `opts.samples` masked samples spread over `samples`.
pub fn run_probe(model: &BasModel<f32>, samples: &[Sample], opts: &ProbeOptions) -> Result<ProbeRun> {
    let with_mask: Vec<&Sample> = samples.iter().filter(|s| s.mask.as_ref().is_some_and(|m| !m.is_empty())).collect();
    if with_mask.is_empty() {
        bail!("no sample in the split carries a segmentation mask; the probe needs masks");
    }
    let fs = model.spec().feature_size()?;
    let mut per_sample = Vec::new();
    let mut dropped = 0;
    for i in spread(with_mask.len(), opts.samples) {
        let s = with_mask[i];
        let aug = augment_eval(s, opts.input_size);
        let Some(mask) = aug.mask.filter(|m| !m.is_empty()) else {
            continue;
        };
        let family = build_mask_family(&mask, opts.n_range.clone(), (fs, fs))
            .with_context(|| format!("mask family of image {}", s.image_id))?;
        dropped += family.dropped.len();
        let points = probe_model(model, &aug.image, s.category, &family, opts.masking)
            .with_context(|| format!("probing image {}", s.image_id))?;
        per_sample.push((s.image_id.clone(), points));
    }
    ensure!(!per_sample.is_empty(), "every selected mask vanished after cropping");

    let (mut fg, mut ce) = (Vec::new(), Vec::new());
    for (_, points) in &per_sample {
        let (a, b) = probe_correlations(points);
        fg.extend(a.filter(|v| v.is_finite()));
        ce.extend(b.filter(|v| v.is_finite()));
    }
    let summary = ProbeSummary {
        samples: per_sample.len(),
        n_min: *opts.n_range.start(),
        n_max: *opts.n_range.end(),
        masking: opts.masking,
        mean_spearman_fg: mean(&fg),
        mean_spearman_entropy: mean(&ce),
        undefined_fg: per_sample.len() - fg.len(),
        undefined_entropy: per_sample.len() - ce.len(),
        dropped_members: dropped,
    };
    let mean_curve = average_curve(&per_sample);
    Ok(ProbeRun {
        summary,
        per_sample,
        mean_curve,
    })
}

/// CSV of one curve plus a PNG against area fraction, with the ground-truth
/// mask position as a dashed vertical line. Activations share one axis,
/// entropy gets its own.
pub fn emit_probe_curves(points: &[ProbePoint], csv_path: &Path, png_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(CURVE_HEADER)?;
    for p in points {
        w.write_record([
            p.n.to_string(),
            p.area_fraction.to_string(),
            p.entropy.to_string(),
            p.fg_activation.to_string(),
            p.bg_activation.to_string(),
        ])?;
    }
    w.flush()?;
    let xy = |f: fn(&ProbePoint) -> f64| points.iter().map(|p| (p.area_fraction, f(p))).collect::<Vec<_>>();
    let (ce, fg, bg) = (xy(|p| p.entropy), xy(|p| p.fg_activation), xy(|p| p.bg_activation));
    let marker: Vec<f64> = points.iter().filter(|p| p.n == 0).map(|p| p.area_fraction).collect();
    line_chart(
        png_path,
        &[
            Series { points: &ce, color: ORANGE },
            Series { points: &fg, color: BLUE },
            Series { points: &bg, color: GREEN },
        ],
        &marker,
        false,
    )
}

/// `probe_points.csv`, `probe_curve.csv|png` and `probe_summary.json`.
pub fn write_probe(dir: &Path, run: &ProbeRun) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = csv::Writer::from_path(dir.join("probe_points.csv"))?;
    let mut header = vec!["image_id"];
    header.extend(CURVE_HEADER);
    w.write_record(&header)?;
    for (id, points) in &run.per_sample {
        for p in points {
            w.write_record([
                id.clone(),
                p.n.to_string(),
                p.area_fraction.to_string(),
                p.entropy.to_string(),
                p.fg_activation.to_string(),
                p.bg_activation.to_string(),
            ])?;
        }
    }
    w.flush()?;
    emit_probe_curves(&run.mean_curve, &dir.join("probe_curve.csv"), &dir.join("probe_curve.png"))?;
    fs::write(dir.join("probe_summary.json"), serde_json::to_string_pretty(&run.summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_range_forms() {
        assert_eq!(parse_n_range("-4..4").unwrap(), -4..=4);
        assert_eq!(parse_n_range("-2..=1").unwrap(), -2..=1);
        assert!(parse_n_range("3..1").is_err());
        assert!(parse_n_range("4").is_err());
    }

    #[test]
    fn spread_is_even() {
        assert_eq!(spread(10, 3), vec![0, 3, 6]);
        assert_eq!(spread(2, 5), vec![0, 1]);
    }

    fn pts(n0: i32) -> Vec<ProbePoint> {
        (n0..=1)
            .map(|n| ProbePoint {
                n,
                area_fraction: 0.3 + 0.1 * n as f64,
                entropy: 1.0 - 0.2 * n as f64,
                fg_activation: n as f64,
                bg_activation: -n as f64,
            })
            .collect()
    }

    #[test]
    fn curve_files_have_one_row_per_member() {
        let dir = tempfile::tempdir().unwrap();
        let points = pts(-2);
        let (c, p) = (dir.path().join("c.csv"), dir.path().join("c.png"));
        emit_probe_curves(&points, &c, &p).unwrap();
        let first = fs::read(&c).unwrap();
        let text = String::from_utf8(first.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CURVE_HEADER.join(","));
        assert_eq!(lines.len(), points.len() + 1);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
        assert!(p.exists());
        emit_probe_curves(&points, &c, &p).unwrap();
        assert_eq!(fs::read(&c).unwrap(), first);
    }

    #[test]
    fn average_handles_ragged_families() {
        let avg = average_curve(&[("a".into(), pts(-2)), ("b".into(), pts(0))]);
        assert_eq!(avg.iter().map(|p| p.n).collect::<Vec<_>>(), vec![-2, -1, 0, 1]);
        assert_eq!(avg[0].fg_activation, -2.0);
        assert_eq!(avg[3].fg_activation, 1.0);
    }
}
