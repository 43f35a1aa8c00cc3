//! Test-split evaluation and its artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use bas_core::data::{apply_window, augment_eval, ten_crop_windows, Sample};
use bas_core::inference::{localize, rank_categories};
use bas_core::losses::softmax;
use bas_core::metrics::{iou_threshold_curve, EvalReport, LocRecord};
use bas_core::model::BasModel;
use serde::{Deserialize, Serialize};

use crate::config::ProtocolKind;
use crate::plot::{bar_chart, line_chart, Series, BLUE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub tau: f64,
    pub protocol: ProtocolKind,
    pub input_size: usize,
    /// Classify with the mean of ten crops instead of the center crop.
    pub ten_crop: bool,
}

/// Report plus the settings that produced it; this is `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub protocol: ProtocolKind,
    pub k: usize,
    pub tau: f64,
    #[serde(default)]
    pub ten_crop: bool,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub records: Vec<LocRecord>,
}

/// Mean class probabilities over the ten standard crops.
pub fn ten_crop_scores(model: &BasModel<f32>, sample: &Sample, input_size: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; model.num_categories()];
    for win in ten_crop_windows(input_size) {
        let aug = apply_window(sample, input_size, &win);
        for (m, p) in mean.iter_mut().zip(softmax(&model.image_logits(&aug.image)?)) {
            *m += p as f64 / 10.0;
        }
    }
    Ok(mean)
}

/// Center-crop localization of every sample.
pub fn evaluate(model: &BasModel<f32>, samples: &[Sample], opts: &EvalOptions) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(samples.len());
    let mut curves = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let aug = augment_eval(s, opts.input_size);
        let res = localize(model, &aug.image, opts.protocol.protocol(s.category), opts.k, opts.tau)
            .with_context(|| format!("evaluating image {} (index {i})", s.image_id))?;
        let ranked = if opts.ten_crop {
            rank_categories(&ten_crop_scores(model, s, opts.input_size)?)
        } else {
            rank_categories(&res.class_scores)
        };
        let size = (aug.image.width(), aug.image.height());
        records.push(LocRecord::new(s.image_id.clone(), res.predicted_box, &aug.boxes, size, s.category, &ranked));
        if let Some(mask) = &aug.mask {
            if !mask.is_empty() {
                curves.push(iou_threshold_curve(res.fused_map.data(), mask));
            }
        }
    }
    Ok(Evaluation {
        metrics: Metrics {
            protocol: opts.protocol,
            k: opts.k,
            tau: opts.tau,
            ten_crop: opts.ten_crop,
            report: EvalReport::from_records(&records, &curves),
        },
        records,
    })
}

#[derive(Serialize)]
struct ImageLine<'a> {
    image_id: &'a str,
    predicted_box: [f64; 4],
    gt_iou: f64,
    top1_hit: bool,
    top5_hit: bool,
}

pub fn write_jsonl(path: &Path, records: &[LocRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let b = r.predicted_box;
        let line = ImageLine {
            image_id: &r.image_id,
            predicted_box: [b.x1, b.y1, b.x2, b.y2],
            gt_iou: r.gt_iou,
            top1_hit: r.top1_hit,
            top5_hit: r.top5_hit,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, metrics)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// `metrics.json`, `per_image.jsonl` and `curves/*` under `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves)?;
    write_metrics(&dir.join("metrics.json"), &eval.metrics)?;
    write_jsonl(&dir.join("per_image.jsonl"), &eval.records)?;
    let report = &eval.metrics.report;

    let mut w = csv::Writer::from_path(curves.join("iou_threshold.csv"))?;
    w.write_record(["threshold", "mean_iou"])?;
    for (t, v) in report.iou_threshold_curve.iter().enumerate() {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    let pts: Vec<(f64, f64)> = report.iou_threshold_curve.iter().enumerate().map(|(t, &v)| (t as f64, v)).collect();
    let peak = if pts.is_empty() { vec![] } else { vec![report.peak_t as f64] };
    line_chart(&curves.join("iou_threshold.png"), &[Series { points: &pts, color: BLUE }], &peak, true)?;

    let dist = &report.correct_iou_distribution;
    let mut w = csv::Writer::from_path(curves.join("iou_distribution.csv"))?;
    w.write_record(["iou"])?;
    for v in &dist.values {
        w.write_record([v.to_string()])?;
    }
    w.flush()?;
    // Ten bins over (0.5, 1].
    let mut bins = [0.0; 10];
    for &v in &dist.values {
        bins[(((v - 0.5) / 0.05) as usize).min(9)] += 1.0;
    }
    let max = bins.iter().copied().fold(1.0, f64::max);
    bar_chart(&curves.join("iou_distribution.png"), &bins, max)?;

    let mut w = csv::Writer::from_path(curves.join("size_buckets.csv"))?;
    w.write_record(["lower", "upper", "count", "gt_known"])?;
    for b in &report.size_bucket_acc {
        let acc = b.gt_known.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([b.lower.to_string(), b.upper.to_string(), b.count.to_string(), acc])?;
    }
    w.flush()?;
    let accs: Vec<f64> = report.size_bucket_acc.iter().map(|b| b.gt_known.unwrap_or(0.0)).collect();
    bar_chart(&curves.join("size_buckets.png"), &accs, 100.0)?;
    Ok(())
}
