//! Localization, classification and mask metrics.
//!
//! A prediction localizes correctly when its IoU with a ground-truth box is
//! strictly greater than 0.5. Top-1 / Top-5 localization additionally
//! require the ground-truth category among the top predicted categories.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use crate::bbox::iou;
use crate::bbox::BBox;
use crate::tensor::BinaryMask;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const NUM_THRESHOLDS: usize = 256;

/// Per-image evaluation outcome.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LocRecord {
    pub image_id: String,
    pub predicted_box: BBox,
    /// Best IoU over the ground-truth boxes.
    pub gt_iou: f64,
    pub top1_hit: bool,
    pub top5_hit: bool,
    /// Area of the best-matching ground-truth box over the image area.
    pub gt_area_fraction: f64,
}

impl LocRecord {
    pub fn new(
        image_id: String,
        predicted_box: BBox,
        gt_boxes: &[BBox],
        image_size: (usize, usize),
        gt_category: usize,
        ranked_categories: &[usize],
    ) -> Self {
        let (w, h) = image_size;
        let mut best = (0.0f64, 0.0f64);
        for b in gt_boxes {
            let v = iou(&predicted_box, b);
            if v >= best.0 {
                best = (v, b.area() / (w * h) as f64);
            }
        }
        Self {
            image_id,
            predicted_box,
            gt_iou: best.0,
            top1_hit: ranked_categories.first() == Some(&gt_category),
            top5_hit: ranked_categories.iter().take(5).any(|&c| c == gt_category),
            gt_area_fraction: best.1,
        }
    }

    pub fn loc_correct(&self) -> bool {
        self.gt_iou > IOU_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LocAccuracy {
    pub gt_known: f64,
    pub top1: f64,
    pub top5: f64,
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// GT-known, Top-1 and Top-5 localization accuracy in percent.
pub fn loc_accuracies(records: &[LocRecord]) -> LocAccuracy {
    let n = records.len();
    let gt = records.iter().filter(|r| r.loc_correct()).count();
    let t1 = records.iter().filter(|r| r.loc_correct() && r.top1_hit).count();
    let t5 = records.iter().filter(|r| r.loc_correct() && r.top5_hit).count();
    LocAccuracy {
        gt_known: percent(gt, n),
        top1: percent(t1, n),
        top5: percent(t5, n),
    }
}

/// Top-1 and Top-5 classification accuracy in percent.
pub fn cls_accuracies(records: &[LocRecord]) -> (f64, f64) {
    let n = records.len();
    (
        percent(records.iter().filter(|r| r.top1_hit).count(), n),
        percent(records.iter().filter(|r| r.top5_hit).count(), n),
    )
}

fn mask_iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Number of integer thresholds `t` in `0..=255` with `value > t`.
fn thresholds_passed(value: f64) -> usize {
    if !(value > 0.0) {
        0
    } else {
        (libm::ceil(value) as usize).min(NUM_THRESHOLDS)
    }
}

/// Mask IoU between `map * 255 > t` and the ground-truth mask for every
/// `t` in `0..=255`. `map` holds values in `[0, 1]`, row-major, same size
/// as `gt`.
pub fn iou_threshold_curve(map: &[f64], gt: &BinaryMask) -> Vec<f64> {
    assert_eq!(map.len(), gt.bits().len(), "map and mask sizes differ");
    // Histogram of how many thresholds each pixel passes, split by label.
    let mut pos = vec![0usize; NUM_THRESHOLDS + 1];
    let mut neg = vec![0usize; NUM_THRESHOLDS + 1];
    for (&v, &g) in map.iter().zip(gt.bits()) {
        let q = thresholds_passed(v * 255.0);
        if g {
            pos[q] += 1;
        } else {
            neg[q] += 1;
        }
    }
    let gt_area = gt.area();
    // Pixels predicted at threshold t are those with q > t.
    let mut curve = vec![0.0; NUM_THRESHOLDS];
    let (mut tp, mut fp) = (0usize, 0usize);
    for t in (0..NUM_THRESHOLDS).rev() {
        tp += pos[t + 1];
        fp += neg[t + 1];
        curve[t] = mask_iou(tp, gt_area + fp);
    }
    curve
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PeakResult {
    pub peak_t: u8,
    pub peak_iou: f64,
    pub curve: Vec<f64>,
}

/// Maximum of a threshold curve; the smallest maximizing threshold wins.
pub fn peak_of_curve(curve: &[f64]) -> (u8, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (t, &v) in curve.iter().enumerate() {
        if v > best.1 {
            best = (t, v);
        }
    }
    (best.0 as u8, best.1.max(0.0))
}

pub fn peak_metrics(map: &[f64], gt: &BinaryMask) -> PeakResult {
    let curve = iou_threshold_curve(map, gt);
    let (peak_t, peak_iou) = peak_of_curve(&curve);
    PeakResult { peak_t, peak_iou, curve }
}

/// Element-wise mean of per-image curves.
pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; NUM_THRESHOLDS];
    if curves.is_empty() {
        return out;
    }
    for c in curves {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    let n = curves.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// GT-box area buckets `[0, 0.2)`, `[0.2, 0.8)`, `[0.8, 1]`.
pub const SIZE_BUCKETS: [(f64, f64); 3] = [(0.0, 0.2), (0.2, 0.8), (0.8, 1.0)];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BucketAccuracy {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// GT-known accuracy in percent; `None` for an empty bucket.
    pub gt_known: Option<f64>,
}

pub fn size_bucket_index(fraction: f64) -> usize {
    if fraction < SIZE_BUCKETS[0].1 {
        0
    } else if fraction < SIZE_BUCKETS[1].1 {
        1
    } else {
        2
    }
}

pub fn size_bucket_analysis(records: &[LocRecord]) -> [BucketAccuracy; 3] {
    let mut counts = [(0usize, 0usize); 3];
    for r in records {
        let b = size_bucket_index(r.gt_area_fraction);
        counts[b].0 += 1;
        if r.loc_correct() {
            counts[b].1 += 1;
        }
    }
    core::array::from_fn(|i| BucketAccuracy {
        lower: SIZE_BUCKETS[i].0,
        upper: SIZE_BUCKETS[i].1,
        count: counts[i].0,
        gt_known: (counts[i].0 > 0).then(|| percent(counts[i].1, counts[i].0)),
    })
}

/// Distribution of IoU over correctly localized images.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IouSummary {
    pub count: usize,
    /// `true` when no record was correctly localized; the statistics are then zero.
    pub empty: bool,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub values: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn correct_iou_stats(records: &[LocRecord]) -> IouSummary {
    let mut values: Vec<f64> = records.iter().filter(|r| r.loc_correct()).map(|r| r.gt_iou).collect();
    if values.is_empty() {
        return IouSummary {
            empty: true,
            ..Default::default()
        };
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    IouSummary {
        count: values.len(),
        empty: false,
        min: values[0],
        q1: quantile(&values, 0.25),
        median: quantile(&values, 0.5),
        q3: quantile(&values, 0.75),
        max: values[values.len() - 1],
        mean: values.iter().sum::<f64>() / values.len() as f64,
        values,
    }
}

/// Aggregate evaluation over a split.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub num_images: usize,
    pub gt_known: f64,
    pub top1_loc: f64,
    pub top5_loc: f64,
    pub top1_cls: f64,
    pub top5_cls: f64,
    /// Peak of the mean IoU-threshold curve (primary).
    pub peak_t: u8,
    pub peak_iou: f64,
    /// Mean of per-image peaks (secondary).
    pub mean_image_peak_t: f64,
    pub mean_image_peak_iou: f64,
    pub iou_threshold_curve: Vec<f64>,
    pub correct_iou_distribution: IouSummary,
    pub size_bucket_acc: Vec<BucketAccuracy>,
}

impl EvalReport {
    /// Assembles the report from per-image records and the per-image
    /// threshold curves of images that carry masks.
    pub fn from_records(records: &[LocRecord], curves: &[Vec<f64>]) -> Self {
        let loc = loc_accuracies(records);
        let (top1_cls, top5_cls) = cls_accuracies(records);
        let curve = mean_curve(curves);
        let (peak_t, peak_iou) = if curves.is_empty() { (0, 0.0) } else { peak_of_curve(&curve) };
        let peaks: Vec<(u8, f64)> = curves.iter().map(|c| peak_of_curve(c)).collect();
        let n = peaks.len().max(1) as f64;
        Self {
            num_images: records.len(),
            gt_known: loc.gt_known,
            top1_loc: loc.top1,
            top5_loc: loc.top5,
            top1_cls,
            top5_cls,
            peak_t,
            peak_iou,
            mean_image_peak_t: peaks.iter().map(|p| p.0 as f64).sum::<f64>() / n,
            mean_image_peak_iou: peaks.iter().map(|p| p.1).sum::<f64>() / n,
            iou_threshold_curve: if curves.is_empty() { Vec::new() } else { curve },
            correct_iou_distribution: correct_iou_stats(records),
            size_bucket_acc: size_bucket_analysis(records).to_vec(),
        }
    }
}
