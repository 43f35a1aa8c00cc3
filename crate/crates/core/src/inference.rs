//! Top-k fusion of foreground maps and heatmap-to-box extraction.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::bbox::BBox;
use crate::error::{CoreError, CoreResult};
use crate::losses::softmax;
use crate::model::{BasModel, PredictionMapSet};
use crate::nn::resize_bilinear;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Default binarization threshold, as a fraction of the map maximum.
pub const DEFAULT_TAU: f64 = 0.2;

/// Category indices sorted by descending score; ties keep the lower index first.
pub fn rank_categories<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Categories whose maps are fused: the `k` best by score, with
/// `include` replacing the k-th entry when it is not already selected.
pub fn select_topk<T: Scalar>(scores: &[T], k: usize, include: Option<usize>) -> CoreResult<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(CoreError::Config(format!("top-k {k} out of range 1..={}", scores.len())));
    }
    let mut chosen: Vec<usize> = rank_categories(scores).into_iter().take(k).collect();
    if let Some(c) = include {
        if c >= scores.len() {
            return Err(CoreError::Contract(format!("category {c} out of range")));
        }
        if !chosen.contains(&c) {
            chosen[k - 1] = c;
        }
    }
    Ok(chosen)
}

/// Mean of the selected categories' maps, as a single-channel map.
pub fn fuse_topk<T: Scalar>(
    maps: &PredictionMapSet<T>,
    scores: &[T],
    k: usize,
    include: Option<usize>,
) -> CoreResult<Tensor3<T>> {
    if scores.len() != maps.num_categories() {
        return Err(CoreError::Shape {
            expected: format!("{} scores", maps.num_categories()),
            got: format!("{}", scores.len()),
        });
    }
    let chosen = select_topk(scores, k, include)?;
    let mut fused = Tensor3::zeros(1, maps.height(), maps.width());
    for &c in &chosen {
        let src = maps.as_tensor().channel(c);
        for (a, &b) in fused.data_mut().iter_mut().zip(src) {
            *a += b;
        }
    }
    let n = T::from_usize(chosen.len()).expect("count");
    fused.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(fused)
}

/// Rescales a map to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_min_max<T: Scalar>(map: &Tensor3<T>) -> Tensor3<T> {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    if !(range > T::zero()) {
        return map.map(|_| T::zero());
    }
    map.map(|v| (v - lo) / range)
}

/// 4-connected components of the set pixels, largest first by area
/// (earlier raster-order component wins ties).
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()));
    comps
}

/// Box around the largest 4-connected component of `map > tau * max(map)`.
/// Falls back to the full image when nothing survives the threshold.
pub fn extract_box<T: Scalar>(map: &Tensor3<T>, tau: f64) -> BBox {
    let (h, w) = (map.height(), map.width());
    let full = BBox::full(w, h);
    let plane = map.channel(0);
    let max = plane.iter().copied().fold(T::neg_infinity(), T::max);
    if !(max > T::zero()) {
        return full;
    }
    let thr = T::from_f64_lossy(tau) * max;
    let fg: Vec<bool> = plane.iter().map(|&v| v > thr).collect();
    let comps = connected_components(&fg, h, w);
    let Some(best) = comps.first() else {
        return full;
    };
    let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0, 0);
    for &p in best {
        let (y, x) = (p / w, p % w);
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x + 1);
        y2 = y2.max(y + 1);
    }
    BBox {
        x1: x1 as f64,
        y1: y1 as f64,
        x2: x2 as f64,
        y2: y2 as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Ground-truth category is forced into the fused set.
    GtKnown(usize),
    Top1,
    Top5,
}

impl Protocol {
    fn include(&self) -> Option<usize> {
        match self {
            Protocol::GtKnown(gt) => Some(*gt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    /// Fused map at image resolution, min-max normalized.
    pub fused_map: Tensor3<f64>,
    pub predicted_box: BBox,
    pub topk_categories: Vec<usize>,
    pub class_scores: Vec<f64>,
}

/// Single forward pass: fuse, upsample to the input size, normalize and box.
pub fn localize<T: Scalar>(
    model: &BasModel<T>,
    image: &Tensor3<T>,
    protocol: Protocol,
    k: usize,
    tau: f64,
) -> CoreResult<LocalizationResult> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CoreError::Config(format!("tau {tau} must lie in (0, 1)")));
    }
    let inf = model.infer(image)?;
    let topk_categories = select_topk(&inf.logits, k, protocol.include())?;
    let fused = fuse_topk(&inf.maps, &inf.logits, k, protocol.include())?;
    let up = resize_bilinear(&fused.cast::<f64>(), image.height(), image.width());
    let fused_map = normalize_min_max(&up);
    let predicted_box = extract_box(&fused_map, tau);
    let class_scores = softmax(&inf.logits).iter().map(|v| v.as_f64()).collect();
    Ok(LocalizationResult {
        fused_map,
        predicted_box,
        topk_categories,
        class_scores,
    })
}
