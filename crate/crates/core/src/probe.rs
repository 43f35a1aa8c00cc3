//! Mask probe: how cross-entropy and ground-truth-category activation
//! respond as a foreground mask grows from inside the object to beyond it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::losses::cross_entropy;
use crate::model::{BasModel, MaskingLevel};
use crate::morphology::MaskFamily;
use crate::scalar::Scalar;
use crate::tensor::{BinaryMask, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbePoint {
    pub n: i32,
    pub area_fraction: f64,
    /// Cross-entropy of the masked forward pass.
    pub entropy: f64,
    /// Ground-truth score with only the mask kept.
    pub fg_activation: f64,
    /// Ground-truth score with only the complement kept.
    pub bg_activation: f64,
}

fn masked<T: Scalar>(x: &Tensor3<T>, mask: &BinaryMask) -> Tensor3<T> {
    let n = x.plane_len();
    let bits = mask.bits();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if bits[i % n] { v } else { T::zero() })
        .collect();
    Tensor3::from_vec(x.channels(), x.height(), x.width(), data).expect("shape")
}

fn masked_logits<T: Scalar>(
    model: &BasModel<T>,
    image: &Tensor3<T>,
    features: &Tensor3<T>,
    image_mask: &BinaryMask,
    feature_mask: &BinaryMask,
    level: MaskingLevel,
) -> CoreResult<Vec<T>> {
    match level {
        MaskingLevel::Feature => model.head_logits(&masked(features, feature_mask)),
        MaskingLevel::Image => {
            if (image_mask.height(), image_mask.width()) != (image.height(), image.width()) {
                return Err(CoreError::Shape {
                    expected: alloc::format!("{}x{} mask", image.height(), image.width()),
                    got: alloc::format!("{}x{}", image_mask.height(), image_mask.width()),
                });
            }
            model.image_logits(&masked(image, image_mask))
        }
    }
}

/// Probes every member of `family` on one image of category `gt`.
pub fn probe_model<T: Scalar>(
    model: &BasModel<T>,
    image: &Tensor3<T>,
    gt: usize,
    family: &MaskFamily,
    level: MaskingLevel,
) -> CoreResult<Vec<ProbePoint>> {
    let features = model.extract(image)?;
    let (fh, fw) = (features.height(), features.width());
    let mut points = Vec::with_capacity(family.members.len());
    for m in &family.members {
        if (m.feature_mask.height(), m.feature_mask.width()) != (fh, fw) {
            return Err(CoreError::Shape {
                expected: alloc::format!("{fh}x{fw} feature mask"),
                got: alloc::format!("{}x{}", m.feature_mask.height(), m.feature_mask.width()),
            });
        }
        let fg = masked_logits(model, image, &features, &m.mask, &m.feature_mask, level)?;
        let bg = masked_logits(model, image, &features, &m.mask.invert(), &m.feature_mask.invert(), level)?;
        points.push(ProbePoint {
            n: m.n,
            area_fraction: m.mask.area_fraction(),
            entropy: cross_entropy(&fg, gt)?.as_f64(),
            fg_activation: fg[gt].as_f64(),
            bg_activation: bg[gt].as_f64(),
        });
    }
    Ok(points)
}

/// Average ranks (1-based), ties share the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(core::cmp::Ordering::Equal));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant or the
/// inputs have fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

/// Spearman correlations of area against foreground activation and against entropy.
pub fn probe_correlations(points: &[ProbePoint]) -> (Option<f64>, Option<f64>) {
    let area: Vec<f64> = points.iter().map(|p| p.area_fraction).collect();
    let fg: Vec<f64> = points.iter().map(|p| p.fg_activation).collect();
    let ce: Vec<f64> = points.iter().map(|p| p.entropy).collect();
    (spearman(&area, &fg), spearman(&area, &ce))
}
