//! The four AMC losses and the weighted objective.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::model::{AmcGrad, AmcOutputs};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossWeights {
    /// Foreground-guidance (masked cross-entropy) weight.
    pub alpha: f64,
    /// Area-constraint weight.
    pub beta: f64,
    /// Background-suppression weight.
    pub lam: f64,
    /// Denominator guard of the suppression ratio.
    pub epsilon: f64,
}

impl Default for LossWeights {
    /// VGG16 / CUB-200-2011 setting.
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.7,
            lam: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> CoreResult<()> {
        let all = [self.alpha, self.beta, self.lam, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Config("loss weights must be finite".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.lam < 0.0 {
            return Err(CoreError::Config("loss weights must be non-negative".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(CoreError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn term_scales(&self) -> TermScales {
        TermScales {
            cls: 1.0,
            frg: self.alpha,
            ac: self.beta,
            bas: self.lam,
        }
    }
}

/// Multipliers applied to each loss term when forming a gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermScales {
    pub cls: f64,
    pub frg: f64,
    pub ac: f64,
    pub bas: f64,
}

impl TermScales {
    pub const CLS: Self = Self::only(1.0, 0.0, 0.0, 0.0);
    pub const FRG: Self = Self::only(0.0, 1.0, 0.0, 0.0);
    pub const AC: Self = Self::only(0.0, 0.0, 1.0, 0.0);
    pub const BAS: Self = Self::only(0.0, 0.0, 0.0, 1.0);

    const fn only(cls: f64, frg: f64, ac: f64, bas: f64) -> Self {
        Self { cls, frg, ac, bas }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_frg: f64,
    pub l_ac: f64,
    pub l_bas_raw: f64,
    pub l_bas_clamped: f64,
    pub total: f64,
}

impl LossBundle {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("l_cls", self.l_cls),
            ("l_frg", self.l_frg),
            ("l_ac", self.l_ac),
            ("l_bas_raw", self.l_bas_raw),
            ("l_bas_clamped", self.l_bas_clamped),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }

    /// Component-wise mean.
    pub fn mean(bundles: &[LossBundle]) -> LossBundle {
        if bundles.is_empty() {
            return LossBundle::default();
        }
        let n = bundles.len() as f64;
        let sum = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        LossBundle {
            l_cls: sum(|b| b.l_cls),
            l_frg: sum(|b| b.l_frg),
            l_ac: sum(|b| b.l_ac),
            l_bas_raw: sum(|b| b.l_bas_raw),
            l_bas_clamped: sum(|b| b.l_bas_clamped),
            total: sum(|b| b.total),
        }
    }
}

fn ensure_finite<T: Scalar>(values: &[T], what: &str) -> CoreResult<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Numerical {
            what: what.to_string(),
            index: 0,
        })
    }
}

/// Unclamped background-to-total activation ratio `S_bg / (S + eps)`.
pub fn loss_bas_raw<T: Scalar>(s: T, s_bg: T, epsilon: T) -> CoreResult<T> {
    ensure_finite(&[s, s_bg, epsilon], "background suppression inputs")?;
    Ok(s_bg / (s + epsilon))
}

/// Background suppression loss, cut off to `[0, 1]`.
pub fn loss_bas<T: Scalar>(s: T, s_bg: T, epsilon: T) -> CoreResult<T> {
    let raw = loss_bas_raw(s, s_bg, epsilon)?;
    if !raw.is_finite() {
        return Err(CoreError::Numerical {
            what: format!("background suppression ratio {s_bg}/({s}+{epsilon})"),
            index: 0,
        });
    }
    Ok(raw.max(T::zero()).min(T::one()))
}

/// Mean foreground map value.
pub fn loss_ac<T: Scalar>(m_fg: &Tensor3<T>) -> T {
    let n = T::from_usize(m_fg.data().len().max(1)).expect("size");
    m_fg.data().iter().copied().sum::<T>() / n
}

fn log_softmax_at<T: Scalar>(logits: &[T], index: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    logits[index] - lse
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Softmax cross-entropy against a one-hot label.
pub fn cross_entropy<T: Scalar>(logits: &[T], gt: usize) -> CoreResult<T> {
    if gt >= logits.len() {
        return Err(CoreError::Contract(format!("label {gt} out of range for {} scores", logits.len())));
    }
    ensure_finite(logits, "logits")?;
    Ok(-log_softmax_at(logits, gt))
}

/// Foreground guidance loss on the masked scores.
pub fn loss_frg<T: Scalar>(y_fg: &[T], gt: usize) -> CoreResult<T> {
    cross_entropy(y_fg, gt)
}

/// Classification loss on the unmasked scores.
pub fn loss_cls<T: Scalar>(y: &[T], gt: usize) -> CoreResult<T> {
    cross_entropy(y, gt)
}

pub fn total_loss(l_cls: f64, l_frg: f64, l_ac: f64, l_bas_raw: f64, w: &LossWeights) -> LossBundle {
    let l_bas_clamped = l_bas_raw.max(0.0).min(1.0);
    LossBundle {
        l_cls,
        l_frg,
        l_ac,
        l_bas_raw,
        l_bas_clamped,
        total: l_cls + w.alpha * l_frg + w.beta * l_ac + w.lam * l_bas_clamped,
    }
}

/// Per-sample loss components for one forward pass.
pub fn sample_losses<T: Scalar>(out: &AmcOutputs<T>, w: &LossWeights) -> CoreResult<LossBundle> {
    let eps = T::from_f64_lossy(w.epsilon);
    let l_cls = loss_cls(&out.y, out.gt)?.as_f64();
    let l_frg = loss_frg(&out.y_fg, out.gt)?.as_f64();
    let l_ac = loss_ac(&out.m_fg).as_f64();
    let l_bas_raw = loss_bas_raw(out.s, out.s_bg, eps)?.as_f64();
    Ok(total_loss(l_cls, l_frg, l_ac, l_bas_raw, w))
}

fn cross_entropy_grad<T: Scalar>(logits: &[T], gt: usize, scale: T, into: &mut [T]) {
    for (i, (p, g)) in softmax(logits).into_iter().zip(into.iter_mut()).enumerate() {
        let onehot = if i == gt { T::one() } else { T::zero() };
        *g += scale * (p - onehot);
    }
}

/// Gradient of `scales`-weighted losses with respect to the AMC outputs,
/// multiplied by `batch_scale` (typically `1 / batch_size`).
pub fn objective_grad<T: Scalar>(out: &AmcOutputs<T>, scales: &TermScales, epsilon: f64, batch_scale: f64) -> AmcGrad<T> {
    let c = out.y.len();
    let mut g = AmcGrad::zeros(c);
    let k = |v: f64| T::from_f64_lossy(v * batch_scale);
    if scales.cls != 0.0 {
        cross_entropy_grad(&out.y, out.gt, k(scales.cls), &mut g.d_y);
    }
    if scales.frg != 0.0 {
        cross_entropy_grad(&out.y_fg, out.gt, k(scales.frg), &mut g.d_y_fg);
    }
    g.d_area = k(scales.ac);
    if scales.bas != 0.0 {
        let denom = out.s + T::from_f64_lossy(epsilon);
        let raw = out.s_bg / denom;
        // Straight cutoff: zero gradient wherever the clamp is active.
        if raw > T::zero() && raw < T::one() {
            let b = k(scales.bas);
            g.d_y_bg[out.gt] += b / denom;
            g.d_y[out.gt] -= b * out.s_bg / (denom * denom);
        }
    }
    g
}

/// Loss components and the gradient of the weighted total for one sample.
pub fn sample_objective<T: Scalar>(
    out: &AmcOutputs<T>,
    w: &LossWeights,
    batch_scale: f64,
) -> CoreResult<(LossBundle, AmcGrad<T>)> {
    let bundle = sample_losses(out, w)?;
    if let Some(name) = bundle.non_finite_component() {
        return Err(CoreError::Numerical {
            what: name.to_string(),
            index: 0,
        });
    }
    Ok((bundle, objective_grad(out, &w.term_scales(), w.epsilon, batch_scale)))
}
