//! Independent reference implementations and the checks built on them.
//!
//! Each `check_*` returns `Ok(detail)` on success or `Err(detail)` naming
//! the first disagreement. They are shared with the acceptance suite.

#![allow(dead_code)]

use bas_core::inference::fuse_topk;
use bas_core::losses::{loss_ac, loss_cls, loss_frg, objective_grad, TermScales};
use bas_core::metrics::{loc_accuracies, peak_metrics, LocRecord};
use bas_core::model::{AmcOutputs, BackboneSpec, BasModel, ParamGroup, PredictionMapSet};
use bas_core::morphology::build_mask_family;
use bas_core::{BBox, BinaryMask, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

// ---------------------------------------------------------------- boxes

/// IoU by counting integer pixels covered by each box. Only valid for
/// integer-coordinate boxes.
pub fn iou_by_pixels(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let x_lo = a.x1.min(b.x1) as i64;
    let x_hi = a.x2.max(b.x2) as i64;
    let y_lo = a.y1.min(b.y1) as i64;
    let y_hi = a.y2.max(b.y2) as i64;
    let inside = |bx: &BBox, x: i64, y: i64| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px > bx.x1 && px < bx.x2 && py > bx.y1 && py < bx.y2
    };
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_int_box(rng: &mut impl Rng, extent: i64) -> BBox {
    let x1 = rng.gen_range(0..extent - 1);
    let y1 = rng.gen_range(0..extent - 1);
    let x2 = rng.gen_range(x1 + 1..=extent);
    let y2 = rng.gen_range(y1 + 1..=extent);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

pub fn check_iou_vs_pixels(pairs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let a = random_int_box(&mut rng, 64);
        let b = random_int_box(&mut rng, 64);
        let got = a.iou(&b);
        let want = iou_by_pixels(&a, &b);
        if got != want {
            return Err(format!("pair {i}: iou {got} vs pixel count {want} for {a:?} {b:?}"));
        }
    }
    Ok(format!("{pairs} box pairs match exactly"))
}

// ----------------------------------------------------------------- peaks

/// 256 thresholds evaluated one at a time.
pub fn naive_peak(map: &[f64], gt: &BinaryMask) -> (u8, f64, Vec<f64>) {
    let mut curve = Vec::with_capacity(256);
    for t in 0..256 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&v, &g) in map.iter().zip(gt.bits()) {
            let p = v * 255.0 > t as f64;
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
        curve.push(if union == 0 { 0.0 } else { inter as f64 / union as f64 });
    }
    let mut best = (0usize, curve[0]);
    for (t, &v) in curve.iter().enumerate() {
        if v > best.1 {
            best = (t, v);
        }
    }
    (best.0 as u8, best.1, curve)
}

pub fn random_map_and_mask(rng: &mut impl Rng, h: usize, w: usize) -> (Vec<f64>, BinaryMask) {
    let cy = rng.gen_range(0.0..h as f64);
    let cx = rng.gen_range(0.0..w as f64);
    let r = rng.gen_range(2.0..(h.min(w) as f64 / 2.0));
    let gt = BinaryMask::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        dy * dy + dx * dx < r * r
    });
    let quantized = rng.gen_bool(0.5);
    let map = (0..h * w)
        .map(|i| {
            let base = if gt.bits()[i] { 0.6 } else { 0.2 };
            let v: f64 = (base + rng.gen_range(-0.4..0.4f64)).clamp(0.0, 1.0);
            // Half the maps sit exactly on the 1/255 grid to probe ties.
            if quantized {
                (v * 255.0).round() / 255.0
            } else {
                v
            }
        })
        .collect();
    (map, gt)
}

pub fn check_peak_vs_naive(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cases {
        let h = rng.gen_range(8..40);
        let w = rng.gen_range(8..40);
        let (map, gt) = random_map_and_mask(&mut rng, h, w);
        if gt.is_empty() {
            continue;
        }
        let got = peak_metrics(&map, &gt);
        let (t, v, curve) = naive_peak(&map, &gt);
        if got.curve != curve || got.peak_t != t || got.peak_iou != v {
            return Err(format!(
                "case {i}: peak ({}, {}) vs naive ({t}, {v})",
                got.peak_t, got.peak_iou
            ));
        }
    }
    Ok(format!("{cases} map/mask pairs match exactly"))
}

// ------------------------------------------------------- loc fixtures

fn record(iou_box: BBox, gt: BBox, cat: usize, ranked: &[usize]) -> LocRecord {
    LocRecord::new("fixture".into(), iou_box, &[gt], (100, 100), cat, ranked)
}

/// Hand-enumerated records with known accuracies.
pub fn check_loc_fixtures() -> Check {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    // IoU exactly 0.5: 10x5 inside a 10x10 box.
    let half = BBox::new(0.0, 0.0, 10.0, 5.0).unwrap();
    // IoU 0.6 and 1.0.
    let six = BBox::new(0.0, 0.0, 10.0, 6.0).unwrap();
    let far = BBox::new(50.0, 50.0, 60.0, 60.0).unwrap();
    let records = vec![
        record(gt, gt, 0, &[0, 1, 2, 3, 4, 5]),   // correct, top1
        record(six, gt, 3, &[0, 1, 2, 3, 4, 5]),  // correct, top5 only
        record(half, gt, 0, &[0, 1, 2, 3, 4, 5]), // IoU == 0.5, not correct
        record(far, gt, 0, &[0, 1, 2, 3, 4, 5]),  // miss
        record(gt, gt, 5, &[0, 1, 2, 3, 4, 5]),   // correct, class outside top5
    ];
    if records[2].gt_iou != 0.5 {
        return Err(format!("fixture IoU {} is not exactly 0.5", records[2].gt_iou));
    }
    if records[2].loc_correct() {
        return Err("IoU == 0.5 counted as correct".into());
    }
    let acc = loc_accuracies(&records);
    let want = (60.0, 20.0, 40.0);
    if (acc.gt_known, acc.top1, acc.top5) != want {
        return Err(format!("accuracies {acc:?}, expected {want:?}"));
    }
    let all_miss = loc_accuracies(&[record(half, gt, 0, &[0])]);
    if all_miss.gt_known != 0.0 {
        return Err("single IoU == 0.5 record should score 0".into());
    }
    Ok("fixtures including the IoU = 0.5 edge match".into())
}

// ---------------------------------------------------------------- top-k

pub fn random_map_set(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> PredictionMapSet<f64> {
    let t = Tensor3::from_fn(c, h, w, |_, _, _| rng.gen_range(1e-6..1.0 - 1e-6));
    PredictionMapSet::new(t).unwrap()
}

pub fn check_topk_identity(sets: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..sets {
        let c = rng.gen_range(2..12);
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let maps = random_map_set(&mut rng, c, h, w);
        let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut argmax = 0;
        for j in 1..c {
            if scores[j] > scores[argmax] {
                argmax = j;
            }
        }
        let fused = fuse_topk(&maps, &scores, 1, None).map_err(|e| e.to_string())?;
        let want = maps.category(argmax);
        let same = fused.data().len() == want.data().len()
            && fused.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("set {i}: fused map differs from category {argmax}"));
        }
    }
    Ok(format!("{sets} map sets bitwise equal"))
}

// ------------------------------------------------------------ morphology

/// Erosion / dilation straight from the definition with a `size x size`
/// element spanning `-(size-1)/2 ..= size/2`.
pub fn brute_morph(mask: &BinaryMask, n: i32) -> BinaryMask {
    if n == 0 {
        return mask.clone();
    }
    let size = 5 * n.unsigned_abs() as i64;
    let (lo, hi) = ((size - 1) / 2, size / 2);
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && mask.get(y as usize, x as usize);
    BinaryMask::from_fn(mask.height(), mask.width(), |y, x| {
        let (y, x) = (y as i64, x as i64);
        if n < 0 {
            (-lo..=hi).all(|dy| (-lo..=hi).all(|dx| at(y + dy, x + dx)))
        } else {
            (-lo..=hi).any(|dy| (-lo..=hi).any(|dx| at(y - dy, x - dx)))
        }
    })
}

pub fn random_blob_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let blobs: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..4))
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(3.0..h.min(w) as f64 / 2.5),
            )
        })
        .collect();
    let mut m = BinaryMask::from_fn(h, w, |y, x| {
        blobs
            .iter()
            .any(|&(cy, cx, r)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < r * r)
    });
    if m.is_empty() {
        m.set(h / 2, w / 2, true);
    }
    m
}

pub fn check_morphology(masks: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..masks {
        let (h, w) = (rng.gen_range(16..48), rng.gen_range(16..48));
        let gt = random_blob_mask(&mut rng, h, w);
        let fam = build_mask_family(&gt, -2..=2, (7, 7)).map_err(|e| e.to_string())?;
        for n in -2..=2 {
            let want = brute_morph(&gt, n);
            match fam.members.iter().find(|m| m.n == n) {
                Some(m) if m.mask == want => {}
                Some(_) => return Err(format!("mask {i}, n = {n}: differs from brute force")),
                None if want.is_empty() && fam.dropped.contains(&n) => {}
                None => return Err(format!("mask {i}, n = {n}: missing member")),
            }
        }
    }
    Ok(format!("{masks} masks x n in -2..=2 match exactly"))
}

// ------------------------------------------------------------- coupling

pub fn toy_spec(categories: usize) -> BackboneSpec {
    let mut spec = BackboneSpec::with_widths(8, &[3, 4], "stage1", categories);
    for s in &mut spec.stages {
        s.convs = 1;
    }
    spec
}

pub fn random_image(rng: &mut impl Rng, size: usize) -> Tensor3<f64> {
    Tensor3::from_fn(3, size, size, |_, _, _| rng.gen_range(0.0..1.0))
}

pub fn check_coupling(passes: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..passes {
        let mut model = BasModel::<f32>::build(toy_spec(4), rng.gen()).map_err(|e| e.to_string())?;
        // Perturb the generator so maps span a wide range.
        model.generator_params_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        let img = random_image(&mut rng, 8).cast::<f32>();
        let (out, _) = model.amc_forward(&img, rng.gen_range(0..4)).map_err(|e| e.to_string())?;
        if !out.m_fg.data().iter().zip(out.m_bg.data()).all(|(a, b)| a + b == 1.0) {
            return Err(format!("pass {i}: M_fg + M_bg != 1"));
        }
    }
    Ok(format!("{passes} forward passes exact"))
}

// ------------------------------------------------------------ gradients

fn objective(out: &AmcOutputs<f64>, scales: &TermScales, eps: f64) -> f64 {
    let mut v = 0.0;
    if scales.cls != 0.0 {
        v += scales.cls * loss_cls(&out.y, out.gt).unwrap();
    }
    if scales.frg != 0.0 {
        v += scales.frg * loss_frg(&out.y_fg, out.gt).unwrap();
    }
    if scales.ac != 0.0 {
        v += scales.ac * loss_ac(&out.m_fg);
    }
    if scales.bas != 0.0 {
        v += scales.bas * (out.s_bg / (out.s + eps)).clamp(0.0, 1.0);
    }
    v
}

pub struct GradSetup {
    pub model: BasModel<f64>,
    pub image: Tensor3<f64>,
    pub gt: usize,
}

/// A toy model and input whose suppression ratio sits well inside (0, 1).
pub fn gradient_setup(seed: u64) -> GradSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let model = BasModel::<f64>::build(toy_spec(3), rng.gen()).unwrap();
        let image = random_image(&mut rng, 8);
        let gt = rng.gen_range(0..3);
        let (out, _) = model.amc_forward(&image, gt).unwrap();
        let ratio = out.s_bg / (out.s + 1e-8);
        if out.s > 1e-3 && ratio > 0.1 && ratio < 0.9 {
            return GradSetup { model, image, gt };
        }
    }
}

fn analytic_grad(s: &GradSetup, scales: &TermScales) -> Vec<f64> {
    let (out, trace) = s.model.amc_forward(&s.image, s.gt).unwrap();
    let g = objective_grad(&out, scales, 1e-8, 1.0);
    let mut sink = s.model.params().zeros_like();
    s.model.amc_backward(&trace, &g, &mut sink);
    sink.iter().copied().collect()
}

/// Objective as a function of the parameters with the background path's
/// parameters held at their current values.
fn frozen_objective(s: &GradSetup, params: &bas_core::model::ModelParams<f64>, scales: &TermScales) -> f64 {
    let bg = s.model.params().clone();
    let m = BasModel::from_params(s.model.spec().clone(), params.clone()).unwrap();
    let out = m.amc_forward_frozen_bg(&s.image, s.gt, &bg).unwrap();
    objective(&out, scales, 1e-8)
}

fn within(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

fn central_difference(s: &GradSetup, scales: &TermScales, i: usize, h: f64) -> f64 {
    let base = s.model.params();
    let mut plus = base.clone();
    *plus.iter_mut().nth(i).unwrap() += h;
    let mut minus = base.clone();
    *minus.iter_mut().nth(i).unwrap() -= h;
    (frozen_objective(s, &plus, scales) - frozen_objective(s, &minus, scales)) / (2.0 * h)
}

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-3;
const RTOL: f64 = 1e-3;
const ATOL: f64 = 1e-8;
/// Largest share of parameters whose difference window may straddle a
/// ReLU or max-pool switch.
const MAX_KINK_SHARE: f64 = 0.05;

/// Central finite differences on every parameter. A parameter whose
/// difference quotient changes when the step shrinks sits next to a kink
/// and is set aside; every other parameter must match.
pub fn check_gradient_fidelity(seed: u64) -> Check {
    let s = gradient_setup(seed);
    let cases = [
        ("L_CLS", TermScales::CLS),
        ("L_FRG", TermScales::FRG),
        ("L_AC", TermScales::AC),
        ("L_BAS", TermScales::BAS),
        ("total", TermScales { cls: 1.0, frg: 0.5, ac: 0.7, bas: 1.0 }),
    ];
    let mut summary = Vec::new();
    for (name, scales) in cases {
        let analytic = analytic_grad(&s, &scales);
        if analytic.iter().all(|v| *v == 0.0) {
            return Err(format!("{name}: gradient is identically zero"));
        }
        let (mut worst, mut kinks) = (0.0f64, 0usize);
        for (i, &a) in analytic.iter().enumerate() {
            let n = central_difference(&s, &scales, i, FD_STEP);
            if within(a, n, RTOL, ATOL) {
                if a.abs().max(n.abs()) > ATOL {
                    worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
                }
                continue;
            }
            let fine = central_difference(&s, &scales, i, FD_STEP / 8.0);
            if within(n, fine, RTOL, ATOL) {
                return Err(format!("{name}: param {i}: analytic {a:e} vs numeric {n:e}"));
            }
            kinks += 1;
        }
        let share = kinks as f64 / analytic.len() as f64;
        if share > MAX_KINK_SHARE {
            return Err(format!("{name}: {kinks} of {} parameters next to a kink", analytic.len()));
        }
        summary.push(format!("{name} {worst:.1e} ({kinks} kink)"));
    }
    Ok(format!("h = {FD_STEP:e}, max rel err: {}", summary.join(", ")))
}

/// Head gradients of L_BAS equal those of `S_bg0 / (S + eps)` with `S_bg0`
/// a constant; generator gradients are nonzero.
pub fn check_freeze_contract(seed: u64) -> Check {
    let s = gradient_setup(seed);
    let analytic = analytic_grad(&s, &TermScales::BAS);
    let (out0, _) = s.model.amc_forward(&s.image, s.gt).unwrap();
    let s_bg0 = out0.s_bg;
    let h = 1e-5;
    let mut idx = 0;
    let mut head_checked = 0;
    let mut gen_norm = 0.0;
    let base = s.model.params().clone();
    for (ci, conv) in base.convs.iter().enumerate() {
        let n = conv.num_params();
        match s.model.param_group(ci) {
            ParamGroup::Head => {
                for j in idx..idx + n {
                    let eval = |delta: f64| {
                        let mut p = base.clone();
                        *p.iter_mut().nth(j).unwrap() += delta;
                        let m = BasModel::from_params(s.model.spec().clone(), p).unwrap();
                        let y = m.image_logits(&s.image).unwrap();
                        s_bg0 / (y[s.gt] + 1e-8)
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[j];
                    if (a - numeric).abs() > 1e-5 * a.abs().max(numeric.abs()) + 1e-10 {
                        return Err(format!("head param {j}: {a:e} vs constant-S_bg {numeric:e}"));
                    }
                    head_checked += 1;
                }
            }
            ParamGroup::Generator => gen_norm += analytic[idx..idx + n].iter().map(|v| v * v).sum::<f64>(),
            ParamGroup::Extractor => {}
        }
        idx += n;
    }
    if gen_norm <= 0.0 {
        return Err("generator receives no gradient from L_BAS".into());
    }
    Ok(format!(
        "{head_checked} head params match; |grad generator| = {:.2e}",
        gen_norm.sqrt()
    ))
}
