//! Binary erosion and dilation with square structuring elements, and the
//! nested mask families used by the probe experiment.
//!
//! A `k x k` element covers offsets `-lo..=hi` on each axis with
//! `lo = (k - 1) / 2`, `hi = k / 2`, so it always contains the origin and the
//! element for size `k` is contained in the one for any larger size. Pixels
//! outside the image count as background.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::tensor::BinaryMask;

/// Kernel side grows by this many pixels per step of `n`.
pub const KERNEL_STEP: usize = 5;

/// `(lo, hi)` offsets of a square element of side `size`.
pub fn element_extent(size: usize) -> (usize, usize) {
    assert!(size > 0, "structuring element must be non-empty");
    ((size - 1) / 2, size / 2)
}

// 1-D sliding window over `line`: erosion asks "all set", dilation "any set".
fn sweep(line: &[bool], lo: usize, hi: usize, erode: bool, out: &mut [bool]) {
    let n = line.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &b) in line.iter().enumerate() {
        prefix[i + 1] = prefix[i] + b as usize;
    }
    for (i, o) in out.iter_mut().enumerate() {
        if erode {
            // window i-lo ..= i+hi must lie inside and be fully set
            if i < lo || i + hi >= n {
                *o = false;
            } else {
                *o = prefix[i + hi + 1] - prefix[i - lo] == lo + hi + 1;
            }
        } else {
            // reflected element: sources i-hi ..= i+lo
            let a = i.saturating_sub(hi);
            let b = (i + lo + 1).min(n);
            *o = prefix[b] - prefix[a] > 0;
        }
    }
}

fn separable(mask: &BinaryMask, size: usize, erode: bool) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let (lo, hi) = element_extent(size);
    let mut rows = vec![false; h * w];
    for y in 0..h {
        sweep(&mask.bits()[y * w..(y + 1) * w], lo, hi, erode, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = vec![false; h * w];
    let mut col = vec![false; h];
    let mut col_out = vec![false; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        sweep(&col, lo, hi, erode, &mut col_out);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    BinaryMask::from_vec(h, w, out).expect("shape")
}

pub fn erode(mask: &BinaryMask, size: usize) -> BinaryMask {
    separable(mask, size, true)
}

pub fn dilate(mask: &BinaryMask, size: usize) -> BinaryMask {
    separable(mask, size, false)
}

/// Erosion for `n < 0`, dilation for `n > 0` with a `5|n| x 5|n|` element.
pub fn morph_step(mask: &BinaryMask, n: i32) -> BinaryMask {
    let size = KERNEL_STEP * n.unsigned_abs() as usize;
    match n {
        0 => mask.clone(),
        n if n < 0 => erode(mask, size),
        _ => dilate(mask, size),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyMember {
    pub n: i32,
    /// Mask at the ground-truth resolution.
    pub mask: BinaryMask,
    /// Nearest-neighbour downsampled to the feature resolution.
    pub feature_mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskFamily {
    pub base: BinaryMask,
    /// Ordered by increasing `n`.
    pub members: Vec<FamilyMember>,
    /// Erosion steps that emptied the mask and were left out.
    pub dropped: Vec<i32>,
}

impl MaskFamily {
    pub fn base_index(&self) -> Option<usize> {
        self.members.iter().position(|m| m.n == 0)
    }

    /// Family of complements, in the same member order.
    pub fn inverted(&self) -> MaskFamily {
        MaskFamily {
            base: self.base.invert(),
            members: self
                .members
                .iter()
                .map(|m| FamilyMember {
                    n: m.n,
                    mask: m.mask.invert(),
                    feature_mask: m.feature_mask.invert(),
                })
                .collect(),
            dropped: self.dropped.clone(),
        }
    }
}

/// Eroded and dilated versions of `gt` for every `n` in `n_range`.
pub fn build_mask_family(
    gt: &BinaryMask,
    n_range: core::ops::RangeInclusive<i32>,
    feature_size: (usize, usize),
) -> CoreResult<MaskFamily> {
    if gt.is_empty() {
        return Err(CoreError::Contract("ground-truth mask is empty".into()));
    }
    let mut members = Vec::new();
    let mut dropped = Vec::new();
    for n in n_range {
        let mask = morph_step(gt, n);
        if n < 0 && mask.is_empty() {
            dropped.push(n);
            continue;
        }
        let feature_mask = mask.resize_nearest(feature_size.0, feature_size.1);
        members.push(FamilyMember { n, mask, feature_mask });
    }
    Ok(MaskFamily {
        base: gt.clone(),
        members,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_erodes_by_two() {
        let m = BinaryMask::from_fn(40, 40, |y, x| (10..30).contains(&y) && (10..30).contains(&x));
        let e = morph_step(&m, -1);
        let expected = BinaryMask::from_fn(40, 40, |y, x| (12..28).contains(&y) && (12..28).contains(&x));
        assert_eq!(e, expected);
        assert_eq!(e.area(), 16 * 16);
    }

    #[test]
    fn identity_and_saturation() {
        let m = BinaryMask::from_fn(12, 12, |y, x| x > y);
        assert_eq!(morph_step(&m, 0), m);
        let full = BinaryMask::filled(12, 12, true);
        for n in 1..4 {
            assert_eq!(morph_step(&full, n), full);
        }
    }

    #[test]
    fn even_elements_are_nested() {
        for size in 1..30 {
            let (lo, hi) = element_extent(size);
            let (lo2, hi2) = element_extent(size + 1);
            assert!(lo <= lo2 && hi <= hi2);
            assert_eq!(lo + hi + 1, size);
        }
    }

    #[test]
    fn family_drops_empty_erosions() {
        let m = BinaryMask::from_fn(30, 30, |y, x| (10..18).contains(&y) && (10..18).contains(&x));
        let fam = build_mask_family(&m, -4..=2, (6, 6)).unwrap();
        assert_eq!(fam.dropped, vec![-4, -3, -2]);
        let ns: Vec<i32> = fam.members.iter().map(|m| m.n).collect();
        assert_eq!(ns, vec![-1, 0, 1, 2]);
        assert_eq!(fam.members[1].mask, m);
        assert_eq!(fam.members[0].feature_mask.height(), 6);
        for w in fam.members.windows(2) {
            assert!(w[0].mask.is_subset_of(&w[1].mask));
        }
    }

    #[test]
    fn empty_gt_rejected() {
        assert!(build_mask_family(&BinaryMask::new(5, 5), -1..=1, (5, 5)).is_err());
    }
}
