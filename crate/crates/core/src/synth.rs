//! Synthetic single-object images with exact masks.
//!
//! Each category maps to a shape kind and a hue; every image holds one
//! shape of that category on a textured background. Rasterization tests
//! pixel centers, so the emitted box is exactly the mask's tight box.

use alloc::format;
use alloc::vec::Vec;

use libm::{floor, sqrt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::error::{CoreError, CoreResult};
use crate::tensor::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BackgroundTexture {
    #[default]
    Noise,
    Gradient,
    Checker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticConfig {
    pub num_categories: usize,
    pub image_size: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub background: BackgroundTexture,
    /// Shape area as a fraction of the image area, drawn uniformly.
    pub shape_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_categories: 5,
            image_size: 224,
            train_per_category: 40,
            test_per_category: 20,
            background: BackgroundTexture::Noise,
            shape_scale_range: (0.1, 0.45),
            seed: 7,
        }
    }
}

/// Smallest shape, in pixels, the generator will draw.
const MIN_SHAPE_PIXELS: f64 = 16.0;

impl SyntheticConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.num_categories < 2 {
            return Err(CoreError::Config("synthetic data needs at least 2 categories".into()));
        }
        if self.image_size < 8 {
            return Err(CoreError::Config(format!("image size {} too small", self.image_size)));
        }
        let (lo, hi) = self.shape_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CoreError::Config(format!("invalid shape scale range ({lo}, {hi})")));
        }
        let capacity = (0..self.num_categories.min(ShapeKind::ALL.len()))
            .map(|c| ShapeKind::for_category(c).max_area_fraction())
            .fold(1.0, f64::min);
        if hi > capacity {
            return Err(CoreError::Config(format!(
                "shape scale {hi} unreachable: the largest shape that fits covers {capacity:.3} of the image"
            )));
        }
        let side = self.image_size as f64;
        if lo * side * side < MIN_SHAPE_PIXELS {
            return Err(CoreError::Config(format!(
                "shape scale {lo} gives fewer than {MIN_SHAPE_PIXELS} pixels at size {}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn samples_per_category(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_category,
            Split::Test => self.test_per_category,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
    ];

    pub fn for_category(c: usize) -> Self {
        Self::ALL[c % Self::ALL.len()]
    }

    /// Largest area fraction at which the shape still fits the image.
    pub fn max_area_fraction(self) -> f64 {
        match self {
            ShapeKind::Circle => core::f64::consts::PI / 4.0,
            ShapeKind::Square => 1.0,
            ShapeKind::Triangle | ShapeKind::Diamond => 0.5,
            ShapeKind::Cross => 5.0 / 9.0,
        }
    }

    /// Side of the square bounding extent for a shape of `area` pixels.
    fn extent(self, area: f64) -> f64 {
        match self {
            ShapeKind::Circle => 2.0 * sqrt(area / core::f64::consts::PI),
            ShapeKind::Square => sqrt(area),
            ShapeKind::Triangle | ShapeKind::Diamond => sqrt(2.0 * area),
            ShapeKind::Cross => sqrt(9.0 * area / 5.0),
        }
    }

    /// Point test in coordinates normalized to the shape's extent (`[0, 1]^2`).
    fn contains(self, u: f64, v: f64) -> bool {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Circle => du * du + dv * dv <= 0.25,
            ShapeKind::Square => true,
            // Apex at the top center, base along the bottom edge.
            ShapeKind::Triangle => du.abs() <= 0.5 * v,
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        }
    }
}

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RgbBuffer,
    pub mask: BinaryMask,
    pub bbox: BBox,
    pub category: usize,
    pub kind: ShapeKind,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h - floor(h)) * 6.0;
    let i = floor(h);
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Independent stream per (split, category, index) so samples do not depend
/// on generation order.
fn sample_rng(cfg: &SyntheticConfig, split: Split, category: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    rng.set_stream((split_tag << 62) ^ ((category as u64) << 32) ^ index as u64);
    rng
}

fn background_pixel(tex: BackgroundTexture, params: &[f64; 8], x: usize, y: usize, size: usize, jitter: f64) -> [f64; 3] {
    let base_a = [params[0], params[1], params[2]];
    let base_b = [params[3], params[4], params[5]];
    let t = match tex {
        BackgroundTexture::Noise => 0.5,
        BackgroundTexture::Gradient => {
            let angle = params[6] * core::f64::consts::TAU;
            let (s, c) = (libm::sin(angle), libm::cos(angle));
            let u = (x as f64 / size as f64 - 0.5) * c + (y as f64 / size as f64 - 0.5) * s;
            (u + 0.71) / 1.42
        }
        BackgroundTexture::Checker => {
            let period = 4 + (params[7] * (size as f64 / 8.0)) as usize;
            if ((x / period) + (y / period)) % 2 == 0 {
                0.0
            } else {
                1.0
            }
        }
    };
    let mut px = [0.0; 3];
    for ch in 0..3 {
        px[ch] = base_a[ch] * (1.0 - t) + base_b[ch] * t + jitter;
    }
    px
}

/// Renders sample `index` of `category` in `split`.
pub fn generate_sample(cfg: &SyntheticConfig, split: Split, category: usize, index: usize) -> CoreResult<SyntheticSample> {
    cfg.validate()?;
    if category >= cfg.num_categories {
        return Err(CoreError::Contract(format!("category {category} out of range")));
    }
    let mut rng = sample_rng(cfg, split, category, index);
    let size = cfg.image_size;
    let side = size as f64;
    let kind = ShapeKind::for_category(category);

    let (lo, hi) = cfg.shape_scale_range;
    let frac = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let extent = kind.extent(frac * side * side).min(side);
    let left = rng.gen_range(0.0..=(side - extent));
    let top = rng.gen_range(0.0..=(side - extent));

    // Hue spread over the categories; shapes repeat every five categories.
    let hue = category as f64 / cfg.num_categories as f64 + rng.gen_range(-0.02..0.02);
    let fg = hsv_to_rgb(hue, rng.gen_range(0.7..0.95), rng.gen_range(0.75..0.95));

    let mut bg_params = [0.0; 8];
    for p in bg_params.iter_mut() {
        *p = rng.gen_range(0.0..1.0);
    }
    // Muted background colors.
    for p in bg_params[..6].iter_mut() {
        *p = 0.25 + 0.4 * *p;
    }

    let mask = BinaryMask::from_fn(size, size, |y, x| {
        let u = (x as f64 + 0.5 - left) / extent;
        let v = (y as f64 + 0.5 - top) / extent;
        kind.contains(u, v)
    });
    let bbox = mask
        .tight_box()
        .ok_or_else(|| CoreError::Config(format!("shape of scale {frac} rasterized to nothing")))?;

    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let noise = rng.gen_range(-0.06..0.06);
            let px = if mask.get(y, x) {
                let stripe = if ((x + y) / 3) % 2 == 0 { 0.04 } else { -0.04 };
                [fg[0] + noise + stripe, fg[1] + noise + stripe, fg[2] + noise + stripe]
            } else {
                let jitter = match cfg.background {
                    BackgroundTexture::Noise => rng.gen_range(-0.2..0.2),
                    _ => noise,
                };
                background_pixel(cfg.background, &bg_params, x, y, size, jitter)
            };
            pixels.extend(px.iter().map(|&v| to_u8(v)));
        }
    }
    Ok(SyntheticSample {
        image: RgbBuffer {
            width: size,
            height: size,
            pixels,
        },
        mask,
        bbox,
        category,
        kind,
    })
}
