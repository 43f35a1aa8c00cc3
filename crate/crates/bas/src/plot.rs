//! Minimal raster plotting: line charts, bar charts and box overlays.
//! Plots carry no text; the accompanying CSV files hold the numbers.

use std::path::Path;

use anyhow::{Context, Result};
use bas_core::{BBox, Tensor3};
use image::{Rgb, RgbImage};

pub const RED: Rgb<u8> = Rgb([220, 30, 30]);
pub const GREEN: Rgb<u8> = Rgb([30, 200, 60]);
pub const BLUE: Rgb<u8> = Rgb([40, 90, 220]);
pub const ORANGE: Rgb<u8> = Rgb([240, 140, 20]);
pub const GREY: Rgb<u8> = Rgb([120, 120, 120]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(width, height, WHITE),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    /// Bresenham line; `dash` > 0 draws `dash` pixels on, `dash` off.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, dash: usize) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let mut n = 0usize;
        loop {
            if dash == 0 || (n / dash) % 2 == 0 {
                self.put(x, y, c);
            }
            n += 1;
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn rect(&mut self, x1: i64, y1: i64, x2: i64, y2: i64, c: Rgb<u8>, thickness: i64) {
        for t in 0..thickness {
            let (a, b, r, s) = (x1 + t, y1 + t, x2 - 1 - t, y2 - 1 - t);
            if a > r || b > s {
                break;
            }
            self.line((a, b), (r, b), c, 0);
            self.line((a, s), (r, s), c, 0);
            self.line((a, b), (a, s), c, 0);
            self.line((r, b), (r, s), c, 0);
        }
    }

    pub fn fill(&mut self, x1: i64, y1: i64, x2: i64, y2: i64, c: Rgb<u8>) {
        for y in y1..y2 {
            for x in x1..x2 {
                self.put(x, y, c);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.img.save(path).with_context(|| format!("writing {}", path.display()))
    }
}

pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: Rgb<u8>,
}

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: i64 = 30;

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart with optional dashed vertical markers at the given x values.
/// Each series is scaled to its own y range when `shared_y` is false.
pub fn line_chart(path: &Path, series: &[Series], markers: &[f64], shared_y: bool) -> Result<()> {
    let mut cv = Canvas::new(W, H);
    let (x_lo, x_hi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).chain(markers.iter().copied()));
    let shared = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (left, right, top, bottom) = (MARGIN, W as i64 - MARGIN / 2, MARGIN / 2, H as i64 - MARGIN);
    let px = |x: f64| left + ((x - x_lo) / (x_hi - x_lo) * (right - left) as f64).round() as i64;
    cv.line((left, bottom), (right, bottom), BLACK, 0);
    cv.line((left, top), (left, bottom), BLACK, 0);
    for i in 0..=10 {
        let x = left + (right - left) * i / 10;
        cv.line((x, bottom), (x, bottom + 4), BLACK, 0);
        let y = bottom - (bottom - top) * i / 10;
        cv.line((left - 4, y), (left, y), BLACK, 0);
    }
    for &m in markers {
        cv.line((px(m), top), (px(m), bottom), GREY, 4);
    }
    for s in series {
        let (y_lo, y_hi) = if shared_y { shared } else { bounds(s.points.iter().map(|p| p.1)) };
        let py = |y: f64| bottom - ((y - y_lo) / (y_hi - y_lo) * (bottom - top) as f64).round() as i64;
        for w in s.points.windows(2) {
            if w[0].1.is_finite() && w[1].1.is_finite() {
                cv.line((px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), s.color, 0);
            }
        }
        for p in s.points.iter().filter(|p| p.1.is_finite()) {
            cv.fill(px(p.0) - 1, py(p.1) - 1, px(p.0) + 2, py(p.1) + 2, s.color);
        }
    }
    cv.save(path)
}

/// Vertical bars with heights in `[0, max]`.
pub fn bar_chart(path: &Path, values: &[f64], max: f64) -> Result<()> {
    let mut cv = Canvas::new(W, H);
    let (left, right, top, bottom) = (MARGIN, W as i64 - MARGIN / 2, MARGIN / 2, H as i64 - MARGIN);
    cv.line((left, bottom), (right, bottom), BLACK, 0);
    cv.line((left, top), (left, bottom), BLACK, 0);
    let n = values.len().max(1) as i64;
    let slot = (right - left) / n;
    for (i, &v) in values.iter().enumerate() {
        let hgt = ((v / max).clamp(0.0, 1.0) * (bottom - top) as f64).round() as i64;
        let x = left + slot * i as i64;
        cv.fill(x + slot / 5, bottom - hgt, x + slot - slot / 5, bottom, BLUE);
    }
    cv.save(path)
}

/// Blue-to-red ramp for a value in `[0, 1]`.
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// Image with the map blended on top, ground-truth boxes in red and the
/// prediction in green.
pub fn overlay(image: &Tensor3<f32>, map: &Tensor3<f64>, gt: &[BBox], pred: &BBox) -> RgbImage {
    let (h, w) = (image.height(), image.width());
    let mut cv = Canvas {
        img: RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let hm = heat(map.get(0, y, x));
            let px: [u8; 3] = core::array::from_fn(|c| {
                let v = 0.5 * image.get(c, y, x) as f64 + 0.5 * hm[c];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            Rgb(px)
        }),
    };
    let corners = |b: &BBox| (b.x1.round() as i64, b.y1.round() as i64, b.x2.round() as i64, b.y2.round() as i64);
    let t = (w.max(h) / 100).max(1) as i64;
    for b in gt {
        let (a, c, d, e) = corners(b);
        cv.rect(a, c, d, e, RED, t);
    }
    let (a, c, d, e) = corners(pred);
    cv.rect(a, c, d, e, GREEN, t);
    cv.img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_colors() {
        let img = Tensor3::<f32>::zeros(3, 40, 40);
        let map = Tensor3::<f64>::zeros(1, 40, 40);
        let gt = BBox::new(2.0, 2.0, 20.0, 20.0).unwrap();
        let pred = BBox::new(10.0, 10.0, 38.0, 38.0).unwrap();
        let out = overlay(&img, &map, &[gt], &pred);
        assert_eq!(*out.get_pixel(2, 5), RED);
        assert_eq!(*out.get_pixel(37, 20), GREEN);
    }

    #[test]
    fn dashed_line_has_gaps() {
        let mut cv = Canvas::new(20, 20);
        cv.line((0, 0), (0, 19), BLACK, 4);
        assert_eq!(*cv.img.get_pixel(0, 0), BLACK);
        assert_eq!(*cv.img.get_pixel(0, 5), WHITE);
    }
}
