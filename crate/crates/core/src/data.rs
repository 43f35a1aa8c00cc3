//! Samples and the resize / crop / flip pipeline.
//!
//! Images are `3 x H x W` tensors with values in `[0, 1]`. Training images
//! are resized to a square of side `round(out_size * 256 / 224)` and randomly
//! cropped to `out_size`; evaluation uses the center crop. Boxes follow the
//! same transform and are clipped to the crop.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::round;
use rand::Rng;

use crate::bbox::BBox;
use crate::error::{CoreError, CoreResult};
use crate::nn::resize_bilinear;
use crate::tensor::{BinaryMask, Tensor3};

/// One image with its category label and optional localization annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor3<f32>,
    pub category: usize,
    pub boxes: Vec<BBox>,
    pub mask: Option<BinaryMask>,
    pub image_id: String,
}

impl Sample {
    pub fn new(
        image_id: String,
        image: Tensor3<f32>,
        category: usize,
        boxes: Vec<BBox>,
        mask: Option<BinaryMask>,
        num_categories: usize,
    ) -> CoreResult<Self> {
        if image.channels() != 3 {
            return Err(CoreError::Shape {
                expected: "3 channels".into(),
                got: format!("{} channels", image.channels()),
            });
        }
        if category >= num_categories {
            return Err(CoreError::Contract(format!(
                "{image_id}: category {category} out of range for {num_categories} categories"
            )));
        }
        let (w, h) = (image.width() as f64, image.height() as f64);
        if let Some(b) = boxes.iter().find(|b| !b.within(w, h)) {
            return Err(CoreError::InvalidBox(format!("{image_id}: {b:?} outside {w}x{h} image")));
        }
        if let Some(m) = &mask {
            if (m.height(), m.width()) != (image.height(), image.width()) {
                return Err(CoreError::Shape {
                    expected: format!("{}x{} mask", image.height(), image.width()),
                    got: format!("{}x{}", m.height(), m.width()),
                });
            }
        }
        Ok(Self {
            image,
            category,
            boxes,
            mask,
            image_id,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Network-ready view of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: Tensor3<f32>,
    pub boxes: Vec<BBox>,
    pub mask: Option<BinaryMask>,
}

/// Side of the intermediate square resize for a given crop size.
pub fn resize_target(out_size: usize) -> usize {
    round(out_size as f64 * 256.0 / 224.0) as usize
}

/// Crop placement inside the resized square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub left: usize,
    pub top: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropWindow {
    pub fn center(resized: usize, size: usize) -> Self {
        let off = (resized - size) / 2;
        Self {
            left: off,
            top: off,
            size,
            flip: false,
        }
    }
}

/// Box transform of the resize + crop + optional flip.
pub fn transform_boxes(boxes: &[BBox], src_w: usize, src_h: usize, resized: usize, win: &CropWindow) -> Vec<BBox> {
    let sx = resized as f64 / src_w as f64;
    let sy = resized as f64 / src_h as f64;
    let s = win.size as f64;
    boxes
        .iter()
        .filter_map(|b| {
            b.scale(sx, sy)
                .translate(-(win.left as f64), -(win.top as f64))
                .clip(s, s)
        })
        .map(|b| if win.flip { b.flip_horizontal(s) } else { b })
        .collect()
}

fn crop_image(img: &Tensor3<f32>, win: &CropWindow) -> Tensor3<f32> {
    Tensor3::from_fn(img.channels(), win.size, win.size, |c, y, x| {
        let sx = if win.flip { win.size - 1 - x } else { x };
        img.get(c, win.top + y, win.left + sx)
    })
}

/// Applies a specific crop window to a sample.
pub fn apply_window(sample: &Sample, out_size: usize, win: &CropWindow) -> Augmented {
    let resized = resize_target(out_size);
    let image = crop_image(&resize_bilinear(&sample.image, resized, resized), win);
    let boxes = transform_boxes(&sample.boxes, sample.width(), sample.height(), resized, win);
    let mask = sample.mask.as_ref().map(|m| {
        let cropped = m.resize_nearest(resized, resized).crop(win.top, win.left, win.size, win.size);
        if win.flip {
            cropped.flip_horizontal()
        } else {
            cropped
        }
    });
    Augmented { image, boxes, mask }
}

/// Deterministic resize and center crop.
pub fn augment_eval(sample: &Sample, out_size: usize) -> Augmented {
    let resized = resize_target(out_size);
    apply_window(sample, out_size, &CropWindow::center(resized, out_size))
}

/// Four corners and the center of the resized square, each also mirrored.
pub fn ten_crop_windows(out_size: usize) -> [CropWindow; 10] {
    let resized = resize_target(out_size);
    let far = resized - out_size;
    let center = CropWindow::center(resized, out_size);
    let spots = [(0, 0), (far, 0), (0, far), (far, far), (center.left, center.top)];
    core::array::from_fn(|i| {
        let (left, top) = spots[i % 5];
        CropWindow {
            left,
            top,
            size: out_size,
            flip: i >= 5,
        }
    })
}

/// Crops redrawn when every box falls outside the window.
pub const CROP_RETRIES: usize = 10;

/// Random crop window; falls back to the center crop after
/// [`CROP_RETRIES`] draws that lose every box.
pub fn draw_train_window<R: Rng + ?Sized>(sample: &Sample, out_size: usize, flip: bool, rng: &mut R) -> CropWindow {
    let resized = resize_target(out_size);
    let span = resized - out_size;
    let do_flip = flip && rng.gen_bool(0.5);
    for _ in 0..CROP_RETRIES {
        let win = CropWindow {
            left: rng.gen_range(0..=span),
            top: rng.gen_range(0..=span),
            size: out_size,
            flip: do_flip,
        };
        if sample.boxes.is_empty()
            || !transform_boxes(&sample.boxes, sample.width(), sample.height(), resized, &win).is_empty()
        {
            return win;
        }
    }
    CropWindow {
        flip: do_flip,
        ..CropWindow::center(resized, out_size)
    }
}

/// Resize, random crop and (when `flip` is set) random horizontal flip.
pub fn augment_train<R: Rng + ?Sized>(sample: &Sample, out_size: usize, flip: bool, rng: &mut R) -> Augmented {
    let win = draw_train_window(sample, out_size, flip, rng);
    apply_window(sample, out_size, &win)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(size: usize, boxes: Vec<BBox>, mask: Option<BinaryMask>) -> Sample {
        let img = Tensor3::from_fn(3, size, size, |c, y, x| ((c + y * 3 + x * 7) % 11) as f32 / 10.0);
        Sample::new("s".to_string(), img, 0, boxes, mask, 1).unwrap()
    }

    #[test]
    fn target_keeps_crop_ratio() {
        assert_eq!(resize_target(224), 256);
        assert_eq!(resize_target(48), 55);
    }

    #[test]
    fn train_output_shape() {
        let s = sample(300, vec![BBox::new(10.0, 10.0, 200.0, 200.0).unwrap()], None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment_train(&s, 224, true, &mut rng);
        assert_eq!(a.image.shape(), (3, 224, 224));
        assert_eq!(a.boxes.len(), 1);
    }

    #[test]
    fn flipped_box_matches_pixel_flip() {
        // Box on a 224 image with no resize: crop window covering everything.
        let b = BBox::new(10.0, 10.0, 50.0, 50.0).unwrap();
        let win = CropWindow {
            left: 0,
            top: 0,
            size: 224,
            flip: true,
        };
        let out = transform_boxes(&[b], 224, 224, 224, &win);
        assert_eq!(out, vec![BBox::new(174.0, 10.0, 214.0, 50.0).unwrap()]);
        // Pixel oracle: flip the box's mask and take its tight box.
        let flipped = BinaryMask::from_box(224, 224, &b).flip_horizontal();
        assert_eq!(flipped.tight_box().unwrap(), out[0]);
    }

    #[test]
    fn zero_offset_is_pure_scaling() {
        let b = BBox::new(20.0, 40.0, 60.0, 80.0).unwrap();
        let win = CropWindow {
            left: 0,
            top: 0,
            size: 224,
            flip: false,
        };
        let out = transform_boxes(&[b], 512, 512, 256, &win);
        assert_eq!(out, vec![b.scale(0.5, 0.5)]);
    }

    #[test]
    fn ten_crops_cover_corners_center_and_mirrors() {
        let w = ten_crop_windows(224);
        assert_eq!((w[3].left, w[3].top), (32, 32));
        assert_eq!((w[4].left, w[4].top), (16, 16));
        assert!(w[..5].iter().all(|c| !c.flip) && w[5..].iter().all(|c| c.flip));
        assert_eq!((w[7].left, w[7].top, w[7].size), (0, 32, 224));
    }

    #[test]
    fn center_crop_offset() {
        assert_eq!(CropWindow::center(256, 224), CropWindow { left: 16, top: 16, size: 224, flip: false });
    }

    #[test]
    fn eval_is_deterministic_and_centered() {
        let b = BBox::new(64.0, 64.0, 192.0, 192.0).unwrap();
        let s = sample(256, vec![b], None);
        let a1 = augment_eval(&s, 224);
        let a2 = augment_eval(&s, 224);
        assert_eq!(a1, a2);
        assert_eq!(a1.boxes, vec![BBox::new(48.0, 48.0, 176.0, 176.0).unwrap()]);
    }

    #[test]
    fn boxes_outside_crop_are_dropped() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let win = CropWindow {
            left: 20,
            top: 20,
            size: 224,
            flip: false,
        };
        assert!(transform_boxes(&[b], 256, 256, 256, &win).is_empty());
    }

    #[test]
    fn mask_box_round_trip_within_one_pixel() {
        let b = BBox::new(37.0, 51.0, 141.0, 170.0).unwrap();
        let mask = BinaryMask::from_box(211, 187, &b);
        let img = Tensor3::zeros(3, 211, 187);
        let s = Sample::new("m".to_string(), img, 0, vec![b], Some(mask), 1).unwrap();
        let a = augment_eval(&s, 64);
        let tb = a.mask.unwrap().tight_box().unwrap();
        let gb = a.boxes[0];
        for (p, q) in [(tb.x1, gb.x1), (tb.y1, gb.y1), (tb.x2, gb.x2), (tb.y2, gb.y2)] {
            assert!((p - q).abs() <= 1.0, "{tb:?} vs {gb:?}");
        }
    }

    #[test]
    fn sample_invariants() {
        let img = Tensor3::zeros(3, 10, 10);
        let outside = BBox::new(5.0, 5.0, 11.0, 9.0).unwrap();
        assert!(Sample::new("a".into(), img.clone(), 0, vec![outside], None, 2).is_err());
        assert!(Sample::new("a".into(), img.clone(), 2, vec![], None, 2).is_err());
        assert!(Sample::new("a".into(), img, 0, vec![], Some(BinaryMask::new(9, 10)), 2).is_err());
    }
}
