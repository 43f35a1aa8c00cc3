//! Writes the synthetic shapes dataset in the CUB file layout.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use bas_core::synth::{generate_sample, ShapeKind, Split, SyntheticConfig};
use image::{GrayImage, RgbImage};

use crate::dataset::{write_index_files, IndexRow, SplitKind};

/// Marker written last so a partially generated directory is regenerated.
pub const COMPLETE_MARKER: &str = "synthetic.json";

pub fn category_dir(category: usize) -> String {
    let kind = ShapeKind::for_category(category);
    format!("{:03}.{}_{}", category + 1, format!("{kind:?}").to_lowercase(), category)
}

/// Materializes images, masks and index files under `root`. Returns the
/// number of images written.
pub fn generate_dataset(cfg: &SyntheticConfig, root: &Path) -> Result<usize> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for category in 0..cfg.num_categories {
        let dir = category_dir(category);
        fs::create_dir_all(root.join("images").join(&dir))?;
        fs::create_dir_all(root.join("masks").join(&dir))?;
        for (split, kind) in [(Split::Train, SplitKind::Train), (Split::Test, SplitKind::Test)] {
            for index in 0..cfg.samples_per_category(split) {
                let s = generate_sample(cfg, split, category, index)?;
                let name = format!("{dir}/{kind}_{index:05}.png");
                let img = RgbImage::from_raw(s.image.width as u32, s.image.height as u32, s.image.pixels)
                    .context("pixel buffer size")?;
                let path = root.join("images").join(&name);
                img.save(&path).with_context(|| format!("writing {}", path.display()))?;
                let mask_px = s.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
                let mask = GrayImage::from_raw(s.mask.width() as u32, s.mask.height() as u32, mask_px)
                    .context("mask buffer size")?;
                mask.save(root.join("masks").join(&name))?;
                rows.push(IndexRow {
                    id: rows.len() as u64 + 1,
                    path: name,
                    category,
                    split: kind,
                    bbox: s.bbox,
                });
            }
        }
    }
    write_index_files(root, &rows)?;
    fs::write(root.join(COMPLETE_MARKER), serde_json::to_string_pretty(cfg)?)?;
    Ok(rows.len())
}

/// Generates the dataset unless `root` already holds one made from `cfg`.
pub fn ensure_dataset(cfg: &SyntheticConfig, root: &Path) -> Result<()> {
    let marker = root.join(COMPLETE_MARKER);
    if let Ok(text) = fs::read_to_string(&marker) {
        if serde_json::from_str::<SyntheticConfig>(&text).ok().as_ref() == Some(cfg) {
            return Ok(());
        }
    }
    if root.exists() {
        for sub in ["images", "masks"] {
            let p = root.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).with_context(|| format!("clearing {}", p.display()))?;
            }
        }
    }
    generate_dataset(cfg, root).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_cub_format, load_samples};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_categories: 2,
            image_size: 32,
            train_per_category: 10,
            test_per_category: 3,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(generate_dataset(&small(), dir.path()).unwrap(), 26);
        let m = load_cub_format(dir.path(), SplitKind::Train).unwrap();
        assert_eq!(m.entries.len(), 20);
        let samples = load_samples(&m).unwrap();
        for s in &samples {
            let mask = s.mask.as_ref().expect("mask written");
            assert_eq!(mask.tight_box(), Some(s.boxes[0]));
        }
    }

    #[test]
    fn byte_identical_reruns() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&small(), a.path()).unwrap();
        generate_dataset(&small(), b.path()).unwrap();
        let m = load_cub_format(a.path(), SplitKind::Test).unwrap();
        for e in &m.entries {
            let pa = fs::read(a.path().join("images").join(&e.path)).unwrap();
            let pb = fs::read(b.path().join("images").join(&e.path)).unwrap();
            assert_eq!(pa, pb);
        }
        for f in ["images.txt", "bounding_boxes.txt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
