//! Heatmap overlays with ground-truth and predicted boxes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bas_core::data::{augment_eval, Sample};
use bas_core::inference::localize;
use bas_core::model::BasModel;

use crate::evaluate::EvalOptions;
use crate::plot::overlay;

/// File name for an image id; path separators become underscores.
pub fn overlay_name(image_id: &str) -> String {
    let stem: String = image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{stem}.png")
}

/// Samples named in `ids`, or the first `count` when `ids` is empty.
pub fn select<'a>(samples: &'a [Sample], ids: &[String], count: usize) -> Result<Vec<&'a Sample>> {
    if ids.is_empty() {
        return Ok(samples.iter().take(count).collect());
    }
    ids.iter()
        .map(|id| match samples.iter().find(|s| &s.image_id == id) {
            Some(s) => Ok(s),
            None => bail!("image id `{id}` is not in the split"),
        })
        .collect()
}

/// Writes `out_dir/<id>.png` for every sample and returns the paths.
pub fn visualize(model: &BasModel<f32>, samples: &[&Sample], opts: &EvalOptions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::with_capacity(samples.len());
    for s in samples {
        let aug = augment_eval(s, opts.input_size);
        let res = localize(model, &aug.image, opts.protocol.protocol(s.category), opts.k, opts.tau)
            .with_context(|| format!("localizing image {}", s.image_id))?;
        let img = overlay(&aug.image, &res.fused_map, &aug.boxes, &res.predicted_box);
        let path = out_dir.join(overlay_name(&s.image_id));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_flat() {
        assert_eq!(overlay_name("001.circle_0/test_00003"), "001.circle_0_test_00003.png");
    }
}
