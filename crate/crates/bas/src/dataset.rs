//! On-disk datasets: the CUB-200-2011 layout and a directory-per-category
//! reader, decoded into [`Sample`]s.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bas_core::data::Sample;
use bas_core::{BBox, BinaryMask, Tensor3};

use crate::config::{DatasetConfig, DatasetSource};
use crate::gen_data::ensure_dataset;

pub const IMAGES_FILE: &str = "images.txt";
pub const LABELS_FILE: &str = "image_class_labels.txt";
pub const SPLIT_FILE: &str = "train_test_split.txt";
pub const BOXES_FILE: &str = "bounding_boxes.txt";
/// Mask directories searched in order, mirroring the image paths with a
/// `.png` extension.
pub const MASK_DIRS: [&str; 2] = ["segmentations", "masks"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    /// Flag used in `train_test_split.txt`.
    pub fn flag(self) -> u8 {
        match self {
            SplitKind::Train => 1,
            SplitKind::Test => 0,
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "test" => Ok(SplitKind::Test),
            _ => bail!("unknown split `{s}` (expected train or test)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Relative to the manifest's `images_dir`.
    pub path: PathBuf,
    pub category: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Directory the entry paths are relative to.
    pub images_dir: PathBuf,
    pub split: SplitKind,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.images_dir.join(&entry.path)
    }

    pub fn mask_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        MASK_DIRS
            .iter()
            .map(|d| self.root.join(d).join(&entry.path).with_extension("png"))
            .find(|p| p.is_file())
    }
}

/// Non-empty lines of an index file with 1-based line numbers.
fn read_index(root: &Path, name: &str) -> Result<Vec<(usize, String)>> {
    let path = root.join(name);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .collect())
}

fn malformed(file: &str, line: usize, why: impl fmt::Display) -> anyhow::Error {
    anyhow!("{file}:{line}: {why}")
}

fn parse_id(file: &str, line: usize, tok: Option<&str>) -> Result<u64> {
    let tok = tok.ok_or_else(|| malformed(file, line, "missing image id"))?;
    tok.parse().map_err(|_| malformed(file, line, format!("invalid image id `{tok}`")))
}

fn parse_fields<const N: usize>(file: &str, line: usize, text: &str) -> Result<(u64, [String; N])> {
    let mut toks = text.split_whitespace();
    let id = parse_id(file, line, toks.next())?;
    let rest: Vec<String> = toks.map(str::to_string).collect();
    let fields: [String; N] = rest
        .try_into()
        .map_err(|v: Vec<String>| malformed(file, line, format!("expected {} fields after the id, found {}", N, v.len())))?;
    Ok((id, fields))
}

/// Category name from the image's parent directory, if it has one.
fn category_name(path: &Path) -> Option<String> {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
}

/// Reads the CUB index files under `root` and keeps the entries of `split`.
pub fn load_cub_format(root: &Path, split: SplitKind) -> Result<DatasetManifest> {
    let mut paths = BTreeMap::new();
    for (line, text) in read_index(root, IMAGES_FILE)? {
        let (id, [path]) = parse_fields::<1>(IMAGES_FILE, line, &text)?;
        if paths.insert(id, PathBuf::from(path)).is_some() {
            return Err(malformed(IMAGES_FILE, line, format!("duplicate image id {id}")));
        }
    }
    let mut labels = BTreeMap::new();
    for (line, text) in read_index(root, LABELS_FILE)? {
        let (id, [label]) = parse_fields::<1>(LABELS_FILE, line, &text)?;
        let label: usize = label
            .parse()
            .ok()
            .filter(|&l| l >= 1)
            .ok_or_else(|| malformed(LABELS_FILE, line, format!("invalid class label `{label}`")))?;
        labels.insert(id, (label - 1, line));
    }
    let mut splits = BTreeMap::new();
    for (line, text) in read_index(root, SPLIT_FILE)? {
        let (id, [flag]) = parse_fields::<1>(SPLIT_FILE, line, &text)?;
        let flag: u8 = match flag.as_str() {
            "0" => 0,
            "1" => 1,
            _ => return Err(malformed(SPLIT_FILE, line, format!("split flag `{flag}` is not 0 or 1"))),
        };
        splits.insert(id, flag);
    }
    let mut boxes: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for (line, text) in read_index(root, BOXES_FILE)? {
        let (id, fields) = parse_fields::<4>(BOXES_FILE, line, &text)?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| malformed(BOXES_FILE, line, format!("invalid number `{f}`")))?;
        }
        let b = BBox::from_xywh(v[0], v[1], v[2], v[3]).map_err(|e| malformed(BOXES_FILE, line, e))?;
        boxes.entry(id).or_default().push(b);
    }

    let num_categories = labels.values().map(|(c, _)| c + 1).max().unwrap_or(0);
    let mut names: Vec<Option<String>> = vec![None; num_categories];
    for (id, path) in &paths {
        if let (Some(&(c, _)), Some(name)) = (labels.get(id), category_name(path)) {
            names[c].get_or_insert(name);
        }
    }
    let categories = names
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.unwrap_or_else(|| format!("class_{:03}", i + 1)))
        .collect();

    let mut entries = Vec::new();
    for (id, path) in paths {
        let Some(&flag) = splits.get(&id) else {
            bail!("{SPLIT_FILE}: no split flag for image id {id}");
        };
        if flag != split.flag() {
            continue;
        }
        let &(category, _) = labels
            .get(&id)
            .with_context(|| format!("{LABELS_FILE}: no class label for image id {id}"))?;
        entries.push(ManifestEntry {
            image_id: id.to_string(),
            path,
            category,
            boxes: boxes.remove(&id).unwrap_or_default(),
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        images_dir: root.join("images"),
        split,
        categories,
        entries,
    })
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("cannot list {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// `<root>/<split>/<category>/<image>` with categories in name order and no
/// boxes.
pub fn load_folder_format(root: &Path, split: SplitKind) -> Result<DatasetManifest> {
    let split_dir = root.join(split.to_string());
    let base = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
    let mut categories = Vec::new();
    let mut entries = Vec::new();
    for dir in sorted_dir(&base)?.into_iter().filter(|p| p.is_dir()) {
        let category = categories.len();
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for file in sorted_dir(&dir)?.into_iter().filter(|p| is_image_file(p)) {
            let rel = file.strip_prefix(&base).unwrap_or(&file).to_path_buf();
            entries.push(ManifestEntry {
                image_id: rel.with_extension("").to_string_lossy().replace('\\', "/"),
                path: rel,
                category,
                boxes: Vec::new(),
            });
        }
        categories.push(name);
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        images_dir: base,
        split,
        categories,
        entries,
    })
}

pub fn decode_rgb(path: &Path) -> Result<Tensor3<f32>> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode image {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor3::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Mask pixels with luma above 127 are foreground.
pub fn decode_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode mask {}", path.display()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = img.as_raw().iter().map(|&v| v > 127).collect();
    Ok(BinaryMask::from_vec(h, w, bits)?)
}

/// Decodes every entry of `manifest`.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    let mut seen = HashSet::new();
    manifest
        .entries
        .iter()
        .map(|e| {
            if !seen.insert(e.image_id.as_str()) {
                bail!("duplicate image id {}", e.image_id);
            }
            let image = decode_rgb(&manifest.image_path(e))?;
            let mask = manifest.mask_path(e).map(|p| decode_mask(&p)).transpose()?;
            Sample::new(e.image_id.clone(), image, e.category, e.boxes.clone(), mask, manifest.num_categories())
                .with_context(|| format!("image {}", e.image_id))
        })
        .collect()
}

/// Samples of one split as configured, generating synthetic data on first use.
pub fn load_split(cfg: &DatasetConfig, split: SplitKind) -> Result<(Vec<Sample>, Vec<String>)> {
    let manifest = match cfg.source {
        DatasetSource::Synthetic => {
            ensure_dataset(&cfg.synthetic, &cfg.root)?;
            load_cub_format(&cfg.root, split)?
        }
        DatasetSource::Cub => load_cub_format(&cfg.root, split)?,
        DatasetSource::Folder => load_folder_format(&cfg.root, split)?,
    };
    let samples = load_samples(&manifest)?;
    Ok((samples, manifest.categories))
}

/// One row of the four CUB index files.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRow {
    pub id: u64,
    pub path: String,
    pub category: usize,
    pub split: SplitKind,
    pub bbox: BBox,
}

/// Writes `images.txt`, `image_class_labels.txt`, `train_test_split.txt` and
/// `bounding_boxes.txt`.
pub fn write_index_files(root: &Path, rows: &[IndexRow]) -> Result<()> {
    let mut images = String::new();
    let mut labels = String::new();
    let mut split = String::new();
    let mut boxes = String::new();
    for r in rows {
        images += &format!("{} {}\n", r.id, r.path);
        labels += &format!("{} {}\n", r.id, r.category + 1);
        split += &format!("{} {}\n", r.id, r.split.flag());
        let b = r.bbox;
        boxes += &format!("{} {:.1} {:.1} {:.1} {:.1}\n", r.id, b.x1, b.y1, b.width(), b.height());
    }
    for (name, body) in [(IMAGES_FILE, images), (LABELS_FILE, labels), (SPLIT_FILE, split), (BOXES_FILE, boxes)] {
        let path = root.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, boxes: &str, split: &str) {
        fs::write(
            dir.join(IMAGES_FILE),
            "1 001.Black_footed_Albatross/img1.jpg\n2 001.Black_footed_Albatross/img2.jpg\n3 002.Laysan_Albatross/img3.jpg\n",
        )
        .unwrap();
        fs::write(dir.join(LABELS_FILE), "1 1\n2 1\n3 2\n").unwrap();
        fs::write(dir.join(SPLIT_FILE), split).unwrap();
        fs::write(dir.join(BOXES_FILE), boxes).unwrap();
    }

    #[test]
    fn parses_cub_fixture() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "1 60.0 27.0 325.0 304.0\n2 1 1 5 5\n3 0 0 10 10\n", "1 1\n2 0\n3 1\n");
        let m = load_cub_format(dir.path(), SplitKind::Train).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].boxes, vec![BBox::new(60.0, 27.0, 385.0, 331.0).unwrap()]);
        assert_eq!(m.categories, vec!["001.Black_footed_Albatross", "002.Laysan_Albatross"]);
        assert_eq!(m.entries[1].category, 1);
        let t = load_cub_format(dir.path(), SplitKind::Test).unwrap();
        assert_eq!(t.entries.len(), 1);
        assert_eq!(m, load_cub_format(dir.path(), SplitKind::Train).unwrap());
    }

    #[test]
    fn zero_width_box_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "1 60 27 325 304\n2 1 1 0 5\n", "1 1\n2 1\n3 1\n");
        let err = load_cub_format(dir.path(), SplitKind::Train).unwrap_err().to_string();
        assert!(err.starts_with("bounding_boxes.txt:2:"), "{err}");
    }

    #[test]
    fn malformed_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "1 1 1 5 5\n", "1 1\n2 maybe\n3 1\n");
        let err = load_cub_format(dir.path(), SplitKind::Train).unwrap_err().to_string();
        assert!(err.starts_with("train_test_split.txt:2:"), "{err}");
    }

    #[test]
    fn missing_index_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cub_format(dir.path(), SplitKind::Train).unwrap_err().to_string();
        assert!(err.contains("images.txt"), "{err}");
    }

    #[test]
    fn empty_split_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        for f in [IMAGES_FILE, LABELS_FILE, SPLIT_FILE, BOXES_FILE] {
            fs::write(dir.path().join(f), "").unwrap();
        }
        let m = load_cub_format(dir.path(), SplitKind::Test).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn box_outside_image_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images/a")).unwrap();
        image::RgbImage::new(8, 8).save(dir.path().join("images/a/x.png")).unwrap();
        fs::write(dir.path().join(IMAGES_FILE), "5 a/x.png\n").unwrap();
        fs::write(dir.path().join(LABELS_FILE), "5 1\n").unwrap();
        fs::write(dir.path().join(SPLIT_FILE), "5 1\n").unwrap();
        fs::write(dir.path().join(BOXES_FILE), "5 2 2 10 3\n").unwrap();
        let m = load_cub_format(dir.path(), SplitKind::Train).unwrap();
        let err = format!("{:#}", load_samples(&m).unwrap_err());
        assert!(err.contains("image 5"), "{err}");
    }

    #[test]
    fn folder_reader_orders_categories() {
        let dir = tempfile::tempdir().unwrap();
        for (c, f) in [("cat_b", "1.png"), ("cat_a", "2.png"), ("cat_a", "1.png")] {
            fs::create_dir_all(dir.path().join("train").join(c)).unwrap();
            image::RgbImage::new(4, 4).save(dir.path().join("train").join(c).join(f)).unwrap();
        }
        let m = load_folder_format(dir.path(), SplitKind::Train).unwrap();
        assert_eq!(m.categories, vec!["cat_a", "cat_b"]);
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[2].category, 1);
        let samples = load_samples(&m).unwrap();
        assert_eq!(samples[0].image.shape(), (3, 4, 4));
    }
}
