use crate::Real;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::colorspace::{normalize_lab, srgb_to_lab, RgbImage};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const CACHE_LIMIT: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Every image, ignoring the split.
    All,
}

/// Image files of one split.
///
/// Flat directories are split by a seeded hash of each file name. A PASCAL
/// VOC layout (`JPEGImages/` plus `ImageSets/Main/{train,val}.txt`) uses its
/// own lists, with `val` as the test split.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    split: Split,
    paths: Vec<PathBuf>,
    cache: Mutex<HashMap<(usize, usize), Arc<RgbImage>>>,
}

/// Inputs and targets for a list of images.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Normalized lightness `[B, 1, S, S]`.
    pub ln: Tensor,
    /// Normalized ab target `[B, 2, S, S]`.
    pub ab: Tensor,
    /// The resized source images.
    pub rgb: Vec<RgbImage>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn split_key(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect())
}

fn voc_paths(root: &Path, split: Split) -> Result<Option<Vec<PathBuf>>> {
    let images = root.join("JPEGImages");
    let sets = root.join("ImageSets").join("Main");
    if !images.is_dir() || !sets.join("train.txt").is_file() || !sets.join("val.txt").is_file() {
        return Ok(None);
    }
    let lists: &[&str] = match split {
        Split::Train => &["train.txt"],
        Split::Test => &["val.txt"],
        Split::All => &["train.txt", "val.txt"],
    };
    let mut out = Vec::new();
    for list in lists {
        for id in read_list(&sets.join(list))? {
            out.push(images.join(format!("{id}.jpg")));
        }
    }
    Ok(Some(out))
}

fn flat_paths(root: &Path, split: Split, seed: u64, test_fraction: f64) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort_by_cached_key(|p| (split_key(seed, &file_name(p)), file_name(p)));
    let n_test = (files.len() as f64 * test_fraction).round() as usize;
    let mut out = match split {
        Split::Test => files[..n_test].to_vec(),
        Split::Train => files[n_test..].to_vec(),
        Split::All => files,
    };
    out.sort();
    Ok(out)
}

/// Reads the image and rejects grayscale sources.
fn load_checked(path: &Path) -> std::result::Result<RgbImage, String> {
    let img = RgbImage::read(path).map_err(|e| e.to_string())?;
    if img.is_grayscale() {
        return Err("grayscale image (no chroma to learn from)".into());
    }
    Ok(img)
}

/// Lists, splits and validates the images under `dir`.
///
/// Every file of the split is decoded once; undecodable or grayscale files
/// are reported together.
pub fn load_dataset(dir: &Path, split: Split, seed: u64, test_fraction: f64) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let paths = match voc_paths(dir, split)? {
        Some(p) => p,
        None => flat_paths(dir, split, seed, test_fraction)?,
    };
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no {} images (png/jpg) for the {split:?} split in {}",
            EXTENSIONS.join("/"),
            dir.display()
        )));
    }
    let bad: Vec<String> = par::map_range(paths.len(), |i| {
        load_checked(&paths[i])
            .err()
            .map(|e| format!("{}: {e}", paths[i].display()))
    })
    .into_iter()
    .flatten()
    .collect();
    if !bad.is_empty() {
        return Err(Error::Dataset(format!(
            "{} unusable image(s) in {}:\n  {}",
            bad.len(),
            dir.display(),
            bad.join("\n  ")
        )));
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        split,
        paths,
        cache: Mutex::new(HashMap::new()),
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    /// File name of image `i`, used as its report key.
    pub fn name(&self, i: usize) -> String {
        file_name(&self.paths[i])
    }

    /// Image `i` at native resolution.
    pub fn image(&self, i: usize) -> Result<RgbImage> {
        let path = self.paths.get(i).ok_or_else(|| {
            Error::Invalid(format!(
                "image index {i} out of range for {} images",
                self.len()
            ))
        })?;
        RgbImage::read(path)
    }

    /// Image `i` resized to `size x size`, memoized for small corpora.
    pub fn resized(&self, i: usize, size: usize) -> Result<Arc<RgbImage>> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(&(i, size)) {
            return Ok(img.clone());
        }
        let img = Arc::new(self.image(i)?.resized(size, size));
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() < CACHE_LIMIT {
            cache.insert((i, size), img.clone());
        }
        Ok(img)
    }

    /// Resize -> Lab -> normalize for the given images.
    pub fn make_batch(&self, indices: &[usize], size: usize) -> Result<Batch> {
        let images = par::map_range(indices.len(), |j| self.resized(indices[j], size));
        let rgb: Vec<RgbImage> = images
            .into_iter()
            .map(|r| r.map(|a| (*a).clone()))
            .collect::<Result<_>>()?;
        Ok(batch_from_images(rgb))
    }
}

/// Builds a batch from equally sized images.
pub fn batch_from_images(rgb: Vec<RgbImage>) -> Batch {
    let (w, h) = rgb.first().map_or((0, 0), |i| (i.width(), i.height()));
    let plane = w * h;
    let mut ln = Vec::with_capacity(rgb.len() * plane);
    let mut ab = Vec::with_capacity(rgb.len() * 2 * plane);
    for img in &rgb {
        assert_eq!(
            (img.width(), img.height()),
            (w, h),
            "batch images must share a size"
        );
        let n = normalize_lab(&srgb_to_lab(img));
        ln.extend(n.l.iter().map(|&v| v as Real));
        ab.extend(n.a.iter().map(|&v| v as Real));
        ab.extend(n.b.iter().map(|&v| v as Real));
    }
    let b = rgb.len();
    Batch {
        ln: Tensor::new(&[b, 1, h, w], ln).expect("sizes agree"),
        ab: Tensor::new(&[b, 2, h, w], ab).expect("sizes agree"),
        rgb,
    }
}
