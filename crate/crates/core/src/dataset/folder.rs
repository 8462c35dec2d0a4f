//! Class-per-directory image trees: `root/{train,test}/{class}/*.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    class_dir_name, display_name, split_checksum, Dataset, Manifest, ManifestClass, SampleRecord,
    Split,
};
use crate::error::{Error, Result};
use crate::textaug::standard_caption;

pub const MANIFEST_FILE: &str = "manifest.json";
const LABELS_FILE: &str = "labels.json";
const DEFAULT_IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Target side length; defaults to the manifest's size, else 64.
    pub image_size: Option<usize>,
    /// Seed for a stratified 80:20 split of roots without a `test/` tree.
    pub split_seed: Option<u64>,
}

fn to_array(img: &RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone())
        .expect("rgb buffer has h*w*3 bytes")
}

fn to_image(pixels: &Array3<u8>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    let raw = pixels.as_standard_layout().to_owned().into_raw_vec_and_offset().0;
    ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).expect("rgb buffer has h*w*3 bytes")
}

/// Writes PNGs plus `manifest.json`. Existing files are overwritten.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for split in [Split::Train, Split::Test] {
        let mut counters = vec![0usize; ds.n_classes()];
        for s in ds.split(split) {
            let dir = root.join(split.name()).join(class_dir_name(&ds.classes[s.label_id]));
            if counters[s.label_id] == 0 {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            let path = dir.join(format!("{:05}.png", counters[s.label_id]));
            counters[s.label_id] += 1;
            to_image(&s.image)
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        }
    }
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::validation(format!("malformed {}: {e}", path.display())))
}

fn decode(path: &Path, size: usize) -> image::ImageResult<Array3<u8>> {
    let mut rgb = image::open(path)?.to_rgb8();
    let s = size as u32;
    if rgb.dimensions() != (s, s) {
        rgb = image::imageops::resize(&rgb, s, s, FilterType::Triangle);
    }
    Ok(to_array(&rgb))
}

/// One image file as RGB bytes, resized to `size × size`.
pub fn load_image(path: &Path, size: usize) -> Result<Array3<u8>> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    decode(path, size).map_err(|e| Error::validation(format!("cannot decode {}: {e}", path.display())))
}

struct ImageLoader {
    size: usize,
    skipped: usize,
}

impl ImageLoader {
    fn load(&mut self, path: &Path) -> Option<Array3<u8>> {
        match decode(path, self.size) {
            Ok(img) => Some(img),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                self.skipped += 1;
                None
            }
        }
    }

    /// All decodable images of one class directory, in file-name order.
    fn class_images(&mut self, dir: &Path, class: &str) -> Result<Vec<Array3<u8>>> {
        let files = sorted_entries(dir, false)?;
        let images: Vec<_> = files.iter().filter_map(|f| self.load(f)).collect();
        if images.is_empty() {
            return Err(Error::validation(format!(
                "class directory {class:?} ({}) contains no readable images",
                dir.display()
            )));
        }
        Ok(images)
    }
}

/// Loads `root/{train,test}/{class}/…`, or `root/{class}/…` split 80:20 when
/// `split_seed` is set. Label ids follow sorted directory names.
pub fn load_folder_dataset(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::validation(format!("dataset root {} is not a directory", root.display())));
    }
    let saved: Option<Manifest> = read_json(&root.join(MANIFEST_FILE))?;
    let labels: BTreeMap<String, String> = read_json(&root.join(LABELS_FILE))?.unwrap_or_default();
    let size = opts
        .image_size
        .or_else(|| saved.as_ref().and_then(|m| m.spec.as_ref()).map(|s| s.image_size))
        .unwrap_or(DEFAULT_IMAGE_SIZE);
    let mut loader = ImageLoader { size, skipped: 0 };

    let train_root = root.join("train");
    let test_root = root.join("test");
    let presplit = test_root.is_dir();
    if !presplit && opts.split_seed.is_none() {
        return Err(Error::validation(format!(
            "{} has no test/ directory; pass a split seed to split 80:20",
            root.display()
        )));
    }
    let class_root = if train_root.is_dir() { train_root.clone() } else { root.to_path_buf() };
    let dirs: Vec<String> = sorted_entries(&class_root, true)?.iter().map(|p| file_name(p)).collect();
    if dirs.is_empty() {
        return Err(Error::validation(format!("no class directories under {}", class_root.display())));
    }
    let classes: Vec<String> = dirs
        .iter()
        .map(|d| labels.get(d).cloned().unwrap_or_else(|| display_name(d)))
        .collect();

    let caption_for = |name: &str| -> String {
        let base = standard_caption(name);
        match saved.as_ref().and_then(|m| m.description(name)) {
            Some(desc) => format!("{base} {desc}"),
            None => base,
        }
    };
    let record = |image, label_id, split, caption: &str| SampleRecord {
        image,
        caption: caption.to_string(),
        label_id,
        split,
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, (dir, name)) in dirs.iter().zip(&classes).enumerate() {
        let caption = caption_for(name);
        if presplit {
            for img in loader.class_images(&class_root.join(dir), name)? {
                train.push(record(img, label, Split::Train, &caption));
            }
            let test_dir = test_root.join(dir);
            if !test_dir.is_dir() {
                return Err(Error::validation(format!("class {name:?} is missing from test/")));
            }
            for img in loader.class_images(&test_dir, name)? {
                test.push(record(img, label, Split::Test, &caption));
            }
        } else {
            let mut images = loader.class_images(&class_root.join(dir), name)?;
            let seed = opts.split_seed.expect("checked above");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(label as u64);
            images.shuffle(&mut rng);
            let n = images.len();
            let n_train = if n < 2 { n } else { ((0.8 * n as f64).round() as usize).clamp(1, n - 1) };
            for (i, img) in images.into_iter().enumerate() {
                let split = if i < n_train { Split::Train } else { Split::Test };
                let target = if i < n_train { &mut train } else { &mut test };
                target.push(record(img, label, split, &caption));
            }
        }
    }

    let count = |v: &[SampleRecord], label: usize| v.iter().filter(|s| s.label_id == label).count();
    let manifest = Manifest {
        classes: dirs
            .iter()
            .zip(&classes)
            .enumerate()
            .map(|(label, (dir, name))| {
                let prior = saved.as_ref().and_then(|m| m.classes.iter().find(|c| &c.name == name));
                ManifestClass {
                    name: name.clone(),
                    dir: dir.clone(),
                    label_id: label,
                    train_count: count(&train, label),
                    test_count: count(&test, label),
                    ingredients: prior.map(|c| c.ingredients.clone()).unwrap_or_default(),
                    sibling: prior.and_then(|c| c.sibling.clone()),
                }
            })
            .collect(),
        spec: saved.as_ref().and_then(|m| m.spec.clone()),
        seed: saved
            .as_ref()
            .map(|m| m.seed)
            .or(opts.split_seed)
            .unwrap_or(0),
        checksums: [
            ("train".to_string(), split_checksum(&train)),
            ("test".to_string(), split_checksum(&test)),
        ]
        .into(),
    };
    if let Some(prior) = &saved {
        if prior.checksums != manifest.checksums {
            log::warn!("{}: checksums differ from the saved manifest", root.display());
        }
    }
    Ok(Dataset {
        classes,
        train,
        test,
        image_size: size,
        manifest,
        skipped: loader.skipped,
    })
}
