//! Image/caption/label datasets: a controllable synthetic generator, a loader
//! for class-per-directory image trees, and seeded batching.

mod baseline;
mod folder;
mod synthetic;

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use baseline::{centroid_baseline_accuracy, color_histogram, NearestCentroid};
pub use folder::{load_folder_dataset, load_image, write_dataset, LoadOptions, MANIFEST_FILE};
pub use synthetic::{generate_synthetic, GlyphType, Shape, SyntheticSpec, COLORS, SHAPES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One labelled image with its caption. Pixels are kept as 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image: Array3<u8>,
    pub caption: String,
    pub label_id: usize,
    pub split: Split,
}

impl SampleRecord {
    /// Pixels scaled to `[0, 1]`.
    pub fn pixels(&self) -> Array3<f32> {
        self.image.mapv(|v| f32::from(v) / 255.0)
    }
}

/// Converts `[0, 1]` pixels to 8-bit, rounding to nearest.
pub fn quantize(pixels: ArrayView3<'_, f32>) -> Array3<u8> {
    pixels.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Per-class entry of the on-disk manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub name: String,
    pub dir: String,
    pub label_id: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Ingredient names, marker last. Empty for loaded folder datasets.
    #[serde(default)]
    pub ingredients: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sibling: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<ManifestClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
    pub seed: u64,
    /// `sha256` per split name over labels, captions and pixels.
    pub checksums: BTreeMap<String, String>,
}

impl Manifest {
    /// Description listing the class's ingredients, if the manifest has them.
    pub fn description(&self, class: &str) -> Option<String> {
        let c = self.classes.iter().find(|c| c.name == class)?;
        (!c.ingredients.is_empty()).then(|| ingredient_sentence(&c.ingredients))
    }
}

/// Caption suffix of synthetic classes: "With a, b and c."
pub fn ingredient_sentence(ingredients: &[String]) -> String {
    match ingredients {
        [] => String::new(),
        [one] => format!("With {one}."),
        [rest @ .., last] => format!("With {} and {last}.", rest.join(", ")),
    }
}

/// Directory name of a class: spaces become underscores.
pub fn class_dir_name(name: &str) -> String {
    name.replace(' ', "_")
}

/// Category name shown in captions: underscores become spaces.
pub fn display_name(dir: &str) -> String {
    dir.replace('_', " ")
}

/// Class names ordered by label id plus both splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub image_size: usize,
    pub manifest: Manifest,
    /// Images that could not be decoded while loading.
    pub skipped: usize,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in self.split(split) {
            counts[s.label_id] += 1;
        }
        counts
    }

    pub fn checksum(&self, split: Split) -> String {
        split_checksum(self.split(split))
    }

    /// Seeded per-epoch batches over one split.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        drop_last: bool,
    ) -> Result<Vec<Batch<'_>>> {
        let samples = self.split(split);
        let order = batch_order(samples.len(), batch_size, seed, epoch, drop_last)?;
        Ok(order
            .into_iter()
            .map(|indices| Batch {
                samples: indices.iter().map(|&i| &samples[i]).collect(),
                indices,
            })
            .collect())
    }
}

/// Hash over every record of a split, in order.
pub fn split_checksum(samples: &[SampleRecord]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.label_id as u64).to_le_bytes());
        h.update((s.caption.len() as u64).to_le_bytes());
        h.update(s.caption.as_bytes());
        let (hh, ww, _) = s.image.dim();
        h.update((hh as u64).to_le_bytes());
        h.update((ww as u64).to_le_bytes());
        h.update(s.image.as_standard_layout().as_slice().expect("standard layout"));
    }
    hex::encode(h.finalize())
}

/// Samples drawn for one optimizer step.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub samples: Vec<&'a SampleRecord>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<Array3<f32>> {
        self.samples.iter().map(|s| s.pixels()).collect()
    }

    pub fn captions(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.caption.as_str()).collect()
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label_id).collect()
    }
}

/// Index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`, so resuming mid-run reproduces the same order.
pub fn batch_order(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::validation("batch_size must be at least 2"));
    }
    if batch_size > n {
        return Err(Error::validation(format!(
            "batch_size {batch_size} exceeds the {n} available samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = perm.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if drop_last && out.last().is_some_and(|b| b.len() < batch_size) {
        out.pop();
    }
    Ok(out)
}
