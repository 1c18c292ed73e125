//! Dataset loading, the 1/n labeled split, dataset statistics and the
//! synthetic scene generator.

mod io;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotatedImage, Scene, SlotType};

pub use io::{annotation_files, load_annotations, RESERVED_FILES, save_annotations, AnnotationRecord, PointRecord, SlotRecord};
pub use io::{read_json, write_json};
pub use synth::{generate_synthetic, render_scene, SceneLayout, SynthConfig};

/// Labeled fraction `1/n` with a deterministic shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub n: usize,
    pub seed: u64,
}

impl SplitProtocol {
    pub fn labeled_count(&self, total: usize) -> usize {
        total.div_ceil(self.n.max(1))
    }
}

/// Index form of [`split_semi`]: `(labeled, unlabeled)` indices, each sorted.
pub fn split_indices(total: usize, protocol: SplitProtocol) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    order.shuffle(&mut rng);
    let n_labeled = protocol.labeled_count(total);
    let mut labeled = order[..n_labeled].to_vec();
    let mut unlabeled = order[n_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    (labeled, unlabeled)
}

/// Splits into `ceil(len / n)` labeled and the remaining unlabeled images.
/// Unlabeled images keep their annotation in memory but have their labeled
/// flag cleared.
pub fn split_semi(
    dataset: Vec<AnnotatedImage>,
    protocol: SplitProtocol,
) -> (Vec<AnnotatedImage>, Vec<AnnotatedImage>) {
    let (labeled_idx, _) = split_indices(dataset.len(), protocol);
    let mut is_labeled = vec![false; dataset.len()];
    for i in labeled_idx {
        is_labeled[i] = true;
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (mut item, keep) in dataset.into_iter().zip(is_labeled) {
        item.set_labeled(keep);
        if keep {
            labeled.push(item);
        } else {
            unlabeled.push(item);
        }
    }
    (labeled, unlabeled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub n_slots: usize,
    pub n_slanted: usize,
    /// Slots per image.
    pub density: f64,
    /// Fraction of slots that are slanted, in `[0, 1]`.
    pub slanted_pct: f64,
    pub per_scene_counts: BTreeMap<Scene, usize>,
}

impl DatasetStats {
    pub fn from_counts(
        n_images: usize,
        n_slots: usize,
        n_slanted: usize,
        per_scene_counts: BTreeMap<Scene, usize>,
    ) -> Self {
        Self {
            n_images,
            n_slots,
            n_slanted,
            density: if n_images == 0 { 0.0 } else { n_slots as f64 / n_images as f64 },
            slanted_pct: if n_slots == 0 { 0.0 } else { n_slanted as f64 / n_slots as f64 },
            per_scene_counts,
        }
    }

    /// Stats of the union of two disjoint datasets.
    pub fn merge(&self, other: &DatasetStats) -> DatasetStats {
        let mut scenes = self.per_scene_counts.clone();
        for (scene, count) in &other.per_scene_counts {
            *scenes.entry(*scene).or_default() += count;
        }
        DatasetStats::from_counts(
            self.n_images + other.n_images,
            self.n_slots + other.n_slots,
            self.n_slanted + other.n_slanted,
            scenes,
        )
    }
}

pub fn dataset_stats(dataset: &[AnnotatedImage]) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut n_slots = 0;
    let mut n_slanted = 0;
    let mut scenes = BTreeMap::new();
    for item in dataset {
        let ann = item.annotation();
        n_slots += ann.slots.len();
        n_slanted += ann.slots.iter().filter(|s| s.ptype == SlotType::Slanted).count();
        *scenes.entry(item.scene).or_default() += 1;
    }
    Ok(DatasetStats::from_counts(dataset.len(), n_slots, n_slanted, scenes))
}
