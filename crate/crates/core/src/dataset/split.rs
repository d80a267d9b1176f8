use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|&v| !(v > 0.0)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be positive and sum to 1, got {r:?}"
            )));
        }
        Ok(())
    }
}

/// Where a sample comes from, without its pixel data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: u64,
    pub scene_id: u32,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub scene_id: u32,
    pub x: usize,
    pub y: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub ratios: SplitRatios,
    pub seed: u64,
    /// Sorted by sample id.
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    pub fn scenes(&self, split: Split) -> Vec<u32> {
        let mut s: Vec<u32> = self
            .entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.scene_id)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Fraction of samples in each split, in `Split::ALL` order.
    pub fn realized_ratios(&self) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for e in &self.entries {
            counts[e.split.index()] += 1;
        }
        let n = self.entries.len().max(1) as f64;
        counts.map(|c| c as f64 / n)
    }
}

/// Assigns whole scenes to train/val/test so patch counts approach `ratios`.
///
/// Scenes are shuffled by `seed`, ordered by size (largest first, shuffle
/// order breaking ties) and each goes to the split furthest below its target.
pub fn split_dataset(samples: &[SampleRef], ratios: &SplitRatios, seed: u64) -> Result<DatasetManifest> {
    ratios.validate()?;
    let mut by_scene: BTreeMap<u32, usize> = BTreeMap::new();
    for s in samples {
        *by_scene.entry(s.scene_id).or_default() += 1;
    }
    if by_scene.len() < Split::ALL.len() {
        return Err(Error::contract(
            "split_dataset",
            format!("need at least 3 scenes to fill train/val/test, got {}", by_scene.len()),
        ));
    }
    let mut scenes: Vec<(u32, usize)> = by_scene.into_iter().collect();
    scenes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    scenes.sort_by(|a, b| b.1.cmp(&a.1));

    let target = ratios.as_array();
    let mut assigned = [0usize; 3];
    let mut members: [Vec<(u32, usize)>; 3] = Default::default();
    let mut total = 0usize;
    for &(scene, count) in &scenes {
        total += count;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for k in 0..3 {
            let deficit = target[k] * total as f64 - assigned[k] as f64;
            if deficit > best_deficit {
                best = k;
                best_deficit = deficit;
            }
        }
        assigned[best] += count;
        members[best].push((scene, count));
    }
    // Donate the smallest scene of the most populated split to any empty one.
    for k in 0..3 {
        if members[k].is_empty() {
            let donor = (0..3).max_by_key(|&j| (members[j].len(), std::cmp::Reverse(j))).unwrap();
            let pos = members[donor]
                .iter()
                .enumerate()
                .min_by_key(|(_, &(id, c))| (c, id))
                .map(|(i, _)| i)
                .unwrap();
            let moved = members[donor].remove(pos);
            members[k].push(moved);
        }
    }
    let mut scene_split = BTreeMap::new();
    for (k, list) in members.iter().enumerate() {
        for &(scene, _) in list {
            scene_split.insert(scene, Split::ALL[k]);
        }
    }
    let mut entries: Vec<ManifestEntry> = samples
        .iter()
        .map(|s| ManifestEntry {
            id: s.id,
            scene_id: s.scene_id,
            x: s.x,
            y: s.y,
            split: scene_split[&s.scene_id],
        })
        .collect();
    entries.sort_by_key(|e| e.id);
    if entries.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::contract("split_dataset", "duplicate sample ids"));
    }
    Ok(DatasetManifest {
        ratios: ratios.clone(),
        seed,
        entries,
    })
}
