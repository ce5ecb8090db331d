use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

/// Number of training records for a class of `n`, rounding half up and
/// leaving at least one record on each side.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    let raw = (n as f64 * train_fraction + 0.5).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Per-class seeded shuffle then cut; both halves keep manifest order.
pub fn stratified_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Param(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; manifest.len()];
    for class in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest.records[i].label == class)
            .collect();
        match idx.len() {
            0 => continue,
            1 => {
                return Err(Error::Split(format!(
                    "class {class} ({}) has 1 record; at least 2 are needed",
                    CLASS_NAMES[class]
                )))
            }
            _ => {}
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..train_count(idx.len(), train_fraction)] {
            in_train[i] = true;
        }
    }
    let pick = |keep: bool| {
        let records = manifest
            .records
            .iter()
            .zip(&in_train)
            .filter(|(_, &t)| t == keep)
            .map(|(r, _)| r.clone())
            .collect();
        DatasetManifest::new(manifest.root.clone(), records)
    };
    Ok((pick(true), pick(false)))
}
