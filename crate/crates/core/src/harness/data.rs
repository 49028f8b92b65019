//! Dataset assembly for a run and its content fingerprint.

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha1::{Digest, Sha1};

use super::config::{DatasetKind, TrainConfig};
use crate::episodes::ingest::{cache_path, load_split, write_cache};
use crate::episodes::{augment_rotations, synth_splits, DatasetSplit, SplitName, SynthSpec};
use crate::error::{Error, Result};

/// Every tenth class (indices 9, 19, ...) of an Omniglot train cache is
/// held out for validation, before rotation augmentation.
pub const VAL_STRIDE: usize = 10;

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    /// Git-style blob hash of the cache bytes of each split, as loaded.
    pub fingerprints: Vec<(SplitName, String)>,
}

/// SHA-1 over `"blob <len>\0" ‖ bytes`, as `git hash-object` computes.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

fn split_bytes(split: &DatasetSplit) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_cache(split, &mut buf)?;
    Ok(buf)
}

pub fn synthetic(cfg: &TrainConfig) -> Result<Datasets> {
    let spec = SynthSpec { classes: cfg.synth_train_classes, ..cfg.synth_spec() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let (train, val, test) = synth_splits(
        &spec,
        cfg.synth_train_classes,
        cfg.synth_val_classes,
        cfg.synth_test_classes,
        &mut rng,
    )?;
    let fingerprints = [&train, &val, &test]
        .iter()
        .map(|s| Ok((s.name, git_blob_hash(&split_bytes(s)?))))
        .collect::<Result<_>>()?;
    Ok(Datasets { train, val, test, fingerprints })
}

fn cached(cfg: &TrainConfig) -> Result<Datasets> {
    let dir = cfg.data_dir.as_deref().ok_or_else(|| Error::Config("data_dir is required".into()))?;
    let mut fingerprints = Vec::new();
    let mut load = |name| -> Result<DatasetSplit> {
        let path = cache_path(dir, name);
        let bytes = fs::read(&path).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
        fingerprints.push((name, git_blob_hash(&bytes)));
        load_split(dir, name)
    };
    let mut train = load(SplitName::Train)?;
    let test = load(SplitName::Test)?;
    let val = if cache_path(dir, SplitName::Val).is_file() {
        load(SplitName::Val)?
    } else {
        let held: Vec<usize> = (VAL_STRIDE - 1..train.class_count()).step_by(VAL_STRIDE).collect();
        train.split_off(&held, SplitName::Val)
    };
    if cfg.dataset == DatasetKind::Omniglot {
        train = augment_rotations(&train)?;
    }
    Ok(Datasets { train, val, test, fingerprints })
}

/// Builds or loads the three splits a run uses. Rotation augmentation is
/// applied to the Omniglot train split only.
pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    match cfg.dataset {
        DatasetKind::Synthetic => synthetic(cfg),
        DatasetKind::Omniglot | DatasetKind::MiniImagenet => cached(cfg),
    }
}
