//! Seeded train/test split, majority undersampling and k-fold partitioning.
//!
//! Everything works on row indices so that the same manifests can be
//! exported, audited and re-applied to any row-aligned table.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::HospitalLevel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_fraction: f64,
    pub folds: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed: 0,
            train_fraction: 0.8,
            folds: 5,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        Ok(())
    }

    /// Training share of `n` items, rounded up.
    pub fn train_size(&self, n: usize) -> usize {
        // The epsilon keeps exact products such as 0.8 * 1000 from rounding up.
        ((self.train_fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTestSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with the spec's seed and cuts it at the training size.
/// Both sides are returned in ascending order.
pub fn split_train_test(n: usize, spec: &SplitSpec) -> Result<TrainTestSplit> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("cannot split zero rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let cut = spec.train_size(n);
    let mut train = order[..cut].to_vec();
    let mut test = order[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(TrainTestSplit { train, test })
}

/// Splits whole groups (patients) rather than rows: the training side holds
/// the rounded-up share of distinct groups.
pub fn split_by_group(groups: &[String], spec: &SplitSpec) -> Result<TrainTestSplit> {
    spec.validate()?;
    if groups.is_empty() {
        return Err(Error::InvalidInput("cannot split zero rows".into()));
    }
    let mut distinct: Vec<&str> = groups.iter().map(String::as_str).collect();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let cut = spec.train_size(distinct.len());
    let train_groups: std::collections::BTreeSet<&str> = distinct[..cut].iter().copied().collect();
    let (train, test) = (0..groups.len()).partition(|&i| train_groups.contains(groups[i].as_str()));
    Ok(TrainTestSplit { train, test })
}

/// Downsamples every class, without replacement, to the smallest class count.
/// Returns the kept rows in ascending order.
pub fn undersample_majority(rows: &[usize], labels: &[HospitalLevel], seed: u64) -> Result<Vec<usize>> {
    let mut by_class: BTreeMap<HospitalLevel, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        let label = *labels
            .get(r)
            .ok_or_else(|| Error::InvalidInput(format!("row {r} has no label")))?;
        by_class.entry(label).or_default().push(r);
    }
    for level in HospitalLevel::ALL {
        if !by_class.contains_key(&level) {
            return Err(Error::ClassAbsent(level));
        }
    }
    let target = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(target * HospitalLevel::COUNT);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        kept.extend_from_slice(&members[..target]);
    }
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fit: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffled k-fold partition; the first `n % folds` validation sets get one
/// extra row.
pub fn make_kfolds(rows: &[usize], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 || rows.len() < folds {
        return Err(Error::TooFewRows {
            rows: rows.len(),
            folds,
        });
    }
    let mut order = rows.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = order.len() / folds;
    let extra = order.len() % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let mut validation = order[start..start + len].to_vec();
        let mut fit: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
        validation.sort_unstable();
        fit.sort_unstable();
        out.push(Fold { fit, validation });
        start += len;
    }
    Ok(out)
}

/// Row-index manifest of one sampling run, exported as JSON for audit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub config_hash: String,
    pub split: TrainTestSplit,
    pub balanced_pool: Vec<usize>,
    pub folds: Vec<Fold>,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("split manifest", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("split manifest", e))
    }
}
