//! Subject-disjoint hold-out and k-fold splitting.
//!
//! Keys (subject ids, or image paths for sample-level splits) are sorted, shuffled with a
//! seeded ChaCha8 generator and then cut into contiguous groups, so a plan depends only on
//! the key set, the split parameters and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Manifest, ManifestEntry, MaskState, Spectrum};

#[derive(Error, Debug)]
pub enum SplitError {
    #[error("fractions {0:?} must be non-negative and sum to 1")]
    Fractions([f64; 3]),
    #[error("{available} keys cannot fill partitions of sizes {sizes:?} with every requested partition non-empty")]
    TooFewSubjects { available: usize, sizes: [usize; 3] },
    #[error("k = {k} needs 2 <= k <= {available} keys")]
    FoldCount { k: usize, available: usize },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        })
    }
}

/// What a plan assigns: whole subjects, or individual images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Subject,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitScheme {
    Fractions([f64; 3]),
    /// Fold `fold` of a `k`-fold partition: that group validates, the rest train.
    Kfold { k: usize, fold: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    #[serde(default)]
    pub unit: SplitUnit,
    pub k_or_fractions: SplitScheme,
    pub assignments: BTreeMap<String, Partition>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PartitionCount {
    pub subjects: usize,
    pub images: usize,
    pub by_condition: BTreeMap<String, usize>,
}

impl SplitPlan {
    pub fn from_assignments(
        seed: u64,
        unit: SplitUnit,
        k_or_fractions: SplitScheme,
        assignments: BTreeMap<String, Partition>,
    ) -> Self {
        Self {
            seed,
            unit,
            k_or_fractions,
            assignments,
        }
    }

    fn key<'e>(&self, entry: &'e ManifestEntry) -> &'e str {
        match self.unit {
            SplitUnit::Subject => &entry.subject_id,
            SplitUnit::Sample => &entry.path,
        }
    }

    pub fn partition_of(&self, entry: &ManifestEntry) -> Option<Partition> {
        self.assignments.get(self.key(entry)).copied()
    }

    pub fn keys_in(&self, partition: Partition) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, &p)| p == partition)
            .map(|(k, _)| k.as_str())
    }

    /// Manifest entries in `partition`, in manifest order.
    pub fn entries_in<'m>(&'m self, manifest: &'m Manifest, partition: Partition) -> impl Iterator<Item = &'m ManifestEntry> {
        manifest
            .entries()
            .iter()
            .filter(move |e| self.partition_of(e) == Some(partition))
    }

    /// Subjects and images per partition, with image counts per `spectrum/mask_state`.
    pub fn partition_counts(&self, manifest: &Manifest) -> BTreeMap<Partition, PartitionCount> {
        let mut subjects: BTreeMap<Partition, BTreeSet<&str>> = BTreeMap::new();
        let mut out: BTreeMap<Partition, PartitionCount> = BTreeMap::new();
        for e in manifest.entries() {
            let Some(p) = self.partition_of(e) else { continue };
            subjects.entry(p).or_default().insert(&e.subject_id);
            let c = out.entry(p).or_default();
            c.images += 1;
            *c.by_condition
                .entry(condition_key(e.spectrum, e.mask_state))
                .or_insert(0) += 1;
        }
        for (p, s) in subjects {
            out.get_mut(&p).expect("same keys").subjects = s.len();
        }
        out
    }

    /// Whether no subject has images in more than one partition.
    pub fn is_subject_disjoint(&self, manifest: &Manifest) -> bool {
        let mut seen: BTreeMap<&str, Partition> = BTreeMap::new();
        manifest.entries().iter().all(|e| match self.partition_of(e) {
            None => true,
            Some(p) => *seen.entry(&e.subject_id).or_insert(p) == p,
        })
    }

    /// Whether every manifest image lands in exactly one partition.
    pub fn covers(&self, manifest: &Manifest) -> bool {
        manifest.entries().iter().all(|e| self.partition_of(e).is_some())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

pub fn condition_key(spectrum: Spectrum, mask_state: MaskState) -> String {
    format!("{spectrum}/{mask_state}")
}

fn split_keys(manifest: &Manifest, unit: SplitUnit) -> Vec<String> {
    match unit {
        SplitUnit::Subject => manifest.subjects().into_iter().map(str::to_string).collect(),
        SplitUnit::Sample => {
            let mut v: Vec<String> = manifest.entries().iter().map(|e| e.path.clone()).collect();
            v.sort();
            v
        }
    }
}

fn shuffled(mut keys: Vec<String>, seed: u64) -> Vec<String> {
    keys.sort();
    keys.dedup();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    keys
}

/// Partition sizes for a hold-out split: validation and test sizes are rounded, training
/// takes the remainder.
pub fn holdout_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3], SplitError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::Fractions(fractions));
    }
    let val = (fractions[1] * n as f64).round() as usize;
    let test = (fractions[2] * n as f64).round() as usize;
    let train = n.checked_sub(val + test);
    let sizes = [train.unwrap_or(0), val, test];
    let starved = sizes.iter().zip(fractions).any(|(&s, f)| f > 0.0 && s == 0);
    if train.is_none() || starved {
        return Err(SplitError::TooFewSubjects { available: n, sizes });
    }
    Ok(sizes)
}

/// Shuffles `keys` and cuts them into train/validation/test.
pub fn holdout_keys(keys: Vec<String>, fractions: [f64; 3], seed: u64) -> Result<BTreeMap<String, Partition>, SplitError> {
    let keys = shuffled(keys, seed);
    let sizes = holdout_sizes(keys.len(), fractions)?;
    let mut out = BTreeMap::new();
    let mut it = keys.into_iter();
    for (p, n) in Partition::ALL.into_iter().zip(sizes) {
        for k in it.by_ref().take(n) {
            out.insert(k, p);
        }
    }
    Ok(out)
}

/// Group sizes for `n` keys over `k` folds; the first `n % k` groups get one extra key.
pub fn fold_sizes(n: usize, k: usize) -> Result<Vec<usize>, SplitError> {
    if k < 2 || k > n {
        return Err(SplitError::FoldCount { k, available: n });
    }
    Ok((0..k).map(|i| n / k + usize::from(i < n % k)).collect())
}

/// Shuffles `keys` into `k` near-equal groups.
pub fn kfold_groups(keys: Vec<String>, k: usize, seed: u64) -> Result<Vec<Vec<String>>, SplitError> {
    let keys = shuffled(keys, seed);
    let sizes = fold_sizes(keys.len(), k)?;
    let mut it = keys.into_iter();
    Ok(sizes.into_iter().map(|n| it.by_ref().take(n).collect()).collect())
}

pub fn split_holdout(manifest: &Manifest, fractions: [f64; 3], seed: u64) -> Result<SplitPlan, SplitError> {
    let assignments = holdout_keys(split_keys(manifest, SplitUnit::Subject), fractions, seed)?;
    Ok(SplitPlan::from_assignments(
        seed,
        SplitUnit::Subject,
        SplitScheme::Fractions(fractions),
        assignments,
    ))
}

/// Subject-level k-fold plans; fold `i` validates on group `i`.
pub fn split_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<Vec<SplitPlan>, SplitError> {
    split_kfold_by(manifest, k, seed, SplitUnit::Subject)
}

pub fn split_kfold_by(manifest: &Manifest, k: usize, seed: u64, unit: SplitUnit) -> Result<Vec<SplitPlan>, SplitError> {
    let groups = kfold_groups(split_keys(manifest, unit), k, seed)?;
    Ok((0..k)
        .map(|fold| {
            let assignments = groups
                .iter()
                .enumerate()
                .flat_map(|(g, keys)| {
                    let p = if g == fold {
                        Partition::Validation
                    } else {
                        Partition::Train
                    };
                    keys.iter().map(move |key| (key.clone(), p))
                })
                .collect();
            SplitPlan::from_assignments(seed, unit, SplitScheme::Kfold { k, fold }, assignments)
        })
        .collect())
}

/// Reads a single plan or a JSON array of plans.
pub fn load_plans(path: impl AsRef<Path>) -> Result<Vec<SplitPlan>, SplitError> {
    let path = path.as_ref();
    let fail = |message: String| SplitError::File {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    if value.is_array() {
        serde_json::from_value(value).map_err(|e| fail(e.to_string()))
    } else {
        Ok(vec![serde_json::from_value(value).map_err(|e| fail(e.to_string()))?])
    }
}

pub fn plans_to_json(plans: &[SplitPlan]) -> String {
    match plans {
        [one] => one.to_json(),
        many => serde_json::to_string_pretty(many).expect("plans serialize"),
    }
}
