//! Shuffled mixed-dataset batches with per-sample anchor sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetRegistry;
use crate::error::{Result, TufaError};
use crate::train::{mask_anchors, MaskPlan};

/// How many landmarks are kept as anchors per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSpec {
    /// Fraction of landmarks masked out.
    Ratio(f64),
    /// Fixed anchor count shared by every dataset.
    Count(usize),
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec::Ratio(0.75)
    }
}

/// Anchor count for `n_landmarks` under a masking ratio.
pub fn anchors_for_ratio(n_landmarks: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TufaError::InvalidArgument(format!("masking ratio {ratio} outside [0, 1)")));
    }
    // nearest integer, ties rounded down: 25% of 98 keeps 24
    let n = ((1.0 - ratio) * n_landmarks as f64 - 0.5 - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return Err(TufaError::InvalidArgument(format!(
            "masking ratio {ratio} leaves no anchors out of {n_landmarks}"
        )));
    }
    Ok(n)
}

/// One sample slot of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    /// Position of the dataset in the `pools` argument of [`make_batches`].
    pub pool: usize,
    pub sample: usize,
    pub plan: MaskPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Resolves the shared anchor count. A ratio over several datasets with
/// different landmark counts is applied to the smallest one.
pub fn resolve_anchor_count(registry: &DatasetRegistry, ids: &[&str], anchors: AnchorSpec) -> Result<Option<usize>> {
    let counts = ids
        .iter()
        .map(|id| registry.get(id).map(|d| d.n_landmarks))
        .collect::<Result<Vec<_>>>()?;
    let min = *counts.iter().min().ok_or_else(|| TufaError::Empty("no datasets to batch".into()))?;
    let uniform = counts.iter().all(|&c| c == min);
    match anchors {
        AnchorSpec::Count(n) => {
            if n == 0 {
                return Err(TufaError::InvalidArgument("anchor count must be at least 1".into()));
            }
            if n > min {
                return Err(TufaError::InvalidArgument(format!(
                    "{n} anchors requested but the smallest dataset has {min} landmarks"
                )));
            }
            Ok(Some(n))
        }
        AnchorSpec::Ratio(r) if r == 0.0 && uniform => Ok(None),
        AnchorSpec::Ratio(r) => Ok(Some(anchors_for_ratio(min, r)?)),
    }
}

/// One epoch of batches over `pools` (dataset id, sample count).
///
/// Samples from all pools are shuffled together and cut into batches of
/// `batch_size`; the last batch may be short. `None` anchors keep every
/// landmark in order.
pub fn make_batches(
    registry: &DatasetRegistry,
    pools: &[(&str, usize)],
    batch_size: usize,
    anchors: AnchorSpec,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(TufaError::InvalidArgument("batch size must be at least 1".into()));
    }
    let ids: Vec<&str> = pools.iter().map(|p| p.0).collect();
    let n_a = resolve_anchor_count(registry, &ids, anchors)?;
    let mut order: Vec<(usize, usize)> = pools
        .iter()
        .enumerate()
        .flat_map(|(p, &(_, len))| (0..len).map(move |s| (p, s)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let items = chunk
            .iter()
            .map(|&(pool, sample)| {
                let d = registry.get(pools[pool].0)?;
                let plan = match n_a {
                    Some(n) => mask_anchors(d, AnchorSpec::Count(n), &mut rng)?,
                    None => mask_anchors(d, AnchorSpec::Ratio(0.0), &mut rng)?,
                };
                Ok(BatchItem { pool, sample, plan })
            })
            .collect::<Result<_>>()?;
        batches.push(Batch { items });
    }
    Ok(batches)
}
