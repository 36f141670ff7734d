//! Mini-group batch sampling.
//!
//! Samples are split by *given* label into groups of `M`, and each training
//! batch is `K` such groups (`K × M` samples). `M = 1` reduces to ordinary
//! shuffled batching.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CorruptionRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemainderPolicy {
    /// Leftover samples of a class (fewer than `M`) sit out the epoch.
    Drop,
    /// Leftovers are topped up to `M` with other samples of the same class.
    #[default]
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    /// Every group shares one given label.
    #[default]
    IntraClass,
    /// Groups are drawn regardless of label (mixup ablation).
    InterClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniGroup {
    pub members: Vec<usize>,
    /// Shared given label; `None` for inter-class groups.
    pub given_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniGroupBatch {
    pub groups: Vec<MiniGroup>,
    pub group_size: usize,
}

impl MiniGroupBatch {
    pub fn groups_per_batch(&self) -> usize {
        self.groups.len()
    }

    /// `N_b = K × M`
    pub fn effective_size(&self) -> usize {
        self.groups.len() * self.group_size
    }

    /// Member indices in group order.
    pub fn indices(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.members.iter().copied()).collect()
    }

    /// One-line description for debug logs.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                let label = g.given_label.map_or_else(|| "*".to_string(), |l| l.to_string());
                format!("{label}:{:?}", g.members)
            })
            .collect();
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub groups: Vec<MiniGroup>,
    pub warnings: Vec<String>,
}

/// Mixes a base seed with a stream tag (epoch number, purpose) into a new seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ tag.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_group_size(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::validation("group_size", "must be at least 1"));
    }
    Ok(())
}

fn chunk_class(
    mut members: Vec<usize>,
    label: Option<usize>,
    m: usize,
    policy: RemainderPolicy,
    rng: &mut ChaCha8Rng,
    groups: &mut Vec<MiniGroup>,
) {
    members.shuffle(rng);
    let full = members.len() / m;
    for chunk in members.chunks(m).take(full) {
        groups.push(MiniGroup { members: chunk.to_vec(), given_label: label });
    }
    let rest = &members[full * m..];
    if rest.is_empty() || policy == RemainderPolicy::Drop {
        return;
    }
    let mut group = rest.to_vec();
    let pool: Vec<usize> = members[..full * m].to_vec();
    if pool.len() >= m - rest.len() {
        let picks: Vec<usize> = pool.choose_multiple(rng, m - rest.len()).copied().collect();
        group.extend(picks);
    } else {
        // class smaller than M: pad by drawing with replacement
        while group.len() < m {
            group.push(members[rng.random_range(0..members.len())]);
        }
    }
    groups.push(MiniGroup { members: group, given_label: label });
}

/// Splits samples by given label, shuffles each class with `seed` and
/// chunks it into groups of `m`.
pub fn build_groups(records: &[CorruptionRecord], m: usize, seed: u64, policy: RemainderPolicy) -> Result<Grouping> {
    check_group_size(m)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.given_label).or_default().push(r.index);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let mut warnings = Vec::new();
    for (label, members) in by_class {
        if members.len() < m && policy == RemainderPolicy::Drop {
            warnings.push(format!("class {label} has {} samples, fewer than group size {m}; it contributes no groups", members.len()));
        }
        chunk_class(members, Some(label), m, policy, &mut rng, &mut groups);
    }
    if groups.is_empty() {
        return Err(Error::validation("group_size", format!("no class has at least {m} samples")));
    }
    Ok(Grouping { groups, warnings })
}

/// Groups of `m` drawn from the whole dataset regardless of label.
pub fn build_inter_class_groups(records: &[CorruptionRecord], m: usize, seed: u64, policy: RemainderPolicy) -> Result<Grouping> {
    check_group_size(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    chunk_class(records.iter().map(|r| r.index).collect(), None, m, policy, &mut rng, &mut groups);
    if groups.is_empty() {
        return Err(Error::validation("group_size", format!("fewer than {m} samples")));
    }
    Ok(Grouping { groups, warnings: Vec::new() })
}

/// Shuffles groups with `seed` and emits them `k` at a time; a final partial
/// batch is dropped.
pub fn iterate_batches(groups: &[MiniGroup], k: usize, seed: u64) -> Result<impl Iterator<Item = MiniGroupBatch> + '_> {
    if k == 0 {
        return Err(Error::validation("groups_per_batch", "must be at least 1"));
    }
    if k > groups.len() {
        return Err(Error::validation("groups_per_batch", format!("{k} exceeds the {} available groups", groups.len())));
    }
    let group_size = groups[0].members.len();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() / k;
    Ok((0..n).map(move |b| MiniGroupBatch {
        groups: order[b * k..(b + 1) * k].iter().map(|&i| groups[i].clone()).collect(),
        group_size,
    }))
}

/// Epoch-level mini-group sampler. Groups are re-formed every epoch from a
/// seed derived from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct MgbsSampler {
    records: Vec<CorruptionRecord>,
    pub group_size: usize,
    pub groups_per_batch: usize,
    pub seed: u64,
    pub policy: RemainderPolicy,
    pub mode: GroupingMode,
}

impl MgbsSampler {
    pub fn new(
        records: &[CorruptionRecord],
        group_size: usize,
        groups_per_batch: usize,
        seed: u64,
        policy: RemainderPolicy,
        mode: GroupingMode,
    ) -> Result<Self> {
        check_group_size(group_size)?;
        if groups_per_batch == 0 {
            return Err(Error::validation("groups_per_batch", "must be at least 1"));
        }
        Ok(Self { records: records.to_vec(), group_size, groups_per_batch, seed, policy, mode })
    }

    pub fn epoch(&self, epoch: usize) -> Result<Vec<MiniGroupBatch>> {
        let es = derive_seed(self.seed, epoch as u64);
        let grouping = match self.mode {
            GroupingMode::IntraClass => build_groups(&self.records, self.group_size, es, self.policy)?,
            GroupingMode::InterClass => build_inter_class_groups(&self.records, self.group_size, es, self.policy)?,
        };
        for w in &grouping.warnings {
            log::warn!("{w}");
        }
        let batches: Vec<_> = iterate_batches(&grouping.groups, self.groups_per_batch, derive_seed(es, 1))?.collect();
        if log::log_enabled!(log::Level::Trace) {
            for (i, b) in batches.iter().enumerate() {
                log::trace!("epoch {epoch} batch {i}: {}", b.describe());
            }
        }
        Ok(batches)
    }
}

/// Label-agnostic shuffled batches of `batch_size` indices out of `0..n`;
/// the final partial batch is dropped.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::validation("batch size", format!("{batch_size} for {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}
