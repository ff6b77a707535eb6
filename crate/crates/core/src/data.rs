//! Data pipeline: loading, activity filtering, temporal partitioning into a
//! base block plus incremental blocks, per-user train/valid/test splits, and
//! negative sampling.

use crate::error::DataError;
use crate::rng::{RngFactory, Stream};
use crate::types::{Interaction, ItemId, UserId};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

/// Column layout of a delimiter-separated interaction log.
/// The default matches MovieLens `u.data`: tab-separated
/// `user item rating timestamp` (the rating column is ignored).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Schema {
    pub delimiter: char,
    pub user_col: usize,
    pub item_col: usize,
    pub timestamp_col: usize,
}

impl Default for Schema {
    fn default() -> Self {
        Self { delimiter: '\t', user_col: 0, item_col: 1, timestamp_col: 3 }
    }
}

/// Per-user split proportions. Interactions of one user inside one block are
/// assigned at random in these proportions; see [`split_train_valid_test`]
/// for the exact rounding rule.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

/// A chronologically contiguous slice of the log, before splitting.
#[derive(Debug, Clone)]
pub struct RawBlock {
    pub index: usize,
    pub interactions: Vec<Interaction>,
}

/// A temporal data block with per-user train/valid/test partitions and the
/// user/item bookkeeping the federated protocol needs.
#[derive(Debug, Clone)]
pub struct DataBlock {
    pub index: usize,
    /// (min, max) timestamp of the block's interactions.
    pub span: (i64, i64),
    pub train: BTreeMap<UserId, Vec<Interaction>>,
    pub valid: BTreeMap<UserId, Vec<Interaction>>,
    pub test: BTreeMap<UserId, Vec<Interaction>>,
    /// Users with at least one interaction in this block.
    pub users: BTreeSet<UserId>,
    /// All users seen in any block up to and including this one,
    /// in order of first appearance.
    pub users_cum: Vec<UserId>,
    /// All items seen in any block up to and including this one,
    /// in order of first appearance.
    pub items_cum: Vec<ItemId>,
}

impl DataBlock {
    pub fn interaction_count(&self) -> usize {
        self.split_counts().iter().sum()
    }

    /// [train, valid, test] interaction counts.
    pub fn split_counts(&self) -> [usize; 3] {
        let count = |m: &BTreeMap<UserId, Vec<Interaction>>| m.values().map(Vec::len).sum();
        [count(&self.train), count(&self.valid), count(&self.test)]
    }

    /// Item ids a user must not be offered as negatives: their train
    /// positives within this block.
    pub fn train_items_of(&self, user: UserId) -> HashSet<ItemId> {
        self.train
            .get(&user)
            .map(|v| v.iter().map(|x| x.item).collect())
            .unwrap_or_default()
    }
}

/// Parses, deduplicates, and chronologically sorts an interaction log.
/// Ties on timestamp are broken by (user, item) so downstream positional
/// cuts are deterministic.
pub fn load_interactions(path: &Path, schema: &Schema) -> Result<Vec<Interaction>, DataError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;

    let needed = schema.user_col.max(schema.item_col).max(schema.timestamp_col) + 1;
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(schema.delimiter).collect();
        let malformed = |reason: String| DataError::MalformedRow {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        if fields.len() < needed {
            return Err(malformed(format!("expected at least {needed} fields, got {}", fields.len())));
        }
        let parse = |col: usize, what: &str| {
            fields[col]
                .trim()
                .parse::<i64>()
                .map_err(|e| malformed(format!("bad {what} {:?}: {e}", fields[col])))
        };
        let user = parse(schema.user_col, "user id")?;
        let item = parse(schema.item_col, "item id")?;
        let timestamp = parse(schema.timestamp_col, "timestamp")?;
        if user < 0 || item < 0 {
            return Err(malformed("negative id".into()));
        }
        if timestamp < 0 {
            return Err(malformed("negative timestamp".into()));
        }
        out.push(Interaction {
            user: UserId(user as u32),
            item: ItemId(item as u32),
            timestamp,
        });
    }
    if out.is_empty() {
        return Err(DataError::EmptyFile { path: path.to_path_buf() });
    }
    out.sort_by_key(Interaction::sort_key);
    out.dedup();
    Ok(out)
}

/// Drops low-activity entries in two passes: first items with fewer than
/// `min_item` occurrences, then users with fewer than `min_user` occurrences
/// among the surviving rows. Order within the list is preserved.
pub fn filter_min_interactions(
    interactions: Vec<Interaction>,
    min_user: usize,
    min_item: usize,
) -> Result<Vec<Interaction>, DataError> {
    let mut item_counts: HashMap<ItemId, usize> = HashMap::new();
    for x in &interactions {
        *item_counts.entry(x.item).or_default() += 1;
    }
    let kept: Vec<Interaction> = interactions
        .into_iter()
        .filter(|x| item_counts[&x.item] >= min_item)
        .collect();

    let mut user_counts: HashMap<UserId, usize> = HashMap::new();
    for x in &kept {
        *user_counts.entry(x.user).or_default() += 1;
    }
    let kept: Vec<Interaction> =
        kept.into_iter().filter(|x| user_counts[&x.user] >= min_user).collect();

    if kept.is_empty() {
        return Err(DataError::AllFiltered);
    }
    Ok(kept)
}

/// Cuts the (sorted) interaction list into a base block holding the first
/// `floor(base_fraction * M)` interactions and `n_incremental` near-equal
/// chronological blocks; leftover interactions go to the last block.
pub fn partition_blocks(
    interactions: &[Interaction],
    base_fraction: f64,
    n_incremental: usize,
) -> Result<Vec<RawBlock>, DataError> {
    assert!(base_fraction > 0.0 && base_fraction < 1.0, "base_fraction must be in (0,1)");
    assert!(n_incremental >= 1, "need at least one incremental block");
    debug_assert!(interactions.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()));

    let total = interactions.len();
    let base_len = (base_fraction * total as f64).floor() as usize;
    let rest = total - base_len;
    let inc_len = rest / n_incremental;
    if base_len == 0 || inc_len == 0 {
        return Err(DataError::TooFewInteractions { interactions: total, blocks: n_incremental + 1 });
    }

    let mut blocks = Vec::with_capacity(n_incremental + 1);
    let mut start = 0usize;
    for index in 0..=n_incremental {
        let len = match index {
            0 => base_len,
            i if i == n_incremental => total - start,
            _ => inc_len,
        };
        blocks.push(RawBlock { index, interactions: interactions[start..start + len].to_vec() });
        start += len;
    }
    Ok(blocks)
}

/// Randomly splits each user's interactions within one block.
///
/// For a user with n ≥ 3 interactions: n_test = ceil(n·test), then
/// n_valid = ceil((n − n_test)·valid/(train+valid)), remainder to train
/// (the defaults give the familiar 8/1/1 for n = 10). Users with n < 3 get
/// at least one training interaction and fill the remaining splits in order
/// train→test→valid. Assignment is a pure function of (factory, block, user).
pub fn split_train_valid_test(
    raw: RawBlock,
    ratios: SplitRatios,
    factory: &RngFactory,
) -> DataBlock {
    let span = (
        raw.interactions.first().map(|x| x.timestamp).unwrap_or(0),
        raw.interactions.last().map(|x| x.timestamp).unwrap_or(0),
    );

    let mut per_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for x in &raw.interactions {
        per_user.entry(x.user).or_default().push(*x);
    }

    let mut block = DataBlock {
        index: raw.index,
        span,
        train: BTreeMap::new(),
        valid: BTreeMap::new(),
        test: BTreeMap::new(),
        users: per_user.keys().copied().collect(),
        users_cum: Vec::new(),
        items_cum: Vec::new(),
    };

    let ratio_sum = ratios.train + ratios.valid + ratios.test;
    for (user, mut items) in per_user {
        let mut rng = factory.stream(Stream::Split, &[raw.index as u64, user.0 as u64]);
        items.shuffle(&mut rng);
        let n = items.len();
        let (n_train, n_test) = if n < 3 {
            // train first, then test, then valid
            (1, n.saturating_sub(1).min(1))
        } else {
            let n_test = ((n as f64 * ratios.test / ratio_sum).ceil() as usize).max(1);
            let n_valid = (((n - n_test) as f64 * ratios.valid / (ratios.train + ratios.valid))
                .ceil() as usize)
                .max(1);
            (n - n_test - n_valid, n_test)
        };
        let mut rest = items.split_off(n_train);
        if !items.is_empty() {
            block.train.insert(user, items);
        }
        let valid = rest.split_off(n_test);
        if !rest.is_empty() {
            block.test.insert(user, rest);
        }
        if !valid.is_empty() {
            block.valid.insert(user, valid);
        }
    }
    block
}

/// Fills the cumulative user/item registries of each block, in order of first
/// appearance over the chronological stream.
pub(crate) fn accumulate_registries(blocks: &mut [DataBlock], ordered: &[RawBlock]) {
    let mut seen_users: HashSet<UserId> = HashSet::new();
    let mut seen_items: HashSet<ItemId> = HashSet::new();
    let mut users_cum: Vec<UserId> = Vec::new();
    let mut items_cum: Vec<ItemId> = Vec::new();
    for (block, raw) in blocks.iter_mut().zip(ordered) {
        for x in &raw.interactions {
            if seen_users.insert(x.user) {
                users_cum.push(x.user);
            }
            if seen_items.insert(x.item) {
                items_cum.push(x.item);
            }
        }
        block.users_cum = users_cum.clone();
        block.items_cum = items_cum.clone();
    }
}

/// End-to-end pipeline: load, filter, partition, split, accumulate.
pub fn build_blocks(
    path: &Path,
    schema: &Schema,
    min_user: usize,
    min_item: usize,
    base_fraction: f64,
    n_incremental: usize,
    ratios: SplitRatios,
    factory: &RngFactory,
) -> Result<Vec<DataBlock>, DataError> {
    let interactions = load_interactions(path, schema)?;
    let interactions = filter_min_interactions(interactions, min_user, min_item)?;
    let raw = partition_blocks(&interactions, base_fraction, n_incremental)?;
    let mut blocks: Vec<DataBlock> =
        raw.iter().cloned().map(|b| split_train_valid_test(b, ratios, factory)).collect();
    accumulate_registries(&mut blocks, &raw);
    Ok(blocks)
}

/// Draws `ratio` negatives per positive, uniformly with replacement from
/// `universe \ positives`.
pub fn sample_negatives(
    user: UserId,
    positives: &HashSet<ItemId>,
    universe: &[ItemId],
    ratio: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ItemId>, DataError> {
    let candidates: Vec<ItemId> =
        universe.iter().copied().filter(|i| !positives.contains(i)).collect();
    if candidates.is_empty() {
        return Err(DataError::NoNegativeCandidates { user: user.0 });
    }
    let n = ratio * positives.len();
    Ok((0..n).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect())
}

/// Writes a per-block audit manifest as tab-separated text.
pub fn write_block_manifest(blocks: &[DataBlock], mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "block\tinteractions\ttrain\tvalid\ttest\tactive_users\tcum_users\tcum_items\tspan_start\tspan_end"
    )?;
    for b in blocks {
        let [train, valid, test] = b.split_counts();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            b.index,
            b.interaction_count(),
            train,
            valid,
            test,
            b.users.len(),
            b.users_cum.len(),
            b.items_cum.len(),
            b.span.0,
            b.span.1
        )?;
    }
    Ok(())
}
