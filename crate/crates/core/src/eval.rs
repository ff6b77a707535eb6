//! Full-ranking top-K evaluation (NDCG@k, Recall@k) and the two run-analysis
//! procedures: user-level degradation under preference shift and item-level
//! ranking change across block boundaries.

use crate::backbone::ItemTable;
use crate::client::ClientState;
use crate::data::DataBlock;
use crate::error::ModelError;
use crate::types::{Interaction, ItemId, UserId};
use std::collections::{BTreeMap, HashSet};

/// Which metric a result row carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ndcg,
    Recall,
}

impl Metric {
    /// Label used in result files, e.g. `ndcg@20`.
    pub fn label(self, k: usize) -> String {
        match self {
            Metric::Ndcg => format!("ndcg@{k}"),
            Metric::Recall => format!("recall@{k}"),
        }
    }
}

/// One averaged metric over the users of a test block.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalResult {
    /// Index of the block whose test set was evaluated.
    pub block: usize,
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
    /// Users the average ran over.
    pub user_count: usize,
}

/// |top-k ∩ relevant| / |relevant|.
pub fn recall_at_k(ranked: &[ItemId], relevant: &HashSet<ItemId>, k: usize) -> f64 {
    assert!(k >= 1, "k must be positive");
    assert!(!relevant.is_empty(), "users without relevant items are skipped, not scored");
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG: DCG grants 1/log₂(pos+1) per relevant item in the top-k
/// (positions are 1-based), normalized by the ideal DCG over min(|relevant|, k)
/// positions.
pub fn ndcg_at_k(ranked: &[ItemId], relevant: &HashSet<ItemId>, k: usize) -> f64 {
    assert!(k >= 1, "k must be positive");
    assert!(!relevant.is_empty(), "users without relevant items are skipped, not scored");
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| discount(pos + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    dcg / ideal
}

fn discount(pos: usize) -> f64 {
    1.0 / ((pos + 1) as f64).log2()
}

/// Per-user sets of consumed items (train, optionally valid) over `blocks` —
/// the ranking pool at evaluation time hides these.
pub fn accumulated_exclusions(
    blocks: &[DataBlock],
    exclude_valid: bool,
) -> BTreeMap<UserId, HashSet<ItemId>> {
    let mut out: BTreeMap<UserId, HashSet<ItemId>> = BTreeMap::new();
    for block in blocks {
        for (user, list) in &block.train {
            out.entry(*user).or_default().extend(list.iter().map(|x| x.item));
        }
        if exclude_valid {
            for (user, list) in &block.valid {
                out.entry(*user).or_default().extend(list.iter().map(|x| x.item));
            }
        }
    }
    out
}

/// Per-user (NDCG@k, Recall@k) against arbitrary relevance lists (a test or
/// validation map). Each user ranks the whole registered item universe minus
/// their own consumed items; their relevant items always stay rankable. Users
/// absent from `clients` or with empty lists are skipped.
pub fn per_user_metrics(
    clients: &BTreeMap<UserId, ClientState>,
    q: &ItemTable,
    relevance: &BTreeMap<UserId, Vec<Interaction>>,
    exclusions: &BTreeMap<UserId, HashSet<ItemId>>,
    k: usize,
) -> Result<BTreeMap<UserId, (f64, f64)>, ModelError> {
    let empty = HashSet::new();
    let mut out = BTreeMap::new();
    for (user, list) in relevance {
        let Some(client) = clients.get(user) else { continue };
        if list.is_empty() {
            continue;
        }
        let relevant: HashSet<ItemId> = list.iter().map(|x| x.item).collect();
        let consumed = exclusions.get(user).unwrap_or(&empty);
        let ranked = rank_items(client, q, consumed, &relevant, k)?;
        out.insert(*user, (ndcg_at_k(&ranked, &relevant, k), recall_at_k(&ranked, &relevant, k)));
    }
    Ok(out)
}

/// Full-ranking evaluation of one test block: both metrics averaged uniformly
/// over the users with test items. Returns an empty list when the block has no
/// test users.
pub fn full_ranking_eval(
    clients: &BTreeMap<UserId, ClientState>,
    q: &ItemTable,
    eval_block: &DataBlock,
    exclusions: &BTreeMap<UserId, HashSet<ItemId>>,
    k: usize,
) -> Result<Vec<EvalResult>, ModelError> {
    let per_user = per_user_metrics(clients, q, &eval_block.test, exclusions, k)?;
    if per_user.is_empty() {
        return Ok(Vec::new());
    }
    let users = per_user.len();
    let ndcg = per_user.values().map(|(n, _)| n).sum::<f64>() / users as f64;
    let recall = per_user.values().map(|(_, r)| r).sum::<f64>() / users as f64;
    let block = eval_block.index;
    Ok(vec![
        EvalResult { block, metric: Metric::Ndcg, k, value: ndcg, user_count: users },
        EvalResult { block, metric: Metric::Recall, k, value: recall, user_count: users },
    ])
}

/// The user's top-k item ids over the pool `q \ (consumed \ relevant)`,
/// ordered by descending logit with ascending-id tiebreak.
fn rank_items(
    client: &ClientState,
    q: &ItemTable,
    consumed: &HashSet<ItemId>,
    relevant: &HashSet<ItemId>,
    k: usize,
) -> Result<Vec<ItemId>, ModelError> {
    let logits = client.logits_against(q)?;
    let mut pool: Vec<(ItemId, f64)> = q
        .ids()
        .iter()
        .zip(&logits)
        .filter(|(id, _)| !consumed.contains(id) || relevant.contains(id))
        .map(|(&id, &logit)| (id, logit))
        .collect();
    pool.sort_unstable_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    pool.truncate(k);
    Ok(pool.into_iter().map(|(id, _)| id).collect())
}

/// Relative drop of a metric between two measurements of the same test set:
/// (a_prev − a_now) / a_prev.
pub fn degradation_rate(a_prev: f64, a_now: f64) -> f64 {
    assert!(a_prev > 0.0, "degradation is relative to a positive baseline");
    (a_prev - a_now) / a_prev
}

/// Splits users into (static, dynamic) by preference shift: the bottom
/// ⌊quantile·n⌋ by (Δ, id) are static, the top ⌊quantile·n⌋ are dynamic.
pub fn segment_users_by_shift(
    shifts: &BTreeMap<UserId, u64>,
    quantile: f64,
) -> (Vec<UserId>, Vec<UserId>) {
    assert!(!shifts.is_empty(), "cannot segment an empty population");
    assert!(quantile > 0.0 && quantile <= 0.5);
    let mut order: Vec<(u64, UserId)> = shifts.iter().map(|(u, d)| (*d, *u)).collect();
    order.sort_unstable();
    let m = (quantile * order.len() as f64).floor() as usize;
    let stat: Vec<UserId> = order[..m].iter().map(|(_, u)| *u).collect();
    let mut dynamic: Vec<UserId> = order[order.len() - m..].iter().map(|(_, u)| *u).collect();
    dynamic.sort_unstable();
    (stat, dynamic)
}

/// Mean relative rank movement of one item across a block boundary:
/// avg over users of |rank_prev − rank_now| / rank_prev.
pub fn item_ranking_change_rate(ranks: &[(usize, usize)]) -> f64 {
    assert!(!ranks.is_empty(), "needs at least one observing user");
    let sum: f64 = ranks
        .iter()
        .map(|&(prev, now)| {
            assert!(prev >= 1, "ranks are 1-based");
            (prev as f64 - now as f64).abs() / prev as f64
        })
        .sum();
    sum / ranks.len() as f64
}
