//! Server-side protocol: participant sampling, pre-aggregation of uploaded
//! item tables, knowledge-shift measurement, item-wise temporal-mean blending,
//! and block-transition bookkeeping.
//!
//! The server-facing payload type is [`UploadPayload`] — an item table and
//! nothing else. Private user parameters and raw interactions are not
//! expressible in this module's interface.

use crate::backbone::{init_item_row, Backbone, ItemTable};
use crate::client::{
    add_transmission_noise, ClientContext, ClientMechanism, ClientState,
};
use crate::data::DataBlock;
use crate::error::{ExperimentError, ModelError};
use crate::rng::{RngFactory, Stream};
use crate::types::{ItemId, UserId};
use rand::Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashSet};

/// What one client sends up per round. Deliberately just the public item
/// table: the aggregation path cannot see anything else.
pub type UploadPayload = ItemTable;

/// Server-side aggregation mechanism selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerMechanism {
    /// Pre-aggregation only (plain federated averaging per round).
    Plain,
    /// Item-wise temporal mean: per-item retention weight γ_i = β/(1+φ_i).
    ItemWiseTemporalMean,
    /// Uniform temporal mean: fixed γ = β for every old item.
    UniformTemporalMean,
}

/// Global state owned by the simulated server.
#[derive(Debug, Clone)]
pub struct GlobalState {
    /// Q_g for the current round; rows in item-registration order.
    pub q_current: ItemTable,
    /// Frozen end-of-previous-block table (absent during the base block).
    pub q_prev_block: Option<ItemTable>,
    pub block: usize,
    pub round: usize,
}

impl GlobalState {
    /// Fresh state over the base block's item set.
    pub fn init(items: &[ItemId], dim: usize, factory: &RngFactory) -> Self {
        let mut q = ItemTable::new(dim);
        for &item in items {
            let mut rng = factory.stream(Stream::ItemInit, &[item.0 as u64]);
            q.push(item, init_item_row(dim, &mut rng));
        }
        Self { q_current: q, q_prev_block: None, block: 0, round: 0 }
    }
}

/// Per-round telemetry.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RoundReport {
    pub block: usize,
    pub round: usize,
    /// Clients whose uploads entered the aggregate.
    pub participants: usize,
    /// Clients that failed (diverged) this round.
    pub failed: usize,
    /// Mean knowledge shift over old items (0 when not applicable).
    pub mean_phi: f64,
    /// Mean retention weight over old items (0 when not applicable).
    pub mean_gamma: f64,
    /// Mean of the participating clients' batch losses.
    pub mean_loss: f64,
}

/// Scalar knobs one round needs; the experiment layer builds this from its
/// config once per block.
#[derive(Debug, Clone, Copy)]
pub struct RoundConfig {
    pub client_mechanism: ClientMechanism,
    pub server_mechanism: ServerMechanism,
    pub fraction: f64,
    pub noise_lambda: f64,
    pub beta: f64,
    pub lambda_kd: f64,
    pub mu_reg: f64,
    pub eps: f64,
    pub negative_ratio: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Scale the item-row learning rate by |items|. Compensates the dilution
    /// from batch-mean gradients being averaged again across all uploads.
    pub scale_item_lr: bool,
    pub shift_per_epoch: bool,
    pub rank_excludes_train: bool,
}

/// Uniform sample without replacement of max(1, ⌊fraction·|pool|⌋) users.
pub fn sample_clients(
    pool: &[UserId],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<UserId>, ModelError> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1]");
    if pool.is_empty() {
        return Err(ModelError::EmptyUserSet);
    }
    let k = ((fraction * pool.len() as f64).floor() as usize).clamp(1, pool.len());
    let mut picked: Vec<UserId> =
        rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Entrywise arithmetic mean of the uploads: Q_g' = (1/k) Σ Q_u.
pub fn pre_aggregate(uploads: &[UploadPayload]) -> Result<ItemTable, ModelError> {
    let first = uploads.first().ok_or(ModelError::EmptyUploads)?;
    let mut mean = first.clone();
    for u in &uploads[1..] {
        if u.len() != first.len() || u.dim() != first.dim() {
            return Err(ModelError::UploadIndexMismatch {
                expected: first.len(),
                got: u.len(),
            });
        }
        for (acc, v) in mean.values_mut().iter_mut().zip(u.values()) {
            *acc += v;
        }
    }
    let inv = 1.0 / uploads.len() as f64;
    for v in mean.values_mut() {
        *v *= inv;
    }
    Ok(mean)
}

/// Knowledge shift of one old item: φ_i = (1/√d)·‖q_prev_i − q_pre_i‖².
pub fn knowledge_shift(
    q_prev_block: &ItemTable,
    q_pre: &ItemTable,
    item: ItemId,
) -> Result<f64, ModelError> {
    let prev =
        q_prev_block.row_for(item).ok_or(ModelError::UnknownOldItem { item: item.0 })?;
    let now = q_pre.row_for(item).ok_or(ModelError::UnknownItem { item: item.0 })?;
    let sq: f64 = prev.iter().zip(now).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (q_prev_block.dim() as f64).sqrt())
}

/// Retention weight γ = β/(1+φ) ∈ (0, β].
pub fn retention_weight(phi: f64, beta: f64) -> f64 {
    debug_assert!(phi >= 0.0);
    debug_assert!((0.0..1.0).contains(&beta));
    beta / (1.0 + phi)
}

/// Item-wise temporal mean: every old item's row becomes
/// (1−γ_i)·q_pre_i + γ_i·q_prev_i with γ_i = β/(1+φ_i); rows for items new in
/// this block pass through unchanged (their γ is zero by padding).
pub fn temporal_mean(
    q_pre: &ItemTable,
    q_prev_block: &ItemTable,
    beta: f64,
) -> Result<ItemTable, ModelError> {
    blend(q_pre, q_prev_block, |item| {
        knowledge_shift(q_prev_block, q_pre, item).map(|phi| retention_weight(phi, beta))
    })
}

/// Ablation variant: one fixed γ = β for every old item.
pub fn uniform_temporal_mean(
    q_pre: &ItemTable,
    q_prev_block: &ItemTable,
    beta: f64,
) -> Result<ItemTable, ModelError> {
    blend(q_pre, q_prev_block, |_| Ok(beta))
}

fn blend(
    q_pre: &ItemTable,
    q_prev_block: &ItemTable,
    gamma_of: impl Fn(ItemId) -> Result<f64, ModelError>,
) -> Result<ItemTable, ModelError> {
    let mut out = q_pre.clone();
    for (row_prev, &item) in q_prev_block.ids().iter().enumerate() {
        let row = out.row_of(item).ok_or(ModelError::UnknownItem { item: item.0 })?;
        let gamma = gamma_of(item)?;
        if gamma == 0.0 {
            // (1−0)·pre + 0·prev = pre: skip so the row survives bit-exactly.
            continue;
        }
        let prev = q_prev_block.row(row_prev);
        for (o, p) in out.row_mut(row).iter_mut().zip(prev) {
            *o = (1.0 - gamma) * *o + gamma * *p;
        }
    }
    Ok(out)
}

/// One federated round: sample participants, run their local updates in
/// parallel, optionally perturb uploads, pre-aggregate, and blend with the
/// previous block's table (except during the base block, which assigns the
/// pre-aggregate directly).
pub fn run_round(
    global: &mut GlobalState,
    clients: &mut BTreeMap<UserId, ClientState>,
    block: &DataBlock,
    cfg: &RoundConfig,
    factory: &RngFactory,
) -> Result<RoundReport, ExperimentError> {
    assert_eq!(global.block, block.index, "round driven against the wrong block");
    let pool: Vec<UserId> = block.train.keys().copied().collect();
    let mut sample_rng =
        factory.stream(Stream::ClientSample, &[global.block as u64, global.round as u64]);
    let sampled = sample_clients(&pool, cfg.fraction, &mut sample_rng)?;
    let sampled_set: HashSet<UserId> = sampled.iter().copied().collect();

    let lr_item =
        if cfg.scale_item_lr { cfg.lr * global.q_current.len() as f64 } else { cfg.lr };
    let ctx = ClientContext {
        block: global.block,
        round: global.round,
        mechanism: cfg.client_mechanism,
        lambda_kd: cfg.lambda_kd,
        mu_reg: cfg.mu_reg,
        eps: cfg.eps,
        negative_ratio: cfg.negative_ratio,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lr_user: cfg.lr,
        lr_item,
        shift_per_epoch: cfg.shift_per_epoch,
        rank_excludes_train: cfg.rank_excludes_train,
        q_prev_block: global.q_prev_block.as_ref(),
    };

    // Parallel client section. Clients are visited in sorted-user order and
    // results collected in that same order, so the aggregate below cannot
    // depend on thread scheduling.
    let q_ref = &global.q_current;
    let mut work: Vec<(UserId, &mut ClientState)> =
        clients.iter_mut().filter(|(u, _)| sampled_set.contains(u)).map(|(u, c)| (*u, c)).collect();
    let outcomes: Vec<(UserId, Result<(UploadPayload, f64), ExperimentError>)> = work
        .par_iter_mut()
        .map(|(user, state)| {
            let train = &block.train[user];
            let result = state.client_update(q_ref, train, &ctx, factory).map(|out| {
                let mut table = out.table;
                if cfg.noise_lambda > 0.0 {
                    let mut rng = factory.stream(
                        Stream::Noise,
                        &[user.0 as u64, ctx.block as u64, ctx.round as u64],
                    );
                    add_transmission_noise(&mut table, cfg.noise_lambda, &mut rng);
                }
                (table, out.mean_loss)
            });
            (*user, result)
        })
        .collect();

    let mut uploads: Vec<UploadPayload> = Vec::with_capacity(outcomes.len());
    let mut loss_sum = 0.0;
    let mut failed = 0usize;
    for (_, result) in outcomes {
        match result {
            Ok((table, loss)) => {
                loss_sum += loss;
                uploads.push(table);
            }
            Err(_) => failed += 1,
        }
    }
    if uploads.is_empty() {
        return Err(ModelError::RoundFailed { round: global.round }.into());
    }

    let q_pre = pre_aggregate(&uploads)?;
    let (q_next, mean_phi, mean_gamma) = match (&global.q_prev_block, cfg.server_mechanism) {
        (Some(q_prev), ServerMechanism::ItemWiseTemporalMean) if global.block > 0 => {
            let stats = retention_stats(q_prev, &q_pre, cfg.beta)?;
            (temporal_mean(&q_pre, q_prev, cfg.beta)?, stats.0, stats.1)
        }
        (Some(q_prev), ServerMechanism::UniformTemporalMean) if global.block > 0 => {
            let stats = retention_stats(q_prev, &q_pre, cfg.beta)?;
            (uniform_temporal_mean(&q_pre, q_prev, cfg.beta)?, stats.0, cfg.beta)
        }
        _ => (q_pre, 0.0, 0.0),
    };
    global.q_current = q_next;
    global.round += 1;

    Ok(RoundReport {
        block: global.block,
        round: global.round - 1,
        participants: uploads.len(),
        failed,
        mean_phi,
        mean_gamma,
        mean_loss: loss_sum / uploads.len() as f64,
    })
}

/// (mean φ, mean γ) over the previous block's items, for telemetry.
fn retention_stats(
    q_prev: &ItemTable,
    q_pre: &ItemTable,
    beta: f64,
) -> Result<(f64, f64), ModelError> {
    let mut phi_sum = 0.0;
    let mut gamma_sum = 0.0;
    for &item in q_prev.ids() {
        let phi = knowledge_shift(q_prev, q_pre, item)?;
        phi_sum += phi;
        gamma_sum += retention_weight(phi, beta);
    }
    let n = q_prev.len().max(1) as f64;
    Ok((phi_sum / n, gamma_sum / n))
}

/// Settings for the block transition.
#[derive(Debug, Clone, Copy)]
pub struct AdvanceConfig {
    pub backbone: Backbone,
    pub dim: usize,
    pub top_n: usize,
    /// Exclude a user's train positives from their retained top-N list.
    pub finalize_excludes_train: bool,
}

/// Block transition: freeze the current table, rebuild retained knowledge for
/// every user trained on the ending block (and clear it for everyone else),
/// snapshot Φ for regularization, append freshly initialized rows for items
/// new in the next block, and register new users.
pub fn advance_block(
    global: &mut GlobalState,
    clients: &mut BTreeMap<UserId, ClientState>,
    ending_block: &DataBlock,
    next_block: &DataBlock,
    cfg: &AdvanceConfig,
    factory: &RngFactory,
) -> Result<(), ExperimentError> {
    assert_eq!(global.block, ending_block.index);
    assert_eq!(ending_block.index + 1, next_block.index);

    for (user, state) in clients.iter_mut() {
        state.snapshot_prev_phi();
        if let Some(train) = ending_block.train.get(user) {
            let exclude: HashSet<ItemId> = if cfg.finalize_excludes_train {
                train.iter().map(|x| x.item).collect()
            } else {
                HashSet::new()
            };
            state.finalize_block(&global.q_current, cfg.top_n, &exclude)?;
        } else {
            state.clear_retained();
        }
    }

    global.q_prev_block = Some(global.q_current.clone());

    for &item in &next_block.items_cum[global.q_current.len()..] {
        let mut rng = factory.stream(Stream::ItemInit, &[item.0 as u64]);
        let row = init_item_row(cfg.dim, &mut rng);
        global.q_current.push(item, row);
    }

    for &user in &next_block.users_cum[clients.len()..] {
        clients.insert(user, ClientState::new(user, cfg.backbone, cfg.dim, factory));
    }

    global.block += 1;
    global.round = 0;
    Ok(())
}
