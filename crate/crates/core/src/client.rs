//! Client-side continual learning: preference-shift measurement, the adaptive
//! replay memory, the distillation loss, local training, and the optional
//! Laplace transmission guard.
//!
//! Privacy boundary: `ClientState` owns the user's private parameters and they
//! are deliberately unreachable from outside this module — other modules can
//! obtain score vectors and derived summaries, never Φ itself or raw
//! interactions. The only value a client hands the server is an [`ItemTable`].

use crate::backbone::{
    bce_loss, logits_all, score, top_n, Backbone, Gradients, ItemTable, PrivateParams,
};
use crate::data::sample_negatives;
use crate::error::{ExperimentError, ModelError};
use crate::rng::{RngFactory, Stream};
use crate::types::{Interaction, ItemId, UserId};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{HashMap, HashSet};

/// What the client retains from the previous block: its top-N list in rank
/// order, the teacher's scores for those items, and their stored positions.
#[derive(Debug, Clone)]
pub struct RetainedKnowledge {
    /// Previous-block top-N items, best first.
    pub top_items: Vec<ItemId>,
    /// Teacher probability for each retained item, all in (0, 1).
    pub teacher_scores: HashMap<ItemId, f64>,
    /// Stored rank of each retained item; equals its 1-based position in
    /// `top_items` by construction.
    pub prev_ranks: HashMap<ItemId, usize>,
}

/// Client-side training mechanism selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientMechanism {
    /// Plain local training (fine-tuning).
    Plain,
    /// Distillation over the adaptive replay memory (sampling rate δ = e^(−εΔ)).
    AdaptiveReplayKd,
    /// Distillation over the full retained top-N list (δ pinned to 1).
    FullReplayKd,
    /// L2 pull toward the previous block's parameters.
    Regularize,
}

impl ClientMechanism {
    fn distills(self) -> bool {
        matches!(self, ClientMechanism::AdaptiveReplayKd | ClientMechanism::FullReplayKd)
    }
}

/// Everything one local update needs to know beyond the model itself.
#[derive(Debug, Clone, Copy)]
pub struct ClientContext<'a> {
    pub block: usize,
    pub round: usize,
    pub mechanism: ClientMechanism,
    /// Weight of the distillation term.
    pub lambda_kd: f64,
    /// Weight of the regularization pull (Regularize mechanism).
    pub mu_reg: f64,
    /// Preference-shift sensitivity ε.
    pub eps: f64,
    pub negative_ratio: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_user: f64,
    pub lr_item: f64,
    /// Recompute the preference shift once per epoch instead of every batch.
    pub shift_per_epoch: bool,
    /// Rank over the item universe minus the user's current train positives.
    /// Retained items themselves always stay rankable.
    pub rank_excludes_train: bool,
    /// Previous-block global table (regularization target; absent at t = 0).
    pub q_prev_block: Option<&'a ItemTable>,
}

/// The result of one local update: the trained item table to upload and the
/// average per-batch loss for telemetry.
#[derive(Debug)]
pub struct ClientOutcome {
    pub table: ItemTable,
    pub mean_loss: f64,
}

/// One simulated client. `phi` (and the user's data) never leave this module.
#[derive(Debug, Clone)]
pub struct ClientState {
    user: UserId,
    phi: PrivateParams,
    /// Snapshot of `phi` taken at the last block boundary (Reg target).
    prev_phi: Option<PrivateParams>,
    retained: Option<RetainedKnowledge>,
}

impl ClientState {
    /// Registers a user with freshly initialized private parameters drawn
    /// from the user-init stream, so creation order cannot matter.
    pub fn new(user: UserId, backbone: Backbone, dim: usize, factory: &RngFactory) -> Self {
        let mut rng = factory.stream(Stream::UserInit, &[user.0 as u64]);
        Self {
            user,
            phi: PrivateParams::init(backbone, dim, &mut rng),
            prev_phi: None,
            retained: None,
        }
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn retained(&self) -> Option<&RetainedKnowledge> {
        self.retained.as_ref()
    }

    /// Score vector of this user against every row of `table` (pre-sigmoid).
    /// This is the widest window other modules get into Φ.
    pub fn logits_against(&self, table: &ItemTable) -> Result<Vec<f64>, ModelError> {
        logits_all(&self.phi, table)
    }

    /// Sum of absolute rank displacements of the retained top-N items under
    /// the current model, ranked over the full accumulated item set (minus
    /// `exclude`, which never hides a retained item).
    pub fn preference_shift(
        &self,
        table: &ItemTable,
        exclude: Option<&HashSet<ItemId>>,
    ) -> Result<u64, ModelError> {
        let retained = self
            .retained
            .as_ref()
            .ok_or(ModelError::NoRetainedKnowledge { user: self.user.0 })?;
        preference_shift_of(&self.phi, retained, table, exclude)
    }

    /// Distillation loss over `memory` plus per-item logit gradients
    /// (student − teacher), exposed for verification.
    pub fn kd_loss(
        &self,
        table: &ItemTable,
        memory: &[ItemId],
    ) -> Result<(f64, Vec<(ItemId, f64)>), ModelError> {
        let retained = self
            .retained
            .as_ref()
            .ok_or(ModelError::NoRetainedKnowledge { user: self.user.0 })?;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(memory.len());
        for &item in memory {
            let teacher = *retained
                .teacher_scores
                .get(&item)
                .ok_or(ModelError::MissingTeacherScore { item: item.0 })?;
            let row = table.row_for(item).ok_or(ModelError::UnknownItem { item: item.0 })?;
            let student = score(&self.phi, row)?;
            loss += bce_loss(student, teacher);
            grads.push((item, student - teacher));
        }
        Ok((loss, grads))
    }

    /// Local training (one federated round): copies the global table, runs E
    /// epochs of mini-batch SGD on BCE over train positives plus freshly
    /// sampled negatives, adds the mechanism's continual term, and returns the
    /// trained table. Φ stays here.
    pub fn client_update(
        &mut self,
        q_global: &ItemTable,
        local_train: &[Interaction],
        ctx: &ClientContext,
        factory: &RngFactory,
    ) -> Result<ClientOutcome, ExperimentError> {
        assert!(!local_train.is_empty(), "client_update requires local train data");
        let mut q = q_global.clone();
        let mut rng = factory.stream(
            Stream::Client,
            &[self.user.0 as u64, ctx.block as u64, ctx.round as u64],
        );

        let positives: HashSet<ItemId> = local_train.iter().map(|x| x.item).collect();
        let mut examples: Vec<(usize, f64)> = Vec::new();
        for x in local_train {
            let row = q.row_of(x.item).unwrap_or_else(|| {
                panic!("train item {} missing from the global table", x.item)
            });
            examples.push((row, 1.0));
        }
        let negatives =
            sample_negatives(self.user, &positives, q.ids(), ctx.negative_ratio, &mut rng)?;
        for item in negatives {
            examples.push((q.row_of(item).expect("negative sampled from table ids"), 0.0));
        }

        let distill = ctx.mechanism.distills() && self.retained.is_some() && ctx.lambda_kd > 0.0;
        let rank_exclude: Option<HashSet<ItemId>> =
            if distill && ctx.rank_excludes_train { Some(positives.clone()) } else { None };

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for _epoch in 0..ctx.epochs {
            examples.shuffle(&mut rng);
            let mut epoch_rate: Option<f64> = None;
            for batch in examples.chunks(ctx.batch_size.max(1)) {
                let mut grads = Gradients::zeros_like(&self.phi);
                let w = 1.0 / batch.len() as f64;
                let mut batch_loss = 0.0;
                for &(row, label) in batch {
                    let p = grads.accumulate(&self.phi, &q, row, label, w)?;
                    batch_loss += w * bce_loss(p, label);
                }

                if distill {
                    let retained = self.retained.as_ref().expect("checked above");
                    let rate = match (ctx.mechanism, ctx.shift_per_epoch, epoch_rate) {
                        (ClientMechanism::FullReplayKd, ..) => 1.0,
                        (_, true, Some(r)) => r,
                        _ => {
                            let delta = preference_shift_of(
                                &self.phi,
                                retained,
                                &q,
                                rank_exclude.as_ref(),
                            )?;
                            sampling_rate(delta, ctx.eps)
                        }
                    };
                    epoch_rate = Some(rate);
                    let memory = build_replay_memory(retained, rate, &mut rng);
                    for item in memory {
                        let teacher = *retained
                            .teacher_scores
                            .get(&item)
                            .ok_or(ModelError::MissingTeacherScore { item: item.0 })?;
                        let row =
                            q.row_of(item).ok_or(ModelError::UnknownItem { item: item.0 })?;
                        let p = grads.accumulate(&self.phi, &q, row, teacher, ctx.lambda_kd)?;
                        batch_loss += ctx.lambda_kd * bce_loss(p, teacher);
                    }
                }

                if ctx.mechanism == ClientMechanism::Regularize {
                    batch_loss += self.accumulate_regularizer(&mut grads, &q, ctx);
                }

                grads.apply(&mut self.phi, &mut q, ctx.lr_user, ctx.lr_item)?;
                loss_sum += batch_loss;
                batches += 1;
            }
        }
        Ok(ClientOutcome { table: q, mean_loss: loss_sum / batches.max(1) as f64 })
    }

    /// μ‖θ − θ^(t−1)‖² over the private parameters and the previous block's
    /// item rows; returns the penalty value and accumulates its gradient.
    fn accumulate_regularizer(
        &self,
        grads: &mut Gradients,
        q: &ItemTable,
        ctx: &ClientContext,
    ) -> f64 {
        let mu = ctx.mu_reg;
        if mu <= 0.0 {
            return 0.0;
        }
        let sq = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let mut penalty = 0.0;
        if let Some(prev) = &self.prev_phi {
            penalty += grads.pull_private_l2(&self.phi, prev, mu);
        }
        if let Some(q_prev) = ctx.q_prev_block {
            let dim = q.dim();
            for (row_prev, &item) in q_prev.ids().iter().enumerate() {
                let Some(row_now) = q.row_of(item) else { continue };
                let current = q.row(row_now);
                let reference = q_prev.row(row_prev);
                penalty += mu * sq(current, reference);
                Gradients::accumulate_l2_pull(
                    grads.item_grad_mut(row_now, dim),
                    current,
                    reference,
                    mu,
                );
            }
        }
        penalty
    }

    /// Block-boundary bookkeeping: rebuild the retained top-N list with
    /// teacher scores and positional ranks from the final block model.
    pub fn finalize_block(
        &mut self,
        q_final: &ItemTable,
        n: usize,
        exclude: &HashSet<ItemId>,
    ) -> Result<(), ModelError> {
        let top_items = top_n(&self.phi, q_final, n, exclude)?;
        let mut teacher_scores = HashMap::with_capacity(top_items.len());
        let mut prev_ranks = HashMap::with_capacity(top_items.len());
        for (pos, &item) in top_items.iter().enumerate() {
            let row = q_final.row_for(item).expect("top_n returns registered items");
            teacher_scores.insert(item, score(&self.phi, row)?);
            prev_ranks.insert(item, pos + 1);
        }
        self.retained = Some(RetainedKnowledge { top_items, teacher_scores, prev_ranks });
        Ok(())
    }

    /// Snapshot Φ as the regularization target for the next block.
    pub fn snapshot_prev_phi(&mut self) {
        self.prev_phi = Some(self.phi.clone());
    }

    /// Drop retained knowledge; a user without fresh training data in the
    /// block just ended has no teacher to distill from in the next one.
    pub fn clear_retained(&mut self) {
        self.retained = None;
    }

    /// Test-only constructor with hand-picked private parameters.
    #[cfg(test)]
    pub(crate) fn with_params(user: UserId, phi: PrivateParams) -> Self {
        Self { user, phi, prev_phi: None, retained: None }
    }
}

fn preference_shift_of(
    phi: &PrivateParams,
    retained: &RetainedKnowledge,
    table: &ItemTable,
    exclude: Option<&HashSet<ItemId>>,
) -> Result<u64, ModelError> {
    assert!(!retained.top_items.is_empty(), "retained knowledge must be non-empty");
    let logits = logits_all(phi, table)?;
    let retained_set: HashSet<ItemId> = retained.top_items.iter().copied().collect();
    let in_pool = |id: ItemId| -> bool {
        exclude.map_or(true, |ex| !ex.contains(&id) || retained_set.contains(&id))
    };
    let mut delta = 0u64;
    for (pos, &item) in retained.top_items.iter().enumerate() {
        let stored = (pos + 1) as i64;
        let row = table.row_of(item).ok_or(ModelError::UnknownItem { item: item.0 })?;
        let target = logits[row];
        let mut rank = 1i64;
        for (r, &id) in table.ids().iter().enumerate() {
            if r == row || !in_pool(id) {
                continue;
            }
            if logits[r] > target || (logits[r] == target && id < item) {
                rank += 1;
            }
        }
        delta += (rank - stored).unsigned_abs();
    }
    Ok(delta)
}

/// Consistency sampling rate δ = e^(−εΔ) ∈ (0, 1].
pub fn sampling_rate(delta: u64, eps: f64) -> f64 {
    assert!(eps >= 0.0, "eps must be non-negative");
    (-eps * delta as f64).exp()
}

/// Uniform sample without replacement of ⌊δ·|S|⌋ retained items.
pub fn build_replay_memory(
    retained: &RetainedKnowledge,
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<ItemId> {
    assert!(rate > 0.0 && rate <= 1.0, "sampling rate must be in (0, 1]");
    let len = retained.top_items.len();
    let k = (rate * len as f64).floor() as usize;
    if k == 0 {
        return Vec::new();
    }
    rand::seq::index::sample(rng, len, k)
        .into_iter()
        .map(|i| retained.top_items[i])
        .collect()
}

/// Draws one Laplace(0, scale) variate by inverse CDF.
pub fn sample_laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen::<f64>() - 0.5;
    let t = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
    -scale * u.signum() * t.ln()
}

/// Perturbs every entry of an upload with independent Laplace(0, λ) noise.
/// λ = 0 leaves the table untouched (and draws nothing).
pub fn add_transmission_noise(table: &mut ItemTable, lambda: f64, rng: &mut impl Rng) {
    assert!(lambda >= 0.0, "noise scale must be non-negative");
    if lambda == 0.0 {
        return;
    }
    for v in table.values_mut() {
        *v += sample_laplace(lambda, rng);
    }
}
