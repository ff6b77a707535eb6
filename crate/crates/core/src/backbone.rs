//! Scoring backbones: dot-product matrix factorization and a one-hidden-layer
//! neural scorer. Closed-form gradients only — no autodiff — so every update
//! is auditable and cheap.

use crate::error::ModelError;
use crate::types::ItemId;
use rand::Rng;
use std::collections::HashMap;

/// Which scorer an experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// score = sigmoid(phi · q_i)
    FedMf,
    /// score = sigmoid(phi · s(W q_i + b)), s = elementwise logistic
    FedNcf1,
}

/// The shared (public) item-embedding table: a bijection ItemId → row plus a
/// dense |items| × d matrix. Rows are appended in registration order and never
/// removed, so row indices are stable across a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTable {
    dim: usize,
    ids: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    rows: Vec<f64>,
}

impl ItemTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), index: HashMap::new(), rows: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Item ids in registration order (row order).
    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.index.contains_key(&item)
    }

    pub fn row_of(&self, item: ItemId) -> Option<usize> {
        self.index.get(&item).copied()
    }

    /// Appends a new item row. Panics if the item is already registered or the
    /// row has the wrong width — both are programming errors, not data errors.
    pub fn push(&mut self, item: ItemId, row: Vec<f64>) {
        assert_eq!(row.len(), self.dim, "row width must equal the table dimension");
        let prev = self.index.insert(item, self.ids.len());
        assert!(prev.is_none(), "item {item} registered twice");
        self.ids.push(item);
        self.rows.extend(row);
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.rows[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn row_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.rows[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn row_for(&self, item: ItemId) -> Option<&[f64]> {
        self.row_of(item).map(|r| self.row(r))
    }

    /// Flat view of the whole matrix (row-major), used by aggregation.
    pub fn values(&self) -> &[f64] {
        &self.rows
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.rows
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|v| v.is_finite())
    }
}

/// Parameters that never leave the client: the user embedding and, for the
/// neural backbone, its private hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub enum PrivateParams {
    MatrixFactorization {
        phi: Vec<f64>,
    },
    Neural {
        phi: Vec<f64>,
        /// d×d hidden-layer weights, row-major: w[r*d + c] connects input c
        /// to hidden unit r.
        w: Vec<f64>,
        b: Vec<f64>,
    },
}

impl PrivateParams {
    /// Fresh parameters with every entry uniform in [-0.01, 0.01].
    pub fn init(backbone: Backbone, dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-0.01..=0.01)).collect()
        };
        match backbone {
            Backbone::FedMf => PrivateParams::MatrixFactorization { phi: draw(dim) },
            Backbone::FedNcf1 => PrivateParams::Neural {
                phi: draw(dim),
                w: draw(dim * dim),
                b: draw(dim),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PrivateParams::MatrixFactorization { phi } => phi.len(),
            PrivateParams::Neural { phi, .. } => phi.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        let all = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            PrivateParams::MatrixFactorization { phi } => all(phi),
            PrivateParams::Neural { phi, w, b } => all(phi) && all(w) && all(b),
        }
    }
}

/// Fresh item-embedding row, uniform in [-0.01, 0.01].
pub fn init_item_row(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-0.01..=0.01)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pre-sigmoid score. Ranking uses raw logits: the sigmoid is strictly
/// monotone, so the order is identical, and logits cannot collapse distinct
/// values to a rounded probability of 0 or 1.
pub fn logit(params: &PrivateParams, q_i: &[f64]) -> Result<f64, ModelError> {
    if q_i.len() != params.dim() {
        return Err(ModelError::DimensionMismatch { expected: params.dim(), got: q_i.len() });
    }
    Ok(match params {
        PrivateParams::MatrixFactorization { phi } => dot(phi, q_i),
        PrivateParams::Neural { phi, w, b } => {
            let d = phi.len();
            let mut acc = 0.0;
            for r in 0..d {
                let z = sigmoid(dot(&w[r * d..(r + 1) * d], q_i) + b[r]);
                acc += phi[r] * z;
            }
            acc
        }
    })
}

/// Predicted interaction probability in (0, 1).
pub fn score(params: &PrivateParams, q_i: &[f64]) -> Result<f64, ModelError> {
    Ok(sigmoid(logit(params, q_i)?))
}

/// Logits of one user against every row of the table.
pub fn logits_all(params: &PrivateParams, table: &ItemTable) -> Result<Vec<f64>, ModelError> {
    (0..table.len()).map(|r| logit(params, table.row(r))).collect()
}

/// Probability clamp applied before logarithms.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Binary cross entropy with a (possibly soft) label y ∈ [0, 1]. The
/// prediction is clamped away from {0, 1} so the loss is always finite.
pub fn bce_loss(pred: f64, label: f64) -> f64 {
    let p = pred.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Gradient buffers mirroring one client's trainable parameters. Gradients
/// from many (example, weight) pairs accumulate here and are applied in one
/// SGD step, which is how mini-batches are realized.
#[derive(Debug, Clone)]
pub struct Gradients {
    d_phi: Vec<f64>,
    d_w: Vec<f64>,
    d_b: Vec<f64>,
    /// row index → gradient for that item embedding
    d_items: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &PrivateParams) -> Self {
        let d = params.dim();
        let (w_len, b_len) = match params {
            PrivateParams::MatrixFactorization { .. } => (0, 0),
            PrivateParams::Neural { .. } => (d * d, d),
        };
        Self {
            d_phi: vec![0.0; d],
            d_w: vec![0.0; w_len],
            d_b: vec![0.0; b_len],
            d_items: HashMap::new(),
        }
    }

    /// Accumulates the gradient of weight · BCE(score(params, q_row), label)
    /// with respect to every trainable parameter. Returns the example's
    /// predicted probability so callers can also account the loss.
    pub fn accumulate(
        &mut self,
        params: &PrivateParams,
        table: &ItemTable,
        row: usize,
        label: f64,
        weight: f64,
    ) -> Result<f64, ModelError> {
        let q = table.row(row);
        let p = score(params, q)?;
        // d(BCE)/d(logit) = p - y, for both hard and soft labels
        let g = weight * (p - label);
        let d = params.dim();
        let d_item = self.d_items.entry(row).or_insert_with(|| vec![0.0; d]);
        match params {
            PrivateParams::MatrixFactorization { phi } => {
                for k in 0..d {
                    self.d_phi[k] += g * q[k];
                    d_item[k] += g * phi[k];
                }
            }
            PrivateParams::Neural { phi, w, b } => {
                for r in 0..d {
                    let z = sigmoid(dot(&w[r * d..(r + 1) * d], q) + b[r]);
                    self.d_phi[r] += g * z;
                    // chain through the logistic hidden unit
                    let da = g * phi[r] * z * (1.0 - z);
                    self.d_b[r] += da;
                    for c in 0..d {
                        self.d_w[r * d + c] += da * q[c];
                        d_item[c] += da * w[r * d + c];
                    }
                }
            }
        }
        Ok(p)
    }

    /// Adds μ · ∇‖x − x_ref‖² = 2μ(x − x_ref) for a parameter regularized
    /// toward a previous-block snapshot.
    pub fn accumulate_l2_pull(
        grad: &mut [f64],
        current: &[f64],
        reference: &[f64],
        mu: f64,
    ) {
        for ((g, x), r) in grad.iter_mut().zip(current).zip(reference) {
            *g += 2.0 * mu * (x - r);
        }
    }

    /// Accumulates μ · ∇‖θ − θ_ref‖² over every private parameter and returns
    /// the penalty μ‖θ − θ_ref‖² itself.
    pub fn pull_private_l2(
        &mut self,
        current: &PrivateParams,
        reference: &PrivateParams,
        mu: f64,
    ) -> f64 {
        let sq = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let mut penalty = 0.0;
        match (current, reference) {
            (
                PrivateParams::MatrixFactorization { phi },
                PrivateParams::MatrixFactorization { phi: phi_ref },
            ) => {
                penalty += mu * sq(phi, phi_ref);
                Self::accumulate_l2_pull(&mut self.d_phi, phi, phi_ref, mu);
            }
            (
                PrivateParams::Neural { phi, w, b },
                PrivateParams::Neural { phi: phi_ref, w: w_ref, b: b_ref },
            ) => {
                penalty += mu * (sq(phi, phi_ref) + sq(w, w_ref) + sq(b, b_ref));
                Self::accumulate_l2_pull(&mut self.d_phi, phi, phi_ref, mu);
                Self::accumulate_l2_pull(&mut self.d_w, w, w_ref, mu);
                Self::accumulate_l2_pull(&mut self.d_b, b, b_ref, mu);
            }
            _ => panic!("backbone cannot change between blocks"),
        }
        penalty
    }

    pub fn item_grad_mut(&mut self, row: usize, dim: usize) -> &mut [f64] {
        self.d_items.entry(row).or_insert_with(|| vec![0.0; dim])
    }

    /// One SGD step: params ← params − lr_user · ∇, touched item rows ←
    /// rows − lr_item · ∇. Untouched rows are left bit-identical.
    pub fn apply(
        &self,
        params: &mut PrivateParams,
        table: &mut ItemTable,
        lr_user: f64,
        lr_item: f64,
    ) -> Result<(), ModelError> {
        let step = |dst: &mut [f64], src: &[f64], lr: f64| {
            for (x, g) in dst.iter_mut().zip(src) {
                *x -= lr * g;
            }
        };
        match params {
            PrivateParams::MatrixFactorization { phi } => step(phi, &self.d_phi, lr_user),
            PrivateParams::Neural { phi, w, b } => {
                step(phi, &self.d_phi, lr_user);
                step(w, &self.d_w, lr_user);
                step(b, &self.d_b, lr_user);
            }
        }
        for (&row, g) in &self.d_items {
            step(table.row_mut(row), g, lr_item);
        }
        if !params.is_finite() {
            return Err(ModelError::NonFinite { context: "private parameters after SGD step" });
        }
        for &row in self.d_items.keys() {
            if table.row(row).iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { context: "item embedding after SGD step" });
            }
        }
        Ok(())
    }
}

/// One single-example SGD step on weight · BCE — the unit update the batched
/// path is built from, kept standalone so its gradients can be verified in
/// isolation. Soft labels are allowed (distillation reuses this math).
pub fn grad_step(
    params: &mut PrivateParams,
    table: &mut ItemTable,
    item: ItemId,
    label: f64,
    weight: f64,
    lr: f64,
) -> Result<(), ModelError> {
    assert!(lr > 0.0, "learning rate must be positive");
    let row = table.row_of(item).ok_or(ModelError::UnknownItem { item: item.0 })?;
    let mut grads = Gradients::zeros_like(params);
    grads.accumulate(params, table, row, label, weight)?;
    grads.apply(params, table, lr, lr)
}

/// 1-based rank of `target` among `candidates` by descending logit; ties are
/// broken by ascending item id. O(|candidates|) — no sort.
pub fn rank_of(
    params: &PrivateParams,
    table: &ItemTable,
    target: ItemId,
    candidates: &[ItemId],
) -> Result<usize, ModelError> {
    let target_row = table.row_of(target).ok_or(ModelError::UnknownItem { item: target.0 })?;
    debug_assert!(candidates.contains(&target));
    let target_logit = logit(params, table.row(target_row))?;
    let mut rank = 1usize;
    for &c in candidates {
        if c == target {
            continue;
        }
        let Some(r) = table.row_of(c) else { continue };
        let l = logit(params, table.row(r))?;
        if l > target_logit || (l == target_logit && c < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// The `n` highest-scoring items not in `exclude`, in descending-score order
/// with ascending-id tiebreak; shorter if fewer candidates exist.
pub fn top_n(
    params: &PrivateParams,
    table: &ItemTable,
    n: usize,
    exclude: &std::collections::HashSet<ItemId>,
) -> Result<Vec<ItemId>, ModelError> {
    assert!(n >= 1, "top_n needs n >= 1");
    let logits = logits_all(params, table)?;
    let mut order: Vec<usize> = (0..table.len())
        .filter(|&r| !exclude.contains(&table.ids()[r]))
        .collect();
    order.sort_by(|&a, &b| {
        logits[b].partial_cmp(&logits[a]).unwrap().then(table.ids()[a].cmp(&table.ids()[b]))
    });
    order.truncate(n);
    Ok(order.into_iter().map(|r| table.ids()[r]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngFactory, Stream};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn mf(phi: Vec<f64>) -> PrivateParams {
        PrivateParams::MatrixFactorization { phi }
    }

    fn table_from(rows: Vec<Vec<f64>>) -> ItemTable {
        let mut t = ItemTable::new(rows[0].len());
        for (i, row) in rows.into_iter().enumerate() {
            t.push(ItemId(i as u32), row);
        }
        t
    }

    #[test]
    fn zero_user_scores_half() {
        let q = vec![0.3, -0.2, 0.5];
        assert_eq!(score(&mf(vec![0.0; 3]), &q).unwrap(), 0.5);
    }

    #[test]
    fn unit_vectors_score_sigmoid_of_one() {
        let phi = vec![0.0, 1.0, 0.0];
        let s = score(&mf(phi.clone()), &phi).unwrap();
        assert!((s - 0.731_058_578_630_0049).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_dimension_mismatch() {
        assert!(matches!(
            score(&mf(vec![0.0; 3]), &[1.0, 2.0]),
            Err(ModelError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.9, 0.0) - (-(0.1f64).ln())).abs() < 1e-12);
        assert!(bce_loss(1.0, 1.0) < 1e-6, "clamping keeps the loss finite and small");
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn grad_step_is_noop_when_pred_equals_label() {
        let mut params = mf(vec![0.1, -0.3]);
        let mut table = table_from(vec![vec![0.4, 0.2], vec![-0.1, 0.9]]);
        let label = score(&params, table.row(0)).unwrap();
        let before = (params.clone(), table.clone());
        grad_step(&mut params, &mut table, ItemId(0), label, 1.0, 0.5).unwrap();
        assert_eq!(params, before.0);
        assert_eq!(table, before.1);
    }

    #[test]
    fn grad_step_with_zero_weight_is_noop() {
        let mut params = mf(vec![0.1, -0.3]);
        let mut table = table_from(vec![vec![0.4, 0.2]]);
        let before = (params.clone(), table.clone());
        grad_step(&mut params, &mut table, ItemId(0), 1.0, 0.0, 0.5).unwrap();
        assert_eq!((params, table), before);
    }

    #[test]
    fn single_step_descends_the_loss() {
        for backbone in [Backbone::FedMf, Backbone::FedNcf1] {
            let mut rng = RngFactory::new(11).stream(Stream::UserInit, &[0]);
            let mut params = PrivateParams::init(backbone, 4, &mut rng);
            let mut table = table_from(vec![init_item_row(4, &mut rng)]);
            let before = bce_loss(score(&params, table.row(0)).unwrap(), 1.0);
            grad_step(&mut params, &mut table, ItemId(0), 1.0, 1.0, 0.1).unwrap();
            let after = bce_loss(score(&params, table.row(0)).unwrap(), 1.0);
            assert!(after < before, "{backbone:?}: {after} !< {before}");
        }
    }

    #[test]
    fn rank_matches_brute_force_sort() {
        let mut rng = RngFactory::new(5).stream(Stream::ItemInit, &[0]);
        let params = PrivateParams::init(Backbone::FedMf, 8, &mut rng);
        let table = table_from((0..20).map(|_| init_item_row(8, &mut rng)).collect());
        let candidates: Vec<ItemId> = table.ids().to_vec();
        let logits = logits_all(&params, &table).unwrap();
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        for (pos, &row) in order.iter().enumerate() {
            let got = rank_of(&params, &table, table.ids()[row], &candidates).unwrap();
            assert_eq!(got, pos + 1);
        }
    }

    #[test]
    fn singleton_candidate_ranks_first() {
        let params = mf(vec![1.0]);
        let table = table_from(vec![vec![0.5]]);
        assert_eq!(rank_of(&params, &table, ItemId(0), &[ItemId(0)]).unwrap(), 1);
    }

    #[test]
    fn top_n_is_a_prefix_of_the_full_order() {
        let mut rng = RngFactory::new(6).stream(Stream::ItemInit, &[1]);
        let params = PrivateParams::init(Backbone::FedNcf1, 6, &mut rng);
        let table = table_from((0..50).map(|_| init_item_row(6, &mut rng)).collect());
        let all = top_n(&params, &table, 50, &HashSet::new()).unwrap();
        let ten = top_n(&params, &table, 10, &HashSet::new()).unwrap();
        assert_eq!(ten, all[..10]);
        let excluded: HashSet<ItemId> = table.ids().iter().copied().collect();
        assert!(top_n(&params, &table, 10, &excluded).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        #[test]
        fn untouched_rows_stay_bit_identical(seed in 0u64..500) {
            let mut rng = RngFactory::new(seed).stream(Stream::ItemInit, &[2]);
            let mut params = PrivateParams::init(Backbone::FedMf, 4, &mut rng);
            let mut table = table_from((0..12).map(|_| init_item_row(4, &mut rng)).collect());
            let before = table.clone();
            grad_step(&mut params, &mut table, ItemId(3), 1.0, 1.0, 0.3).unwrap();
            for r in 0..12 {
                if r != 3 {
                    prop_assert_eq!(table.row(r), before.row(r));
                }
            }
        }
    }
}
