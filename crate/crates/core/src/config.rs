//! Experiment configuration: every knob of a run, with serde defaults so a
//! config file only needs to name what it changes, plus the method → mechanism
//! mapping that turns a method name into client- and server-side behavior.

use crate::backbone::Backbone;
use crate::client::ClientMechanism;
use crate::data::{Schema, SplitRatios};
use crate::error::ExperimentError;
use crate::server::ServerMechanism;
use std::path::PathBuf;
use std::str::FromStr;

/// Training method: the full system, its single-mechanism ablations, and the
/// continual-learning baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain fine-tuning on each incremental block.
    Ft,
    /// Fine-tuning plus an L2 pull towards the previous block's parameters.
    Reg,
    /// Knowledge distillation over the full retained top-N list every round.
    Kd,
    /// Adaptive replay memory + knowledge distillation + item-wise temporal mean.
    F3crec,
    /// No client-side continual learning; server mechanism kept.
    F3crecWoCc,
    /// Fixed (non-adaptive) replay memory; server mechanism kept.
    F3crecWoArm,
    /// No server-side continual learning; client mechanism kept.
    F3crecWoSc,
    /// Uniform temporal mean (one fixed weight for all old items).
    F3crecWoItm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ft,
        Method::Reg,
        Method::Kd,
        Method::F3crec,
        Method::F3crecWoCc,
        Method::F3crecWoArm,
        Method::F3crecWoSc,
        Method::F3crecWoItm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Reg => "reg",
            Method::Kd => "kd",
            Method::F3crec => "f3crec",
            Method::F3crecWoCc => "f3crec_wo_cc",
            Method::F3crecWoArm => "f3crec_wo_arm",
            Method::F3crecWoSc => "f3crec_wo_sc",
            Method::F3crecWoItm => "f3crec_wo_itm",
        }
    }

    /// What each side of the protocol runs under this method.
    pub fn mechanisms(self) -> (ClientMechanism, ServerMechanism) {
        match self {
            Method::Ft => (ClientMechanism::Plain, ServerMechanism::Plain),
            Method::Reg => (ClientMechanism::Regularize, ServerMechanism::Plain),
            Method::Kd => (ClientMechanism::FullReplayKd, ServerMechanism::Plain),
            Method::F3crec => {
                (ClientMechanism::AdaptiveReplayKd, ServerMechanism::ItemWiseTemporalMean)
            }
            Method::F3crecWoCc => {
                (ClientMechanism::Plain, ServerMechanism::ItemWiseTemporalMean)
            }
            Method::F3crecWoArm => {
                (ClientMechanism::FullReplayKd, ServerMechanism::ItemWiseTemporalMean)
            }
            Method::F3crecWoSc => {
                (ClientMechanism::AdaptiveReplayKd, ServerMechanism::Plain)
            }
            Method::F3crecWoItm => {
                (ClientMechanism::AdaptiveReplayKd, ServerMechanism::UniformTemporalMean)
            }
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected one of: ft, reg, kd, f3crec, f3crec_wo_cc, f3crec_wo_arm, f3crec_wo_sc, f3crec_wo_itm)"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedmf" => Ok(Backbone::FedMf),
            "fedncf1" => Ok(Backbone::FedNcf1),
            other => Err(format!("unknown backbone `{other}` (expected fedmf or fedncf1)")),
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::FedMf => "fedmf",
            Backbone::FedNcf1 => "fedncf1",
        })
    }
}

/// Everything a run depends on. Deserializes from a key-value (TOML) file with
/// per-field defaults; serialized verbatim into the run manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to the interaction log.
    pub dataset: PathBuf,
    /// Column layout of the log.
    pub schema: Schema,
    /// Name echoed into result rows (defaults to the dataset file stem).
    pub dataset_name: String,
    /// Fraction of the chronological stream forming the base block.
    pub base_fraction: f64,
    /// Number of incremental blocks after the base block.
    pub n_incremental: usize,
    /// Users and items below this interaction count are dropped up front.
    pub min_interactions: usize,
    /// Per-user in-block split proportions.
    pub split: SplitRatios,
    pub method: Method,
    pub backbone: Backbone,
    /// Embedding dimension d.
    pub dim: usize,
    /// Retained top-N list length.
    pub top_n: usize,
    /// Preference-shift sensitivity ε.
    pub eps: f64,
    /// Retention-weight ceiling β.
    pub beta: f64,
    /// Distillation-loss weight λ_KD.
    pub lambda_kd: f64,
    /// L2-pull weight μ for the Reg baseline.
    pub mu_reg: f64,
    /// SGD learning rate η.
    pub eta: f64,
    /// Multiply the item-row learning rate by |items| to counter the
    /// dilution from averaging uploads across all participants.
    pub scale_item_lr: bool,
    /// Local epochs per round E.
    pub epochs: usize,
    /// Federated rounds per block R.
    pub rounds: usize,
    /// Fraction of eligible clients sampled each round.
    pub client_fraction: f64,
    /// Negatives sampled per positive.
    pub negative_ratio: usize,
    pub batch_size: usize,
    /// Laplace scale for upload perturbation (0 = off).
    pub noise_lambda: f64,
    pub seed: u64,
    /// Hide validation positives from the evaluation ranking pool too.
    pub exclude_valid_in_eval: bool,
    /// Drop a user's own train positives from their retained top-N list.
    pub finalize_excludes_train: bool,
    /// Preference-shift ranking ignores the user's current train positives.
    pub rank_excludes_train: bool,
    /// Recompute shift/memory once per epoch instead of every batch.
    pub shift_per_epoch: bool,
    /// Keep the round with the best validation NDCG instead of the last one.
    pub select_best_valid: bool,
    /// Cutoff k for NDCG@k / Recall@k.
    pub eval_k: usize,
    /// Directory result files are written into.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/ml-100k/u.data"),
            schema: Schema::default(),
            dataset_name: String::new(),
            base_fraction: 0.6,
            n_incremental: 3,
            min_interactions: 10,
            split: SplitRatios::default(),
            method: Method::F3crec,
            backbone: Backbone::FedMf,
            dim: 32,
            top_n: 30,
            eps: 0.006,
            beta: 0.99,
            lambda_kd: 0.003,
            mu_reg: 0.1,
            eta: 0.87,
            scale_item_lr: true,
            epochs: 1,
            rounds: 40,
            client_fraction: 1.0,
            negative_ratio: 1,
            batch_size: 16,
            noise_lambda: 0.0,
            seed: 42,
            exclude_valid_in_eval: true,
            finalize_excludes_train: false,
            rank_excludes_train: false,
            shift_per_epoch: false,
            select_best_valid: false,
            eval_k: 20,
            out: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Rejects out-of-range knobs before any work happens.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |what: &str| Err(ExperimentError::InvalidConfig(what.to_string()));
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return bad("base_fraction must lie in (0, 1)");
        }
        if self.n_incremental == 0 {
            return bad("need at least one incremental block");
        }
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return bad("beta must lie in [0, 1)");
        }
        if self.eps < 0.0 {
            return bad("eps must be non-negative");
        }
        if self.lambda_kd < 0.0 || self.mu_reg < 0.0 || self.noise_lambda < 0.0 {
            return bad("loss weights and noise scale must be non-negative");
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("client_fraction must lie in (0, 1]");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if self.dim == 0
            || self.top_n == 0
            || self.rounds == 0
            || self.epochs == 0
            || self.batch_size == 0
            || self.eval_k == 0
        {
            return bad("dim, top_n, rounds, epochs, batch_size, and eval_k must be positive");
        }
        let s = self.split;
        if !(s.train > 0.0 && s.valid >= 0.0 && s.test > 0.0) {
            return bad("split ratios must be positive (valid may be zero)");
        }
        Ok(())
    }

    /// Result-row dataset label: explicit name if set, else the file stem.
    pub fn dataset_label(&self) -> String {
        if !self.dataset_name.is_empty() {
            return self.dataset_name.clone();
        }
        self.dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("frobnicate".parse::<Method>().is_err());
    }

    #[test]
    fn mechanism_matrix() {
        use ClientMechanism as C;
        use ServerMechanism as S;
        assert_eq!(Method::Ft.mechanisms(), (C::Plain, S::Plain));
        assert_eq!(Method::Reg.mechanisms(), (C::Regularize, S::Plain));
        assert_eq!(Method::Kd.mechanisms(), (C::FullReplayKd, S::Plain));
        assert_eq!(
            Method::F3crec.mechanisms(),
            (C::AdaptiveReplayKd, S::ItemWiseTemporalMean)
        );
        assert_eq!(Method::F3crecWoCc.mechanisms(), (C::Plain, S::ItemWiseTemporalMean));
        assert_eq!(
            Method::F3crecWoArm.mechanisms(),
            (C::FullReplayKd, S::ItemWiseTemporalMean)
        );
        assert_eq!(Method::F3crecWoSc.mechanisms(), (C::AdaptiveReplayKd, S::Plain));
        assert_eq!(
            Method::F3crecWoItm.mechanisms(),
            (C::AdaptiveReplayKd, S::UniformTemporalMean)
        );
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let mut c = ExperimentConfig::default();
        c.beta = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.client_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.eps = -0.1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.rounds = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dataset_label_falls_back_to_file_stem() {
        let c = ExperimentConfig::default();
        assert_eq!(c.dataset_label(), "u");
        let mut c = ExperimentConfig::default();
        c.dataset_name = "ml-100k".into();
        assert_eq!(c.dataset_label(), "ml-100k");
    }

    #[test]
    fn config_deserializes_from_partial_key_values() {
        let parsed: ExperimentConfig =
            serde_json::from_str(r#"{"method": "f3crec_wo_arm", "rounds": 7}"#).unwrap();
        assert_eq!(parsed.method, Method::F3crecWoArm);
        assert_eq!(parsed.rounds, 7);
        assert_eq!(parsed.dim, 32, "unset fields take defaults");
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"typo_field": 1}"#).is_err());
    }
}
