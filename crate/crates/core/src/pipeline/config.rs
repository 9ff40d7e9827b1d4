use crate::error::{config_err, Result};
use crate::heads::FusionConfig;
use crate::textenc::{EncoderConfig, MatrixKind};
use serde::{Deserialize, Serialize};

/// Hyperparameters shared by source pretraining, target training and
/// evaluation. Deserialization fills absent keys from the desk profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the contrastive term, in `[0, 1]`.
    pub lambda: f64,
    /// Triplet margin.
    pub margin: f64,
    /// History contents sampled per entity.
    pub k: usize,
    pub rank: usize,
    /// Drop probability used when merging source adapters.
    pub p: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Applied to attention probabilities and the hidden layer of each head.
    pub dropout: f64,
    /// Forces the contrastive weight to zero.
    pub no_cl: bool,
    pub eval_repeats: usize,
    pub attach: Vec<MatrixKind>,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small, fast settings for CPU tests.
    pub fn desk() -> Self {
        Self {
            lambda: 0.3,
            margin: 1.0,
            k: 3,
            rank: 8,
            p: 0.9,
            lr: 1e-3,
            batch_size: 16,
            epochs: 30,
            max_steps: None,
            patience: 5,
            seed: 0,
            dropout: 0.1,
            no_cl: false,
            eval_repeats: 5,
            attach: MatrixKind::ALL.to_vec(),
            fusion: FusionConfig::default(),
            encoder: EncoderConfig::default(),
            min_freq: 1,
        }
    }

    /// Optimizer settings at the published scale.
    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 4,
            dropout: 0.5,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(config_err(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(config_err(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.margin > 0.0) {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if self.k == 0 || self.rank == 0 || self.batch_size == 0 || self.eval_repeats == 0 || self.epochs == 0 {
            return fail("k, rank, batch_size, epochs and eval_repeats must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.p) {
            return fail(format!("drop probability {} outside [0, 1)", self.p));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.attach.is_empty() {
            return fail("attach list is empty".into());
        }
        if self.min_freq == 0 {
            return fail("min_freq must be at least 1".into());
        }
        self.encoder.validate()
    }

    /// The contrastive weight actually used in the loss.
    pub fn effective_lambda(&self) -> f64 {
        if self.no_cl {
            0.0
        } else {
            self.lambda
        }
    }
}
