use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three discrete-latent VRNN variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Prior conditioned on the state-level context `h_{t-1}`.
    Dvrnn,
    /// Prior conditioned directly on the previous latent state `z_{t-1}`.
    Ddvrnn,
    /// D-VRNN with up-weighted named-entity tokens in the reconstruction loss.
    NeDvrnn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dvrnn, Variant::Ddvrnn, Variant::NeDvrnn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dvrnn => "dvrnn",
            Variant::Ddvrnn => "ddvrnn",
            Variant::NeDvrnn => "ne_dvrnn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Unknown {
            kind: "variant",
            name: s.to_string(),
            known: Variant::ALL.map(Variant::name).join(", "),
        })
    }
}

/// Architecture and optimisation settings of one VRNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_states: usize,
    /// Width of the state-level LSTM.
    pub rnn_hidden: usize,
    pub embed_dim: usize,
    /// Hidden width of every feature network, and output width of `phi_x` and `phi_z`.
    pub phi_dim: usize,
    pub dropout: f64,
    pub bow_lambda: f64,
    pub gumbel_temperature: f64,
    pub gumbel_hard: bool,
    /// Replace the per-sample KL with the batch-aggregate KL.
    pub use_bpr: bool,
    pub ne_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub max_utterance_len: usize,
    pub max_dialog_len: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_states: usize) -> Self {
        Self {
            variant,
            n_states,
            rnn_hidden: 200,
            embed_dim: crate::features::DEFAULT_EMBED_DIM,
            phi_dim: 100,
            dropout: 0.4,
            bow_lambda: 0.1,
            gumbel_temperature: 0.6,
            gumbel_hard: true,
            use_bpr: true,
            ne_weight: if variant == Variant::NeDvrnn { 2.0 } else { 1.0 },
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            clip_norm: 5.0,
            seed: 0,
            max_utterance_len: crate::corpus::MAX_UTTERANCE_LEN,
            max_dialog_len: crate::corpus::MAX_DIALOG_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.n_states < 2 {
            return fail("n_states", "must be at least 2");
        }
        for (field, v) in [("rnn_hidden", self.rnn_hidden), ("embed_dim", self.embed_dim), ("phi_dim", self.phi_dim), ("batch_size", self.batch_size)] {
            if v == 0 {
                return fail(field, "must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", "must lie in [0, 1)");
        }
        if !(self.bow_lambda >= 0.0) {
            return fail("bow_lambda", "must be non-negative");
        }
        if !(self.gumbel_temperature > 0.0) {
            return fail("gumbel_temperature", "must be positive");
        }
        if !(self.ne_weight >= 1.0) {
            return fail("ne_weight", "must be at least 1");
        }
        if self.variant != Variant::NeDvrnn && self.ne_weight != 1.0 {
            return fail("ne_weight", "only ne_dvrnn weights named entities");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate", "must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm", "must be positive");
        }
        Ok(())
    }
}
