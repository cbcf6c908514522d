//! Parameter layout of a VRNN and the per-step building blocks shared by the
//! batched training pass and the single-exchange operations.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::config::{ModelConfig, Variant};
use crate::corpus::Vocab;
use crate::features::EmbeddingTable;
use crate::nn::{LstmCell, LstmState, Mlp, Mode};
use crate::tape::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub(crate) struct Network {
    pub embedding: ParamId,
    pub phi_x: Mlp,
    pub phi_z: Mlp,
    pub prior: Mlp,
    /// Learned `z_0` fed to the DD-VRNN prior.
    pub start: Option<ParamId>,
    pub encoder: Mlp,
    pub rnn: LstmCell,
    pub dec1: LstmCell,
    pub dec2: LstmCell,
    pub out1: Mlp,
    pub out2: Mlp,
    pub bow: Mlp,
    pub variant: Variant,
}

/// Result of running one decoder over a padded batch of target sequences.
pub(crate) struct DecoderRun {
    /// `m x 1`, the weighted sum of target log-probabilities per row.
    pub weighted_log_prob: Var,
    /// Final hidden state per row (the state after each row's last token).
    pub last: Var,
    /// One `m x 1` column of unweighted target log-probabilities per step.
    pub steps: Vec<Var>,
}

impl Network {
    pub fn build(config: &ModelConfig, embeddings: &EmbeddingTable, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let (n, h, p, e, v) = (config.n_states, config.rnn_hidden, config.phi_dim, embeddings.dim(), embeddings.vocab_size());
        let d1 = h + p;
        let d2 = 2 * d1;
        let embedding = store.add("embedding", embeddings.matrix.clone());
        let phi_x = Mlp::new(store, "phi_x", 2 * e, p, p, rng);
        let phi_z = Mlp::new(store, "phi_z", n, p, p, rng);
        let (prior, start) = match config.variant {
            Variant::Ddvrnn => {
                let prior = Mlp::with_zero_head(store, "prior", n, p, n, rng);
                (prior, Some(store.add("prior.start", Array2::zeros((1, n)))))
            }
            _ => (Mlp::with_zero_head(store, "prior", h, p, n, rng), None),
        };
        let encoder = Mlp::new(store, "encoder", h + p, p, n, rng);
        let rnn = LstmCell::new(store, "rnn", 2 * p, h, rng);
        let dec1 = LstmCell::new(store, "dec1", e, d1, rng);
        let dec2 = LstmCell::new(store, "dec2", e, d2, rng);
        let out1 = Mlp::with_zero_head(store, "out1", d1, p, v, rng);
        let out2 = Mlp::with_zero_head(store, "out2", d2, p, v, rng);
        let bow = Mlp::new(store, "bow", h + p, p, v, rng);
        Self { embedding, phi_x, phi_z, prior, start, encoder, rnn, dec1, dec2, out1, out2, bow, variant: config.variant }
    }

    /// Prior logits. D-VRNN reads `h_prev`; DD-VRNN reads `z_prev`.
    pub fn prior_logits<R: Rng>(&self, tape: &mut Tape, h_prev: Var, z_prev: Var, mode: &mut Mode<'_, R>) -> Var {
        let input = if self.variant == Variant::Ddvrnn { z_prev } else { h_prev };
        self.prior.forward(tape, input, mode)
    }

    /// The DD-VRNN start vector repeated over `rows` rows.
    pub fn start_rows(&self, tape: &mut Tape, rows: usize) -> Option<Var> {
        self.start.map(|id| {
            let s = tape.param(id);
            tape.gather_rows(s, vec![0; rows])
        })
    }

    pub fn posterior_logits<R: Rng>(&self, tape: &mut Tape, h_prev: Var, x: Var, mode: &mut Mode<'_, R>) -> Var {
        let input = tape.concat_cols(&[h_prev, x]);
        self.encoder.forward(tape, input, mode)
    }

    pub fn recurrence(&self, tape: &mut Tape, z_feat: Var, x: Var, state: LstmState, active: &Array1<f64>) -> LstmState {
        let input = tape.concat_cols(&[z_feat, x]);
        self.rnn.masked_step(tape, input, state, active)
    }

    /// Teacher-forced run of `dec1` or `dec2`: step `k` reads the embedding of
    /// token `k - 1` (`<bos>` at step 0) and scores token `k`. Named-entity
    /// targets are weighted by `ne_weight`; rows shorter than the batch maximum
    /// keep their state and contribute nothing once exhausted.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<R: Rng>(
        &self,
        tape: &mut Tape,
        second: bool,
        init: Var,
        targets: &[&[usize]],
        named_entity: &[&[bool]],
        ne_weight: f64,
        mode: &mut Mode<'_, R>,
    ) -> DecoderRun {
        let (cell, out) = if second { (&self.dec2, &self.out2) } else { (&self.dec1, &self.out1) };
        let m = targets.len();
        let steps_needed = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let c0 = tape.input(Array2::zeros((m, cell.hidden_size)));
        let mut state = LstmState { h: init, c: c0 };
        let embedding = tape.param(self.embedding);
        let mut total: Option<Var> = None;
        let mut steps = Vec::with_capacity(steps_needed);
        for k in 0..steps_needed {
            let prev: Vec<usize> = targets
                .iter()
                .map(|t| if k == 0 { Vocab::BOS_ID } else if k <= t.len() { t[k - 1] } else { Vocab::PAD_ID })
                .collect();
            let active = Array1::from_iter(targets.iter().map(|t| if k < t.len() { 1.0 } else { 0.0 }));
            let x = tape.gather_rows(embedding, prev);
            state = cell.masked_step(tape, x, state, &active);
            let logits = out.forward(tape, state.h, mode);
            let log_probs = tape.log_softmax(logits);
            let gold: Vec<usize> = targets.iter().map(|t| t.get(k).copied().unwrap_or(Vocab::PAD_ID)).collect();
            let picked = tape.pick(log_probs, gold);
            let weights = Array2::from_shape_fn((m, 1), |(i, _)| match targets[i].get(k) {
                None => 0.0,
                Some(_) if named_entity[i][k] => ne_weight,
                Some(_) => 1.0,
            });
            let w = tape.input(weights);
            let weighted = tape.mul(picked, w);
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted),
                None => weighted,
            });
            steps.push(picked);
        }
        let weighted_log_prob = total.unwrap_or_else(|| tape.input(Array2::zeros((m, 1))));
        DecoderRun { weighted_log_prob, last: state.h, steps }
    }

    /// Decodes user tokens with `dec1` from `[h_prev, z_feat]`, then system
    /// tokens with `dec2` from `[h_prev, z_feat, c_last]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_pair<R: Rng>(
        &self,
        tape: &mut Tape,
        h_prev: Var,
        z_feat: Var,
        user: (&[&[usize]], &[&[bool]]),
        system: (&[&[usize]], &[&[bool]]),
        ne_weight: f64,
        mode: &mut Mode<'_, R>,
    ) -> (DecoderRun, DecoderRun) {
        let init1 = tape.concat_cols(&[h_prev, z_feat]);
        let first = self.decode(tape, false, init1, user.0, user.1, ne_weight, mode);
        let init2 = tape.concat_cols(&[h_prev, z_feat, first.last]);
        let second = self.decode(tape, true, init2, system.0, system.1, ne_weight, mode);
        (first, second)
    }

    /// `m x 1` bag-of-words log-likelihood of each row's tokens.
    pub fn bow_log_prob<R: Rng>(&self, tape: &mut Tape, h_prev: Var, z_feat: Var, counts: Array2<f64>, mode: &mut Mode<'_, R>) -> Var {
        let input = tape.concat_cols(&[h_prev, z_feat]);
        let logits = self.bow.forward(tape, input, mode);
        let log_probs = tape.log_softmax(logits);
        let c = tape.input(counts);
        let weighted = tape.mul(log_probs, c);
        tape.sum_cols(weighted)
    }
}
