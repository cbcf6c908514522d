//! Recurrent dialog policy: an LSTM over turn features with a masked softmax
//! over the system actions.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Adam, Linear, LstmCell, LstmState};
use crate::tape::{ParamStore, Tape, Var};

use super::env::{Action, FEATURE_DIM, NUM_ACTIONS, NUM_CATEGORIES};

pub const POLICY_HIDDEN: usize = 32;
const CLIP_NORM: f64 = 5.0;

/// Recurrent state carried between turns of one dialog.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    h: Array2<f64>,
    c: Array2<f64>,
}

/// One turn of policy input.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    pub features: Vec<f64>,
    pub mask: [bool; NUM_ACTIONS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub action: Action,
    /// Masked action distribution.
    pub probs: [f64; NUM_ACTIONS],
    /// `probs` summed within each action category.
    pub p_pred: [f64; NUM_CATEGORIES],
}

#[derive(Clone, Debug)]
pub struct Policy {
    store: ParamStore,
    cell: LstmCell,
    head: Linear,
    optimizer: Adam,
}

/// Sums action probabilities within each category.
pub fn category_distribution(probs: &[f64; NUM_ACTIONS]) -> [f64; NUM_CATEGORIES] {
    let mut out = [0.0; NUM_CATEGORIES];
    for a in Action::ALL {
        out[a.category()] += probs[a.id()];
    }
    out
}

impl Policy {
    pub fn new(learning_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "policy.lstm", FEATURE_DIM, POLICY_HIDDEN, &mut rng);
        let head = Linear::new(&mut store, "policy.head", POLICY_HIDDEN, NUM_ACTIONS, &mut rng);
        let optimizer = Adam::new(learning_rate, &store);
        Self { store, cell, head, optimizer }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer = Adam::new(lr, &self.store);
    }

    pub fn initial_state(&self) -> PolicyState {
        PolicyState { h: Array2::zeros((1, POLICY_HIDDEN)), c: Array2::zeros((1, POLICY_HIDDEN)) }
    }

    /// Masked action distribution for one turn, and the next recurrent state.
    pub fn probs(&self, state: &PolicyState, input: &PolicyInput) -> Result<([f64; NUM_ACTIONS], PolicyState)> {
        if !input.mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("every action is masked".into()));
        }
        let mut tape = Tape::new(&self.store);
        let x = tape.input(Array2::from_shape_vec((1, FEATURE_DIM), input.features.clone()).map_err(|e| Error::InvalidInput(e.to_string()))?);
        let h = tape.input(state.h.clone());
        let c = tape.input(state.c.clone());
        let next = self.cell.step(&mut tape, x, LstmState { h, c });
        let logits = self.head.forward(&mut tape, next.h);
        let mask = Array2::from_shape_fn((1, NUM_ACTIONS), |(_, j)| input.mask[j]);
        let logp = tape.masked_log_softmax(logits, mask);
        let mut probs = [0.0; NUM_ACTIONS];
        for (p, &l) in probs.iter_mut().zip(tape.value(logp).row(0)) {
            *p = l.exp();
        }
        Ok((probs, PolicyState { h: tape.value(next.h).clone(), c: tape.value(next.c).clone() }))
    }

    /// Chooses an action. With probability `epsilon` the action is uniform
    /// over the allowed ones; otherwise it is the most probable action when
    /// `greedy`, else a draw from the policy.
    pub fn step(&self, state: &mut PolicyState, input: &PolicyInput, epsilon: f64, greedy: bool, rng: &mut impl Rng) -> Result<StepOutput> {
        let (probs, next) = self.probs(state, input)?;
        *state = next;
        let allowed: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| input.mask[a]).collect();
        let id = if epsilon > 0.0 && rng.gen_bool(epsilon.min(1.0)) {
            *allowed.choose(rng).expect("at least one allowed action")
        } else if greedy {
            allowed.iter().copied().fold(allowed[0], |b, a| if probs[a] > probs[b] { a } else { b })
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = *allowed.last().expect("non-empty");
            for &a in &allowed {
                acc += probs[a];
                if u < acc {
                    pick = a;
                    break;
                }
            }
            pick
        };
        Ok(StepOutput { action: Action::from_id(id).expect("id in range"), probs, p_pred: category_distribution(&probs) })
    }

    /// `T x 1` log-probabilities of `actions` along one dialog.
    fn sequence_log_probs(&self, tape: &mut Tape, inputs: &[PolicyInput], actions: &[Action]) -> Var {
        let mut state = LstmState { h: tape.input(Array2::zeros((1, POLICY_HIDDEN))), c: tape.input(Array2::zeros((1, POLICY_HIDDEN))) };
        let mut hs = Vec::with_capacity(inputs.len());
        for input in inputs {
            let x = tape.input(Array2::from_shape_vec((1, FEATURE_DIM), input.features.clone()).expect("feature width"));
            state = self.cell.step(tape, x, state);
            hs.push(state.h);
        }
        let h = tape.concat_rows(&hs);
        let logits = self.head.forward(tape, h);
        let mask = Array2::from_shape_fn((inputs.len(), NUM_ACTIONS), |(t, j)| inputs[t].mask[j]);
        let logp = tape.masked_log_softmax(logits, mask);
        tape.pick(logp, actions.iter().map(|a| a.id()).collect())
    }

    /// Log-probability of each action of a dialog under the current policy.
    pub fn log_probs(&self, inputs: &[PolicyInput], actions: &[Action]) -> Vec<f64> {
        if inputs.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new(&self.store);
        let lp = self.sequence_log_probs(&mut tape, inputs, actions);
        tape.value(lp).column(0).to_vec()
    }

    /// One optimiser step on `-sum_t weight_t * log pi(a_t)` summed over
    /// dialogs and divided by `scale`. Returns the gradient norm before clipping.
    fn weighted_step(&mut self, dialogs: &[(&[PolicyInput], &[Action], Vec<f64>)], scale: f64) -> Result<f64> {
        let grads = {
            let mut tape = Tape::new(&self.store);
            let mut terms = Vec::new();
            for (inputs, actions, weights) in dialogs {
                if inputs.is_empty() {
                    continue;
                }
                let lp = self.sequence_log_probs(&mut tape, inputs, actions);
                let w = tape.input(Array2::from_shape_vec((weights.len(), 1), weights.clone()).expect("one weight per step"));
                let prod = tape.mul(lp, w);
                terms.push(tape.sum_all(prod));
            }
            if terms.is_empty() {
                return Ok(0.0);
            }
            let all = tape.concat_rows(&terms);
            let total = tape.sum_all(all);
            let loss = tape.scale(total, -1.0 / scale);
            tape.backward(loss)
        };
        let mut grads = grads;
        if !grads.all_finite() {
            return Err(Error::Diverged { epoch: 0, batch: 0, detail: "non-finite policy gradient".into() });
        }
        if grads.is_all_zero() {
            return Ok(0.0);
        }
        let norm = grads.clip_norm(CLIP_NORM);
        self.optimizer.update(&mut self.store, &grads);
        Ok(norm)
    }

    /// Policy-gradient step on one dialog with per-step advantages.
    pub fn reinforce_step(&mut self, inputs: &[PolicyInput], actions: &[Action], advantages: &[f64]) -> Result<f64> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("empty trajectory".into()));
        }
        self.weighted_step(&[(inputs, actions, advantages.to_vec())], 1.0)
    }

    /// Cross-entropy step towards `actions` on a batch of dialogs.
    pub fn supervised_step(&mut self, batch: &[(&[PolicyInput], &[Action])]) -> Result<f64> {
        let steps: usize = batch.iter().map(|(i, _)| i.len()).sum();
        let dialogs: Vec<_> = batch.iter().map(|(i, a)| (*i, *a, vec![1.0; i.len()])).collect();
        self.weighted_step(&dialogs, steps.max(1) as f64)
    }
}
