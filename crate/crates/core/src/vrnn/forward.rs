//! The batched forward pass over a set of dialogs.
//!
//! Exchanges are flattened dialog-major into `m` rows. The state-level
//! recurrence runs over `t` with one row per dialog; its per-step outputs are
//! then regathered into exchange rows so the decoders, the bag-of-words head
//! and the KL terms all work on `m x _` matrices.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use super::config::ModelConfig;
use super::network::Network;
use crate::corpus::EncodedDialog;
use crate::nn::{LstmState, Mode};
use crate::tape::{Tape, Var};

/// How `z_t` is produced during a pass.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentMode {
    /// One Gumbel-Softmax draw per step; `hard` applies the straight-through one-hot.
    Sample { hard: bool },
    /// One-hot argmax of the posterior, no noise.
    Argmax,
    /// Given state sequences, one per dialog in the batch.
    Forced(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassOptions {
    pub dropout: bool,
    pub latent: LatentMode,
    pub ne_weight: f64,
}

impl PassOptions {
    /// Settings of a training step.
    pub fn training(config: &ModelConfig) -> Self {
        Self { dropout: true, latent: LatentMode::Sample { hard: config.gumbel_hard }, ne_weight: config.ne_weight }
    }

    /// Sampled latents, no dropout, unweighted reconstruction.
    pub fn evaluation(config: &ModelConfig) -> Self {
        Self { dropout: false, latent: LatentMode::Sample { hard: config.gumbel_hard }, ne_weight: 1.0 }
    }

    pub fn assignment() -> Self {
        Self { dropout: false, latent: LatentMode::Argmax, ne_weight: 1.0 }
    }
}

/// Scalar values of the loss components for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub reconstruction_nll: f64,
    /// Sum over exchanges of `KL(q(z_t) || p(z_t))`.
    pub kl_term: f64,
    pub bow_nll: f64,
    /// `KL(mean q || mean p)` over the batch.
    pub bpr_kl: f64,
    pub total: f64,
}

/// Latent-side tensors, one row per exchange.
pub(crate) struct Encoded {
    pub rows: Vec<(usize, usize)>,
    pub h_prev: Var,
    pub z_feat: Var,
    pub log_q: Var,
    pub log_p: Var,
}

pub(crate) struct Scored {
    pub enc: Encoded,
    /// `m x 1` weighted reconstruction NLL.
    pub recon: Var,
    /// `m x 1` per-exchange KL.
    pub kl: Var,
    /// `m x 1` bag-of-words NLL.
    pub bow: Var,
    pub bpr: Var,
}

fn one_hot_rows(indices: &[usize], n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), n));
    for (r, &i) in indices.iter().enumerate() {
        out[[r, i]] = 1.0;
    }
    out
}

pub(crate) fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the state-level recurrence and returns per-exchange latent tensors.
pub(crate) fn encode<R: Rng>(
    net: &Network,
    config: &ModelConfig,
    tape: &mut Tape,
    dialogs: &[&EncodedDialog],
    latent: &LatentMode,
    mode: &mut Mode<'_, R>,
) -> Encoded {
    let b = dialogs.len();
    let n = config.n_states;
    let horizon = dialogs.iter().map(|d| d.exchanges.len()).max().unwrap_or(0);
    if let LatentMode::Forced(states) = latent {
        assert_eq!(states.len(), b, "one forced state sequence per dialog");
    }

    let mut rows = Vec::new();
    let mut row_of = vec![Vec::new(); b];
    for (i, d) in dialogs.iter().enumerate() {
        for t in 0..d.exchanges.len() {
            row_of[i].push(rows.len());
            rows.push((i, t));
        }
    }

    // [mean user embedding, mean system embedding] for every exchange
    let mut ids = Vec::new();
    let mut groups = Vec::with_capacity(2 * rows.len());
    for side in 0..2 {
        for &(i, t) in &rows {
            let ex = &dialogs[i].exchanges[t];
            let tokens = if side == 0 { &ex.user } else { &ex.system };
            groups.push((ids.len()..ids.len() + tokens.len()).collect());
            ids.extend_from_slice(tokens);
        }
    }
    let m = rows.len();
    let embedding = tape.param(net.embedding);
    let token_rows = tape.gather_rows(embedding, ids);
    let means = tape.segment_mean(token_rows, groups);
    let user_mean = tape.gather_rows(means, (0..m).collect());
    let system_mean = tape.gather_rows(means, (m..2 * m).collect());
    let raw = tape.concat_cols(&[user_mean, system_mean]);
    let x = net.phi_x.forward(tape, raw, mode);

    let h0 = tape.input(Array2::zeros((b, config.rnn_hidden)));
    let c0 = tape.input(Array2::zeros((b, config.rnn_hidden)));
    let mut state = LstmState { h: h0, c: c0 };
    let mut z_prev = net.start_rows(tape, b).unwrap_or(h0);
    let (mut hs, mut zfs, mut lqs, mut lps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 0..horizon {
        let idx: Vec<usize> = (0..b).map(|i| row_of[i].get(t).copied().unwrap_or(0)).collect();
        let active = Array1::from_iter((0..b).map(|i| if t < row_of[i].len() { 1.0 } else { 0.0 }));
        let x_t = tape.gather_rows(x, idx);
        let h_prev = state.h;
        let prior = net.prior_logits(tape, h_prev, z_prev, mode);
        let log_p = tape.log_softmax(prior);
        let post = net.posterior_logits(tape, h_prev, x_t, mode);
        let log_q = tape.log_softmax(post);
        let z = match latent {
            LatentMode::Sample { hard } => {
                let gumbel = Gumbel::new(0.0, 1.0).expect("valid parameters");
                let noise = Array2::from_shape_fn((b, n), |_| gumbel.sample(mode.rng));
                let g = tape.input(noise);
                let perturbed = tape.add(log_q, g);
                let scaled = tape.scale(perturbed, 1.0 / config.gumbel_temperature);
                let y = tape.softmax(scaled);
                if *hard {
                    let picks: Vec<usize> = tape.value(y).rows().into_iter().map(argmax).collect();
                    tape.straight_through(y, one_hot_rows(&picks, n))
                } else {
                    y
                }
            }
            LatentMode::Argmax => {
                let picks: Vec<usize> = tape.value(log_q).rows().into_iter().map(argmax).collect();
                tape.input(one_hot_rows(&picks, n))
            }
            LatentMode::Forced(states) => {
                let picks: Vec<usize> = (0..b).map(|i| states[i].get(t).copied().unwrap_or(0)).collect();
                tape.input(one_hot_rows(&picks, n))
            }
        };
        let z_feat = net.phi_z.forward(tape, z, mode);
        hs.push(h_prev);
        zfs.push(z_feat);
        lqs.push(log_q);
        lps.push(log_p);
        state = net.recurrence(tape, z_feat, x_t, state, &active);
        z_prev = z;
    }

    let select: Vec<usize> = rows.iter().map(|&(i, t)| t * b + i).collect();
    let mut regather = |parts: &[Var]| {
        let all = tape.concat_rows(parts);
        tape.gather_rows(all, select.clone())
    };
    let h_prev = regather(&hs);
    let z_feat = regather(&zfs);
    let log_q = regather(&lqs);
    let log_p = regather(&lps);
    Encoded { rows, h_prev, z_feat, log_q, log_p }
}

/// Full pass: latents, both decoders, bag-of-words head and KL terms.
pub(crate) fn score<R: Rng>(
    net: &Network,
    config: &ModelConfig,
    tape: &mut Tape,
    dialogs: &[&EncodedDialog],
    options: &PassOptions,
    mode: &mut Mode<'_, R>,
) -> Scored {
    let enc = encode(net, config, tape, dialogs, &options.latent, mode);
    let exchanges: Vec<_> = enc.rows.iter().map(|&(i, t)| &dialogs[i].exchanges[t]).collect();

    let q = tape.exp(enc.log_q);
    let gap = tape.sub(enc.log_q, enc.log_p);
    let kl_parts = tape.mul(q, gap);
    let kl = tape.sum_cols(kl_parts);

    let p = tape.exp(enc.log_p);
    let q_bar = tape.mean_rows(q);
    let p_bar = tape.mean_rows(p);
    let log_q_bar = tape.log(q_bar);
    let log_p_bar = tape.log(p_bar);
    let bar_gap = tape.sub(log_q_bar, log_p_bar);
    let bar_parts = tape.mul(q_bar, bar_gap);
    let bpr = tape.sum_all(bar_parts);

    let user: Vec<&[usize]> = exchanges.iter().map(|e| e.user.as_slice()).collect();
    let user_ne: Vec<&[bool]> = exchanges.iter().map(|e| e.user_ne.as_slice()).collect();
    let system: Vec<&[usize]> = exchanges.iter().map(|e| e.system.as_slice()).collect();
    let system_ne: Vec<&[bool]> = exchanges.iter().map(|e| e.system_ne.as_slice()).collect();
    let (first, second) =
        net.decode_pair(tape, enc.h_prev, enc.z_feat, (&user, &user_ne), (&system, &system_ne), options.ne_weight, mode);
    let log_lik = tape.add(first.weighted_log_prob, second.weighted_log_prob);
    let recon = tape.scale(log_lik, -1.0);

    let embedding = tape.param(net.embedding);
    let vocab_size = tape.value(embedding).nrows();
    let mut counts = Array2::zeros((exchanges.len(), vocab_size));
    for (r, e) in exchanges.iter().enumerate() {
        for tok in e.all_tokens() {
            counts[[r, tok]] += 1.0;
        }
    }
    let bow_ll = net.bow_log_prob(tape, enc.h_prev, enc.z_feat, counts, mode);
    let bow = tape.scale(bow_ll, -1.0);

    Scored { enc, recon, kl, bow, bpr }
}

/// Combines the scored rows into the objective of one batch:
/// `recon + (m * bpr or sum KL) + lambda * bow`.
pub(crate) fn objective(config: &ModelConfig, tape: &mut Tape, s: &Scored) -> (Var, LossTerms) {
    let m = s.enc.rows.len() as f64;
    let recon = tape.sum_all(s.recon);
    let kl = tape.sum_all(s.kl);
    let bow = tape.sum_all(s.bow);
    let latent = if config.use_bpr { tape.scale(s.bpr, m) } else { kl };
    let weighted_bow = tape.scale(bow, config.bow_lambda);
    let partial = tape.add(recon, latent);
    let total = tape.add(partial, weighted_bow);
    let terms = LossTerms {
        reconstruction_nll: tape.scalar(recon),
        kl_term: tape.scalar(kl),
        bow_nll: tape.scalar(bow),
        bpr_kl: tape.scalar(s.bpr),
        total: tape.scalar(total),
    };
    (total, terms)
}
