use approx::assert_abs_diff_eq;
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::corpus::{EncodedDialog, EncodedExchange};
use crate::structure::LatentAssignment;

fn exchange(user: &[usize], system: &[usize]) -> EncodedExchange {
    EncodedExchange { user: user.to_vec(), system: system.to_vec(), user_ne: vec![false; user.len()], system_ne: vec![false; system.len()] }
}

fn corpus(dialogs: Vec<Vec<EncodedExchange>>) -> EncodedCorpus {
    EncodedCorpus {
        vocab_hash: "test".into(),
        dialogs: dialogs.into_iter().enumerate().map(|(i, exchanges)| EncodedDialog { dialog_id: format!("d{i}"), exchanges }).collect(),
    }
}

fn random_dist<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_hmm(n: usize, vocab: usize, rng: &mut impl Rng) -> HmmModel {
    let rows = |r: usize, c: usize, rng: &mut dyn rand::RngCore| {
        let flat: Vec<f64> = (0..r).flat_map(|_| random_dist(c, &mut *rng)).collect();
        Array2::from_shape_vec((r, c), flat).unwrap()
    };
    HmmModel {
        n_states: n,
        initial: Array1::from(random_dist(n, rng)),
        transition: rows(n, n, rng),
        emission: rows(n, vocab, rng),
        vocab_hash: "test".into(),
    }
}

/// Sum over every state path, in probability space.
fn brute_force_log_likelihood(model: &HmmModel, dialog: &EncodedDialog) -> f64 {
    let n = model.n_states;
    let steps = dialog.exchanges.len();
    let emit = |s: usize, t: usize| dialog.exchanges[t].all_tokens().map(|w| model.emission[[s, w]]).product::<f64>();
    let mut total = 0.0;
    for code in 0..n.pow(steps as u32) {
        let path: Vec<usize> = (0..steps).map(|t| code / n.pow(t as u32) % n).collect();
        let mut p = model.initial[path[0]] * emit(path[0], 0);
        for t in 1..steps {
            p *= model.transition[[path[t - 1], path[t]]] * emit(path[t], t);
        }
        total += p;
    }
    total.ln()
}

fn random_dialog(vocab: usize, len: usize, rng: &mut impl Rng) -> Vec<EncodedExchange> {
    (0..len)
        .map(|_| {
            let u: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..vocab)).collect();
            let s: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..vocab)).collect();
            exchange(&u, &s)
        })
        .collect()
}

#[test]
fn forward_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let n = 1 + case % 3;
        let len = 1 + (case / 3) % 4;
        let model = random_hmm(n, 5, &mut rng);
        let c = corpus(vec![random_dialog(5, len, &mut rng)]);
        let forward = model.log_likelihood(&c.dialogs[0]).unwrap();
        let oracle = brute_force_log_likelihood(&model, &c.dialogs[0]);
        assert!((forward - oracle).abs() <= 1e-9, "case {case}: {forward} vs {oracle}");
    }
}

#[test]
fn posterior_marginals_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = random_hmm(2, 4, &mut rng);
    let c = corpus(vec![random_dialog(4, 3, &mut rng)]);
    let d = &c.dialogs[0];
    let (_, probs) = model.posterior_states(d).unwrap();
    // P(s_1 = 1 | x) by enumerating the other two states
    let emit = |s: usize, t: usize| d.exchanges[t].all_tokens().map(|w| model.emission[[s, w]]).product::<f64>();
    let mut joint = [0.0; 2];
    for a in 0..2 {
        for b in 0..2 {
            for e in 0..2 {
                let p = model.initial[a] * emit(a, 0) * model.transition[[a, b]] * emit(b, 1) * model.transition[[b, e]] * emit(e, 2);
                joint[b] += p;
            }
        }
    }
    assert_abs_diff_eq!(probs[1][1], joint[1] / (joint[0] + joint[1]), epsilon = 1e-12);
}

#[test]
fn single_state_reduces_to_unigram_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = corpus((0..6).map(|_| random_dialog(6, 3, &mut rng)).collect());
    let mut config = HmmConfig::new(1);
    config.smoothing = 0.0;
    let fit = train_hmm(&c, 6, &config).unwrap();
    let mut counts = [0.0; 6];
    for tok in c.dialogs.iter().flat_map(|d| &d.exchanges).flat_map(|e| e.all_tokens()) {
        counts[tok] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let unigram: f64 = counts.iter().filter(|&&k| k > 0.0).map(|&k| k * (k / total).ln()).sum();
    assert_abs_diff_eq!(*fit.log_likelihoods.last().unwrap(), unigram, epsilon = 1e-9);
}

#[test]
fn em_log_likelihood_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = corpus((0..20).map(|_| random_dialog(8, 4, &mut rng)).collect());
    for seed in 0..3 {
        let mut config = HmmConfig::new(3);
        config.seed = seed;
        config.tol = 0.0;
        config.max_iters = 40;
        let fit = train_hmm(&c, 8, &config).unwrap();
        assert!(fit.log_likelihoods.len() > 2);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.log_likelihoods);
        }
        fit.model.validate().unwrap();
    }
}

#[test]
fn deterministic_chain_has_zero_nll() {
    let model = HmmModel {
        n_states: 2,
        initial: array![1.0, 0.0],
        transition: array![[0.0, 1.0], [1.0, 0.0]],
        emission: array![[1.0, 0.0], [0.0, 1.0]],
        vocab_hash: "test".into(),
    };
    let c = corpus(vec![vec![exchange(&[0], &[0]), exchange(&[1], &[1, 1]), exchange(&[0], &[0])]]);
    assert_eq!(hmm_nll(&model, &c).unwrap(), vec![0.0]);
}

#[test]
fn uniform_emissions_cost_ln_v_per_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = random_hmm(3, 7, &mut rng);
    model.emission.fill(1.0 / 7.0);
    let c = corpus(vec![random_dialog(7, 4, &mut rng)]);
    let tokens = c.num_tokens() as f64;
    assert_abs_diff_eq!(hmm_nll(&model, &c).unwrap()[0], tokens * 7f64.ln(), epsilon = 1e-9);
}

#[test]
fn smoothing_keeps_unseen_tokens_finite() {
    let train = corpus(vec![vec![exchange(&[0, 1], &[1]), exchange(&[2], &[0])]]);
    let fit = train_hmm(&train, 4, &HmmConfig::new(2)).unwrap();
    fit.model.validate().unwrap();
    let test = corpus(vec![vec![exchange(&[3], &[3])]]);
    assert!(hmm_nll(&fit.model, &test).unwrap()[0].is_finite());
}

#[test]
fn hmm_rejects_bad_input() {
    assert!(train_hmm(&corpus(vec![]), 4, &HmmConfig::new(2)).is_err());
    assert!(train_hmm(&corpus(vec![vec![exchange(&[0], &[1])]]), 4, &HmmConfig::new(0)).is_err());
    assert!(train_hmm(&corpus(vec![vec![exchange(&[9], &[1])]]), 4, &HmmConfig::new(2)).is_err());
    let fit = train_hmm(&corpus(vec![vec![exchange(&[0], &[1])]]), 4, &HmmConfig::new(2)).unwrap();
    let mut other = corpus(vec![vec![exchange(&[0], &[1])]]);
    other.vocab_hash = "different".into();
    assert!(hmm_nll(&fit.model, &other).is_err());
}

#[test]
fn hmm_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = corpus((0..4).map(|_| random_dialog(5, 3, &mut rng)).collect());
    let fit = train_hmm(&c, 5, &HmmConfig::new(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hmm.json");
    fit.model.save_json(&path).unwrap();
    let back = HmmModel::load_json(&path).unwrap();
    assert_eq!(hmm_nll(&back, &c).unwrap(), hmm_nll(&fit.model, &c).unwrap());
}

fn blobs(rng: &mut impl Rng) -> (Array2<f64>, Vec<usize>) {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut pts = Array2::zeros((40, 2));
    let mut truth = Vec::new();
    for i in 0..40 {
        let blob = i % 2;
        let centre = if blob == 0 { [0.0, 0.0] } else { [15.0, 15.0] };
        pts[[i, 0]] = centre[0] + noise.sample(rng);
        pts[[i, 1]] = centre[1] + noise.sample(rng);
        truth.push(blob);
    }
    (pts, truth)
}

#[test]
fn kmeans_recovers_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (pts, truth) = blobs(&mut rng);
    for seed in 0..5 {
        let m = kmeans_cluster(&pts, 2, seed, 50).unwrap();
        let flip = m.assignments[0] != truth[0];
        for (a, t) in m.assignments.iter().zip(&truth) {
            assert_eq!(*a, if flip { 1 - t } else { *t });
        }
    }
}

#[test]
fn kmeans_saturates_with_one_cluster_per_point() {
    let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [5.0, 5.0]];
    let m = kmeans_cluster(&pts, 4, 0, 10).unwrap();
    let mut sorted = m.assignments.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3]);
    assert_eq!(m.inertia(&pts), 0.0);
}

#[test]
fn kmeans_inertia_never_increases_and_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = Array2::from_shape_fn((60, 3), |_| rng.gen_range(-1.0..1.0));
    let m = kmeans_cluster(&pts, 5, 9, 100).unwrap();
    for w in m.inertia_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{:?}", m.inertia_history);
    }
    assert_eq!(m, kmeans_cluster(&pts, 5, 9, 100).unwrap());
    for (i, &a) in m.assignments.iter().enumerate() {
        assert_eq!(m.nearest(pts.row(i)), a);
    }
}

#[test]
fn kmeans_fills_every_cluster_with_duplicate_points() {
    let pts = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [4.0, 0.0]];
    let m = kmeans_cluster(&pts, 3, 0, 10).unwrap();
    let mut counts = [0; 3];
    for &a in &m.assignments {
        counts[a] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    assert!(kmeans_cluster(&pts, 5, 0, 10).is_err());
    assert!(kmeans_cluster(&pts, 0, 0, 10).is_err());
}

#[test]
fn cosine_of_identical_vectors_is_one() {
    let asg = LatentAssignment::from_states(2, &[vec![0, 0, 1]]);
    let v = vec![vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]];
    assert_abs_diff_eq!(within_cluster_cosine(&asg, &v).unwrap(), 1.0, epsilon = 1e-12);
    let scaled = vec![vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![0.0, 1.0]]];
    assert_abs_diff_eq!(within_cluster_cosine(&asg, &scaled).unwrap(), 1.0, epsilon = 1e-12);
}

#[test]
fn cosine_of_orthogonal_pair_is_zero() {
    let asg = LatentAssignment::from_states(1, &[vec![0, 0]]);
    let v = vec![vec![vec![1.0, 0.0], vec![0.0, 2.0]]];
    assert_abs_diff_eq!(within_cluster_cosine(&asg, &v).unwrap(), 0.0, epsilon = 1e-12);
}

#[test]
fn cosine_weights_clusters_by_size() {
    // cluster 0: three identical vectors (1.0); cluster 1: an orthogonal pair (0.0)
    let asg = LatentAssignment::from_states(3, &[vec![0, 0, 0, 1, 1, 2]]);
    let v = vec![vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]];
    assert_abs_diff_eq!(within_cluster_cosine(&asg, &v).unwrap(), 3.0 / 5.0, epsilon = 1e-12);
    let only_singletons = LatentAssignment::from_states(2, &[vec![0, 1]]);
    assert!(within_cluster_cosine(&only_singletons, &[vec![vec![1.0], vec![1.0]]]).is_err());
}

#[test]
fn bow_vectors_by_mode() {
    let c = corpus(vec![vec![exchange(&[0], &[1]), exchange(&[2], &[2])]]);
    let cur = bow_vectors(&c, 3, CosineMode::CurrentUtterance);
    assert_eq!(cur[0], vec![vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]);
    let ctx = bow_vectors(&c, 3, CosineMode::Context);
    assert_eq!(ctx[0], vec![vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]]);
}
