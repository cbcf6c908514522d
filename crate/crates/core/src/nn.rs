//! Layers and optimizers built on the [`tape`](crate::tape).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, ParamId, ParamStore, Tape, Var};

/// Uniform Glorot-style initialisation.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Per-pass settings shared by every layer: dropout is active only while training.
pub struct Mode<'r, R: Rng> {
    pub training: bool,
    pub dropout: f64,
    pub rng: &'r mut R,
}

/// Multiplies by an inverted-dropout mask when training.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, mode: &mut Mode<'_, R>) -> Var {
    if !mode.training || mode.dropout <= 0.0 {
        return x;
    }
    let keep = 1.0 - mode.dropout;
    let dim = tape.value(x).dim();
    let mask = Array2::from_shape_fn(dim, |_| if mode.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
    let m = tape.input(mask);
    tape.mul(x, m)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(input, output, rng));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, output)));
        Self { weight, bias }
    }

    /// A layer whose weights start at exactly zero, so its outputs are constant.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Array2::zeros((input, output)));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, output)));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

/// One tanh hidden layer with dropout, then a linear output.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, output, rng),
        }
    }

    /// Same as [`Mlp::new`] but with a zero-initialised output layer.
    pub fn with_zero_head(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, rng),
            output: Linear::zeros(store, &format!("{name}.output"), hidden, output),
        }
    }

    pub fn forward<R: Rng>(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_, R>) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.tanh(h);
        let h = dropout(tape, h, mode);
        self.output.forward(tape, h)
    }
}

/// LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub hidden_size: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input_weight = store.add(format!("{name}.w_ih"), glorot(input, 4 * hidden, rng));
        let hidden_weight = store.add(format!("{name}.w_hh"), glorot(hidden, 4 * hidden, rng));
        // forget-gate bias starts at 1
        let mut b = Array2::zeros((1, 4 * hidden));
        b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let bias = store.add(format!("{name}.bias"), b);
        Self { input_weight, hidden_weight, bias, hidden_size: hidden }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: LstmState) -> LstmState {
        let n = self.hidden_size;
        let wih = tape.param(self.input_weight);
        let whh = tape.param(self.hidden_weight);
        let b = tape.param(self.bias);
        let xi = tape.matmul(x, wih);
        let hh = tape.matmul(state.h, whh);
        let gates = tape.add(xi, hh);
        let gates = tape.add_bias(gates, b);
        let i = tape.slice_cols(gates, 0, n);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, n, 2 * n);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * n, 3 * n);
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * n, 4 * n);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c);
        let write = tape.mul(i, g);
        let c = tape.add(keep, write);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        LstmState { h, c }
    }

    /// Like [`LstmCell::step`] but rows whose `active` entry is 0 keep their previous state.
    pub fn masked_step(&self, tape: &mut Tape, x: Var, state: LstmState, active: &Array1<f64>) -> LstmState {
        let next = self.step(tape, x, state);
        if active.iter().all(|&a| a == 1.0) {
            return next;
        }
        LstmState {
            h: tape.blend(next.h, state.h, active.clone()),
            c: tape.blend(next.c, state.c, active.clone()),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Option<Array2<f64>>>,
    second: Vec<Option<Array2<f64>>>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.second[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (self.first[id.0].as_ref().unwrap(), self.second[id.0].as_ref().unwrap());
            let lr = self.learning_rate;
            let eps = self.epsilon;
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Plain gradient descent step: `p -= lr * g`.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, learning_rate: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        if let Some(g) = grads.get(id) {
            store.get_mut(id).scaled_add(-learning_rate, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_masked_rows_keep_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "cell", 2, 3, &mut rng);
        let mut t = Tape::new(&store);
        let x = t.input(Array2::from_elem((2, 2), 0.5));
        let h = t.input(Array2::from_elem((2, 3), 0.1));
        let c = t.input(Array2::from_elem((2, 3), -0.2));
        let s = cell.masked_step(&mut t, x, LstmState { h, c }, &ndarray::array![1.0, 0.0]);
        assert_eq!(t.value(s.h).row(1), Array1::from_elem(3, 0.1));
        assert_ne!(t.value(s.h).row(0), Array1::from_elem(3, 0.1));
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(0.1, &store);
        for _ in 0..500 {
            let grads = {
                let mut t = Tape::new(&store);
                let x = t.param(id);
                let sq = t.mul(x, x);
                let r = t.sum_all(sq);
                t.backward(r)
            };
            opt.update(&mut store, &grads);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(Array2::ones((4, 4)));
        let mut mode = Mode { training: false, dropout: 0.4, rng: &mut rng };
        let y = dropout(&mut t, x, &mut mode);
        assert_eq!(x, y);
    }
}
