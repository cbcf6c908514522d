//! Word embeddings and the exchange feature: the concatenation of the mean
//! user-token embedding and the mean system-token embedding.

use std::io::BufRead;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExchange, Vocab};
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub matrix: Array2<f64>,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Uniform(-0.1, 0.1) rows; the padding row is zero.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new(-0.1, 0.1);
        let mut matrix = Array2::from_shape_fn((vocab_size, dim), |_| dist.sample(rng));
        matrix.row_mut(Vocab::PAD_ID).fill(0.0);
        Self { matrix, trainable: true }
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Overwrites rows of tokens found in a `token v1 v2 ...` text file.
    /// Returns how many vocabulary tokens were found.
    pub fn import_pretrained(&mut self, vocab: &Vocab, reader: impl BufRead) -> Result<usize> {
        let dim = self.dim();
        let mut found = 0;
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<embeddings>", e))?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::MalformedRecord { line: n + 1, message: e.to_string() })?;
            if values.len() != dim {
                return Err(Error::MalformedRecord { line: n + 1, message: format!("expected {dim} values, found {}", values.len()) });
            }
            if let Some(id) = vocab.get(token) {
                if id != Vocab::PAD_ID {
                    self.matrix.row_mut(id).assign(&Array1::from(values));
                    found += 1;
                }
            }
        }
        Ok(found)
    }

    pub fn import_pretrained_file(&mut self, vocab: &Vocab, path: &Path) -> Result<usize> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        self.import_pretrained(vocab, std::io::BufReader::new(file))
    }
}

/// Arithmetic mean of the embedding rows of `tokens`.
pub fn embed_utterance(tokens: &[usize], table: &EmbeddingTable) -> Result<Array1<f64>> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot embed an empty utterance; use the empty sentinel".into()));
    }
    let mut sum = Array1::zeros(table.dim());
    for &t in tokens {
        if t >= table.vocab_size() {
            return Err(Error::InvalidInput(format!("token id {t} outside embedding table of {} rows", table.vocab_size())));
        }
        sum += &table.matrix.row(t);
    }
    Ok(sum / tokens.len() as f64)
}

/// `[mean(user), mean(system)]`, of length `2 * dim`.
pub fn featurize_exchange(exchange: &EncodedExchange, table: &EmbeddingTable) -> Result<Array1<f64>> {
    let u = embed_utterance(&exchange.user, table)?;
    let s = embed_utterance(&exchange.system, table)?;
    Ok(concatenate(Axis(0), &[u.view(), s.view()]).expect("same rank"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn table(m: Array2<f64>) -> EmbeddingTable {
        EmbeddingTable { matrix: m, trainable: true }
    }

    fn exchange(user: Vec<usize>, system: Vec<usize>) -> EncodedExchange {
        let (un, sn) = (vec![false; user.len()], vec![false; system.len()]);
        EncodedExchange { user, system, user_ne: un, system_ne: sn }
    }

    #[test]
    fn mean_of_two_rows() {
        let t = table(array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(embed_utterance(&[1, 2], &t).unwrap(), array![0.5, 0.5]);
        assert_eq!(embed_utterance(&[2], &t).unwrap(), array![0.0, 1.0]);
        assert_eq!(embed_utterance(&[1; 40], &t).unwrap(), array![1.0, 0.0]);
        assert!(embed_utterance(&[7], &t).is_err());
    }

    #[test]
    fn feature_concatenates_and_swaps() {
        let t = table(array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let f = featurize_exchange(&exchange(vec![1], vec![2, 2]), &t).unwrap();
        assert_eq!(f, array![1.0, 1.0, 2.0, 2.0]);
        let g = featurize_exchange(&exchange(vec![2, 2], vec![1]), &t).unwrap();
        assert_eq!(g, array![2.0, 2.0, 1.0, 1.0]);
        let z = featurize_exchange(&exchange(vec![1, 2], vec![2]), &table(Array2::zeros((3, 5)))).unwrap();
        assert_eq!(z, Array1::<f64>::zeros(10));
    }

    #[test]
    fn random_table_has_zero_pad_row() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = EmbeddingTable::random(10, 4, &mut rng);
        assert!(t.matrix.row(Vocab::PAD_ID).iter().all(|&x| x == 0.0));
        assert!(t.matrix.iter().all(|&x| x.abs() <= 0.1));
    }

    proptest::proptest! {
        #[test]
        fn mean_is_order_free_and_length_is_fixed(tokens in proptest::collection::vec(1usize..6, 1..12), dim in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(dim as u64);
            let t = EmbeddingTable::random(6, dim, &mut rng);
            let mut rev = tokens.clone();
            rev.reverse();
            let a = embed_utterance(&tokens, &t).unwrap();
            let b = embed_utterance(&rev, &t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
            let f = featurize_exchange(&exchange(tokens.clone(), rev), &t).unwrap();
            proptest::prop_assert_eq!(f.len(), 2 * dim);
        }
    }
}
