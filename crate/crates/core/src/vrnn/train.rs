use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, PassOptions, VrnnModel};
use crate::corpus::{EncodedCorpus, EncodedDialog, Vocab};
use crate::error::{Error, Result};
use crate::nn::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Training objective per dialog, averaged over the epoch.
    pub train_loss: f64,
    /// Validation objective per dialog.
    pub valid_loss: f64,
    pub mean_grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

/// Builds a fresh model for `vocab` and trains it.
pub fn train(train: &EncodedCorpus, valid: &EncodedCorpus, vocab: &Vocab, config: &ModelConfig) -> Result<(VrnnModel, TrainingLog)> {
    let model = VrnnModel::new(config.clone(), vocab.clone(), None)?;
    train_model(model, train, valid)
}

/// Trains with Adam and gradient-norm clipping, keeping the parameters with
/// the lowest validation objective.
pub fn train_model(mut model: VrnnModel, train: &EncodedCorpus, valid: &EncodedCorpus) -> Result<(VrnnModel, TrainingLog)> {
    if train.dialogs.is_empty() || valid.dialogs.is_empty() {
        return Err(Error::InvalidInput("training and validation splits must be non-empty".into()));
    }
    model.check_corpus(train)?;
    model.check_corpus(valid)?;
    let config = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut optimizer = Adam::new(config.learning_rate, model.params());
    let options = PassOptions::training(&config);
    let mut order: Vec<usize> = (0..train.dialogs.len()).collect();
    let mut log = TrainingLog { best_valid_loss: f64::INFINITY, ..TrainingLog::default() };
    let mut best = model.params().clone();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedDialog> = chunk.iter().map(|&i| &train.dialogs[i]).collect();
            let (terms, mut grads) = model.loss_and_gradients(&batch, &options, &mut rng)?;
            if !terms.total.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!(
                        "loss {} (reconstruction {}, kl {}, bow {}, bpr {})",
                        terms.total, terms.reconstruction_nll, terms.kl_term, terms.bow_nll, terms.bpr_kl
                    ),
                });
            }
            if !model.embeddings_trainable() {
                *grads.slot_mut(model.embedding_param()) = None;
            }
            norm_sum += grads.clip_norm(config.clip_norm);
            optimizer.update(model.params_mut(), &grads);
            loss_sum += terms.total;
            batches += 1;
        }
        let valid_loss = validation_loss(&model, valid)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.dialogs.len() as f64,
            valid_loss,
            mean_grad_norm: norm_sum / batches.max(1) as f64,
        });
        if valid_loss < log.best_valid_loss {
            log.best_valid_loss = valid_loss;
            log.best_epoch = epoch;
            best = model.params().clone();
        }
    }
    if config.epochs > 0 {
        *model.params_mut() = best;
    }
    Ok((model, log))
}

/// Training objective per dialog on `valid`, with dropout off and a fixed noise stream.
pub fn validation_loss(model: &VrnnModel, valid: &EncodedCorpus) -> Result<f64> {
    let config = model.config();
    let options = PassOptions { dropout: false, ..PassOptions::training(config) };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut total = 0.0;
    for chunk in valid.dialogs.chunks(config.batch_size) {
        let batch: Vec<&EncodedDialog> = chunk.iter().collect();
        total += model.loss_terms(&batch, &options, &mut rng)?.total;
    }
    let mean = total / valid.dialogs.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Diverged { epoch: 0, batch: 0, detail: format!("validation loss {mean}") });
    }
    Ok(mean)
}
