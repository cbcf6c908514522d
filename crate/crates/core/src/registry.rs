//! Runtime registry of structure-learning models. Every model kind sits
//! behind [`StructureModel`] and is trained or loaded by name through a
//! [`ModelTrainer`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::{hmm_nll, train_hmm, HmmConfig, HmmModel, KmeansStructure};
use crate::checkpoint::{self, Manifest};
use crate::corpus::{EncodedCorpus, Vocab};
use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, DEFAULT_EMBED_DIM};
use crate::structure::{estimate_transition_table_frequency, LatentAssignment, TransitionTable};
use crate::vrnn::{self, ModelConfig, Variant, VrnnModel};

const HMM_FILE: &str = "hmm.json";
const KMEANS_FILE: &str = "kmeans.json";

/// A trained model that assigns latent states to exchanges.
pub trait StructureModel: Send + Sync {
    /// Registry name of the model kind.
    fn kind(&self) -> &str;
    fn n_states(&self) -> usize;
    fn vocab(&self) -> &Vocab;
    fn assign_states(&self, corpus: &EncodedCorpus) -> Result<LatentAssignment>;
    /// Per-dialog negative log-likelihood, or its variational bound.
    fn dialog_nll(&self, corpus: &EncodedCorpus, num_samples: usize, seed: u64) -> Result<Vec<f64>>;
    /// Transition table over latent states; `corpus` supplies occupancy and,
    /// for frequency-based kinds, the transitions themselves.
    fn transition_table(&self, corpus: &EncodedCorpus) -> Result<TransitionTable> {
        let assignment = self.assign_states(corpus)?;
        estimate_transition_table_frequency(&assignment, self.n_states())
    }
    fn save(&self, dir: &Path, split_seed: Option<u64>) -> Result<()>;
}

/// Data handed to a trainer.
#[derive(Clone, Copy)]
pub struct TrainingData<'a> {
    pub train: &'a EncodedCorpus,
    pub valid: &'a EncodedCorpus,
    pub vocab: &'a Vocab,
    /// Replaces the random word vectors where the model uses embeddings.
    pub embeddings: Option<&'a EmbeddingTable>,
}

/// A freshly trained model and its training history.
pub struct Trained {
    pub model: Box<dyn StructureModel>,
    /// Per-epoch or per-iteration progress, in a model-specific shape.
    pub log: Value,
}

pub trait ModelTrainer: Send + Sync {
    fn name(&self) -> &'static str;
    /// Complete default configuration for `n_states` states, as a JSON object.
    fn default_config(&self, n_states: usize) -> Value;
    fn train(&self, data: TrainingData<'_>, config: &Value) -> Result<Trained>;
    fn load(&self, dir: &Path) -> Result<Box<dyn StructureModel>>;
}

/// Applies `overrides` on top of `defaults`. Keys absent from the defaults
/// are rejected with the list of accepted ones.
pub fn overlay_config<T: Serialize + DeserializeOwned>(defaults: &T, overrides: &Map<String, Value>) -> Result<T> {
    let mut base = match serde_json::to_value(defaults)? {
        Value::Object(m) => m,
        _ => return Err(Error::Config("configuration must be a JSON object".into())),
    };
    for (key, value) in overrides {
        match base.get_mut(key) {
            Some(slot) => *slot = value.clone(),
            None => {
                let known: Vec<&str> = base.keys().map(String::as_str).collect();
                return Err(Error::Config(format!("unknown key `{key}` (accepted: {})", known.join(", "))));
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(e.to_string()))
}

fn as_object(config: &Value) -> Result<&Map<String, Value>> {
    config.as_object().ok_or_else(|| Error::Config("configuration must be a JSON object".into()))
}

impl StructureModel for VrnnModel {
    fn kind(&self) -> &str {
        self.variant().name()
    }

    fn n_states(&self) -> usize {
        VrnnModel::n_states(self)
    }

    fn vocab(&self) -> &Vocab {
        VrnnModel::vocab(self)
    }

    fn assign_states(&self, corpus: &EncodedCorpus) -> Result<LatentAssignment> {
        VrnnModel::assign_states(self, corpus)
    }

    fn dialog_nll(&self, corpus: &EncodedCorpus, num_samples: usize, seed: u64) -> Result<Vec<f64>> {
        VrnnModel::dialog_nll(self, corpus, num_samples, seed)
    }

    /// Prior readout for DD-VRNN, frequency counts otherwise.
    fn transition_table(&self, corpus: &EncodedCorpus) -> Result<TransitionTable> {
        let assignment = VrnnModel::assign_states(self, corpus)?;
        let table = estimate_transition_table_frequency(&assignment, VrnnModel::n_states(self))?;
        match self.variant() {
            Variant::Ddvrnn => self.read_transition_table(table.occupancy),
            _ => Ok(table),
        }
    }

    fn save(&self, dir: &Path, split_seed: Option<u64>) -> Result<()> {
        VrnnModel::save(self, dir, split_seed)
    }
}

struct VrnnTrainer(Variant);

impl ModelTrainer for VrnnTrainer {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn default_config(&self, n_states: usize) -> Value {
        serde_json::to_value(ModelConfig::new(self.0, n_states)).expect("config serialises")
    }

    fn train(&self, data: TrainingData<'_>, config: &Value) -> Result<Trained> {
        let config: ModelConfig = serde_json::from_value(config.clone()).map_err(|e| Error::Config(e.to_string()))?;
        if config.variant != self.0 {
            return Err(Error::VariantMismatch { expected: self.0.name().into(), found: config.variant.name().into() });
        }
        let model = VrnnModel::new(config, data.vocab.clone(), data.embeddings.cloned())?;
        let (model, log) = vrnn::train_model(model, data.train, data.valid)?;
        Ok(Trained { model: Box::new(model), log: serde_json::to_value(log)? })
    }

    fn load(&self, dir: &Path) -> Result<Box<dyn StructureModel>> {
        Ok(Box::new(VrnnModel::load(dir)?))
    }
}

/// An HMM together with its vocabulary.
pub struct HmmStructure {
    pub model: HmmModel,
    pub vocab: Vocab,
    pub config: HmmConfig,
}

impl StructureModel for HmmStructure {
    fn kind(&self) -> &str {
        "hmm"
    }

    fn n_states(&self) -> usize {
        self.model.n_states
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn assign_states(&self, corpus: &EncodedCorpus) -> Result<LatentAssignment> {
        corpus.check_vocab(&self.model.vocab_hash)?;
        let dialogs = corpus
            .dialogs
            .iter()
            .map(|d| {
                let (states, posteriors) = self.model.posterior_states(d)?;
                Ok(crate::structure::DialogAssignment { dialog_id: d.dialog_id.clone(), states, posteriors })
            })
            .collect::<Result<_>>()?;
        Ok(LatentAssignment { n_states: self.model.n_states, dialogs })
    }

    fn dialog_nll(&self, corpus: &EncodedCorpus, _num_samples: usize, _seed: u64) -> Result<Vec<f64>> {
        hmm_nll(&self.model, corpus)
    }

    fn save(&self, dir: &Path, split_seed: Option<u64>) -> Result<()> {
        let manifest = Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            model: "hmm".into(),
            n_states: self.model.n_states,
            vocab_hash: self.model.vocab_hash.clone(),
            num_parameters: self.model.initial.len() + self.model.transition.len() + self.model.emission.len(),
            config: serde_json::to_value(&self.config)?,
            split_seed,
        };
        checkpoint::write_common(dir, &manifest, &self.vocab)?;
        self.model.save_json(&dir.join(HMM_FILE))
    }
}

struct HmmTrainer;

impl ModelTrainer for HmmTrainer {
    fn name(&self) -> &'static str {
        "hmm"
    }

    fn default_config(&self, n_states: usize) -> Value {
        serde_json::to_value(HmmConfig::new(n_states)).expect("config serialises")
    }

    fn train(&self, data: TrainingData<'_>, config: &Value) -> Result<Trained> {
        let config: HmmConfig = overlay_config(&HmmConfig::new(1), as_object(config)?)?;
        let fit = train_hmm(data.train, data.vocab.len(), &config)?;
        let log = serde_json::json!({ "log_likelihoods": fit.log_likelihoods });
        Ok(Trained { model: Box::new(HmmStructure { model: fit.model, vocab: data.vocab.clone(), config }), log })
    }

    fn load(&self, dir: &Path) -> Result<Box<dyn StructureModel>> {
        let manifest = checkpoint::read_manifest(dir)?;
        let vocab = checkpoint::read_vocab(dir, &manifest)?;
        let config: HmmConfig = serde_json::from_value(manifest.config)?;
        let model = HmmModel::load_json(&dir.join(HMM_FILE))?;
        if model.vocab_hash != manifest.vocab_hash || model.vocab_size() != vocab.len() {
            return Err(Error::Config(format!("{}: HMM does not match its vocabulary", dir.display())));
        }
        Ok(Box::new(HmmStructure { model, vocab, config }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmeansConfig {
    pub n_states: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Width of the random word vectors used when none are supplied.
    pub embed_dim: usize,
}

impl KmeansConfig {
    pub fn new(n_states: usize) -> Self {
        Self { n_states, seed: 0, max_iters: 100, embed_dim: DEFAULT_EMBED_DIM }
    }
}

/// K-means clusters with the vocabulary they were fitted on.
pub struct KmeansEntry {
    pub inner: KmeansStructure,
    pub vocab: Vocab,
    pub config: KmeansConfig,
}

impl StructureModel for KmeansEntry {
    fn kind(&self) -> &str {
        "kmeans"
    }

    fn n_states(&self) -> usize {
        self.inner.model.k()
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn assign_states(&self, corpus: &EncodedCorpus) -> Result<LatentAssignment> {
        self.inner.assign(corpus)
    }

    fn dialog_nll(&self, _corpus: &EncodedCorpus, _num_samples: usize, _seed: u64) -> Result<Vec<f64>> {
        Err(Error::InvalidInput("kmeans is not a probabilistic model and has no likelihood".into()))
    }

    fn save(&self, dir: &Path, split_seed: Option<u64>) -> Result<()> {
        let manifest = Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            model: "kmeans".into(),
            n_states: self.inner.model.k(),
            vocab_hash: self.inner.vocab_hash.clone(),
            num_parameters: self.inner.model.centroids.len(),
            config: serde_json::to_value(&self.config)?,
            split_seed,
        };
        checkpoint::write_common(dir, &manifest, &self.vocab)?;
        checkpoint::write_json(&dir.join(KMEANS_FILE), &self.inner)
    }
}

struct KmeansTrainer;

impl ModelTrainer for KmeansTrainer {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn default_config(&self, n_states: usize) -> Value {
        serde_json::to_value(KmeansConfig::new(n_states)).expect("config serialises")
    }

    fn train(&self, data: TrainingData<'_>, config: &Value) -> Result<Trained> {
        let config: KmeansConfig = overlay_config(&KmeansConfig::new(1), as_object(config)?)?;
        let table = match data.embeddings {
            Some(t) => t.clone(),
            None => EmbeddingTable::random(data.vocab.len(), config.embed_dim, &mut ChaCha8Rng::seed_from_u64(config.seed)),
        };
        let inner = KmeansStructure::fit(data.train, table, config.n_states, config.seed, config.max_iters)?;
        let log = serde_json::json!({ "inertia": inner.model.inertia_history });
        Ok(Trained { model: Box::new(KmeansEntry { inner, vocab: data.vocab.clone(), config }), log })
    }

    fn load(&self, dir: &Path) -> Result<Box<dyn StructureModel>> {
        let manifest = checkpoint::read_manifest(dir)?;
        let vocab = checkpoint::read_vocab(dir, &manifest)?;
        let config: KmeansConfig = serde_json::from_value(manifest.config)?;
        let inner: KmeansStructure = checkpoint::read_json(&dir.join(KMEANS_FILE))?;
        if inner.vocab_hash != manifest.vocab_hash || inner.table.vocab_size() != vocab.len() {
            return Err(Error::Config(format!("{}: clusters do not match their vocabulary", dir.display())));
        }
        Ok(Box::new(KmeansEntry { inner, vocab, config }))
    }
}

/// Name-to-trainer map.
pub struct ModelRegistry {
    trainers: BTreeMap<&'static str, Box<dyn ModelTrainer>>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        for v in Variant::ALL {
            r.register(Box::new(VrnnTrainer(v)));
        }
        r.register(Box::new(HmmTrainer));
        r.register(Box::new(KmeansTrainer));
        r
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self { trainers: BTreeMap::new() }
    }

    /// Adds a trainer, replacing any previous one of the same name.
    pub fn register(&mut self, trainer: Box<dyn ModelTrainer>) {
        self.trainers.insert(trainer.name(), trainer);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.trainers.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn ModelTrainer> {
        self.trainers.get(name).map(|t| t.as_ref()).ok_or_else(|| Error::Unknown { kind: "model", name: name.to_string(), known: self.names().join(", ") })
    }

    /// Default configuration of `name` with `overrides` applied.
    pub fn resolve_config(&self, name: &str, n_states: usize, overrides: &Map<String, Value>) -> Result<Value> {
        let defaults = self.get(name)?.default_config(n_states);
        let merged: Value = overlay_config(&defaults, overrides)?;
        Ok(merged)
    }

    pub fn train(&self, name: &str, data: TrainingData<'_>, config: &Value) -> Result<Trained> {
        self.get(name)?.train(data, config)
    }

    /// Loads a checkpoint directory, dispatching on its manifest.
    pub fn load(&self, dir: &Path) -> Result<Box<dyn StructureModel>> {
        let manifest = checkpoint::read_manifest(dir)?;
        self.get(&manifest.model)?.load(dir)
    }
}
