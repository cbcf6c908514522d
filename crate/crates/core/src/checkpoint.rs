//! On-disk layout shared by every trained model: a directory holding
//! `manifest.json`, `vocab.json` and one model-specific payload file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// Compatibility contract of a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Registry name of the model kind.
    pub model: String,
    pub n_states: usize,
    pub vocab_hash: String,
    pub num_parameters: usize,
    /// Model-specific configuration.
    pub config: serde_json::Value,
    /// Seed of the train/valid/test split the model was trained on, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Creates `dir` and writes the manifest and vocabulary into it.
pub fn write_common(dir: &Path, manifest: &Manifest, vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    write_json(&dir.join(VOCAB_FILE), vocab)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: format version {} is not supported (expected {FORMAT_VERSION})",
            dir.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads the vocabulary and checks it against the manifest hash.
pub fn read_vocab(dir: &Path, manifest: &Manifest) -> Result<Vocab> {
    let vocab: Vocab = read_json::<Vocab>(&dir.join(VOCAB_FILE))?.rebuild();
    let hash = vocab.hash();
    if hash != manifest.vocab_hash {
        return Err(Error::VocabMismatch { expected: manifest.vocab_hash.clone(), found: hash });
    }
    Ok(vocab)
}
