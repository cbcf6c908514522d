use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{is_placeholder, Dialog, Side, EMPTY_TOKEN};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Token/id mapping. Ids `0..5` are reserved for `<pad>`, `<unk>`, `<bos>`,
/// `<eos>` and the empty-utterance sentinel; corpus tokens follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    named_entities: BTreeSet<usize>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;
    pub const EMPTY_ID: usize = 4;
    pub const NUM_SPECIAL: usize = 5;

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let named_entities = tokens.iter().enumerate().filter(|(_, t)| is_placeholder(t)).map(|(i, _)| i).collect();
        Self { tokens, index, named_entities }
    }

    /// Restores the lookup index after deserialisation.
    pub fn rebuild(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_named_entity(&self, id: usize) -> bool {
        self.named_entities.contains(&id)
    }

    pub fn named_entity_ids(&self) -> &BTreeSet<usize> {
        &self.named_entities
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Maps every exchange onto ids. Tokens inside annotated entity spans, and
    /// placeholder tokens, are flagged as named entities.
    pub fn encode(&self, dialogs: &[Dialog]) -> EncodedCorpus {
        let dialogs = dialogs
            .iter()
            .map(|d| EncodedDialog {
                dialog_id: d.dialog_id.clone(),
                exchanges: d
                    .exchanges
                    .iter()
                    .map(|ex| {
                        let side = |s: Side| {
                            let toks = ex.tokens(s);
                            let ids: Vec<usize> = toks.iter().map(|t| self.id(t)).collect();
                            let mut ne: Vec<bool> = ids.iter().map(|&i| self.is_named_entity(i)).collect();
                            for e in ex.entities.iter().filter(|e| e.side == s) {
                                for flag in ne.iter_mut().take(e.span.1).skip(e.span.0) {
                                    *flag = true;
                                }
                            }
                            (ids, ne)
                        };
                        let (user, user_ne) = side(Side::User);
                        let (system, system_ne) = side(Side::System);
                        EncodedExchange { user, system, user_ne, system_ne }
                    })
                    .collect(),
            })
            .collect();
        EncodedCorpus { vocab_hash: self.hash(), dialogs }
    }
}

/// Collects tokens seen at least `min_count` times; placeholders are always kept.
pub fn build_vocab(dialogs: &[Dialog], min_count: usize) -> Result<Vocab> {
    if min_count == 0 {
        return Err(Error::InvalidInput("min_count must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in dialogs {
        for ex in &d.exchanges {
            for t in ex.user_tokens.iter().chain(&ex.system_tokens) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut tokens: Vec<String> = [PAD, UNK, BOS, EOS, EMPTY_TOKEN].iter().map(|s| s.to_string()).collect();
    tokens.extend(
        counts
            .into_iter()
            .filter(|(t, c)| (*c >= min_count || is_placeholder(t)) && *t != EMPTY_TOKEN)
            .map(|(t, _)| t.to_string()),
    );
    Ok(Vocab::from_tokens(tokens))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExchange {
    pub user: Vec<usize>,
    pub system: Vec<usize>,
    pub user_ne: Vec<bool>,
    pub system_ne: Vec<bool>,
}

impl EncodedExchange {
    pub fn num_tokens(&self) -> usize {
        self.user.len() + self.system.len()
    }

    pub fn all_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.user.iter().chain(&self.system).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedDialog {
    pub dialog_id: String,
    pub exchanges: Vec<EncodedExchange>,
}

/// Dialogs mapped onto one vocabulary, tagged with that vocabulary's hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedCorpus {
    pub vocab_hash: String,
    pub dialogs: Vec<EncodedDialog>,
}

impl EncodedCorpus {
    pub fn num_exchanges(&self) -> usize {
        self.dialogs.iter().map(|d| d.exchanges.len()).sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.dialogs.iter().flat_map(|d| &d.exchanges).map(|e| e.num_tokens()).sum()
    }

    pub fn check_vocab(&self, expected: &str) -> Result<()> {
        if self.vocab_hash != expected {
            return Err(Error::VocabMismatch { expected: expected.to_string(), found: self.vocab_hash.clone() });
        }
        Ok(())
    }

    pub fn subset(&self, dialogs: Vec<EncodedDialog>) -> EncodedCorpus {
        EncodedCorpus { vocab_hash: self.vocab_hash.clone(), dialogs }
    }
}
