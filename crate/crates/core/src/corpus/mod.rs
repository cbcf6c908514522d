//! Dialog corpora: JSON-lines ingestion, tokenisation, delexicalisation,
//! train/valid/test splitting and a synthetic weather-domain generator.

mod generator;
mod vocab;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generator::{generate_weather_corpus, GeneratorConfig, SyntheticCorpus, Templates};
pub use vocab::{build_vocab, EncodedCorpus, EncodedDialog, EncodedExchange, Vocab};

pub const MAX_UTTERANCE_LEN: usize = 40;
pub const MAX_DIALOG_LEN: usize = 10;
/// Stands in for an empty user or system side.
pub const EMPTY_TOKEN: &str = "<empty>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    System,
}

/// An entity mention; `span` is a half-open token range `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub slot: String,
    pub value: String,
    pub side: Side,
    pub span: (usize, usize),
}

/// One user utterance and the system response that follows it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub user_tokens: Vec<String>,
    pub system_tokens: Vec<String>,
    pub entities: Vec<Entity>,
    pub turn_index: usize,
}

impl Exchange {
    pub fn tokens(&self, side: Side) -> &[String] {
        match side {
            Side::User => &self.user_tokens,
            Side::System => &self.system_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub dialog_id: String,
    pub exchanges: Vec<Exchange>,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.exchanges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exchanges.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

/// Lowercases and splits on whitespace, emitting every punctuation character
/// as its own token. Bracketed placeholders such as `[value_food]` stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '[' {
            if let Some(len) = placeholder_len(&chars[i..]) {
                flush(&mut word, &mut tokens);
                tokens.push(chars[i..i + len].iter().collect());
                i += len;
                continue;
            }
        }
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        }
        i += 1;
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

fn placeholder_len(chars: &[char]) -> Option<usize> {
    let close = chars.iter().position(|&c| c == ']')?;
    let inner = &chars[1..close];
    (!inner.is_empty() && inner.iter().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '_')).then_some(close + 1)
}

/// True for bracketed slot placeholders such as `[value_price]`.
pub fn is_placeholder(token: &str) -> bool {
    token.len() > 2 && token.starts_with('[') && token.ends_with(']') && {
        let chars: Vec<char> = token.chars().collect();
        placeholder_len(&chars) == Some(chars.len())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntity {
    slot: String,
    value: String,
    side: Side,
    span: (usize, usize),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    user: String,
    system: String,
    #[serde(default)]
    entities: Vec<RawEntity>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialog {
    dialog_id: String,
    turns: Vec<RawTurn>,
}

#[derive(Serialize)]
struct OutEntity<'a> {
    slot: &'a str,
    value: &'a str,
    side: Side,
    span: [usize; 2],
}

#[derive(Serialize)]
struct OutTurn<'a> {
    user: String,
    system: String,
    entities: Vec<OutEntity<'a>>,
}

#[derive(Serialize)]
struct OutDialog<'a> {
    dialog_id: &'a str,
    turns: Vec<OutTurn<'a>>,
}

/// Builds an exchange from raw token sequences: validates entity spans,
/// truncates to [`MAX_UTTERANCE_LEN`] and substitutes the empty sentinel.
fn make_exchange(
    dialog_id: &str,
    turn_index: usize,
    mut user_tokens: Vec<String>,
    mut system_tokens: Vec<String>,
    entities: Vec<Entity>,
) -> Result<Exchange> {
    for e in &entities {
        let len = match e.side {
            Side::User => user_tokens.len(),
            Side::System => system_tokens.len(),
        };
        if e.span.0 >= e.span.1 || e.span.1 > len {
            return Err(Error::SpanOutOfRange {
                dialog_id: dialog_id.to_string(),
                message: format!(
                    "turn {turn_index}: {:?} entity `{}` span [{}, {}) outside utterance of {len} tokens",
                    e.side, e.slot, e.span.0, e.span.1
                ),
            });
        }
    }
    user_tokens.truncate(MAX_UTTERANCE_LEN);
    system_tokens.truncate(MAX_UTTERANCE_LEN);
    let entities = entities
        .into_iter()
        .filter(|e| {
            let len = match e.side {
                Side::User => user_tokens.len(),
                Side::System => system_tokens.len(),
            };
            e.span.1 <= len
        })
        .collect();
    if user_tokens.is_empty() {
        user_tokens.push(EMPTY_TOKEN.to_string());
    }
    if system_tokens.is_empty() {
        system_tokens.push(EMPTY_TOKEN.to_string());
    }
    Ok(Exchange { user_tokens, system_tokens, entities, turn_index })
}

/// Parses one JSON-lines dialog record.
pub fn parse_dialog(line: &str) -> std::result::Result<Dialog, String> {
    let raw: RawDialog = serde_json::from_str(line).map_err(|e| e.to_string())?;
    dialog_from_raw(raw).map_err(|e| e.to_string())
}

fn dialog_from_raw(raw: RawDialog) -> Result<Dialog> {
    let mut exchanges = Vec::with_capacity(raw.turns.len().min(MAX_DIALOG_LEN));
    for (t, turn) in raw.turns.into_iter().enumerate() {
        let entities = turn
            .entities
            .into_iter()
            .map(|e| Entity { slot: e.slot, value: e.value, side: e.side, span: e.span })
            .collect();
        let ex = make_exchange(&raw.dialog_id, t, tokenize(&turn.user), tokenize(&turn.system), entities)?;
        if t < MAX_DIALOG_LEN {
            exchanges.push(ex);
        }
    }
    Ok(Dialog { dialog_id: raw.dialog_id, exchanges })
}

/// Reads every dialog from a corpus file.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Dialog>> {
    match format {
        CorpusFormat::Jsonl => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_jsonl(std::io::BufReader::new(file)).map_err(|e| match e {
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })
        }
    }
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<Dialog>> {
    let mut dialogs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialog = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedRecord { line: idx + 1, message: e.to_string() })?;
        dialogs.push(dialog_from_raw(raw)?);
    }
    Ok(dialogs)
}

/// Serialises dialogs to the JSON-lines schema. Tokens are re-joined with
/// single spaces, so the output re-tokenises to the same sequences.
pub fn write_jsonl(dialogs: &[Dialog], mut out: impl std::io::Write) -> Result<()> {
    let join = |toks: &[String]| {
        if toks.len() == 1 && toks[0] == EMPTY_TOKEN {
            String::new()
        } else {
            toks.join(" ")
        }
    };
    for d in dialogs {
        let turns = d
            .exchanges
            .iter()
            .map(|ex| OutTurn {
                user: join(&ex.user_tokens),
                system: join(&ex.system_tokens),
                entities: ex
                    .entities
                    .iter()
                    .map(|e| OutEntity { slot: &e.slot, value: &e.value, side: e.side, span: [e.span.0, e.span.1] })
                    .collect(),
            })
            .collect();
        serde_json::to_writer(&mut out, &OutDialog { dialog_id: &d.dialog_id, turns })?;
        writeln!(out).map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

/// Sizes for a three-way split: validation and test sizes are each rounded
/// to the nearest integer (at least one dialog each), training takes the rest.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    if n < 3 {
        return Err(Error::InvalidInput(format!("cannot split {n} dialogs three ways; need at least 3")));
    }
    let valid = ((n as f64 * b).round() as usize).max(1);
    let test = ((n as f64 * c).round() as usize).max(1);
    if valid + test >= n {
        return Err(Error::InvalidInput(format!("split of {n} dialogs leaves no training data")));
    }
    Ok((n - valid - test, valid, test))
}

/// Shuffles dialogs with `seed` and partitions them into (train, valid, test).
pub fn split_corpus(dialogs: &[Dialog], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<Dialog>, Vec<Dialog>, Vec<Dialog>)> {
    let (n_train, n_valid, _) = split_sizes(dialogs.len(), ratios)?;
    let mut order: Vec<usize> = (0..dialogs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ix: &[usize]| ix.iter().map(|&i| dialogs[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_valid]),
        pick(&order[n_train + n_valid..]),
    ))
}

/// Slot type to the set of surface values (as raw text) that belong to it.
pub type Lexicon = BTreeMap<String, Vec<String>>;

fn delex_side(tokens: &[String], lexicon: &[(String, Vec<String>)]) -> (Vec<String>, Vec<(usize, usize, usize, usize, String)>) {
    // (orig_start, orig_end, new_start, new_end, slot)
    let mut out = Vec::with_capacity(tokens.len());
    let mut hits = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut best: Option<(usize, &str)> = None;
        for (slot, value) in lexicon {
            let n = value.len();
            if n == 0 || i + n > tokens.len() || tokens[i..i + n] != value[..] {
                continue;
            }
            if best.map_or(true, |(len, _)| n > len) {
                best = Some((n, slot));
            }
        }
        match best {
            Some((n, slot)) => {
                hits.push((i, i + n, out.len(), out.len() + 1, slot.to_string()));
                out.push(format!("[value_{slot}]"));
                i += n;
            }
            None => {
                out.push(tokens[i].clone());
                i += 1;
            }
        }
    }
    (out, hits)
}

/// Maps an original token index to the delexicalised sequence.
fn remap(pos: usize, hits: &[(usize, usize, usize, usize, String)], end: bool) -> Option<usize> {
    let mut shift: isize = 0;
    for (os, oe, _, _, _) in hits {
        if pos >= *oe {
            shift += 1 - (*oe - *os) as isize;
        } else if pos > *os || (!end && pos == *os) {
            return None;
        }
    }
    Some((pos as isize + shift) as usize)
}

/// Replaces lexicon values with `[value_<slot>]` placeholders, longest match
/// first and left to right. Entity spans are moved onto the new tokens.
pub fn delexicalize(exchange: &Exchange, lexicon: &Lexicon) -> Exchange {
    // slot order then value order fixes tie-breaking between equal-length matches
    let entries: Vec<(String, Vec<String>)> = lexicon
        .iter()
        .flat_map(|(slot, values)| values.iter().map(move |v| (slot.clone(), tokenize(v))))
        .collect();
    let (user, user_hits) = delex_side(&exchange.user_tokens, &entries);
    let (system, system_hits) = delex_side(&exchange.system_tokens, &entries);
    let mut entities = Vec::new();
    for (side, hits, toks) in [(Side::User, &user_hits, &exchange.user_tokens), (Side::System, &system_hits, &exchange.system_tokens)] {
        for (os, oe, ns, ne, slot) in hits.iter() {
            entities.push(Entity { slot: slot.clone(), value: toks[*os..*oe].join(" "), side, span: (*ns, *ne) });
        }
        for e in exchange.entities.iter().filter(|e| e.side == side) {
            let inside = hits.iter().any(|(os, oe, ..)| e.span.0 < *oe && *os < e.span.1);
            if inside {
                continue;
            }
            if let (Some(s), Some(t)) = (remap(e.span.0, hits, false), remap(e.span.1, hits, true)) {
                entities.push(Entity { span: (s, t), ..e.clone() });
            }
        }
    }
    entities.sort_by_key(|e| (e.side == Side::System, e.span));
    Exchange { user_tokens: user, system_tokens: system, entities, turn_index: exchange.turn_index }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(user: &str, system: &str) -> Exchange {
        make_exchange("d", 0, tokenize(user), tokenize(system), vec![]).unwrap()
    }

    fn dialogs(n: usize) -> Vec<Dialog> {
        (0..n).map(|i| Dialog { dialog_id: format!("d{i}"), exchanges: vec![ex("hi", "hello")] }).collect()
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("What's the Weather?"), ["what", "'", "s", "the", "weather", "?"]);
        assert_eq!(tokenize("an [value_price] place, please"), ["an", "[value_price]", "place", ",", "please"]);
        assert_eq!(tokenize("[not a placeholder]"), ["[", "not", "a", "placeholder", "]"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn empty_file_gives_no_dialogs() {
        assert!(read_jsonl("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn long_dialogs_and_utterances_are_truncated() {
        let turns: Vec<String> = (0..12).map(|i| format!(r#"{{"user": "u{i}", "system": "s{i}"}}"#)).collect();
        let long_user = vec!["w"; 55].join(" ");
        let line = format!(
            r#"{{"dialog_id": "x", "turns": [{}, {{"user": "{long_user}", "system": ""}}]}}"#,
            turns.join(", ")
        );
        let d = &read_jsonl(line.as_bytes()).unwrap()[0];
        assert_eq!(d.exchanges.len(), 10);
        for (t, e) in d.exchanges.iter().enumerate() {
            assert_eq!(e.turn_index, t);
        }
        let line = format!(r#"{{"dialog_id": "y", "turns": [{{"user": "{long_user}", "system": ""}}]}}"#);
        let d = &read_jsonl(line.as_bytes()).unwrap()[0];
        assert_eq!(d.exchanges[0].user_tokens.len(), 40);
        assert_eq!(d.exchanges[0].system_tokens, [EMPTY_TOKEN]);
    }

    #[test]
    fn malformed_record_names_its_line() {
        let text = "{\"dialog_id\": \"a\", \"turns\": []}\n{not json\n";
        match read_jsonl(text.as_bytes()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_span_names_dialog() {
        let text = r#"{"dialog_id": "rest-7", "turns": [{"user": "cheap food", "system": "ok", "entities": [{"slot": "price", "value": "cheap", "side": "user", "span": [1, 3]}]}]}"#;
        match read_jsonl(text.as_bytes()) {
            Err(Error::SpanOutOfRange { dialog_id, .. }) => assert_eq!(dialog_id, "rest-7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(676, (0.8, 0.1, 0.1)).unwrap(), (540, 68, 68));
        assert_eq!(split_sizes(3, (0.8, 0.1, 0.1)).unwrap(), (1, 1, 1));
        assert!(split_sizes(2, (0.8, 0.1, 0.1)).is_err());
        assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let all = dialogs(10);
        let a = split_corpus(&all, (0.8, 0.1, 0.1), 7).unwrap();
        let b = split_corpus(&all, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a.0.iter().chain(&a.1).chain(&a.2).map(|d| d.dialog_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = all.iter().map(|d| d.dialog_id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        assert!(split_corpus(&dialogs(2), (0.8, 0.1, 0.1), 0).is_err());
    }

    fn lexicon() -> Lexicon {
        let mut lex = Lexicon::new();
        lex.insert("price".into(), vec!["cheap".into(), "moderately priced".into()]);
        lex.insert("area".into(), vec!["north".into(), "south".into()]);
        lex.insert("food".into(), vec!["north american".into(), "thai".into()]);
        lex
    }

    #[test]
    fn delexicalize_replaces_values() {
        let out = delexicalize(&ex("cheap restaurant in the north", "ok"), &lexicon());
        assert_eq!(out.user_tokens.join(" "), "[value_price] restaurant in the [value_area]");
        assert_eq!(out.entities.len(), 2);
        assert_eq!(out.entities[0].span, (0, 1));
        assert_eq!(out.entities[1].span, (4, 5));
        assert_eq!(out.entities[1].value, "north");
    }

    #[test]
    fn delexicalize_without_hits_is_identity() {
        let e = ex("hello there", "how can i help");
        assert_eq!(delexicalize(&e, &lexicon()), e);
    }

    #[test]
    fn longest_match_wins() {
        let out = delexicalize(&ex("some north american food in the north", ""), &lexicon());
        assert_eq!(out.user_tokens.join(" "), "some [value_food] food in the [value_area]");
    }

    #[test]
    fn existing_entities_shift_with_replacements() {
        let mut e = ex("moderately priced food near the centre", "ok");
        e.entities.push(Entity { slot: "area".into(), value: "centre".into(), side: Side::User, span: (5, 6) });
        let out = delexicalize(&e, &lexicon());
        assert_eq!(out.user_tokens[4], "centre");
        let centre = out.entities.iter().find(|x| x.value == "centre").unwrap();
        assert_eq!(centre.span, (4, 5));
    }

    #[test]
    fn jsonl_round_trip_preserves_tokens() {
        let mut e = ex("cheap food", "");
        e.entities.push(Entity { slot: "price".into(), value: "cheap".into(), side: Side::User, span: (0, 1) });
        let d = vec![Dialog { dialog_id: "a".into(), exchanges: vec![e] }];
        let mut buf = Vec::new();
        write_jsonl(&d, &mut buf).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), d);
    }

    proptest::proptest! {
        #[test]
        fn delexicalize_is_idempotent(words in proptest::collection::vec(
            proptest::sample::select(vec!["cheap", "north", "american", "thai", "food", "in", "the", "south", "priced", "moderately"]), 0..12)) {
            let e = ex(&words.join(" "), &words.iter().rev().cloned().collect::<Vec<_>>().join(" "));
            let once = delexicalize(&e, &lexicon());
            let twice = delexicalize(&once, &lexicon());
            proptest::prop_assert_eq!(once, twice);
        }

        #[test]
        fn loaded_bounds_hold(n_turns in 0usize..15, n_words in 0usize..60) {
            let utt = vec!["a"; n_words].join(" ");
            let turns: Vec<String> = (0..n_turns).map(|_| format!(r#"{{"user": "{utt}", "system": "{utt}"}}"#)).collect();
            let line = format!(r#"{{"dialog_id": "p", "turns": [{}]}}"#, turns.join(","));
            let d = &read_jsonl(line.as_bytes()).unwrap()[0];
            proptest::prop_assert!(d.exchanges.len() <= MAX_DIALOG_LEN);
            for e in &d.exchanges {
                proptest::prop_assert!(!e.user_tokens.is_empty() && e.user_tokens.len() <= MAX_UTTERANCE_LEN);
                proptest::prop_assert!(!e.system_tokens.is_empty() && e.system_tokens.len() <= MAX_UTTERANCE_LEN);
            }
        }
    }
}
