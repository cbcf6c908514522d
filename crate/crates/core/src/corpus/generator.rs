//! Synthetic weather-report dialogs sampled from a hand-set state machine.
//!
//! Each visited state emits one exchange rendered from that state's
//! templates; the generator matrix is returned alongside the dialogs so
//! structure-recovery tests have ground truth.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_exchange, tokenize, Dialog, Entity, Side, MAX_DIALOG_LEN};
use crate::error::{Error, Result};
use crate::structure::TransitionTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub user: Vec<String>,
    pub system: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// The first state starts every dialog. States without outgoing
    /// transitions are absorbing end states.
    pub states: Vec<String>,
    pub transitions: BTreeMap<String, BTreeMap<String, f64>>,
    pub templates: BTreeMap<String, Templates>,
    /// Probability that a visit to one of `asr_states` is followed by a
    /// repeat of the same state (a misrecognised request being retried).
    pub asr_error_rate: f64,
    pub num_dialogs: usize,
    pub seed: u64,
    #[serde(default = "default_asr_states")]
    pub asr_states: Vec<String>,
    /// Values substituted for `{slot}` markers in templates.
    #[serde(default = "default_slot_values")]
    pub slot_values: BTreeMap<String, Vec<String>>,
}

fn default_asr_states() -> Vec<String> {
    vec!["api_call".to_string()]
}

fn default_slot_values() -> BTreeMap<String, Vec<String>> {
    let mut m = BTreeMap::new();
    let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    m.insert("place".into(), list(&["boston", "seattle", "new york", "chicago", "denver", "san francisco", "miami", "austin"]));
    m.insert("time".into(), list(&["today", "tomorrow", "this weekend", "tonight", "next monday", "this afternoon"]));
    m.insert("weather".into(), list(&["sunny", "rainy", "cloudy", "windy", "snowy", "foggy"]));
    m
}

impl GeneratorConfig {
    /// The nine-state weather-report machine: start, greeting, ask for the
    /// weather, give place and time, api call, present the report, offer
    /// anything else, thanks, end.
    pub fn weather_default(num_dialogs: usize, asr_error_rate: f64, seed: u64) -> Self {
        let states = ["start", "greeting", "ask_weather", "place_time", "api_call", "report", "anything_else", "thanks", "end"];
        let mut transitions: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut edge = |from: &str, to: &[(&str, f64)]| {
            transitions.insert(from.to_string(), to.iter().map(|(s, p)| (s.to_string(), *p)).collect());
        };
        edge("start", &[("greeting", 1.0)]);
        edge("greeting", &[("ask_weather", 0.6), ("place_time", 0.4)]);
        edge("ask_weather", &[("place_time", 1.0)]);
        edge("place_time", &[("api_call", 1.0)]);
        edge("api_call", &[("report", 0.8), ("place_time", 0.2)]);
        edge("report", &[("anything_else", 0.5), ("thanks", 0.5)]);
        edge("anything_else", &[("ask_weather", 0.3), ("thanks", 0.7)]);
        edge("thanks", &[("end", 1.0)]);
        let t = |user: &[&str], system: &[&str]| Templates {
            user: user.iter().map(|s| s.to_string()).collect(),
            system: system.iter().map(|s| s.to_string()).collect(),
        };
        let mut templates = BTreeMap::new();
        templates.insert("start".into(), t(&[""], &["welcome to the weather information service .", "weather service , welcome ."]));
        templates.insert("greeting".into(), t(&["hi", "hello there", "hey"], &["hello , what can i do for you ?", "hi , how can i help you ?"]));
        templates.insert(
            "ask_weather".into(),
            t(&["what is the weather like ?", "i want to know the weather", "can you tell me the forecast ?"], &["which city and what time ?", "where and when ?"]),
        );
        templates.insert(
            "place_time".into(),
            t(&["{place} {time}", "in {place} for {time} please", "{place} , {time}"], &["let me check {place} for {time} .", "checking {place} {time} ."]),
        );
        templates.insert("api_call".into(), t(&["ok", "sure", "yes"], &["api_call weather {place} {time}", "api_call forecast {place} {time}"]));
        templates.insert(
            "report".into(),
            t(&["go ahead", "what did you find ?"], &["it will be {weather} in {place} {time} .", "expect {weather} weather {time} in {place} ."]),
        );
        templates.insert(
            "anything_else".into(),
            t(&["great", "cool , got it"], &["is there anything else i can help you with ?", "anything else ?"]),
        );
        templates.insert("thanks".into(), t(&["thank you , that is all", "thanks , bye for now"], &["you are welcome .", "my pleasure ."]));
        templates.insert("end".into(), t(&["bye", "goodbye"], &["goodbye , have a nice day .", "bye !"]));
        Self {
            states: states.iter().map(|s| s.to_string()).collect(),
            transitions,
            templates,
            asr_error_rate,
            num_dialogs,
            seed,
            asr_states: default_asr_states(),
            slot_values: default_slot_values(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn state_index(&self, name: &str) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Config(format!("unknown state `{name}`")))
    }

    /// Generator matrix including the retry self-loops; absorbing states map to themselves.
    pub fn transition_matrix(&self) -> Result<Array2<f64>> {
        self.validate()?;
        let n = self.states.len();
        let mut m = Array2::zeros((n, n));
        for (i, s) in self.states.iter().enumerate() {
            match self.transitions.get(s).filter(|t| !t.is_empty()) {
                None => m[[i, i]] = 1.0,
                Some(row) => {
                    let retry = if self.asr_states.contains(s) { self.asr_error_rate } else { 0.0 };
                    for (to, p) in row {
                        m[[i, self.state_index(to)?]] += (1.0 - retry) * p;
                    }
                    m[[i, i]] += retry;
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::Config("generator needs at least one state".into()));
        }
        if !(0.0..=1.0).contains(&self.asr_error_rate) {
            return Err(Error::Config(format!("asr_error_rate {} outside [0, 1]", self.asr_error_rate)));
        }
        for from in self.transitions.keys() {
            self.state_index(from)?;
        }
        let mut succ = vec![Vec::new(); n];
        for (i, s) in self.states.iter().enumerate() {
            if !self.templates.contains_key(s) {
                return Err(Error::Config(format!("state `{s}` has no templates")));
            }
            let tpl = &self.templates[s];
            if tpl.user.is_empty() || tpl.system.is_empty() {
                return Err(Error::Config(format!("state `{s}` needs at least one user and one system template")));
            }
            if let Some(row) = self.transitions.get(s) {
                let total: f64 = row.values().sum();
                if !row.is_empty() && (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("outgoing probabilities of `{s}` sum to {total}, not 1")));
                }
                for (to, &p) in row {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::Config(format!("transition {s} -> {to} has probability {p}")));
                    }
                    if p > 0.0 {
                        succ[i].push(self.state_index(to)?);
                    }
                }
            }
        }
        // every state reachable from the start must be able to reach an absorbing state
        let absorbing: Vec<bool> = succ.iter().map(|s| s.is_empty()).collect();
        let mut reach_end = absorbing.clone();
        loop {
            let mut changed = false;
            for i in 0..n {
                if !reach_end[i] && succ[i].iter().any(|&j| reach_end[j]) {
                    reach_end[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            if !reach_end[i] {
                return Err(Error::Config(format!("no absorbing end state is reachable from state `{}`", self.states[i])));
            }
            stack.extend(succ[i].iter().copied());
        }
        Ok(())
    }
}

/// Dialogs sampled from a [`GeneratorConfig`], the true state of every
/// exchange, and the exact generator matrix.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub dialogs: Vec<Dialog>,
    pub states: Vec<Vec<usize>>,
    pub ground_truth: TransitionTable,
}

fn render(template: &str, values: &BTreeMap<String, String>, side: Side) -> Result<(Vec<String>, Vec<Entity>)> {
    let mut tokens = Vec::new();
    let mut entities = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        tokens.extend(tokenize(&rest[..open]));
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unterminated slot marker in template `{template}`")))?
            + open;
        let slot = &rest[open + 1..close];
        let value = values.get(slot).ok_or_else(|| Error::Config(format!("template `{template}` uses unknown slot `{slot}`")))?;
        let start = tokens.len();
        tokens.extend(tokenize(value));
        entities.push(Entity { slot: slot.to_string(), value: value.clone(), side, span: (start, tokens.len()) });
        rest = &rest[close + 1..];
    }
    tokens.extend(tokenize(rest));
    Ok((tokens, entities))
}

pub fn generate_weather_corpus(config: &GeneratorConfig) -> Result<SyntheticCorpus> {
    let matrix = config.transition_matrix()?;
    let n = config.states.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dialogs = Vec::with_capacity(config.num_dialogs);
    let mut all_states = Vec::with_capacity(config.num_dialogs);
    let mut occupancy = vec![0u64; n];
    for d in 0..config.num_dialogs {
        let values: BTreeMap<String, String> = config
            .slot_values
            .iter()
            .filter_map(|(slot, vals)| vals.choose(&mut rng).map(|v| (slot.clone(), v.clone())))
            .collect();
        let id = format!("weather-{d:05}");
        let mut state = 0;
        let mut exchanges = Vec::new();
        let mut states = Vec::new();
        loop {
            let name = &config.states[state];
            let tpl = &config.templates[name];
            let (user, mut ents) = render(tpl.user.choose(&mut rng).expect("validated"), &values, Side::User)?;
            let (system, sys_ents) = render(tpl.system.choose(&mut rng).expect("validated"), &values, Side::System)?;
            ents.extend(sys_ents);
            exchanges.push(make_exchange(&id, exchanges.len(), user, system, ents)?);
            states.push(state);
            occupancy[state] += 1;
            let absorbing = config.transitions.get(name).map_or(true, |t| t.is_empty());
            if absorbing || exchanges.len() == MAX_DIALOG_LEN {
                break;
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut next = n - 1;
            for j in 0..n {
                acc += matrix[[state, j]];
                if u < acc {
                    next = j;
                    break;
                }
            }
            state = next;
        }
        dialogs.push(Dialog { dialog_id: id, exchanges });
        all_states.push(states);
    }
    let ground_truth = TransitionTable::new(matrix, occupancy, Some(config.states.clone()))?;
    Ok(SyntheticCorpus { dialogs, states: all_states, ground_truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> GeneratorConfig {
        let mut transitions = BTreeMap::new();
        transitions.insert("a".to_string(), BTreeMap::from([("b".to_string(), 1.0)]));
        transitions.insert("b".to_string(), BTreeMap::from([("c".to_string(), 1.0)]));
        let templates = ["a", "b", "c"]
            .iter()
            .map(|s| (s.to_string(), Templates { user: vec![format!("user {s}")], system: vec![format!("system {s}")] }))
            .collect();
        GeneratorConfig {
            states: vec!["a".into(), "b".into(), "c".into()],
            transitions,
            templates,
            asr_error_rate: 0.0,
            num_dialogs: 5,
            seed: 1,
            asr_states: vec![],
            slot_values: BTreeMap::new(),
        }
    }

    #[test]
    fn deterministic_chain_visits_states_in_order() {
        let out = generate_weather_corpus(&chain()).unwrap();
        assert_eq!(out.dialogs.len(), 5);
        for (d, s) in out.dialogs.iter().zip(&out.states) {
            assert_eq!(s, &[0, 1, 2]);
            assert_eq!(d.exchanges[1].user_tokens, ["user", "b"]);
        }
        let m = &out.ground_truth.matrix;
        assert_eq!(m[[0, 1]], 1.0);
        assert_eq!(m[[1, 2]], 1.0);
        assert_eq!(m[[2, 2]], 1.0);
    }

    #[test]
    fn asr_rate_adds_api_call_self_loop() {
        let cfg = GeneratorConfig::weather_default(10, 0.3, 0);
        let m = cfg.transition_matrix().unwrap();
        let api = cfg.states.iter().position(|s| s == "api_call").unwrap();
        assert!((m[[api, api]] - 0.3).abs() < 1e-12);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unreachable_end_is_rejected() {
        let mut cfg = chain();
        cfg.transitions.insert("c".to_string(), BTreeMap::from([("b".to_string(), 1.0)]));
        assert!(matches!(generate_weather_corpus(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rows_must_sum_to_one() {
        let mut cfg = chain();
        cfg.transitions.insert("a".to_string(), BTreeMap::from([("b".to_string(), 0.5)]));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn slot_values_become_entities() {
        let cfg = GeneratorConfig::weather_default(20, 0.1, 4);
        let out = generate_weather_corpus(&cfg).unwrap();
        let with_place = out
            .dialogs
            .iter()
            .flat_map(|d| &d.exchanges)
            .flat_map(|e| e.entities.iter().map(move |en| (e, en)))
            .find(|(_, en)| en.slot == "place")
            .expect("some exchange mentions a place");
        let (ex, en) = with_place;
        let toks = ex.tokens(en.side)[en.span.0..en.span.1].join(" ");
        assert_eq!(toks, en.value);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = GeneratorConfig::weather_default(3, 0.2, 9);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(GeneratorConfig::from_json(&text).unwrap(), cfg);
        assert!(GeneratorConfig::from_json(r#"{"states": [], "bogus": 1}"#).is_err());
    }
}
