//! Turn rewards. Terminal outcomes and ordinary turns score the same under
//! every scheme; schemes differ in what a repeated question costs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::TransitionTable;

use super::env::NUM_CATEGORIES;

pub const SUCCESS_REWARD: f64 = 20.0;
pub const FAILURE_REWARD: f64 = -10.0;
pub const TURN_PENALTY: f64 = -1.0;
/// Floor applied to predicted probabilities inside the KL divergence.
pub const KL_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardEvent {
    Success,
    Failure,
    RepeatedQuestion,
    ProceedingTurn,
}

fn check_simplex(name: &str, p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(0.0..=1.0 + 1e-9).contains(&x)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("{name} is not a probability distribution: {p:?}")));
    }
    Ok(())
}

/// `KL(p || q)` with `q` floored at [`KL_FLOOR`]; zero-probability terms of
/// `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    check_simplex("p_trans", p)?;
    check_simplex("p_pred", q)?;
    Ok(p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln()).sum())
}

/// Penalty for a repeated question.
pub trait RewardFunction: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether the scheme needs the learned transition table.
    fn uses_transitions(&self) -> bool;
    /// `p_trans_row` is present exactly when [`Self::uses_transitions`] is true.
    fn repeated_question(&self, p_trans_row: Option<&[f64]>, p_pred: &[f64]) -> Result<f64>;
}

fn row(p: Option<&[f64]>) -> Result<&[f64]> {
    p.ok_or_else(|| Error::InvalidInput("this reward scheme needs a transition table row".into()))
}

struct Baseline;
struct Rep;
struct Kl;
struct KlRep;

impl RewardFunction for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }
    fn uses_transitions(&self) -> bool {
        false
    }
    fn repeated_question(&self, _: Option<&[f64]>, _: &[f64]) -> Result<f64> {
        Ok(-1.0)
    }
}

impl RewardFunction for Rep {
    fn name(&self) -> &'static str {
        "rep"
    }
    fn uses_transitions(&self) -> bool {
        false
    }
    fn repeated_question(&self, _: Option<&[f64]>, _: &[f64]) -> Result<f64> {
        Ok(-5.0)
    }
}

impl RewardFunction for Kl {
    fn name(&self) -> &'static str {
        "kl"
    }
    fn uses_transitions(&self) -> bool {
        true
    }
    fn repeated_question(&self, p_trans_row: Option<&[f64]>, p_pred: &[f64]) -> Result<f64> {
        Ok(-kl_divergence(row(p_trans_row)?, p_pred)?)
    }
}

impl RewardFunction for KlRep {
    fn name(&self) -> &'static str {
        "kl_rep"
    }
    fn uses_transitions(&self) -> bool {
        true
    }
    fn repeated_question(&self, p_trans_row: Option<&[f64]>, p_pred: &[f64]) -> Result<f64> {
        Ok(-kl_divergence(row(p_trans_row)?, p_pred)? - 2.0)
    }
}

/// Name-to-scheme map.
pub struct RewardRegistry {
    schemes: BTreeMap<&'static str, Box<dyn RewardFunction>>,
}

impl Default for RewardRegistry {
    fn default() -> Self {
        let mut r = Self { schemes: BTreeMap::new() };
        r.register(Box::new(Baseline));
        r.register(Box::new(Rep));
        r.register(Box::new(Kl));
        r.register(Box::new(KlRep));
        r
    }
}

impl RewardRegistry {
    pub fn register(&mut self, scheme: Box<dyn RewardFunction>) {
        self.schemes.insert(scheme.name(), scheme);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.schemes.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn RewardFunction> {
        self.schemes.get(name).map(|s| s.as_ref()).ok_or_else(|| Error::Unknown { kind: "reward scheme", name: name.into(), known: self.names().join(", ") })
    }
}

/// A reward scheme bound to its transition table.
pub struct RewardSpec<'a> {
    pub scheme: &'a dyn RewardFunction,
    /// Collapsed category-to-category table; required by KL schemes.
    pub p_trans: Option<&'a TransitionTable>,
    /// Also subtract the KL divergence on ordinary turns.
    pub kl_every_turn: bool,
}

impl<'a> RewardSpec<'a> {
    pub fn new(scheme: &'a dyn RewardFunction, p_trans: Option<&'a TransitionTable>, kl_every_turn: bool) -> Result<Self> {
        if scheme.uses_transitions() {
            let table = p_trans.ok_or_else(|| Error::Config(format!("reward scheme `{}` needs a transition table", scheme.name())))?;
            if table.n_states() != NUM_CATEGORIES {
                return Err(Error::Config(format!("transition table has {} states; collapse it to {NUM_CATEGORIES} categories", table.n_states())));
            }
        }
        Ok(Self { scheme, p_trans, kl_every_turn })
    }

    fn trans_row(&self, prev_category: Option<usize>) -> Option<Vec<f64>> {
        match (self.scheme.uses_transitions(), self.p_trans, prev_category) {
            (true, Some(t), Some(c)) => Some(t.row(c)),
            _ => None,
        }
    }

    /// Reward of one turn. `prev_category` is the category of the system
    /// action before this turn's.
    pub fn reward(&self, event: RewardEvent, prev_category: Option<usize>, p_pred: &[f64]) -> Result<f64> {
        let row = self.trans_row(prev_category);
        match event {
            RewardEvent::Success => Ok(SUCCESS_REWARD),
            RewardEvent::Failure => Ok(FAILURE_REWARD),
            RewardEvent::RepeatedQuestion => self.scheme.repeated_question(row.as_deref(), p_pred),
            RewardEvent::ProceedingTurn => match row {
                Some(r) if self.kl_every_turn => Ok(TURN_PENALTY - kl_divergence(&r, p_pred)?),
                _ => Ok(TURN_PENALTY),
            },
        }
    }
}

/// Single-call form of [`RewardSpec::reward`] with an explicit table row.
pub fn compute_reward(scheme: &dyn RewardFunction, event: RewardEvent, p_trans_row: Option<&[f64]>, p_pred: &[f64]) -> Result<f64> {
    match event {
        RewardEvent::Success => Ok(SUCCESS_REWARD),
        RewardEvent::Failure => Ok(FAILURE_REWARD),
        RewardEvent::ProceedingTurn => Ok(TURN_PENALTY),
        RewardEvent::RepeatedQuestion => scheme.repeated_question(p_trans_row, p_pred),
    }
}
