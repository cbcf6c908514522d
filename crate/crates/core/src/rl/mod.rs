//! Dialog-policy training against a user simulator, with rewards optionally
//! shaped by a learned transition table over action categories.

pub mod env;
pub mod policy;
pub mod reward;

pub use env::{action_mask, template_action, rule_agent, simulate_user, simulated_corpus, Action, EnvState, Goal, UserAct, CATEGORY_NAMES, MAX_TURNS, NUM_ACTIONS, NUM_CATEGORIES};
pub use policy::{category_distribution, Policy, PolicyInput, PolicyState, StepOutput};
pub use reward::{compute_reward, kl_divergence, RewardEvent, RewardFunction, RewardRegistry, RewardSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialog;
use crate::error::{Error, Result};
use crate::structure::{CollapseMap, LatentAssignment, TransitionTable};

pub const DISCOUNT: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub input: PolicyInput,
    pub action: Action,
    pub p_pred: [f64; NUM_CATEGORIES],
    pub event: RewardEvent,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn inputs(&self) -> Vec<PolicyInput> {
        self.steps.iter().map(|s| s.input.clone()).collect()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// Chooses the system action of each turn.
pub enum Agent<'a> {
    Policy { policy: &'a Policy, epsilon: f64, greedy: bool },
    /// A fixed state-to-action rule, such as [`rule_agent`].
    Scripted(fn(&EnvState) -> Action),
}

/// Plays one dialog. A turn repeating the previous action without any new
/// entity information is a repeated question; a system closing after the
/// user closed with every goal slot provided is a success; closing earlier
/// is a failure; reaching [`MAX_TURNS`] is a timeout, scored as failure.
pub fn run_episode(agent: &Agent<'_>, spec: &RewardSpec<'_>, rng: &mut impl Rng) -> Result<Trajectory> {
    let goal = Goal::sample(rng);
    run_episode_with_goal(agent, spec, goal, rng)
}

pub fn run_episode_with_goal(agent: &Agent<'_>, spec: &RewardSpec<'_>, goal: Goal, rng: &mut impl Rng) -> Result<Trajectory> {
    let mut state = EnvState::new(goal);
    simulate_user(&mut state, rng);
    let mut policy_state = match agent {
        Agent::Policy { policy, .. } => Some(policy.initial_state()),
        Agent::Scripted(_) => None,
    };
    let mut steps = Vec::new();
    loop {
        let input = PolicyInput { features: state.features(), mask: action_mask(&state) };
        let out = match (agent, policy_state.as_mut()) {
            (Agent::Policy { policy, epsilon, greedy }, Some(ps)) => policy.step(ps, &input, *epsilon, *greedy, rng)?,
            (Agent::Policy { .. }, None) => unreachable!("policy agents carry a recurrent state"),
            (Agent::Scripted(rule), _) => {
                let action = rule(&state);
                let mut probs = [0.0; NUM_ACTIONS];
                probs[action.id()] = 1.0;
                StepOutput { action, probs, p_pred: category_distribution(&probs) }
            }
        };
        let prev_action = state.last_action;
        let before = state.snapshot();
        state.apply_action(out.action);
        let (event, outcome) = if out.action == Action::Closing {
            if state.user_closed && state.goal_satisfied() {
                (RewardEvent::Success, Some(Outcome::Success))
            } else {
                (RewardEvent::Failure, Some(Outcome::Failure))
            }
        } else {
            simulate_user(&mut state, rng);
            if state.turn >= MAX_TURNS {
                (RewardEvent::Failure, Some(Outcome::Timeout))
            } else if prev_action == Some(out.action) && state.snapshot() == before {
                (RewardEvent::RepeatedQuestion, None)
            } else {
                (RewardEvent::ProceedingTurn, None)
            }
        };
        let reward = spec.reward(event, prev_action.map(Action::category), &out.p_pred)?;
        steps.push(Step { input, action: out.action, p_pred: out.p_pred, event, reward });
        if let Some(outcome) = outcome {
            return Ok(Trajectory { steps, outcome });
        }
    }
}

/// `G_t = r_t + discount * G_{t+1}`.
pub fn discounted_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        g = r + discount * g;
        out[t] = g;
    }
    out
}

/// REINFORCE learner with a running-mean baseline over observed returns.
pub struct Reinforce {
    pub policy: Policy,
    pub discount: f64,
    baseline_sum: f64,
    baseline_count: u64,
}

impl Reinforce {
    pub fn new(policy: Policy, discount: f64) -> Self {
        Self { policy, discount, baseline_sum: 0.0, baseline_count: 0 }
    }

    pub fn baseline(&self) -> f64 {
        if self.baseline_count == 0 {
            0.0
        } else {
            self.baseline_sum / self.baseline_count as f64
        }
    }

    /// One update from one dialog; the baseline then absorbs its returns.
    pub fn update(&mut self, trajectory: &Trajectory) -> Result<f64> {
        let returns = discounted_returns(&trajectory.rewards(), self.discount);
        let b = self.baseline();
        let advantages: Vec<f64> = returns.iter().map(|g| g - b).collect();
        let norm = self.policy.reinforce_step(&trajectory.inputs(), &trajectory.actions(), &advantages)?;
        self.baseline_sum += returns.iter().sum::<f64>();
        self.baseline_count += returns.len() as u64;
        Ok(norm)
    }
}

/// Supervised pre-training of `policy` to imitate [`rule_agent`] on
/// `num_dialogs` simulated dialogs.
pub fn warm_start(policy: &mut Policy, num_dialogs: usize, epochs: usize, seed: u64) -> Result<()> {
    if num_dialogs == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = RewardRegistry::default();
    let spec = RewardSpec { scheme: registry.get("baseline")?, p_trans: None, kl_every_turn: false };
    let dialogs: Vec<Trajectory> = (0..num_dialogs).map(|_| run_episode(&Agent::Scripted(rule_agent), &spec, &mut rng)).collect::<Result<_>>()?;
    let data: Vec<(Vec<PolicyInput>, Vec<Action>)> = dialogs.iter().map(|t| (t.inputs(), t.actions())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(16) {
            let batch: Vec<(&[PolicyInput], &[Action])> = chunk.iter().map(|&i| (data[i].0.as_slice(), data[i].1.as_slice())).collect();
            policy.supervised_step(&batch)?;
        }
    }
    Ok(())
}

/// Fraction of `num_dialogs` greedy episodes that succeed.
pub fn evaluate_success(agent: &Agent<'_>, num_dialogs: usize, seed: u64) -> Result<f64> {
    let registry = RewardRegistry::default();
    let spec = RewardSpec { scheme: registry.get("baseline")?, p_trans: None, kl_every_turn: false };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    for _ in 0..num_dialogs {
        if run_episode(agent, &spec, &mut rng)?.outcome == Outcome::Success {
            wins += 1;
        }
    }
    Ok(if num_dialogs == 0 { 0.0 } else { wins as f64 / num_dialogs as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schemes: Vec<String>,
    pub total_dialogs: usize,
    pub eval_every: usize,
    pub eval_dialogs: usize,
    pub repeats: usize,
    pub warm_start_dialogs: usize,
    pub warm_start_epochs: usize,
    pub warm_start_lr: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub discount: f64,
    pub kl_every_turn: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schemes: vec!["baseline".into(), "rep".into(), "kl".into(), "kl_rep".into()],
            total_dialogs: 10_000,
            eval_every: 1000,
            eval_dialogs: 200,
            repeats: 10,
            warm_start_dialogs: 500,
            warm_start_epochs: 5,
            warm_start_lr: 5e-3,
            learning_rate: 1e-3,
            epsilon: 0.1,
            discount: DISCOUNT,
            kl_every_turn: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, registry: &RewardRegistry) -> Result<()> {
        if self.eval_every == 0 || self.total_dialogs % self.eval_every != 0 {
            return Err(Error::Config("eval_every: must be positive and divide total_dialogs".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon: must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config("discount: must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.warm_start_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for s in &self.schemes {
            registry.get(s)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub scheme: String,
    pub repeat: usize,
    /// Training dialogs seen when the policy was frozen for evaluation.
    pub checkpoint: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurves {
    pub points: Vec<CurvePoint>,
}

impl LearningCurves {
    /// Mean success rate of `scheme` at `checkpoint` across repeats.
    pub fn mean(&self, scheme: &str, checkpoint: usize) -> Option<f64> {
        let v: Vec<f64> = self.points.iter().filter(|p| p.scheme == scheme && p.checkpoint == checkpoint).map(|p| p.success_rate).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Sample variance across repeats (0 for a single repeat).
    pub fn variance(&self, scheme: &str, checkpoint: usize) -> Option<f64> {
        let v: Vec<f64> = self.points.iter().filter(|p| p.scheme == scheme && p.checkpoint == checkpoint).map(|p| p.success_rate).collect();
        let m = self.mean(scheme, checkpoint)?;
        Some(if v.len() < 2 { 0.0 } else { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 })
    }

    /// `scheme,repeat,checkpoint,success_rate`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn train_one(config: &ExperimentConfig, spec: &RewardSpec<'_>, warm: &Policy, scheme: &str, repeat: usize) -> Result<Vec<CurvePoint>> {
    let mut policy = warm.clone();
    policy.set_learning_rate(config.learning_rate);
    let mut learner = Reinforce::new(policy, config.discount);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1000 + repeat as u64);
    let mut points = Vec::new();
    for done in 1..=config.total_dialogs {
        let agent = Agent::Policy { policy: &learner.policy, epsilon: config.epsilon, greedy: false };
        let trajectory = run_episode(&agent, spec, &mut rng)?;
        learner.update(&trajectory)?;
        if done % config.eval_every == 0 {
            let agent = Agent::Policy { policy: &learner.policy, epsilon: 0.0, greedy: true };
            let eval_seed = config.seed ^ (0x5eed_0000 + (repeat * 1_000_003 + done) as u64);
            let success_rate = evaluate_success(&agent, config.eval_dialogs, eval_seed)?;
            points.push(CurvePoint { scheme: scheme.to_string(), repeat, checkpoint: done, success_rate });
        }
    }
    Ok(points)
}

/// Warm-starts one policy per repeat, then trains a copy of it under every
/// scheme. Runs use `jobs` worker threads; results do not depend on it.
pub fn rl_experiment(config: &ExperimentConfig, registry: &RewardRegistry, p_trans: Option<&TransitionTable>, jobs: usize) -> Result<LearningCurves> {
    config.validate(registry)?;
    let specs: Vec<RewardSpec<'_>> = config.schemes.iter().map(|s| RewardSpec::new(registry.get(s)?, p_trans, config.kl_every_turn)).collect::<Result<_>>()?;
    let warm: Vec<Policy> = (0..config.repeats)
        .map(|r| {
            let seed = config.seed.wrapping_add(r as u64);
            let mut p = Policy::new(config.warm_start_lr, seed);
            warm_start(&mut p, config.warm_start_dialogs, config.warm_start_epochs, seed)?;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let runs: Vec<(usize, usize)> = (0..config.repeats).flat_map(|r| (0..specs.len()).map(move |s| (r, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<Vec<CurvePoint>>> =
        pool.install(|| runs.par_iter().map(|&(r, s)| train_one(config, &specs[s], &warm[r], &config.schemes[s], r)).collect());
    let mut points = Vec::new();
    for r in results {
        points.extend(r?);
    }
    points.sort_by(|a, b| {
        let sa = config.schemes.iter().position(|s| *s == a.scheme);
        let sb = config.schemes.iter().position(|s| *s == b.scheme);
        (sa, a.repeat, a.checkpoint).cmp(&(sb, b.repeat, b.checkpoint))
    });
    Ok(LearningCurves { points })
}

/// Maps each latent state to the category of the system action most often
/// seen in the exchanges assigned to it; unused states go to category 0.
/// A category that wins no state takes the state with the most votes for
/// it among those whose category has other members.
pub fn majority_collapse_map(assignment: &LatentAssignment, dialogs: &[Dialog]) -> Result<CollapseMap> {
    if assignment.dialogs.len() != dialogs.len() {
        return Err(Error::InvalidInput("assignment and dialogs differ in length".into()));
    }
    let n = assignment.n_states;
    if n < NUM_CATEGORIES {
        return Err(Error::InvalidInput(format!("{n} states cannot cover {NUM_CATEGORIES} categories")));
    }
    let mut votes = vec![[0usize; NUM_CATEGORIES]; n];
    for (a, d) in assignment.dialogs.iter().zip(dialogs) {
        for (&s, ex) in a.states.iter().zip(&d.exchanges) {
            if let Some(action) = env::template_action(&ex.system_tokens) {
                votes[s][action.category()] += 1;
            }
        }
    }
    let mut category: Vec<usize> = votes.iter().map(|v| (0..NUM_CATEGORIES).fold(0, |b, c| if v[c] > v[b] { c } else { b })).collect();
    for c in 0..NUM_CATEGORIES {
        if category.contains(&c) {
            continue;
        }
        let donor = (0..n)
            .filter(|&s| category.iter().filter(|&&k| k == category[s]).count() > 1)
            .max_by_key(|&s| (votes[s][c], std::cmp::Reverse(s)))
            .expect("n >= categories leaves a shared category");
        category[donor] = c;
    }
    Ok(CollapseMap {
        state_to_category: category.into_iter().enumerate().collect(),
        category_names: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}
