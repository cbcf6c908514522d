//! Restaurant-search environment: system actions, the entity-driven user
//! simulator, the action mask and a rule-based reference agent.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Dialog, Exchange};

pub const NUM_ACTIONS: usize = 7;
pub const NUM_CATEGORIES: usize = 4;
pub const MAX_TURNS: usize = 10;
pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = ["ask_for_entity", "present_results", "give_info", "closing"];
pub const INFORMABLE: [&str; 3] = ["food", "price", "area"];
pub const REQUESTABLE: [&str; 3] = ["address", "phone", "postcode"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    AskFood,
    AskPrice,
    AskArea,
    PresentResult,
    PresentAlternative,
    GiveInfo,
    Closing,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::AskFood, Action::AskPrice, Action::AskArea, Action::PresentResult, Action::PresentAlternative, Action::GiveInfo, Action::Closing];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Action> {
        Self::ALL.get(id).copied()
    }

    pub fn category(self) -> usize {
        match self {
            Action::AskFood | Action::AskPrice | Action::AskArea => 0,
            Action::PresentResult | Action::PresentAlternative => 1,
            Action::GiveInfo => 2,
            Action::Closing => 3,
        }
    }

    /// Informable slot asked for, if this is an ask action.
    pub fn asked_slot(self) -> Option<usize> {
        match self {
            Action::AskFood => Some(0),
            Action::AskPrice => Some(1),
            Action::AskArea => Some(2),
            _ => None,
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            Action::AskFood => "do you have a [slot_food] preference ?",
            Action::AskPrice => "what [slot_price] range are you looking for ?",
            Action::AskArea => "which [slot_area] would you like ?",
            Action::PresentResult => "[value_name] is a good restaurant matching your request . is there anything else i can help you with ?",
            Action::PresentAlternative => "[value_name] is another option . would you like to know more ?",
            Action::GiveInfo => "here is the info you asked for .",
            Action::Closing => "thank you for using our service . goodbye .",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReqStatus {
    Unrequested,
    Requested,
    Provided,
}

/// What the user wants out of the dialog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    /// Requestable slot indices, non-empty, in the order the user asks.
    pub requestables: Vec<usize>,
    /// Whether the user asks for another option after the first result.
    pub wants_alternative: bool,
}

impl Goal {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut slots = vec![0, 1, 2];
        slots.shuffle(rng);
        let k = rng.gen_range(1..=3);
        slots.truncate(k);
        Self { requestables: slots, wants_alternative: rng.gen_bool(0.3) }
    }
}

/// The user's dialog act for one turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserAct {
    Inform(Vec<usize>),
    Request(usize),
    AskAlternative,
    Closing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub informed: [bool; 3],
    pub requestables: [ReqStatus; 3],
    pub db_queried: bool,
    pub results_presented: bool,
    pub alternative_requested: bool,
    pub alternative_presented: bool,
    pub user_closed: bool,
    pub last_action: Option<Action>,
    pub turn: usize,
    pub goal: Goal,
}

/// The part of the state that counts as information gained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntitySnapshot {
    informed: [bool; 3],
    requestables: [ReqStatus; 3],
    results_presented: bool,
    alternative_presented: bool,
    user_closed: bool,
}

pub const FEATURE_DIM: usize = 3 + 3 + 3 + 4 + NUM_ACTIONS + 1 + 1;

impl EnvState {
    pub fn new(goal: Goal) -> Self {
        Self {
            informed: [false; 3],
            requestables: [ReqStatus::Unrequested; 3],
            db_queried: false,
            results_presented: false,
            alternative_requested: false,
            alternative_presented: false,
            user_closed: false,
            last_action: None,
            turn: 0,
            goal,
        }
    }

    pub fn snapshot(&self) -> EntitySnapshot {
        EntitySnapshot {
            informed: self.informed,
            requestables: self.requestables,
            results_presented: self.results_presented,
            alternative_presented: self.alternative_presented,
            user_closed: self.user_closed,
        }
    }

    /// Every goal requestable has been provided.
    pub fn goal_satisfied(&self) -> bool {
        self.goal.requestables.iter().all(|&r| self.requestables[r] == ReqStatus::Provided)
    }

    /// Slot flags, one-hot last action (with a slot for "none") and the
    /// turn count scaled to `[0, 1]`.
    pub fn features(&self) -> Vec<f64> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut f = Vec::with_capacity(FEATURE_DIM);
        f.extend(self.informed.iter().map(|&b| flag(b)));
        f.extend(self.requestables.iter().map(|&s| flag(s == ReqStatus::Requested)));
        f.extend(self.requestables.iter().map(|&s| flag(s == ReqStatus::Provided)));
        f.extend([flag(self.db_queried), flag(self.results_presented), flag(self.alternative_requested), flag(self.user_closed)]);
        let mut last = [0.0; NUM_ACTIONS + 1];
        last[self.last_action.map_or(NUM_ACTIONS, Action::id)] = 1.0;
        f.extend(last);
        f.push(self.turn as f64 / MAX_TURNS as f64);
        debug_assert_eq!(f.len(), FEATURE_DIM);
        f
    }

    /// Applies the system's action to the state.
    pub fn apply_action(&mut self, action: Action) {
        match action {
            Action::PresentResult => self.results_presented = true,
            Action::PresentAlternative => {
                if self.results_presented {
                    self.alternative_presented = true;
                    self.alternative_requested = false;
                }
            }
            Action::GiveInfo => {
                for s in self.requestables.iter_mut() {
                    if *s == ReqStatus::Requested {
                        *s = ReqStatus::Provided;
                    }
                }
            }
            _ => {}
        }
        self.last_action = Some(action);
        self.turn += 1;
    }
}

/// Allowed system actions. Presenting needs a database query, which runs
/// once every informable slot is known; alternatives, information and
/// closing need a presented result; already-known slots are not asked for
/// again. Some action is always allowed: an ask while a slot is unknown,
/// otherwise a presentation.
pub fn action_mask(state: &EnvState) -> [bool; NUM_ACTIONS] {
    let mut mask = [true; NUM_ACTIONS];
    for a in Action::ALL {
        mask[a.id()] = match a {
            Action::AskFood | Action::AskPrice | Action::AskArea => !state.informed[a.asked_slot().expect("ask action")],
            Action::PresentResult => state.db_queried,
            Action::PresentAlternative | Action::GiveInfo => state.results_presented,
            Action::Closing => state.results_presented || state.user_closed,
        };
    }
    mask
}

const INFORM_PHRASES: [&str; 3] = ["[value_food] food", "[value_price] price", "the [value_area] of town"];

fn inform_utterance(slots: &[usize], rng: &mut impl Rng) -> String {
    if slots.is_empty() {
        return ["i am looking for a restaurant .", "can you help me find a place to eat ?"].choose(rng).expect("non-empty").to_string();
    }
    let parts: Vec<&str> = slots.iter().map(|&s| INFORM_PHRASES[s]).collect();
    let body = parts.join(" and ");
    let frames = ["i would like {} please .", "let's try {} .", "looking for {} ."];
    frames.choose(rng).expect("non-empty").replace("{}", &body)
}

fn request_utterance(slot: usize, rng: &mut impl Rng) -> String {
    let frames = ["what is their [slot_{}] ?", "great . can i have the [slot_{}] ?", "could you tell me the [slot_{}] ?"];
    frames.choose(rng).expect("non-empty").replace("{}", REQUESTABLE[slot])
}

/// The user's response to the system's last action. Updates slot status and
/// returns the act with a delexicalised utterance.
pub fn simulate_user(state: &mut EnvState, rng: &mut impl Rng) -> (UserAct, String) {
    let act = match state.last_action {
        None => {
            let slots: Vec<usize> = (0..3).filter(|_| rng.gen_bool(0.5)).collect();
            UserAct::Inform(slots)
        }
        Some(a) if a.asked_slot().is_some() => UserAct::Inform(vec![a.asked_slot().expect("ask action")]),
        Some(Action::PresentResult | Action::PresentAlternative) if state.results_presented => {
            if state.goal.wants_alternative && !state.alternative_presented {
                UserAct::AskAlternative
            } else {
                next_request(state)
            }
        }
        Some(Action::GiveInfo) => next_request(state),
        _ => next_request(state),
    };
    match &act {
        UserAct::Inform(slots) => {
            for &s in slots {
                state.informed[s] = true;
            }
        }
        UserAct::Request(r) => {
            if state.requestables[*r] == ReqStatus::Unrequested {
                state.requestables[*r] = ReqStatus::Requested;
            }
        }
        UserAct::AskAlternative => state.alternative_requested = true,
        UserAct::Closing => state.user_closed = true,
    }
    if state.informed.iter().all(|&b| b) {
        state.db_queried = true;
    }
    let text = match &act {
        UserAct::Inform(slots) => inform_utterance(slots, rng),
        UserAct::Request(r) => request_utterance(*r, rng),
        UserAct::AskAlternative => ["what other options are there ?", "anything else like that ?"].choose(rng).expect("non-empty").to_string(),
        UserAct::Closing => ["thank you , that is all .", "great , thanks . bye ."].choose(rng).expect("non-empty").to_string(),
    };
    (act, text)
}

/// Repeats a pending request, asks for the next goal slot, or closes.
fn next_request(state: &EnvState) -> UserAct {
    let goal = &state.goal.requestables;
    if let Some(&r) = goal.iter().find(|&&r| state.requestables[r] == ReqStatus::Requested) {
        return UserAct::Request(r);
    }
    match goal.iter().find(|&&r| state.requestables[r] == ReqStatus::Unrequested) {
        Some(&r) => UserAct::Request(r),
        None => UserAct::Closing,
    }
}

/// Asks for unset slots in order, presents, offers an alternative when asked,
/// gives information, and closes once the user has.
pub fn rule_agent(state: &EnvState) -> Action {
    if state.user_closed {
        return Action::Closing;
    }
    if let Some(s) = state.informed.iter().position(|&b| !b) {
        return Action::ALL[s];
    }
    if !state.results_presented {
        return Action::PresentResult;
    }
    if state.alternative_requested {
        return Action::PresentAlternative;
    }
    if state.requestables.contains(&ReqStatus::Requested) {
        return Action::GiveInfo;
    }
    Action::Closing
}

/// Dialogs between the simulator and the rule agent, one exchange per user
/// turn paired with the system reply. The closing exchange carries the
/// final user turn.
pub fn simulated_corpus(num_dialogs: usize, rng: &mut impl Rng) -> Vec<Dialog> {
    (0..num_dialogs)
        .map(|d| {
            let mut state = EnvState::new(Goal::sample(rng));
            let mut exchanges = Vec::new();
            loop {
                let (_, user) = simulate_user(&mut state, rng);
                let action = rule_agent(&state);
                state.apply_action(action);
                exchanges.push(Exchange { user_tokens: tokenize(&user), system_tokens: tokenize(action.template()), entities: vec![], turn_index: exchanges.len() });
                if action == Action::Closing || state.turn >= MAX_TURNS {
                    break;
                }
            }
            Dialog { dialog_id: format!("sim-{d:05}"), exchanges }
        })
        .collect()
}

/// System action of every exchange of a [`simulated_corpus`], recovered from
/// the system template.
pub fn template_action(system_tokens: &[String]) -> Option<Action> {
    let text = system_tokens.join(" ");
    Action::ALL.into_iter().find(|a| tokenize(a.template()).join(" ") == text)
}
