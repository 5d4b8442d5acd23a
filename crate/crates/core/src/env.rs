//! The multi-turn dialogue MDP.
//!
//! The state is the alternating history `u_1, r_1, …, u_t`; an action is a
//! structured response plus a full profile estimate; the transition is the
//! simulated user's reply. Rewards are computed when the action is taken,
//! before the user replies.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{normalize_text, precision_recall, text_eq, profile_reward, Profile, SlotMatcher, SlotSchema};
use crate::reward::{aligned_with_truth, combined_reward, response_reward, ResponseJudge, ResponseJudgment, RewardWeights, RuleJudge};
use crate::user_sim::{first_utterance, next_utterance, theoretical_max, UserConfig, UserState, UserUtterance};

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    /// `(slot, value)` pairs the response personalizes on.
    pub addressed: Vec<(String, String)>,
    /// Whether the response invites the user to continue.
    pub follow_up: bool,
    pub text: String,
}

impl AgentResponse {
    /// Builds a response and renders its surface text.
    pub fn new(addressed: Vec<(String, String)>, follow_up: bool) -> Self {
        let mut text = if addressed.is_empty() {
            "Nice to chat with you.".to_owned()
        } else {
            let parts: Vec<String> = addressed
                .iter()
                .map(|(s, v)| format!("your {} is {}", s.to_lowercase(), v))
                .collect();
            format!("Since {}, here is something tailored to you.", parts.join(" and "))
        };
        if follow_up {
            text.push_str(" What else would you like to share?");
        }
        AgentResponse {
            addressed,
            follow_up,
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub response: AgentResponse,
    /// Full replacement estimate of the user profile for this turn.
    pub estimate: Profile,
}

impl AgentAction {
    pub fn new(response: AgentResponse, estimate: Profile) -> Self {
        AgentAction { response, estimate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Turn {
    User(UserUtterance),
    Agent(AgentResponse),
}

/// Dialogue history `u_1, r_1, …, u_t` (followed by `r_T` once finished).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub turns: Vec<Turn>,
    /// Number of user utterances so far.
    pub turn_index: usize,
}

impl DialogueState {
    pub fn new(opening: UserUtterance) -> Self {
        DialogueState {
            turns: vec![Turn::User(opening)],
            turn_index: 1,
        }
    }

    pub fn push_agent(&mut self, response: AgentResponse) -> Result<()> {
        if !matches!(self.turns.last(), Some(Turn::User(_))) {
            return Err(Error::Protocol("agent turn must follow a user utterance".into()));
        }
        self.turns.push(Turn::Agent(response));
        Ok(())
    }

    pub fn push_user(&mut self, utterance: UserUtterance) -> Result<()> {
        if !matches!(self.turns.last(), Some(Turn::Agent(_))) {
            return Err(Error::Protocol("user utterance must follow an agent turn".into()));
        }
        self.turns.push(Turn::User(utterance));
        self.turn_index += 1;
        Ok(())
    }

    pub fn latest_user(&self) -> Option<&UserUtterance> {
        self.turns.iter().rev().find_map(|t| match t {
            Turn::User(u) => Some(u),
            Turn::Agent(_) => None,
        })
    }

    /// All evidence revealed so far, oldest first.
    pub fn evidence(&self) -> impl Iterator<Item = &crate::user_sim::Evidence> {
        self.turns.iter().flat_map(|t| match t {
            Turn::User(u) => u.evidence.as_slice(),
            Turn::Agent(_) => &[],
        })
    }

    /// Most recent revealed value for a slot.
    pub fn latest_evidence(&self, slot: &str) -> Option<&str> {
        self.evidence()
            .filter(|e| text_eq(&e.slot, slot))
            .last()
            .map(|e| e.value.as_str())
    }

    /// Slot names with evidence, in first-revealed order.
    pub fn evidence_slots(&self) -> Vec<String> {
        self.evidence_map().into_values().map(|(slot, _)| slot).collect()
    }

    /// Normalized slot name to (first spelling, latest value), in first-revealed order.
    pub fn evidence_map(&self) -> IndexMap<String, (String, &str)> {
        let mut map: IndexMap<String, (String, &str)> = IndexMap::new();
        for e in self.evidence() {
            map.entry(normalize_text(&e.slot))
                .and_modify(|entry| entry.1 = e.value.as_str())
                .or_insert_with(|| (e.slot.clone(), e.value.as_str()));
        }
        map
    }

    /// Strict user/agent alternation starting with a user utterance, and
    /// `turn_index` equal to the number of user utterances.
    pub fn check_alternation(&self) -> Result<()> {
        for (i, turn) in self.turns.iter().enumerate() {
            let user_expected = i % 2 == 0;
            if matches!(turn, Turn::User(_)) != user_expected {
                return Err(Error::Validation(format!("alternation broken at position {i}")));
            }
        }
        let users = self.turns.iter().filter(|t| matches!(t, Turn::User(_))).count();
        if users != self.turn_index {
            return Err(Error::Validation(format!(
                "turn index {} but {users} user utterances",
                self.turn_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub profile: f64,
    pub response: f64,
    /// Always `profile + response`.
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(profile: f64, response: f64) -> Self {
        RewardBreakdown {
            profile,
            response,
            total: profile + response,
        }
    }
}

/// Everything logged for one agent turn; enough to recompute all rewards offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    /// The user utterance the agent responded to.
    pub user: UserUtterance,
    pub action: AgentAction,
    pub judgment: ResponseJudgment,
    pub reward: RewardBreakdown,
    /// Reward under the run's weights; what the learner optimizes.
    pub weighted_reward: f64,
    /// Evaluation verdict against the true profile.
    pub aligned: bool,
    /// Truth in force at this turn.
    pub truth: Profile,
    /// Recall of the estimate against `truth`.
    pub profile_recall: f64,
    pub theoretical_max: f64,
    #[serde(default)]
    pub log_prob: f64,
    #[serde(default)]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema_version: u32,
    pub scenario_id: String,
    pub seed: u64,
    pub gamma: f64,
    pub weights: RewardWeights,
    pub matcher: String,
    pub turns: Vec<TurnRecord>,
    pub final_estimate: Option<Profile>,
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EPISODE_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "episode schema version {} (expected {EPISODE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.turn != i + 1 {
                return Err(Error::Validation(format!("turn {} logged at position {i}", t.turn)));
            }
        }
        Ok(())
    }

    /// `Σ γ^{t-1} R_t` over the weighted per-turn rewards.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for t in &self.turns {
            total += discount * t.weighted_reward;
            discount *= gamma;
        }
        total
    }

    pub fn total_reward(&self) -> f64 {
        self.turns.iter().map(|t| t.reward.total).sum()
    }
}

pub fn write_episodes(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut episodes = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: EpisodeRecord = serde_json::from_str(&line)?;
        ep.validate()?;
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Reward shaping and scoring knobs shared by every step of an episode.
#[derive(Clone)]
pub struct EnvOptions {
    pub weights: RewardWeights,
    pub matcher: SlotMatcher,
    pub gamma: f64,
    pub judge: Arc<dyn ResponseJudge>,
}

impl Default for EnvOptions {
    fn default() -> Self {
        EnvOptions {
            weights: RewardWeights::default(),
            matcher: SlotMatcher::ExactNormalized,
            gamma: 1.0,
            judge: Arc::new(RuleJudge),
        }
    }
}

impl std::fmt::Debug for EnvOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnvOptions")
            .field("weights", &self.weights)
            .field("matcher", &self.matcher)
            .field("gamma", &self.gamma)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub record: TurnRecord,
    pub done: bool,
}

/// One running episode: simulator, history and reward plumbing.
pub struct DialogueEnv {
    config: UserConfig,
    options: EnvOptions,
    user: UserState,
    state: DialogueState,
    done: bool,
}

impl DialogueEnv {
    pub fn reset(config: UserConfig, options: EnvOptions) -> Result<Self> {
        config.validate()?;
        options.weights.validate()?;
        if !(0.0..=1.0).contains(&options.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", options.gamma)));
        }
        let (opening, user) = first_utterance(&config);
        Ok(DialogueEnv {
            config,
            options,
            user,
            state: DialogueState::new(opening),
            done: false,
        })
    }

    pub fn state(&self) -> &DialogueState {
        &self.state
    }

    pub fn user_state(&self) -> &UserState {
        &self.user
    }

    pub fn config(&self) -> &UserConfig {
        &self.config
    }

    pub fn options(&self) -> &EnvOptions {
        &self.options
    }

    pub fn schema(&self) -> &Arc<SlotSchema> {
        self.config.profile.schema()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: AgentAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Protocol("step called on a finished episode".into()));
        }
        let turn = self.state.turn_index;
        let truth = self.config.truth_at(turn);
        let matcher = &self.options.matcher;

        let profile_r = profile_reward(&action.estimate, &truth, matcher)?;
        let (_, recall) = precision_recall(&action.estimate, &truth, matcher)?;
        let judgment = self.options.judge.judge(&action, &self.state, &action.estimate)?;
        let response_r = response_reward(&judgment);
        let weighted = combined_reward(profile_r, response_r, self.options.weights)?;
        let aligned = aligned_with_truth(&judgment, &action, &truth, matcher);
        let ceiling = theoretical_max(&self.user, &truth);
        let user = self
            .state
            .latest_user()
            .cloned()
            .expect("history always holds a user utterance");

        self.state.push_agent(action.response.clone())?;
        match next_utterance(&self.user, &self.state, &self.config) {
            Some((reply, next)) => {
                self.state.push_user(reply)?;
                self.user = next;
            }
            None => self.done = true,
        }

        let record = TurnRecord {
            turn,
            user,
            theoretical_max: ceiling,
            action,
            judgment,
            reward: RewardBreakdown::new(profile_r, response_r),
            weighted_reward: weighted,
            aligned,
            truth,
            profile_recall: recall,
            log_prob: 0.0,
            value: 0.0,
        };
        Ok(StepOutcome {
            record,
            done: self.done,
        })
    }
}

/// What an agent emits for one turn.
#[derive(Debug, Clone)]
pub struct AgentDecision<C> {
    pub action: AgentAction,
    pub choice: C,
    pub log_prob: f64,
    pub value: f64,
}

/// A dialogue policy the environment can roll out.
pub trait Agent: Sync {
    type Choice: Clone + Send;

    fn act(&self, state: &DialogueState, schema: &Arc<SlotSchema>, rng: &mut ChaCha8Rng) -> AgentDecision<Self::Choice>;
}

#[derive(Debug, Clone)]
pub struct Rollout<C> {
    pub record: EpisodeRecord,
    pub choices: Vec<C>,
}

/// Runs one full episode of `config.horizon` agent turns.
pub fn rollout<A: Agent>(agent: &A, config: &UserConfig, options: &EnvOptions, seed: u64) -> Result<Rollout<A::Choice>> {
    let mut env = DialogueEnv::reset(config.clone(), options.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns = Vec::with_capacity(config.horizon);
    let mut choices = Vec::with_capacity(config.horizon);
    loop {
        let decision = agent.act(env.state(), env.schema(), &mut rng);
        let estimate = decision.action.estimate.clone();
        let outcome = env.step(decision.action)?;
        let mut record = outcome.record;
        record.log_prob = decision.log_prob;
        record.value = decision.value;
        turns.push(record);
        choices.push(decision.choice);
        if outcome.done {
            let record = EpisodeRecord {
                schema_version: EPISODE_SCHEMA_VERSION,
                scenario_id: config.id.clone(),
                seed,
                gamma: options.gamma,
                weights: options.weights,
                matcher: options.matcher.label(),
                turns,
                final_estimate: Some(estimate),
            };
            return Ok(Rollout { record, choices });
        }
    }
}

/// Scripted agent that copies every revealed attribute into its estimate and
/// responds on the latest topic.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvidenceOracle;

impl Agent for EvidenceOracle {
    type Choice = ();

    fn act(&self, state: &DialogueState, schema: &Arc<SlotSchema>, _rng: &mut ChaCha8Rng) -> AgentDecision<()> {
        let mut estimate = Profile::new(schema.clone());
        for e in state.evidence() {
            estimate
                .insert(e.slot.clone(), e.value.clone())
                .expect("evidence comes from a profile of this schema");
        }
        let addressed: Vec<(String, String)> = state
            .latest_user()
            .into_iter()
            .flat_map(|u| u.topic.iter())
            .filter_map(|slot| estimate.get(slot).map(|v| (slot.clone(), v.to_owned())))
            .take(1)
            .collect();
        AgentDecision {
            action: AgentAction::new(AgentResponse::new(addressed, true), estimate),
            choice: (),
            log_prob: 0.0,
            value: 0.0,
        }
    }
}

/// Keeps each revealed attribute with probability `keep`; never guesses.
#[derive(Debug, Clone, Copy)]
pub struct PartialEvidenceAgent {
    pub keep: f64,
}

impl Agent for PartialEvidenceAgent {
    type Choice = ();

    fn act(&self, state: &DialogueState, schema: &Arc<SlotSchema>, rng: &mut ChaCha8Rng) -> AgentDecision<()> {
        use rand::Rng;
        let mut estimate = Profile::new(schema.clone());
        for slot in state.evidence_slots() {
            if rng.gen_bool(self.keep) {
                let value = state.latest_evidence(&slot).expect("slot has evidence");
                estimate.insert(slot, value).expect("evidence fits the schema");
            }
        }
        AgentDecision {
            action: AgentAction::new(AgentResponse::new(Vec::new(), rng.gen_bool(0.5)), estimate),
            choice: (),
            log_prob: 0.0,
            value: 0.0,
        }
    }
}
