//! Scripted, profile-grounded user simulator.
//!
//! The simulator opens every dialogue with a fixed greeting and then reveals
//! its profile a few attributes per turn, in a seeded order, through a
//! template bank. Every revealed attribute is attached to the utterance as
//! machine-readable evidence. A configured preference conflict swaps profile
//! values mid-dialogue; the swapped slots are re-announced in the user's reply
//! at the conflict turn.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::template_bank;
use crate::env::{DialogueState, Turn};
use crate::profile::{normalize_text, text_eq, Profile, SlotMatcher};
use crate::error::{Error, Result};

pub const OPENING_UTTERANCE: &str = "Hello";

/// Mid-dialogue preference change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    /// Dialogue turn at which the new values become the truth.
    pub turn: usize,
    pub replace: IndexMap<String, String>,
}

/// Everything needed to run one simulated user; also the scenario file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserConfig {
    #[serde(default)]
    pub id: String,
    pub profile: Profile,
    /// New attributes revealed by the user utterance of each turn (index 0 is
    /// turn 1, which never reveals). Empty means one per turn.
    #[serde(default)]
    pub reveal_schedule: Vec<usize>,
    #[serde(default)]
    pub conflict: Option<Conflict>,
    pub horizon: usize,
    #[serde(default)]
    pub style_seed: u64,
}

impl UserConfig {
    pub fn new(profile: Profile, horizon: usize, style_seed: u64) -> Self {
        UserConfig {
            id: String::new(),
            profile,
            reveal_schedule: Vec::new(),
            conflict: None,
            horizon,
            style_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.profile.is_empty() {
            return Err(Error::Config("user profile is empty".into()));
        }
        let total: usize = self.reveal_schedule.iter().sum();
        if total > self.profile.len() * self.horizon {
            return Err(Error::Config(format!(
                "reveal schedule reveals {total} attributes, more than {} x {}",
                self.profile.len(),
                self.horizon
            )));
        }
        if let Some(conflict) = &self.conflict {
            if !(1..=self.horizon).contains(&conflict.turn) {
                return Err(Error::Config(format!(
                    "conflict turn {} outside [1, {}]",
                    conflict.turn, self.horizon
                )));
            }
            if conflict.replace.is_empty() {
                return Err(Error::Config("conflict replaces no slots".into()));
            }
            let mut probe = self.profile.clone();
            for (slot, value) in &conflict.replace {
                probe.insert(slot.clone(), value.clone())?;
            }
        }
        Ok(())
    }

    /// Number of new attributes the user utterance of `turn` reveals.
    pub fn reveal_count(&self, turn: usize) -> usize {
        if turn <= 1 {
            0
        } else if self.reveal_schedule.is_empty() {
            1
        } else {
            self.reveal_schedule.get(turn - 1).copied().unwrap_or(0)
        }
    }

    /// Ground truth in force at `turn`, with any conflict already applied.
    pub fn truth_at(&self, turn: usize) -> Profile {
        let mut truth = self.profile.clone();
        if let Some(conflict) = self.conflict.as_ref().filter(|c| turn >= c.turn) {
            for (slot, value) in &conflict.replace {
                truth
                    .insert(slot.clone(), value.clone())
                    .expect("conflict entries validated against the schema");
            }
        }
        truth
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub slot: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserUtterance {
    pub turn: usize,
    pub text: String,
    /// Attributes newly revealed by this utterance.
    pub evidence: Vec<Evidence>,
    /// Slots the utterance talks about (evidence slots, or the restated slot).
    #[serde(default)]
    pub topic: Vec<String>,
    #[serde(default)]
    pub shift: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub turn_index: usize,
    /// Slot names exposed so far, verbatim spelling from the active profile.
    pub revealed: Vec<String>,
    pub active_profile: Profile,
    /// Reveal queue: active-profile slots in their seeded order.
    pub reveal_order: Vec<String>,
    pub style_seed: u64,
}

impl UserState {
    pub fn is_revealed(&self, slot: &str) -> bool {
        self.revealed.iter().any(|s| text_eq(s, slot))
    }

    fn unreveal(&mut self, slot: &str) {
        self.revealed.retain(|s| !text_eq(s, slot));
    }
}

fn reveal_order(profile: &Profile, style_seed: u64) -> Vec<String> {
    let schema = profile.schema();
    let rank = |slot: &str| {
        let key = normalize_text(slot);
        schema
            .slots
            .iter()
            .position(|s| normalize_text(s) == key)
            .unwrap_or(schema.slots.len())
    };
    let mut order: Vec<(usize, usize, String)> = profile
        .slot_names()
        .enumerate()
        .map(|(i, s)| (rank(s), i, s.to_owned()))
        .collect();
    order.sort();
    let mut order: Vec<String> = order.into_iter().map(|(_, _, s)| s).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(style_seed));
    order
}

fn style_rng(style_seed: u64, turn: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(style_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ turn as u64)
}

fn render(key: &str, slot: &str, value: &str, rng: &mut ChaCha8Rng) -> String {
    let bank = template_bank();
    let templates = bank
        .get(key)
        .or_else(|| bank.get("_default"))
        .expect("template bank has a default entry");
    let template = templates.choose(rng).expect("template lists are non-empty");
    template
        .replace("{slot}", &slot.to_lowercase())
        .replace("{value}", value)
}

/// The fixed greeting that opens every dialogue, and the initial state.
pub fn first_utterance(config: &UserConfig) -> (UserUtterance, UserState) {
    let state = UserState {
        turn_index: 1,
        revealed: Vec::new(),
        active_profile: config.profile.clone(),
        reveal_order: reveal_order(&config.profile, config.style_seed),
        style_seed: config.style_seed,
    };
    let utterance = UserUtterance {
        turn: 1,
        text: OPENING_UTTERANCE.into(),
        evidence: Vec::new(),
        topic: Vec::new(),
        shift: false,
    };
    (utterance, state)
}

/// The user's reply closing turn `state.turn_index`, i.e. utterance
/// `u_{t+1}`. Returns `None` once the horizon is reached.
pub fn next_utterance(
    state: &UserState,
    history: &DialogueState,
    config: &UserConfig,
) -> Option<(UserUtterance, UserState)> {
    if state.turn_index >= config.horizon {
        return None;
    }
    let mut next = state.clone();
    next.turn_index += 1;
    let turn = next.turn_index;
    let mut rng = style_rng(config.style_seed, turn);

    let mut evidence_slots: Vec<String> = Vec::new();
    let mut shift = false;
    if let Some(conflict) = config.conflict.as_ref().filter(|c| c.turn == state.turn_index) {
        shift = true;
        for (slot, value) in &conflict.replace {
            let is_new = !next.active_profile.contains_slot(slot);
            next.active_profile
                .insert(slot.clone(), value.clone())
                .expect("conflict entries validated against the schema");
            if is_new {
                next.reveal_order.push(slot.clone());
            }
            next.unreveal(slot);
            let canonical = canonical_slot(&next.active_profile, slot);
            next.reveal_order.retain(|s| !text_eq(s, &canonical));
            next.reveal_order.insert(0, canonical.clone());
            evidence_slots.push(canonical);
        }
    }

    let scheduled = config.reveal_count(turn);
    let fresh: Vec<String> = next
        .reveal_order
        .iter()
        .filter(|s| !next.is_revealed(s) && !evidence_slots.contains(s))
        .take(scheduled)
        .cloned()
        .collect();
    evidence_slots.extend(fresh);

    let evidence: Vec<Evidence> = evidence_slots
        .iter()
        .map(|slot| Evidence {
            slot: slot.clone(),
            value: next
                .active_profile
                .get(slot)
                .expect("evidence slots come from the active profile")
                .to_owned(),
        })
        .collect();
    for e in &evidence {
        next.revealed.push(e.slot.clone());
    }

    let mut sentences = Vec::new();
    if shift {
        sentences.push(render("_shift", "", "", &mut rng));
    }
    let topic = if evidence.is_empty() {
        let slot = restate_slot(&next, history, turn);
        let value = next.active_profile.get(&slot).unwrap_or_default().to_owned();
        sentences.push(render("_chitchat", &slot, &value, &mut rng));
        vec![slot]
    } else {
        for e in &evidence {
            sentences.push(render(&e.slot, &e.slot, &e.value, &mut rng));
        }
        evidence_slots
    };

    let utterance = UserUtterance {
        turn,
        text: sentences.join(" "),
        evidence,
        topic,
        shift,
    };
    Some((utterance, next))
}

fn canonical_slot(profile: &Profile, slot: &str) -> String {
    profile
        .slot_names()
        .find(|s| text_eq(s, slot))
        .unwrap_or(slot)
        .to_owned()
}

/// Slot restated in a chit-chat turn: one the agent just got wrong, otherwise
/// a rotation over the revealed slots.
fn restate_slot(state: &UserState, history: &DialogueState, turn: usize) -> String {
    let matcher = SlotMatcher::ExactNormalized;
    if let Some(Turn::Agent(resp)) = history.turns.last() {
        for (slot, value) in &resp.addressed {
            if let Some(truth) = state.active_profile.get(slot) {
                if state.is_revealed(slot) && !matcher.matches(slot, value, truth) {
                    return canonical_slot(&state.active_profile, slot);
                }
            }
        }
    }
    let pool: Vec<&String> = state
        .reveal_order
        .iter()
        .filter(|s| state.is_revealed(s))
        .collect();
    if pool.is_empty() {
        state.reveal_order[turn % state.reveal_order.len()].clone()
    } else {
        pool[turn % pool.len()].clone()
    }
}

/// Fraction of `truth`'s slots that the user has revealed so far.
pub fn theoretical_max(state: &UserState, truth: &Profile) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let revealed: BTreeSet<String> = state.revealed.iter().map(|s| normalize_text(s)).collect();
    let hit = truth
        .slot_names()
        .filter(|s| revealed.contains(&normalize_text(s)))
        .count();
    hit as f64 / truth.len() as f64
}

/// Shape of a generated scenario set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub count: usize,
    /// Draw some attributes from slots outside the standard ten.
    pub open_schema: bool,
    pub horizon: usize,
    /// Turn at which the first-revealed attribute changes value.
    pub conflict_turn: Option<usize>,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            count: 32,
            open_schema: false,
            horizon: 10,
            conflict_turn: None,
            seed: 0,
        }
    }
}

/// Swaps the value of the first attribute the user reveals.
pub fn default_conflict(config: &UserConfig, turn: usize, rng: &mut impl rand::Rng) -> Conflict {
    let slot = reveal_order(&config.profile, config.style_seed)
        .into_iter()
        .next()
        .expect("validated profiles are non-empty");
    let old = config.profile.get(&slot).unwrap_or_default();
    let new = crate::profile::alter_value(&slot, old, rng);
    Conflict {
        turn,
        replace: IndexMap::from([(slot, new)]),
    }
}

/// Seeded synthetic users with values drawn from the bundled pools.
pub fn generate_scenarios(spec: &ScenarioSpec) -> Result<Vec<UserConfig>> {
    if spec.count == 0 {
        return Err(Error::Argument("scenario count must be at least 1".into()));
    }
    let pools = crate::data::value_pools();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut slots: Vec<(&String, &Vec<String>)> = pools.standard.iter().collect();
        let schema = if spec.open_schema {
            // swap a few standard slots for extended ones
            slots.shuffle(&mut rng);
            slots.truncate(6);
            let mut extra: Vec<(&String, &Vec<String>)> = pools.extended.iter().collect();
            extra.shuffle(&mut rng);
            slots.extend(extra.into_iter().take(4));
            crate::profile::SlotSchema::open()
        } else {
            crate::profile::SlotSchema::standard()
        };
        let mut profile = Profile::new(schema);
        for (slot, values) in slots {
            let value = values.choose(&mut rng).expect("value pools are non-empty");
            profile.insert(slot.clone(), value.clone())?;
        }
        let mut config = UserConfig::new(profile, spec.horizon, rand::Rng::gen(&mut rng));
        config.id = format!("user-{i:03}");
        if let Some(turn) = spec.conflict_turn {
            config.conflict = Some(default_conflict(&config, turn, &mut rng));
        }
        config.validate()?;
        out.push(config);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DialogueState;
    use crate::profile::{SlotSchema, STANDARD_SLOTS};

    fn profile10() -> Profile {
        let values = [
            "34", "female", "skiing, chess", "law degree", "calm optimist", "nurse", "married",
            "eldest of five siblings", "Paris", "vegetarian",
        ];
        Profile::from_pairs(SlotSchema::standard(), STANDARD_SLOTS.iter().copied().zip(values)).unwrap()
    }

    fn run(config: &UserConfig) -> (Vec<UserUtterance>, Vec<UserState>) {
        let (u1, mut state) = first_utterance(config);
        let history = DialogueState::new(u1.clone());
        let mut utts = vec![u1];
        let mut states = vec![state.clone()];
        while let Some((u, s)) = next_utterance(&state, &history, config) {
            utts.push(u);
            states.push(s.clone());
            state = s;
        }
        (utts, states)
    }

    #[test]
    fn opener_is_fixed() {
        let mut cfg = UserConfig::new(profile10(), 10, 1);
        cfg.reveal_schedule = vec![3; 10];
        let (u, s) = first_utterance(&cfg);
        assert_eq!(u.text, "Hello");
        assert!(u.evidence.is_empty());
        assert_eq!(s.turn_index, 1);
        assert!(s.revealed.is_empty());

        let other = Profile::from_pairs(SlotSchema::standard(), [("Age", "70")]).unwrap();
        let (u2, _) = first_utterance(&UserConfig::new(other, 10, 99));
        assert_eq!(u, u2);
    }

    #[test]
    fn one_reveal_per_turn() {
        let cfg = UserConfig::new(profile10(), 10, 5);
        let (utts, states) = run(&cfg);
        assert_eq!(utts.len(), 10);
        assert_eq!(utts[1].turn, 2);
        assert_eq!(utts[1].evidence.len(), 1);
        for (t, s) in states.iter().enumerate() {
            let turn = t + 1;
            assert_eq!(s.revealed.len(), (turn - 1).min(10));
        }
        assert_eq!(theoretical_max(&states[0], &cfg.profile), 0.0);
        assert_eq!(theoretical_max(&states[5], &cfg.profile), 0.5);
    }

    #[test]
    fn chitchat_after_everything_revealed() {
        let mut cfg = UserConfig::new(profile10(), 14, 2);
        cfg.reveal_schedule = vec![0, 5, 5];
        let (utts, states) = run(&cfg);
        assert_eq!(theoretical_max(&states[2], &cfg.profile), 1.0);
        for u in &utts[3..] {
            assert!(u.evidence.is_empty());
            assert_eq!(u.topic.len(), 1);
            let slot = &u.topic[0];
            assert!(u.text.contains(cfg.profile.get(slot).unwrap()), "{}", u.text);
        }
    }

    #[test]
    fn conflict_reannounces_new_value() {
        let mut cfg = UserConfig::new(profile10(), 10, 3);
        let mut replace = IndexMap::new();
        replace.insert("Interests".to_string(), "opera, baking".to_string());
        cfg.conflict = Some(Conflict { turn: 6, replace });
        cfg.validate().unwrap();
        let (utts, _) = run(&cfg);
        let shift = &utts[6];
        assert!(shift.shift);
        assert!(shift
            .evidence
            .iter()
            .any(|e| e.slot == "Interests" && e.value == "opera, baking"));
        for u in &utts[6..] {
            assert!(!u.text.contains("skiing, chess"));
            assert!(u.evidence.iter().all(|e| e.value != "skiing, chess"));
        }
        assert_eq!(cfg.truth_at(5).get("Interests"), Some("skiing, chess"));
        assert_eq!(cfg.truth_at(6).get("Interests"), Some("opera, baking"));
    }

    #[test]
    fn horizon_ends_episode() {
        let cfg = UserConfig::new(profile10(), 1, 0);
        let (u, s) = first_utterance(&cfg);
        assert!(next_utterance(&s, &DialogueState::new(u), &cfg).is_none());
    }

    #[test]
    fn config_validation() {
        let mut cfg = UserConfig::new(profile10(), 0, 0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.horizon = 10;
        cfg.validate().unwrap();
        cfg.reveal_schedule = vec![100, 100];
        assert!(cfg.validate().is_err());
        cfg.reveal_schedule.clear();
        cfg.conflict = Some(Conflict {
            turn: 11,
            replace: [("Age".to_string(), "40".to_string())].into_iter().collect(),
        });
        assert!(cfg.validate().is_err());
        cfg.conflict = Some(Conflict {
            turn: 6,
            replace: [("Pet".to_string(), "cat".to_string())].into_iter().collect(),
        });
        assert!(matches!(cfg.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn scenario_json_round_trip() {
        let mut cfg = UserConfig::new(profile10(), 10, 7);
        cfg.reveal_schedule = vec![1; 10];
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""conflict":null"#));
        let back: UserConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn generated_scenarios_are_seeded() {
        let spec = ScenarioSpec {
            count: 5,
            conflict_turn: Some(6),
            ..ScenarioSpec::default()
        };
        let a = generate_scenarios(&spec).unwrap();
        assert_eq!(a, generate_scenarios(&spec).unwrap());
        assert_eq!(a.len(), 5);
        for cfg in &a {
            assert_eq!(cfg.profile.len(), 10);
            let conflict = cfg.conflict.as_ref().unwrap();
            let (slot, new) = conflict.replace.iter().next().unwrap();
            assert_ne!(cfg.profile.get(slot), Some(new.as_str()));
            assert_eq!(reveal_order(&cfg.profile, cfg.style_seed)[0], *slot);
        }
        assert!(generate_scenarios(&ScenarioSpec { count: 0, ..spec }).is_err());
    }

    #[test]
    fn open_schema_scenarios_use_extra_slots() {
        let spec = ScenarioSpec {
            count: 3,
            open_schema: true,
            ..ScenarioSpec::default()
        };
        for cfg in generate_scenarios(&spec).unwrap() {
            let extra = cfg.profile.slot_names().filter(|s| !cfg.profile.schema().slots.iter().any(|x| x == s)).count();
            assert_eq!(extra, 4);
        }
    }
}
