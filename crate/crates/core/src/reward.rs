//! Response-side reward: five binary quality criteria aggregated by product,
//! plus the weighted combination with the profile reward.

use serde::{Deserialize, Serialize};

use crate::env::{AgentAction, DialogueState, Turn};
use crate::error::{Error, Result};
use crate::profile::{normalize_text, text_eq, Profile, SlotMatcher};

/// Diagnostic alignment dimensions, each in `[0, 1]`. Not part of the reward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentDimensions {
    pub preference_expression: f64,
    pub style_consistency: f64,
    pub goal_alignment: f64,
    pub persona_coherence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseJudgment {
    pub naturalness: bool,
    pub relevance: bool,
    pub logical_consistency: bool,
    pub engagement: bool,
    pub informativeness: bool,
    pub dimensions: AlignmentDimensions,
}

impl ResponseJudgment {
    /// Criteria from the low five bits, naturalness first.
    pub fn from_bits(bits: u8) -> Self {
        let bit = |i: u8| bits & (1 << i) != 0;
        ResponseJudgment {
            naturalness: bit(0),
            relevance: bit(1),
            logical_consistency: bit(2),
            engagement: bit(3),
            informativeness: bit(4),
            dimensions: AlignmentDimensions::default(),
        }
    }

    pub fn criteria(&self) -> [bool; 5] {
        [
            self.naturalness,
            self.relevance,
            self.logical_consistency,
            self.engagement,
            self.informativeness,
        ]
    }
}

/// `N·R·L·G·F`: 1 only when every criterion holds.
pub fn response_reward(j: &ResponseJudgment) -> f64 {
    j.criteria().iter().map(|&c| if c { 1.0 } else { 0.0 }).product()
}

/// Scores an agent action against the dialogue so far.
pub trait ResponseJudge: Send + Sync {
    fn judge(&self, action: &AgentAction, state: &DialogueState, estimate: &Profile) -> Result<ResponseJudgment>;
}

/// Rule-based judge over structured responses.
///
/// * relevance: the response addresses a slot the latest user utterance talked about
/// * logical consistency: every addressed value matches the agent's own estimate and
///   does not contradict an earlier agent statement the user has not since revised
/// * engagement: the response carries a follow-up
/// * informativeness: at least one slot is addressed once anything has been revealed
/// * naturalness: always satisfied, rendered text is well-formed by construction
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl RuleJudge {
    fn validate(action: &AgentAction) -> Result<()> {
        let resp = &action.response;
        if resp.text.trim().is_empty() {
            return Err(Error::Validation("agent response has no surface text".into()));
        }
        let mut seen = Vec::new();
        for (slot, value) in &resp.addressed {
            let key = normalize_text(slot);
            if key.is_empty() || value.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "addressed slot {slot:?} has an empty name or value"
                )));
            }
            if seen.contains(&key) {
                return Err(Error::Validation(format!("slot {slot:?} addressed twice")));
            }
            seen.push(key);
        }
        Ok(())
    }

    /// True when `(slot, value)` contradicts an earlier agent statement that
    /// no later user evidence justifies.
    fn contradicts_history(state: &DialogueState, slot: &str, value: &str) -> bool {
        state.turns.iter().enumerate().any(|(i, turn)| {
            let Turn::Agent(prior) = turn else { return false };
            let clash = prior
                .addressed
                .iter()
                .any(|(s, v)| text_eq(s, slot) && !text_eq(v, value));
            clash
                && !state.turns[i + 1..].iter().any(|later| match later {
                    Turn::User(u) => u
                        .evidence
                        .iter()
                        .any(|e| text_eq(&e.slot, slot) && text_eq(&e.value, value)),
                    Turn::Agent(_) => false,
                })
        })
    }
}

impl ResponseJudge for RuleJudge {
    fn judge(&self, action: &AgentAction, state: &DialogueState, estimate: &Profile) -> Result<ResponseJudgment> {
        Self::validate(action)?;
        let addressed = &action.response.addressed;
        let topic: Vec<String> = state
            .latest_user()
            .map(|u| u.topic.iter().map(|s| normalize_text(s)).collect())
            .unwrap_or_default();
        let relevance = topic.is_empty()
            || addressed
                .iter()
                .any(|(slot, _)| topic.contains(&normalize_text(slot)));

        let consistent_with_estimate = addressed
            .iter()
            .filter(|(slot, value)| estimate.get(slot).is_some_and(|v| text_eq(v, value)))
            .count();
        let coherent = addressed
            .iter()
            .filter(|(slot, value)| !Self::contradicts_history(state, slot, value))
            .count();
        let logical_consistency = consistent_with_estimate == addressed.len() && coherent == addressed.len();

        let anything_revealed = state.evidence().next().is_some();
        let informativeness = !addressed.is_empty() || !anything_revealed;
        let engagement = action.response.follow_up;

        let fraction = |n: usize| {
            if addressed.is_empty() {
                1.0
            } else {
                n as f64 / addressed.len() as f64
            }
        };
        let dimensions = AlignmentDimensions {
            preference_expression: if addressed.is_empty() && anything_revealed {
                0.0
            } else {
                fraction(consistent_with_estimate)
            },
            style_consistency: if engagement { 1.0 } else { 0.0 },
            goal_alignment: if relevance { 1.0 } else { 0.0 },
            persona_coherence: fraction(coherent),
        };
        Ok(ResponseJudgment {
            naturalness: true,
            relevance,
            logical_consistency,
            engagement,
            informativeness,
            dimensions,
        })
    }
}

/// Evaluation verdict with access to the user's true profile: the response is
/// fully satisfactory and personalizes on at least one correct attribute.
pub fn aligned_with_truth(judgment: &ResponseJudgment, action: &AgentAction, truth: &Profile, matcher: &SlotMatcher) -> bool {
    let addressed = &action.response.addressed;
    response_reward(judgment) == 1.0
        && !addressed.is_empty()
        && addressed
            .iter()
            .all(|(slot, value)| truth.get(slot).is_some_and(|t| matcher.matches(slot, value, t)))
}

/// Weights `(w_p, w_r)` applied to profile and response rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub profile: f64,
    pub response: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            profile: 1.0,
            response: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn new(profile: f64, response: f64) -> Result<Self> {
        let w = RewardWeights { profile, response };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.profile >= 0.0 && self.response >= 0.0) || !self.profile.is_finite() || !self.response.is_finite() {
            return Err(Error::Argument(format!(
                "reward weights must be finite and non-negative, got ({}, {})",
                self.profile, self.response
            )));
        }
        Ok(())
    }

    /// Parses `"wp,wr"`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let [p, r] = parts.as_slice() else {
            return Err(Error::Argument(format!("weights {text:?} are not of the form wp,wr")));
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Argument(format!("bad weight {s:?}")))
        };
        Self::new(num(p)?, num(r)?)
    }

    /// Curve label: PRR for both rewards, PR profile only, RR response only.
    pub fn label(&self) -> String {
        match (self.profile > 0.0, self.response > 0.0) {
            (true, true) if self.profile == 1.0 && self.response == 1.0 => "PRR".into(),
            (true, false) => "PR".into(),
            (false, true) => "RR".into(),
            _ => format!("W{}-{}", self.profile, self.response),
        }
    }
}

/// `w_p·profile + w_r·response`.
pub fn combined_reward(profile: f64, response: f64, weights: RewardWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.profile * profile + weights.response * response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{AgentResponse, DialogueState};
    use crate::profile::SlotSchema;
    use crate::user_sim::{Evidence, UserUtterance};

    fn user(turn: usize, slot: &str, value: &str) -> UserUtterance {
        UserUtterance {
            turn,
            text: format!("my {slot} is {value}"),
            evidence: vec![Evidence {
                slot: slot.into(),
                value: value.into(),
            }],
            topic: vec![slot.into()],
            shift: false,
        }
    }

    fn hello() -> UserUtterance {
        UserUtterance {
            turn: 1,
            text: "Hello".into(),
            evidence: vec![],
            topic: vec![],
            shift: false,
        }
    }

    fn respond(pairs: &[(&str, &str)]) -> AgentResponse {
        AgentResponse::new(pairs.iter().map(|(s, v)| (s.to_string(), v.to_string())).collect(), true)
    }

    fn estimate(pairs: &[(&str, &str)]) -> Profile {
        Profile::from_pairs(SlotSchema::standard(), pairs.iter().copied()).unwrap()
    }

    #[test]
    fn product_examples() {
        assert_eq!(response_reward(&ResponseJudgment::from_bits(0b11111)), 1.0);
        assert_eq!(response_reward(&ResponseJudgment::from_bits(0b01111)), 0.0);
    }

    #[test]
    fn product_is_monotone() {
        for bits in 0u8..32 {
            for flip in 0..5 {
                let up = bits | (1 << flip);
                assert!(response_reward(&ResponseJudgment::from_bits(up)) >= response_reward(&ResponseJudgment::from_bits(bits)));
            }
        }
    }

    #[test]
    fn on_topic_consistent_response_passes() {
        let mut state = DialogueState::new(hello());
        state.push_agent(respond(&[])).unwrap();
        state.push_user(user(2, "Occupation", "nurse")).unwrap();
        let est = estimate(&[("Occupation", "nurse")]);
        let action = AgentAction::new(respond(&[("Occupation", "nurse")]), est.clone());
        let j = RuleJudge.judge(&action, &state, &est).unwrap();
        assert_eq!(j.criteria(), [true; 5]);
        assert_eq!(response_reward(&j), 1.0);
        assert!(aligned_with_truth(&j, &action, &est, &SlotMatcher::ExactNormalized));
    }

    #[test]
    fn slot_absent_from_estimate_fails() {
        let mut state = DialogueState::new(hello());
        state.push_agent(respond(&[])).unwrap();
        state.push_user(user(2, "Occupation", "nurse")).unwrap();
        let est = estimate(&[("Age", "34")]);
        let action = AgentAction::new(respond(&[("Occupation", "nurse")]), est.clone());
        let j = RuleJudge.judge(&action, &state, &est).unwrap();
        assert!(!j.logical_consistency);
        assert_eq!(response_reward(&j), 0.0);
    }

    #[test]
    fn self_contradiction_fails() {
        let mut state = DialogueState::new(hello());
        state.push_agent(respond(&[])).unwrap();
        state.push_user(user(2, "Location", "Paris")).unwrap();
        state.push_agent(respond(&[("Location", "Paris")])).unwrap();
        state.push_user(user(3, "Age", "34")).unwrap();
        state.push_agent(respond(&[("Age", "34")])).unwrap();
        state.push_user(user(4, "Gender", "female")).unwrap();
        state.push_agent(respond(&[("Gender", "female")])).unwrap();
        state.push_user(user(5, "Occupation", "nurse")).unwrap();

        let est = estimate(&[("Location", "Lyon"), ("Occupation", "nurse")]);
        let action = AgentAction::new(respond(&[("Occupation", "nurse"), ("Location", "Lyon")]), est.clone());
        let j = RuleJudge.judge(&action, &state, &est).unwrap();
        assert!(!j.logical_consistency);
        assert_eq!(j.dimensions.persona_coherence, 0.5);

        // A user revision justifies the changed statement.
        state.push_agent(respond(&[("Occupation", "nurse")])).unwrap();
        state.push_user(user(6, "Location", "Lyon")).unwrap();
        let j = RuleJudge.judge(&action, &state, &est).unwrap();
        assert!(j.logical_consistency);
    }

    #[test]
    fn silence_is_uninformative_once_evidence_exists() {
        let state = DialogueState::new(hello());
        let est = estimate(&[]);
        let quiet = AgentAction::new(respond(&[]), est.clone());
        assert_eq!(RuleJudge.judge(&quiet, &state, &est).unwrap().criteria(), [true; 5]);

        let mut state = state;
        state.push_agent(respond(&[])).unwrap();
        state.push_user(user(2, "Age", "34")).unwrap();
        let j = RuleJudge.judge(&quiet, &state, &est).unwrap();
        assert!(!j.informativeness && !j.relevance);
    }

    #[test]
    fn malformed_action_rejected() {
        let state = DialogueState::new(hello());
        let est = estimate(&[]);
        let mut resp = respond(&[("Age", "34")]);
        resp.text.clear();
        assert!(matches!(
            RuleJudge.judge(&AgentAction::new(resp, est.clone()), &state, &est),
            Err(Error::Validation(_))
        ));
        let dup = respond(&[("Age", "34"), ("age", "35")]);
        assert!(RuleJudge.judge(&AgentAction::new(dup, est.clone()), &state, &est).is_err());
    }

    #[test]
    fn combined_examples() {
        let w = RewardWeights::default();
        assert!((combined_reward(0.6667, 1.0, w).unwrap() - 1.6667).abs() < 1e-12);
        let pr = RewardWeights::new(1.0, 0.0).unwrap();
        for x in [0.0, 0.3, 1.0] {
            for y in [0.0, 1.0] {
                assert_eq!(combined_reward(x, y, pr).unwrap(), x);
            }
        }
        assert_eq!(combined_reward(0.0, 0.0, RewardWeights::new(3.0, 2.0).unwrap()).unwrap(), 0.0);
        assert!(matches!(
            combined_reward(1.0, 1.0, RewardWeights { profile: -1.0, response: 1.0 }),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn weight_labels_and_parsing() {
        assert_eq!(RewardWeights::parse("1,1").unwrap().label(), "PRR");
        assert_eq!(RewardWeights::parse("1, 0").unwrap().label(), "PR");
        assert_eq!(RewardWeights::parse("0,1").unwrap().label(), "RR");
        assert!(RewardWeights::parse("1").is_err());
        assert!(RewardWeights::parse("-1,1").is_err());
    }
}
