//! Factored-categorical dialogue policy, linear critic and PPO with GAE.
//!
//! The policy acts on slot-local features with weights shared across slots,
//! so the same parameters work for any schema. Each action factors into an
//! include/skip decision per candidate slot, a choice of which slot (or none)
//! to personalize the response on, and a follow-up flag. Log-probabilities
//! and their gradients are computed in closed form.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{rollout, Agent, AgentAction, AgentDecision, AgentResponse, DialogueState, EnvOptions, EpisodeRecord, Rollout};
use crate::error::{Error, Result};
use crate::profile::{normalize_text, Profile, SlotSchema};
use crate::user_sim::UserConfig;

/// Value the agent writes for a slot it includes without any evidence.
pub const GUESS_VALUE: &str = "unknown";

pub const SLOT_DIM: usize = 4;
pub const GLOBAL_DIM: usize = 4;
pub const POLICY_DIM: usize = 2 * SLOT_DIM + 2 * GLOBAL_DIM;
pub const VALUE_DIM: usize = GLOBAL_DIM + 1;

const INCLUDE: std::ops::Range<usize> = 0..SLOT_DIM;
const RESPOND: std::ops::Range<usize> = SLOT_DIM..2 * SLOT_DIM;
const NONE: std::ops::Range<usize> = 2 * SLOT_DIM..2 * SLOT_DIM + GLOBAL_DIM;
const ENGAGE: std::ops::Range<usize> = 2 * SLOT_DIM + GLOBAL_DIM..POLICY_DIM;

/// Policy input derived from a dialogue state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Candidate slots: schema slots, then any other slot seen in evidence.
    pub slots: Vec<String>,
    /// Per slot: `[has evidence, no evidence, in latest topic, turn progress]`.
    pub slot_features: Vec<[f64; SLOT_DIM]>,
    /// `[bias, any evidence, fraction of slots seen, turn progress]`.
    pub global: [f64; GLOBAL_DIM],
    /// Latest revealed value per candidate slot.
    pub seen_values: Vec<Option<String>>,
}

fn turn_progress(turn: usize) -> f64 {
    let t = turn as f64;
    t / (t + 10.0)
}

impl Observation {
    pub fn from_state(state: &DialogueState, schema: &SlotSchema) -> Self {
        let evidence = state.evidence_map();
        let mut keys: Vec<String> = schema.slots.iter().map(|s| normalize_text(s)).collect();
        let mut slots = schema.slots.clone();
        for (key, (slot, _)) in &evidence {
            if !keys.contains(key) {
                keys.push(key.clone());
                slots.push(slot.clone());
            }
        }
        let topic: Vec<String> = state
            .latest_user()
            .map(|u| u.topic.iter().map(|s| normalize_text(s)).collect())
            .unwrap_or_default();
        let progress = turn_progress(state.turn_index);
        let seen_values: Vec<Option<String>> = keys
            .iter()
            .map(|k| evidence.get(k).map(|(_, v)| (*v).to_owned()))
            .collect();
        let slot_features = slots
            .iter()
            .zip(&seen_values)
            .zip(&keys)
            .map(|((_, seen), key)| {
                let seen = if seen.is_some() { 1.0 } else { 0.0 };
                [
                    seen,
                    1.0 - seen,
                    if topic.contains(key) { 1.0 } else { 0.0 },
                    progress,
                ]
            })
            .collect();
        let seen = seen_values.iter().filter(|v| v.is_some()).count();
        let global = [
            1.0,
            if seen > 0 { 1.0 } else { 0.0 },
            seen as f64 / slots.len().max(1) as f64,
            progress,
        ];
        Observation {
            slots,
            slot_features,
            global,
            seen_values,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }
}

/// One sampled action in factored form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactoredChoice {
    /// Include/skip per candidate slot.
    pub include: Vec<bool>,
    /// Index of the slot the response personalizes on; `None` addresses nothing.
    pub respond: Option<usize>,
    pub engage: bool,
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)`, stable for large `|z|`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub theta: Vec<f64>,
}

impl Default for LinearPolicy {
    fn default() -> Self {
        LinearPolicy {
            theta: vec![0.0; POLICY_DIM],
        }
    }
}

impl LinearPolicy {
    pub fn from_params(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != POLICY_DIM {
            return Err(Error::Validation(format!(
                "policy expects {POLICY_DIM} parameters, got {}",
                theta.len()
            )));
        }
        Ok(LinearPolicy { theta })
    }

    fn include_logits(&self, obs: &Observation) -> Vec<f64> {
        obs.slot_features.iter().map(|f| dot(&self.theta[INCLUDE], f)).collect()
    }

    /// Response scores; the last entry is the "address nothing" option.
    fn respond_scores(&self, obs: &Observation) -> Vec<f64> {
        let mut scores: Vec<f64> = obs.slot_features.iter().map(|f| dot(&self.theta[RESPOND], f)).collect();
        scores.push(dot(&self.theta[NONE], &obs.global));
        scores
    }

    fn engage_logit(&self, obs: &Observation) -> f64 {
        dot(&self.theta[ENGAGE], &obs.global)
    }

    /// Probability of each response option (slots, then none).
    pub fn respond_probs(&self, obs: &Observation) -> Vec<f64> {
        let scores = self.respond_scores(obs);
        let lse = log_sum_exp(&scores);
        scores.iter().map(|s| (s - lse).exp()).collect()
    }

    pub fn sample(&self, obs: &Observation, rng: &mut impl Rng) -> FactoredChoice {
        let include = self
            .include_logits(obs)
            .into_iter()
            .map(|z| rng.gen::<f64>() < sigmoid(z))
            .collect();
        let probs = self.respond_probs(obs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        let engage = rng.gen::<f64>() < sigmoid(self.engage_logit(obs));
        FactoredChoice {
            include,
            respond: (pick < obs.n_slots()).then_some(pick),
            engage,
        }
    }

    /// Most probable value of every factor.
    pub fn greedy(&self, obs: &Observation) -> FactoredChoice {
        let include = self.include_logits(obs).into_iter().map(|z| z > 0.0).collect();
        let scores = self.respond_scores(obs);
        let mut pick = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[pick] {
                pick = i;
            }
        }
        FactoredChoice {
            include,
            respond: (pick < obs.n_slots()).then_some(pick),
            engage: self.engage_logit(obs) > 0.0,
        }
    }

    pub fn log_prob(&self, obs: &Observation, choice: &FactoredChoice) -> f64 {
        let mut lp = 0.0;
        for (z, &inc) in self.include_logits(obs).iter().zip(&choice.include) {
            lp += if inc { log_sigmoid(*z) } else { log_sigmoid(-z) };
        }
        let scores = self.respond_scores(obs);
        let pick = choice.respond.unwrap_or(obs.n_slots());
        lp += scores[pick] - log_sum_exp(&scores);
        let z = self.engage_logit(obs);
        lp += if choice.engage { log_sigmoid(z) } else { log_sigmoid(-z) };
        lp
    }

    /// Gradient of [`log_prob`](Self::log_prob) with respect to `theta`.
    pub fn grad_log_prob(&self, obs: &Observation, choice: &FactoredChoice) -> Vec<f64> {
        let mut g = vec![0.0; POLICY_DIM];
        for ((z, &inc), f) in self
            .include_logits(obs)
            .iter()
            .zip(&choice.include)
            .zip(&obs.slot_features)
        {
            let coef = if inc { 1.0 } else { 0.0 } - sigmoid(*z);
            for (gi, fi) in g[INCLUDE].iter_mut().zip(f) {
                *gi += coef * fi;
            }
        }

        let probs = self.respond_probs(obs);
        let n = obs.n_slots();
        for (j, f) in obs.slot_features.iter().enumerate() {
            let coef = if choice.respond == Some(j) { 1.0 } else { 0.0 } - probs[j];
            for (gi, fi) in g[RESPOND].iter_mut().zip(f) {
                *gi += coef * fi;
            }
        }
        let coef_none = if choice.respond.is_none() { 1.0 } else { 0.0 } - probs[n];
        for (gi, fi) in g[NONE].iter_mut().zip(&obs.global) {
            *gi += coef_none * fi;
        }

        let coef = if choice.engage { 1.0 } else { 0.0 } - sigmoid(self.engage_logit(obs));
        for (gi, fi) in g[ENGAGE].iter_mut().zip(&obs.global) {
            *gi += coef * fi;
        }
        g
    }

    /// Turns a factored choice into the structured action it denotes.
    pub fn decode(obs: &Observation, choice: &FactoredChoice, schema: &Arc<SlotSchema>) -> AgentAction {
        let mut estimate = Profile::new(schema.clone());
        for ((slot, seen), &inc) in obs.slots.iter().zip(&obs.seen_values).zip(&choice.include) {
            if inc {
                let value = seen.as_deref().unwrap_or(GUESS_VALUE);
                estimate
                    .insert(slot.clone(), value)
                    .expect("candidate slots are admitted by the schema");
            }
        }
        let addressed = match choice.respond {
            Some(i) => {
                let slot = &obs.slots[i];
                let value = estimate
                    .get(slot)
                    .or(obs.seen_values[i].as_deref())
                    .unwrap_or(GUESS_VALUE)
                    .to_owned();
                vec![(slot.clone(), value)]
            }
            None => Vec::new(),
        };
        AgentAction::new(AgentResponse::new(addressed, choice.engage), estimate)
    }
}

/// Linear state-value baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub weights: Vec<f64>,
}

impl Default for ValueFunction {
    fn default() -> Self {
        ValueFunction {
            weights: vec![0.0; VALUE_DIM],
        }
    }
}

impl ValueFunction {
    pub fn from_params(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != VALUE_DIM {
            return Err(Error::Validation(format!(
                "value function expects {VALUE_DIM} parameters, got {}",
                weights.len()
            )));
        }
        Ok(ValueFunction { weights })
    }

    pub fn features(obs: &Observation) -> [f64; VALUE_DIM] {
        let g = obs.global;
        [g[0], g[1], g[2], g[3], g[3] * g[3]]
    }

    pub fn value(&self, obs: &Observation) -> f64 {
        dot(&self.weights, &Self::features(obs))
    }
}

/// What the actor-critic records per turn for learning.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSample {
    pub obs: Observation,
    pub choice: FactoredChoice,
}

/// Learning agent: samples from (or argmaxes) the policy and reports the critic's value.
#[derive(Debug, Clone, Copy)]
pub struct ActorCritic<'a> {
    pub policy: &'a LinearPolicy,
    pub value: &'a ValueFunction,
    pub greedy: bool,
}

impl Agent for ActorCritic<'_> {
    type Choice = StepSample;

    fn act(&self, state: &DialogueState, schema: &Arc<SlotSchema>, rng: &mut ChaCha8Rng) -> AgentDecision<StepSample> {
        let obs = Observation::from_state(state, schema);
        let choice = if self.greedy {
            self.policy.greedy(&obs)
        } else {
            self.policy.sample(&obs, rng)
        };
        let action = LinearPolicy::decode(&obs, &choice, schema);
        AgentDecision {
            action,
            log_prob: self.policy.log_prob(&obs, &choice),
            value: self.value.value(&obs),
            choice: StepSample { obs, choice },
        }
    }
}

/// Per-turn learning data from one episode, with `π_old` log-probs frozen at collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepSample>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl Trajectory {
    pub fn from_rollout(rollout: Rollout<StepSample>, lambda: f64) -> Self {
        let rec = &rollout.record;
        Trajectory {
            log_probs: rec.turns.iter().map(|t| t.log_prob).collect(),
            values: rec.turns.iter().map(|t| t.value).collect(),
            rewards: rec.turns.iter().map(|t| t.weighted_reward).collect(),
            gamma: rec.gamma,
            lambda,
            steps: rollout.choices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        if self.values.len() != n || self.log_probs.len() != n || self.steps.len() != n {
            return Err(Error::Validation(format!(
                "trajectory lengths differ: {} rewards, {} values, {} log-probs, {} steps",
                n,
                self.values.len(),
                self.log_probs.len(),
                self.steps.len()
            )));
        }
        Ok(())
    }

    pub fn advantages(&self) -> Result<Vec<f64>> {
        self.validate()?;
        compute_gae(&self.rewards, &self.values, self.gamma, self.lambda)
    }
}

/// Generalized advantage estimates by backward recursion, with the value
/// after the last turn taken as 0:
///
/// ```text
/// δ_t = R_t + γ V(s_{t+1}) − V(s_t)
/// Â_t = δ_t + γ λ Â_{t+1}
/// ```
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::Validation(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    Ok(adv)
}

/// `exp(new − old)` with the exponent clamped to `±log_bound`.
pub fn policy_ratio(log_prob_new: f64, log_prob_old: f64, log_bound: f64) -> Result<f64> {
    if !log_prob_new.is_finite() || !log_prob_old.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite log-probabilities ({log_prob_new}, {log_prob_old})"
        )));
    }
    Ok((log_prob_new - log_prob_old).clamp(-log_bound, log_bound).exp())
}

pub fn clip_ratio(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// `min(r·Â, clip(r, 1−ε, 1+ε)·Â)`.
pub fn ppo_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Numerical(format!("ratio {ratio} is not a positive finite number")));
    }
    Ok((ratio * advantage).min(clip_ratio(ratio, epsilon) * advantage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Turns per gradient step.
    pub minibatch_size: usize,
    pub epochs: usize,
    pub samples_per_scenario: usize,
    /// Collection rounds per training run.
    pub rounds: usize,
    pub seed: u64,
    /// Bound on `|log π_new − log π_old|` before exponentiating.
    pub ratio_log_bound: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            gamma: 1.0,
            lambda: 0.95,
            actor_lr: 1e-2,
            critic_lr: 1e-1,
            minibatch_size: 64,
            epochs: 4,
            samples_per_scenario: 4,
            rounds: 10,
            seed: 0,
            ratio_log_bound: 20.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clip_epsilon.is_nan() || self.clip_epsilon <= 0.0 {
            return bad(format!("clip epsilon {} must be positive", self.clip_epsilon));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("gamma {} / lambda {} outside [0, 1]", self.gamma, self.lambda));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("step sizes must be positive".into());
        }
        if self.minibatch_size == 0 || self.epochs == 0 || self.samples_per_scenario == 0 {
            return bad("minibatch size, epochs and samples per scenario must be at least 1".into());
        }
        if self.ratio_log_bound.is_nan() || self.ratio_log_bound <= 0.0 {
            return bad("ratio log bound must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate over the last epoch.
    pub mean_surrogate: f64,
    /// Fraction of (sample, epoch) pairs whose ratio left `[1−ε, 1+ε]`.
    pub clip_fraction: f64,
    /// Same, over the first epoch only.
    pub first_epoch_clip_fraction: f64,
    /// Mean squared error of the critic against the λ-returns, before fitting.
    pub value_loss: f64,
    pub mean_return: f64,
    /// `mean(log π_old − log π_new)` after the last epoch; logged, not optimized.
    pub approx_kl: f64,
    /// Largest `|ratio − 1|` before the first parameter step.
    pub initial_ratio_deviation: f64,
    pub updates: usize,
}

struct Sample<'a> {
    step: &'a StepSample,
    old_log_prob: f64,
    advantage: f64,
    target: f64,
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("{name} contains {x}; aborting update")));
    }
    Ok(())
}

/// Mean clipped surrogate of `batch` under `policy`, with batch-normalized advantages.
pub fn mean_surrogate(policy: &LinearPolicy, batch: &[Trajectory], cfg: &PpoConfig) -> Result<f64> {
    let samples = flatten(batch)?;
    let mut total = 0.0;
    for s in &samples {
        let r = policy_ratio(policy.log_prob(&s.step.obs, &s.step.choice), s.old_log_prob, cfg.ratio_log_bound)?;
        total += ppo_surrogate(r, s.advantage, cfg.clip_epsilon)?;
    }
    Ok(total / samples.len() as f64)
}

fn flatten(batch: &[Trajectory]) -> Result<Vec<Sample<'_>>> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let mut samples = Vec::new();
    for traj in batch {
        let adv = traj.advantages()?;
        for (i, step) in traj.steps.iter().enumerate() {
            samples.push(Sample {
                step,
                old_log_prob: traj.log_probs[i],
                advantage: adv[i],
                target: adv[i] + traj.values[i],
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Argument("training batch holds no turns".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for s in &mut samples {
        s.advantage = (s.advantage - mean) / (std + 1e-8);
    }
    Ok(samples)
}

/// PPO update of actor and critic on one collected batch.
pub fn update(
    policy: &mut LinearPolicy,
    value_fn: &mut ValueFunction,
    batch: &[Trajectory],
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    cfg.validate()?;
    let samples = flatten(batch)?;
    let n = samples.len();
    let mut stats = UpdateStats {
        mean_return: batch.iter().map(|t| t.rewards.iter().sum::<f64>()).sum::<f64>() / batch.len() as f64,
        value_loss: samples
            .iter()
            .map(|s| (value_fn.value(&s.step.obs) - s.target).powi(2))
            .sum::<f64>()
            / n as f64,
        ..UpdateStats::default()
    };
    for s in &samples {
        let r = policy_ratio(policy.log_prob(&s.step.obs, &s.step.choice), s.old_log_prob, cfg.ratio_log_bound)?;
        stats.initial_ratio_deviation = stats.initial_ratio_deviation.max((r - 1.0).abs());
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut clipped = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let mut g_actor = vec![0.0; POLICY_DIM];
            let mut g_critic = vec![0.0; VALUE_DIM];
            for &i in chunk {
                let s = &samples[i];
                let lp = policy.log_prob(&s.step.obs, &s.step.choice);
                let r = policy_ratio(lp, s.old_log_prob, cfg.ratio_log_bound)?;
                let outside = (r - 1.0).abs() > cfg.clip_epsilon;
                clipped += usize::from(outside);
                // the clipped branch is active (zero gradient) when it is the smaller term
                let active = !((s.advantage > 0.0 && r > 1.0 + cfg.clip_epsilon)
                    || (s.advantage < 0.0 && r < 1.0 - cfg.clip_epsilon));
                if active {
                    let grad = policy.grad_log_prob(&s.step.obs, &s.step.choice);
                    for (g, d) in g_actor.iter_mut().zip(grad) {
                        *g += r * s.advantage * d;
                    }
                }
                let x = ValueFunction::features(&s.step.obs);
                let err = value_fn.value(&s.step.obs) - s.target;
                for (g, xi) in g_critic.iter_mut().zip(x) {
                    *g += err * xi;
                }
            }
            let m = chunk.len() as f64;
            check_finite("actor gradient", &g_actor)?;
            check_finite("critic gradient", &g_critic)?;
            for (w, g) in policy.theta.iter_mut().zip(&g_actor) {
                *w += cfg.actor_lr * g / m;
            }
            for (w, g) in value_fn.weights.iter_mut().zip(&g_critic) {
                *w -= cfg.critic_lr * g / m;
            }
            stats.updates += 1;
        }
        if epoch == 0 {
            stats.first_epoch_clip_fraction = clipped as f64 / n as f64;
        }
    }
    stats.clip_fraction = clipped as f64 / (n * cfg.epochs) as f64;

    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for s in &samples {
        let lp = policy.log_prob(&s.step.obs, &s.step.choice);
        let r = policy_ratio(lp, s.old_log_prob, cfg.ratio_log_bound)?;
        surrogate += ppo_surrogate(r, s.advantage, cfg.clip_epsilon)?;
        kl += s.old_log_prob - lp;
    }
    stats.mean_surrogate = surrogate / n as f64;
    stats.approx_kl = kl / n as f64;
    Ok(stats)
}

/// Training curve row: one per collection round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    /// Mean per-episode sum of the weighted reward being optimized.
    pub mean_total_reward: f64,
    pub mean_profile_reward: f64,
    pub mean_response_reward: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
}

impl CurveRow {
    pub const CSV_HEADER: &'static str =
        "step,mean_total_reward,mean_profile_reward,mean_response_reward,clip_fraction,value_loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.mean_total_reward,
            self.mean_profile_reward,
            self.mean_response_reward,
            self.clip_fraction,
            self.value_loss
        )
    }
}

/// Serialized training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Collection rounds completed.
    pub step: usize,
    pub fingerprint: String,
    pub config: PpoConfig,
    pub weights: crate::reward::RewardWeights,
    /// Schema of the training scenarios.
    pub schema: String,
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!("checkpoint version {} unsupported", ck.version)));
        }
        LinearPolicy::from_params(ck.policy.clone())?;
        ValueFunction::from_params(ck.value.clone())?;
        Ok(ck)
    }

    /// Scenarios must share the training schema's declared slots and use no
    /// slot the training schema would reject.
    pub fn check_compatible(&self, scenarios: &[UserConfig]) -> Result<()> {
        let trained = SlotSchema::by_name(&self.schema)?;
        for s in scenarios {
            let schema = s.profile.schema();
            let conflict_slots = s.conflict.iter().flat_map(|c| c.replace.keys().map(String::as_str));
            let foreign = s.profile.slot_names().chain(conflict_slots).find(|slot| !trained.admits(slot));
            if schema.slots != trained.slots || foreign.is_some() {
                return Err(Error::Validation(format!(
                    "scenario {} uses schema {:?}, incompatible with checkpoint schema {:?}{}",
                    s.id,
                    schema.name,
                    self.schema,
                    foreign.map(|f| format!(" (slot {f:?})")).unwrap_or_default()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Hash of everything that shapes learning except the round budget.
pub fn config_fingerprint(cfg: &PpoConfig, options: &EnvOptions) -> String {
    let mut cfg = cfg.clone();
    cfg.rounds = 0;
    let payload = serde_json::json!({
        "ppo": cfg,
        "weights": options.weights,
        "matcher": options.matcher.label(),
        "policy_dim": POLICY_DIM,
        "value_dim": VALUE_DIM,
    });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    hex::encode(&digest[..8])
}

/// SplitMix64 step; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rolls out every scenario `samples` times in parallel; order is deterministic.
pub fn collect(
    agent: &ActorCritic<'_>,
    scenarios: &[UserConfig],
    options: &EnvOptions,
    samples: usize,
    seed: u64,
) -> Result<Vec<Rollout<StepSample>>> {
    let jobs: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|s| (0..samples).map(move |k| (s, k)))
        .collect();
    jobs.par_iter()
        .map(|&(s, k)| rollout(agent, &scenarios[s], options, mix_seed(mix_seed(seed, s as u64), k as u64)))
        .collect()
}

/// Evaluation rollouts (one per scenario and sample), returning the episode logs.
pub fn evaluate(
    policy: &LinearPolicy,
    value: &ValueFunction,
    scenarios: &[UserConfig],
    options: &EnvOptions,
    samples: usize,
    seed: u64,
    greedy: bool,
) -> Result<Vec<EpisodeRecord>> {
    let agent = ActorCritic { policy, value, greedy };
    Ok(collect(&agent, scenarios, options, samples, seed)?
        .into_iter()
        .map(|r| r.record)
        .collect())
}

/// PPO trainer over a fixed scenario set.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: PpoConfig,
    pub options: EnvOptions,
    pub scenarios: Vec<UserConfig>,
    pub policy: LinearPolicy,
    pub value: ValueFunction,
    /// Rounds completed so far.
    pub step: usize,
    /// Gradient steps taken by this trainer.
    pub updates: usize,
    pub last_stats: UpdateStats,
}

impl Trainer {
    pub fn new(cfg: PpoConfig, options: EnvOptions, scenarios: Vec<UserConfig>) -> Result<Self> {
        cfg.validate()?;
        if scenarios.is_empty() {
            return Err(Error::Config("training needs at least one scenario".into()));
        }
        for s in &scenarios {
            s.validate()?;
        }
        let mut options = options;
        options.gamma = cfg.gamma;
        Ok(Trainer {
            cfg,
            options,
            scenarios,
            policy: LinearPolicy::default(),
            value: ValueFunction::default(),
            step: 0,
            updates: 0,
            last_stats: UpdateStats::default(),
        })
    }

    pub fn resume(cfg: PpoConfig, options: EnvOptions, scenarios: Vec<UserConfig>, ck: &Checkpoint) -> Result<Self> {
        let mut trainer = Trainer::new(cfg, options, scenarios)?;
        if ck.fingerprint != trainer.fingerprint() {
            return Err(Error::Validation(format!(
                "checkpoint fingerprint {} does not match configuration {}",
                ck.fingerprint,
                trainer.fingerprint()
            )));
        }
        trainer.policy = LinearPolicy::from_params(ck.policy.clone())?;
        trainer.value = ValueFunction::from_params(ck.value.clone())?;
        trainer.step = ck.step;
        Ok(trainer)
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.cfg, &self.options)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            fingerprint: self.fingerprint(),
            config: self.cfg.clone(),
            weights: self.options.weights,
            schema: self.scenarios[0].profile.schema().name.clone(),
            policy: self.policy.theta.clone(),
            value: self.value.weights.clone(),
        }
    }

    /// Collects with a frozen snapshot of the policy, then runs PPO epochs.
    pub fn run_round(&mut self) -> Result<CurveRow> {
        let round = self.step as u64 + 1;
        let round_seed = mix_seed(self.cfg.seed, round);
        let rollouts = {
            let agent = ActorCritic {
                policy: &self.policy,
                value: &self.value,
                greedy: false,
            };
            collect(&agent, &self.scenarios, &self.options, self.cfg.samples_per_scenario, round_seed)?
        };
        let episodes = rollouts.len() as f64;
        let sum = |f: &dyn Fn(&crate::env::TurnRecord) -> f64| {
            rollouts
                .iter()
                .map(|r| r.record.turns.iter().map(f).sum::<f64>())
                .sum::<f64>()
                / episodes
        };
        let mean_total = sum(&|t| t.weighted_reward);
        let mean_profile = sum(&|t| t.reward.profile);
        let mean_response = sum(&|t| t.reward.response);

        let batch: Vec<Trajectory> = rollouts
            .into_iter()
            .map(|r| Trajectory::from_rollout(r, self.cfg.lambda))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(round_seed, 0x5EED));
        let stats = update(&mut self.policy, &mut self.value, &batch, &self.cfg, &mut rng)?;
        self.step += 1;
        self.updates += stats.updates;
        self.last_stats = stats;
        Ok(CurveRow {
            step: self.step,
            mean_total_reward: mean_total,
            mean_profile_reward: mean_profile,
            mean_response_reward: mean_response,
            clip_fraction: stats.clip_fraction,
            value_loss: stats.value_loss,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: LinearPolicy,
    pub value: ValueFunction,
    pub curve: Vec<CurveRow>,
    pub checkpoint: Checkpoint,
    pub updates: usize,
}

/// Runs `cfg.rounds` collection/update rounds from a fresh policy.
pub fn train(cfg: &PpoConfig, options: &EnvOptions, scenarios: &[UserConfig]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), options.clone(), scenarios.to_vec())?;
    let mut curve = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        curve.push(trainer.run_round()?);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        updates: trainer.updates,
        policy: trainer.policy,
        value: trainer.value,
        curve,
    })
}
