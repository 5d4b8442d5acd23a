//! Simulator and training framework for reinforcement-learning-based
//! personalized dialogue alignment.
//!
//! A scripted user reveals a slot-value profile over a multi-turn dialogue;
//! an agent maintains a profile estimate and writes responses; a profile
//! reward (F1 against the truth) and a response reward (product of binary
//! criteria) drive PPO. The metrics module scores alignment curves, judge
//! agreement and long-term profile tracking.

pub mod data;
pub mod env;
pub mod error;
pub mod metrics;
pub mod profile;
pub mod reward;
pub mod rl;
pub mod user_sim;

pub use env::{DialogueEnv, DialogueState, EnvOptions, EpisodeRecord};
pub use error::{Error, Result};
pub use profile::{profile_reward, Profile, SlotMatcher, SlotSchema};
pub use reward::{combined_reward, response_reward, RewardWeights};
pub use user_sim::UserConfig;
