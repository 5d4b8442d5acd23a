//! Slot-value user profiles, value matching and the F1 profile reward.
//!
//! A [`Profile`] maps slot names to free-text values under a [`SlotSchema`].
//! Slot names are stored verbatim and compared after normalization; values
//! are compared through a [`SlotMatcher`].

use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Arc, OnceLock};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::value_pools;
use crate::error::{Error, Result};

/// The ten slots of the standard persona schema, in canonical order.
pub const STANDARD_SLOTS: [&str; 10] = [
    "Age",
    "Gender",
    "Interests",
    "Educational Background",
    "Personality Traits",
    "Occupation",
    "Marital Status",
    "Family Background",
    "Location",
    "Others",
];

pub const STANDARD_SCHEMA: &str = "persona10";
pub const OPEN_SCHEMA: &str = "persona-open";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub name: String,
    pub slots: Vec<String>,
    /// Open schemas accept slot names outside `slots`.
    pub open: bool,
}

impl SlotSchema {
    pub fn new(name: impl Into<String>, slots: Vec<String>, open: bool) -> Result<Self> {
        let schema = SlotSchema {
            name: name.into(),
            slots,
            open,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Schema("schema name is empty".into()));
        }
        if self.slots.is_empty() {
            return Err(Error::Schema(format!("schema {} declares no slots", self.name)));
        }
        let mut seen = BTreeSet::new();
        for slot in &self.slots {
            let key = normalize_text(slot);
            if key.is_empty() {
                return Err(Error::Schema(format!("schema {} has a blank slot name", self.name)));
            }
            if !seen.insert(key) {
                return Err(Error::Schema(format!(
                    "schema {} declares slot {slot:?} twice",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Shared handle to the closed ten-slot schema.
    pub fn standard() -> Arc<SlotSchema> {
        static SCHEMA: OnceLock<Arc<SlotSchema>> = OnceLock::new();
        SCHEMA
            .get_or_init(|| {
                Arc::new(SlotSchema {
                    name: STANDARD_SCHEMA.into(),
                    slots: STANDARD_SLOTS.iter().map(|s| s.to_string()).collect(),
                    open: false,
                })
            })
            .clone()
    }

    /// The ten standard slots, but accepting unseen slot names.
    pub fn open() -> Arc<SlotSchema> {
        static SCHEMA: OnceLock<Arc<SlotSchema>> = OnceLock::new();
        SCHEMA
            .get_or_init(|| {
                Arc::new(SlotSchema {
                    name: OPEN_SCHEMA.into(),
                    slots: STANDARD_SLOTS.iter().map(|s| s.to_string()).collect(),
                    open: true,
                })
            })
            .clone()
    }

    pub fn by_name(name: &str) -> Result<Arc<SlotSchema>> {
        match name {
            STANDARD_SCHEMA => Ok(Self::standard()),
            OPEN_SCHEMA => Ok(Self::open()),
            other => Err(Error::Schema(format!("unknown schema {other:?}"))),
        }
    }

    /// Canonical spelling of a declared slot, if any.
    pub fn find_slot(&self, slot: &str) -> Option<&str> {
        self.slots.iter().find(|s| text_eq(s, slot)).map(String::as_str)
    }

    pub fn admits(&self, slot: &str) -> bool {
        if normalized_chars(slot).next().is_none() {
            return false;
        }
        self.open || self.find_slot(slot).is_some()
    }
}

fn normalized_chars(text: &str) -> impl Iterator<Item = char> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .enumerate()
        .flat_map(|(i, t)| (i > 0).then_some(' ').into_iter().chain(t.chars().flat_map(char::to_lowercase)))
}

/// Lowercases, turns punctuation into spaces and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    normalized_chars(text).collect()
}

/// Normalized byte stream of an ASCII string.
struct AsciiNorm<'a> {
    bytes: &'a [u8],
    pos: usize,
    started: bool,
    gap: bool,
}

impl Iterator for AsciiNorm<'_> {
    type Item = u8;

    fn next(&mut self) -> Option<u8> {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_alphanumeric() {
                if self.gap && self.started {
                    self.gap = false;
                    return Some(b' ');
                }
                self.pos += 1;
                self.started = true;
                self.gap = false;
                return Some(b.to_ascii_lowercase());
            }
            self.gap = true;
            self.pos += 1;
        }
        None
    }
}

fn ascii_norm(s: &str) -> AsciiNorm<'_> {
    AsciiNorm {
        bytes: s.as_bytes(),
        pos: 0,
        started: false,
        gap: false,
    }
}

/// `normalize_text(a) == normalize_text(b)` without allocating.
pub fn text_eq(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    if a.is_ascii() && b.is_ascii() {
        ascii_norm(a).eq(ascii_norm(b))
    } else {
        normalized_chars(a).eq(normalized_chars(b))
    }
}

fn tokens(text: &str) -> BTreeSet<String> {
    normalize_text(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Jaccard similarity of normalized token sets. Two empty sets count as identical.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let inter = ta.intersection(&tb).count();
    let union = ta.union(&tb).count();
    inter as f64 / union as f64
}

/// Wire form of a [`Profile`]: `{"schema": name, "entries": {slot: value}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub schema: String,
    pub entries: IndexMap<String, String>,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ProfileRecord", try_from = "ProfileRecord")]
pub struct Profile {
    schema: Arc<SlotSchema>,
    entries: IndexMap<String, String>,
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Profile")
            .field("schema", &self.schema.name)
            .field("entries", &self.entries)
            .finish()
    }
}

impl From<Profile> for ProfileRecord {
    fn from(p: Profile) -> Self {
        ProfileRecord {
            schema: p.schema.name.clone(),
            entries: p.entries,
        }
    }
}

impl TryFrom<ProfileRecord> for Profile {
    type Error = Error;

    fn try_from(rec: ProfileRecord) -> Result<Self> {
        let mut profile = Profile::new(SlotSchema::by_name(&rec.schema)?);
        for (slot, value) in rec.entries {
            profile.insert(slot, value)?;
        }
        Ok(profile)
    }
}

impl Profile {
    pub fn new(schema: Arc<SlotSchema>) -> Self {
        Profile {
            schema,
            entries: IndexMap::new(),
        }
    }

    pub fn from_pairs<S, V>(schema: Arc<SlotSchema>, pairs: impl IntoIterator<Item = (S, V)>) -> Result<Self>
    where
        S: Into<String>,
        V: Into<String>,
    {
        let mut profile = Profile::new(schema);
        for (slot, value) in pairs {
            profile.insert(slot, value)?;
        }
        Ok(profile)
    }

    pub fn schema(&self) -> &Arc<SlotSchema> {
        &self.schema
    }

    /// Sets a slot. An existing slot with the same normalized name keeps its
    /// original spelling and takes the new value.
    pub fn insert(&mut self, slot: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let slot = slot.into();
        let value = value.into();
        if !self.schema.admits(&slot) {
            return Err(Error::Schema(format!(
                "slot {slot:?} is not part of closed schema {}",
                self.schema.name
            )));
        }
        if value.trim().is_empty() {
            return Err(Error::Validation(format!("empty value for slot {slot:?}")));
        }
        match self.key_of(&slot) {
            Some(existing) => {
                let existing = existing.to_owned();
                self.entries.insert(existing, value);
            }
            None => {
                self.entries.insert(slot, value);
            }
        }
        Ok(())
    }

    pub fn remove(&mut self, slot: &str) -> Option<String> {
        let key = self.key_of(slot)?.to_owned();
        self.entries.shift_remove(&key)
    }

    fn key_of(&self, slot: &str) -> Option<&str> {
        self.entries
            .keys()
            .find(|k| text_eq(k, slot))
            .map(String::as_str)
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        let key = self.key_of(slot)?;
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains_slot(&self, slot: &str) -> bool {
        self.key_of(slot).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses one JSON profile record.
    pub fn from_json(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("profiles always serialize")
    }
}

/// A deterministic external value judge plugged into [`SlotMatcher::External`].
pub trait ValueJudge: Send + Sync {
    fn same_value(&self, slot: &str, a: &str, b: &str) -> bool;
}

#[derive(Clone, Default)]
pub enum SlotMatcher {
    /// Equality after [`normalize_text`].
    #[default]
    ExactNormalized,
    /// Token-set Jaccard similarity at or above `threshold`.
    TokenOverlap { threshold: f64 },
    External(Arc<dyn ValueJudge>),
}

impl fmt::Debug for SlotMatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotMatcher::ExactNormalized => write!(f, "ExactNormalized"),
            SlotMatcher::TokenOverlap { threshold } => write!(f, "TokenOverlap({threshold})"),
            SlotMatcher::External(_) => write!(f, "External"),
        }
    }
}

impl SlotMatcher {
    pub const DEFAULT_TOKEN_THRESHOLD: f64 = 0.5;

    pub fn token_overlap(threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Argument(format!(
                "token-overlap threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(SlotMatcher::TokenOverlap { threshold })
    }

    /// Parses `exact` or `token:<threshold>` (bare `token` uses 0.5).
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.trim() {
            "exact" => Ok(SlotMatcher::ExactNormalized),
            "token" => Self::token_overlap(Self::DEFAULT_TOKEN_THRESHOLD),
            other => match other.strip_prefix("token:") {
                Some(thr) => {
                    let thr: f64 = thr
                        .parse()
                        .map_err(|_| Error::Argument(format!("bad matcher threshold {thr:?}")))?;
                    Self::token_overlap(thr)
                }
                None => Err(Error::Argument(format!(
                    "unknown matcher {other:?} (expected exact or token:<thr>)"
                ))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            SlotMatcher::ExactNormalized => "exact".into(),
            SlotMatcher::TokenOverlap { threshold } => format!("token:{threshold}"),
            SlotMatcher::External(_) => "external".into(),
        }
    }

    pub fn matches(&self, slot: &str, a: &str, b: &str) -> bool {
        match self {
            SlotMatcher::ExactNormalized => text_eq(a, b),
            SlotMatcher::TokenOverlap { threshold } => token_jaccard(a, b) >= *threshold,
            SlotMatcher::External(judge) => judge.same_value(slot, a, b),
        }
    }
}

fn check_family(estimate: &Profile, truth: &Profile) -> Result<()> {
    if estimate.schema.name != truth.schema.name {
        return Err(Error::Schema(format!(
            "profiles use different schemas ({} vs {})",
            estimate.schema.name, truth.schema.name
        )));
    }
    Ok(())
}

/// Number of estimate entries whose slot exists in `truth` with a matching value.
pub fn overlap_count(estimate: &Profile, truth: &Profile, matcher: &SlotMatcher) -> Result<usize> {
    check_family(estimate, truth)?;
    Ok(estimate
        .iter()
        .filter(|(slot, value)| {
            truth
                .get(slot)
                .is_some_and(|truth_value| matcher.matches(slot, value, truth_value))
        })
        .count())
}

fn require_truth(truth: &Profile) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Config("ground-truth profile is empty".into()));
    }
    Ok(())
}

/// F1 between estimate and truth: `2·|overlap| / (|estimate| + |truth|)`.
pub fn profile_reward(estimate: &Profile, truth: &Profile, matcher: &SlotMatcher) -> Result<f64> {
    require_truth(truth)?;
    let overlap = overlap_count(estimate, truth, matcher)?;
    Ok(2.0 * overlap as f64 / (estimate.len() + truth.len()) as f64)
}

/// `(precision, recall)`; precision of an empty estimate is 0.
pub fn precision_recall(estimate: &Profile, truth: &Profile, matcher: &SlotMatcher) -> Result<(f64, f64)> {
    require_truth(truth)?;
    let overlap = overlap_count(estimate, truth, matcher)? as f64;
    let precision = if estimate.is_empty() {
        0.0
    } else {
        overlap / estimate.len() as f64
    };
    Ok((precision, overlap / truth.len() as f64))
}

/// Surface rewrites that keep a value's meaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParaphraseRule {
    Identity,
    UpperCase,
    TitleCase,
    Punctuate,
    Spacing,
    /// Rotates comma-separated list items. Only applies to list values.
    ReorderItems,
}

impl ParaphraseRule {
    pub fn applies_to(self, value: &str) -> bool {
        match self {
            ParaphraseRule::ReorderItems => list_items(value).len() >= 2,
            _ => true,
        }
    }

    pub fn apply(self, value: &str) -> String {
        match self {
            ParaphraseRule::Identity => value.to_owned(),
            ParaphraseRule::UpperCase => value.to_uppercase(),
            ParaphraseRule::TitleCase => value
                .split(' ')
                .map(|w| {
                    let mut chars = w.chars();
                    match chars.next() {
                        Some(first) => first.to_uppercase().chain(chars).collect(),
                        None => String::new(),
                    }
                })
                .collect::<Vec<_>>()
                .join(" "),
            ParaphraseRule::Punctuate => format!("\"{value}!\""),
            ParaphraseRule::Spacing => format!("  {}  ", value.split(' ').collect::<Vec<_>>().join("   ")),
            ParaphraseRule::ReorderItems => {
                let mut items = list_items(value);
                items.rotate_left(1);
                items.join(", ")
            }
        }
    }
}

fn list_items(value: &str) -> Vec<&str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// The rewrite rules the benchmark draws paraphrases from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseTable {
    pub rules: Vec<ParaphraseRule>,
}

impl Default for ParaphraseTable {
    fn default() -> Self {
        ParaphraseTable {
            rules: vec![
                ParaphraseRule::UpperCase,
                ParaphraseRule::TitleCase,
                ParaphraseRule::Punctuate,
                ParaphraseRule::Spacing,
                ParaphraseRule::ReorderItems,
            ],
        }
    }
}

impl ParaphraseTable {
    /// Rewrites nothing: paraphrased items are verbatim duplicates.
    pub fn identity() -> Self {
        ParaphraseTable {
            rules: vec![ParaphraseRule::Identity],
        }
    }

    /// Case, punctuation and spacing rewrites only.
    pub fn surface_only() -> Self {
        ParaphraseTable {
            rules: vec![
                ParaphraseRule::UpperCase,
                ParaphraseRule::TitleCase,
                ParaphraseRule::Punctuate,
                ParaphraseRule::Spacing,
            ],
        }
    }

    fn paraphrase(&self, value: &str, rng: &mut impl Rng) -> String {
        let usable: Vec<ParaphraseRule> = self.rules.iter().copied().filter(|r| r.applies_to(value)).collect();
        match usable.choose(rng) {
            Some(rule) => rule.apply(value),
            None => ParaphraseRule::Punctuate.apply(value),
        }
    }
}

/// A value sharing no normalized token with `original`.
pub fn alter_value(slot: &str, original: &str, rng: &mut impl Rng) -> String {
    let orig_tokens = tokens(original);
    let disjoint = |cand: &str| tokens(cand).is_disjoint(&orig_tokens);
    let pools = value_pools();
    let mut candidates: Vec<&str> = pools
        .pool(slot)
        .map(|p| p.iter().map(String::as_str).filter(|c| disjoint(c)).collect())
        .unwrap_or_default();
    if candidates.is_empty() {
        candidates = pools.all_values().filter(|c| disjoint(c)).collect();
    }
    match candidates.choose(rng) {
        Some(c) => (*c).to_owned(),
        None => {
            let mut n = 0u32;
            loop {
                let c = format!("substitute {n}");
                if disjoint(&c) {
                    return c;
                }
                n += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBenchCase {
    pub original: Profile,
    pub rewritten: Profile,
    /// Number of paraphrased, meaning-preserving items (`a`).
    pub ground_truth_overlap: usize,
    /// Number of items replaced with different content (`b`).
    pub altered_count: usize,
}

pub fn build_overlap_bench(source: &Profile, a: usize, b: usize, seed: u64) -> Result<OverlapBenchCase> {
    build_overlap_bench_with(source, a, b, seed, &ParaphraseTable::default())
}

/// Paraphrases `a` randomly chosen items and alters a disjoint set of `b`
/// items; the rewritten profile holds only those `a + b` items.
pub fn build_overlap_bench_with(
    source: &Profile,
    a: usize,
    b: usize,
    seed: u64,
    table: &ParaphraseTable,
) -> Result<OverlapBenchCase> {
    if a + b > source.len() {
        return Err(Error::Argument(format!(
            "a + b = {} exceeds the {} profile entries",
            a + b,
            source.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng);
    let paraphrased: BTreeSet<usize> = order[..a].iter().copied().collect();
    let altered: BTreeSet<usize> = order[a..a + b].iter().copied().collect();

    let mut rewritten = Profile::new(source.schema.clone());
    for (idx, (slot, value)) in source.iter().enumerate() {
        if paraphrased.contains(&idx) {
            rewritten.insert(slot, table.paraphrase(value, &mut rng))?;
        } else if altered.contains(&idx) {
            rewritten.insert(slot, alter_value(slot, value, &mut rng))?;
        }
    }
    Ok(OverlapBenchCase {
        original: source.clone(),
        rewritten,
        ground_truth_overlap: a,
        altered_count: b,
    })
}

/// Exact/fuzzy accuracy and squared-error summary of overlap predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherReport {
    pub cases: usize,
    pub exact_acc: f64,
    pub fuzzy_acc: f64,
    pub mse: f64,
    pub rmse: f64,
}

impl MatcherReport {
    pub const CSV_HEADER: &'static str = "matcher,cases,exact_acc,fuzzy_acc,mse,rmse";

    /// One CSV row; accuracies in percent.
    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{},{:.1},{:.1},{:.2},{:.2}",
            self.cases,
            self.exact_acc * 100.0,
            self.fuzzy_acc * 100.0,
            self.mse,
            self.rmse
        )
    }
}

pub fn eval_predictions(predicted: &[usize], truth: &[usize]) -> Result<MatcherReport> {
    if predicted.is_empty() {
        return Err(Error::Argument("no overlap cases to evaluate".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} cases",
            predicted.len(),
            truth.len()
        )));
    }
    let n = predicted.len() as f64;
    let (mut exact, mut fuzzy, mut sq) = (0usize, 0usize, 0.0);
    for (&p, &t) in predicted.iter().zip(truth) {
        let err = p.abs_diff(t);
        exact += usize::from(err == 0);
        fuzzy += usize::from(err <= 1);
        sq += (err * err) as f64;
    }
    let mse = sq / n;
    Ok(MatcherReport {
        cases: predicted.len(),
        exact_acc: exact as f64 / n,
        fuzzy_acc: fuzzy as f64 / n,
        mse,
        rmse: mse.sqrt(),
    })
}

/// Scores a matcher by predicting each case's overlap count.
pub fn eval_matcher(cases: &[OverlapBenchCase], matcher: &SlotMatcher) -> Result<MatcherReport> {
    let predicted = cases
        .iter()
        .map(|c| overlap_count(&c.rewritten, &c.original, matcher))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = cases.iter().map(|c| c.ground_truth_overlap).collect();
    eval_predictions(&predicted, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn std_profile(pairs: &[(&str, &str)]) -> Profile {
        Profile::from_pairs(SlotSchema::standard(), pairs.iter().copied()).unwrap()
    }

    fn full_profile() -> Profile {
        std_profile(&[
            ("Age", "34"),
            ("Gender", "female"),
            ("Interests", "hiking, photography"),
            ("Educational Background", "nursing degree"),
            ("Personality Traits", "calm optimist"),
            ("Occupation", "nurse"),
            ("Marital Status", "married"),
            ("Family Background", "two kids and a dog"),
            ("Location", "Paris"),
            ("Others", "vegetarian"),
        ])
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Hiking,  PHOTOGRAPHY!! "), "hiking photography");
        assert_eq!(normalize_text("mid-30s"), "mid 30s");
        assert_eq!(normalize_text("..."), "");
        assert!(text_eq("  Hiking,  PHOTOGRAPHY!! ", "hiking photography"));
        assert!(text_eq("Mid-30s", "mid 30s"));
        assert!(!text_eq("mid30s", "mid 30s"));
        assert!(text_eq("Écoute", "écoute"));
        assert!(text_eq("...", ""));
    }

    #[test]
    fn closed_schema_rejects_unknown_slot() {
        let mut p = Profile::new(SlotSchema::standard());
        assert!(matches!(p.insert("Pet", "cat"), Err(Error::Schema(_))));
        p.insert("age", "34").unwrap();
        assert_eq!(p.get("AGE"), Some("34"));

        let mut open = Profile::new(SlotSchema::open());
        open.insert("Pet", "cat").unwrap();
        assert_eq!(open.len(), 1);
    }

    #[test]
    fn insert_overwrites_same_slot() {
        let mut p = std_profile(&[("Age", "34")]);
        p.insert("age ", "35").unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.get("Age"), Some("35"));
        assert!(matches!(p.insert("Gender", "  "), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_schema_slots_rejected() {
        let err = SlotSchema::new("x", vec!["Age".into(), "age".into()], false);
        assert!(matches!(err, Err(Error::Schema(_))));
        assert!(SlotSchema::new("x", vec![], false).is_err());
    }

    #[test]
    fn overlap_examples() {
        let m = SlotMatcher::ExactNormalized;
        let truth = std_profile(&[
            ("Age", "34"),
            ("Gender", "female"),
            ("Occupation", "teacher"),
            ("Location", "Paris"),
            ("Interests", "skiing"),
        ]);
        assert_eq!(overlap_count(&truth, &truth, &m).unwrap(), 5);
        assert_eq!(overlap_count(&std_profile(&[]), &truth, &m).unwrap(), 0);
        let est = std_profile(&[
            ("Age", "34"),
            ("Gender", "female"),
            ("Occupation", "nurse"),
            ("Location", "Paris"),
        ]);
        assert_eq!(overlap_count(&est, &truth, &m).unwrap(), 3);

        assert_relative_eq!(profile_reward(&est, &truth, &m).unwrap(), 6.0 / 9.0);
        assert_eq!(profile_reward(&truth, &truth, &m).unwrap(), 1.0);
        let (p, r) = precision_recall(&est, &truth, &m).unwrap();
        assert_eq!((p, r), (0.75, 0.6));
    }

    #[test]
    fn empty_estimate_and_truth() {
        let m = SlotMatcher::ExactNormalized;
        let empty = std_profile(&[]);
        let truth = full_profile();
        assert_eq!(profile_reward(&empty, &truth, &m).unwrap(), 0.0);
        assert_eq!(precision_recall(&empty, &truth, &m).unwrap(), (0.0, 0.0));
        assert!(matches!(profile_reward(&truth, &empty, &m), Err(Error::Config(_))));
    }

    #[test]
    fn schema_mismatch() {
        let a = std_profile(&[("Age", "3")]);
        let b = Profile::from_pairs(SlotSchema::open(), [("Age", "3")]).unwrap();
        assert!(matches!(overlap_count(&a, &b, &SlotMatcher::ExactNormalized), Err(Error::Schema(_))));
    }

    #[test]
    fn matcher_parsing() {
        assert!(matches!(SlotMatcher::parse("exact"), Ok(SlotMatcher::ExactNormalized)));
        match SlotMatcher::parse("token:0.25").unwrap() {
            SlotMatcher::TokenOverlap { threshold } => assert_eq!(threshold, 0.25),
            other => panic!("{other:?}"),
        }
        assert!(SlotMatcher::parse("token:1.5").is_err());
        assert!(SlotMatcher::parse("llm").is_err());
    }

    #[test]
    fn token_matcher_admits_reordering() {
        let m = SlotMatcher::TokenOverlap { threshold: 0.5 };
        assert!(m.matches("Interests", "hiking, photography", "Photography, hiking"));
        assert!(!SlotMatcher::ExactNormalized.matches("Interests", "hiking, photography", "photography, hiking"));
        assert!(!m.matches("Interests", "hiking, photography", "chess, jazz music"));
    }

    struct LengthJudge;
    impl ValueJudge for LengthJudge {
        fn same_value(&self, _: &str, a: &str, b: &str) -> bool {
            a.len() == b.len()
        }
    }

    #[test]
    fn external_matcher_is_pluggable() {
        let m = SlotMatcher::External(Arc::new(LengthJudge));
        let t = std_profile(&[("Age", "34")]);
        let e = std_profile(&[("Age", "99")]);
        assert_eq!(overlap_count(&e, &t, &m).unwrap(), 1);
    }

    #[test]
    fn profile_json_shape() {
        let p = std_profile(&[("Age", "34"), ("Location", "Paris")]);
        assert_eq!(
            p.to_json(),
            r#"{"schema":"persona10","entries":{"Age":"34","Location":"Paris"}}"#
        );
        assert_eq!(Profile::from_json(&p.to_json()).unwrap(), p);
        assert!(Profile::from_json(r#"{"schema":"persona10","entries":{"Pet":"cat"}}"#).is_err());
        assert!(Profile::from_json(r#"{"schema":"nope","entries":{}}"#).is_err());
    }

    #[test]
    fn bench_construction() {
        let src = full_profile();
        let all_para = build_overlap_bench(&src, 5, 0, 3).unwrap();
        assert_eq!(all_para.ground_truth_overlap, 5);
        assert_eq!(all_para.rewritten.len(), 5);
        let tok = SlotMatcher::TokenOverlap { threshold: 0.5 };
        assert_eq!(overlap_count(&all_para.rewritten, &src, &tok).unwrap(), 5);

        let all_alt = build_overlap_bench(&src, 0, 10, 3).unwrap();
        assert_eq!(all_alt.ground_truth_overlap, 0);
        assert_eq!(overlap_count(&all_alt.rewritten, &src, &tok).unwrap(), 0);

        let seven = std_profile(&[
            ("Age", "34"),
            ("Gender", "female"),
            ("Interests", "hiking, photography"),
            ("Occupation", "nurse"),
            ("Marital Status", "married"),
            ("Location", "Paris"),
            ("Others", "vegetarian"),
        ]);
        let mixed = build_overlap_bench(&seven, 3, 2, 11).unwrap();
        assert_eq!(mixed.rewritten.len(), 5);
        assert_eq!(mixed.ground_truth_overlap, 3);
        let failing = mixed
            .rewritten
            .iter()
            .filter(|(s, v)| !tok.matches(s, v, seven.get(s).unwrap()))
            .count();
        assert_eq!(failing, 2);
        assert!(matches!(build_overlap_bench(&seven, 5, 3, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn bench_is_seeded() {
        let src = full_profile();
        assert_eq!(build_overlap_bench(&src, 4, 3, 9).unwrap(), build_overlap_bench(&src, 4, 3, 9).unwrap());
    }

    #[test]
    fn eval_prediction_examples() {
        let r = eval_predictions(&[4, 3, 5], &[4, 4, 3]).unwrap();
        assert_relative_eq!(r.exact_acc, 1.0 / 3.0);
        assert_relative_eq!(r.fuzzy_acc, 2.0 / 3.0);
        assert_relative_eq!(r.mse, 5.0 / 3.0);
        assert_relative_eq!(r.rmse, 1.2909944487358056, epsilon = 1e-12);

        let perfect = eval_predictions(&[1, 2], &[1, 2]).unwrap();
        assert_eq!((perfect.exact_acc, perfect.fuzzy_acc, perfect.mse), (1.0, 1.0, 0.0));
        assert!(eval_predictions(&[], &[]).is_err());
        assert!(matches!(eval_matcher(&[], &SlotMatcher::ExactNormalized), Err(Error::Argument(_))));
    }

    #[test]
    fn report_row_layout() {
        let r = MatcherReport {
            cases: 100,
            exact_acc: 0.75,
            fuzzy_acc: 1.0,
            mse: 0.25,
            rmse: 0.5,
        };
        assert_eq!(r.csv_row("reference"), "reference,100,75.0,100.0,0.25,0.50");
    }
}
