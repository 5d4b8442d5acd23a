//! Bundled static data: slot value pools and the user-simulator template bank.

use std::sync::OnceLock;

use indexmap::IndexMap;
use serde::Deserialize;

const VALUE_POOLS: &str = include_str!("../data/value_pools.json");
const TEMPLATES: &str = include_str!("../data/templates.json");

#[derive(Debug, Deserialize)]
pub struct ValuePools {
    /// Pools for the ten standard slots.
    pub standard: IndexMap<String, Vec<String>>,
    /// Extra slots used when generating open-schema profiles.
    pub extended: IndexMap<String, Vec<String>>,
}

impl ValuePools {
    /// Pool for a slot name, looked up case-insensitively across both groups.
    pub fn pool(&self, slot: &str) -> Option<&[String]> {
        let wanted = slot.to_lowercase();
        self.standard
            .iter()
            .chain(self.extended.iter())
            .find(|(name, _)| name.to_lowercase() == wanted)
            .map(|(_, values)| values.as_slice())
    }

    /// Every value in every pool, in file order.
    pub fn all_values(&self) -> impl Iterator<Item = &str> {
        self.standard
            .values()
            .chain(self.extended.values())
            .flat_map(|v| v.iter().map(String::as_str))
    }
}

pub type TemplateBank = IndexMap<String, Vec<String>>;

pub fn value_pools() -> &'static ValuePools {
    static POOLS: OnceLock<ValuePools> = OnceLock::new();
    POOLS.get_or_init(|| serde_json::from_str(VALUE_POOLS).expect("bundled value pools are valid JSON"))
}

pub fn template_bank() -> &'static TemplateBank {
    static BANK: OnceLock<TemplateBank> = OnceLock::new();
    BANK.get_or_init(|| serde_json::from_str(TEMPLATES).expect("bundled templates are valid JSON"))
}
