// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Scenario configuration: one JSON document describing maps, kernel objects, the context
//! description, enabled helpers and the planted secret.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextSpec, KernelObjectDescriptor};
use crate::memory::{DEFAULT_ARENA_SIZE, DEFAULT_SANDBOX_TAG};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapDecl {
    pub id: u32,
    pub value_size: u64,
    pub max_entries: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretDecl {
    /// Preferred arena address; the secret is allocated anywhere when absent or taken.
    #[serde(default)]
    pub addr_hint: Option<u64>,
    #[serde(default = "default_secret_len")]
    pub len: u64,
}

fn default_secret_len() -> u64 {
    64
}

impl Default for SecretDecl {
    fn default() -> Self {
        SecretDecl { addr_hint: None, len: default_secret_len() }
    }
}

/// Abstract cost units charged per executed event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostTable {
    pub alu: u64,
    pub mem: u64,
    pub jump: u64,
    pub tag_load_analog: u64,
    /// Address formation feeding a mask pair; charged to the access category.
    pub address_form: u64,
    pub marker: u64,
    pub sandbox_acquire: u64,
    pub sandbox_release: u64,
    /// Per field copied in, flushed, refreshed or written back.
    pub context_field: u64,
    /// Per granule tagged or restored.
    pub tag_granule: u64,
    pub helpers: BTreeMap<i32, u64>,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            alu: 1,
            mem: 3,
            jump: 1,
            tag_load_analog: 3,
            address_form: 0,
            marker: 1,
            sandbox_acquire: 20,
            sandbox_release: 20,
            context_field: 6,
            tag_granule: 4,
            helpers: [(1, 10), (2, 12), (3, 15), (4, 5), (5, 5), (6, 10)].into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub maps: Vec<MapDecl>,
    #[serde(default)]
    pub kernel_objects: Vec<KernelObjectDescriptor>,
    #[serde(default)]
    pub context: Option<ContextSpec>,
    /// Helper ids the program type may call; every builtin helper when absent.
    #[serde(default)]
    pub helpers_enabled: Option<Vec<i32>>,
    #[serde(default = "default_sandbox_tag")]
    pub sandbox_tag: u8,
    #[serde(default = "default_cores")]
    pub cores: u32,
    #[serde(default)]
    pub secret: Option<SecretDecl>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub time_base: u64,
    #[serde(default = "default_arena")]
    pub arena_size: usize,
    #[serde(default)]
    pub costs: CostTable,
}

fn default_sandbox_tag() -> u8 {
    DEFAULT_SANDBOX_TAG
}

fn default_cores() -> u32 {
    1
}

fn default_arena() -> usize {
    DEFAULT_ARENA_SIZE
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: String::new(),
            maps: Vec::new(),
            kernel_objects: Vec::new(),
            context: None,
            helpers_enabled: None,
            sandbox_tag: DEFAULT_SANDBOX_TAG,
            cores: 1,
            secret: None,
            seed: 0,
            time_base: 0,
            arena_size: DEFAULT_ARENA_SIZE,
            costs: CostTable::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.sandbox_tag >= 0xE {
            return bad(format!("sandbox tag {:#x} is reserved", self.sandbox_tag));
        }
        if self.cores == 0 {
            return bad("at least one core is required".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.maps {
            if !ids.insert(m.id) {
                return bad(format!("duplicate map id {}", m.id));
            }
        }
        if let Some(c) = &self.context {
            if !self.kernel_objects.iter().any(|o| o.name == c.root) {
                return bad(format!("context root `{}` is not a declared object", c.root));
            }
        }
        Ok(())
    }

    pub fn helper_enabled(&self, id: i32) -> bool {
        match &self.helpers_enabled {
            Some(list) => list.contains(&id),
            None => true,
        }
    }
}
