//! Run configuration: one TOML file, optionally layered over a named preset.
//! Unknown keys are rejected at every level.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Game, KeyLayout, Role};
use crate::observer::BobConfig;
use crate::trainer::{Regularizer, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown preset {0:?} (known: nav-alice, nav-bob, key-alice, key-bob)")]
    UnknownPreset(String),
    #[error("invalid config field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// Dimensions of an experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    /// Regularizer used for every nonzero beta; beta = 0 trains plain REINFORCE.
    pub regularizer: Regularizer,
    pub betas: Vec<f64>,
    pub n_alice: usize,
    pub n_bob_per_alice: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            regularizer: Regularizer::Action,
            betas: vec![-0.025, 0.0, 0.025],
            n_alice: 5,
            n_bob_per_alice: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: Game,
    pub role: Role,
    /// Base seed; per-run seeds for the matrix are derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Snapshot every this many episodes (final snapshot always written).
    #[serde(default)]
    pub snapshot_every: Option<u64>,
    /// Frozen Alice snapshot, needed when training Bob alone.
    #[serde(default)]
    pub alice_snapshot: Option<PathBuf>,
    #[serde(default)]
    pub alice: TrainConfig,
    #[serde(default)]
    pub bob: BobConfig,
    #[serde(default)]
    pub matrix: MatrixConfig,
    /// Key-game layout override.
    #[serde(default)]
    pub key_layout: Option<KeyLayout>,
}

pub const PRESETS: [&str; 4] = ["nav-alice", "nav-bob", "key-alice", "key-bob"];

/// Built-in presets reproducing the parameter tables.
pub fn preset(name: &str) -> Result<RunConfig, ConfigError> {
    let (game, role) = match name {
        "nav-alice" => (Game::Nav, Role::Alice),
        "nav-bob" => (Game::Nav, Role::Bob),
        "key-alice" => (Game::Key, Role::Alice),
        "key-bob" => (Game::Key, Role::Bob),
        _ => return Err(ConfigError::UnknownPreset(name.to_string())),
    };
    let mut alice = TrainConfig::default();
    let mut matrix = MatrixConfig::default();
    if game == Game::Key {
        alice.total_steps = 250_000;
        matrix.betas = vec![-0.25, 0.0, 0.25];
    }
    Ok(RunConfig {
        game,
        role,
        seed: 0,
        out_dir: None,
        snapshot_every: None,
        alice_snapshot: None,
        alice,
        bob: BobConfig::default(),
        matrix,
        key_layout: None,
    })
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a config, layering it over `preset` when given.
    pub fn from_toml(text: &str, preset_name: Option<&str>) -> Result<Self, ConfigError> {
        let top: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let cfg: RunConfig = match preset_name {
            Some(name) => {
                let mut base = toml::Value::try_from(preset(name)?)
                    .map_err(|e| ConfigError::Parse(e.to_string()))?;
                merge(&mut base, top);
                base.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
            }
            None => top.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.alice.validate().map_err(|e| invalid("alice", e.to_string()))?;
        self.bob.validate().map_err(|e| invalid("bob", e.to_string()))?;
        let m = &self.matrix;
        if m.betas.is_empty() {
            return Err(invalid("matrix.betas", "at least one beta is required"));
        }
        if m.betas.iter().any(|b| !b.is_finite()) {
            return Err(invalid("matrix.betas", "betas must be finite"));
        }
        if m.n_alice == 0 || m.n_bob_per_alice == 0 {
            return Err(invalid("matrix", "n_alice and n_bob_per_alice must be positive"));
        }
        if m.regularizer == Regularizer::None && m.betas.iter().any(|&b| b != 0.0) {
            return Err(invalid("matrix.regularizer", "nonzero betas need action or state"));
        }
        if self.snapshot_every == Some(0) {
            return Err(invalid("snapshot_every", "must be positive"));
        }
        if let Some(kl) = &self.key_layout {
            let inside = |p: crate::env::GridPos| p.x < kl.width && p.y < kl.height;
            let cells = kl
                .doors
                .iter()
                .chain(&kl.bob_keys)
                .chain(&kl.alice_keys)
                .chain(&kl.alice_spawns)
                .chain([&kl.bob_spawn, &kl.master_key]);
            if cells.clone().any(|&p| !inside(p)) {
                return Err(invalid("key_layout", "every cell must lie inside the grid"));
            }
            if kl.alice_spawns.is_empty() {
                return Err(invalid("key_layout.alice_spawns", "at least one spawn is required"));
            }
        }
        Ok(())
    }

    /// The Alice training config for a matrix cell at `beta`.
    pub fn alice_for_beta(&self, beta: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            regularizer: if beta == 0.0 {
                Regularizer::None
            } else {
                self.matrix.regularizer
            },
            beta,
            seed,
            ..self.alice.clone()
        }
    }
}

/// Derives an independent seed for a matrix cell.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
