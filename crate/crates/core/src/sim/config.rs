use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackSpec, PlanKind};
use crate::detection::{DetectorSet, Thresholds};
use crate::identity::LongTermId;
use crate::protocol::{DEFAULT_RESPONSE_TIMEOUT_MS, DEFAULT_START_GRACE_MS};
use crate::world::{MapModel, BSM_INTERVAL_MS, DEFAULT_PERCEPTION_RANGE_M};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "MSCS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_ms: u64,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default)]
    pub map: MapModel,
    pub vehicles: Vec<VehicleConfig>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub detectors: DetectorConfig,
    #[serde(default)]
    pub request_generator: RequestGenerator,
    #[serde(default)]
    pub perception: PerceptionConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    /// Log every vehicle's state each tick.
    #[serde(default)]
    pub trace_kinematics: bool,
}

fn default_tick_ms() -> u64 {
    100
}

/// Pseudonyms held by a vehicle that names no explicit count.
pub const DEFAULT_CREDENTIALS: usize = 1;
/// Same, for a vehicle that launches at least one attack.
pub const DEFAULT_ATTACKER_CREDENTIALS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    pub id: LongTermId,
    pub lane: i32,
    pub s: f64,
    /// km/h
    pub speed: f64,
    pub width: f64,
    pub length: f64,
    #[serde(default)]
    pub is_special: bool,
    /// Defaults to 3 for attackers and 1 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub loss_prob: f64,
    pub latency_ms: u64,
    pub range_m: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            loss_prob: 0.0,
            latency_ms: 100,
            range_m: 500.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub enabled: DetectorSet,
    pub thresholds: Thresholds,
    /// Judge overheard messages not addressed to the observer.
    pub spectators: bool,
    /// Time from a report until every station rejects the revoked pseudonym.
    /// Zero is instant, which no real PKI achieves.
    pub revocation_delay_ms: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            enabled: DetectorSet::all(),
            thresholds: Thresholds::default(),
            spectators: true,
            revocation_delay_ms: 0,
        }
    }
}

/// Honest lane-keeping requests, arriving as a Poisson process per vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestGenerator {
    pub rate_per_min: f64,
    pub lead_ms: u64,
    pub window_ms: u64,
    pub speed_band_kmh: f64,
    pub margin_m: f64,
    /// Stations heard within this window are addressed.
    pub audience_window_ms: u64,
    pub retransmit_ms: u64,
    pub retry_delay_ms: u64,
    pub max_retries: u32,
}

impl Default for RequestGenerator {
    fn default() -> Self {
        RequestGenerator {
            rate_per_min: 2.0,
            lead_ms: 500,
            window_ms: 1_500,
            speed_band_kmh: 10.0,
            margin_m: 5.0,
            audience_window_ms: 1_000,
            retransmit_ms: 200,
            retry_delay_ms: 1_000,
            max_retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub range_m: f64,
    pub noise_sigma_m: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            range_m: DEFAULT_PERCEPTION_RANGE_M,
            noise_sigma_m: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub response_timeout_ms: u64,
    pub start_grace_ms: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            response_timeout_ms: DEFAULT_RESPONSE_TIMEOUT_MS,
            start_grace_ms: DEFAULT_START_GRACE_MS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { path, .. } => Some(path),
            ConfigError::Parse(_) => None,
        }
    }
}

impl ScenarioConfig {
    /// Parses without validating.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the seed with `MSCS_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<(), ConfigError> {
        if let Some(seed) = seed_from_env()? {
            self.seed = seed;
        }
        Ok(())
    }

    pub fn credentials_of(&self, v: &VehicleConfig) -> usize {
        v.credentials.unwrap_or_else(|| {
            if self.attacks.iter().any(|a| a.attacker == v.id) {
                DEFAULT_ATTACKER_CREDENTIALS
            } else {
                DEFAULT_CREDENTIALS
            }
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tick_ms == 0 || !BSM_INTERVAL_MS.is_multiple_of(self.tick_ms) {
            return Err(ConfigError::invalid(
                "tick_ms",
                format!("must divide {BSM_INTERVAL_MS}"),
            ));
        }
        if self.duration_ms == 0 {
            return Err(ConfigError::invalid("duration_ms", "must be positive"));
        }
        let m = &self.map;
        if m.lane_count == 0 || m.lane_count > i8::MAX as u32 {
            return Err(ConfigError::invalid("map.lane_count", "must be in 1..=127"));
        }
        for (key, v) in [
            ("lane_width", m.lane_width),
            ("speed_limit", m.speed_limit),
            ("road_length", m.road_length),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::invalid(
                    format!("map.{key}"),
                    "must be positive",
                ));
            }
        }
        let c = &self.channel;
        if !(0.0..=1.0).contains(&c.loss_prob) {
            return Err(ConfigError::invalid(
                "channel.loss_prob",
                "must lie in [0, 1]",
            ));
        }
        if c.latency_ms < self.tick_ms || !c.latency_ms.is_multiple_of(self.tick_ms) {
            return Err(ConfigError::invalid(
                "channel.latency_ms",
                "must be a positive multiple of tick_ms",
            ));
        }
        if !(c.range_m.is_finite() && c.range_m > 0.0) {
            return Err(ConfigError::invalid("channel.range_m", "must be positive"));
        }
        let p = &self.perception;
        if !(p.range_m.is_finite() && p.range_m > 0.0) {
            return Err(ConfigError::invalid(
                "perception.range_m",
                "must be positive",
            ));
        }
        if !(p.noise_sigma_m.is_finite() && p.noise_sigma_m >= 0.0) {
            return Err(ConfigError::invalid(
                "perception.noise_sigma_m",
                "must be non-negative",
            ));
        }
        let r = &self.request_generator;
        if !(r.rate_per_min.is_finite() && r.rate_per_min >= 0.0) {
            return Err(ConfigError::invalid(
                "request_generator.rate_per_min",
                "must be non-negative",
            ));
        }
        if r.window_ms == 0 {
            return Err(ConfigError::invalid(
                "request_generator.window_ms",
                "must be positive",
            ));
        }
        if r.retransmit_ms == 0 {
            return Err(ConfigError::invalid(
                "request_generator.retransmit_ms",
                "must be positive",
            ));
        }
        if self.detectors.thresholds.denial_count == 0 {
            return Err(ConfigError::invalid(
                "detectors.thresholds.denial_count",
                "must be positive",
            ));
        }
        if self.vehicles.is_empty() {
            return Err(ConfigError::invalid(
                "vehicles",
                "at least one vehicle is required",
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            let at = |key: &str| format!("vehicles[{i}].{key}");
            if !ids.insert(v.id) {
                return Err(ConfigError::invalid(
                    at("id"),
                    format!("duplicate vehicle id {}", v.id.0),
                ));
            }
            if !m.has_lane(v.lane) {
                return Err(ConfigError::invalid(
                    at("lane"),
                    format!("map has {} lanes", m.lane_count),
                ));
            }
            if !(v.s.is_finite() && v.s >= 0.0 && v.s <= m.road_length) {
                return Err(ConfigError::invalid(at("s"), "must lie on the road"));
            }
            if !(v.speed.is_finite() && v.speed >= 0.0) {
                return Err(ConfigError::invalid(at("speed"), "must be non-negative"));
            }
            for (key, x) in [("width", v.width), ("length", v.length)] {
                if !(x.is_finite() && x > 0.0) {
                    return Err(ConfigError::invalid(at(key), "must be positive"));
                }
            }
            if !(1..=64).contains(&self.credentials_of(v)) {
                return Err(ConfigError::invalid(at("credentials"), "must be in 1..=64"));
            }
        }
        for (i, spec) in self.attacks.iter().enumerate() {
            let at = |key: &str| format!("attacks[{i}].{key}");
            let Some(attacker) = self.vehicles.iter().find(|v| v.id == spec.attacker) else {
                return Err(ConfigError::invalid(
                    at("attacker"),
                    format!("no vehicle {}", spec.attacker.0),
                ));
            };
            let plan = spec
                .plan(m)
                .map_err(|e| ConfigError::invalid(at(&format!("params.{}", e.key)), e.message))?;
            for v in plan.referenced_vehicles() {
                if !ids.contains(&v) {
                    return Err(ConfigError::invalid(
                        at("params"),
                        format!("no vehicle {}", v.0),
                    ));
                }
            }
            if matches!(plan.kind, PlanKind::Ghost { .. }) && self.credentials_of(attacker) < 2 {
                return Err(ConfigError::invalid(
                    at("attacker"),
                    "ghost attacks need at least 2 credentials on the attacker",
                ));
            }
        }
        Ok(())
    }
}

pub fn seed_from_env() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(text) => text.trim().parse().map(Some).map_err(|_| {
            ConfigError::invalid(SEED_ENV, format!("not an unsigned integer: {text:?}"))
        }),
        Err(_) => Ok(None),
    }
}
