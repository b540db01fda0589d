use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{fig4_scenario, AttackId, AttackSpec, GHOST_LENGTH_M, GHOST_WIDTH_M};
use crate::detection::{DetectorId, DetectorSet};
use crate::identity::LongTermId;
use crate::world::MapModel;

use super::config::{ChannelConfig, DetectorConfig, ScenarioConfig, VehicleConfig};

/// Vehicle 4 in the reference layout.
pub const REFERENCE_ATTACKER: LongTermId = LongTermId(4);

const DIMENSION_STREAM: u64 = 6;

/// Six vehicles on a three-lane highway in a staircase, 50 m apart along the
/// road. Five minutes, 5% loss. Honest dimensions vary with the seed; the
/// attacker drives a car of the ghost dimensions and carries 3 pseudonyms.
pub fn reference_scenario(seed: u64, attack: Option<AttackId>) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DIMENSION_STREAM);
    let vehicles = (1..=6u32)
        .map(|i| {
            let id = LongTermId(i);
            let attacker = id == REFERENCE_ATTACKER;
            let (width, length) = if attacker {
                (GHOST_WIDTH_M, GHOST_LENGTH_M)
            } else {
                (
                    round2(rng.random_range(1.7..=1.95)),
                    round2(rng.random_range(4.2..=4.9)),
                )
            };
            VehicleConfig {
                id,
                lane: ((i - 1) % 3) as i32,
                s: 50.0 * (i - 1) as f64,
                speed: 100.0,
                width,
                length,
                is_special: false,
                credentials: attacker.then_some(3),
            }
        })
        .collect();
    ScenarioConfig {
        seed,
        duration_ms: 300_000,
        tick_ms: 100,
        map: MapModel::default(),
        vehicles,
        attacks: attack
            .map(|id| vec![AttackSpec::new(id, REFERENCE_ATTACKER)])
            .unwrap_or_default(),
        channel: ChannelConfig {
            loss_prob: 0.05,
            latency_ms: 100,
            range_m: 500.0,
        },
        detectors: DetectorConfig::default(),
        request_generator: Default::default(),
        perception: Default::default(),
        protocol: Default::default(),
        trace_kinematics: false,
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Who is who in [`fig4_config`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fig4Layout {
    pub attacker: LongTermId,
    pub victim_a: LongTermId,
    pub victim_b: LongTermId,
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
}

impl Fig4Layout {
    pub const DEFAULT: Fig4Layout = Fig4Layout {
        attacker: LongTermId(3),
        victim_a: LongTermId(1),
        victim_b: LongTermId(2),
        t1: 1_000,
        t2: 2_000,
        t3: 10_000,
    };
}

/// The two-victim collision setup: the attacker between two victims in
/// different lanes, two bystanders ahead, no honest traffic and no loss.
pub fn fig4_config(seed: u64, cross_session_detector: bool, broadcast: bool) -> ScenarioConfig {
    let l = Fig4Layout::DEFAULT;
    let car = |id: u32, lane: i32, s: f64| VehicleConfig {
        id: LongTermId(id),
        lane,
        s,
        speed: 100.0,
        width: 1.8,
        length: 4.5,
        is_special: false,
        credentials: None,
    };
    let attacks = fig4_scenario(l.attacker, l.victim_a, l.victim_b, l.t1, l.t2, l.t3)
        .expect("fixed layout is valid")
        .into_iter()
        .map(|s| {
            if broadcast {
                s.with("mode", "broadcast")
            } else {
                s
            }
        })
        .collect();
    let enabled = if cross_session_detector {
        DetectorSet::all()
    } else {
        DetectorSet::all().without(DetectorId::D7x)
    };
    let mut cfg = ScenarioConfig {
        seed,
        duration_ms: 20_000,
        tick_ms: 100,
        map: MapModel::default(),
        vehicles: vec![
            car(1, 0, 100.0),
            car(2, 2, 110.0),
            car(3, 1, 60.0),
            car(4, 1, 180.0),
            car(5, 2, 240.0),
        ],
        attacks,
        channel: ChannelConfig {
            loss_prob: 0.0,
            latency_ms: 100,
            range_m: 500.0,
        },
        detectors: DetectorConfig {
            enabled,
            ..DetectorConfig::default()
        },
        request_generator: Default::default(),
        perception: Default::default(),
        protocol: Default::default(),
        trace_kinematics: false,
    };
    cfg.request_generator.rate_per_min = 0.0;
    cfg
}
