//! Ground truth for a straight multi-lane road: kinematics, map queries,
//! camera-like perception and periodic BSM beacons.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::StationId;
use crate::identity::{
    self, LongTermId, PseudonymCredential, SignError, SignatureEnvelope, TAG_LEN,
};

pub const BSM_INTERVAL_MS: u64 = 100;
pub const LANE_CHANGE_MS: u64 = 3_000;
pub const DEFAULT_PERCEPTION_RANGE_M: f64 = 100.0;
pub const HIGHWAY_MIN_SPEED_LIMIT_KMH: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapModel {
    pub lane_count: u32,
    pub lane_width: f64,
    pub speed_limit: f64,
    pub road_length: f64,
}

impl Default for MapModel {
    fn default() -> Self {
        MapModel {
            lane_count: 3,
            lane_width: 3.5,
            speed_limit: 130.0,
            road_length: 20_000.0,
        }
    }
}

impl MapModel {
    pub fn is_highway(&self) -> bool {
        self.speed_limit >= HIGHWAY_MIN_SPEED_LIMIT_KMH
    }

    pub fn has_lane(&self, lane: i32) -> bool {
        lane >= 0 && (lane as i64) < self.lane_count as i64
    }

    pub fn lane_center(&self, lane: f64) -> f64 {
        (lane + 0.5) * self.lane_width
    }
}

pub fn lane_exists(map: &MapModel, observer_lane: i32, lane_offset: i32) -> bool {
    map.has_lane(observer_lane.saturating_add(lane_offset))
}

/// What an executant has agreed to do: be in `target_lane` within
/// `[start_time, end_time]` at a speed inside `[min_speed, max_speed]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManeuverAssignment {
    pub maneuver_id: u64,
    pub target_lane: i32,
    pub start_time: u64,
    pub end_time: u64,
    pub min_speed: f64,
    pub max_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub long_term: LongTermId,
    pub lane: i32,
    pub s: f64,
    /// km/h
    pub speed: f64,
    pub width: f64,
    pub length: f64,
    pub is_special: bool,
    /// Continuous lateral position in lane units; `lane` is its rounding.
    pub lateral: f64,
    pub cruise_speed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<ManeuverAssignment>,
}

impl VehicleState {
    pub fn new(
        long_term: LongTermId,
        lane: i32,
        s: f64,
        speed: f64,
        width: f64,
        length: f64,
    ) -> Self {
        VehicleState {
            long_term,
            lane,
            s,
            speed,
            width,
            length,
            is_special: false,
            lateral: lane as f64,
            cruise_speed: speed,
            assignment: None,
        }
    }

    /// Position in road coordinates `(s, y)`.
    pub fn position(&self, map: &MapModel) -> (f64, f64) {
        (self.s, map.lane_center(self.lateral))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub map: MapModel,
    pub time_ms: u64,
    pub vehicles: BTreeMap<LongTermId, VehicleState>,
}

impl World {
    pub fn new(map: MapModel, vehicles: impl IntoIterator<Item = VehicleState>) -> Self {
        World {
            map,
            time_ms: 0,
            vehicles: vehicles.into_iter().map(|v| (v.long_term, v)).collect(),
        }
    }

    pub fn vehicle(&self, id: LongTermId) -> Option<&VehicleState> {
        self.vehicles.get(&id)
    }

    pub fn assign(&mut self, id: LongTermId, assignment: ManeuverAssignment) {
        if let Some(v) = self.vehicles.get_mut(&id) {
            v.assignment = Some(assignment);
        }
    }

    pub fn clear_assignment(&mut self, id: LongTermId, maneuver_id: u64) {
        if let Some(v) = self.vehicles.get_mut(&id) {
            if v.assignment.is_some_and(|a| a.maneuver_id == maneuver_id) {
                v.assignment = None;
            }
        }
    }
}

/// Advances every vehicle by `dt` milliseconds. Vehicles with an assignment
/// drift laterally toward the target lane at one lane per three seconds once
/// the start time is reached, and keep their speed inside the agreed band
/// until the end time.
pub fn step_kinematics(world: &mut World, dt: u64) {
    assert!(dt > 0, "dt must be positive");
    let t_end = world.time_ms + dt;
    let lane_rate = 1.0 / LANE_CHANGE_MS as f64;
    for v in world.vehicles.values_mut() {
        let mut speed = v.cruise_speed;
        if let Some(a) = v.assignment {
            if t_end > a.start_time {
                let active_ms = (t_end - a.start_time).min(dt) as f64;
                let target = a.target_lane as f64;
                let delta = target - v.lateral;
                let step = lane_rate * active_ms;
                v.lateral = if delta.abs() <= step {
                    target
                } else {
                    v.lateral + step * delta.signum()
                };
            }
            if t_end > a.start_time && world.time_ms < a.end_time {
                speed = v
                    .cruise_speed
                    .clamp(a.min_speed.min(a.max_speed), a.max_speed.max(a.min_speed));
            }
            if t_end >= a.end_time && (v.lateral - a.target_lane as f64).abs() < 1e-12 {
                v.assignment = None;
            }
        }
        v.speed = speed.max(0.0);
        v.s += v.speed / 3.6 * dt as f64 / 1000.0;
        v.lane = v.lateral.round() as i32;
    }
    world.time_ms = t_end;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedVehicle {
    pub lane: i32,
    pub s: f64,
    pub width: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionSnapshot {
    pub observer: LongTermId,
    pub timestamp: u64,
    pub observer_s: f64,
    pub observer_lane: i32,
    pub range: f64,
    pub observed: Vec<ObservedVehicle>,
}

impl PerceptionSnapshot {
    pub fn in_range(&self, s: f64) -> bool {
        (s - self.observer_s).abs() <= self.range
    }

    /// Any observed vehicle in `lane` whose position is within `tolerance` of `s`.
    pub fn sees(&self, lane: i32, s: f64, tolerance: f64) -> bool {
        self.observed
            .iter()
            .any(|o| o.lane == lane && (o.s - s).abs() <= tolerance)
    }
}

/// Every other vehicle with `|Δs| ≤ range`, exact ground truth. `None` when the
/// observer does not exist.
pub fn perceive(world: &World, observer: LongTermId, range: f64) -> Option<PerceptionSnapshot> {
    let me = world.vehicle(observer)?;
    let observed = world
        .vehicles
        .values()
        .filter(|v| v.long_term != observer && (v.s - me.s).abs() <= range)
        .map(|v| ObservedVehicle {
            lane: v.lane,
            s: v.s,
            width: v.width,
            length: v.length,
        })
        .collect();
    Some(PerceptionSnapshot {
        observer,
        timestamp: world.time_ms,
        observer_s: me.s,
        observer_lane: me.lane,
        range,
        observed,
    })
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` meters to each
/// observed longitudinal position.
pub fn add_position_noise<R: Rng + ?Sized>(
    snapshot: &mut PerceptionSnapshot,
    sigma: f64,
    rng: &mut R,
) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    for o in &mut snapshot.observed {
        o.s += normal.sample(rng);
    }
}

// ---------------------------------------------------------------------------
// Basic safety messages

pub const BSM_MAGIC: [u8; 2] = *b"BS";
const BSM_BODY_LEN: usize = 2 + 4 + 6 + 2 + 8 * 4;
pub const BSM_LEN: usize = BSM_BODY_LEN + 4 + TAG_LEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bsm {
    pub source_id: StationId,
    pub timestamp: u64,
    pub lane: i32,
    pub s: f64,
    pub speed: f64,
    pub width: f64,
    pub length: f64,
    pub signature: SignatureEnvelope,
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BsmError {
    #[error("BSM must be {BSM_LEN} bytes")]
    BadLength,
    #[error("bad BSM magic")]
    BadMagic,
    #[error("BSM holds a non-finite value")]
    NonFinite,
    #[error("beacon time {0} ms is not on the {BSM_INTERVAL_MS} ms grid")]
    OffCadence(u64),
    #[error(transparent)]
    Sign(#[from] SignError),
}

impl Bsm {
    pub fn ground_truth(v: &VehicleState, source_id: StationId, now: u64) -> Self {
        Bsm {
            source_id,
            timestamp: now,
            lane: v.lane,
            s: v.s,
            speed: v.speed,
            width: v.width,
            length: v.length,
            signature: SignatureEnvelope::unsigned(source_id),
        }
    }

    pub fn body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BSM_BODY_LEN);
        out.extend_from_slice(&BSM_MAGIC);
        out.extend_from_slice(&self.source_id.0.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes()[..6]);
        out.extend_from_slice(&(self.lane as i16).to_le_bytes());
        for v in [self.s, self.speed, self.width, self.length] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&self.signature.signer_id.0.to_le_bytes());
        out.extend_from_slice(&self.signature.tag);
        out
    }

    pub fn sign(mut self, cred: &PseudonymCredential, now: u64) -> Result<Self, BsmError> {
        self.signature = identity::sign(&self.body(), cred, now)?;
        Ok(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Bsm, BsmError> {
        if bytes.len() != BSM_LEN {
            return Err(BsmError::BadLength);
        }
        if bytes[..2] != BSM_MAGIC {
            return Err(BsmError::BadMagic);
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let mut ts = [0u8; 8];
        ts[..6].copy_from_slice(&bytes[6..12]);
        let lane = i16::from_le_bytes([bytes[12], bytes[13]]) as i32;
        let reals = [f64_at(14), f64_at(22), f64_at(30), f64_at(38)];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(BsmError::NonFinite);
        }
        let tag: [u8; TAG_LEN] = bytes[BSM_BODY_LEN + 4..].try_into().expect("tag length");
        Ok(Bsm {
            source_id: StationId(u32_at(2)),
            timestamp: u64::from_le_bytes(ts),
            lane,
            s: reals[0],
            speed: reals[1],
            width: reals[2],
            length: reals[3],
            signature: SignatureEnvelope {
                signer_id: StationId(u32_at(BSM_BODY_LEN)),
                tag,
            },
        })
    }

    /// Longitudinal position extrapolated to `now` at the reported speed.
    pub fn s_at(&self, now: u64) -> f64 {
        let dt = now as f64 - self.timestamp as f64;
        self.s + self.speed / 3.6 * dt / 1000.0
    }
}

/// One signed beacon per vehicle that has a primary credential. `mutate` may
/// alter a vehicle's fields before signing (attack hooks); honest runs pass a
/// no-op.
pub fn emit_bsms(
    world: &World,
    now: u64,
    primaries: &BTreeMap<LongTermId, PseudonymCredential>,
    mut mutate: impl FnMut(LongTermId, &mut Bsm),
) -> Result<Vec<Bsm>, BsmError> {
    if !now.is_multiple_of(BSM_INTERVAL_MS) {
        return Err(BsmError::OffCadence(now));
    }
    let mut out = Vec::with_capacity(world.vehicles.len());
    for v in world.vehicles.values() {
        let Some(cred) = primaries.get(&v.long_term) else {
            continue;
        };
        let mut bsm = Bsm::ground_truth(v, cred.station_id, now);
        mutate(v.long_term, &mut bsm);
        out.push(bsm.sign(cred, now)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::derive_secret;

    fn world_with(vs: Vec<VehicleState>) -> World {
        World::new(
            MapModel {
                lane_count: 2,
                ..MapModel::default()
            },
            vs,
        )
    }

    #[test]
    fn constant_speed_advance() {
        let mut w = world_with(vec![VehicleState::new(
            LongTermId(1),
            0,
            0.0,
            36.0,
            1.8,
            4.5,
        )]);
        step_kinematics(&mut w, 1000);
        assert!((w.vehicle(LongTermId(1)).unwrap().s - 10.0).abs() < 1e-9);
    }

    #[test]
    fn stationary_vehicle_stays() {
        let mut w = world_with(vec![VehicleState::new(
            LongTermId(1),
            1,
            50.0,
            0.0,
            1.8,
            4.5,
        )]);
        for _ in 0..10 {
            step_kinematics(&mut w, 100);
        }
        assert_eq!(w.vehicle(LongTermId(1)).unwrap().s, 50.0);
    }

    #[test]
    fn lane_change_completes_within_three_seconds() {
        let mut w = world_with(vec![VehicleState::new(
            LongTermId(1),
            0,
            0.0,
            100.0,
            1.8,
            4.5,
        )]);
        w.assign(
            LongTermId(1),
            ManeuverAssignment {
                maneuver_id: 1,
                target_lane: 1,
                start_time: 1_000,
                end_time: 5_000,
                min_speed: 90.0,
                max_speed: 110.0,
            },
        );
        let mut lane_at = BTreeMap::new();
        while w.time_ms < 5_000 {
            step_kinematics(&mut w, 100);
            lane_at.insert(w.time_ms, w.vehicle(LongTermId(1)).unwrap().lane);
        }
        assert_eq!(lane_at[&1_000], 0);
        assert_eq!(lane_at[&4_000], 1);
        let v = w.vehicle(LongTermId(1)).unwrap();
        assert_eq!(v.lateral, 1.0);
    }

    #[test]
    fn lane_existence() {
        let map = MapModel {
            lane_count: 2,
            ..MapModel::default()
        };
        assert!(lane_exists(&map, 0, 1));
        assert!(!lane_exists(&map, 1, 1));
        assert!(!lane_exists(&map, 0, -1));
        for lane in 0..2 {
            assert!(lane_exists(&map, lane, 0));
        }
    }

    #[test]
    fn perception_excludes_self_and_respects_range() {
        let w = world_with(vec![VehicleState::new(
            LongTermId(1),
            0,
            0.0,
            100.0,
            1.8,
            4.5,
        )]);
        assert!(perceive(&w, LongTermId(1), 100.0)
            .unwrap()
            .observed
            .is_empty());

        let w = world_with(vec![
            VehicleState::new(LongTermId(1), 0, 0.0, 100.0, 1.8, 4.5),
            VehicleState::new(LongTermId(2), 1, 30.0, 100.0, 2.0, 5.0),
            VehicleState::new(LongTermId(3), 1, 130.0, 100.0, 2.0, 5.0),
        ]);
        let snap = perceive(&w, LongTermId(1), 100.0).unwrap();
        assert_eq!(
            snap.observed,
            vec![ObservedVehicle {
                lane: 1,
                s: 30.0,
                width: 2.0,
                length: 5.0
            }]
        );
        assert!(!snap.sees(1, 130.0, 3.0));
        assert!(perceive(&w, LongTermId(9), 100.0).is_none());
    }

    #[test]
    fn bsm_roundtrip_and_cadence() {
        let w = world_with(
            (1..=5)
                .map(|i| VehicleState::new(LongTermId(i), 0, i as f64 * 20.0, 100.0, 1.8, 4.5))
                .collect(),
        );
        let primaries: BTreeMap<_, _> = (1..=5)
            .map(|i| {
                let station = StationId(i * 10);
                (
                    LongTermId(i),
                    PseudonymCredential {
                        station_id: station,
                        secret: derive_secret(0, station),
                        owner: LongTermId(i),
                        valid_from: 0,
                        valid_to: u64::MAX,
                        is_special: false,
                        capabilities: None,
                    },
                )
            })
            .collect();
        let bsms = emit_bsms(&w, 200, &primaries, |_, _| {}).unwrap();
        assert_eq!(bsms.len(), 5);
        assert!(bsms.iter().all(|b| b.width == 1.8));
        let decoded = Bsm::decode(&bsms[0].encode()).unwrap();
        assert_eq!(decoded, bsms[0]);
        assert_eq!(
            emit_bsms(&w, 250, &primaries, |_, _| {}),
            Err(BsmError::OffCadence(250))
        );
    }
}
