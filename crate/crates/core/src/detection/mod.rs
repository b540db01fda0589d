//! Misbehavior detectors over received beacons and maneuver messages.
//!
//! Every detector is a pure function of a [`DetectionContext`] snapshot and one
//! [`DetectorInput`]. Detectors never read each other's verdicts, and never see
//! which messages were attack-originated.

// Negated bounds are deliberate: NaN fails every bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod history;
mod report;

pub use history::{
    BsmHistory, EvidenceStore, MscmHistory, MscmRecord, RememberedTrr, ResponseHistory,
    ResponseRecord, StoredMessage, BSM_RETENTION_MS, MSCM_RETENTION_MS,
};
pub use report::{generate_report, MisbehaviorReport, ReportError};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackId;
use crate::codec::{
    DecodeError, Maneuver, Mscm, MscmType, ReasonCode, StationId, SubManeuver, SubManeuverStatus,
    TrrLocation,
};
use crate::digest::MessageHash;
use crate::geometry::{footprint, is_simple, RoadFrame};
use crate::identity::CredentialDirectory;
use crate::protocol::{Phase, SessionState, DEFAULT_RESPONSE_TIMEOUT_MS};
use crate::world::{Bsm, MapModel, PerceptionSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DetectorId {
    D1,
    D2,
    D3,
    D4,
    D5,
    D6,
    D7,
    D7x,
    D8,
    D9,
    D10,
    D11,
    D12,
    D13,
    D14,
    D15,
    D16,
}

impl DetectorId {
    pub const ALL: [DetectorId; 17] = [
        DetectorId::D1,
        DetectorId::D2,
        DetectorId::D3,
        DetectorId::D4,
        DetectorId::D5,
        DetectorId::D6,
        DetectorId::D7,
        DetectorId::D7x,
        DetectorId::D8,
        DetectorId::D9,
        DetectorId::D10,
        DetectorId::D11,
        DetectorId::D12,
        DetectorId::D13,
        DetectorId::D14,
        DetectorId::D15,
        DetectorId::D16,
    ];

    pub fn code(self) -> &'static str {
        match self {
            DetectorId::D1 => "D1",
            DetectorId::D2 => "D2",
            DetectorId::D3 => "D3",
            DetectorId::D4 => "D4",
            DetectorId::D5 => "D5",
            DetectorId::D6 => "D6",
            DetectorId::D7 => "D7",
            DetectorId::D7x => "D7x",
            DetectorId::D8 => "D8",
            DetectorId::D9 => "D9",
            DetectorId::D10 => "D10",
            DetectorId::D11 => "D11",
            DetectorId::D12 => "D12",
            DetectorId::D13 => "D13",
            DetectorId::D14 => "D14",
            DetectorId::D15 => "D15",
            DetectorId::D16 => "D16",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorId::D1 => "FormatCheck",
            DetectorId::D2 => "TrrConsistency",
            DetectorId::D3 => "GhostVehicle",
            DetectorId::D4 => "DenialRate",
            DetectorId::D5 => "MaxSpeedPlausibility",
            DetectorId::D6 => "LaneExistence",
            DetectorId::D7 => "SubManeuverOverlap",
            DetectorId::D7x => "CrossSessionOverlap",
            DetectorId::D8 => "NonResponseEvidence",
            DetectorId::D9 => "MinSpeedPlausibility",
            DetectorId::D10 => "StaticFieldConsistency",
            DetectorId::D11 => "WidthPlausibility",
            DetectorId::D12 => "LengthPlausibility",
            DetectorId::D13 => "TemporalOrder",
            DetectorId::D14 => "StartBeforeTimestamp",
            DetectorId::D15 => "DurationBound",
            DetectorId::D16 => "BsmMscmConsistency",
        }
    }

    /// Attacks this detector is expected to catch. D7x targets the
    /// cross-session form of A8.
    pub fn targets(self) -> &'static [AttackId] {
        use AttackId::*;
        match self {
            DetectorId::D1 => &[A1],
            DetectorId::D2 => &[A2],
            DetectorId::D3 => &[A3, A7],
            DetectorId::D4 => &[A4],
            DetectorId::D5 => &[A5],
            DetectorId::D6 => &[A6],
            DetectorId::D7 => &[A8],
            DetectorId::D7x => &[A8],
            DetectorId::D8 => &[A9],
            DetectorId::D9 => &[A10],
            DetectorId::D10 => &[A11],
            DetectorId::D11 => &[A12],
            DetectorId::D12 => &[A13],
            DetectorId::D13 => &[A14],
            DetectorId::D14 => &[A15],
            DetectorId::D15 => &[A16],
            DetectorId::D16 => &[A11],
        }
    }

    /// Detectors expected to flag `attack` in its default (single-message) form.
    pub fn mapped_to(attack: AttackId) -> Vec<DetectorId> {
        DetectorId::ALL
            .into_iter()
            .filter(|d| *d != DetectorId::D7x && d.targets().contains(&attack))
            .collect()
    }
}

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for DetectorId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DetectorId::ALL
            .into_iter()
            .find(|d| d.code().eq_ignore_ascii_case(s) || d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown detector {s:?}"))
    }
}

/// The active detectors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectorSet(BTreeSet<DetectorId>);

impl Default for DetectorSet {
    fn default() -> Self {
        DetectorSet::all()
    }
}

impl DetectorSet {
    pub fn all() -> Self {
        DetectorSet(DetectorId::ALL.into_iter().collect())
    }

    pub fn none() -> Self {
        DetectorSet(BTreeSet::new())
    }

    pub fn contains(&self, d: DetectorId) -> bool {
        self.0.contains(&d)
    }

    pub fn insert(&mut self, d: DetectorId) {
        self.0.insert(d);
    }

    pub fn remove(&mut self, d: DetectorId) {
        self.0.remove(&d);
    }

    pub fn without(mut self, d: DetectorId) -> Self {
        self.0.remove(&d);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = DetectorId> + '_ {
        self.0.iter().copied()
    }

    /// Parses a comma-separated list such as `D1,D5,D7x`.
    pub fn parse_list(text: &str) -> Result<Self, String> {
        text.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(DetectorId::from_str)
            .collect::<Result<BTreeSet<_>, _>>()
            .map(DetectorSet)
    }
}

impl FromIterator<DetectorId> for DetectorSet {
    fn from_iter<T: IntoIterator<Item = DetectorId>>(iter: T) -> Self {
        DetectorSet(iter.into_iter().collect())
    }
}

/// Detectors an honest participant consults before agreeing to a request.
/// D7x joins the list when it is active.
pub const PREFILTER: [DetectorId; 8] = [
    DetectorId::D2,
    DetectorId::D5,
    DetectorId::D6,
    DetectorId::D7,
    DetectorId::D9,
    DetectorId::D13,
    DetectorId::D14,
    DetectorId::D15,
];

/// Numeric tolerances. Every field is a config key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub speed_factor: f64,
    pub min_speed_floor_kmh: f64,
    pub min_speed_factor: f64,
    pub neighbor_window_ms: u64,
    pub highway_speed_limit_kmh: f64,
    pub max_length_m: f64,
    pub max_duration_ms: u64,
    pub ghost_tolerance_m: f64,
    pub width_tolerance_m: f64,
    pub length_tolerance_m: f64,
    pub denial_window_ms: u64,
    pub denial_count: usize,
    pub static_window_ms: u64,
    pub bsm_window_ms: u64,
    pub trajectory_longitudinal_m: f64,
    /// Lanes a beacon may differ from the target lane once the lane change
    /// should be complete.
    pub trajectory_lane_tolerance: i32,
    pub lane_change_allowance_ms: u64,
    pub trajectory_grace_ms: u64,
    pub response_timeout_ms: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            speed_factor: 1.2,
            min_speed_floor_kmh: 5.0,
            min_speed_factor: 0.25,
            neighbor_window_ms: 2_000,
            highway_speed_limit_kmh: crate::world::HIGHWAY_MIN_SPEED_LIMIT_KMH,
            max_length_m: 30.0,
            max_duration_ms: 60_000,
            ghost_tolerance_m: 3.0,
            width_tolerance_m: 0.2,
            length_tolerance_m: 0.5,
            denial_window_ms: 5_000,
            denial_count: 3,
            static_window_ms: 30_000,
            bsm_window_ms: 10_000,
            trajectory_longitudinal_m: 10.0,
            trajectory_lane_tolerance: 0,
            lane_change_allowance_ms: crate::world::LANE_CHANGE_MS,
            trajectory_grace_ms: 1_000,
            response_timeout_ms: DEFAULT_RESPONSE_TIMEOUT_MS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MessageRef {
    Message { hash: MessageHash },
    Session { maneuver_id: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundField {
    MaxSpeed,
    MinSpeed,
    Width,
    Length,
    Duration,
    Span,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrrProblem {
    TypeLocationMismatch,
    EmptyLaneSegment,
    NonSimplePolygon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimBasis {
    Beacon,
    Trr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSessionHit {
    pub sub_index: usize,
    pub other_maneuver_id: u64,
    pub other_executant: StationId,
}

/// What a detector saw, in enough detail to re-derive the verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    Undecodable {
        error: DecodeError,
    },
    TrrInconsistent {
        sub_index: usize,
        problem: TrrProblem,
    },
    Ghost {
        claimed: StationId,
        lane: i32,
        s_min: f64,
        s_max: f64,
        basis: ClaimBasis,
    },
    DenialRate {
        disagreements: usize,
        window_ms: u64,
        max_to_one_requester: usize,
    },
    Bound {
        sub_index: Option<usize>,
        field: BoundField,
        value: f64,
        bound: f64,
    },
    Temporal {
        sub_index: usize,
        start_time: u64,
        end_time: u64,
        msg_timestamp: u64,
    },
    LaneMissing {
        sub_index: usize,
        requester_lane: i32,
        lane_offset: i8,
        lane_count: u32,
    },
    Overlap {
        pairs: Vec<(usize, usize)>,
    },
    CrossSession {
        hits: Vec<CrossSessionHit>,
    },
    NonResponse {
        maneuver_id: u64,
        window_start: u64,
        window_end: u64,
        transmission: MessageHash,
    },
    StaticMismatch {
        executant: StationId,
        previous: f64,
        current: f64,
        previous_message: MessageHash,
    },
    Dimension {
        executant: StationId,
        sub_index: usize,
        mscm_width: f64,
        bsm_width: f64,
        mscm_length: f64,
        bsm_length: f64,
        beacon: MessageHash,
    },
    Trajectory {
        maneuver_id: u64,
        beacon_time: u64,
        lane: i32,
        s: f64,
        target_lane: Option<i32>,
        s_range: (f64, f64),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub detector: DetectorId,
    pub suspect: StationId,
    pub message_ref: MessageRef,
    pub timestamp: u64,
    pub evidence: Evidence,
    /// Further messages signed by the suspect that support the verdict.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub related: Vec<MessageHash>,
}

impl DetectionEvent {
    /// Every message hash the event relies on.
    pub fn message_hashes(&self) -> Vec<MessageHash> {
        let mut out = Vec::new();
        if let MessageRef::Message { hash } = self.message_ref {
            out.push(hash);
        }
        for h in &self.related {
            if !out.contains(h) {
                out.push(*h);
            }
        }
        out
    }
}

/// One thing to judge.
#[derive(Clone, Copy, Debug)]
pub enum DetectorInput<'a> {
    Mscm {
        msg: &'a Mscm,
        hash: MessageHash,
    },
    /// A frame whose signature verified but whose fields did not decode.
    Undecodable {
        signer: StationId,
        error: &'a DecodeError,
        hash: MessageHash,
    },
    Bsm {
        bsm: &'a Bsm,
        hash: MessageHash,
    },
    /// A session the observer requested expired with stations still pending.
    SessionExpired {
        session: &'a SessionState,
    },
}

/// Read-only view of one observer's state.
#[derive(Clone, Copy)]
pub struct DetectionContext<'a> {
    pub observer: StationId,
    pub map: &'a MapModel,
    pub perception: Option<&'a PerceptionSnapshot>,
    pub bsms: &'a BsmHistory,
    pub mscms: &'a MscmHistory,
    pub responses: &'a ResponseHistory,
    pub remembered: &'a [RememberedTrr],
    pub sessions: &'a BTreeMap<u64, SessionState>,
    pub directory: &'a CredentialDirectory,
    pub thresholds: &'a Thresholds,
    pub enabled: &'a DetectorSet,
}

pub fn run_detectors(
    input: &DetectorInput<'_>,
    ctx: &DetectionContext<'_>,
    now: u64,
) -> Vec<DetectionEvent> {
    evaluate(input, ctx, now, &|d| ctx.enabled.contains(d))
}

/// True when the request triggers none of the detectors an honest
/// participant screens with.
pub fn passes_prefilter(
    msg: &Mscm,
    hash: MessageHash,
    ctx: &DetectionContext<'_>,
    now: u64,
) -> bool {
    let cross = ctx.enabled.contains(DetectorId::D7x);
    let select = |d: DetectorId| PREFILTER.contains(&d) || (cross && d == DetectorId::D7x);
    evaluate(&DetectorInput::Mscm { msg, hash }, ctx, now, &select).is_empty()
}

fn evaluate(
    input: &DetectorInput<'_>,
    ctx: &DetectionContext<'_>,
    now: u64,
    on: &dyn Fn(DetectorId) -> bool,
) -> Vec<DetectionEvent> {
    let mut out = Vec::new();
    match *input {
        DetectorInput::Undecodable {
            signer,
            error,
            hash,
        } => {
            let detector = if *error == DecodeError::TrrMismatch {
                DetectorId::D2
            } else {
                DetectorId::D1
            };
            if on(detector) {
                out.push(DetectionEvent {
                    detector,
                    suspect: signer,
                    message_ref: MessageRef::Message { hash },
                    timestamp: now,
                    evidence: Evidence::Undecodable {
                        error: error.clone(),
                    },
                    related: Vec::new(),
                });
            }
        }
        DetectorInput::Mscm { msg, hash } => evaluate_mscm(msg, hash, ctx, now, on, &mut out),
        DetectorInput::Bsm { bsm, hash } => {
            if on(DetectorId::D16) {
                for evidence in check_trajectory(bsm, ctx.remembered, ctx.sessions, ctx.thresholds)
                {
                    let Evidence::Trajectory { maneuver_id, .. } = evidence else {
                        continue;
                    };
                    out.push(DetectionEvent {
                        detector: DetectorId::D16,
                        suspect: bsm.source_id,
                        message_ref: MessageRef::Session { maneuver_id },
                        timestamp: now,
                        evidence,
                        related: vec![hash],
                    });
                }
            }
        }
        DetectorInput::SessionExpired { session } => {
            if on(DetectorId::D8) {
                for (suspect, transmission) in check_nonresponse(
                    session,
                    ctx.bsms,
                    ctx.mscms,
                    ctx.thresholds.response_timeout_ms,
                ) {
                    out.push(DetectionEvent {
                        detector: DetectorId::D8,
                        suspect,
                        message_ref: MessageRef::Session {
                            maneuver_id: session.maneuver_id,
                        },
                        timestamp: now,
                        evidence: Evidence::NonResponse {
                            maneuver_id: session.maneuver_id,
                            window_start: session.created_at,
                            window_end: session.created_at + ctx.thresholds.response_timeout_ms,
                            transmission,
                        },
                        related: vec![transmission],
                    });
                }
            }
        }
    }
    out
}

fn evaluate_mscm(
    msg: &Mscm,
    hash: MessageHash,
    ctx: &DetectionContext<'_>,
    now: u64,
    on: &dyn Fn(DetectorId) -> bool,
    out: &mut Vec<DetectionEvent>,
) {
    let t = ctx.thresholds;
    let event = |detector: DetectorId, evidence: Evidence| DetectionEvent {
        detector,
        suspect: msg.source_id,
        message_ref: MessageRef::Message { hash },
        timestamp: now,
        evidence,
        related: Vec::new(),
    };
    let requester_lane = ctx
        .bsms
        .latest_within(msg.source_id, now, t.bsm_window_ms)
        .map(|b| b.lane);

    if on(DetectorId::D3) {
        if let Some(perception) = ctx.perception {
            let claims = claimed_positions(msg, ctx, now);
            for c in check_ghost(&claims, perception, t.ghost_tolerance_m) {
                out.push(event(
                    DetectorId::D3,
                    Evidence::Ghost {
                        claimed: c.station,
                        lane: c.lane,
                        s_min: c.s_min,
                        s_max: c.s_max,
                        basis: c.basis,
                    },
                ));
            }
        }
    }

    if msg.msg_type == MscmType::Response {
        if on(DetectorId::D4) && matches!(msg.reason_code, Some(ReasonCode::Disagree(_))) {
            let current = ResponseRecord {
                timestamp: msg.msg_timestamp,
                responder: msg.source_id,
                requester: msg
                    .destination_ids
                    .first()
                    .copied()
                    .unwrap_or(StationId::RESERVED),
                maneuver_id: msg.maneuver_id,
                reason: msg.reason_code.expect("matched above"),
                hash,
            };
            if let Some(finding) = check_denial_rate(
                ctx.responses,
                &current,
                now,
                t.denial_window_ms,
                t.denial_count,
            ) {
                let mut e = event(
                    DetectorId::D4,
                    Evidence::DenialRate {
                        disagreements: finding.messages.len(),
                        window_ms: t.denial_window_ms,
                        max_to_one_requester: finding.max_to_one_requester,
                    },
                );
                e.related = finding
                    .messages
                    .into_iter()
                    .filter(|h| *h != hash)
                    .collect();
                out.push(e);
            }
        }
        return;
    }

    let Some(maneuver) = msg.maneuver.as_ref() else {
        return;
    };
    let signer_special = ctx.directory.is_special(msg.signature.signer_id);
    let avg_speed = average_neighbor_speed(ctx.bsms, ctx.observer, now, t.neighbor_window_ms);
    let inputs = PlausibilityInputs {
        speed_limit: ctx.map.speed_limit,
        lane_width: ctx.map.lane_width,
        highway: ctx.map.speed_limit >= t.highway_speed_limit_kmh,
        avg_neighbor_speed: avg_speed,
        signer_special,
        thresholds: t,
    };

    if on(DetectorId::D2) {
        for (i, sub) in maneuver.sub_maneuvers.iter().enumerate() {
            if let Some(problem) = trr_problem(sub) {
                out.push(event(
                    DetectorId::D2,
                    Evidence::TrrInconsistent {
                        sub_index: i,
                        problem,
                    },
                ));
            }
        }
    }

    let mut duration_flagged = false;
    for (i, sub) in maneuver.sub_maneuvers.iter().enumerate() {
        for (detector, evidence) in check_value_plausibility(sub, i, msg.msg_timestamp, &inputs) {
            if on(detector) {
                duration_flagged |= detector == DetectorId::D15;
                out.push(event(detector, evidence));
            }
        }
    }
    if on(DetectorId::D15) && !duration_flagged {
        if let Some((start, end)) = maneuver.time_span() {
            let span = end.saturating_sub(start);
            if span > t.max_duration_ms {
                out.push(event(
                    DetectorId::D15,
                    Evidence::Bound {
                        sub_index: None,
                        field: BoundField::Span,
                        value: span as f64,
                        bound: t.max_duration_ms as f64,
                    },
                ));
            }
        }
    }

    if on(DetectorId::D6) {
        if let Some(rl) = requester_lane {
            for (i, sub) in maneuver.sub_maneuvers.iter().enumerate() {
                if let TrrLocation::LaneSegment { lane_offset, .. } = sub.trr.location {
                    if !ctx.map.has_lane(rl + lane_offset as i32) {
                        out.push(event(
                            DetectorId::D6,
                            Evidence::LaneMissing {
                                sub_index: i,
                                requester_lane: rl,
                                lane_offset,
                                lane_count: ctx.map.lane_count,
                            },
                        ));
                    }
                }
            }
        }
    }

    if on(DetectorId::D7) {
        let frame = RoadFrame {
            lane_width: ctx.map.lane_width,
            base_lane: 0,
        };
        let pairs = check_overlap(maneuver, &frame);
        if !pairs.is_empty() {
            out.push(event(DetectorId::D7, Evidence::Overlap { pairs }));
        }
    }

    if on(DetectorId::D7x) && msg.msg_type == MscmType::Request {
        if let Some(rl) = requester_lane {
            let live: Vec<&RememberedTrr> = ctx
                .remembered
                .iter()
                .filter(|r| {
                    ctx.sessions.get(&r.maneuver_id).is_none_or(|s| {
                        matches!(s.phase, Phase::AwaitingResponses { .. } | Phase::Active)
                    })
                })
                .collect();
            let hits = check_cross_session_overlap(&live, msg, rl, ctx.map.lane_width);
            if !hits.is_empty() {
                out.push(event(DetectorId::D7x, Evidence::CrossSession { hits }));
            }
        }
    }

    if on(DetectorId::D10) {
        for evidence in check_static_consistency(msg, hash, ctx.mscms, now, t.static_window_ms) {
            out.push(event(DetectorId::D10, evidence));
        }
    }

    if on(DetectorId::D16) {
        for evidence in check_dimensions(maneuver, ctx.bsms, now, t) {
            out.push(event(DetectorId::D16, evidence));
        }
    }
}

// ---------------------------------------------------------------------------
// Individual checks

/// Pairs `(i, j)`, `i < j`, of sub-maneuvers whose space-time footprints share
/// a closed time instant and a region of positive area.
pub fn check_overlap(m: &Maneuver, frame: &RoadFrame) -> Vec<(usize, usize)> {
    let fps: Vec<_> = m
        .sub_maneuvers
        .iter()
        .map(|s| footprint(s, frame))
        .collect();
    let mut out = Vec::new();
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            if let (Some(a), Some(b)) = (&fps[i], &fps[j]) {
                if a.overlaps(b) {
                    out.push((i, j));
                }
            }
        }
    }
    out
}

/// Sub-maneuvers of `incoming` that collide with a remembered TRR of another
/// maneuver assigned to another executant. Lanes are placed relative to
/// `requester_lane`.
pub fn check_cross_session_overlap(
    remembered: &[&RememberedTrr],
    incoming: &Mscm,
    requester_lane: i32,
    lane_width: f64,
) -> Vec<CrossSessionHit> {
    let Some(m) = incoming.maneuver.as_ref() else {
        return Vec::new();
    };
    let frame = RoadFrame {
        lane_width,
        base_lane: requester_lane,
    };
    let mut hits = Vec::new();
    for (i, sub) in m.sub_maneuvers.iter().enumerate() {
        let Some(fp) = footprint(sub, &frame) else {
            continue;
        };
        for r in remembered {
            if r.maneuver_id != incoming.maneuver_id
                && r.executant != sub.executant_id
                && r.footprint.overlaps(&fp)
            {
                hits.push(CrossSessionHit {
                    sub_index: i,
                    other_maneuver_id: r.maneuver_id,
                    other_executant: r.executant,
                });
            }
        }
    }
    hits
}

/// Remembered footprints of a request's sub-maneuvers, in absolute lanes.
pub fn remember_request(msg: &Mscm, requester_lane: i32, lane_width: f64) -> Vec<RememberedTrr> {
    let Some(m) = msg.maneuver.as_ref() else {
        return Vec::new();
    };
    let frame = RoadFrame {
        lane_width,
        base_lane: requester_lane,
    };
    m.sub_maneuvers
        .iter()
        .enumerate()
        .filter_map(|(i, sub)| {
            let fp = footprint(sub, &frame)?;
            let (target_lane, s_range) = match &sub.trr.location {
                TrrLocation::LaneSegment {
                    lane_offset,
                    start_s,
                    end_s,
                } => (
                    Some(requester_lane + *lane_offset as i32),
                    (start_s.min(*end_s), start_s.max(*end_s)),
                ),
                TrrLocation::GeoRegion { .. } => {
                    let (s0, s1, _, _) = fp.region.bounds();
                    (None, (s0, s1))
                }
            };
            Some(RememberedTrr {
                maneuver_id: msg.maneuver_id,
                requester: msg.source_id,
                executant: sub.executant_id,
                sub_index: i,
                footprint: fp,
                target_lane,
                s_range,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenialFinding {
    /// Disagrees by the responder inside the window, current one included.
    pub messages: Vec<MessageHash>,
    pub max_to_one_requester: usize,
}

/// Fires when the responder of `current` issued at least `threshold` Disagrees
/// within `window` ms up to `now`, counting `current`.
pub fn check_denial_rate(
    history: &ResponseHistory,
    current: &ResponseRecord,
    now: u64,
    window: u64,
    threshold: usize,
) -> Option<DenialFinding> {
    if current.reason.is_agree() {
        return None;
    }
    let cutoff = now.saturating_sub(window);
    let mut seen = BTreeSet::new();
    let mut records: Vec<&ResponseRecord> = Vec::new();
    for r in history.iter().chain(std::iter::once(current)) {
        if r.responder == current.responder
            && !r.reason.is_agree()
            && r.timestamp >= cutoff
            && r.timestamp <= now
            && seen.insert(r.hash)
        {
            records.push(r);
        }
    }
    if records.len() < threshold.max(1) {
        return None;
    }
    let mut per_requester: BTreeMap<StationId, usize> = BTreeMap::new();
    for r in &records {
        *per_requester.entry(r.requester).or_default() += 1;
    }
    Some(DenialFinding {
        messages: records.iter().map(|r| r.hash).collect(),
        max_to_one_requester: per_requester.values().copied().max().unwrap_or(0),
    })
}

/// A position some station is claimed to occupy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub station: StationId,
    pub lane: i32,
    pub s_min: f64,
    pub s_max: f64,
    pub basis: ClaimBasis,
}

/// Positions `msg` implies for its sender and executants, as of the
/// perception time. Beacons are preferred; a TRR only counts as a position
/// claim once the sub-maneuver is under way.
pub fn claimed_positions(msg: &Mscm, ctx: &DetectionContext<'_>, now: u64) -> Vec<Claim> {
    let t = ctx.thresholds;
    let at = ctx.perception.map_or(now, |p| p.timestamp);
    let mut out: Vec<Claim> = Vec::new();
    let from_beacon = |id: StationId| {
        ctx.bsms.latest_within(id, now, t.bsm_window_ms).map(|b| {
            let s = b.s_at(at);
            Claim {
                station: id,
                lane: b.lane,
                s_min: s,
                s_max: s,
                basis: ClaimBasis::Beacon,
            }
        })
    };
    if msg.source_id != ctx.observer {
        out.extend(from_beacon(msg.source_id));
    }
    let requester_lane = ctx
        .bsms
        .latest_within(msg.source_id, now, t.bsm_window_ms)
        .map(|b| b.lane);
    if let Some(m) = &msg.maneuver {
        for sub in &m.sub_maneuvers {
            let x = sub.executant_id;
            if x == ctx.observer || x == msg.source_id || out.iter().any(|c| c.station == x) {
                continue;
            }
            if let Some(c) = from_beacon(x) {
                out.push(c);
                continue;
            }
            let under_way = sub.current_status == SubManeuverStatus::Executing
                || sub.start_time <= msg.msg_timestamp;
            if let (
                true,
                Some(rl),
                TrrLocation::LaneSegment {
                    lane_offset,
                    start_s,
                    end_s,
                },
            ) = (under_way, requester_lane, &sub.trr.location)
            {
                out.push(Claim {
                    station: x,
                    lane: rl + *lane_offset as i32,
                    s_min: start_s.min(*end_s),
                    s_max: start_s.max(*end_s),
                    basis: ClaimBasis::Trr,
                });
            }
        }
    }
    out
}

/// Claims inside perception range that no observed vehicle supports.
pub fn check_ghost(
    claims: &[Claim],
    perception: &PerceptionSnapshot,
    tolerance: f64,
) -> Vec<Claim> {
    let reach = perception.range - tolerance;
    claims
        .iter()
        .filter(|c| {
            let in_range = (c.s_min - perception.observer_s).abs() <= reach
                && (c.s_max - perception.observer_s).abs() <= reach;
            let seen = perception.observed.iter().any(|o| {
                o.lane == c.lane && o.s >= c.s_min - tolerance && o.s <= c.s_max + tolerance
            });
            in_range && !seen
        })
        .copied()
        .collect()
}

/// What the plausibility bounds are measured against.
#[derive(Clone, Copy, Debug)]
pub struct PlausibilityInputs<'a> {
    pub speed_limit: f64,
    pub lane_width: f64,
    pub highway: bool,
    pub avg_neighbor_speed: Option<f64>,
    pub signer_special: bool,
    pub thresholds: &'a Thresholds,
}

/// One finding per violated bound of a single sub-maneuver.
pub fn check_value_plausibility(
    sub: &SubManeuver,
    sub_index: usize,
    msg_timestamp: u64,
    ctx: &PlausibilityInputs<'_>,
) -> Vec<(DetectorId, Evidence)> {
    let t = ctx.thresholds;
    let bound = |field, value: f64, bound: f64| Evidence::Bound {
        sub_index: Some(sub_index),
        field,
        value,
        bound,
    };
    let temporal = Evidence::Temporal {
        sub_index,
        start_time: sub.start_time,
        end_time: sub.end_time,
        msg_timestamp,
    };
    let mut out = Vec::new();
    let max_allowed = ctx.speed_limit * t.speed_factor;
    if !ctx.signer_special && !(sub.max_speed <= max_allowed) {
        out.push((
            DetectorId::D5,
            bound(BoundField::MaxSpeed, sub.max_speed, max_allowed),
        ));
    }
    if ctx.highway {
        let floor = t
            .min_speed_floor_kmh
            .max(ctx.avg_neighbor_speed.unwrap_or(0.0) * t.min_speed_factor);
        if !(sub.min_speed >= floor) {
            out.push((
                DetectorId::D9,
                bound(BoundField::MinSpeed, sub.min_speed, floor),
            ));
        }
    }
    if !(sub.executant_width <= ctx.lane_width) {
        out.push((
            DetectorId::D11,
            bound(BoundField::Width, sub.executant_width, ctx.lane_width),
        ));
    }
    if !(sub.executant_length <= t.max_length_m) {
        out.push((
            DetectorId::D12,
            bound(BoundField::Length, sub.executant_length, t.max_length_m),
        ));
    }
    if sub.start_time >= sub.end_time {
        out.push((DetectorId::D13, temporal.clone()));
    }
    if sub.start_time < msg_timestamp {
        out.push((DetectorId::D14, temporal));
    }
    let duration = sub.end_time.saturating_sub(sub.start_time);
    if duration > t.max_duration_ms {
        out.push((
            DetectorId::D15,
            bound(
                BoundField::Duration,
                duration as f64,
                t.max_duration_ms as f64,
            ),
        ));
    }
    out
}

/// Mean of the latest speed of every other station beaconing within `window`.
pub fn average_neighbor_speed(
    bsms: &BsmHistory,
    observer: StationId,
    now: u64,
    window: u64,
) -> Option<f64> {
    let speeds: Vec<f64> = bsms
        .recent(now, window)
        .filter(|b| b.source_id != observer)
        .map(|b| b.speed)
        .collect();
    if speeds.is_empty() {
        None
    } else {
        Some(speeds.iter().sum::<f64>() / speeds.len() as f64)
    }
}

fn trr_problem(sub: &SubManeuver) -> Option<TrrProblem> {
    match &sub.trr.location {
        TrrLocation::LaneSegment { start_s, end_s, .. } => {
            (!(start_s < end_s)).then_some(TrrProblem::EmptyLaneSegment)
        }
        TrrLocation::GeoRegion { polygon } => {
            (!is_simple(polygon)).then_some(TrrProblem::NonSimplePolygon)
        }
    }
}

/// Executant widths in `msg` that differ from what the same sender claimed
/// for the same executant within `window`.
pub fn check_static_consistency(
    msg: &Mscm,
    hash: MessageHash,
    history: &MscmHistory,
    now: u64,
    window: u64,
) -> Vec<Evidence> {
    let Some(m) = &msg.maneuver else {
        return Vec::new();
    };
    let cutoff = now.saturating_sub(window);
    let mut out = Vec::new();
    let mut flagged = BTreeSet::new();
    for sub in &m.sub_maneuvers {
        if flagged.contains(&sub.executant_id) {
            continue;
        }
        let previous = history
            .from_source(msg.source_id)
            .filter(|r| r.hash != hash && r.received_at >= cutoff)
            .find_map(|r| {
                r.msg.maneuver.as_ref()?.sub_maneuvers.iter().find_map(|p| {
                    (p.executant_id == sub.executant_id
                        && (p.executant_width - sub.executant_width).abs() > 1e-9)
                        .then_some((p.executant_width, r.hash))
                })
            });
        if let Some((prev, prev_hash)) = previous {
            flagged.insert(sub.executant_id);
            out.push(Evidence::StaticMismatch {
                executant: sub.executant_id,
                previous: prev,
                current: sub.executant_width,
                previous_message: prev_hash,
            });
        }
    }
    out
}

/// Sub-maneuvers whose executant dimensions disagree with that executant's
/// latest beacon.
pub fn check_dimensions(
    m: &Maneuver,
    bsms: &BsmHistory,
    now: u64,
    t: &Thresholds,
) -> Vec<Evidence> {
    let mut out = Vec::new();
    for (i, sub) in m.sub_maneuvers.iter().enumerate() {
        let Some((b, h)) = bsms.latest_entry_within(sub.executant_id, now, t.bsm_window_ms) else {
            continue;
        };
        if (sub.executant_width - b.width).abs() > t.width_tolerance_m
            || (sub.executant_length - b.length).abs() > t.length_tolerance_m
        {
            out.push(Evidence::Dimension {
                executant: sub.executant_id,
                sub_index: i,
                mscm_width: sub.executant_width,
                bsm_width: b.width,
                mscm_length: sub.executant_length,
                bsm_length: b.length,
                beacon: *h,
            });
        }
    }
    out
}

/// Deviations of one beacon from the corridors of agreed maneuvers its sender
/// executes.
pub fn check_trajectory(
    bsm: &Bsm,
    remembered: &[RememberedTrr],
    sessions: &BTreeMap<u64, SessionState>,
    t: &Thresholds,
) -> Vec<Evidence> {
    let mut out = Vec::new();
    let at = bsm.timestamp;
    for r in remembered.iter().filter(|r| r.executant == bsm.source_id) {
        let agreed = sessions
            .get(&r.maneuver_id)
            .is_some_and(|s| matches!(s.phase, Phase::Active | Phase::Completed { .. }));
        if !agreed {
            continue;
        }
        let (t0, t1) = (r.footprint.t0, r.footprint.t1);
        let lane_due = (t0 + t.lane_change_allowance_ms).min(t1);
        let lane_off = r.target_lane.is_some_and(|tl| {
            at >= lane_due
                && at <= t1 + t.trajectory_grace_ms
                && (bsm.lane - tl).abs() > t.trajectory_lane_tolerance
        });
        let (s0, s1) = r.s_range;
        let long_off = at >= t0
            && at <= t1
            && (bsm.s < s0 - t.trajectory_longitudinal_m
                || bsm.s > s1 + t.trajectory_longitudinal_m);
        if lane_off || long_off {
            out.push(Evidence::Trajectory {
                maneuver_id: r.maneuver_id,
                beacon_time: at,
                lane: bsm.lane,
                s: bsm.s,
                target_lane: r.target_lane,
                s_range: r.s_range,
            });
        }
    }
    out
}

/// Pending stations of an expired session that demonstrably transmitted a
/// signed message inside the response window, with that message. Stations
/// with no transmission in the window are not judged.
pub fn check_nonresponse(
    session: &SessionState,
    bsms: &BsmHistory,
    mscms: &MscmHistory,
    timeout: u64,
) -> Vec<(StationId, MessageHash)> {
    let Some(pending) = session.pending() else {
        return Vec::new();
    };
    let (w0, w1) = (session.created_at, session.created_at + timeout);
    pending
        .iter()
        .filter_map(|&id| {
            let beacon = bsms
                .of(id)
                .find(|(b, _)| b.timestamp >= w0 && b.timestamp <= w1)
                .map(|(_, h)| *h);
            let message = || {
                mscms
                    .from_source(id)
                    .find(|r| r.msg.msg_timestamp >= w0 && r.msg.msg_timestamp <= w1)
                    .map(|r| r.hash)
            };
            beacon.or_else(message).map(|h| (id, h))
        })
        .collect()
}
