#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

use mscs_core::codec::{
    ExecutionStatus, ReasonCode, SubManeuverStatus, TargetRoadResource, TrrLocation,
};
use mscs_core::identity::SignatureEnvelope;
use mscs_core::protocol::{
    cancel_overdue, expire_sessions, handle_execution_msg, handle_response, Phase, PhaseKind,
    SessionState,
};
use mscs_core::{Maneuver, Mscm, MscmType, StationId, SubManeuver};

pub const LANE_WIDTH: f64 = 3.5;

fn station(rng: &mut impl Rng) -> StationId {
    StationId(rng.random_range(1..=u32::MAX))
}

fn real(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1e6..1e6),
        1 => f64::from_bits(
            rng.random::<u64>() & !(0x7ff << 52) | (rng.random_range(1..0x7fe_u64) << 52),
        ),
        2 => 0.0,
        _ => -0.0,
    }
}

fn sub_maneuver(rng: &mut impl Rng, executant: StationId) -> SubManeuver {
    let location = if rng.random_bool(0.7) {
        TrrLocation::LaneSegment {
            lane_offset: rng.random(),
            start_s: real(rng),
            end_s: real(rng),
        }
    } else {
        let n = rng.random_range(3..=16);
        TrrLocation::GeoRegion {
            polygon: (0..n).map(|_| (real(rng), real(rng))).collect(),
        }
    };
    SubManeuver {
        executant_id: executant,
        current_status: [
            SubManeuverStatus::Proposed,
            SubManeuverStatus::Accepted,
            SubManeuverStatus::Executing,
        ][rng.random_range(0..3)],
        trr: TargetRoadResource { location },
        start_time: rng.random_range(0..1 << 48),
        end_time: rng.random_range(0..1 << 48),
        min_speed: real(rng),
        max_speed: real(rng),
        executant_width: real(rng),
        executant_length: real(rng),
    }
}

/// A structurally valid message of any type with an arbitrary signature tag.
pub fn random_mscm(rng: &mut impl Rng) -> Mscm {
    let ty = MscmType::ALL[rng.random_range(0..MscmType::ALL.len())];
    let source = station(rng);
    let mut m = Mscm::bare(ty, source, rng.random_range(0..1 << 48), rng.random());
    m.destination_ids = (0..rng.random_range(0..8)).map(|_| station(rng)).collect();
    match ty {
        MscmType::Request | MscmType::SpecialAnnounce => {
            let executants: Vec<StationId> =
                (0..rng.random_range(1..6)).map(|_| station(rng)).collect();
            if ty == MscmType::Request {
                m.destination_ids.extend(&executants);
            }
            let subs = (0..rng.random_range(1..=8))
                .map(|_| {
                    let executant = executants[rng.random_range(0..executants.len())];
                    sub_maneuver(rng, executant)
                })
                .collect();
            m.executant_ids = Some(executants);
            m.maneuver = Some(Maneuver::new(subs));
        }
        MscmType::Response => {
            m.reason_code = Some(if rng.random_bool(0.5) {
                ReasonCode::Agree
            } else {
                ReasonCode::Disagree(rng.random())
            })
        }
        MscmType::Cancel | MscmType::Complete => {
            m.execution_status = Some(if rng.random_bool(0.5) {
                ExecutionStatus::Completed
            } else {
                ExecutionStatus::Cancelled
            })
        }
    }
    let mut signature = SignatureEnvelope::unsigned(source);
    rng.fill(&mut signature.tag[..]);
    m.signature = signature;
    m
}

// ---------------------------------------------------------------------------
// Overlap oracle

/// Sub-maneuvers on a 1 m / 1 s lattice, so every gap or shared extent is at
/// least ten grid cells wide.
pub fn lattice_maneuver(rng: &mut impl Rng) -> Maneuver {
    let n = rng.random_range(2..=6);
    let subs = (0..n)
        .map(|i| {
            let s0 = rng.random_range(0..80) as f64;
            let len = rng.random_range(1..40) as f64;
            let t0 = rng.random_range(0..20) * 1_000;
            let dt = rng.random_range(0..8) * 1_000;
            let location = if rng.random_bool(0.75) {
                TrrLocation::LaneSegment {
                    lane_offset: rng.random_range(-1..=2),
                    start_s: s0,
                    end_s: s0 + len,
                }
            } else {
                let y0 = rng.random_range(-4..8) as f64;
                let y1 = y0 + rng.random_range(1..6) as f64;
                TrrLocation::GeoRegion {
                    polygon: vec![(s0, y0), (s0 + len, y0), (s0 + len, y1), (s0, y1)],
                }
            };
            SubManeuver {
                executant_id: StationId(i + 1),
                current_status: SubManeuverStatus::Proposed,
                trr: TargetRoadResource { location },
                start_time: t0,
                end_time: t0 + dt,
                min_speed: 50.0,
                max_speed: 100.0,
                executant_width: 1.8,
                executant_length: rng.random_range(2..=6) as f64,
            }
        })
        .collect();
    Maneuver::new(subs)
}

/// (s0, s1, y0, y1) of a sub-maneuver's region with the base lane at zero.
fn oracle_rect(sub: &SubManeuver) -> (f64, f64, f64, f64) {
    match &sub.trr.location {
        TrrLocation::LaneSegment {
            lane_offset,
            start_s,
            end_s,
        } => {
            let half = sub.executant_length / 2.0;
            let y0 = *lane_offset as f64 * LANE_WIDTH;
            (start_s - half, end_s + half, y0, y0 + LANE_WIDTH)
        }
        TrrLocation::GeoRegion { polygon } => {
            let xs = polygon.iter().map(|p| p.0);
            let ys = polygon.iter().map(|p| p.1);
            (
                xs.clone().fold(f64::INFINITY, f64::min),
                xs.fold(f64::NEG_INFINITY, f64::max),
                ys.clone().fold(f64::INFINITY, f64::min),
                ys.fold(f64::NEG_INFINITY, f64::max),
            )
        }
    }
}

/// Brute force over 0.1 s instants and 0.1 m cells: some instant inside both
/// closed time intervals and some cell center inside both regions.
pub fn grid_pairs(m: &Maneuver) -> Vec<(usize, usize)> {
    let subs = &m.sub_maneuvers;
    let mut out = Vec::new();
    for i in 0..subs.len() {
        for j in i + 1..subs.len() {
            if shares_instant(&subs[i], &subs[j])
                && shares_cell(oracle_rect(&subs[i]), oracle_rect(&subs[j]))
            {
                out.push((i, j));
            }
        }
    }
    out
}

fn shares_instant(a: &SubManeuver, b: &SubManeuver) -> bool {
    let last = a.end_time.max(b.end_time) / 100;
    (0..=last)
        .map(|k| k * 100)
        .any(|t| t >= a.start_time && t <= a.end_time && t >= b.start_time && t <= b.end_time)
}

fn shares_cell(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    let inside = |r: (f64, f64, f64, f64), s: f64, y: f64| s > r.0 && s < r.1 && y > r.2 && y < r.3;
    let (s_lo, s_hi) = (
        (a.0.max(b.0) * 10.0).floor() as i64,
        (a.1.min(b.1) * 10.0).ceil() as i64,
    );
    let (y_lo, y_hi) = (
        (a.2.max(b.2) * 10.0).floor() as i64,
        (a.3.min(b.3) * 10.0).ceil() as i64,
    );
    (s_lo..s_hi).any(|ks| {
        let s = (ks as f64 + 0.5) / 10.0;
        (y_lo..y_hi).any(|ky| {
            let y = (ky as f64 + 0.5) / 10.0;
            inside(a, s, y) && inside(b, s, y)
        })
    })
}

// ---------------------------------------------------------------------------
// Protocol traces

pub struct Trace {
    pub steps: Vec<(PhaseKind, PhaseKind)>,
    pub final_state: SessionState,
    /// Every phase reached, in order.
    pub phases: Vec<PhaseKind>,
    pub disagreed_while_awaiting: bool,
    pub states: Vec<SessionState>,
}

/// Applies a random sequence of responses, execution messages and timers to a
/// fresh session.
pub fn random_trace(rng: &mut impl Rng, len: usize) -> Trace {
    let participants: Vec<StationId> = (1..=rng.random_range(1..5u32))
        .map(|i| StationId(100 + i))
        .collect();
    let outsider = StationId(999);
    let requester = StationId(1);
    let subs = participants
        .iter()
        .filter(|_| rng.random_bool(0.7))
        .chain(std::iter::once(&participants[0]))
        .map(|&x| SubManeuver {
            executant_id: x,
            current_status: SubManeuverStatus::Proposed,
            trr: TargetRoadResource::lane_segment(0, 0.0, 10.0),
            start_time: 1_000,
            end_time: 3_000,
            min_speed: 10.0,
            max_speed: 20.0,
            executant_width: 1.8,
            executant_length: 4.5,
        })
        .collect();
    let mut req = Mscm::bare(MscmType::Request, requester, 0, 7);
    req.destination_ids = participants.clone();
    req.maneuver = Some(Maneuver::new(subs));
    let mut session = SessionState::from_request(&req, 0).expect("valid request");
    let mut trace = Trace {
        steps: Vec::new(),
        final_state: session.clone(),
        phases: vec![session.phase.kind()],
        disagreed_while_awaiting: false,
        states: vec![session.clone()],
    };
    let mut now = 0;
    for _ in 0..len {
        now += rng.random_range(0..800);
        let from = session.phase.kind();
        let sender = match rng.random_range(0..6) {
            0 => outsider,
            1 => requester,
            _ => participants[rng.random_range(0..participants.len())],
        };
        let maneuver_id = if rng.random_bool(0.9) { 7 } else { 8 };
        let next = match rng.random_range(0..5) {
            0 | 1 => {
                let mut r = Mscm::bare(MscmType::Response, sender, now, maneuver_id);
                let disagree = rng.random_bool(0.2);
                r.reason_code = Some(if disagree {
                    ReasonCode::Disagree(rng.random())
                } else {
                    ReasonCode::Agree
                });
                let out = handle_response(&session, &r).ok();
                if disagree && out.is_some() {
                    trace.disagreed_while_awaiting = true;
                }
                out
            }
            2 | 3 => {
                let ty = if rng.random_bool(0.5) {
                    MscmType::Cancel
                } else {
                    MscmType::Complete
                };
                let mut m = Mscm::bare(ty, sender, now, maneuver_id);
                m.execution_status = Some(if rng.random_bool(0.8) {
                    ExecutionStatus::Completed
                } else {
                    ExecutionStatus::Cancelled
                });
                handle_execution_msg(&session, &m).ok()
            }
            _ => {
                let mut map = BTreeMap::from([(7, session.clone())]);
                expire_sessions(&mut map, now, 2_000);
                cancel_overdue(&mut map, now, 5_000);
                map.remove(&7)
            }
        };
        if let Some(next) = next {
            let to = next.phase.kind();
            if to != from {
                trace.steps.push((from, to));
                trace.phases.push(to);
            }
            session = next;
            trace.states.push(session.clone());
        }
    }
    trace.final_state = session;
    trace
}

/// Unanimity: an active session has an Agree from every participant.
pub fn unanimous(s: &SessionState) -> bool {
    s.participants
        .iter()
        .all(|p| s.responses.get(p) == Some(&ReasonCode::Agree))
}

pub fn is_active(s: &SessionState) -> bool {
    s.phase == Phase::Active
}
