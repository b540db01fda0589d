//! Maneuver negotiation state machine.
//!
//! Each station keeps one [`SessionState`] per maneuver id it takes part in or
//! overhears. Every handler is a pure transition: it returns the next state or
//! an error, and never mutates the input. Terminal phases absorb every message.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    disagree, encode_body, frame, ExecutionStatus, Maneuver, Mscm, MscmType, ReasonCode, StationId,
    StructuralError, SubManeuver, TargetRoadResource,
};
use crate::geometry::{footprint, Footprint, RoadFrame};
use crate::identity::{
    sign, CredentialDirectory, PseudonymCredential, SignError, SignatureEnvelope,
};

pub const DEFAULT_RESPONSE_TIMEOUT_MS: u64 = 2_000;
pub const DEFAULT_START_GRACE_MS: u64 = 5_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    AwaitingResponses { pending: BTreeSet<StationId> },
    Active,
    Rejected,
    Cancelled,
    Completed { acked: BTreeSet<StationId> },
    Expired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseKind {
    AwaitingResponses,
    Active,
    Rejected,
    Cancelled,
    Completed,
    Expired,
}

impl PhaseKind {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            PhaseKind::Rejected | PhaseKind::Cancelled | PhaseKind::Completed | PhaseKind::Expired
        )
    }

    /// Edges of the phase DAG.
    pub fn can_transition(self, to: PhaseKind) -> bool {
        use PhaseKind::*;
        matches!(
            (self, to),
            (AwaitingResponses, Active | Rejected | Expired) | (Active, Cancelled | Completed)
        )
    }
}

impl Phase {
    pub fn kind(&self) -> PhaseKind {
        match self {
            Phase::AwaitingResponses { .. } => PhaseKind::AwaitingResponses,
            Phase::Active => PhaseKind::Active,
            Phase::Rejected => PhaseKind::Rejected,
            Phase::Cancelled => PhaseKind::Cancelled,
            Phase::Completed { .. } => PhaseKind::Completed,
            Phase::Expired => PhaseKind::Expired,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.kind().is_terminal()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CastMode {
    Unicast {
        target: StationId,
    },
    /// Sector of `beam_width` radians centred on `beam_center` (bearing from
    /// the sender, 0 = driving direction, positive toward higher lanes), at
    /// `power` ∈ [0, 1] of the nominal range.
    Groupcast {
        beam_center: f64,
        beam_width: f64,
        power: f64,
    },
    Broadcast,
}

impl CastMode {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self, destinations: &[StationId]) -> Result<(), ProtocolError> {
        match *self {
            CastMode::Unicast { target } if destinations != [target] => {
                Err(ProtocolError::InvalidCastMode)
            }
            CastMode::Groupcast {
                power, beam_width, ..
            } if !(0.0..=1.0).contains(&power) || !(beam_width >= 0.0) => {
                Err(ProtocolError::InvalidCastMode)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub maneuver_id: u64,
    pub requester: StationId,
    pub participants: BTreeSet<StationId>,
    pub executants: BTreeSet<StationId>,
    pub maneuver: Maneuver,
    pub phase: Phase,
    pub created_at: u64,
    /// Every response applied to this session, by responder.
    pub responses: BTreeMap<StationId, ReasonCode>,
    /// Executants that acknowledged completion while Active.
    pub acked: BTreeSet<StationId>,
}

impl SessionState {
    /// Session as seen by any station that receives (or sends) the request.
    pub fn from_request(req: &Mscm, now: u64) -> Result<Self, ProtocolError> {
        if req.msg_type != MscmType::Request {
            return Err(ProtocolError::WrongMessageType(req.msg_type));
        }
        let maneuver = req.maneuver.clone().ok_or(ProtocolError::EmptyManeuver)?;
        if maneuver.sub_maneuvers.is_empty() {
            return Err(ProtocolError::EmptyManeuver);
        }
        let participants: BTreeSet<_> = req.destination_ids.iter().copied().collect();
        Ok(SessionState {
            maneuver_id: req.maneuver_id,
            requester: req.source_id,
            executants: maneuver.executants().collect(),
            phase: Phase::AwaitingResponses {
                pending: participants.clone(),
            },
            participants,
            maneuver,
            created_at: now,
            responses: BTreeMap::new(),
            acked: BTreeSet::new(),
        })
    }

    pub fn pending(&self) -> Option<&BTreeSet<StationId>> {
        match &self.phase {
            Phase::AwaitingResponses { pending } => Some(pending),
            _ => None,
        }
    }

    pub fn earliest_start(&self) -> Option<u64> {
        self.maneuver.time_span().map(|(s, _)| s)
    }

    fn with_phase(&self, phase: Phase) -> Self {
        SessionState {
            phase,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ProtocolError {
    #[error("maneuver has no sub-maneuvers")]
    EmptyManeuver,
    #[error("executant {0} is not among the destinations")]
    ExecutantNotAddressed(StationId),
    #[error("cast mode is inconsistent with the destinations")]
    InvalidCastMode,
    #[error("receiver {0} is not addressed by the request")]
    NotAddressed(StationId),
    #[error("unexpected message type {0:?}")]
    WrongMessageType(MscmType),
    #[error("message belongs to maneuver {got}, session is {expected}")]
    SessionMismatch { expected: u64, got: u64 },
    #[error("stale message: {0}")]
    StaleResponse(StaleReason),
    #[error("signer {0} is not a special vehicle")]
    NotSpecialVehicle(StationId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StaleReason {
    TerminalSession,
    UnknownResponder,
    WrongPhase,
}

impl std::fmt::Display for StaleReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StaleReason::TerminalSession => "session is terminal",
            StaleReason::UnknownResponder => "sender is not expected to answer",
            StaleReason::WrongPhase => "session is not in the phase this message applies to",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SealError {
    #[error(transparent)]
    Structural(#[from] StructuralError),
    #[error(transparent)]
    Sign(#[from] SignError),
}

/// Signs `msg` with `cred` and returns the signed message and its wire bytes.
/// The message's source id is set to the credential's station id.
pub fn seal(
    msg: &Mscm,
    cred: &PseudonymCredential,
    now: u64,
) -> Result<(Mscm, Vec<u8>), SealError> {
    let mut signed = msg.clone();
    signed.source_id = cred.station_id;
    signed.signature = SignatureEnvelope::unsigned(cred.station_id);
    let body = encode_body(&signed)?;
    signed.signature = sign(&body, cred, now)?;
    let bytes = frame(&body, &signed.signature);
    Ok((signed, bytes))
}

/// Per-requester maneuver id counter: requester id in the high 32 bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManeuverIdAllocator {
    next: u32,
}

impl ManeuverIdAllocator {
    pub fn allocate(&mut self, requester: StationId) -> u64 {
        self.next = self.next.wrapping_add(1);
        ((requester.0 as u64) << 32) | self.next as u64
    }
}

/// Starts a negotiation. The returned request is unsigned.
pub fn create_request(
    requester: StationId,
    maneuver: Maneuver,
    destinations: &[StationId],
    mode: CastMode,
    now: u64,
    ids: &mut ManeuverIdAllocator,
) -> Result<(SessionState, Mscm), ProtocolError> {
    if maneuver.sub_maneuvers.is_empty() {
        return Err(ProtocolError::EmptyManeuver);
    }
    if let Some(missing) = maneuver.executants().find(|e| !destinations.contains(e)) {
        return Err(ProtocolError::ExecutantNotAddressed(missing));
    }
    mode.validate(destinations)?;
    let mut executants: Vec<StationId> = Vec::new();
    for e in maneuver.executants() {
        if !executants.contains(&e) {
            executants.push(e);
        }
    }
    let mut msg = Mscm::bare(MscmType::Request, requester, now, ids.allocate(requester));
    msg.destination_ids = destinations.to_vec();
    msg.executant_ids = Some(executants);
    msg.maneuver = Some(maneuver);
    let session = SessionState::from_request(&msg, now)?;
    Ok((session, msg))
}

/// A road resource a station has committed to, in absolute lanes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub maneuver_id: u64,
    pub executant: StationId,
    pub footprint: Footprint,
}

/// How an honest participant decides between Agree and Disagree.
pub struct AgreementPolicy<'a> {
    /// Disagree when the request collides with the receiver's own plan.
    pub check_conflicts: bool,
    /// Lane frame of the requester, used to place lane-relative TRRs.
    pub frame: RoadFrame,
    /// Plausibility screen; returning false yields Disagree(implausible).
    pub prefilter: Option<&'a dyn Fn(&Mscm) -> bool>,
}

impl Default for AgreementPolicy<'_> {
    fn default() -> Self {
        AgreementPolicy {
            check_conflicts: true,
            frame: RoadFrame::default(),
            prefilter: None,
        }
    }
}

/// First sub-maneuver of `maneuver` that collides with a reservation held by a
/// different executant under a different maneuver id.
pub fn plan_conflict<'r>(
    own_plan: &'r [Reservation],
    maneuver_id: u64,
    maneuver: &Maneuver,
    frame: &RoadFrame,
) -> Option<(&'r Reservation, usize)> {
    for (i, sub) in maneuver.sub_maneuvers.iter().enumerate() {
        let Some(fp) = footprint(sub, frame) else {
            continue;
        };
        if let Some(r) = own_plan.iter().find(|r| {
            r.maneuver_id != maneuver_id
                && r.executant != sub.executant_id
                && r.footprint.overlaps(&fp)
        }) {
            return Some((r, i));
        }
    }
    None
}

fn temporally_sane(sub: &SubManeuver) -> bool {
    sub.start_time < sub.end_time
}

/// The receiver's answer to a request addressed to it. The response is unsigned.
pub fn handle_request(
    receiver: StationId,
    own_plan: &[Reservation],
    req: &Mscm,
    policy: &AgreementPolicy<'_>,
    now: u64,
) -> Result<Mscm, ProtocolError> {
    if req.msg_type != MscmType::Request {
        return Err(ProtocolError::WrongMessageType(req.msg_type));
    }
    if !req.destination_ids.contains(&receiver) {
        return Err(ProtocolError::NotAddressed(receiver));
    }
    let maneuver = req.maneuver.as_ref().ok_or(ProtocolError::EmptyManeuver)?;
    let sane = maneuver.sub_maneuvers.iter().all(temporally_sane);
    let plausible = sane && policy.prefilter.is_none_or(|f| f(req));
    let reason = if !plausible {
        ReasonCode::Disagree(disagree::IMPLAUSIBLE_REQUEST)
    } else if policy.check_conflicts
        && plan_conflict(own_plan, req.maneuver_id, maneuver, &policy.frame).is_some()
    {
        ReasonCode::Disagree(disagree::CONFLICT_WITH_OWN_PLAN)
    } else {
        ReasonCode::Agree
    };
    let mut resp = Mscm::bare(MscmType::Response, receiver, now, req.maneuver_id);
    resp.destination_ids = vec![req.source_id];
    resp.reason_code = Some(reason);
    Ok(resp)
}

fn check_session(session: &SessionState, msg: &Mscm) -> Result<(), ProtocolError> {
    if msg.maneuver_id != session.maneuver_id {
        return Err(ProtocolError::SessionMismatch {
            expected: session.maneuver_id,
            got: msg.maneuver_id,
        });
    }
    if session.phase.is_terminal() {
        return Err(ProtocolError::StaleResponse(StaleReason::TerminalSession));
    }
    Ok(())
}

/// Applies one participant's answer. A single Disagree rejects; the last
/// outstanding Agree activates.
pub fn handle_response(session: &SessionState, resp: &Mscm) -> Result<SessionState, ProtocolError> {
    if resp.msg_type != MscmType::Response {
        return Err(ProtocolError::WrongMessageType(resp.msg_type));
    }
    check_session(session, resp)?;
    let Phase::AwaitingResponses { pending } = &session.phase else {
        return Err(ProtocolError::StaleResponse(StaleReason::WrongPhase));
    };
    if !pending.contains(&resp.source_id) {
        return Err(ProtocolError::StaleResponse(StaleReason::UnknownResponder));
    }
    let reason = resp
        .reason_code
        .ok_or(ProtocolError::WrongMessageType(resp.msg_type))?;
    let mut next = session.clone();
    next.responses.insert(resp.source_id, reason);
    next.phase = match reason {
        ReasonCode::Disagree(_) => Phase::Rejected,
        ReasonCode::Agree => {
            let mut pending = pending.clone();
            pending.remove(&resp.source_id);
            if pending.is_empty() {
                Phase::Active
            } else {
                Phase::AwaitingResponses { pending }
            }
        }
    };
    Ok(next)
}

/// Applies a Cancel or Complete from a participant of an active session.
pub fn handle_execution_msg(
    session: &SessionState,
    msg: &Mscm,
) -> Result<SessionState, ProtocolError> {
    if !matches!(msg.msg_type, MscmType::Cancel | MscmType::Complete) {
        return Err(ProtocolError::WrongMessageType(msg.msg_type));
    }
    check_session(session, msg)?;
    if session.phase != Phase::Active {
        return Err(ProtocolError::StaleResponse(StaleReason::WrongPhase));
    }
    if !session.participants.contains(&msg.source_id) && msg.source_id != session.requester {
        return Err(ProtocolError::StaleResponse(StaleReason::UnknownResponder));
    }
    let cancel = msg.msg_type == MscmType::Cancel
        || msg.execution_status == Some(ExecutionStatus::Cancelled);
    if cancel {
        return Ok(session.with_phase(Phase::Cancelled));
    }
    let mut next = session.clone();
    next.acked.insert(msg.source_id);
    if next.executants.is_subset(&next.acked) {
        next.phase = Phase::Completed {
            acked: next.acked.clone(),
        };
    }
    Ok(next)
}

/// Applies all execution messages delivered in one tick. Cancels are applied
/// before completions, so a simultaneous Cancel and Complete cancels.
pub fn handle_execution_batch(session: &SessionState, msgs: &[&Mscm]) -> SessionState {
    let mut ordered: Vec<&Mscm> = msgs.to_vec();
    ordered.sort_by_key(|m| (m.msg_type != MscmType::Cancel, m.source_id));
    ordered.into_iter().fold(session.clone(), |s, m| {
        handle_execution_msg(&s, m).unwrap_or(s)
    })
}

/// What a receiver of a special-vehicle announcement must do.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldDirective {
    pub announcer: StationId,
    pub maneuver_id: u64,
    pub corridors: Vec<YieldCorridor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldCorridor {
    pub trr: TargetRoadResource,
    pub start_time: u64,
    pub end_time: u64,
}

/// Special vehicles announce instead of negotiating: no response, no session.
pub fn handle_special_announce(
    msg: &Mscm,
    directory: &CredentialDirectory,
) -> Result<YieldDirective, ProtocolError> {
    if msg.msg_type != MscmType::SpecialAnnounce {
        return Err(ProtocolError::WrongMessageType(msg.msg_type));
    }
    if !directory.is_special(msg.signature.signer_id) {
        return Err(ProtocolError::NotSpecialVehicle(msg.signature.signer_id));
    }
    let maneuver = msg.maneuver.as_ref().ok_or(ProtocolError::EmptyManeuver)?;
    Ok(YieldDirective {
        announcer: msg.source_id,
        maneuver_id: msg.maneuver_id,
        corridors: maneuver
            .sub_maneuvers
            .iter()
            .map(|s| YieldCorridor {
                trr: s.trr.clone(),
                start_time: s.start_time,
                end_time: s.end_time,
            })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub maneuver_id: u64,
    pub from: PhaseKind,
    pub to: PhaseKind,
}

/// Expires every session still awaiting responses more than `timeout` ms after
/// creation.
pub fn expire_sessions(
    sessions: &mut BTreeMap<u64, SessionState>,
    now: u64,
    timeout: u64,
) -> Vec<Transition> {
    let mut out = Vec::new();
    for s in sessions.values_mut() {
        if matches!(s.phase, Phase::AwaitingResponses { .. })
            && now.saturating_sub(s.created_at) > timeout
        {
            out.push(Transition {
                maneuver_id: s.maneuver_id,
                from: PhaseKind::AwaitingResponses,
                to: PhaseKind::Expired,
            });
            s.phase = Phase::Expired;
        }
    }
    out
}

/// Cancels active sessions whose earliest start passed more than `grace` ms ago.
pub fn cancel_overdue(
    sessions: &mut BTreeMap<u64, SessionState>,
    now: u64,
    grace: u64,
) -> Vec<Transition> {
    let mut out = Vec::new();
    for s in sessions.values_mut() {
        if s.phase == Phase::Active
            && s.earliest_start()
                .is_some_and(|t| now > t.saturating_add(grace))
        {
            out.push(Transition {
                maneuver_id: s.maneuver_id,
                from: PhaseKind::Active,
                to: PhaseKind::Cancelled,
            });
            s.phase = Phase::Cancelled;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{SubManeuverStatus, TargetRoadResource};
    use crate::identity::{derive_secret, LongTermId, PseudonymCredential};

    const R: StationId = StationId(1);
    const A: StationId = StationId(2);
    const B: StationId = StationId(3);

    fn sub(executant: StationId, lane: i8, s0: f64, s1: f64, t0: u64, t1: u64) -> SubManeuver {
        SubManeuver {
            executant_id: executant,
            current_status: SubManeuverStatus::Proposed,
            trr: TargetRoadResource::lane_segment(lane, s0, s1),
            start_time: t0,
            end_time: t1,
            min_speed: 80.0,
            max_speed: 110.0,
            executant_width: 1.8,
            executant_length: 4.5,
        }
    }

    fn two_party() -> (SessionState, Mscm) {
        let m = Maneuver::new(vec![
            sub(A, 0, 0.0, 50.0, 1_000, 3_000),
            sub(B, 1, 0.0, 50.0, 1_000, 3_000),
        ]);
        create_request(
            R,
            m,
            &[A, B],
            CastMode::Broadcast,
            0,
            &mut ManeuverIdAllocator::default(),
        )
        .unwrap()
    }

    fn response(from: StationId, id: u64, reason: ReasonCode) -> Mscm {
        let mut m = Mscm::bare(MscmType::Response, from, 10, id);
        m.destination_ids = vec![R];
        m.reason_code = Some(reason);
        m
    }

    fn exec(from: StationId, id: u64, ty: MscmType) -> Mscm {
        let mut m = Mscm::bare(ty, from, 10, id);
        m.destination_ids = vec![R];
        m.execution_status = Some(if ty == MscmType::Cancel {
            ExecutionStatus::Cancelled
        } else {
            ExecutionStatus::Completed
        });
        m
    }

    #[test]
    fn request_creates_pending_session() {
        let (s, msg) = two_party();
        assert_eq!(s.pending().unwrap(), &BTreeSet::from([A, B]));
        assert_eq!(msg.executant_ids, Some(vec![A, B]));
        assert_eq!(msg.maneuver_id >> 32, R.0 as u64);
    }

    #[test]
    fn executant_must_be_addressed() {
        let m = Maneuver::new(vec![sub(StationId(9), 0, 0.0, 10.0, 0, 10)]);
        assert_eq!(
            create_request(
                R,
                m,
                &[A, B],
                CastMode::Broadcast,
                0,
                &mut ManeuverIdAllocator::default()
            ),
            Err(ProtocolError::ExecutantNotAddressed(StationId(9)))
        );
    }

    #[test]
    fn successive_requests_get_distinct_ids() {
        let mut ids = ManeuverIdAllocator::default();
        let a = create_request(
            R,
            Maneuver::new(vec![sub(A, 0, 0.0, 1.0, 0, 1)]),
            &[A],
            CastMode::Unicast { target: A },
            1_000,
            &mut ids,
        )
        .unwrap();
        let b = create_request(
            R,
            Maneuver::new(vec![sub(B, 0, 0.0, 1.0, 0, 1)]),
            &[B],
            CastMode::Unicast { target: B },
            2_000,
            &mut ids,
        )
        .unwrap();
        assert_ne!(a.0.maneuver_id, b.0.maneuver_id);
    }

    #[test]
    fn unicast_requires_single_matching_destination() {
        let m = Maneuver::new(vec![sub(A, 0, 0.0, 1.0, 0, 1)]);
        assert_eq!(
            create_request(
                R,
                m,
                &[A, B],
                CastMode::Unicast { target: A },
                0,
                &mut ManeuverIdAllocator::default()
            ),
            Err(ProtocolError::InvalidCastMode)
        );
    }

    #[test]
    fn unanimity_and_single_disagree() {
        let (s, msg) = two_party();
        let id = msg.maneuver_id;
        let s1 = handle_response(&s, &response(A, id, ReasonCode::Agree)).unwrap();
        assert_eq!(s1.pending().unwrap(), &BTreeSet::from([B]));
        let s2 = handle_response(&s1, &response(B, id, ReasonCode::Agree)).unwrap();
        assert_eq!(s2.phase, Phase::Active);

        let rejected = handle_response(&s, &response(A, id, ReasonCode::Disagree(0))).unwrap();
        assert_eq!(rejected.phase, Phase::Rejected);
        assert_eq!(
            handle_response(&rejected, &response(B, id, ReasonCode::Agree)),
            Err(ProtocolError::StaleResponse(StaleReason::TerminalSession))
        );
    }

    #[test]
    fn responses_for_other_sessions_are_refused() {
        let (s, msg) = two_party();
        assert!(matches!(
            handle_response(&s, &response(A, msg.maneuver_id + 1, ReasonCode::Agree)),
            Err(ProtocolError::SessionMismatch { .. })
        ));
    }

    #[test]
    fn completion_needs_every_executant() {
        let (s, msg) = two_party();
        let id = msg.maneuver_id;
        let active = s.with_phase(Phase::Active);
        let a = handle_execution_msg(&active, &exec(A, id, MscmType::Complete)).unwrap();
        assert_eq!(a.phase, Phase::Active);
        assert_eq!(a.acked, BTreeSet::from([A]));
        let ab = handle_execution_msg(&a, &exec(B, id, MscmType::Complete)).unwrap();
        assert_eq!(
            ab.phase,
            Phase::Completed {
                acked: BTreeSet::from([A, B])
            }
        );
        assert_eq!(
            handle_execution_msg(&ab, &exec(A, id, MscmType::Cancel)),
            Err(ProtocolError::StaleResponse(StaleReason::TerminalSession))
        );
        let cancelled = handle_execution_msg(&active, &exec(B, id, MscmType::Cancel)).unwrap();
        assert_eq!(cancelled.phase, Phase::Cancelled);
    }

    #[test]
    fn cancel_beats_complete_in_the_same_tick() {
        let (s, msg) = two_party();
        let id = msg.maneuver_id;
        let a_done = handle_execution_msg(
            &s.with_phase(Phase::Active),
            &exec(A, id, MscmType::Complete),
        )
        .unwrap();
        let complete_b = exec(B, id, MscmType::Complete);
        let cancel_a = exec(A, id, MscmType::Cancel);
        assert_eq!(
            handle_execution_batch(&a_done, &[&complete_b, &cancel_a]).phase,
            Phase::Cancelled
        );
    }

    #[test]
    fn honest_receiver_policy() {
        let (_, req) = two_party();
        let policy = AgreementPolicy::default();
        let resp = handle_request(A, &[], &req, &policy, 5).unwrap();
        assert_eq!(resp.reason_code, Some(ReasonCode::Agree));
        assert_eq!(resp.maneuver_id, req.maneuver_id);

        // A already holds lane 1, s 20..80, 2..4 s; B's sub-maneuver overlaps it
        let own = vec![Reservation {
            maneuver_id: 77,
            executant: A,
            footprint: footprint(&sub(A, 1, 20.0, 80.0, 2_000, 4_000), &RoadFrame::default())
                .unwrap(),
        }];
        let resp = handle_request(A, &own, &req, &policy, 5).unwrap();
        assert_eq!(
            resp.reason_code,
            Some(ReasonCode::Disagree(disagree::CONFLICT_WITH_OWN_PLAN))
        );

        let mut bad = req.clone();
        let subm = &mut bad.maneuver.as_mut().unwrap().sub_maneuvers[0];
        subm.start_time = 5_000;
        subm.end_time = 4_000;
        let resp = handle_request(A, &[], &bad, &policy, 5).unwrap();
        assert_eq!(
            resp.reason_code,
            Some(ReasonCode::Disagree(disagree::IMPLAUSIBLE_REQUEST))
        );

        assert_eq!(
            handle_request(StationId(9), &[], &req, &policy, 5),
            Err(ProtocolError::NotAddressed(StationId(9)))
        );

        let deny_all = |_: &Mscm| false;
        let strict = AgreementPolicy {
            prefilter: Some(&deny_all),
            ..AgreementPolicy::default()
        };
        assert_eq!(
            handle_request(A, &[], &req, &strict, 5)
                .unwrap()
                .reason_code,
            Some(ReasonCode::Disagree(disagree::IMPLAUSIBLE_REQUEST))
        );
    }

    #[test]
    fn expiry_boundary() {
        let (s, msg) = two_party();
        let mut sessions = BTreeMap::from([(msg.maneuver_id, s.clone())]);
        assert!(expire_sessions(&mut sessions, 2_000, DEFAULT_RESPONSE_TIMEOUT_MS).is_empty());
        // answered at t + 1999 first
        let answered =
            handle_response(&s, &response(A, msg.maneuver_id, ReasonCode::Agree)).unwrap();
        let answered =
            handle_response(&answered, &response(B, msg.maneuver_id, ReasonCode::Agree)).unwrap();
        let mut both = BTreeMap::from([(1, answered), (2, s.clone())]);
        let t = expire_sessions(&mut both, 2_001, DEFAULT_RESPONSE_TIMEOUT_MS);
        assert_eq!(t.len(), 1);
        assert_eq!(both[&1].phase, Phase::Active);
        assert_eq!(both[&2].phase, Phase::Expired);
    }

    #[test]
    fn overdue_active_sessions_cancel() {
        let (s, _) = two_party();
        let mut sessions = BTreeMap::from([(1, s.with_phase(Phase::Active))]);
        assert!(cancel_overdue(&mut sessions, 6_000, DEFAULT_START_GRACE_MS).is_empty());
        assert_eq!(
            cancel_overdue(&mut sessions, 6_001, DEFAULT_START_GRACE_MS).len(),
            1
        );
    }

    fn directory(special: bool) -> CredentialDirectory {
        let mut d = CredentialDirectory::new();
        d.insert(PseudonymCredential {
            station_id: R,
            secret: derive_secret(0, R),
            owner: LongTermId(1),
            valid_from: 0,
            valid_to: u64::MAX,
            is_special: special,
            capabilities: None,
        });
        d
    }

    #[test]
    fn special_announcements() {
        let mut msg = Mscm::bare(MscmType::SpecialAnnounce, R, 0, 5);
        msg.destination_ids = vec![A];
        msg.executant_ids = Some(vec![R]);
        let mut corridor = sub(R, 0, 0.0, 300.0, 0, 10_000);
        corridor.max_speed = 160.0;
        msg.maneuver = Some(Maneuver::new(vec![corridor]));
        let d = handle_special_announce(&msg, &directory(true)).unwrap();
        assert_eq!(d.corridors.len(), 1);
        assert_eq!(
            handle_special_announce(&msg, &directory(false)),
            Err(ProtocolError::NotSpecialVehicle(R))
        );
    }

    #[test]
    fn dag_edges() {
        use PhaseKind::*;
        let all = [
            AwaitingResponses,
            Active,
            Rejected,
            Cancelled,
            Completed,
            Expired,
        ];
        for from in all {
            for to in all {
                if from.is_terminal() {
                    assert!(!from.can_transition(to));
                }
            }
        }
        assert!(AwaitingResponses.can_transition(Active));
        assert!(!AwaitingResponses.can_transition(Completed));
    }
}
