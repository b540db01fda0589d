//! Deterministic tick loop over the world, the channel, every station's
//! protocol logic, the attack injectors and the detectors.
//!
//! Per tick: kinematics, beacon emission, channel delivery, protocol and
//! attack logic, detectors, reports, then housekeeping. Stations are always
//! visited in ascending [`LongTermId`] order and every random draw comes from a
//! per-purpose ChaCha stream derived from the seed.

mod channel;
mod config;
mod log;
mod metrics;
mod scenarios;

pub use channel::{resolve_recipients, Channel, InFlight};
pub use config::{
    seed_from_env, ChannelConfig, ConfigError, DetectorConfig, PerceptionConfig, ProtocolConfig,
    RequestGenerator, ScenarioConfig, VehicleConfig, DEFAULT_ATTACKER_CREDENTIALS,
    DEFAULT_CREDENTIALS, SEED_ENV,
};
pub use log::{
    AttackEntry, AttributedAction, AttributionLog, AttributionRecord, Delivery, Detected, Event,
    EventKind, EventLog, EventLogRecord, KinematicsTrace, MsgSent, Payload, Reported,
    SessionChange, VehicleTrace,
};
pub use metrics::{
    compute_metrics, AttackMetrics, ChannelStats, FirstFlag, MetricsError, RunMetrics,
    RECALL_CONVENTION,
};
pub use scenarios::{fig4_config, reference_scenario, Fig4Layout, REFERENCE_ATTACKER};

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::attacks::{
    inject_plan, AttackAction, AttackId, AttackPlan, AttackSpec, AttackState, AttackerView,
    InboxItem, InjectError, PayloadKind, FAKE_EXECUTANT_BASE,
};
use crate::codec::{
    decode, peek_signature, DecodeError, ExecutionStatus, Maneuver, Mscm, MscmType, ReasonCode,
    StationId, SubManeuver, SubManeuverStatus, TargetRoadResource, TrrLocation,
};
use crate::detection::{
    generate_report, passes_prefilter, remember_request, run_detectors, BsmHistory,
    DetectionContext, DetectionEvent, DetectorInput, EvidenceStore, MscmHistory, RememberedTrr,
    ResponseHistory, ResponseRecord, BSM_RETENTION_MS, MSCM_RETENTION_MS,
};
use crate::digest::{message_hash, MessageHash};
use crate::geometry::{footprint, Footprint, RoadFrame};
use crate::identity::{
    derive_secret, verify, CredentialDirectory, LongTermId, PseudonymCredential, RevocationList,
};
use crate::protocol::{
    cancel_overdue, create_request, expire_sessions, handle_execution_msg, handle_request,
    handle_response, seal, AgreementPolicy, CastMode, ManeuverIdAllocator, Phase, PhaseKind,
    Reservation, SealError, SessionState,
};
use crate::world::{
    add_position_noise, perceive, step_kinematics, Bsm, VehicleState, World, BSM_INTERVAL_MS,
    BSM_MAGIC,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{attack} injector failed: {source}")]
    Inject {
        attack: AttackId,
        source: InjectError,
    },
    #[error("signing failed: {0}")]
    Seal(#[from] SealError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: EventLog,
    pub attribution: AttributionLog,
    pub metrics: RunMetrics,
}

impl RunOutput {
    pub fn digest(&self) -> String {
        self.log.digest()
    }
}

const STREAM_IDS: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const STREAM_REQUESTS: u64 = 3;
const STREAM_ATTACKS: u64 = 4;
const STREAM_PERCEPTION: u64 = 5;

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Validates `config` and runs it to completion.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, RunError> {
    config.validate()?;
    let mut sim = Sim::new(config);
    let last_tick = config.duration_ms / config.tick_ms;
    for tick in 0..=last_tick {
        sim.step(tick)?;
    }
    let metrics = compute_metrics(&sim.log, &sim.attribution)?;
    Ok(RunOutput {
        log: sim.log,
        attribution: sim.attribution,
        metrics,
    })
}

#[derive(Clone, Debug)]
enum Received {
    Bsm {
        bsm: Bsm,
        hash: MessageHash,
    },
    Mscm {
        msg: Mscm,
        hash: MessageHash,
        mode: CastMode,
        first: bool,
    },
    Undecodable {
        signer: StationId,
        error: DecodeError,
        hash: MessageHash,
    },
}

#[derive(Clone, Debug)]
struct SessionMeta {
    base_lane: Option<i32>,
    footprints: Vec<Option<Footprint>>,
}

#[derive(Clone, Debug)]
struct OwnRequest {
    bytes: Vec<u8>,
    mode: CastMode,
    next_retransmit: u64,
    executant: StationId,
    attempt: u32,
}

#[derive(Clone, Copy, Debug)]
struct Retry {
    due: u64,
    executant: StationId,
    attempt: u32,
}

struct AttackRuntime {
    spec: AttackSpec,
    plan: AttackPlan,
    state: AttackState,
}

struct Station {
    owner: LongTermId,
    creds: Vec<PseudonymCredential>,
    attacks: Vec<AttackRuntime>,
    bsms: BsmHistory,
    mscms: MscmHistory,
    responses: ResponseHistory,
    remembered: Vec<RememberedTrr>,
    sessions: BTreeMap<u64, SessionState>,
    meta: BTreeMap<u64, SessionMeta>,
    evidence: EvidenceStore,
    seen: BTreeMap<MessageHash, u64>,
    own: BTreeMap<u64, OwnRequest>,
    retries: Vec<Retry>,
    cached: BTreeMap<u64, (Vec<u8>, CastMode, Option<AttackId>)>,
    suppressed: BTreeSet<u64>,
    plan: Vec<Reservation>,
    executing: BTreeMap<u64, u64>,
    ids: ManeuverIdAllocator,
    next_request_at: Option<u64>,
    inbox: Vec<Received>,
    expired: Vec<SessionState>,
    reported: BTreeSet<StationId>,
}

impl Station {
    fn primary(&self) -> &PseudonymCredential {
        &self.creds[0]
    }

    fn id(&self) -> StationId {
        self.creds[0].station_id
    }

    fn is_attacker(&self) -> bool {
        !self.attacks.is_empty()
    }

    fn owns(&self, id: StationId) -> bool {
        self.creds.iter().any(|c| c.station_id == id)
    }
}

struct Sim<'c> {
    cfg: &'c ScenarioConfig,
    world: World,
    directory: CredentialDirectory,
    crl: RevocationList,
    /// Revocations waiting out the propagation delay, in report order.
    pending_revocations: Vec<(u64, StationId)>,
    stations: BTreeMap<LongTermId, Station>,
    channel: Channel,
    log: EventLog,
    attribution: AttributionLog,
    request_rng: ChaCha8Rng,
    attack_rng: ChaCha8Rng,
    perception_rng: ChaCha8Rng,
    tick: u64,
    now: u64,
}

impl<'c> Sim<'c> {
    fn new(cfg: &'c ScenarioConfig) -> Self {
        let mut vehicles: Vec<&VehicleConfig> = cfg.vehicles.iter().collect();
        vehicles.sort_by_key(|v| v.id);
        let world = World::new(
            cfg.map,
            vehicles.iter().map(|v| {
                let mut state = VehicleState::new(v.id, v.lane, v.s, v.speed, v.width, v.length);
                state.is_special = v.is_special;
                state
            }),
        );

        let mut id_rng = stream(cfg.seed, STREAM_IDS);
        let mut used = BTreeSet::new();
        let mut directory = CredentialDirectory::new();
        let mut attribution = AttributionLog::default();
        let mut creds_of: BTreeMap<LongTermId, Vec<PseudonymCredential>> = BTreeMap::new();
        for v in &vehicles {
            let mut creds = Vec::new();
            for _ in 0..cfg.credentials_of(v) {
                let id = loop {
                    let x = id_rng.random_range(1..FAKE_EXECUTANT_BASE);
                    if used.insert(x) {
                        break StationId(x);
                    }
                };
                creds.push(PseudonymCredential {
                    station_id: id,
                    secret: derive_secret(cfg.seed, id),
                    owner: v.id,
                    valid_from: 0,
                    valid_to: u64::MAX,
                    is_special: v.is_special,
                    capabilities: None,
                });
            }
            creds.sort_by_key(|c| c.station_id);
            for c in &creds {
                directory.insert(c.clone());
                attribution.owners.push((c.station_id, v.id));
            }
            creds_of.insert(v.id, creds);
        }
        attribution.owners.sort();

        let mut attacks_of: BTreeMap<LongTermId, Vec<AttackRuntime>> = BTreeMap::new();
        for spec in &cfg.attacks {
            let plan = spec.plan(&cfg.map).expect("validated");
            attribution.attacks.push(AttackEntry {
                attack: spec.id,
                attacker: spec.attacker,
            });
            attacks_of
                .entry(spec.attacker)
                .or_default()
                .push(AttackRuntime {
                    spec: spec.clone(),
                    plan,
                    state: AttackState::default(),
                });
        }

        let mut request_rng = stream(cfg.seed, STREAM_REQUESTS);
        let rate = cfg.request_generator.rate_per_min;
        let mut stations = BTreeMap::new();
        for v in &vehicles {
            let attacks = attacks_of.remove(&v.id).unwrap_or_default();
            let next_request_at = if attacks.is_empty() && rate > 0.0 {
                Some(next_arrival(&mut request_rng, rate, 0))
            } else {
                None
            };
            stations.insert(
                v.id,
                Station {
                    owner: v.id,
                    creds: creds_of
                        .remove(&v.id)
                        .expect("credentials for every vehicle"),
                    attacks,
                    bsms: BsmHistory::new(),
                    mscms: MscmHistory::new(),
                    responses: ResponseHistory::new(),
                    remembered: Vec::new(),
                    sessions: BTreeMap::new(),
                    meta: BTreeMap::new(),
                    evidence: EvidenceStore::new(),
                    seen: BTreeMap::new(),
                    own: BTreeMap::new(),
                    retries: Vec::new(),
                    cached: BTreeMap::new(),
                    suppressed: BTreeSet::new(),
                    plan: Vec::new(),
                    executing: BTreeMap::new(),
                    ids: ManeuverIdAllocator::default(),
                    next_request_at,
                    inbox: Vec::new(),
                    expired: Vec::new(),
                    reported: BTreeSet::new(),
                },
            );
        }

        let latency_ticks = cfg.channel.latency_ms / cfg.tick_ms;
        Sim {
            cfg,
            world,
            directory,
            crl: RevocationList::new(),
            pending_revocations: Vec::new(),
            stations,
            channel: Channel::new(
                cfg.channel.loss_prob,
                latency_ticks,
                stream(cfg.seed, STREAM_CHANNEL),
            ),
            log: EventLog::new(),
            attribution,
            request_rng,
            attack_rng: stream(cfg.seed, STREAM_ATTACKS),
            perception_rng: stream(cfg.seed, STREAM_PERCEPTION),
            tick: 0,
            now: 0,
        }
    }

    fn step(&mut self, tick: u64) -> Result<(), RunError> {
        self.tick = tick;
        self.now = tick * self.cfg.tick_ms;
        if tick > 0 {
            step_kinematics(&mut self.world, self.cfg.tick_ms);
        }
        if self.cfg.trace_kinematics {
            self.trace_kinematics();
        }
        if self.now.is_multiple_of(BSM_INTERVAL_MS) {
            self.emit_beacons();
        }
        self.propagate_revocations();
        self.deliver();
        let ids: Vec<LongTermId> = self.stations.keys().copied().collect();
        for &id in &ids {
            self.with_station(id, |sim, st| sim.protocol_step(st))?;
        }
        let mut fresh: Vec<(LongTermId, Vec<DetectionEvent>)> = Vec::new();
        for &id in &ids {
            let events = self.detect(id);
            if !events.is_empty() {
                fresh.push((id, events));
            }
        }
        for (id, events) in fresh {
            self.report(id, events);
        }
        self.propagate_revocations();
        for st in self.stations.values_mut() {
            housekeeping(st, self.now);
        }
        Ok(())
    }

    fn with_station<T>(
        &mut self,
        id: LongTermId,
        f: impl FnOnce(&mut Self, &mut Station) -> Result<T, RunError>,
    ) -> Result<T, RunError> {
        let mut st = self.stations.remove(&id).expect("station exists");
        let out = f(self, &mut st);
        self.stations.insert(id, st);
        out
    }

    fn trace_kinematics(&mut self) {
        let vehicles = self
            .world
            .vehicles
            .values()
            .map(|v| VehicleTrace {
                id: v.long_term,
                lane: v.lane,
                lateral: v.lateral,
                s: v.s,
                speed: v.speed,
            })
            .collect();
        self.log.push(
            self.tick,
            self.now,
            Event::Kinematics(KinematicsTrace { vehicles }),
        );
    }

    fn emit_beacons(&mut self) {
        let beacons: Vec<(LongTermId, Bsm)> = self
            .stations
            .values()
            .filter_map(|st| {
                let v = self.world.vehicle(st.owner)?;
                let bsm = Bsm::ground_truth(v, st.id(), self.now)
                    .sign(st.primary(), self.now)
                    .ok()?;
                Some((st.owner, bsm))
            })
            .collect();
        for (owner, bsm) in beacons {
            self.transmit(
                owner,
                bsm.source_id,
                bsm.encode(),
                CastMode::Broadcast,
                None,
            );
        }
    }

    /// Puts `bytes` on the channel and records the transmission.
    fn transmit(
        &mut self,
        transmitter: LongTermId,
        sender: StationId,
        bytes: Vec<u8>,
        mode: CastMode,
        attack: Option<AttackId>,
    ) -> MessageHash {
        let hash = message_hash(&bytes);
        let recipients = resolve_recipients(
            &mode,
            &self.world,
            &self.directory,
            transmitter,
            self.cfg.channel.range_m,
        );
        let beacon = bytes.starts_with(&BSM_MAGIC);
        let (msg_type, maneuver_id, reason) = match (beacon, decode(&bytes)) {
            (false, Ok(m)) => (Some(m.msg_type), Some(m.maneuver_id), m.reason_code),
            _ => (None, None, None),
        };
        let logged = if beacon { Vec::new() } else { bytes.clone() };
        let deliver_tick = self
            .channel
            .send(
                self.tick,
                transmitter,
                sender,
                hash,
                bytes,
                mode,
                &recipients,
            )
            .deliver_tick;
        self.log.push(
            self.tick,
            self.now,
            Event::MsgSent(MsgSent {
                hash,
                sender,
                payload: if beacon { Payload::Bsm } else { Payload::Mscm },
                msg_type,
                maneuver_id,
                reason,
                mode,
                recipients: recipients.into_iter().collect(),
                deliver_tick,
                bytes: logged,
            }),
        );
        self.attribution.records.push(AttributionRecord {
            tick: self.tick,
            time_ms: self.now,
            owner: transmitter,
            attack,
            action: AttributedAction::Sent {
                hash,
                station: sender,
            },
        });
        hash
    }

    fn deliver(&mut self) {
        for m in self.channel.take_due(self.tick) {
            if !m.delivered.is_empty() {
                let d = Delivery {
                    hash: m.hash,
                    recipients: m.delivered.clone(),
                };
                self.log.push(self.tick, self.now, Event::MsgDelivered(d));
            }
            if !m.dropped.is_empty() {
                let d = Delivery {
                    hash: m.hash,
                    recipients: m.dropped.clone(),
                };
                self.log.push(self.tick, self.now, Event::MsgDropped(d));
            }
            for r in &m.delivered {
                if let Some(st) = self.stations.get_mut(r) {
                    receive(st, &m, &self.directory, &self.crl, self.now);
                }
            }
        }
    }

    // -----------------------------------------------------------------------
    // Protocol and attack logic

    fn protocol_step(&mut self, st: &mut Station) -> Result<(), RunError> {
        let inbox = std::mem::take(&mut st.inbox);
        let mut attack_inbox: Vec<InboxItem> = Vec::new();
        let denies = st.attacks.iter().any(|a| a.spec.id.is_response_phase());
        for item in &inbox {
            let Received::Mscm {
                msg,
                hash,
                mode,
                first,
            } = item
            else {
                continue;
            };
            match msg.msg_type {
                MscmType::Request => {
                    if *first {
                        self.open_session(st, msg, *hash);
                    }
                    let addressed = msg.destination_ids.iter().any(|d| st.owns(*d));
                    if !addressed {
                        continue;
                    }
                    if !*first {
                        self.resend_cached(st, msg.maneuver_id);
                    } else if denies {
                        attack_inbox.push(InboxItem {
                            msg: msg.clone(),
                            mode: *mode,
                        });
                    } else {
                        self.respond_honestly(st, msg, *hash, *mode)?;
                    }
                }
                MscmType::Response if *first => {
                    if let Some(session) = st.sessions.get(&msg.maneuver_id) {
                        if let Ok(next) = handle_response(session, msg) {
                            self.update_session(st, next);
                        }
                    }
                }
                MscmType::Cancel | MscmType::Complete if *first => {
                    if let Some(session) = st.sessions.get(&msg.maneuver_id) {
                        if let Ok(next) = handle_execution_msg(session, msg) {
                            self.update_session(st, next);
                        }
                    }
                }
                _ => {}
            }
        }
        st.inbox = inbox;

        self.timers(st)?;
        if !st.is_attacker() {
            self.honest_requests(st)?;
        }
        self.run_attacks(st, &attack_inbox)?;
        Ok(())
    }

    fn open_session(&mut self, st: &mut Station, msg: &Mscm, hash: MessageHash) {
        if st.sessions.contains_key(&msg.maneuver_id) {
            return;
        }
        let Ok(session) = SessionState::from_request(msg, self.now) else {
            return;
        };
        let base_lane = if st.owns(msg.source_id) {
            self.world.vehicle(st.owner).map(|v| v.lane)
        } else {
            st.bsms
                .latest_within(
                    msg.source_id,
                    self.now,
                    self.cfg.detectors.thresholds.bsm_window_ms,
                )
                .map(|b| b.lane)
        };
        let footprints = match base_lane {
            Some(lane) => {
                let frame = RoadFrame {
                    lane_width: self.cfg.map.lane_width,
                    base_lane: lane,
                };
                session
                    .maneuver
                    .sub_maneuvers
                    .iter()
                    .map(|s| footprint(s, &frame))
                    .collect()
            }
            None => vec![None; session.maneuver.sub_maneuvers.len()],
        };
        let plausible = passes_prefilter(msg, hash, &self.context(st, None), self.now);
        if let (Some(lane), true) = (base_lane, plausible) {
            st.remembered
                .extend(remember_request(msg, lane, self.cfg.map.lane_width));
        }
        self.log_transition(st, &session, None, &footprints);
        st.meta.insert(
            msg.maneuver_id,
            SessionMeta {
                base_lane,
                footprints,
            },
        );
        st.sessions.insert(msg.maneuver_id, session);
    }

    fn log_transition(
        &mut self,
        st: &Station,
        s: &SessionState,
        from: Option<PhaseKind>,
        fps: &[Option<Footprint>],
    ) {
        self.log.push(
            self.tick,
            self.now,
            Event::SessionTransition(SessionChange {
                station: st.owner,
                maneuver_id: s.maneuver_id,
                requester: s.requester,
                from,
                to: s.phase.kind(),
                footprints: fps.to_vec(),
                executants: s
                    .maneuver
                    .sub_maneuvers
                    .iter()
                    .map(|x| x.executant_id)
                    .collect(),
            }),
        );
    }

    fn update_session(&mut self, st: &mut Station, next: SessionState) {
        let id = next.maneuver_id;
        let from = st.sessions.get(&id).map(|s| s.phase.kind());
        let to = next.phase.kind();
        st.sessions.insert(id, next);
        if from != Some(to) {
            self.on_transition(st, id, from);
        }
    }

    fn on_transition(&mut self, st: &mut Station, id: u64, from: Option<PhaseKind>) {
        let session = st.sessions[&id].clone();
        let fps = st
            .meta
            .get(&id)
            .map(|m| m.footprints.clone())
            .unwrap_or_default();
        self.log_transition(st, &session, from, &fps);
        let me = st.id();
        match session.phase.kind() {
            PhaseKind::Active => {
                if let Some(sub) = session
                    .maneuver
                    .sub_maneuvers
                    .iter()
                    .find(|s| s.executant_id == me)
                {
                    let base = st.meta.get(&id).and_then(|m| m.base_lane);
                    self.take_assignment(st, id, sub, base);
                }
            }
            PhaseKind::Rejected => {
                if let Some(own) = st.own.remove(&id) {
                    if own.attempt < self.cfg.request_generator.max_retries {
                        st.retries.push(Retry {
                            due: self.now + self.cfg.request_generator.retry_delay_ms,
                            executant: own.executant,
                            attempt: own.attempt + 1,
                        });
                    }
                }
            }
            _ => {}
        }
        if session.phase.is_terminal() {
            st.plan.retain(|r| r.maneuver_id != id);
            st.own.remove(&id);
            if st.executing.remove(&id).is_some() && session.phase.kind() == PhaseKind::Cancelled {
                self.world.clear_assignment(st.owner, id);
            }
        }
    }

    fn take_assignment(
        &mut self,
        st: &mut Station,
        id: u64,
        sub: &SubManeuver,
        base_lane: Option<i32>,
    ) {
        st.executing.insert(id, sub.end_time);
        let Some(v) = self.world.vehicle(st.owner) else {
            return;
        };
        if v.assignment.is_some() {
            return;
        }
        let target_lane = match (&sub.trr.location, base_lane) {
            (TrrLocation::LaneSegment { lane_offset, .. }, Some(b)) => b + *lane_offset as i32,
            _ => v.lane,
        };
        if !self.cfg.map.has_lane(target_lane) {
            return;
        }
        self.world.assign(
            st.owner,
            crate::world::ManeuverAssignment {
                maneuver_id: id,
                target_lane,
                start_time: sub.start_time,
                end_time: sub.end_time,
                min_speed: sub.min_speed,
                max_speed: sub.max_speed,
            },
        );
    }

    fn resend_cached(&mut self, st: &Station, maneuver_id: u64) {
        if let Some((bytes, mode, attack)) = st.cached.get(&maneuver_id) {
            self.transmit(st.owner, st.id(), bytes.clone(), *mode, *attack);
        }
    }

    fn context<'a>(
        &'a self,
        st: &'a Station,
        perception: Option<&'a crate::world::PerceptionSnapshot>,
    ) -> DetectionContext<'a> {
        DetectionContext {
            observer: st.id(),
            map: &self.cfg.map,
            perception,
            bsms: &st.bsms,
            mscms: &st.mscms,
            responses: &st.responses,
            remembered: &st.remembered,
            sessions: &st.sessions,
            directory: &self.directory,
            thresholds: &self.cfg.detectors.thresholds,
            enabled: &self.cfg.detectors.enabled,
        }
    }

    fn respond_honestly(
        &mut self,
        st: &mut Station,
        msg: &Mscm,
        hash: MessageHash,
        mode: CastMode,
    ) -> Result<(), RunError> {
        if !msg.destination_ids.contains(&st.id()) {
            return Ok(());
        }
        let base_lane = st.meta.get(&msg.maneuver_id).and_then(|m| m.base_lane);
        let frame = RoadFrame {
            lane_width: self.cfg.map.lane_width,
            base_lane: base_lane.unwrap_or(0),
        };
        let resp = {
            let ctx = self.context(st, None);
            let screen = |m: &Mscm| passes_prefilter(m, hash, &ctx, self.now);
            let policy = AgreementPolicy {
                check_conflicts: true,
                frame,
                prefilter: Some(&screen),
            };
            match handle_request(st.id(), &st.plan, msg, &policy, self.now) {
                Ok(r) => r,
                Err(_) => return Ok(()),
            }
        };
        self.send_response(st, msg, &resp, mode, None)?;
        if resp.reason_code == Some(ReasonCode::Agree) {
            if let Some(m) = &msg.maneuver {
                let me = st.id();
                for sub in m.sub_maneuvers.iter().filter(|s| s.executant_id == me) {
                    if let Some(fp) = footprint(sub, &frame) {
                        st.plan.push(Reservation {
                            maneuver_id: msg.maneuver_id,
                            executant: st.id(),
                            footprint: fp,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn send_response(
        &mut self,
        st: &mut Station,
        req: &Mscm,
        resp: &Mscm,
        mode: CastMode,
        attack: Option<AttackId>,
    ) -> Result<(), RunError> {
        let (signed, bytes) = seal(resp, st.primary(), self.now)?;
        let mode = mirror(mode, req.source_id);
        self.transmit(st.owner, st.id(), bytes.clone(), mode, attack);
        st.cached.insert(req.maneuver_id, (bytes, mode, attack));
        if let Some(session) = st.sessions.get(&req.maneuver_id) {
            if let Ok(next) = handle_response(session, &signed) {
                self.update_session(st, next);
            }
        }
        Ok(())
    }

    fn timers(&mut self, st: &mut Station) -> Result<(), RunError> {
        let timeout = self.cfg.protocol.response_timeout_ms;
        let mut sessions = std::mem::take(&mut st.sessions);
        let awaiting: Vec<SessionState> = sessions
            .values()
            .filter(|s| {
                st.own.contains_key(&s.maneuver_id)
                    && matches!(s.phase, Phase::AwaitingResponses { .. })
            })
            .cloned()
            .collect();
        let mut transitions = expire_sessions(&mut sessions, self.now, timeout);
        for t in &transitions {
            if let Some(s) = awaiting.iter().find(|s| s.maneuver_id == t.maneuver_id) {
                st.expired.push(s.clone());
            }
        }
        transitions.extend(cancel_overdue(
            &mut sessions,
            self.now,
            self.cfg.protocol.start_grace_ms,
        ));
        st.sessions = sessions;
        for t in transitions {
            self.on_transition(st, t.maneuver_id, Some(t.from));
        }

        let done: Vec<u64> = st
            .executing
            .iter()
            .filter(|(_, &end)| self.now >= end)
            .map(|(&id, _)| id)
            .collect();
        for id in done {
            let Some(session) = st.sessions.get(&id) else {
                st.executing.remove(&id);
                continue;
            };
            if session.phase != Phase::Active {
                st.executing.remove(&id);
                continue;
            }
            let mut msg = Mscm::bare(MscmType::Complete, st.id(), self.now, id);
            msg.destination_ids = vec![session.requester];
            msg.execution_status = Some(ExecutionStatus::Completed);
            let (signed, bytes) = seal(&msg, st.primary(), self.now)?;
            self.transmit(st.owner, st.id(), bytes, CastMode::Broadcast, None);
            st.executing.remove(&id);
            if let Ok(next) = handle_execution_msg(session, &signed) {
                self.update_session(st, next);
            }
        }

        let period = self.cfg.request_generator.retransmit_ms;
        let due: Vec<u64> = st
            .own
            .iter()
            .filter(|(_, o)| self.now >= o.next_retransmit)
            .map(|(&id, _)| id)
            .collect();
        for id in due {
            let awaiting = st
                .sessions
                .get(&id)
                .is_some_and(|s| matches!(s.phase, Phase::AwaitingResponses { .. }));
            let own = st.own.get_mut(&id).expect("listed above");
            own.next_retransmit = self.now + period;
            if awaiting {
                let (bytes, mode) = (own.bytes.clone(), own.mode);
                self.transmit(st.owner, st.id(), bytes, mode, None);
            }
        }
        Ok(())
    }

    fn honest_requests(&mut self, st: &mut Station) -> Result<(), RunError> {
        let retries: Vec<Retry> = st
            .retries
            .iter()
            .copied()
            .filter(|r| self.now >= r.due)
            .collect();
        st.retries.retain(|r| self.now < r.due);
        for r in retries {
            self.request_maneuver(st, Some(r.executant), r.attempt)?;
        }
        let Some(at) = st.next_request_at else {
            return Ok(());
        };
        if self.now < at {
            return Ok(());
        }
        st.next_request_at = Some(next_arrival(
            &mut self.request_rng,
            self.cfg.request_generator.rate_per_min,
            self.now,
        ));
        if st.own.is_empty() {
            self.request_maneuver(st, None, 0)?;
        }
        Ok(())
    }

    /// A lane-keeping request for one perceived neighbor, addressed to every
    /// station heard recently.
    fn request_maneuver(
        &mut self,
        st: &mut Station,
        executant: Option<StationId>,
        attempt: u32,
    ) -> Result<(), RunError> {
        let g = &self.cfg.request_generator;
        let now = self.now;
        let Some(me) = self.world.vehicle(st.owner).cloned() else {
            return Ok(());
        };
        let heard: Vec<Bsm> = st
            .bsms
            .recent(now, g.audience_window_ms)
            .filter(|b| !st.owns(b.source_id))
            .cloned()
            .collect();
        if heard.is_empty() {
            return Ok(());
        }
        let Some(view) = perceive(&self.world, st.owner, self.cfg.perception.range_m) else {
            return Ok(());
        };
        let tol = self.cfg.detectors.thresholds.ghost_tolerance_m;
        let confirmed: Vec<&Bsm> = heard
            .iter()
            .filter(|b| {
                let s = b.s_at(now);
                (s - view.observer_s).abs() <= view.range - tol && view.sees(b.lane, s, tol)
            })
            .collect();
        let target = match executant {
            Some(id) => confirmed.iter().find(|b| b.source_id == id).copied(),
            None if confirmed.is_empty() => None,
            None => Some(confirmed[self.request_rng.random_range(0..confirmed.len())]),
        };
        let Some(n) = target.cloned() else {
            return Ok(());
        };
        let start = now + g.lead_ms;
        let end = start + g.window_ms;
        let sub = SubManeuver {
            executant_id: n.source_id,
            current_status: SubManeuverStatus::Proposed,
            trr: TargetRoadResource::lane_segment(
                (n.lane - me.lane) as i8,
                n.s_at(start) - g.margin_m,
                n.s_at(end) + g.margin_m,
            ),
            start_time: start,
            end_time: end,
            min_speed: (n.speed - g.speed_band_kmh).max(0.0),
            max_speed: (n.speed + g.speed_band_kmh).min(self.cfg.map.speed_limit),
            executant_width: n.width,
            executant_length: n.length,
        };
        let dests: Vec<StationId> = heard.iter().map(|b| b.source_id).collect();
        let mode = CastMode::Broadcast;
        let Ok((_, msg)) = create_request(
            st.id(),
            Maneuver::new(vec![sub]),
            &dests,
            mode,
            now,
            &mut st.ids,
        ) else {
            return Ok(());
        };
        let (signed, bytes) = seal(&msg, st.primary(), now)?;
        self.transmit(st.owner, st.id(), bytes.clone(), mode, None);
        self.open_session(st, &signed, message_hash(&bytes));
        st.own.insert(
            signed.maneuver_id,
            OwnRequest {
                bytes,
                mode,
                next_retransmit: now + g.retransmit_ms,
                executant: n.source_id,
                attempt,
            },
        );
        Ok(())
    }

    fn run_attacks(&mut self, st: &mut Station, inbox: &[InboxItem]) -> Result<(), RunError> {
        if st.attacks.is_empty() {
            return Ok(());
        }
        let neighbors: BTreeMap<StationId, Bsm> = st
            .bsms
            .recent(self.now, self.cfg.request_generator.audience_window_ms)
            .map(|b| (b.source_id, b.clone()))
            .collect();
        let mut attacks = std::mem::take(&mut st.attacks);
        let mut result = Ok(());
        for a in attacks.iter_mut() {
            let response_phase = a.spec.id.is_response_phase();
            if response_phase && inbox.is_empty() {
                continue;
            }
            let view = AttackerView {
                attacker: st.owner,
                world: &self.world,
                credentials: &st.creds,
                directory: &self.directory,
                neighbors: &neighbors,
                inbox,
            };
            // one id sequence per station across all of its attacks
            std::mem::swap(&mut a.state.ids, &mut st.ids);
            let injected =
                inject_plan(&a.plan, &view, &mut a.state, &mut self.attack_rng, self.now);
            std::mem::swap(&mut a.state.ids, &mut st.ids);
            let actions = match injected {
                Ok(actions) => actions,
                Err(InjectError::NoTargetSession) => Vec::new(),
                Err(source) => {
                    result = Err(RunError::Inject {
                        attack: a.spec.id,
                        source,
                    });
                    break;
                }
            };
            if let Err(e) = self.apply_actions(st, a.spec.id, actions, inbox) {
                result = Err(e);
                break;
            }
        }
        st.attacks = attacks;
        result
    }

    fn apply_actions(
        &mut self,
        st: &mut Station,
        attack: AttackId,
        actions: Vec<AttackAction>,
        inbox: &[InboxItem],
    ) -> Result<(), RunError> {
        for action in actions {
            match action {
                AttackAction::Send {
                    from,
                    bytes,
                    mode,
                    kind,
                } => {
                    let response = match kind {
                        PayloadKind::Mscm => decode(&bytes)
                            .ok()
                            .filter(|m| m.msg_type == MscmType::Response),
                        PayloadKind::Bsm => None,
                    };
                    self.transmit(st.owner, from, bytes.clone(), mode, Some(attack));
                    if let Some(resp) = response {
                        st.cached
                            .insert(resp.maneuver_id, (bytes, mode, Some(attack)));
                        if let Some(session) = st.sessions.get(&resp.maneuver_id) {
                            if let Ok(next) = handle_response(session, &resp) {
                                self.update_session(st, next);
                            }
                        }
                    }
                }
                AttackAction::Suppress { maneuver_id } => {
                    if st.suppressed.insert(maneuver_id) {
                        self.attribution.records.push(AttributionRecord {
                            tick: self.tick,
                            time_ms: self.now,
                            owner: st.owner,
                            attack: Some(attack),
                            action: AttributedAction::Suppressed { maneuver_id },
                        });
                    }
                }
                AttackAction::RespondHonestly { maneuver_id } => {
                    if let Some(item) = inbox.iter().find(|i| i.msg.maneuver_id == maneuver_id) {
                        let hash =
                            message_hash(&crate::codec::encode(&item.msg).unwrap_or_default());
                        self.respond_honestly(st, &item.msg, hash, item.mode)?;
                    }
                }
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Detectors and reports

    fn detect(&mut self, id: LongTermId) -> Vec<DetectionEvent> {
        let st = &self.stations[&id];
        if st.is_attacker() {
            return Vec::new();
        }
        let Some(mut view) = perceive(&self.world, id, self.cfg.perception.range_m) else {
            return Vec::new();
        };
        add_position_noise(
            &mut view,
            self.cfg.perception.noise_sigma_m,
            &mut self.perception_rng,
        );
        let st = &self.stations[&id];
        let ctx = self.context(st, Some(&view));
        let me = st.id();
        let mut events = Vec::new();
        for item in &st.inbox {
            let input = match item {
                Received::Bsm { bsm, hash } => DetectorInput::Bsm { bsm, hash: *hash },
                Received::Mscm {
                    msg, hash, first, ..
                } => {
                    if !*first
                        || (!self.cfg.detectors.spectators && !msg.destination_ids.contains(&me))
                    {
                        continue;
                    }
                    DetectorInput::Mscm { msg, hash: *hash }
                }
                Received::Undecodable {
                    signer,
                    error,
                    hash,
                } => DetectorInput::Undecodable {
                    signer: *signer,
                    error,
                    hash: *hash,
                },
            };
            events.extend(run_detectors(&input, &ctx, self.now));
        }
        for session in &st.expired {
            events.extend(run_detectors(
                &DetectorInput::SessionExpired { session },
                &ctx,
                self.now,
            ));
        }
        for e in &events {
            self.log.push(
                self.tick,
                self.now,
                Event::Detection(Detected {
                    observer: id,
                    event: e.clone(),
                }),
            );
        }
        events
    }

    fn propagate_revocations(&mut self) {
        let now = self.now;
        let (due, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending_revocations)
            .into_iter()
            .partition(|&(t, _)| t <= now);
        self.pending_revocations = waiting;
        for (_, suspect) in due {
            self.crl = std::mem::take(&mut self.crl).revoke(suspect);
        }
    }

    fn report(&mut self, id: LongTermId, events: Vec<DetectionEvent>) {
        let mut by_suspect: BTreeMap<StationId, Vec<DetectionEvent>> = BTreeMap::new();
        for e in events {
            by_suspect.entry(e.suspect).or_default().push(e);
        }
        let st = self.stations.get_mut(&id).expect("station exists");
        for (suspect, events) in by_suspect {
            if st.reported.contains(&suspect) {
                continue;
            }
            let Ok(report) =
                generate_report(st.creds[0].station_id, &events, &st.evidence, self.now)
            else {
                continue;
            };
            st.reported.insert(suspect);
            let due = self.now + self.cfg.detectors.revocation_delay_ms;
            self.pending_revocations.push((due, suspect));
            self.log.push(
                self.tick,
                self.now,
                Event::Report(Box::new(Reported {
                    observer: id,
                    report,
                    revoked: suspect,
                })),
            );
        }
    }
}

fn next_arrival(rng: &mut ChaCha8Rng, rate_per_min: f64, now: u64) -> u64 {
    let per_ms = rate_per_min / 60_000.0;
    let gap = Exp::new(per_ms).expect("positive rate").sample(rng);
    now + (gap.ceil() as u64).max(1)
}

fn mirror(mode: CastMode, requester: StationId) -> CastMode {
    match mode {
        CastMode::Broadcast => CastMode::Broadcast,
        _ => CastMode::Unicast { target: requester },
    }
}

fn receive(
    st: &mut Station,
    m: &InFlight,
    directory: &CredentialDirectory,
    crl: &RevocationList,
    now: u64,
) {
    let first = !st.seen.contains_key(&m.hash);
    if m.bytes.starts_with(&BSM_MAGIC) {
        let Ok(bsm) = Bsm::decode(&m.bytes) else {
            return;
        };
        if bsm.signature.signer_id != bsm.source_id
            || !verify(&bsm.signature, &bsm.body(), directory, crl, now).is_accept()
            || !first
        {
            return;
        }
        st.seen.insert(m.hash, now);
        st.bsms.insert(bsm.clone(), m.hash);
        st.evidence.insert(m.hash, m.bytes.clone(), now);
        st.inbox.push(Received::Bsm { bsm, hash: m.hash });
        return;
    }
    let Some((env, body)) = peek_signature(&m.bytes) else {
        return;
    };
    if !verify(&env, body, directory, crl, now).is_accept() {
        return;
    }
    if first {
        st.seen.insert(m.hash, now);
        st.evidence.insert(m.hash, m.bytes.clone(), now);
    }
    match decode(&m.bytes) {
        Ok(msg) => {
            if first {
                st.mscms.push(msg.clone(), m.hash, now);
                if let (MscmType::Response, Some(reason)) = (msg.msg_type, msg.reason_code) {
                    st.responses.push(ResponseRecord {
                        timestamp: msg.msg_timestamp,
                        responder: msg.source_id,
                        requester: msg
                            .destination_ids
                            .first()
                            .copied()
                            .unwrap_or(StationId::RESERVED),
                        maneuver_id: msg.maneuver_id,
                        reason,
                        hash: m.hash,
                    });
                }
            }
            st.inbox.push(Received::Mscm {
                msg,
                hash: m.hash,
                mode: m.mode,
                first,
            });
        }
        Err(error) if first => st.inbox.push(Received::Undecodable {
            signer: env.signer_id,
            error,
            hash: m.hash,
        }),
        Err(_) => {}
    }
}

const PRUNE_EVERY_MS: u64 = 1_000;

fn housekeeping(st: &mut Station, now: u64) {
    st.inbox.clear();
    st.expired.clear();
    if !now.is_multiple_of(PRUNE_EVERY_MS) {
        return;
    }
    st.bsms.prune(now, BSM_RETENTION_MS);
    st.mscms.prune(now, MSCM_RETENTION_MS);
    st.responses.prune(now, MSCM_RETENTION_MS);
    st.evidence.prune(now, MSCM_RETENTION_MS);
    let cutoff = now.saturating_sub(MSCM_RETENTION_MS);
    st.seen.retain(|_, t| *t >= cutoff);
    st.remembered.retain(|r| r.footprint.t1 >= cutoff);
    let stale: Vec<u64> = st
        .sessions
        .iter()
        .filter(|(_, s)| s.phase.is_terminal() && s.created_at < cutoff)
        .map(|(&id, _)| id)
        .collect();
    for id in stale {
        st.sessions.remove(&id);
        st.meta.remove(&id);
        st.cached.remove(&id);
        st.suppressed.remove(&id);
    }
}
