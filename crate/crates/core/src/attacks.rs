//! Attack catalog and injectors for the sixteen modeled misbehaviors.
//!
//! Each [`AttackSpec`] names an attack, the physical station running it and a
//! free-form parameter record. [`AttackSpec::plan`] validates the record into
//! an [`AttackPlan`]; [`inject`] turns a plan and the attacker's local view into
//! outbound actions for one tick.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::codec::{
    frame, hostile_body, Field, Maneuver, Mscm, MscmType, ReasonCode, StationId,
    StructuralMutation, SubManeuver, SubManeuverStatus, TargetRoadResource,
};
use crate::identity::{
    sign, CredentialDirectory, LongTermId, PseudonymCredential, SignatureEnvelope,
};
use crate::protocol::{seal, CastMode, ManeuverIdAllocator, SealError};
use crate::risk::CriterionRating;
use crate::world::{Bsm, MapModel, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttackId {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
    A7,
    A8,
    A9,
    A10,
    A11,
    A12,
    A13,
    A14,
    A15,
    A16,
}

impl AttackId {
    pub const ALL: [AttackId; 16] = [
        AttackId::A1,
        AttackId::A2,
        AttackId::A3,
        AttackId::A4,
        AttackId::A5,
        AttackId::A6,
        AttackId::A7,
        AttackId::A8,
        AttackId::A9,
        AttackId::A10,
        AttackId::A11,
        AttackId::A12,
        AttackId::A13,
        AttackId::A14,
        AttackId::A15,
        AttackId::A16,
    ];

    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackId::A1 => "OmitMandatoryField",
            AttackId::A2 => "TrrTypeMismatch",
            AttackId::A3 => "GhostNegotiation",
            AttackId::A4 => "DenyAllRequests",
            AttackId::A5 => "MaxSpeedTooHigh",
            AttackId::A6 => "NonexistentLane",
            AttackId::A7 => "OverloadedManeuver",
            AttackId::A8 => "OverlappingSubManeuvers",
            AttackId::A9 => "SilentNonResponse",
            AttackId::A10 => "MinSpeedTooLow",
            AttackId::A11 => "PlausibleFalseStatic",
            AttackId::A12 => "WidthOverLane",
            AttackId::A13 => "LengthImplausible",
            AttackId::A14 => "StartAfterEnd",
            AttackId::A15 => "StartBeforeTimestamp",
            AttackId::A16 => "ExcessiveDuration",
        }
    }

    /// Rows A1..A6 come from the table of selected use cases.
    pub fn in_selected_table(self) -> bool {
        self.number() <= 6
    }

    /// Attacks that act on requests received rather than by sending their own.
    pub fn is_response_phase(self) -> bool {
        matches!(self, AttackId::A4 | AttackId::A9)
    }
}

impl fmt::Display for AttackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.number())
    }
}

impl FromStr for AttackId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s) || id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown attack {s:?}"))
    }
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub id: AttackId,
    pub name: &'static str,
    pub description: &'static str,
    pub defense: &'static str,
    pub reproducibility: CriterionRating,
    pub impact: CriterionRating,
    pub stealthiness: CriterionRating,
    pub published_label: CriterionRating,
}

/// The sixteen transcribed threat rows, in id order.
pub fn catalog() -> Vec<CatalogEntry> {
    use CriterionRating::{High as H, Low as L, Medium as M};
    let rows: [(AttackId, &str, &str, [CriterionRating; 4]); 16] = [
        (
            AttackId::A1,
            "Omit a mandatory field so the message cannot be decoded",
            "None beyond format rejection and reporting the signer",
            [H, L, L, L],
        ),
        (
            AttackId::A2,
            "TRR location format does not match the declared TRR type",
            "Detect inconsistency between TRR type and TRR location",
            [H, L, L, L],
        ),
        (
            AttackId::A3,
            "Request and answer fake maneuvers under spoofed pseudonyms",
            "Correlate claimed positions with camera perception",
            [H, H, M, H],
        ),
        (
            AttackId::A4,
            "Deny every maneuver request",
            "Detect an abnormal number of denied requests",
            [H, H, L, H],
        ),
        (
            AttackId::A5,
            "Maximum speed way above the speed limit (200 km/h on a 130 km/h road)",
            "Compare maximum speed with the speed limit and surrounding traffic",
            [H, H, L, H],
        ),
        (
            AttackId::A6,
            "Maneuver on a nonexistent lane through an incorrect lane offset",
            "Check the lane count from the map or camera",
            [H, M, L, M],
        ),
        (
            AttackId::A7,
            "Overload the message with fake executant ids and sub-maneuvers",
            "Use the camera to detect ghost vehicles and check maneuver consistency",
            [M, H, H, H],
        ),
        (
            AttackId::A8,
            "Add overlapping sub-maneuvers to provoke a collision",
            "Check whether two sub-maneuvers overlap in time and space",
            [H, H, L, H],
        ),
        (
            AttackId::A9,
            "Do not answer some maneuver requests",
            "Exclude the station and report evidence that it transmits but does not participate",
            [H, H, H, H],
        ),
        (
            AttackId::A10,
            "Minimum speed way below the speed limit (10 km/h on a 130 km/h road)",
            "Compare minimum speed with the speed limit and surrounding traffic",
            [H, H, L, H],
        ),
        (
            AttackId::A11,
            "Plausible but incorrect static field such as executant width",
            "Check the static field against other messages and the sender's beacons",
            [H, L, M, L],
        ),
        (
            AttackId::A12,
            "Executant width larger than the lane",
            "Width threshold and consistency with the beaconed width",
            [H, L, L, L],
        ),
        (
            AttackId::A13,
            "Executant length implausibly large (over 30 m)",
            "Length threshold and consistency with the beaconed length",
            [H, L, L, L],
        ),
        (
            AttackId::A14,
            "Starting time after the ending time",
            "Check that the starting time precedes the ending time",
            [H, L, L, L],
        ),
        (
            AttackId::A15,
            "Starting time before the message timestamp",
            "Check that the starting time follows the message timestamp",
            [H, L, L, L],
        ),
        (
            AttackId::A16,
            "Maneuver duration too long (over one minute)",
            "Bound the span from the earliest start to the latest end",
            [H, H, L, H],
        ),
    ];
    rows.into_iter()
        .map(
            |(id, description, defense, [r, i, s, label])| CatalogEntry {
                id,
                name: id.name(),
                description,
                defense,
                reproducibility: r,
                impact: i,
                stealthiness: s,
                published_label: label,
            },
        )
        .collect()
}

/// Rows of the selected-use-case table only.
pub fn selected_catalog() -> Vec<CatalogEntry> {
    catalog()
        .into_iter()
        .filter(|e| e.id.in_selected_table())
        .collect()
}

// ---------------------------------------------------------------------------
// Specs and parameters

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub id: AttackId,
    pub attacker: LongTermId,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Value>,
}

impl AttackSpec {
    pub fn new(id: AttackId, attacker: LongTermId) -> Self {
        AttackSpec {
            id,
            attacker,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    /// Validates the parameters against `map` and fills in defaults.
    pub fn plan(&self, map: &MapModel) -> Result<AttackPlan, ParamError> {
        AttackPlan::from_spec(self, map)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{key}: {message}")]
pub struct ParamError {
    pub key: String,
    pub message: String,
}

impl ParamError {
    fn new(key: &str, message: impl Into<String>) -> Self {
        ParamError {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

struct Params<'a> {
    raw: &'a BTreeMap<String, Value>,
    allowed: BTreeSet<&'static str>,
}

impl<'a> Params<'a> {
    fn new(raw: &'a BTreeMap<String, Value>) -> Self {
        Params {
            raw,
            allowed: BTreeSet::new(),
        }
    }

    fn value(&mut self, key: &'static str) -> Option<&'a Value> {
        self.allowed.insert(key);
        self.raw.get(key)
    }

    fn u64(&mut self, key: &'static str, default: u64) -> Result<u64, ParamError> {
        match self.value(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| ParamError::new(key, "expected a non-negative integer")),
        }
    }

    fn opt_i64(&mut self, key: &'static str) -> Result<Option<i64>, ParamError> {
        match self.value(key) {
            None => Ok(None),
            Some(v) => v
                .as_i64()
                .map(Some)
                .ok_or_else(|| ParamError::new(key, "expected an integer")),
        }
    }

    fn f64(&mut self, key: &'static str, default: f64) -> Result<f64, ParamError> {
        match self.value(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| ParamError::new(key, "expected a finite number")),
        }
    }

    fn bool(&mut self, key: &'static str, default: bool) -> Result<bool, ParamError> {
        match self.value(key) {
            None => Ok(default),
            Some(v) => v
                .as_bool()
                .ok_or_else(|| ParamError::new(key, "expected true or false")),
        }
    }

    fn str(&mut self, key: &'static str) -> Result<Option<&'a str>, ParamError> {
        match self.value(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(Some)
                .ok_or_else(|| ParamError::new(key, "expected a string")),
        }
    }

    fn station(&mut self, key: &'static str) -> Result<Option<LongTermId>, ParamError> {
        match self.value(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .and_then(|x| u32::try_from(x).ok())
                .map(|x| Some(LongTermId(x)))
                .ok_or_else(|| ParamError::new(key, "expected a vehicle id")),
        }
    }

    fn finish(self) -> Result<(), ParamError> {
        match self.raw.keys().find(|k| !self.allowed.contains(k.as_str())) {
            Some(k) => Err(ParamError {
                key: k.clone(),
                message: "unknown parameter".into(),
            }),
            None => Ok(()),
        }
    }
}

pub const DEFAULT_START_MS: u64 = 10_000;
pub const DEFAULT_PERIOD_MS: u64 = 10_000;

/// When a proactive attack emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub start_ms: u64,
    pub period_ms: u64,
}

impl Schedule {
    pub fn is_due(&self, now: u64) -> bool {
        now >= self.start_ms && (now - self.start_ms).is_multiple_of(self.period_ms)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub id: AttackId,
    pub attacker: LongTermId,
    pub schedule: Schedule,
    /// Station whose sub-maneuver carries the malicious content; nearest
    /// neighbor when unset.
    pub victim: Option<LongTermId>,
    pub kind: PlanKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PlanKind {
    OmitField(Field),
    TrrMismatch,
    Ghost { pseudonyms: usize },
    DenyAll { reason: u8 },
    MaxSpeed { speed_kmh: f64 },
    NonexistentLane { lane_offset: Option<i8> },
    Overload { sub_maneuvers: usize },
    Overlap(OverlapMode),
    Silent { probability: f64 },
    MinSpeed { speed_kmh: f64 },
    FalseWidth { width_m: f64 },
    Width { width_m: f64 },
    Length { length_m: f64 },
    StartAfterEnd { inversion_ms: u64 },
    StartBeforeTimestamp { lead_ms: u64 },
    Duration { duration_ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OverlapMode {
    /// Two overlapping sub-maneuvers in one request.
    SingleMessage,
    /// One request per victim, each locally conflict-free, meeting at `meet_ms`.
    CrossSession(CrossSession),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSession {
    pub partner: LongTermId,
    pub send_ms: u64,
    pub meet_ms: u64,
    pub meet_lane: Option<i32>,
    pub broadcast: bool,
}

/// Half-length of the meeting window around the meeting time.
pub const MEET_HALF_WINDOW_MS: u64 = 1_500;
/// Longitudinal margin of the meeting TRRs around the meeting point.
pub const MEET_MARGIN_M: f64 = 15.0;

impl AttackPlan {
    fn from_spec(spec: &AttackSpec, map: &MapModel) -> Result<AttackPlan, ParamError> {
        let mut p = Params::new(&spec.params);
        let start_ms = p.u64("start_ms", DEFAULT_START_MS)?;
        let period_ms = p.u64("period_ms", DEFAULT_PERIOD_MS)?;
        if period_ms == 0 {
            return Err(ParamError::new("period_ms", "must be positive"));
        }
        let victim = p.station("victim")?;
        if victim == Some(spec.attacker) {
            return Err(ParamError::new("victim", "must differ from the attacker"));
        }
        let positive = |key: &str, x: f64| {
            if x > 0.0 {
                Ok(x)
            } else {
                Err(ParamError::new(key, "must be positive"))
            }
        };
        let kind = match spec.id {
            AttackId::A1 => {
                let name = p.str("field")?.unwrap_or("maneuver_id");
                let field = Field::from_name(name)
                    .ok_or_else(|| ParamError::new("field", "unknown field"))?;
                if field == Field::Signature
                    || MscmType::Request.presence(field) != crate::codec::Presence::Mandatory
                {
                    return Err(ParamError::new(
                        "field",
                        "must be a mandatory request field other than the signature",
                    ));
                }
                PlanKind::OmitField(field)
            }
            AttackId::A2 => PlanKind::TrrMismatch,
            AttackId::A3 => {
                let n = p.u64("pseudonym_count", 2)?;
                if n < 1 {
                    return Err(ParamError::new("pseudonym_count", "must be at least 1"));
                }
                PlanKind::Ghost {
                    pseudonyms: n as usize,
                }
            }
            AttackId::A4 => {
                let reason = p.u64("reason", 255)?;
                let reason = u8::try_from(reason)
                    .map_err(|_| ParamError::new("reason", "must fit in a byte"))?;
                PlanKind::DenyAll { reason }
            }
            AttackId::A5 => PlanKind::MaxSpeed {
                speed_kmh: positive("speed_kmh", p.f64("speed_kmh", 200.0)?)?,
            },
            AttackId::A6 => {
                let lane_offset = match p.opt_i64("lane_offset")? {
                    None => None,
                    Some(x) => Some(i8::try_from(x).map_err(|_| {
                        ParamError::new("lane_offset", "must fit in a signed byte")
                    })?),
                };
                PlanKind::NonexistentLane { lane_offset }
            }
            AttackId::A7 => {
                let n = p.u64("sub_maneuver_count", crate::codec::MAX_SUB_MANEUVERS as u64)?;
                if n == 0 || n > crate::codec::MAX_SUB_MANEUVERS as u64 {
                    return Err(ParamError::new(
                        "sub_maneuver_count",
                        "must be within 1..=64",
                    ));
                }
                PlanKind::Overload {
                    sub_maneuvers: n as usize,
                }
            }
            AttackId::A8 => {
                if p.bool("cross_session", false)? {
                    let victim = victim
                        .ok_or_else(|| ParamError::new("victim", "required for cross_session"))?;
                    let partner = p
                        .station("partner")?
                        .ok_or_else(|| ParamError::new("partner", "required for cross_session"))?;
                    if partner == victim {
                        return Err(ParamError::new("partner", "must differ from the victim"));
                    }
                    if partner == spec.attacker {
                        return Err(ParamError::new("partner", "must differ from the attacker"));
                    }
                    let send_ms = p.u64("send_ms", 1_000)?;
                    let meet_ms = p.u64("meet_ms", 10_000)?;
                    if meet_ms < send_ms + MEET_HALF_WINDOW_MS {
                        return Err(ParamError::new(
                            "meet_ms",
                            "must leave the meeting window after send_ms",
                        ));
                    }
                    let meet_lane = match p.opt_i64("meet_lane")? {
                        None => None,
                        Some(l) if (0..map.lane_count as i64).contains(&l) => Some(l as i32),
                        Some(_) => return Err(ParamError::new("meet_lane", "lane does not exist")),
                    };
                    let broadcast = match p.str("mode")?.unwrap_or("unicast") {
                        "unicast" => false,
                        "broadcast" => true,
                        _ => return Err(ParamError::new("mode", "expected unicast or broadcast")),
                    };
                    PlanKind::Overlap(OverlapMode::CrossSession(CrossSession {
                        partner,
                        send_ms,
                        meet_ms,
                        meet_lane,
                        broadcast,
                    }))
                } else {
                    PlanKind::Overlap(OverlapMode::SingleMessage)
                }
            }
            AttackId::A9 => {
                let probability = p.f64("probability", 1.0)?;
                if !(0.0..=1.0).contains(&probability) {
                    return Err(ParamError::new("probability", "must be within [0, 1]"));
                }
                PlanKind::Silent { probability }
            }
            AttackId::A10 => {
                let speed = p.f64("speed_kmh", 10.0)?;
                if speed < 0.0 {
                    return Err(ParamError::new("speed_kmh", "must not be negative"));
                }
                PlanKind::MinSpeed { speed_kmh: speed }
            }
            AttackId::A11 => PlanKind::FalseWidth {
                width_m: positive("width_m", p.f64("width_m", 2.2)?)?,
            },
            AttackId::A12 => PlanKind::Width {
                width_m: positive("width_m", p.f64("width_m", map.lane_width + 0.5)?)?,
            },
            AttackId::A13 => PlanKind::Length {
                length_m: positive("length_m", p.f64("length_m", 31.0)?)?,
            },
            AttackId::A14 => {
                let inversion_ms = p.u64("inversion_ms", 1_000)?;
                if inversion_ms == 0 {
                    return Err(ParamError::new("inversion_ms", "must be positive"));
                }
                PlanKind::StartAfterEnd { inversion_ms }
            }
            AttackId::A15 => {
                let lead_ms = p.u64("lead_ms", 1_000)?;
                if lead_ms == 0 {
                    return Err(ParamError::new("lead_ms", "must be positive"));
                }
                PlanKind::StartBeforeTimestamp { lead_ms }
            }
            AttackId::A16 => {
                let duration_ms = p.u64("duration_ms", 120_000)?;
                if duration_ms == 0 {
                    return Err(ParamError::new("duration_ms", "must be positive"));
                }
                PlanKind::Duration { duration_ms }
            }
        };
        p.finish()?;
        Ok(AttackPlan {
            id: spec.id,
            attacker: spec.attacker,
            schedule: Schedule {
                start_ms,
                period_ms,
            },
            victim,
            kind,
        })
    }

    /// Vehicles the plan names besides the attacker.
    pub fn referenced_vehicles(&self) -> Vec<LongTermId> {
        let mut out: Vec<LongTermId> = self.victim.into_iter().collect();
        if let PlanKind::Overlap(OverlapMode::CrossSession(c)) = &self.kind {
            out.push(c.partner);
        }
        out
    }
}

/// The two requests of the collision scenario: each victim is asked to move
/// into the same road region at `t3`, one request at `t1` and one at `t2`.
pub fn fig4_scenario(
    attacker: LongTermId,
    victim_a: LongTermId,
    victim_b: LongTermId,
    t1: u64,
    t2: u64,
    t3: u64,
) -> Result<[AttackSpec; 2], ParamError> {
    if victim_a == victim_b {
        return Err(ParamError::new("victim", "the two victims must differ"));
    }
    if !(t1 < t2 && t2 < t3) {
        return Err(ParamError::new("meet_ms", "requires t1 < t2 < t3"));
    }
    let spec = |victim: LongTermId, partner: LongTermId, send: u64| {
        AttackSpec::new(AttackId::A8, attacker)
            .with("cross_session", true)
            .with("victim", victim.0)
            .with("partner", partner.0)
            .with("send_ms", send)
            .with("meet_ms", t3)
    };
    Ok([spec(victim_a, victim_b, t1), spec(victim_b, victim_a, t2)])
}

// ---------------------------------------------------------------------------
// Injection

/// What the attacker can see in one tick.
pub struct AttackerView<'a> {
    pub attacker: LongTermId,
    pub world: &'a World,
    /// The attacker's credentials sorted by station id; the first is the one
    /// its physical beacons use.
    pub credentials: &'a [PseudonymCredential],
    pub directory: &'a CredentialDirectory,
    /// Latest beacon per recently heard station.
    pub neighbors: &'a BTreeMap<StationId, Bsm>,
    /// Requests delivered this tick that address the attacker.
    pub inbox: &'a [InboxItem],
}

#[derive(Clone, Debug, PartialEq)]
pub struct InboxItem {
    pub msg: Mscm,
    pub mode: CastMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    Bsm,
    Mscm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttackAction {
    Send {
        from: StationId,
        bytes: Vec<u8>,
        mode: CastMode,
        kind: PayloadKind,
    },
    /// Deliberately leave the request unanswered.
    Suppress { maneuver_id: u64 },
    /// Let the honest logic answer this request.
    RespondHonestly { maneuver_id: u64 },
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum InjectError {
    #[error("attack needs {need} credentials, attacker holds {have}")]
    InsufficientPseudonyms { have: usize, need: usize },
    #[error("no request to act on")]
    NoTargetSession,
    #[error("attacker {0:?} has no credential or no vehicle")]
    NoIdentity(LongTermId),
    #[error("invalid parameters: {0}")]
    InvalidParams(#[from] ParamError),
    #[error(transparent)]
    Seal(#[from] SealError),
}

/// Per-attack memory carried between ticks.
#[derive(Clone, Debug, Default)]
pub struct AttackState {
    pub ids: ManeuverIdAllocator,
    /// Empty spots (lane, offset ahead of the attacker) picked for ghosts.
    pub spots: Vec<(i32, f64)>,
    pub fired: bool,
}

/// Pseudonym ids used for fabricated executants.
pub const FAKE_EXECUTANT_BASE: u32 = 0xF000_0000;

pub const GHOST_WIDTH_M: f64 = 1.8;
pub const GHOST_LENGTH_M: f64 = 4.5;
/// Clearance between a ghost spot and any real vehicle in the same lane.
pub const SPOT_CLEARANCE_M: f64 = 40.0;
/// Lead time between a request and the start of its maneuver.
pub const REQUEST_LEAD_MS: u64 = 500;
/// Length of an ordinary maneuver window.
pub const MANEUVER_WINDOW_MS: u64 = 1_500;
/// Longitudinal margin around predicted positions in hold-lane TRRs.
pub const CORRIDOR_MARGIN_M: f64 = 5.0;
/// Speed band half-width around the executant's current speed.
pub const SPEED_BAND_KMH: f64 = 10.0;

/// Validates `spec` and runs one tick of its injector.
pub fn inject(
    spec: &AttackSpec,
    view: &AttackerView<'_>,
    state: &mut AttackState,
    rng: &mut dyn RngCore,
    now: u64,
) -> Result<Vec<AttackAction>, InjectError> {
    let plan = spec.plan(&view.world.map)?;
    inject_plan(&plan, view, state, rng, now)
}

pub fn inject_plan(
    plan: &AttackPlan,
    view: &AttackerView<'_>,
    state: &mut AttackState,
    rng: &mut dyn RngCore,
    now: u64,
) -> Result<Vec<AttackAction>, InjectError> {
    let primary = view
        .credentials
        .first()
        .ok_or(InjectError::NoIdentity(view.attacker))?;
    if view.world.vehicle(view.attacker).is_none() {
        return Err(InjectError::NoIdentity(view.attacker));
    }
    let ctx = Injector {
        plan,
        view,
        primary,
        now,
    };
    match &plan.kind {
        PlanKind::DenyAll { reason } => ctx.deny_all(*reason),
        PlanKind::Silent { probability } => ctx.silent(*probability, rng),
        PlanKind::Ghost { pseudonyms } => ctx.ghosts(*pseudonyms, state),
        PlanKind::Overlap(OverlapMode::CrossSession(c)) => ctx.cross_session(c, state),
        _ if !plan.schedule.is_due(now) => Ok(Vec::new()),
        kind => ctx.request_attack(kind, state),
    }
}

struct Injector<'a> {
    plan: &'a AttackPlan,
    view: &'a AttackerView<'a>,
    primary: &'a PseudonymCredential,
    now: u64,
}

impl Injector<'_> {
    fn map(&self) -> &MapModel {
        &self.view.world.map
    }

    fn own_beacon(&self) -> Bsm {
        let v = self
            .view
            .world
            .vehicle(self.view.attacker)
            .expect("checked by caller");
        Bsm::ground_truth(v, self.primary.station_id, self.now)
    }

    fn own_ids(&self) -> BTreeSet<StationId> {
        self.view.credentials.iter().map(|c| c.station_id).collect()
    }

    fn primary_station(&self, vehicle: LongTermId) -> Option<StationId> {
        self.view
            .directory
            .credentials_of(vehicle)
            .map(|c| c.station_id)
            .next()
    }

    fn neighbor_of(&self, vehicle: LongTermId) -> Option<&Bsm> {
        self.view.neighbors.get(&self.primary_station(vehicle)?)
    }

    /// Neighbors sorted by distance to the attacker, then id.
    fn nearest_neighbors(&self) -> Vec<&Bsm> {
        let own = self.own_ids();
        let me = self.own_beacon();
        let mut out: Vec<&Bsm> = self
            .view
            .neighbors
            .values()
            .filter(|b| !own.contains(&b.source_id))
            .collect();
        out.sort_by(|a, b| {
            let da = (a.s_at(self.now) - me.s).abs();
            let db = (b.s_at(self.now) - me.s).abs();
            da.total_cmp(&db).then(a.source_id.cmp(&b.source_id))
        });
        out
    }

    fn victim(&self) -> Option<&Bsm> {
        match self.plan.victim {
            Some(v) => self.neighbor_of(v),
            None => self.nearest_neighbors().into_iter().next(),
        }
    }

    fn destinations(&self) -> Vec<StationId> {
        let own = self.own_ids();
        self.view
            .neighbors
            .keys()
            .copied()
            .filter(|id| !own.contains(id))
            .collect()
    }

    /// Sub-maneuver keeping `target` in its lane over `[start, end]`.
    fn hold_lane(&self, target: &Bsm, start: u64, end: u64) -> SubManeuver {
        let me = self.own_beacon();
        let (t0, t1) = (start.min(end), start.max(end));
        let speed = target.speed;
        SubManeuver {
            executant_id: target.source_id,
            current_status: SubManeuverStatus::Proposed,
            trr: TargetRoadResource::lane_segment(
                (target.lane - me.lane) as i8,
                target.s_at(t0) - CORRIDOR_MARGIN_M,
                target.s_at(t1) + CORRIDOR_MARGIN_M,
            ),
            start_time: start,
            end_time: end,
            min_speed: (speed - SPEED_BAND_KMH).max(0.0),
            max_speed: (speed + SPEED_BAND_KMH).min(self.map().speed_limit),
            executant_width: target.width,
            executant_length: target.length,
        }
    }

    fn request(
        &self,
        state: &mut AttackState,
        source: StationId,
        subs: Vec<SubManeuver>,
        dests: &[StationId],
    ) -> Mscm {
        let mut msg = Mscm::bare(
            MscmType::Request,
            source,
            self.now,
            state.ids.allocate(source),
        );
        let mut executants: Vec<StationId> = Vec::new();
        for s in &subs {
            if !executants.contains(&s.executant_id) {
                executants.push(s.executant_id);
            }
        }
        let mut destinations = dests.to_vec();
        for e in &executants {
            if !destinations.contains(e) {
                destinations.push(*e);
            }
        }
        msg.destination_ids = destinations;
        msg.executant_ids = Some(executants);
        msg.maneuver = Some(Maneuver::new(subs));
        msg
    }

    fn send(
        &self,
        cred: &PseudonymCredential,
        msg: &Mscm,
        mode: CastMode,
    ) -> Result<AttackAction, InjectError> {
        let (_, bytes) = seal(msg, cred, self.now)?;
        Ok(AttackAction::Send {
            from: cred.station_id,
            bytes,
            mode,
            kind: PayloadKind::Mscm,
        })
    }

    fn send_hostile(
        &self,
        msg: &Mscm,
        mutation: StructuralMutation,
    ) -> Result<AttackAction, InjectError> {
        let mut msg = msg.clone();
        msg.signature = SignatureEnvelope::unsigned(self.primary.station_id);
        let body = hostile_body(&msg, mutation).map_err(|e| match e {
            crate::codec::HostileEncodeError::Structural(s) => {
                InjectError::Seal(SealError::Structural(s))
            }
            other => InjectError::InvalidParams(ParamError::new("field", other.to_string())),
        })?;
        let env = sign(&body, self.primary, self.now)
            .map_err(|e| InjectError::Seal(SealError::Sign(e)))?;
        Ok(AttackAction::Send {
            from: self.primary.station_id,
            bytes: frame(&body, &env),
            mode: CastMode::Broadcast,
            kind: PayloadKind::Mscm,
        })
    }

    fn window(&self) -> (u64, u64) {
        let start = self.now + REQUEST_LEAD_MS;
        (start, start + MANEUVER_WINDOW_MS)
    }

    fn request_attack(
        &self,
        kind: &PlanKind,
        state: &mut AttackState,
    ) -> Result<Vec<AttackAction>, InjectError> {
        let dests = self.destinations();
        let source = self.primary.station_id;
        let (start, end) = self.window();
        let victim_sub =
            |start: u64, end: u64| self.victim().map(|v| self.hold_lane(v, start, end));
        let mut subs = match kind {
            PlanKind::Overload { sub_maneuvers } => self.overload_subs(*sub_maneuvers, state),
            PlanKind::Overlap(OverlapMode::SingleMessage) => {
                let near = self.nearest_neighbors();
                let Some(first) = near.first() else {
                    return Ok(Vec::new());
                };
                let mut a = self.hold_lane(first, start, end);
                let mut b = a.clone();
                b.executant_id = match near.get(1) {
                    Some(second) => {
                        b.executant_width = second.width;
                        b.executant_length = second.length;
                        second.source_id
                    }
                    None => {
                        let me = self.own_beacon();
                        b.executant_width = me.width;
                        b.executant_length = me.length;
                        source
                    }
                };
                a.current_status = SubManeuverStatus::Proposed;
                vec![a, b]
            }
            PlanKind::FalseWidth { width_m } => {
                let me = self.own_beacon();
                let mut sub = self.hold_lane(&me, start, end);
                sub.executant_width = *width_m;
                vec![sub]
            }
            PlanKind::StartAfterEnd { inversion_ms } => victim_sub(start + inversion_ms, start)
                .into_iter()
                .collect(),
            PlanKind::StartBeforeTimestamp { lead_ms } => {
                victim_sub(self.now.saturating_sub(*lead_ms), end)
                    .into_iter()
                    .collect()
            }
            PlanKind::Duration { duration_ms } => {
                victim_sub(start, start + duration_ms).into_iter().collect()
            }
            _ => victim_sub(start, end).into_iter().collect(),
        };
        if subs.is_empty() {
            return Ok(Vec::new());
        }
        match kind {
            PlanKind::MaxSpeed { speed_kmh } => subs[0].max_speed = *speed_kmh,
            PlanKind::MinSpeed { speed_kmh } => subs[0].min_speed = *speed_kmh,
            PlanKind::Width { width_m } => subs[0].executant_width = *width_m,
            PlanKind::Length { length_m } => subs[0].executant_length = *length_m,
            PlanKind::NonexistentLane { lane_offset } => {
                let me = self.own_beacon();
                let offset = lane_offset.unwrap_or((self.map().lane_count as i32 - me.lane) as i8);
                if let crate::codec::TrrLocation::LaneSegment { lane_offset, .. } =
                    &mut subs[0].trr.location
                {
                    *lane_offset = offset;
                }
            }
            _ => {}
        }
        let dests = match kind {
            PlanKind::Overload { .. } => Vec::new(),
            _ => dests,
        };
        let msg = self.request(state, source, subs, &dests);
        let action = match kind {
            PlanKind::OmitField(f) => self.send_hostile(&msg, StructuralMutation::OmitField(*f))?,
            PlanKind::TrrMismatch => self.send_hostile(&msg, StructuralMutation::MismatchTrrTag)?,
            _ => self.send(self.primary, &msg, CastMode::Broadcast)?,
        };
        Ok(vec![action])
    }

    /// Empty spots next to the attacker, away from every real vehicle.
    fn find_spots(&self, count: usize) -> Vec<(i32, f64)> {
        let me = self.own_beacon();
        let mut spots: Vec<(i32, f64)> = Vec::new();
        let offsets = [
            40.0, -40.0, 55.0, -55.0, 70.0, -70.0, 25.0, -25.0, 85.0, -85.0,
        ];
        for ds in offsets {
            for lane in 0..self.map().lane_count as i32 {
                if spots.len() == count {
                    return spots;
                }
                let s = me.s + ds;
                let clear = self
                    .view
                    .world
                    .vehicles
                    .values()
                    .all(|v| v.lane != lane || (v.s - s).abs() >= SPOT_CLEARANCE_M);
                let apart = spots
                    .iter()
                    .all(|&(l, d)| l != lane || (d - ds).abs() >= SPOT_CLEARANCE_M);
                if clear && apart {
                    spots.push((lane, ds));
                }
            }
        }
        spots
    }

    fn overload_subs(&self, count: usize, state: &mut AttackState) -> Vec<SubManeuver> {
        if state.spots.is_empty() {
            state.spots = self.find_spots(1);
        }
        let Some(&(lane, ds)) = state.spots.first() else {
            return Vec::new();
        };
        let me = self.own_beacon();
        let v = me.speed / 3.6 / 1000.0;
        let spot_at = |t: u64| me.s + ds + v * (t - self.now) as f64;
        (0..count)
            .map(|i| {
                let start = self.now + 500 * i as u64;
                let end = start + 500;
                SubManeuver {
                    executant_id: StationId(FAKE_EXECUTANT_BASE + i as u32 + 1),
                    current_status: if i == 0 {
                        SubManeuverStatus::Executing
                    } else {
                        SubManeuverStatus::Proposed
                    },
                    trr: TargetRoadResource::lane_segment(
                        (lane - me.lane) as i8,
                        spot_at(start) - CORRIDOR_MARGIN_M,
                        spot_at(end) + CORRIDOR_MARGIN_M,
                    ),
                    start_time: start,
                    end_time: end,
                    min_speed: (me.speed - SPEED_BAND_KMH).max(0.0),
                    max_speed: (me.speed + SPEED_BAND_KMH).min(self.map().speed_limit),
                    executant_width: GHOST_WIDTH_M,
                    executant_length: GHOST_LENGTH_M,
                }
            })
            .collect()
    }

    fn ghosts(
        &self,
        pseudonyms: usize,
        state: &mut AttackState,
    ) -> Result<Vec<AttackAction>, InjectError> {
        let have = self.view.credentials.len();
        if have < 2 {
            return Err(InjectError::InsufficientPseudonyms { have, need: 2 });
        }
        if self.now < self.plan.schedule.start_ms {
            return Ok(Vec::new());
        }
        let ghost_creds: Vec<&PseudonymCredential> =
            self.view.credentials[1..].iter().take(pseudonyms).collect();
        if state.spots.len() < ghost_creds.len() {
            state.spots = self.find_spots(ghost_creds.len());
        }
        let me = self.own_beacon();
        let mut actions = Vec::new();
        let mut beacons = Vec::new();
        for (cred, &(lane, ds)) in ghost_creds.iter().zip(&state.spots) {
            let bsm = Bsm {
                source_id: cred.station_id,
                timestamp: self.now,
                lane,
                s: me.s + ds,
                speed: me.speed,
                width: GHOST_WIDTH_M,
                length: GHOST_LENGTH_M,
                signature: SignatureEnvelope::unsigned(cred.station_id),
            };
            let signed = bsm.sign(cred, self.now).map_err(|_| {
                InjectError::Seal(SealError::Sign(
                    crate::identity::SignError::ExpiredCredential {
                        station: cred.station_id,
                        now: self.now,
                    },
                ))
            })?;
            actions.push(AttackAction::Send {
                from: cred.station_id,
                bytes: signed.encode(),
                mode: CastMode::Broadcast,
                kind: PayloadKind::Bsm,
            });
            beacons.push(signed);
        }
        if !self.plan.schedule.is_due(self.now) || beacons.is_empty() {
            return Ok(actions);
        }
        // The first ghost asks, the second (or the attacker itself) executes.
        let requester = ghost_creds[0];
        let (executant_cred, executant_beacon) = match (ghost_creds.get(1), beacons.get(1)) {
            (Some(c), Some(b)) => (*c, b.clone()),
            _ => (self.primary, me.clone()),
        };
        let (start, end) = self.window();
        let mut sub = self.hold_lane(&executant_beacon, start, end);
        // lane offsets are relative to the requester's claimed lane
        if let crate::codec::TrrLocation::LaneSegment { lane_offset, .. } = &mut sub.trr.location {
            *lane_offset = (executant_beacon.lane - beacons[0].lane) as i8;
        }
        let req = self.request(
            state,
            requester.station_id,
            vec![sub],
            &[executant_cred.station_id],
        );
        actions.push(self.send(requester, &req, CastMode::Broadcast)?);
        let mut resp = Mscm::bare(
            MscmType::Response,
            executant_cred.station_id,
            self.now,
            req.maneuver_id,
        );
        resp.destination_ids = vec![requester.station_id];
        resp.reason_code = Some(ReasonCode::Agree);
        actions.push(self.send(executant_cred, &resp, CastMode::Broadcast)?);
        Ok(actions)
    }

    fn addressed_requests(&self) -> Result<Vec<&InboxItem>, InjectError> {
        let own = self.own_ids();
        let items: Vec<&InboxItem> = self
            .view
            .inbox
            .iter()
            .filter(|i| {
                i.msg.msg_type == MscmType::Request
                    && i.msg.destination_ids.iter().any(|d| own.contains(d))
            })
            .collect();
        if items.is_empty() {
            return Err(InjectError::NoTargetSession);
        }
        Ok(items)
    }

    fn deny_all(&self, reason: u8) -> Result<Vec<AttackAction>, InjectError> {
        let items = self.addressed_requests()?;
        items
            .into_iter()
            .map(|item| {
                if self.now < self.plan.schedule.start_ms {
                    return Ok(AttackAction::RespondHonestly {
                        maneuver_id: item.msg.maneuver_id,
                    });
                }
                let mut resp = Mscm::bare(
                    MscmType::Response,
                    self.primary.station_id,
                    self.now,
                    item.msg.maneuver_id,
                );
                resp.destination_ids = vec![item.msg.source_id];
                resp.reason_code = Some(ReasonCode::Disagree(reason));
                let mode = match item.mode {
                    CastMode::Unicast { .. } => CastMode::Unicast {
                        target: item.msg.source_id,
                    },
                    other => other,
                };
                self.send(self.primary, &resp, mode)
            })
            .collect()
    }

    fn silent(
        &self,
        probability: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<AttackAction>, InjectError> {
        let items = self.addressed_requests()?;
        Ok(items
            .into_iter()
            .map(|item| {
                let maneuver_id = item.msg.maneuver_id;
                if self.now >= self.plan.schedule.start_ms && rng.random::<f64>() < probability {
                    AttackAction::Suppress { maneuver_id }
                } else {
                    AttackAction::RespondHonestly { maneuver_id }
                }
            })
            .collect())
    }

    fn cross_session(
        &self,
        c: &CrossSession,
        state: &mut AttackState,
    ) -> Result<Vec<AttackAction>, InjectError> {
        if state.fired || self.now < c.send_ms {
            return Ok(Vec::new());
        }
        let Some(victim_id) = self.plan.victim else {
            return Ok(Vec::new());
        };
        let (Some(victim), Some(partner)) =
            (self.neighbor_of(victim_id), self.neighbor_of(c.partner))
        else {
            return Ok(Vec::new());
        };
        state.fired = true;
        let me = self.own_beacon();
        let meet_lane = c
            .meet_lane
            .unwrap_or((victim.lane + partner.lane).div_euclid(2));
        let meet_s = (victim.s_at(c.meet_ms) + partner.s_at(c.meet_ms)) / 2.0;
        let start = c.meet_ms - MEET_HALF_WINDOW_MS;
        let end = c.meet_ms + MEET_HALF_WINDOW_MS;
        let s0 = victim.s_at(start).min(meet_s) - MEET_MARGIN_M;
        let s1 = victim.s_at(end).max(meet_s) + MEET_MARGIN_M;
        let sub = SubManeuver {
            executant_id: victim.source_id,
            current_status: SubManeuverStatus::Proposed,
            trr: TargetRoadResource::lane_segment((meet_lane - me.lane) as i8, s0, s1),
            start_time: start,
            end_time: end,
            min_speed: (victim.speed - SPEED_BAND_KMH).max(0.0),
            max_speed: (victim.speed + SPEED_BAND_KMH).min(self.map().speed_limit),
            executant_width: victim.width,
            executant_length: victim.length,
        };
        let msg = self.request(
            state,
            self.primary.station_id,
            vec![sub],
            &[victim.source_id],
        );
        let mode = if c.broadcast {
            CastMode::Broadcast
        } else {
            CastMode::Unicast {
                target: victim.source_id,
            }
        };
        Ok(vec![self.send(self.primary, &msg, mode)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_roundtrip_through_names() {
        for id in AttackId::ALL {
            assert_eq!(id.to_string().parse::<AttackId>().unwrap(), id);
            assert_eq!(id.name().parse::<AttackId>().unwrap(), id);
        }
        assert_eq!(AttackId::A16.to_string(), "A16");
    }

    #[test]
    fn catalog_has_sixteen_rows_in_order() {
        let cat = catalog();
        assert_eq!(cat.len(), 16);
        assert!(cat.iter().zip(AttackId::ALL).all(|(e, id)| e.id == id));
        assert_eq!(selected_catalog().len(), 6);
    }

    #[test]
    fn defaults_resolve() {
        let map = MapModel::default();
        let plan = AttackSpec::new(AttackId::A12, LongTermId(9))
            .plan(&map)
            .unwrap();
        assert_eq!(plan.kind, PlanKind::Width { width_m: 4.0 });
        let plan = AttackSpec::new(AttackId::A16, LongTermId(9))
            .plan(&map)
            .unwrap();
        assert_eq!(
            plan.kind,
            PlanKind::Duration {
                duration_ms: 120_000
            }
        );
    }

    #[test]
    fn unknown_and_bad_params_are_rejected() {
        let map = MapModel::default();
        let err = AttackSpec::new(AttackId::A5, LongTermId(9))
            .with("speed", 3)
            .plan(&map)
            .unwrap_err();
        assert_eq!(err.key, "speed");
        let err = AttackSpec::new(AttackId::A9, LongTermId(9))
            .with("probability", 1.5)
            .plan(&map)
            .unwrap_err();
        assert_eq!(err.key, "probability");
        let err = AttackSpec::new(AttackId::A1, LongTermId(9))
            .with("field", "reason_code")
            .plan(&map)
            .unwrap_err();
        assert_eq!(err.key, "field");
    }

    #[test]
    fn fig4_rejects_same_victim_and_bad_order() {
        assert!(fig4_scenario(
            LongTermId(1),
            LongTermId(2),
            LongTermId(2),
            1_000,
            2_000,
            10_000
        )
        .is_err());
        assert!(fig4_scenario(
            LongTermId(1),
            LongTermId(2),
            LongTermId(3),
            2_000,
            1_000,
            10_000
        )
        .is_err());
        let [a, b] = fig4_scenario(
            LongTermId(1),
            LongTermId(2),
            LongTermId(3),
            1_000,
            2_000,
            10_000,
        )
        .unwrap();
        let map = MapModel::default();
        assert!(matches!(
            a.plan(&map).unwrap().kind,
            PlanKind::Overlap(OverlapMode::CrossSession(_))
        ));
        assert_eq!(b.plan(&map).unwrap().victim, Some(LongTermId(3)));
    }
}
