//! MSCM data model and its canonical binary encoding.
//!
//! # Wire format
//!
//! ```text
//! [magic "MS" (2)] [total length u32 LE (4)] { [tag u8] [len u16 LE] [payload] }*
//! ```
//!
//! Fields appear in strictly ascending tag order, one TLV each. The signature
//! TLV (tag 10) is always last; the bytes between the header and the signature
//! TLV are the signed body. All integers are little-endian, timestamps use 6
//! bytes (48-bit milliseconds), and real-valued quantities are IEEE-754 f64.
//!
//! `decode` treats its input as hostile: every length is bounds-checked before
//! use and nothing is allocated beyond the declared caps.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{SignatureEnvelope, TAG_LEN};

pub const MAGIC: [u8; 2] = *b"MS";
pub const HEADER_LEN: usize = 6;
pub const MAX_SUB_MANEUVERS: usize = 64;
pub const MAX_POLYGON_VERTICES: usize = 16;
pub const MAX_STATION_IDS: usize = 256;
pub const MAX_TIMESTAMP_MS: u64 = (1 << 48) - 1;

/// Pseudonymous station identifier carried on the wire. Zero is reserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StationId(pub u32);

impl StationId {
    pub const RESERVED: StationId = StationId(0);

    pub fn is_reserved(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for StationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MscmType {
    Request,
    Response,
    Cancel,
    Complete,
    SpecialAnnounce,
}

impl MscmType {
    pub const ALL: [MscmType; 5] = [
        MscmType::Request,
        MscmType::Response,
        MscmType::Cancel,
        MscmType::Complete,
        MscmType::SpecialAnnounce,
    ];

    fn code(self) -> u8 {
        match self {
            MscmType::Request => 0,
            MscmType::Response => 1,
            MscmType::Cancel => 2,
            MscmType::Complete => 3,
            MscmType::SpecialAnnounce => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Whether `field` must be present, may not be present, for this type.
    pub fn presence(self, field: Field) -> Presence {
        use Field::*;
        match field {
            MsgType | SourceId | MsgTimestamp | ManeuverId | DestinationIds | Signature => {
                Presence::Mandatory
            }
            ExecutantIds | Maneuver => match self {
                MscmType::Request | MscmType::SpecialAnnounce => Presence::Mandatory,
                _ => Presence::Illegal,
            },
            ReasonCode => match self {
                MscmType::Response => Presence::Mandatory,
                _ => Presence::Illegal,
            },
            ExecutionStatus => match self {
                MscmType::Cancel | MscmType::Complete => Presence::Mandatory,
                _ => Presence::Illegal,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Presence {
    Mandatory,
    Illegal,
}

/// Disagree codes used by this crate. Any other byte is carried opaquely.
pub mod disagree {
    pub const CONFLICT_WITH_OWN_PLAN: u8 = 0;
    pub const IMPLAUSIBLE_REQUEST: u8 = 1;
    pub const UNSPECIFIED: u8 = 255;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReasonCode {
    Agree,
    Disagree(u8),
}

impl ReasonCode {
    pub fn is_agree(self) -> bool {
        matches!(self, ReasonCode::Agree)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionStatus {
    Cancelled,
    Completed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrrType {
    LaneSegment,
    GeoRegion,
}

impl TrrType {
    fn code(self) -> u8 {
        match self {
            TrrType::LaneSegment => 0,
            TrrType::GeoRegion => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TrrType::LaneSegment),
            1 => Some(TrrType::GeoRegion),
            _ => None,
        }
    }
}

/// Location payload of a target road resource. The variant is the TRR type;
/// a type/location mismatch can only exist on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrrLocation {
    /// Lane relative to the transmitter's current lane, and a longitudinal span
    /// in meters along the road.
    LaneSegment {
        lane_offset: i8,
        start_s: f64,
        end_s: f64,
    },
    /// Polygon in road coordinates: x along the road, y lateral from the
    /// right road edge, both in meters.
    GeoRegion { polygon: Vec<(f64, f64)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRoadResource {
    pub location: TrrLocation,
}

impl TargetRoadResource {
    pub fn lane_segment(lane_offset: i8, start_s: f64, end_s: f64) -> Self {
        TargetRoadResource {
            location: TrrLocation::LaneSegment {
                lane_offset,
                start_s,
                end_s,
            },
        }
    }

    pub fn geo_region(polygon: Vec<(f64, f64)>) -> Self {
        TargetRoadResource {
            location: TrrLocation::GeoRegion { polygon },
        }
    }

    pub fn trr_type(&self) -> TrrType {
        match self.location {
            TrrLocation::LaneSegment { .. } => TrrType::LaneSegment,
            TrrLocation::GeoRegion { .. } => TrrType::GeoRegion,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubManeuverStatus {
    Proposed,
    Accepted,
    Executing,
}

impl SubManeuverStatus {
    fn code(self) -> u8 {
        match self {
            SubManeuverStatus::Proposed => 0,
            SubManeuverStatus::Accepted => 1,
            SubManeuverStatus::Executing => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SubManeuverStatus::Proposed),
            1 => Some(SubManeuverStatus::Accepted),
            2 => Some(SubManeuverStatus::Executing),
            _ => None,
        }
    }
}

/// One executant's share of a maneuver. Values are not range-checked here:
/// implausible content must be representable so that detectors can judge it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubManeuver {
    pub executant_id: StationId,
    pub current_status: SubManeuverStatus,
    pub trr: TargetRoadResource,
    pub start_time: u64,
    pub end_time: u64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub executant_width: f64,
    pub executant_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Maneuver {
    pub sub_maneuvers: Vec<SubManeuver>,
}

impl Maneuver {
    pub fn new(sub_maneuvers: Vec<SubManeuver>) -> Self {
        Maneuver { sub_maneuvers }
    }

    pub fn executants(&self) -> impl Iterator<Item = StationId> + '_ {
        self.sub_maneuvers.iter().map(|s| s.executant_id)
    }

    /// Earliest start and latest end over all sub-maneuvers.
    pub fn time_span(&self) -> Option<(u64, u64)> {
        let start = self.sub_maneuvers.iter().map(|s| s.start_time).min()?;
        let end = self.sub_maneuvers.iter().map(|s| s.end_time).max()?;
        Some((start, end))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mscm {
    pub msg_type: MscmType,
    pub source_id: StationId,
    pub msg_timestamp: u64,
    pub maneuver_id: u64,
    pub destination_ids: Vec<StationId>,
    pub executant_ids: Option<Vec<StationId>>,
    pub maneuver: Option<Maneuver>,
    pub reason_code: Option<ReasonCode>,
    pub execution_status: Option<ExecutionStatus>,
    pub signature: SignatureEnvelope,
}

impl Mscm {
    /// A message with only the always-mandatory fields set and an empty
    /// signature; callers fill the type-specific fields and then sign.
    pub fn bare(
        msg_type: MscmType,
        source_id: StationId,
        msg_timestamp: u64,
        maneuver_id: u64,
    ) -> Self {
        Mscm {
            msg_type,
            source_id,
            msg_timestamp,
            maneuver_id,
            destination_ids: Vec::new(),
            executant_ids: None,
            maneuver: None,
            reason_code: None,
            execution_status: None,
            signature: SignatureEnvelope::unsigned(source_id),
        }
    }

    pub fn is_present(&self, field: Field) -> bool {
        match field {
            Field::MsgType
            | Field::SourceId
            | Field::MsgTimestamp
            | Field::ManeuverId
            | Field::DestinationIds
            | Field::Signature => true,
            Field::ExecutantIds => self.executant_ids.is_some(),
            Field::Maneuver => self.maneuver.is_some(),
            Field::ReasonCode => self.reason_code.is_some(),
            Field::ExecutionStatus => self.execution_status.is_some(),
        }
    }

    /// Checks the mandatory/situational matrix and the cross-field invariants.
    pub fn validate(&self) -> Result<(), StructuralError> {
        for field in Field::ALL {
            let present = self.is_present(field);
            match self.msg_type.presence(field) {
                Presence::Mandatory if !present => {
                    return Err(StructuralError::MissingMandatory(field))
                }
                Presence::Illegal if present => return Err(StructuralError::IllegalField(field)),
                _ => {}
            }
        }
        if self.source_id.is_reserved() {
            return Err(StructuralError::ReservedStationId(Field::SourceId));
        }
        if self.msg_timestamp > MAX_TIMESTAMP_MS {
            return Err(StructuralError::OutOfRange(Field::MsgTimestamp));
        }
        if self.destination_ids.len() > MAX_STATION_IDS {
            return Err(StructuralError::LimitExceeded(Field::DestinationIds));
        }
        if self.destination_ids.iter().any(|id| id.is_reserved()) {
            return Err(StructuralError::ReservedStationId(Field::DestinationIds));
        }
        if let Some(executants) = &self.executant_ids {
            if executants.len() > MAX_STATION_IDS {
                return Err(StructuralError::LimitExceeded(Field::ExecutantIds));
            }
            if executants.iter().any(|id| id.is_reserved()) {
                return Err(StructuralError::ReservedStationId(Field::ExecutantIds));
            }
            if self.msg_type == MscmType::Request {
                if let Some(id) = executants
                    .iter()
                    .find(|id| !self.destination_ids.contains(id))
                {
                    return Err(StructuralError::ExecutantNotAddressed(*id));
                }
            }
        }
        if let Some(maneuver) = &self.maneuver {
            if maneuver.sub_maneuvers.is_empty() {
                return Err(StructuralError::EmptyManeuver);
            }
            if maneuver.sub_maneuvers.len() > MAX_SUB_MANEUVERS {
                return Err(StructuralError::LimitExceeded(Field::Maneuver));
            }
            let executants = self.executant_ids.as_deref().unwrap_or(&[]);
            for sub in &maneuver.sub_maneuvers {
                if !executants.contains(&sub.executant_id) {
                    return Err(StructuralError::UnlistedExecutant(sub.executant_id));
                }
                validate_sub_maneuver(sub)?;
            }
        }
        if self.signature.signer_id != self.source_id {
            return Err(StructuralError::SignerMismatch);
        }
        Ok(())
    }
}

fn validate_sub_maneuver(sub: &SubManeuver) -> Result<(), StructuralError> {
    if sub.executant_id.is_reserved() {
        return Err(StructuralError::ReservedStationId(Field::Maneuver));
    }
    if sub.start_time > MAX_TIMESTAMP_MS || sub.end_time > MAX_TIMESTAMP_MS {
        return Err(StructuralError::OutOfRange(Field::Maneuver));
    }
    let reals = [
        sub.min_speed,
        sub.max_speed,
        sub.executant_width,
        sub.executant_length,
    ];
    if reals.iter().any(|v| !v.is_finite()) {
        return Err(StructuralError::OutOfRange(Field::Maneuver));
    }
    match &sub.trr.location {
        TrrLocation::LaneSegment { start_s, end_s, .. } => {
            if !start_s.is_finite() || !end_s.is_finite() {
                return Err(StructuralError::OutOfRange(Field::Maneuver));
            }
        }
        TrrLocation::GeoRegion { polygon } => {
            if polygon.len() < 3 || polygon.len() > MAX_POLYGON_VERTICES {
                return Err(StructuralError::PolygonSize(polygon.len()));
            }
            if polygon
                .iter()
                .any(|(x, y)| !x.is_finite() || !y.is_finite())
            {
                return Err(StructuralError::OutOfRange(Field::Maneuver));
            }
        }
    }
    Ok(())
}

/// Field tags, numbered in the order the fields are introduced by the message
/// description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Field {
    MsgType,
    SourceId,
    MsgTimestamp,
    ManeuverId,
    DestinationIds,
    ExecutantIds,
    Maneuver,
    ReasonCode,
    ExecutionStatus,
    Signature,
}

impl Field {
    pub const ALL: [Field; 10] = [
        Field::MsgType,
        Field::SourceId,
        Field::MsgTimestamp,
        Field::ManeuverId,
        Field::DestinationIds,
        Field::ExecutantIds,
        Field::Maneuver,
        Field::ReasonCode,
        Field::ExecutionStatus,
        Field::Signature,
    ];

    pub fn tag(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<Field> {
        Self::ALL.get((tag as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::MsgType => "msg_type",
            Field::SourceId => "source_id",
            Field::MsgTimestamp => "msg_timestamp",
            Field::ManeuverId => "maneuver_id",
            Field::DestinationIds => "destination_ids",
            Field::ExecutantIds => "executant_ids",
            Field::Maneuver => "maneuver",
            Field::ReasonCode => "reason_code",
            Field::ExecutionStatus => "execution_status",
            Field::Signature => "signature",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum StructuralError {
    #[error("missing mandatory field \"{0}\"")]
    MissingMandatory(Field),
    #[error("field \"{0}\" is illegal for this message type")]
    IllegalField(Field),
    #[error("executant {0} is not among the destination ids")]
    ExecutantNotAddressed(StationId),
    #[error("sub-maneuver executant {0} is not listed in executant_ids")]
    UnlistedExecutant(StationId),
    #[error("maneuver has no sub-maneuvers")]
    EmptyManeuver,
    #[error("polygon has {0} vertices (allowed 3..={MAX_POLYGON_VERTICES})")]
    PolygonSize(usize),
    #[error("field \"{0}\" exceeds its size limit")]
    LimitExceeded(Field),
    #[error("field \"{0}\" holds a value outside its representable range")]
    OutOfRange(Field),
    #[error("field \"{0}\" uses the reserved station id 0")]
    ReservedStationId(Field),
    #[error("signature signer differs from source_id")]
    SignerMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DecodeError {
    #[error("input truncated")]
    Truncated,
    #[error("bad magic")]
    BadMagic,
    #[error("declared length {declared} does not match input length {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unexpected field tag {0}")]
    BadTag(u8),
    #[error("missing mandatory field \"{0}\"")]
    MissingMandatory(Field),
    #[error("field \"{0}\" is illegal for this message type")]
    IllegalField(Field),
    #[error("TRR location does not match TRR type")]
    TrrMismatch,
    #[error("field \"{0}\" holds an invalid value")]
    InvalidValue(Field),
    #[error("field \"{0}\" exceeds its size limit")]
    LimitExceeded(Field),
    #[error("structural violation: {0}")]
    Structural(StructuralError),
}

impl From<StructuralError> for DecodeError {
    fn from(e: StructuralError) -> Self {
        match e {
            StructuralError::MissingMandatory(f) => DecodeError::MissingMandatory(f),
            StructuralError::IllegalField(f) => DecodeError::IllegalField(f),
            StructuralError::LimitExceeded(f) => DecodeError::LimitExceeded(f),
            other => DecodeError::Structural(other),
        }
    }
}

/// Deliberate malformations used by format attacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructuralMutation {
    OmitField(Field),
    MismatchTrrTag,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum HostileEncodeError {
    #[error("mutation {0:?} does not apply to a {1:?} message")]
    UnsupportedMutation(StructuralMutation, MscmType),
    #[error(transparent)]
    Structural(#[from] StructuralError),
}

// ---------------------------------------------------------------------------
// Encoding

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u48(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes()[..6]);
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn tlv(out: &mut Vec<u8>, field: Field, payload: &[u8]) {
    debug_assert!(payload.len() <= u16::MAX as usize);
    out.push(field.tag());
    out.extend_from_slice(&(payload.len() as u16).to_le_bytes());
    out.extend_from_slice(payload);
}

fn field_payload(msg: &Mscm, field: Field) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    match field {
        Field::MsgType => w.u8(msg.msg_type.code()),
        Field::SourceId => w.u32(msg.source_id.0),
        Field::MsgTimestamp => w.u48(msg.msg_timestamp),
        Field::ManeuverId => w.u64(msg.maneuver_id),
        Field::DestinationIds => msg.destination_ids.iter().for_each(|id| w.u32(id.0)),
        Field::ExecutantIds => {
            if let Some(ids) = &msg.executant_ids {
                ids.iter().for_each(|id| w.u32(id.0));
            }
        }
        Field::Maneuver => {
            if let Some(m) = &msg.maneuver {
                w.u8(m.sub_maneuvers.len() as u8);
                for sub in &m.sub_maneuvers {
                    write_sub_maneuver(&mut w, sub, sub.trr.trr_type());
                }
            }
        }
        Field::ReasonCode => match msg.reason_code {
            Some(ReasonCode::Agree) => w.u8(0),
            Some(ReasonCode::Disagree(code)) => {
                w.u8(1);
                w.u8(code);
            }
            None => {}
        },
        Field::ExecutionStatus => match msg.execution_status {
            Some(ExecutionStatus::Cancelled) => w.u8(0),
            Some(ExecutionStatus::Completed) => w.u8(1),
            None => {}
        },
        Field::Signature => {
            w.u32(msg.signature.signer_id.0);
            w.buf.extend_from_slice(&msg.signature.tag);
        }
    }
    w.buf
}

fn write_sub_maneuver(w: &mut Writer, sub: &SubManeuver, declared: TrrType) {
    w.u32(sub.executant_id.0);
    w.u8(sub.current_status.code());
    w.u8(declared.code());
    write_location(w, &sub.trr.location);
    w.u48(sub.start_time);
    w.u48(sub.end_time);
    w.f64(sub.min_speed);
    w.f64(sub.max_speed);
    w.f64(sub.executant_width);
    w.f64(sub.executant_length);
}

fn write_location(w: &mut Writer, location: &TrrLocation) {
    match location {
        TrrLocation::LaneSegment {
            lane_offset,
            start_s,
            end_s,
        } => {
            w.u8(TrrType::LaneSegment.code());
            w.u8(*lane_offset as u8);
            w.f64(*start_s);
            w.f64(*end_s);
        }
        TrrLocation::GeoRegion { polygon } => {
            w.u8(TrrType::GeoRegion.code());
            w.u8(polygon.len() as u8);
            for (x, y) in polygon {
                w.f64(*x);
                w.f64(*y);
            }
        }
    }
}

/// Encodes every field except the signature: the bytes a signature covers.
pub fn encode_body(msg: &Mscm) -> Result<Vec<u8>, StructuralError> {
    msg.validate()?;
    let mut out = Vec::with_capacity(128);
    for field in Field::ALL {
        if field != Field::Signature && msg.is_present(field) {
            tlv(&mut out, field, &field_payload(msg, field));
        }
    }
    Ok(out)
}

/// Wraps a signed body into a complete frame.
pub fn frame(body: &[u8], signature: &SignatureEnvelope) -> Vec<u8> {
    let total = HEADER_LEN + body.len() + 3 + 4 + TAG_LEN;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.extend_from_slice(body);
    let mut sig = Vec::with_capacity(4 + TAG_LEN);
    sig.extend_from_slice(&signature.signer_id.0.to_le_bytes());
    sig.extend_from_slice(&signature.tag);
    tlv(&mut out, Field::Signature, &sig);
    out
}

pub fn encode(msg: &Mscm) -> Result<Vec<u8>, StructuralError> {
    let body = encode_body(msg)?;
    Ok(frame(&body, &msg.signature))
}

/// Body bytes carrying a deliberate structural defect; sign and `frame` them
/// like an ordinary body.
pub fn hostile_body(
    msg: &Mscm,
    mutation: StructuralMutation,
) -> Result<Vec<u8>, HostileEncodeError> {
    let unsupported = || HostileEncodeError::UnsupportedMutation(mutation, msg.msg_type);
    match mutation {
        StructuralMutation::OmitField(Field::Signature) => return Err(unsupported()),
        StructuralMutation::OmitField(field) => {
            if msg.msg_type.presence(field) != Presence::Mandatory || !msg.is_present(field) {
                return Err(unsupported());
            }
        }
        StructuralMutation::MismatchTrrTag => {
            if msg.maneuver.is_none() {
                return Err(unsupported());
            }
        }
    }
    msg.validate()?;

    let mut out = Vec::new();
    for field in Field::ALL {
        if field == Field::Signature || !msg.is_present(field) {
            continue;
        }
        match (mutation, field) {
            (StructuralMutation::OmitField(omitted), f) if omitted == f => {}
            (StructuralMutation::MismatchTrrTag, Field::Maneuver) => {
                let m = msg.maneuver.as_ref().expect("checked above");
                let mut w = Writer { buf: Vec::new() };
                w.u8(m.sub_maneuvers.len() as u8);
                for (i, sub) in m.sub_maneuvers.iter().enumerate() {
                    if i == 0 {
                        // Keep the declared type, swap the payload variant.
                        let declared = sub.trr.trr_type();
                        let mut swapped = sub.clone();
                        swapped.trr.location = swap_location(&sub.trr.location);
                        write_sub_maneuver(&mut w, &swapped, declared);
                    } else {
                        write_sub_maneuver(&mut w, sub, sub.trr.trr_type());
                    }
                }
                tlv(&mut out, field, &w.buf);
            }
            _ => tlv(&mut out, field, &field_payload(msg, field)),
        }
    }
    Ok(out)
}

/// `hostile_body` framed with the message's current signature envelope.
pub fn encode_hostile(
    msg: &Mscm,
    mutation: StructuralMutation,
) -> Result<Vec<u8>, HostileEncodeError> {
    let body = hostile_body(msg, mutation)?;
    Ok(frame(&body, &msg.signature))
}

fn swap_location(location: &TrrLocation) -> TrrLocation {
    const LANE_WIDTH: f64 = 3.5;
    match location {
        TrrLocation::LaneSegment {
            lane_offset,
            start_s,
            end_s,
        } => {
            let y0 = *lane_offset as f64 * LANE_WIDTH;
            let y1 = y0 + LANE_WIDTH;
            TrrLocation::GeoRegion {
                polygon: vec![(*start_s, y0), (*end_s, y0), (*end_s, y1), (*start_s, y1)],
            }
        }
        TrrLocation::GeoRegion { polygon } => {
            let xs = polygon.iter().map(|p| p.0);
            let min = xs.clone().fold(f64::INFINITY, f64::min);
            let max = xs.fold(f64::NEG_INFINITY, f64::max);
            TrrLocation::LaneSegment {
                lane_offset: 0,
                start_s: min,
                end_s: max,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Decoding

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
    fn u48(&mut self) -> Result<u64, DecodeError> {
        let b = self.take(6)?;
        let mut full = [0u8; 8];
        full[..6].copy_from_slice(b);
        Ok(u64::from_le_bytes(full))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, field: Field) -> Result<f64, DecodeError> {
        let b = self.take(8)?;
        let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DecodeError::InvalidValue(field))
        }
    }
    fn finish(&self, field: Field) -> Result<(), DecodeError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(DecodeError::InvalidValue(field))
        }
    }
}

/// One raw TLV as found in a frame.
#[derive(Clone, Copy, Debug)]
struct RawField<'a> {
    tag: u8,
    offset: usize,
    payload: &'a [u8],
}

fn split_frame(bytes: &[u8]) -> Result<&[u8], DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated);
    }
    if bytes[..2] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let declared = u32::from_le_bytes(bytes[2..6].try_into().expect("4 bytes")) as usize;
    if declared > bytes.len() {
        return Err(DecodeError::Truncated);
    }
    if declared != bytes.len() || declared < HEADER_LEN {
        return Err(DecodeError::LengthMismatch {
            declared,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[HEADER_LEN..])
}

fn next_field<'a>(r: &mut Reader<'a>) -> Result<RawField<'a>, DecodeError> {
    let offset = r.pos;
    let tag = r.u8()?;
    let len = r.u16()? as usize;
    let payload = r.take(len)?;
    Ok(RawField {
        tag,
        offset,
        payload,
    })
}

/// Parses untrusted bytes into a structurally valid message, or reports the
/// first violation found.
pub fn decode(bytes: &[u8]) -> Result<Mscm, DecodeError> {
    let content = split_frame(bytes)?;
    let mut r = Reader::new(content);

    let mut last_tag = 0u8;
    let mut msg_type = None;
    let mut source_id = None;
    let mut msg_timestamp = None;
    let mut maneuver_id = None;
    let mut destination_ids = None;
    let mut executant_ids = None;
    let mut maneuver = None;
    let mut reason_code = None;
    let mut execution_status = None;
    let mut signature = None;

    while r.remaining() > 0 {
        let raw = next_field(&mut r)?;
        let field = Field::from_tag(raw.tag).ok_or(DecodeError::BadTag(raw.tag))?;
        if raw.tag <= last_tag || signature.is_some() {
            return Err(DecodeError::BadTag(raw.tag));
        }
        last_tag = raw.tag;
        let mut p = Reader::new(raw.payload);
        match field {
            Field::MsgType => {
                let code = p.u8()?;
                msg_type = Some(MscmType::from_code(code).ok_or(DecodeError::InvalidValue(field))?);
            }
            Field::SourceId => source_id = Some(StationId(p.u32()?)),
            Field::MsgTimestamp => msg_timestamp = Some(p.u48()?),
            Field::ManeuverId => maneuver_id = Some(p.u64()?),
            Field::DestinationIds => destination_ids = Some(read_ids(&mut p, field)?),
            Field::ExecutantIds => executant_ids = Some(read_ids(&mut p, field)?),
            Field::Maneuver => maneuver = Some(read_maneuver(&mut p)?),
            Field::ReasonCode => {
                reason_code = Some(match p.u8()? {
                    0 => ReasonCode::Agree,
                    1 => ReasonCode::Disagree(p.u8()?),
                    _ => return Err(DecodeError::InvalidValue(field)),
                })
            }
            Field::ExecutionStatus => {
                execution_status = Some(match p.u8()? {
                    0 => ExecutionStatus::Cancelled,
                    1 => ExecutionStatus::Completed,
                    _ => return Err(DecodeError::InvalidValue(field)),
                })
            }
            Field::Signature => {
                let signer_id = StationId(p.u32()?);
                let tag: [u8; TAG_LEN] = p.take(TAG_LEN)?.try_into().expect("tag length");
                signature = Some(SignatureEnvelope { signer_id, tag });
            }
        }
        p.finish(field)?;
    }

    let msg_type = msg_type.ok_or(DecodeError::MissingMandatory(Field::MsgType))?;
    let present = |f: Field| match f {
        Field::MsgType => true,
        Field::SourceId => source_id.is_some(),
        Field::MsgTimestamp => msg_timestamp.is_some(),
        Field::ManeuverId => maneuver_id.is_some(),
        Field::DestinationIds => destination_ids.is_some(),
        Field::ExecutantIds => executant_ids.is_some(),
        Field::Maneuver => maneuver.is_some(),
        Field::ReasonCode => reason_code.is_some(),
        Field::ExecutionStatus => execution_status.is_some(),
        Field::Signature => signature.is_some(),
    };
    for field in Field::ALL {
        if msg_type.presence(field) == Presence::Mandatory && !present(field) {
            return Err(DecodeError::MissingMandatory(field));
        }
    }
    for field in Field::ALL {
        if msg_type.presence(field) == Presence::Illegal && present(field) {
            return Err(DecodeError::IllegalField(field));
        }
    }

    let msg = Mscm {
        msg_type,
        source_id: source_id.expect("mandatory"),
        msg_timestamp: msg_timestamp.expect("mandatory"),
        maneuver_id: maneuver_id.expect("mandatory"),
        destination_ids: destination_ids.expect("mandatory"),
        executant_ids,
        maneuver,
        reason_code,
        execution_status,
        signature: signature.expect("mandatory"),
    };
    msg.validate()?;
    Ok(msg)
}

fn read_ids(p: &mut Reader<'_>, field: Field) -> Result<Vec<StationId>, DecodeError> {
    if !p.remaining().is_multiple_of(4) {
        return Err(DecodeError::InvalidValue(field));
    }
    if p.remaining() / 4 > MAX_STATION_IDS {
        return Err(DecodeError::LimitExceeded(field));
    }
    let mut ids = Vec::with_capacity(p.remaining() / 4);
    while p.remaining() > 0 {
        ids.push(StationId(p.u32()?));
    }
    Ok(ids)
}

fn read_maneuver(p: &mut Reader<'_>) -> Result<Maneuver, DecodeError> {
    let count = p.u8()? as usize;
    if count > MAX_SUB_MANEUVERS {
        return Err(DecodeError::LimitExceeded(Field::Maneuver));
    }
    let mut subs = Vec::with_capacity(count);
    for _ in 0..count {
        subs.push(read_sub_maneuver(p)?);
    }
    Ok(Maneuver {
        sub_maneuvers: subs,
    })
}

fn read_sub_maneuver(p: &mut Reader<'_>) -> Result<SubManeuver, DecodeError> {
    const F: Field = Field::Maneuver;
    let executant_id = StationId(p.u32()?);
    let current_status =
        SubManeuverStatus::from_code(p.u8()?).ok_or(DecodeError::InvalidValue(F))?;
    let declared = TrrType::from_code(p.u8()?).ok_or(DecodeError::InvalidValue(F))?;
    let location_tag = TrrType::from_code(p.u8()?).ok_or(DecodeError::InvalidValue(F))?;
    if declared != location_tag {
        return Err(DecodeError::TrrMismatch);
    }
    let location = match location_tag {
        TrrType::LaneSegment => TrrLocation::LaneSegment {
            lane_offset: p.u8()? as i8,
            start_s: p.f64(F)?,
            end_s: p.f64(F)?,
        },
        TrrType::GeoRegion => {
            let n = p.u8()? as usize;
            if n > MAX_POLYGON_VERTICES {
                return Err(DecodeError::LimitExceeded(F));
            }
            let mut polygon = Vec::with_capacity(n);
            for _ in 0..n {
                polygon.push((p.f64(F)?, p.f64(F)?));
            }
            TrrLocation::GeoRegion { polygon }
        }
    };
    Ok(SubManeuver {
        executant_id,
        current_status,
        trr: TargetRoadResource { location },
        start_time: p.u48()?,
        end_time: p.u48()?,
        min_speed: p.f64(F)?,
        max_speed: p.f64(F)?,
        executant_width: p.f64(F)?,
        executant_length: p.f64(F)?,
    })
}

/// Signature envelope and signed body of a frame, recovered without decoding
/// its fields. Lets a receiver attribute an undecodable message to its signer.
pub fn peek_signature(bytes: &[u8]) -> Option<(SignatureEnvelope, &[u8])> {
    let content = split_frame(bytes).ok()?;
    let mut r = Reader::new(content);
    while r.remaining() > 0 {
        let raw = next_field(&mut r).ok()?;
        if raw.tag == Field::Signature.tag() {
            if r.remaining() != 0 || raw.payload.len() != 4 + TAG_LEN {
                return None;
            }
            let signer_id = StationId(u32::from_le_bytes(raw.payload[..4].try_into().ok()?));
            let tag: [u8; TAG_LEN] = raw.payload[4..].try_into().ok()?;
            return Some((SignatureEnvelope { signer_id, tag }, &content[..raw.offset]));
        }
    }
    None
}
