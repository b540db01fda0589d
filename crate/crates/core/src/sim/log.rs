use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackId;
use crate::codec::{MscmType, ReasonCode, StationId};
use crate::detection::{DetectionEvent, MisbehaviorReport};
use crate::digest::{hex_bytes, MessageHash};
use crate::geometry::Footprint;
use crate::identity::LongTermId;
use crate::protocol::{CastMode, PhaseKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    MsgSent,
    MsgDelivered,
    MsgDropped,
    SessionTransition,
    Detection,
    Report,
    Kinematics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Bsm,
    Mscm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsgSent {
    pub hash: MessageHash,
    pub sender: StationId,
    pub payload: Payload,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub msg_type: Option<MscmType>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub maneuver_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<ReasonCode>,
    pub mode: CastMode,
    pub recipients: Vec<LongTermId>,
    pub deliver_tick: u64,
    /// Wire bytes of maneuver messages; beacons are summarized by hash only.
    #[serde(with = "hex_bytes", skip_serializing_if = "Vec::is_empty", default)]
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub hash: MessageHash,
    pub recipients: Vec<LongTermId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionChange {
    pub station: LongTermId,
    pub maneuver_id: u64,
    pub requester: StationId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub from: Option<PhaseKind>,
    pub to: PhaseKind,
    /// Sub-maneuver footprints in absolute lanes, when the requester's lane
    /// was known to the station.
    pub footprints: Vec<Option<Footprint>>,
    pub executants: Vec<StationId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detected {
    pub observer: LongTermId,
    pub event: DetectionEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reported {
    pub observer: LongTermId,
    pub report: MisbehaviorReport,
    pub revoked: StationId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrace {
    pub id: LongTermId,
    pub lane: i32,
    pub lateral: f64,
    pub s: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicsTrace {
    pub vehicles: Vec<VehicleTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    MsgSent(MsgSent),
    MsgDelivered(Delivery),
    MsgDropped(Delivery),
    SessionTransition(SessionChange),
    Detection(Detected),
    Report(Box<Reported>),
    Kinematics(KinematicsTrace),
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::MsgSent(_) => EventKind::MsgSent,
            Event::MsgDelivered(_) => EventKind::MsgDelivered,
            Event::MsgDropped(_) => EventKind::MsgDropped,
            Event::SessionTransition(_) => EventKind::SessionTransition,
            Event::Detection(_) => EventKind::Detection,
            Event::Report(_) => EventKind::Report,
            Event::Kinematics(_) => EventKind::Kinematics,
        }
    }
}

/// One line of the event log: `{"seq","tick","time_ms","kind","payload"}` in
/// that key order.
#[derive(Clone, Debug, PartialEq)]
pub struct EventLogRecord {
    pub seq: u64,
    pub tick: u64,
    pub time_ms: u64,
    pub event: Event,
}

#[derive(Serialize)]
struct RecordOut<'a, P: Serialize> {
    seq: u64,
    tick: u64,
    time_ms: u64,
    kind: EventKind,
    payload: &'a P,
}

#[derive(Deserialize)]
struct RecordIn {
    seq: u64,
    tick: u64,
    time_ms: u64,
    kind: EventKind,
    payload: serde_json::Value,
}

impl Serialize for EventLogRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let (seq, tick, time_ms, kind) = (self.seq, self.tick, self.time_ms, self.event.kind());
        macro_rules! out {
            ($p:expr) => {
                RecordOut {
                    seq,
                    tick,
                    time_ms,
                    kind,
                    payload: $p,
                }
                .serialize(s)
            };
        }
        match &self.event {
            Event::MsgSent(p) => out!(p),
            Event::MsgDelivered(p) | Event::MsgDropped(p) => out!(p),
            Event::SessionTransition(p) => out!(p),
            Event::Detection(p) => out!(p),
            Event::Report(p) => out!(p.as_ref()),
            Event::Kinematics(p) => out!(p),
        }
    }
}

impl<'de> Deserialize<'de> for EventLogRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = RecordIn::deserialize(d)?;
        let p = raw.payload;
        let event = match raw.kind {
            EventKind::MsgSent => serde_json::from_value(p).map(Event::MsgSent),
            EventKind::MsgDelivered => serde_json::from_value(p).map(Event::MsgDelivered),
            EventKind::MsgDropped => serde_json::from_value(p).map(Event::MsgDropped),
            EventKind::SessionTransition => serde_json::from_value(p).map(Event::SessionTransition),
            EventKind::Detection => serde_json::from_value(p).map(Event::Detection),
            EventKind::Report => serde_json::from_value(p).map(|r| Event::Report(Box::new(r))),
            EventKind::Kinematics => serde_json::from_value(p).map(Event::Kinematics),
        }
        .map_err(D::Error::custom)?;
        Ok(EventLogRecord {
            seq: raw.seq,
            tick: raw.tick,
            time_ms: raw.time_ms,
            event,
        })
    }
}

/// Append-only run log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    records: Vec<EventLogRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tick: u64, time_ms: u64, event: Event) {
        let seq = self.records.len() as u64;
        self.records.push(EventLogRecord {
            seq,
            tick,
            time_ms,
            event,
        });
    }

    pub fn records(&self) -> &[EventLogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EventLogRecord> {
        self.records.iter()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &EventLogRecord> {
        self.records.iter().filter(move |r| r.event.kind() == kind)
    }

    pub fn detections(&self) -> impl Iterator<Item = (&EventLogRecord, &Detected)> {
        self.records.iter().filter_map(|r| match &r.event {
            Event::Detection(d) => Some((r, d)),
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            );
        }
        Ok(EventLog { records })
    }

    /// Hex SHA-256 of the JSON Lines byte stream.
    pub fn digest(&self) -> String {
        let mut hasher = HashWriter(Sha256::new());
        self.write_jsonl(&mut hasher).expect("hashing cannot fail");
        crate::digest::to_hex(&hasher.0.finalize())
    }
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Ground truth kept out of the event log: who owns each pseudonym, and which
/// transmissions and silences were malicious.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionLog {
    pub owners: Vec<(StationId, LongTermId)>,
    pub attacks: Vec<AttackEntry>,
    pub records: Vec<AttributionRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub attack: AttackId,
    pub attacker: LongTermId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub tick: u64,
    pub time_ms: u64,
    pub owner: LongTermId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attack: Option<AttackId>,
    pub action: AttributedAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttributedAction {
    Sent {
        hash: MessageHash,
        station: StationId,
    },
    Suppressed {
        maneuver_id: u64,
    },
}

impl AttributionLog {
    pub fn owner_of(&self, station: StationId) -> Option<LongTermId> {
        self.owners
            .iter()
            .find(|(s, _)| *s == station)
            .map(|(_, o)| *o)
    }
}
