//! Per-observer memory of received traffic, read by the detectors.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::codec::{Mscm, ReasonCode, StationId};
use crate::digest::{hex_bytes, MessageHash};
use crate::geometry::Footprint;
use crate::world::Bsm;

pub const BSM_RETENTION_MS: u64 = 10_000;
pub const MSCM_RETENTION_MS: u64 = 30_000;

/// Beacons per station, oldest first.
#[derive(Clone, Debug, Default)]
pub struct BsmHistory {
    by_station: BTreeMap<StationId, VecDeque<(Bsm, MessageHash)>>,
}

impl BsmHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, bsm: Bsm, hash: MessageHash) {
        self.by_station
            .entry(bsm.source_id)
            .or_default()
            .push_back((bsm, hash));
    }

    /// Drops beacons older than `retention` before `now`.
    pub fn prune(&mut self, now: u64, retention: u64) {
        let cutoff = now.saturating_sub(retention);
        self.by_station.retain(|_, q| {
            while q.front().is_some_and(|(b, _)| b.timestamp < cutoff) {
                q.pop_front();
            }
            !q.is_empty()
        });
    }

    pub fn latest(&self, id: StationId) -> Option<&Bsm> {
        self.by_station.get(&id)?.back().map(|(b, _)| b)
    }

    /// Latest beacon of `id` no older than `window` before `now`.
    pub fn latest_within(&self, id: StationId, now: u64, window: u64) -> Option<&Bsm> {
        self.latest(id).filter(|b| b.timestamp + window >= now)
    }

    /// Latest beacon of `id` and its hash, no older than `window` before `now`.
    pub fn latest_entry_within(
        &self,
        id: StationId,
        now: u64,
        window: u64,
    ) -> Option<&(Bsm, MessageHash)> {
        self.by_station
            .get(&id)?
            .back()
            .filter(|(b, _)| b.timestamp + window >= now)
    }

    pub fn of(&self, id: StationId) -> impl Iterator<Item = &(Bsm, MessageHash)> {
        self.by_station.get(&id).into_iter().flatten()
    }

    /// Latest beacon of every station heard within `window` before `now`.
    pub fn recent(&self, now: u64, window: u64) -> impl Iterator<Item = &Bsm> {
        self.by_station
            .values()
            .filter_map(|q| q.back().map(|(b, _)| b))
            .filter(move |b| b.timestamp + window >= now)
    }

    pub fn stations(&self) -> impl Iterator<Item = StationId> + '_ {
        self.by_station.keys().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MscmRecord {
    pub msg: Mscm,
    pub hash: MessageHash,
    pub received_at: u64,
}

/// Decoded maneuver messages in arrival order.
#[derive(Clone, Debug, Default)]
pub struct MscmHistory {
    records: VecDeque<MscmRecord>,
}

impl MscmHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, msg: Mscm, hash: MessageHash, received_at: u64) {
        self.records.push_back(MscmRecord {
            msg,
            hash,
            received_at,
        });
    }

    pub fn prune(&mut self, now: u64, retention: u64) {
        let cutoff = now.saturating_sub(retention);
        while self.records.front().is_some_and(|r| r.received_at < cutoff) {
            self.records.pop_front();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &MscmRecord> {
        self.records.iter()
    }

    pub fn from_source(&self, id: StationId) -> impl Iterator<Item = &MscmRecord> {
        self.records.iter().filter(move |r| r.msg.source_id == id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub timestamp: u64,
    pub responder: StationId,
    pub requester: StationId,
    pub maneuver_id: u64,
    pub reason: ReasonCode,
    pub hash: MessageHash,
}

/// Responses seen by the observer, oldest first.
#[derive(Clone, Debug, Default)]
pub struct ResponseHistory {
    records: VecDeque<ResponseRecord>,
}

impl ResponseHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ResponseRecord) {
        self.records.push_back(record);
    }

    pub fn prune(&mut self, now: u64, retention: u64) {
        let cutoff = now.saturating_sub(retention);
        while self.records.front().is_some_and(|r| r.timestamp < cutoff) {
            self.records.pop_front();
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ResponseRecord> {
        self.records.iter()
    }

    pub fn from_records(records: impl IntoIterator<Item = ResponseRecord>) -> Self {
        ResponseHistory {
            records: records.into_iter().collect(),
        }
    }
}

/// A sub-maneuver reservation the observer learned from a session it takes
/// part in or overhears, placed in absolute lanes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RememberedTrr {
    pub maneuver_id: u64,
    pub requester: StationId,
    pub executant: StationId,
    pub sub_index: usize,
    pub footprint: Footprint,
    /// Absolute target lane for lane segments.
    pub target_lane: Option<i32>,
    /// Unpadded longitudinal span of the TRR.
    pub s_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredMessage {
    pub received_at: u64,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

/// Raw bytes of received messages, addressable by hash.
#[derive(Clone, Debug, Default)]
pub struct EvidenceStore {
    messages: BTreeMap<MessageHash, StoredMessage>,
}

impl EvidenceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hash: MessageHash, bytes: Vec<u8>, received_at: u64) {
        self.messages
            .entry(hash)
            .or_insert(StoredMessage { received_at, bytes });
    }

    pub fn get(&self, hash: &MessageHash) -> Option<&[u8]> {
        self.messages.get(hash).map(|m| m.bytes.as_slice())
    }

    pub fn contains(&self, hash: &MessageHash) -> bool {
        self.messages.contains_key(hash)
    }

    pub fn evict(&mut self, hash: &MessageHash) {
        self.messages.remove(hash);
    }

    pub fn prune(&mut self, now: u64, retention: u64) {
        let cutoff = now.saturating_sub(retention);
        self.messages.retain(|_, m| m.received_at >= cutoff);
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}
