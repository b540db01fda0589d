use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::AttackId;
use crate::codec::{decode, StationId};
use crate::detection::DetectorId;
use crate::digest::MessageHash;
use crate::identity::LongTermId;

use super::log::{AttributedAction, AttributionLog, Event, EventLog, Payload};

/// How per-attack recall is aggregated over repeated runs.
pub const RECALL_CONVENTION: &str =
    "an attack counts as detected in a run when any honest station flags a pseudonym of its attacker; recall = detected runs / runs";

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("attribution log does not match the event log: {0}")]
    LogMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstFlag {
    pub time_ms: u64,
    pub observer: LongTermId,
    pub suspect: StationId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub attack: AttackId,
    pub attacker: LongTermId,
    pub first_emission_ms: Option<u64>,
    pub malicious_emissions: usize,
    pub detected: bool,
    /// Honest stations that flagged any pseudonym of the attacker.
    pub flagging_stations: Vec<LongTermId>,
    pub flagged_pseudonyms: Vec<StationId>,
    /// Earliest event against the attacker, per detector.
    pub first_by_detector: BTreeMap<DetectorId, FirstFlag>,
    /// From the first malicious emission to the first event naming the attacker.
    pub detection_latency_ms: Option<u64>,
    pub mapped_detectors: Vec<DetectorId>,
    /// Same, restricted to the detectors mapped to this attack.
    pub mapped_latency_ms: Option<u64>,
}

impl AttackMetrics {
    pub fn flagged_by(&self, d: DetectorId) -> bool {
        self.first_by_detector.contains_key(&d)
    }

    /// Latency of detector `d` relative to the first malicious emission.
    pub fn latency_of(&self, d: DetectorId) -> Option<u64> {
        let f = self.first_by_detector.get(&d)?;
        Some(f.time_ms.saturating_sub(self.first_emission_ms?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub messages_sent: usize,
    pub beacons_sent: usize,
    pub maneuver_messages_sent: usize,
    pub deliveries: usize,
    pub drops: usize,
}

impl ChannelStats {
    pub fn drop_rate(&self) -> f64 {
        let total = self.deliveries + self.drops;
        if total == 0 {
            0.0
        } else {
            self.drops as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub recall_convention: String,
    pub attacks: Vec<AttackMetrics>,
    /// Events naming a pseudonym of a vehicle that runs no attack.
    pub false_positives: BTreeMap<DetectorId, usize>,
    pub false_positive_total: usize,
    pub detections: usize,
    pub reports: usize,
    pub channel: ChannelStats,
    /// Decoding cost per receiving vehicle: one unit per maneuver message plus
    /// one per sub-maneuver it carries.
    pub processing_cost: BTreeMap<LongTermId, u64>,
    pub processing_cost_total: u64,
}

impl RunMetrics {
    pub fn attack(&self, id: AttackId) -> Option<&AttackMetrics> {
        self.attacks.iter().find(|a| a.attack == id)
    }
}

pub fn compute_metrics(
    log: &EventLog,
    attribution: &AttributionLog,
) -> Result<RunMetrics, MetricsError> {
    let owners: BTreeMap<StationId, LongTermId> = attribution.owners.iter().copied().collect();
    let attackers: BTreeSet<LongTermId> = attribution.attacks.iter().map(|a| a.attacker).collect();

    let mut sent: BTreeMap<MessageHash, (StationId, u64)> = BTreeMap::new();
    let mut cost_of: BTreeMap<MessageHash, u64> = BTreeMap::new();
    let mut channel = ChannelStats::default();
    let mut processing_cost: BTreeMap<LongTermId, u64> = BTreeMap::new();
    let mut detections = 0;
    let mut reports = 0;
    let mut sent_records = 0usize;

    for r in log.iter() {
        match &r.event {
            Event::MsgSent(m) => {
                sent_records += 1;
                channel.messages_sent += 1;
                match m.payload {
                    Payload::Bsm => channel.beacons_sent += 1,
                    Payload::Mscm => {
                        channel.maneuver_messages_sent += 1;
                        let subs = decode(&m.bytes)
                            .ok()
                            .and_then(|msg| msg.maneuver.map(|mv| mv.sub_maneuvers.len() as u64))
                            .unwrap_or(0);
                        cost_of.insert(m.hash, 1 + subs);
                    }
                }
                sent.entry(m.hash).or_insert((m.sender, r.time_ms));
            }
            Event::MsgDelivered(d) => {
                channel.deliveries += d.recipients.len();
                if let Some(&c) = cost_of.get(&d.hash) {
                    for v in &d.recipients {
                        *processing_cost.entry(*v).or_default() += c;
                    }
                }
            }
            Event::MsgDropped(d) => channel.drops += d.recipients.len(),
            Event::Detection(_) => detections += 1,
            Event::Report(_) => reports += 1,
            Event::SessionTransition(_) | Event::Kinematics(_) => {}
        }
    }

    let emissions = attribution
        .records
        .iter()
        .filter(|r| matches!(r.action, AttributedAction::Sent { .. }))
        .count();
    if emissions != sent_records {
        return Err(MetricsError::LogMismatch(format!(
            "{emissions} attributed transmissions, {sent_records} sent records"
        )));
    }
    for rec in &attribution.records {
        if let AttributedAction::Sent { hash, station } = rec.action {
            match sent.get(&hash) {
                Some((s, _)) if *s == station => {}
                _ => {
                    return Err(MetricsError::LogMismatch(format!(
                        "message {hash} from {station} was never sent"
                    )))
                }
            }
            if owners.get(&station) != Some(&rec.owner) {
                return Err(MetricsError::LogMismatch(format!(
                    "station {station} is not owned by {}",
                    rec.owner.0
                )));
            }
        }
    }

    let mut false_positives: BTreeMap<DetectorId, usize> = BTreeMap::new();
    let mut attacks = Vec::new();
    for entry in dedup_entries(attribution) {
        let malicious: Vec<u64> = attribution
            .records
            .iter()
            .filter(|r| r.attack == Some(entry.attack) && r.owner == entry.attacker)
            .map(|r| r.time_ms)
            .collect();
        let first_emission_ms = malicious.iter().copied().min();
        let mapped_detectors = DetectorId::mapped_to(entry.attack);
        let mut first_by_detector: BTreeMap<DetectorId, FirstFlag> = BTreeMap::new();
        let mut flagging = BTreeSet::new();
        let mut pseudonyms = BTreeSet::new();
        for (r, d) in log.detections() {
            if attackers.contains(&d.observer)
                || owners.get(&d.event.suspect) != Some(&entry.attacker)
            {
                continue;
            }
            flagging.insert(d.observer);
            pseudonyms.insert(d.event.suspect);
            first_by_detector
                .entry(d.event.detector)
                .or_insert(FirstFlag {
                    time_ms: r.time_ms,
                    observer: d.observer,
                    suspect: d.event.suspect,
                });
        }
        let latency = |pick: &dyn Fn(&DetectorId) -> bool| {
            let first = first_by_detector
                .iter()
                .filter(|(d, _)| pick(d))
                .map(|(_, f)| f.time_ms)
                .min()?;
            Some(first.saturating_sub(first_emission_ms?))
        };
        let detection_latency_ms = latency(&|_| true);
        let mapped_latency_ms = latency(&|d| mapped_detectors.contains(d));
        attacks.push(AttackMetrics {
            attack: entry.attack,
            attacker: entry.attacker,
            first_emission_ms,
            malicious_emissions: malicious.len(),
            detected: !flagging.is_empty(),
            flagging_stations: flagging.into_iter().collect(),
            flagged_pseudonyms: pseudonyms.into_iter().collect(),
            first_by_detector,
            detection_latency_ms,
            mapped_detectors,
            mapped_latency_ms,
        });
    }
    for (_, d) in log.detections() {
        let suspect_owner = owners.get(&d.event.suspect);
        if !suspect_owner.is_some_and(|o| attackers.contains(o)) {
            *false_positives.entry(d.event.detector).or_default() += 1;
        }
    }

    Ok(RunMetrics {
        recall_convention: RECALL_CONVENTION.to_string(),
        attacks,
        false_positive_total: false_positives.values().sum(),
        false_positives,
        detections,
        reports,
        channel,
        processing_cost_total: processing_cost.values().sum(),
        processing_cost,
    })
}

fn dedup_entries(attribution: &AttributionLog) -> Vec<super::log::AttackEntry> {
    let mut out: Vec<super::log::AttackEntry> = Vec::new();
    for e in &attribution.attacks {
        if !out.contains(e) {
            out.push(*e);
        }
    }
    out
}

impl fmt::Display for RunMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let c = &self.channel;
        let _ = writeln!(
            out,
            "channel: {} sent ({} beacons, {} maneuver), {} delivered, {} dropped ({:.3})",
            c.messages_sent,
            c.beacons_sent,
            c.maneuver_messages_sent,
            c.deliveries,
            c.drops,
            c.drop_rate()
        );
        let _ = writeln!(
            out,
            "detections: {}, reports: {}",
            self.detections, self.reports
        );
        let _ = writeln!(out, "processing cost: {}", self.processing_cost_total);
        for a in &self.attacks {
            let by: Vec<String> = a.first_by_detector.keys().map(|d| d.to_string()).collect();
            let _ = writeln!(
                out,
                "{} by vehicle {}: {} (detectors: {}; latency {})",
                a.attack,
                a.attacker.0,
                if a.detected {
                    "detected"
                } else {
                    "not detected"
                },
                if by.is_empty() {
                    "-".to_string()
                } else {
                    by.join(",")
                },
                a.detection_latency_ms
                    .map_or("-".to_string(), |l| format!("{l} ms")),
            );
        }
        let _ = write!(out, "false positives: {}", self.false_positive_total);
        f.write_str(&out)
    }
}
