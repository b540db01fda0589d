use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DetectionEvent, EvidenceStore};
use crate::codec::StationId;
use crate::digest::{hex_byte_list, MessageHash};

/// Events against one suspect with the signed messages backing them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisbehaviorReport {
    pub reporter: StationId,
    pub suspect: StationId,
    pub events: Vec<DetectionEvent>,
    /// Wire bytes of every referenced message, in first-reference order.
    #[serde(with = "hex_byte_list")]
    pub included_messages: Vec<Vec<u8>>,
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ReportError {
    #[error("message {0} is not in the evidence store")]
    MissingEvidence(MessageHash),
    #[error("a report needs at least one event")]
    Empty,
    #[error("events name more than one suspect")]
    MixedSuspects,
}

pub fn generate_report(
    reporter: StationId,
    events: &[DetectionEvent],
    store: &EvidenceStore,
    now: u64,
) -> Result<MisbehaviorReport, ReportError> {
    let first = events.first().ok_or(ReportError::Empty)?;
    if events.iter().any(|e| e.suspect != first.suspect) {
        return Err(ReportError::MixedSuspects);
    }
    let mut hashes: Vec<MessageHash> = Vec::new();
    for e in events {
        for h in e.message_hashes() {
            if !hashes.contains(&h) {
                hashes.push(h);
            }
        }
    }
    let included_messages = hashes
        .iter()
        .map(|h| {
            store
                .get(h)
                .map(<[u8]>::to_vec)
                .ok_or(ReportError::MissingEvidence(*h))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MisbehaviorReport {
        reporter,
        suspect: first.suspect,
        events: events.to_vec(),
        included_messages,
        created_at: now,
    })
}
