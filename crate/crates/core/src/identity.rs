//! Pseudonym credentials and message authentication.
//!
//! Signing is modeled with a keyed 128-bit digest (SipHash-2-4) rather than
//! certificate-based signatures. The harness holds every credential in a
//! [`CredentialDirectory`]; a party can only produce a verifying envelope for
//! a station id whose secret it owns.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;

use serde::{Deserialize, Serialize};
use siphasher::sip128::{Hasher128, SipHasher24};
use thiserror::Error;

use crate::codec::StationId;

pub const TAG_LEN: usize = 16;

/// Ground-truth identity of a physical station. Never transmitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LongTermId(pub u32);

/// Optional capability attestation a credential may carry. No detector reads
/// it by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub has_camera: bool,
    pub has_map: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudonymCredential {
    pub station_id: StationId,
    #[serde(with = "hex_key")]
    pub secret: [u8; 16],
    pub owner: LongTermId,
    pub valid_from: u64,
    pub valid_to: u64,
    #[serde(default)]
    pub is_special: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Capabilities>,
}

impl PseudonymCredential {
    pub fn is_valid_at(&self, now: u64) -> bool {
        self.valid_from <= now && now <= self.valid_to
    }
}

mod hex_key {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        let text: String = key.iter().map(|b| format!("{b:02x}")).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let text = String::deserialize(d)?;
        if text.len() != 32 || !text.is_ascii() {
            return Err(D::Error::custom("secret must be 32 hex digits"));
        }
        let mut key = [0u8; 16];
        for (i, byte) in key.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&text[2 * i..2 * i + 2], 16).map_err(D::Error::custom)?;
        }
        Ok(key)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignatureEnvelope {
    pub signer_id: StationId,
    pub tag: [u8; TAG_LEN],
}

impl SignatureEnvelope {
    /// Placeholder carried by a message before it is signed.
    pub fn unsigned(signer_id: StationId) -> Self {
        SignatureEnvelope {
            signer_id,
            tag: [0; TAG_LEN],
        }
    }
}

/// Produces authentication tags. The default scheme is keyed SipHash; another
/// scheme only has to be deterministic in `(secret, payload)`.
pub trait TagScheme {
    fn tag(&self, secret: &[u8; 16], payload: &[u8]) -> [u8; TAG_LEN];
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KeyedSipHash;

impl TagScheme for KeyedSipHash {
    fn tag(&self, secret: &[u8; 16], payload: &[u8]) -> [u8; TAG_LEN] {
        let mut h = SipHasher24::new_with_key(secret);
        h.write(payload);
        h.finish128().as_bytes()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum SignError {
    #[error("credential for {station} is not valid at {now} ms")]
    ExpiredCredential { station: StationId, now: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    UnknownSigner,
    BadTag,
    Expired,
    Revoked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(self) -> bool {
        self == Verdict::Accept
    }
}

pub fn sign(
    payload: &[u8],
    cred: &PseudonymCredential,
    now: u64,
) -> Result<SignatureEnvelope, SignError> {
    sign_with(&KeyedSipHash, payload, cred, now)
}

pub fn sign_with<S: TagScheme>(
    scheme: &S,
    payload: &[u8],
    cred: &PseudonymCredential,
    now: u64,
) -> Result<SignatureEnvelope, SignError> {
    if !cred.is_valid_at(now) {
        return Err(SignError::ExpiredCredential {
            station: cred.station_id,
            now,
        });
    }
    Ok(SignatureEnvelope {
        signer_id: cred.station_id,
        tag: scheme.tag(&cred.secret, payload),
    })
}

pub fn verify(
    env: &SignatureEnvelope,
    payload: &[u8],
    store: &CredentialDirectory,
    crl: &RevocationList,
    now: u64,
) -> Verdict {
    verify_with(&KeyedSipHash, env, payload, store, crl, now)
}

pub fn verify_with<S: TagScheme>(
    scheme: &S,
    env: &SignatureEnvelope,
    payload: &[u8],
    store: &CredentialDirectory,
    crl: &RevocationList,
    now: u64,
) -> Verdict {
    let Some(cred) = store.get(env.signer_id) else {
        return Verdict::Reject(RejectReason::UnknownSigner);
    };
    if crl.contains(env.signer_id) {
        return Verdict::Reject(RejectReason::Revoked);
    }
    if !cred.is_valid_at(now) {
        return Verdict::Reject(RejectReason::Expired);
    }
    if scheme.tag(&cred.secret, payload) != env.tag {
        return Verdict::Reject(RejectReason::BadTag);
    }
    Verdict::Accept
}

/// All credentials known to the public-key infrastructure stand-in.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialDirectory {
    credentials: BTreeMap<StationId, PseudonymCredential>,
}

impl CredentialDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cred: PseudonymCredential) -> Option<PseudonymCredential> {
        self.credentials.insert(cred.station_id, cred)
    }

    pub fn get(&self, id: StationId) -> Option<&PseudonymCredential> {
        self.credentials.get(&id)
    }

    pub fn owner_of(&self, id: StationId) -> Option<LongTermId> {
        self.get(id).map(|c| c.owner)
    }

    pub fn is_special(&self, id: StationId) -> bool {
        self.get(id).is_some_and(|c| c.is_special)
    }

    pub fn credentials_of(&self, owner: LongTermId) -> impl Iterator<Item = &PseudonymCredential> {
        self.credentials.values().filter(move |c| c.owner == owner)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PseudonymCredential> {
        self.credentials.values()
    }

    pub fn len(&self) -> usize {
        self.credentials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.credentials.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationList {
    revoked: BTreeSet<StationId>,
}

impl RevocationList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the list with `id` added. Revoking twice is a no-op.
    pub fn revoke(mut self, id: StationId) -> Self {
        self.revoked.insert(id);
        self
    }

    pub fn contains(&self, id: StationId) -> bool {
        self.revoked.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = StationId> + '_ {
        self.revoked.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.revoked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.revoked.is_empty()
    }
}

/// Deterministic per-station secret for generated scenarios.
pub fn derive_secret(seed_material: u64, station: StationId) -> [u8; 16] {
    let mut key = [0u8; 16];
    key[..8].copy_from_slice(&seed_material.to_le_bytes());
    key[8..12].copy_from_slice(b"mscs");
    let mut h = SipHasher24::new_with_key(&key);
    h.write(&station.0.to_le_bytes());
    h.finish128().as_bytes()
}
