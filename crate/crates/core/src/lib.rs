//! Core of the multi-vehicle maneuver coordination security harness.

pub mod attacks;
pub mod codec;
pub mod detection;
pub mod digest;
pub mod geometry;
pub mod identity;
pub mod protocol;
pub mod risk;
pub mod sim;
pub mod world;

pub use codec::{Maneuver, Mscm, MscmType, StationId, SubManeuver};
pub use identity::{LongTermId, PseudonymCredential, SignatureEnvelope};
