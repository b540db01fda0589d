use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::StationId;
use crate::digest::MessageHash;
use crate::identity::{CredentialDirectory, LongTermId};
use crate::protocol::CastMode;
use crate::world::World;

/// Stations that hear a transmission by `sender`. Positions are taken in the
/// road plane: `s` along the road and the lane-center offset across it.
/// Groupcast reaches stations within `range · power` whose bearing from the
/// sender lies inside the beam.
pub fn resolve_recipients(
    mode: &CastMode,
    world: &World,
    directory: &CredentialDirectory,
    sender: LongTermId,
    range_m: f64,
) -> BTreeSet<LongTermId> {
    let Some(me) = world.vehicle(sender) else {
        return BTreeSet::new();
    };
    let origin = me.position(&world.map);
    let offset = |id: LongTermId| {
        world.vehicle(id).map(|v| {
            let (x, y) = v.position(&world.map);
            (x - origin.0, y - origin.1)
        })
    };
    let within =
        |id: LongTermId, reach: f64| offset(id).is_some_and(|(dx, dy)| dx.hypot(dy) <= reach);
    let others = world.vehicles.keys().copied().filter(|&id| id != sender);
    match *mode {
        CastMode::Unicast { target } => directory
            .owner_of(target)
            .filter(|&owner| owner != sender && within(owner, range_m))
            .into_iter()
            .collect(),
        CastMode::Broadcast => others.filter(|&id| within(id, range_m)).collect(),
        CastMode::Groupcast {
            beam_center,
            beam_width,
            power,
        } => {
            let reach = range_m * power.clamp(0.0, 1.0);
            others
                .filter(|&id| {
                    let Some((dx, dy)) = offset(id) else {
                        return false;
                    };
                    if dx.hypot(dy) > reach {
                        return false;
                    }
                    angle_between(dy.atan2(dx), beam_center) <= beam_width / 2.0 + 1e-12
                })
                .collect()
        }
    }
}

/// Absolute difference of two bearings, in `[0, π]`.
fn angle_between(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        TAU - d
    } else {
        d
    }
}

#[derive(Clone, Debug)]
pub struct InFlight {
    pub seq: u64,
    pub send_tick: u64,
    pub deliver_tick: u64,
    pub transmitter: LongTermId,
    pub sender: StationId,
    pub hash: MessageHash,
    pub bytes: Vec<u8>,
    pub mode: CastMode,
    /// Recipients that will receive the bytes.
    pub delivered: Vec<LongTermId>,
    pub dropped: Vec<LongTermId>,
}

/// Lossy fixed-latency medium. Drop decisions are drawn when a message is
/// sent, one per recipient in ascending id order.
#[derive(Debug)]
pub struct Channel {
    loss_prob: f64,
    latency_ticks: u64,
    rng: ChaCha8Rng,
    in_flight: Vec<InFlight>,
    next_seq: u64,
}

impl Channel {
    pub fn new(loss_prob: f64, latency_ticks: u64, rng: ChaCha8Rng) -> Self {
        Channel {
            loss_prob,
            latency_ticks: latency_ticks.max(1),
            rng,
            in_flight: Vec::new(),
            next_seq: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn send(
        &mut self,
        tick: u64,
        transmitter: LongTermId,
        sender: StationId,
        hash: MessageHash,
        bytes: Vec<u8>,
        mode: CastMode,
        recipients: &BTreeSet<LongTermId>,
    ) -> &InFlight {
        let mut delivered = Vec::new();
        let mut dropped = Vec::new();
        for &r in recipients {
            let lost = self.loss_prob > 0.0 && self.rng.random::<f64>() < self.loss_prob;
            if lost {
                dropped.push(r);
            } else {
                delivered.push(r);
            }
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.in_flight.push(InFlight {
            seq,
            send_tick: tick,
            deliver_tick: tick + self.latency_ticks,
            transmitter,
            sender,
            hash,
            bytes,
            mode,
            delivered,
            dropped,
        });
        self.in_flight.last().expect("just pushed")
    }

    /// Messages due at `tick`, in send order.
    pub fn take_due(&mut self, tick: u64) -> Vec<InFlight> {
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.in_flight)
            .into_iter()
            .partition(|m| m.deliver_tick <= tick);
        self.in_flight = rest;
        due
    }
}
