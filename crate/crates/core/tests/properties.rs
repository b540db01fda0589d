mod common;

use std::collections::BTreeSet;
use std::io::BufReader;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mscs_core::attacks::AttackId;
use mscs_core::codec::{decode, encode, MscmType};
use mscs_core::detection::{check_overlap, DetectorId, Evidence, MessageRef};
use mscs_core::digest::message_hash;
use mscs_core::geometry::RoadFrame;
use mscs_core::protocol::{CastMode, PhaseKind};
use mscs_core::sim::{
    compute_metrics, reference_scenario, run, AttributedAction, Channel, Event, EventKind,
    EventLog, ScenarioConfig,
};
use mscs_core::{LongTermId, StationId};

use common::{grid_pairs, is_active, lattice_maneuver, random_mscm, random_trace, unanimous};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn valid_messages_round_trip(seed in any::<u64>()) {
        let m = random_mscm(&mut rng(seed));
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..2048)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn mutated_messages_never_panic(seed in any::<u64>(), flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..8), cut in any::<usize>()) {
        let mut bytes = encode(&random_mscm(&mut rng(seed))).unwrap();
        for (at, x) in flips {
            let n = bytes.len();
            bytes[at % n] ^= x;
        }
        let _ = decode(&bytes);
        bytes.truncate(cut % (bytes.len() + 1));
        let _ = decode(&bytes);
    }

    #[test]
    fn sessions_follow_the_phase_dag(seed in any::<u64>(), len in 1usize..40) {
        let trace = random_trace(&mut rng(seed), len);
        for (from, to) in &trace.steps {
            prop_assert!(from.can_transition(*to), "{:?} -> {:?}", from, to);
        }
        let terminal = trace.phases.iter().position(|p| p.is_terminal());
        if let Some(i) = terminal {
            prop_assert_eq!(i, trace.phases.len() - 1);
        }
        if trace.disagreed_while_awaiting {
            prop_assert_eq!(trace.final_state.phase.kind(), PhaseKind::Rejected);
            prop_assert!(!trace.phases.contains(&PhaseKind::Active));
        }
        for s in trace.states.iter().filter(|s| is_active(s)) {
            prop_assert!(unanimous(s));
        }
    }

    #[test]
    fn overlap_matches_grid_oracle(seed in any::<u64>()) {
        let m = lattice_maneuver(&mut rng(seed));
        prop_assert_eq!(check_overlap(&m, &RoadFrame::default()), grid_pairs(&m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn channel_drops_at_the_configured_rate(p in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut ch = Channel::new(p, 1, rng(seed));
        let recipients: BTreeSet<LongTermId> = (1..=10).map(LongTermId).collect();
        let (mut delivered, mut dropped) = (0usize, 0usize);
        for tick in 0..2_000 {
            let m = ch.send(tick, LongTermId(0), StationId(1), message_hash(&[]), Vec::new(), CastMode::Broadcast, &recipients);
            delivered += m.delivered.len();
            dropped += m.dropped.len();
        }
        let rate = dropped as f64 / (delivered + dropped) as f64;
        prop_assert!((rate - p).abs() <= 0.02, "rate {} for p {}", rate, p);
    }
}

fn short(seed: u64, attack: Option<AttackId>) -> ScenarioConfig {
    let mut c = reference_scenario(seed, attack);
    c.duration_ms = 30_000;
    c
}

#[test]
fn vehicle_order_in_config_does_not_matter() {
    for (seed, attack) in [(1, None), (2, Some(AttackId::A4)), (3, Some(AttackId::A3))] {
        let c = short(seed, attack);
        let mut reversed = c.clone();
        reversed.vehicles.reverse();
        assert_eq!(
            run(&c).unwrap().digest(),
            run(&reversed).unwrap().digest(),
            "seed {seed}"
        );
    }
}

#[test]
fn replayed_log_gives_the_same_metrics() {
    for attack in [
        None,
        Some(AttackId::A1),
        Some(AttackId::A9),
        Some(AttackId::A11),
    ] {
        let out = run(&short(7, attack)).unwrap();
        let mut buf = Vec::new();
        out.log.write_jsonl(&mut buf).unwrap();
        let back = EventLog::read_jsonl(BufReader::new(&buf[..])).unwrap();
        assert_eq!(back, out.log);
        assert_eq!(
            compute_metrics(&back, &out.attribution).unwrap(),
            out.metrics
        );
    }
}

#[test]
fn undecodable_evidence_is_reproducible_from_logged_bytes() {
    for attack in [AttackId::A1, AttackId::A2] {
        let out = run(&short(4, Some(attack))).unwrap();
        let mut checked = 0;
        for (_, d) in out.log.detections() {
            let (Evidence::Undecodable { error }, MessageRef::Message { hash }) =
                (&d.event.evidence, &d.event.message_ref)
            else {
                continue;
            };
            let sent = out
                .log
                .iter()
                .find_map(|r| match &r.event {
                    Event::MsgSent(m) if m.hash == *hash => Some(m),
                    _ => None,
                })
                .expect("flagged message was logged");
            assert_eq!(decode(&sent.bytes).unwrap_err(), *error);
            checked += 1;
        }
        assert!(checked > 0, "{attack}");
    }
}

#[test]
fn silent_attacker_still_beacons_but_never_answers() {
    let out = run(&short(2, Some(AttackId::A9))).unwrap();
    let attacker: BTreeSet<StationId> = out
        .attribution
        .owners
        .iter()
        .filter(|(_, o)| *o == LongTermId(4))
        .map(|(s, _)| *s)
        .collect();
    let sent = || {
        out.log
            .of_kind(EventKind::MsgSent)
            .filter_map(|r| match &r.event {
                Event::MsgSent(m) if attacker.contains(&m.sender) => Some(m),
                _ => None,
            })
    };
    assert!(sent().any(|m| m.msg_type.is_none()));
    assert!(out
        .metrics
        .attack(AttackId::A9)
        .unwrap()
        .flagged_by(DetectorId::D8));
    let silenced: BTreeSet<u64> = out
        .attribution
        .records
        .iter()
        .filter_map(|r| match r.action {
            AttributedAction::Suppressed { maneuver_id } => Some(maneuver_id),
            _ => None,
        })
        .collect();
    assert!(!silenced.is_empty());
    assert!(sent()
        .filter(|m| m.msg_type == Some(MscmType::Response))
        .all(|m| !silenced.contains(&m.maneuver_id.unwrap())));
}

#[test]
fn overall_rating_is_symmetric_and_total() {
    use mscs_core::risk::{overall_rating, CriterionRating};
    let all = CriterionRating::ALL;
    for &r in &all {
        for &i in &all {
            for &s in &all {
                let o = overall_rating(r, i, s);
                for p in [(r, s, i), (i, r, s), (i, s, r), (s, r, i), (s, i, r)] {
                    assert_eq!(overall_rating(p.0, p.1, p.2), o);
                }
                let distinct: BTreeSet<_> = [r, i, s].into_iter().collect();
                match distinct.len() {
                    3 => assert_eq!(o, CriterionRating::Medium),
                    1 => assert_eq!(o, r),
                    _ => assert_eq!([r, i, s].iter().filter(|&&x| x == o).count(), 2),
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn audit_ignores_row_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use mscs_core::risk::audit_catalog;
        let cat = mscs_core::attacks::catalog();
        let mut shuffled = cat.clone();
        shuffled.shuffle(&mut rng(seed));
        let a = audit_catalog(&cat).unwrap();
        prop_assert_eq!(&audit_catalog(&shuffled).unwrap(), &a);
        prop_assert_eq!(audit_catalog(&cat).unwrap(), a);
    }
}
