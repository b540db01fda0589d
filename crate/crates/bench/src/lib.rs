//! Fixtures shared by the benchmarks under `benches/`.

use mscs_core::codec::{SubManeuverStatus, TargetRoadResource};
use mscs_core::{Maneuver, Mscm, MscmType, StationId, SubManeuver};

/// A request with `n` sub-maneuvers staggered along three lanes, none
/// overlapping.
pub fn request(n: usize) -> Mscm {
    let subs: Vec<SubManeuver> = (0..n)
        .map(|i| SubManeuver {
            executant_id: StationId(100 + (i % 5) as u32),
            current_status: SubManeuverStatus::Proposed,
            trr: TargetRoadResource::lane_segment(
                (i % 3) as i8,
                50.0 * i as f64,
                50.0 * i as f64 + 30.0,
            ),
            start_time: 20_500 + 100 * i as u64,
            end_time: 22_000 + 100 * i as u64,
            min_speed: 90.0,
            max_speed: 110.0,
            executant_width: 1.8,
            executant_length: 4.5,
        })
        .collect();
    let mut m = Mscm::bare(MscmType::Request, StationId(1), 20_000, 42);
    m.destination_ids = (100..105).map(StationId).collect();
    m.executant_ids = Some(m.destination_ids.clone());
    m.maneuver = Some(Maneuver::new(subs));
    m
}
