use serde::{Deserialize, Serialize};

use super::{SignalPhase, SimError, SimState, CONTROLLED_LANES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneCounts {
    pub queued: u32,
    /// Moving vehicles by distance to the stop line in thirds; index 0 is nearest.
    pub segments: [u32; 3],
}

/// Vehicles heading toward the intersection from the two neighbours of a phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborIncoming {
    /// `None` when the neighbour on that side is virtual.
    pub counts: [Option<u32>; 2],
}

impl NeighborIncoming {
    pub fn known_total(&self) -> u32 {
        self.counts.iter().flatten().sum()
    }

    pub fn available(&self) -> u32 {
        self.counts.iter().flatten().count() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionObservation {
    pub intersection: String,
    pub current_phase: SignalPhase,
    /// Aligned with `CONTROLLED_LANES`.
    pub lanes: [LaneCounts; 8],
    /// Indexed by canonical phase order.
    pub neighbors: [NeighborIncoming; 4],
}

impl IntersectionObservation {
    pub fn empty(intersection: impl Into<String>, current_phase: SignalPhase) -> Self {
        Self {
            intersection: intersection.into(),
            current_phase,
            lanes: [LaneCounts::default(); 8],
            neighbors: [NeighborIncoming::default(); 4],
        }
    }

    pub fn phase_lanes(&self, phase: SignalPhase) -> [&LaneCounts; 2] {
        [&self.lanes[2 * phase.index()], &self.lanes[2 * phase.index() + 1]]
    }
}

fn real_node(state: &SimState, id: &str) -> Result<usize, SimError> {
    let net = state.network();
    let node = net.node_index(id).ok_or_else(|| SimError::UnknownIntersection(id.to_string()))?;
    if net.is_virtual(node) {
        return Err(SimError::VirtualIntersection(id.to_string()));
    }
    Ok(node)
}

fn queued_on(state: &SimState, lane: usize) -> u32 {
    let limit = state.model().queue_speed;
    state.lane_vehicles(lane).filter(|v| v.speed < limit).count() as u32
}

pub fn observe(state: &SimState, id: &str) -> Result<IntersectionObservation, SimError> {
    let node = real_node(state, id)?;
    let net = state.network();
    let limit = state.model().queue_speed;
    let mut obs = IntersectionObservation::empty(id, state.program(node)?.current);
    for (k, &(d, m)) in CONTROLLED_LANES.iter().enumerate() {
        let lane = net.incoming_lane(node, d, m).expect("validated network");
        let length = net.lane_info(lane).length;
        let counts = &mut obs.lanes[k];
        for v in state.lane_vehicles(lane) {
            if v.speed < limit {
                counts.queued += 1;
            } else {
                let seg = ((length - v.position) / (length / 3.0)).floor() as usize;
                counts.segments[seg.min(2)] += 1;
            }
        }
    }
    for phase in SignalPhase::ALL {
        let mut counts = [None; 2];
        for (slot, d) in phase.approaches().into_iter().enumerate() {
            let j = net.neighbor(node, d).expect("validated network");
            if net.is_virtual(j) {
                continue;
            }
            let heading_here = net
                .incoming_lanes(j)
                .flat_map(|l| state.lane_vehicles(l))
                .filter(|v| v.next_lane().is_some_and(|nl| net.lane_info(nl).to == node))
                .count();
            counts[slot] = Some(heading_here as u32);
        }
        obs.neighbors[phase.index()] = NeighborIncoming { counts };
    }
    Ok(obs)
}

/// Queued vehicles on the road each controlled lane discharges into, aligned
/// with `CONTROLLED_LANES`. Roads into virtual intersections count 0.
pub fn downstream_queue(state: &SimState, id: &str) -> Result<[u32; 8], SimError> {
    let node = real_node(state, id)?;
    let net = state.network();
    let mut out = [0; 8];
    for (k, &(d, m)) in CONTROLLED_LANES.iter().enumerate() {
        let j = net.neighbor(node, m.exit_side(d)).expect("validated network");
        if net.is_virtual(j) {
            continue;
        }
        out[k] = net.links(node, j).iter().map(|&l| queued_on(state, l)).sum();
    }
    Ok(out)
}

/// Queued vehicles on all twelve incoming lanes.
pub fn intersection_queue(state: &SimState, id: &str) -> Result<u32, SimError> {
    let node = real_node(state, id)?;
    Ok(state.network().incoming_lanes(node).map(|l| queued_on(state, l)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_grid, FlowSpec};

    #[test]
    fn empty_observation() {
        let s = build_grid(2, 3, 300.0, &FlowSpec::default(), 0).unwrap();
        let obs = observe(&s, "intersection_2_2").unwrap();
        assert_eq!(obs.lanes, [LaneCounts::default(); 8]);
        assert_eq!(obs.current_phase, SignalPhase::Etwt);
        // North is virtual on the top row.
        let ntst = obs.neighbors[SignalPhase::Ntst.index()];
        assert_eq!(ntst.counts, [None, Some(0)]);
        assert_eq!(ntst.available(), 1);
        assert_eq!(obs.neighbors[0].available(), 2);
    }

    #[test]
    fn moving_vehicle_at_four_tenths_is_in_segment_two() {
        let mut s = build_grid(1, 1, 300.0, &FlowSpec::default(), 0).unwrap();
        s.place_vehicle(
            &["intersection_2_1->intersection_1_1:through", "intersection_1_1->intersection_0_1:exit"],
            120.0,
            11.0,
        )
        .unwrap();
        let obs = observe(&s, "intersection_1_1").unwrap();
        assert_eq!(obs.lanes[0], LaneCounts { queued: 0, segments: [0, 1, 0] });
    }

    #[test]
    fn queued_vehicles_are_not_in_segments() {
        let mut s = build_grid(1, 1, 300.0, &FlowSpec::default(), 0).unwrap();
        s.place_vehicle(
            &["intersection_1_2->intersection_1_1:left", "intersection_1_1->intersection_2_1:exit"],
            300.0,
            0.0,
        )
        .unwrap();
        let obs = observe(&s, "intersection_1_1").unwrap();
        assert_eq!(obs.lanes[6], LaneCounts { queued: 1, segments: [0; 3] });
        assert_eq!(intersection_queue(&s, "intersection_1_1").unwrap(), 1);
    }

    #[test]
    fn neighbour_incoming_counts_vehicles_routed_here() {
        let mut s = build_grid(1, 2, 300.0, &FlowSpec::default(), 0).unwrap();
        // On the western intersection, about to head east to intersection_2_1.
        s.place_vehicle(
            &[
                "intersection_0_1->intersection_1_1:through",
                "intersection_1_1->intersection_2_1:through",
                "intersection_2_1->intersection_3_1:exit",
            ],
            50.0,
            11.0,
        )
        .unwrap();
        s.place_vehicle(
            &["intersection_0_1->intersection_1_1:left", "intersection_1_1->intersection_1_2:exit"],
            40.0,
            11.0,
        )
        .unwrap();
        let obs = observe(&s, "intersection_2_1").unwrap();
        assert_eq!(obs.neighbors[0].counts, [None, Some(1)]);
        assert_eq!(obs.neighbors[0].known_total(), 1);
    }

    #[test]
    fn downstream_counts_receiving_road() {
        let mut s = build_grid(1, 2, 300.0, &FlowSpec::default(), 0).unwrap();
        s.place_vehicle(
            &["intersection_1_1->intersection_2_1:through", "intersection_2_1->intersection_3_1:exit"],
            10.0,
            0.0,
        )
        .unwrap();
        let down = downstream_queue(&s, "intersection_1_1").unwrap();
        // West-through leaves east; north-left turns east too.
        assert_eq!(down, [0, 1, 0, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn virtual_or_unknown_ids_are_rejected() {
        let s = build_grid(1, 1, 300.0, &FlowSpec::default(), 0).unwrap();
        assert!(matches!(observe(&s, "nope"), Err(SimError::UnknownIntersection(_))));
        assert!(matches!(observe(&s, "intersection_0_1"), Err(SimError::VirtualIntersection(_))));
    }
}
