use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Direction, Movement, SimError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "virtual")]
    pub is_virtual: bool,
}

/// A single lane. `approach` is the side of `to` the lane arrives on and
/// `movement` is the turn it serves there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    pub from: String,
    pub to: String,
    pub approach: Direction,
    pub movement: Movement,
    pub length: f64,
}

/// Resolved lane with node indices.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LaneInfo {
    pub from: usize,
    pub to: usize,
    pub approach: Direction,
    pub movement: Movement,
    pub length: f64,
}

/// Validated road network.
///
/// Every real intersection has 12 incoming lanes (4 approaches x 3 movements)
/// and an outgoing road toward each of its 4 neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    intersections: Vec<Intersection>,
    lanes: Vec<Lane>,
    info: Vec<LaneInfo>,
    node_index: HashMap<String, usize>,
    lane_index: HashMap<String, usize>,
    /// Real intersections in id order.
    real: Vec<usize>,
    /// Per node, incoming lane by `[approach][movement]` (real nodes only).
    incoming: Vec<Option<[[usize; 3]; 4]>>,
    /// Per node, neighbour by direction (real nodes only).
    neighbors: Vec<[Option<usize>; 4]>,
    /// Lanes from one node to another.
    links: BTreeMap<(usize, usize), Vec<usize>>,
}

impl RoadNetwork {
    pub fn new(intersections: Vec<Intersection>, lanes: Vec<Lane>) -> Result<Self, SimError> {
        let mut node_index = HashMap::new();
        for (i, n) in intersections.iter().enumerate() {
            if node_index.insert(n.id.clone(), i).is_some() {
                return Err(SimError::InvalidNetwork(format!("duplicate intersection {}", n.id)));
            }
        }
        let mut lane_index = HashMap::new();
        let mut info = Vec::with_capacity(lanes.len());
        let mut incoming: Vec<Option<[[usize; 3]; 4]>> = vec![None; intersections.len()];
        let mut partial: Vec<[[Option<usize>; 3]; 4]> = vec![[[None; 3]; 4]; intersections.len()];
        let mut links: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut approach_from: Vec<[Option<usize>; 4]> = vec![[None; 4]; intersections.len()];

        for (li, lane) in lanes.iter().enumerate() {
            if lane_index.insert(lane.id.clone(), li).is_some() {
                return Err(SimError::InvalidNetwork(format!("duplicate lane {}", lane.id)));
            }
            let lookup = |id: &str| {
                node_index.get(id).copied().ok_or_else(|| {
                    SimError::InvalidNetwork(format!("lane {} references unknown intersection {id}", lane.id))
                })
            };
            let (from, to) = (lookup(&lane.from)?, lookup(&lane.to)?);
            if from == to {
                return Err(SimError::InvalidNetwork(format!("lane {} is a self loop", lane.id)));
            }
            if !(lane.length > 0.0 && lane.length.is_finite()) {
                return Err(SimError::InvalidNetwork(format!("lane {} has length {}", lane.id, lane.length)));
            }
            match approach_from[to][lane.approach.index()] {
                Some(prev) if prev != from => {
                    return Err(SimError::InvalidNetwork(format!(
                        "intersection {} has two different {:?} neighbours",
                        lane.to, lane.approach
                    )))
                }
                _ => approach_from[to][lane.approach.index()] = Some(from),
            }
            if !intersections[to].is_virtual {
                let slot = &mut partial[to][lane.approach.index()][lane.movement.index()];
                if slot.is_some() {
                    return Err(SimError::InvalidNetwork(format!(
                        "intersection {} has two {:?} {:?} lanes",
                        lane.to, lane.approach, lane.movement
                    )));
                }
                *slot = Some(li);
            }
            links.entry((from, to)).or_default().push(li);
            info.push(LaneInfo { from, to, approach: lane.approach, movement: lane.movement, length: lane.length });
        }

        let mut real: Vec<usize> = (0..intersections.len()).filter(|&i| !intersections[i].is_virtual).collect();
        real.sort_by(|&a, &b| intersections[a].id.cmp(&intersections[b].id));
        let mut neighbors = vec![[None; 4]; intersections.len()];
        for &n in &real {
            let id = &intersections[n].id;
            let mut full = [[0usize; 3]; 4];
            for d in Direction::ALL {
                for m in Movement::ALL {
                    full[d.index()][m.index()] = partial[n][d.index()][m.index()].ok_or_else(|| {
                        SimError::InvalidNetwork(format!("intersection {id} lacks a {d:?} {m:?} incoming lane"))
                    })?;
                }
                neighbors[n][d.index()] = approach_from[n][d.index()];
            }
            incoming[n] = Some(full);
        }
        for &n in &real {
            for d in Direction::ALL {
                let j = neighbors[n][d.index()].expect("all approaches present");
                if !links.contains_key(&(n, j)) {
                    return Err(SimError::InvalidNetwork(format!(
                        "no road from {} back to its {:?} neighbour {}",
                        intersections[n].id, d, intersections[j].id
                    )));
                }
                if !intersections[j].is_virtual && neighbors[j][d.opposite().index()] != Some(n) {
                    return Err(SimError::InvalidNetwork(format!(
                        "adjacency between {} and {} is not symmetric",
                        intersections[n].id, intersections[j].id
                    )));
                }
            }
        }

        Ok(Self { intersections, lanes, info, node_index, lane_index, real, incoming, neighbors, links })
    }

    /// Grid of `rows x cols` real intersections ringed by virtual boundary nodes.
    ///
    /// Nodes are named `intersection_{x}_{y}` with real nodes at
    /// `1..=cols` x `1..=rows`; `y` grows northward.
    pub fn grid(rows: usize, cols: usize, lane_length: f64) -> Result<Self, SimError> {
        if rows == 0 || cols == 0 {
            return Err(SimError::InvalidNetwork(format!("grid {rows}x{cols} has no intersections")));
        }
        if !(lane_length > 0.0) {
            return Err(SimError::InvalidNetwork(format!("lane length {lane_length}")));
        }
        let name = |x: i64, y: i64| format!("intersection_{x}_{y}");
        let is_real = |x: i64, y: i64| (1..=cols as i64).contains(&x) && (1..=rows as i64).contains(&y);
        let mut intersections = Vec::new();
        for y in 0..=rows as i64 + 1 {
            for x in 0..=cols as i64 + 1 {
                let corner = (x == 0 || x == cols as i64 + 1) && (y == 0 || y == rows as i64 + 1);
                if corner {
                    continue;
                }
                intersections.push(Intersection {
                    id: name(x, y),
                    x: x as f64 * lane_length,
                    y: y as f64 * lane_length,
                    is_virtual: !is_real(x, y),
                });
            }
        }
        let mut lanes = Vec::new();
        for y in 1..=rows as i64 {
            for x in 1..=cols as i64 {
                let here = name(x, y);
                for d in Direction::ALL {
                    let (dx, dy) = d.offset();
                    let (nx, ny) = (x + dx, y + dy);
                    let there = name(nx, ny);
                    for m in Movement::ALL {
                        lanes.push(Lane {
                            id: format!("{there}->{here}:{}", movement_tag(m)),
                            from: there.clone(),
                            to: here.clone(),
                            approach: d,
                            movement: m,
                            length: lane_length,
                        });
                    }
                    if !is_real(nx, ny) {
                        lanes.push(Lane {
                            id: format!("{here}->{there}:exit"),
                            from: here.clone(),
                            to: there,
                            approach: d.opposite(),
                            movement: Movement::Through,
                            length: lane_length,
                        });
                    }
                }
            }
        }
        Self::new(intersections, lanes)
    }

    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub(crate) fn lane_info(&self, lane: usize) -> &LaneInfo {
        &self.info[lane]
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.len()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn lane_index(&self, id: &str) -> Option<usize> {
        self.lane_index.get(id).copied()
    }

    pub fn node_id(&self, node: usize) -> &str {
        &self.intersections[node].id
    }

    pub fn is_virtual(&self, node: usize) -> bool {
        self.intersections[node].is_virtual
    }

    /// Real intersections sorted by id; this is the evaluation order used everywhere.
    pub fn real_intersections(&self) -> &[usize] {
        &self.real
    }

    /// Position of `node` within [`Self::real_intersections`].
    pub fn real_position(&self, node: usize) -> Option<usize> {
        self.real.iter().position(|&n| n == node)
    }

    pub fn neighbor(&self, node: usize, d: Direction) -> Option<usize> {
        self.neighbors[node][d.index()]
    }

    /// Real neighbours of a real intersection, in direction order.
    pub fn real_neighbors(&self, node: usize) -> Vec<usize> {
        Direction::ALL
            .iter()
            .filter_map(|&d| self.neighbor(node, d))
            .filter(|&j| !self.is_virtual(j))
            .collect()
    }

    pub fn incoming_lane(&self, node: usize, approach: Direction, movement: Movement) -> Option<usize> {
        self.incoming[node].map(|t| t[approach.index()][movement.index()])
    }

    /// All 12 incoming lanes of a real intersection.
    pub fn incoming_lanes(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.incoming[node].iter().flat_map(|t| t.iter().flatten().copied())
    }

    pub fn links(&self, from: usize, to: usize) -> &[usize] {
        self.links.get(&(from, to)).map_or(&[], |v| v.as_slice())
    }

    /// Lane a vehicle should use on the road `from -> to`, given that its next
    /// hop after `to` is `next` (`None` when `to` is the end of the route).
    pub fn lane_toward(&self, from: usize, to: usize, next: Option<usize>) -> Result<usize, SimError> {
        let err = |msg: &str| {
            SimError::InvalidRoute(format!(
                "{} -> {}{}: {msg}",
                self.node_id(from),
                self.node_id(to),
                next.map(|n| format!(" -> {}", self.node_id(n))).unwrap_or_default()
            ))
        };
        let candidates = self.links(from, to);
        if candidates.is_empty() {
            return Err(err("no road"));
        }
        match next {
            None => {
                if !self.is_virtual(to) {
                    return Err(err("route must end at a virtual intersection"));
                }
                Ok(candidates[0])
            }
            Some(n) => {
                if self.is_virtual(to) {
                    return Err(err("route passes through a virtual intersection"));
                }
                let approach = self.info[candidates[0]].approach;
                let exit = Direction::ALL
                    .into_iter()
                    .find(|&d| self.neighbor(to, d) == Some(n))
                    .ok_or_else(|| err("next hop is not adjacent"))?;
                let m = Movement::between(approach, exit).ok_or_else(|| err("u-turns are not allowed"))?;
                Ok(self.incoming_lane(to, approach, m).expect("real intersection"))
            }
        }
    }

    /// Lane route through a sequence of adjacent nodes.
    pub fn route_through(&self, nodes: &[usize]) -> Result<Vec<usize>, SimError> {
        if nodes.len() < 2 {
            return Err(SimError::InvalidRoute("a route needs at least two nodes".into()));
        }
        (0..nodes.len() - 1)
            .map(|i| self.lane_toward(nodes[i], nodes[i + 1], nodes.get(i + 2).copied()))
            .collect()
    }

    /// Checks that consecutive lanes connect and that each lane's movement
    /// leads onto the next lane.
    pub fn validate_route(&self, route: &[usize]) -> Result<(), SimError> {
        let Some(&last) = route.last() else {
            return Err(SimError::InvalidRoute("empty route".into()));
        };
        for w in route.windows(2) {
            let (a, b) = (&self.info[w[0]], &self.info[w[1]]);
            let ok = a.to == b.from
                && !self.is_virtual(a.to)
                && self.neighbor(a.to, a.movement.exit_side(a.approach)) == Some(b.to);
            if !ok {
                return Err(SimError::InvalidRoute(format!(
                    "lane {} does not lead onto lane {}",
                    self.lanes[w[0]].id, self.lanes[w[1]].id
                )));
            }
        }
        if !self.is_virtual(self.info[last].to) {
            return Err(SimError::InvalidRoute(format!(
                "route ends on lane {} which does not leave the network",
                self.lanes[last].id
            )));
        }
        Ok(())
    }
}

fn movement_tag(m: Movement) -> &'static str {
    match m {
        Movement::Through => "through",
        Movement::Left => "left",
        Movement::Right => "right",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_intersection() {
        let net = RoadNetwork::grid(1, 1, 300.0).unwrap();
        assert_eq!(net.real_intersections().len(), 1);
        let virtuals = net.intersections().iter().filter(|i| i.is_virtual).count();
        assert_eq!(virtuals, 4);
        let n = net.real_intersections()[0];
        assert_eq!(net.incoming_lanes(n).count(), 12);
        assert!(net.real_neighbors(n).is_empty());
    }

    #[test]
    fn benchmark_sized_grids() {
        assert_eq!(RoadNetwork::grid(3, 4, 300.0).unwrap().real_intersections().len(), 12);
        assert_eq!(RoadNetwork::grid(4, 4, 300.0).unwrap().real_intersections().len(), 16);
    }

    #[test]
    fn adjacency_is_symmetric() {
        let net = RoadNetwork::grid(2, 3, 100.0).unwrap();
        for &n in net.real_intersections() {
            for d in Direction::ALL {
                let j = net.neighbor(n, d).unwrap();
                if !net.is_virtual(j) {
                    assert_eq!(net.neighbor(j, d.opposite()), Some(n));
                }
            }
        }
    }

    #[test]
    fn route_through_builds_turns() {
        let net = RoadNetwork::grid(1, 2, 100.0).unwrap();
        let ids = ["intersection_0_1", "intersection_1_1", "intersection_2_1", "intersection_2_2"];
        let nodes: Vec<_> = ids.iter().map(|i| net.node_index(i).unwrap()).collect();
        let route = net.route_through(&nodes).unwrap();
        let lane_ids: Vec<_> = route.iter().map(|&l| net.lanes()[l].id.as_str()).collect();
        // Heading east then turning north (left) at the second intersection.
        assert_eq!(
            lane_ids,
            [
                "intersection_0_1->intersection_1_1:through",
                "intersection_1_1->intersection_2_1:left",
                "intersection_2_1->intersection_2_2:exit"
            ]
        );
        net.validate_route(&route).unwrap();
    }

    #[test]
    fn broken_routes_are_rejected() {
        let net = RoadNetwork::grid(1, 1, 100.0).unwrap();
        let a = net.lane_index("intersection_0_1->intersection_1_1:left").unwrap();
        let exit_east = net.lane_index("intersection_1_1->intersection_2_1:exit").unwrap();
        assert!(net.validate_route(&[a, exit_east]).is_err());
        assert!(net.validate_route(&[a]).is_err());
        assert!(net.validate_route(&[]).is_err());
    }

    #[test]
    fn missing_lane_is_rejected() {
        let net = RoadNetwork::grid(1, 1, 100.0).unwrap();
        let mut lanes = net.lanes().to_vec();
        lanes.retain(|l| l.id != "intersection_0_1->intersection_1_1:left");
        assert!(RoadNetwork::new(net.intersections().to_vec(), lanes).is_err());
    }
}
