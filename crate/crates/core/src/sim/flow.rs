use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Direction, RoadNetwork, SimError};

/// Vehicles released on `route` every `headway` seconds from `start_time`
/// through `end_time` inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub route: Vec<String>,
    pub start_time: f64,
    pub end_time: f64,
    pub headway: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub entries: Vec<FlowEntry>,
}

impl FlowSpec {
    pub fn vehicle_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| ((e.end_time - e.start_time) / e.headway).floor() as usize + 1)
            .sum()
    }
}

/// Compiled release schedule: `(time, route index)` sorted by time, ties in entry order.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Schedule {
    pub routes: Vec<std::sync::Arc<[usize]>>,
    pub releases: Vec<(f64, usize)>,
}

impl Schedule {
    pub fn compile(network: &RoadNetwork, flow: &FlowSpec) -> Result<Self, SimError> {
        let mut routes = Vec::with_capacity(flow.entries.len());
        let mut releases = Vec::new();
        for (ei, e) in flow.entries.iter().enumerate() {
            if !(e.start_time <= e.end_time) || !(e.headway > 0.0) || e.start_time < 0.0 {
                return Err(SimError::InvalidFlow(format!(
                    "entry {ei}: start {} end {} headway {}",
                    e.start_time, e.end_time, e.headway
                )));
            }
            let lanes = e
                .route
                .iter()
                .map(|id| {
                    network
                        .lane_index(id)
                        .ok_or_else(|| SimError::InvalidRoute(format!("entry {ei}: unknown lane id {id:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            network
                .validate_route(&lanes)
                .map_err(|err| SimError::InvalidRoute(format!("entry {ei}: {err}")))?;
            let mut t = e.start_time;
            let mut n = 0u64;
            while t <= e.end_time {
                releases.push((t, ei));
                n += 1;
                t = e.start_time + n as f64 * e.headway;
            }
            routes.push(lanes.into());
        }
        releases.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(Self { routes, releases })
    }
}

/// Random demand for grid-like networks.
///
/// Every boundary entry releases Poisson arrivals. Vehicles drive straight
/// and turn at most once, so every route leaves the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    /// Last release time, seconds.
    pub horizon: f64,
    /// Arrivals per second at each entry on the east and west edges.
    pub rate_east_west: f64,
    /// Arrivals per second at each entry on the north and south edges.
    pub rate_north_south: f64,
    /// Probability of turning left at an intersection (until the one turn is used).
    pub turn_left: f64,
    pub turn_right: f64,
}

impl DemandProfile {
    pub fn uniform(horizon: f64, rate: f64) -> Self {
        Self { horizon, rate_east_west: rate, rate_north_south: rate, turn_left: 0.15, turn_right: 0.15 }
    }
}

pub fn synthetic_flow(network: &RoadNetwork, demand: &DemandProfile, seed: u64) -> Result<FlowSpec, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    // (virtual entry node, first real node, side of the real node it enters from)
    let mut gates = Vec::new();
    for &n in network.real_intersections() {
        for d in Direction::ALL {
            let j = network.neighbor(n, d).expect("validated network");
            if network.is_virtual(j) {
                gates.push((j, n, d));
            }
        }
    }
    for (entry, first, side) in gates {
        let rate = match side {
            Direction::East | Direction::West => demand.rate_east_west,
            Direction::North | Direction::South => demand.rate_north_south,
        };
        if rate <= 0.0 {
            continue;
        }
        let mut t = 0.0;
        loop {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            t += -u.ln() / rate;
            if t > demand.horizon {
                break;
            }
            let nodes = random_path(network, entry, first, side.opposite(), demand, &mut rng);
            let route = network.route_through(&nodes)?;
            let release = t.floor();
            entries.push(FlowEntry {
                route: route.iter().map(|&l| network.lanes()[l].id.clone()).collect(),
                start_time: release,
                end_time: release,
                headway: 1.0,
            });
        }
    }
    entries.sort_by(|a, b| a.start_time.total_cmp(&b.start_time));
    Ok(FlowSpec { entries })
}

fn random_path(
    network: &RoadNetwork,
    entry: usize,
    first: usize,
    mut heading: Direction,
    demand: &DemandProfile,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut nodes = vec![entry, first];
    let mut turned = false;
    let mut here = first;
    loop {
        if !turned {
            let u: f64 = rng.gen();
            if u < demand.turn_left {
                heading = heading.left_of();
                turned = true;
            } else if u < demand.turn_left + demand.turn_right {
                heading = heading.right_of();
                turned = true;
            }
        }
        let next = network.neighbor(here, heading).expect("validated network");
        nodes.push(next);
        if network.is_virtual(next) {
            return nodes;
        }
        here = next;
    }
}
