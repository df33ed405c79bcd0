//! Import of the CityFlow roadnet and flow formats.
//!
//! Each road into a real intersection becomes three lanes
//! (`{road}:through`, `{road}:left`, `{road}:right`); a road into a virtual
//! intersection becomes a single `{road}:exit` lane.

use std::collections::{BTreeSet, HashMap};

use serde::Deserialize;

use super::{Direction, FlowEntry, FlowSpec, Intersection, Lane, Movement, RoadNetwork, SimError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportReport {
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct Point {
    x: f64,
    y: f64,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfIntersection {
    id: String,
    point: Point,
    #[serde(default, rename = "virtual")]
    is_virtual: bool,
    #[serde(default)]
    traffic_light: Option<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfRoad {
    id: String,
    start_intersection: String,
    end_intersection: String,
    #[serde(default)]
    points: Vec<Point>,
}

#[derive(Deserialize)]
struct CfRoadnet {
    intersections: Vec<CfIntersection>,
    roads: Vec<CfRoad>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CfFlow {
    route: Vec<String>,
    interval: f64,
    start_time: f64,
    end_time: f64,
    #[serde(default)]
    vehicle: Option<serde_json::Value>,
}

fn movement_suffix(m: Movement) -> &'static str {
    match m {
        Movement::Through => "through",
        Movement::Left => "left",
        Movement::Right => "right",
    }
}

/// Converts CityFlow roadnet and flow JSON text into the native network and flow.
pub fn import_cityflow(roadnet: &str, flow: &str) -> Result<(RoadNetwork, FlowSpec, ImportReport), SimError> {
    let roadnet: CfRoadnet = serde_json::from_str(roadnet).map_err(|e| SimError::Schema(format!("roadnet: {e}")))?;
    let flows: Vec<CfFlow> = serde_json::from_str(flow).map_err(|e| SimError::Schema(format!("flow: {e}")))?;
    let mut warnings = BTreeSet::new();

    let points: HashMap<&str, &Point> = roadnet.intersections.iter().map(|n| (n.id.as_str(), &n.point)).collect();
    let virtual_ids: HashMap<&str, bool> =
        roadnet.intersections.iter().map(|n| (n.id.as_str(), n.is_virtual)).collect();
    if roadnet.intersections.iter().any(|n| !n.is_virtual && n.traffic_light.is_some()) {
        warnings.insert("traffic-light plans in the roadnet are ignored".to_string());
    }
    let intersections = roadnet
        .intersections
        .iter()
        .map(|n| Intersection { id: n.id.clone(), x: n.point.x, y: n.point.y, is_virtual: n.is_virtual })
        .collect();

    let mut lanes = Vec::new();
    let mut road_ends = HashMap::new();
    for road in &roadnet.roads {
        let lookup = |id: &str| {
            points
                .get(id)
                .copied()
                .ok_or_else(|| SimError::InvalidNetwork(format!("road {} references unknown intersection {id}", road.id)))
        };
        let (a, b) = (lookup(&road.start_intersection)?, lookup(&road.end_intersection)?);
        let approach = Direction::from_vector(a.x - b.x, a.y - b.y)
            .ok_or_else(|| SimError::InvalidNetwork(format!("road {} has zero extent", road.id)))?;
        let length = if road.points.len() >= 2 {
            road.points.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum()
        } else {
            (b.x - a.x).hypot(b.y - a.y)
        };
        let lane = |suffix: &str, movement| Lane {
            id: format!("{}:{suffix}", road.id),
            from: road.start_intersection.clone(),
            to: road.end_intersection.clone(),
            approach,
            movement,
            length,
        };
        if virtual_ids[road.end_intersection.as_str()] {
            lanes.push(lane("exit", Movement::Through));
        } else {
            for m in Movement::ALL {
                lanes.push(lane(movement_suffix(m), m));
            }
        }
        road_ends.insert(road.id.as_str(), (road.start_intersection.as_str(), road.end_intersection.as_str()));
    }
    let network = RoadNetwork::new(intersections, lanes)?;

    let mut entries = Vec::with_capacity(flows.len());
    for (fi, f) in flows.iter().enumerate() {
        if f.vehicle.as_ref().is_some_and(|v| v.get("maxSpeed").is_some()) {
            warnings.insert("per-vehicle maxSpeed is ignored; all vehicles use the shared model".to_string());
        }
        let mut nodes = Vec::with_capacity(f.route.len() + 1);
        for (k, road) in f.route.iter().enumerate() {
            let &(start, end) = road_ends
                .get(road.as_str())
                .ok_or_else(|| SimError::InvalidRoute(format!("flow {fi}: unknown road {road:?}")))?;
            if k == 0 {
                nodes.push(network.node_index(start).expect("validated"));
            } else if nodes.last() != network.node_index(start).as_ref() {
                return Err(SimError::InvalidRoute(format!("flow {fi}: road {road:?} is not connected")));
            }
            nodes.push(network.node_index(end).expect("validated"));
        }
        let route = network
            .route_through(&nodes)
            .map_err(|e| SimError::InvalidRoute(format!("flow {fi}: {e}")))?;
        // CityFlow releases one vehicle when the interval exceeds the window.
        let headway = if f.interval > 0.0 { f.interval } else { 1.0 };
        entries.push(FlowEntry {
            route: route.iter().map(|&l| network.lanes()[l].id.clone()).collect(),
            start_time: f.start_time,
            end_time: f.end_time,
            headway,
        });
    }

    let warnings: Vec<String> = warnings.into_iter().collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((network, FlowSpec { entries }, ImportReport { warnings }))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A single real intersection at the origin with four virtual neighbours.
    pub(crate) fn cross_roadnet() -> String {
        let nodes = [("c", 0.0, 0.0, false), ("n", 0.0, 300.0, true), ("e", 300.0, 0.0, true), ("s", 0.0, -300.0, true), ("w", -300.0, 0.0, true)];
        let intersections: Vec<_> = nodes
            .iter()
            .map(|(id, x, y, v)| {
                let mut n = serde_json::json!({"id": id, "point": {"x": x, "y": y}, "virtual": v});
                if !v {
                    n["trafficLight"] = serde_json::json!({"lightphases": []});
                }
                n
            })
            .collect();
        let mut roads = Vec::new();
        for side in ["n", "e", "s", "w"] {
            roads.push(serde_json::json!({"id": format!("{side}_in"), "startIntersection": side, "endIntersection": "c", "lanes": [{}, {}]}));
            roads.push(serde_json::json!({"id": format!("{side}_out"), "startIntersection": "c", "endIntersection": side}));
        }
        serde_json::json!({"intersections": intersections, "roads": roads}).to_string()
    }

    #[test]
    fn imports_a_single_intersection() {
        let flow = r#"[{"vehicle": {"length": 5.0, "maxSpeed": 16.67}, "route": ["w_in", "n_out"], "interval": 5.0, "startTime": 0, "endTime": 20}]"#;
        let (net, flow, report) = import_cityflow(&cross_roadnet(), flow).unwrap();
        assert_eq!(net.real_intersections().len(), 1);
        assert_eq!(net.lane_count(), 16);
        // From the west, leaving north, is a left turn.
        assert_eq!(flow.entries[0].route, ["w_in:left", "n_out:exit"]);
        assert_eq!(flow.vehicle_count(), 5);
        assert_eq!(report.warnings.len(), 2);
        assert_eq!(net.lanes()[net.lane_index("w_in:left").unwrap()].length, 300.0);
    }

    #[test]
    fn disconnected_route_is_rejected() {
        let flow = r#"[{"route": ["w_in", "e_in"], "interval": 1, "startTime": 0, "endTime": 0}]"#;
        assert!(matches!(import_cityflow(&cross_roadnet(), flow), Err(SimError::InvalidRoute(_))));
    }
}
