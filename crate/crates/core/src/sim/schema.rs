use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowEntry, FlowSpec, Intersection, Lane, RoadNetwork, SimError};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    schema_version: String,
    intersections: Vec<Intersection>,
    lanes: Vec<Lane>,
}

#[derive(Serialize, Deserialize)]
struct FlowFile {
    schema_version: String,
    entries: Vec<FlowEntry>,
}

fn check_version(found: &str) -> Result<(), SimError> {
    if found != SCHEMA_VERSION {
        return Err(SimError::Schema(format!("schema_version {found:?}, expected {SCHEMA_VERSION:?}")));
    }
    Ok(())
}

impl RoadNetwork {
    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            schema_version: SCHEMA_VERSION.into(),
            intersections: self.intersections().to_vec(),
            lanes: self.lanes().to_vec(),
        };
        serde_json::to_string_pretty(&file).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: NetworkFile = serde_json::from_str(text).map_err(|e| SimError::Schema(e.to_string()))?;
        check_version(&file.schema_version)?;
        Self::new(file.intersections, file.lanes)
    }
}

impl FlowSpec {
    pub fn to_json(&self) -> String {
        let file = FlowFile { schema_version: SCHEMA_VERSION.into(), entries: self.entries.clone() };
        serde_json::to_string_pretty(&file).expect("flow serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: FlowFile = serde_json::from_str(text).map_err(|e| SimError::Schema(e.to_string()))?;
        check_version(&file.schema_version)?;
        Ok(Self { entries: file.entries })
    }
}

pub fn save_network(network: &RoadNetwork, path: &Path) -> Result<(), SimError> {
    Ok(std::fs::write(path, network.to_json())?)
}

pub fn load_network(path: &Path) -> Result<RoadNetwork, SimError> {
    RoadNetwork::from_json(&std::fs::read_to_string(path)?)
}

pub fn save_flow(flow: &FlowSpec, path: &Path) -> Result<(), SimError> {
    Ok(std::fs::write(path, flow.to_json())?)
}

pub fn load_flow(path: &Path) -> Result<FlowSpec, SimError> {
    FlowSpec::from_json(&std::fs::read_to_string(path)?)
}
