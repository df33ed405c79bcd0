//! Discrete-time microscopic traffic simulator over grid-like networks.

mod cityflow;
mod flow;
mod metrics;
mod network;
mod observe;
mod phase;
mod schema;
mod state;

pub use cityflow::{import_cityflow, ImportReport};
pub use flow::{synthetic_flow, DemandProfile, FlowEntry, FlowSpec};
pub use metrics::MetricsReport;
pub use network::{Intersection, Lane, RoadNetwork};
pub use observe::{
    downstream_queue, intersection_queue, observe, IntersectionObservation, LaneCounts, NeighborIncoming,
};
pub use phase::{Direction, Movement, SignalPhase, CONTROLLED_LANES};
pub use schema::{load_flow, load_network, save_flow, save_network, SCHEMA_VERSION};
pub use state::{
    build_grid, JointAction, PhaseProgram, SimState, Snapshot, Stage, Vehicle, VehicleModel, ALL_RED_SECONDS,
    GREEN_SECONDS, YELLOW_SECONDS,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid route: {0}")]
    InvalidRoute(String),
    #[error("invalid flow: {0}")]
    InvalidFlow(String),
    #[error("unknown intersection {0}")]
    UnknownIntersection(String),
    #[error("intersection {0} is virtual")]
    VirtualIntersection(String),
    #[error("intersection {0} is not at a decision boundary")]
    NotAtBoundary(String),
    #[error("no action given for intersection {0}")]
    MissingAction(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
