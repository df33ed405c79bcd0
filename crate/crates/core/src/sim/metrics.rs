use serde::{Deserialize, Serialize};

/// Episode-level travel metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Average travel time, s.
    pub att: f64,
    /// Average queue length over all per-second samples, vehicles.
    pub aql: f64,
    /// Average waiting time per entered vehicle, s.
    pub awt: f64,
}
