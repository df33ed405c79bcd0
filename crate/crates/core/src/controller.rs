use crate::sim::{JointAction, MetricsReport, SimState};
use crate::Result;

/// Something that picks a joint action at each decision boundary.
pub trait Controller {
    fn name(&self) -> &str;

    fn decide(&mut self, state: &SimState, decision: usize) -> Result<JointAction>;
}

/// Episode length in decisions: `episode / interval` boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeSpec {
    pub episode: u64,
    pub interval: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { episode: 3600, interval: 30 }
    }
}

impl EpisodeSpec {
    pub fn new(episode: u64, interval: u64) -> Result<Self> {
        if interval == 0 || episode == 0 || episode % interval != 0 {
            return Err(crate::Error::InvalidArgument(format!(
                "interval {interval} must divide episode {episode}"
            )));
        }
        Ok(Self { episode, interval })
    }

    pub fn decisions(&self) -> usize {
        (self.episode / self.interval) as usize
    }
}

/// Runs `spec.decisions()` decisions from the current state.
pub fn run_episode(state: &mut SimState, controller: &mut dyn Controller, spec: EpisodeSpec) -> Result<MetricsReport> {
    for d in 0..spec.decisions() {
        let joint = controller.decide(state, d)?;
        state.apply_actions(&joint)?;
        state.advance_to_boundary();
    }
    Ok(state.metrics())
}
