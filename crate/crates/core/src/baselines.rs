//! Classical signal controllers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::sim::{downstream_queue, observe, IntersectionObservation, JointAction, SignalPhase, SimState};
use crate::Result;

/// Cyclic plan; `splits[p]` is the number of consecutive decisions phase `order[p]` is held.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedTimePlan {
    pub order: Vec<SignalPhase>,
    pub splits: Vec<u32>,
}

impl Default for FixedTimePlan {
    fn default() -> Self {
        Self { order: SignalPhase::ALL.to_vec(), splits: vec![1; 4] }
    }
}

impl FixedTimePlan {
    pub fn new(order: Vec<SignalPhase>, splits: Vec<u32>) -> Result<Self> {
        if order.is_empty() || order.len() != splits.len() || splits.contains(&0) {
            return Err(crate::Error::InvalidArgument(format!("fixed-time plan {order:?} / {splits:?}")));
        }
        Ok(Self { order, splits })
    }

    pub fn cycle_length(&self) -> usize {
        self.splits.iter().map(|&s| s as usize).sum()
    }
}

pub fn fixed_time(plan: &FixedTimePlan, decision: usize) -> SignalPhase {
    let mut slot = decision % plan.cycle_length();
    for (&phase, &split) in plan.order.iter().zip(&plan.splits) {
        if slot < split as usize {
            return phase;
        }
        slot -= split as usize;
    }
    unreachable!("slot within cycle")
}

/// Pressure of each phase: queued vehicles on its two lanes minus queued
/// vehicles on the roads those lanes feed.
pub fn phase_pressures(obs: &IntersectionObservation, downstream: &[u32; 8]) -> [i64; 4] {
    let mut out = [0i64; 4];
    for (k, lane) in obs.lanes.iter().enumerate() {
        out[k / 2] += lane.queued as i64 - downstream[k] as i64;
    }
    out
}

pub fn max_pressure(obs: &IntersectionObservation, downstream: &[u32; 8]) -> SignalPhase {
    let p = phase_pressures(obs, downstream);
    let mut best = 0;
    for a in 1..4 {
        if p[a] > p[best] {
            best = a;
        }
    }
    SignalPhase::ALL[best]
}

pub fn random_policy(seed: u64, decision: usize) -> SignalPhase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(decision as u64);
    SignalPhase::ALL[rng.gen_range(0..4)]
}

/// Max-pressure choice for every real intersection.
pub fn max_pressure_joint(state: &SimState) -> Result<JointAction> {
    let net = state.network();
    let mut joint = JointAction::new();
    for &node in net.real_intersections() {
        let id = net.node_id(node);
        joint.insert(node, max_pressure(&observe(state, id)?, &downstream_queue(state, id)?));
    }
    Ok(joint)
}

pub struct FixedTimeController(pub FixedTimePlan);

impl Controller for FixedTimeController {
    fn name(&self) -> &str {
        "fixedtime"
    }

    fn decide(&mut self, state: &SimState, decision: usize) -> Result<JointAction> {
        let phase = fixed_time(&self.0, decision);
        Ok(state.network().real_intersections().iter().map(|&n| (n, phase)).collect())
    }
}

pub struct MaxPressureController;

impl Controller for MaxPressureController {
    fn name(&self) -> &str {
        "maxpressure"
    }

    fn decide(&mut self, state: &SimState, _decision: usize) -> Result<JointAction> {
        max_pressure_joint(state)
    }
}

/// Independent uniform choices per intersection.
pub struct RandomController {
    pub seed: u64,
}

impl Controller for RandomController {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&mut self, state: &SimState, decision: usize) -> Result<JointAction> {
        let net = state.network();
        Ok(net
            .real_intersections()
            .iter()
            .enumerate()
            .map(|(pos, &n)| {
                let seed = self.seed ^ (pos as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                (n, random_policy(seed, decision))
            })
            .collect())
    }
}
