use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::flow::Schedule;
use super::{FlowSpec, MetricsReport, RoadNetwork, SignalPhase, SimError};

pub const GREEN_SECONDS: u32 = 30;
pub const YELLOW_SECONDS: u32 = 3;
pub const ALL_RED_SECONDS: u32 = 2;

/// Joint action: real intersection node index -> chosen phase.
pub type JointAction = BTreeMap<usize, SignalPhase>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Green,
    Yellow,
    AllRed,
}

/// Signal program of one intersection.
///
/// A phase change runs yellow then all-red before the new green; `pending`
/// holds the incoming phase during those stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseProgram {
    pub current: SignalPhase,
    pub stage: Stage,
    pub remaining: u32,
    pub pending: Option<SignalPhase>,
    /// True until the first decision has been applied.
    pub fresh: bool,
}

impl PhaseProgram {
    pub fn initial() -> Self {
        Self { current: SignalPhase::Etwt, stage: Stage::Green, remaining: GREEN_SECONDS, pending: None, fresh: true }
    }

    /// The green stage has expired (or no decision has been made yet).
    pub fn at_decision_boundary(&self) -> bool {
        self.stage == Stage::Green && (self.remaining == 0 || self.fresh)
    }

    fn choose(&mut self, phase: SignalPhase) {
        self.fresh = false;
        if phase == self.current {
            self.stage = Stage::Green;
            self.remaining = GREEN_SECONDS;
            self.pending = None;
        } else {
            self.stage = Stage::Yellow;
            self.remaining = YELLOW_SECONDS;
            self.pending = Some(phase);
        }
    }

    fn tick(&mut self) {
        self.remaining = self.remaining.saturating_sub(1);
        if self.remaining > 0 {
            return;
        }
        match self.stage {
            // An expired green keeps serving its phase until the next decision.
            Stage::Green => {}
            Stage::Yellow => {
                self.stage = Stage::AllRed;
                self.remaining = ALL_RED_SECONDS;
            }
            Stage::AllRed => {
                self.stage = Stage::Green;
                self.remaining = GREEN_SECONDS;
                self.current = self.pending.take().expect("pending phase set during all-red");
            }
        }
    }

    /// Whether a lane with this approach and movement may cross the stop line.
    pub fn permits(&self, approach: super::Direction, movement: super::Movement) -> bool {
        movement == super::Movement::Right || (self.stage == Stage::Green && self.current.permits(approach, movement))
    }
}

/// Vehicle kinematics shared by all vehicles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleModel {
    /// m/s
    pub free_speed: f64,
    /// Bumper-to-bumper standstill gap, m.
    pub min_gap: f64,
    pub vehicle_length: f64,
    /// Vehicles slower than this (m/s) on an incoming lane are queued.
    pub queue_speed: f64,
}

impl Default for VehicleModel {
    fn default() -> Self {
        Self { free_speed: 11.0, min_gap: 2.5, vehicle_length: 5.0, queue_speed: 0.1 }
    }
}

impl VehicleModel {
    fn spacing(&self) -> f64 {
        self.vehicle_length + self.min_gap
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vehicle {
    pub id: u64,
    /// Lane indices into the network.
    pub route: Arc<[usize]>,
    pub route_index: usize,
    /// Metres from the start of the current lane.
    pub position: f64,
    pub speed: f64,
    pub enter_time: f64,
    pub exit_time: Option<f64>,
    pub cumulative_wait: f64,
}

impl Vehicle {
    pub fn lane(&self) -> usize {
        self.route[self.route_index]
    }

    /// Lane after the current one, if any.
    pub fn next_lane(&self) -> Option<usize> {
        self.route.get(self.route_index + 1).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PendingVehicle {
    route: usize,
    release: f64,
}

/// Full simulator world.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub(crate) network: Arc<RoadNetwork>,
    model: VehicleModel,
    schedule: Arc<Schedule>,
    next_release: usize,
    /// Vehicles released but not yet admitted onto their first lane, by lane.
    waiting: BTreeMap<usize, VecDeque<PendingVehicle>>,
    /// Vehicles per lane, leader first.
    pub(crate) lanes: Vec<VecDeque<Vehicle>>,
    departed: Vec<Vehicle>,
    /// One program per real intersection, aligned with `network.real_intersections()`.
    programs: Vec<PhaseProgram>,
    clock: u64,
    entered: u64,
    next_id: u64,
    queue_sample_sum: u64,
    queue_samples: u64,
    seed: u64,
}

impl SimState {
    pub fn new(network: RoadNetwork, flow: &FlowSpec, seed: u64) -> Result<Self, SimError> {
        Self::with_model(Arc::new(network), flow, VehicleModel::default(), seed)
    }

    pub fn with_model(
        network: Arc<RoadNetwork>,
        flow: &FlowSpec,
        model: VehicleModel,
        seed: u64,
    ) -> Result<Self, SimError> {
        let schedule = Schedule::compile(&network, flow)?;
        let programs = vec![PhaseProgram::initial(); network.real_intersections().len()];
        Ok(Self {
            lanes: vec![VecDeque::new(); network.lane_count()],
            network,
            model,
            schedule: Arc::new(schedule),
            next_release: 0,
            waiting: BTreeMap::new(),
            departed: Vec::new(),
            programs,
            clock: 0,
            entered: 0,
            next_id: 0,
            queue_sample_sum: 0,
            queue_samples: 0,
            seed,
        })
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn shared_network(&self) -> Arc<RoadNetwork> {
        Arc::clone(&self.network)
    }

    pub fn model(&self) -> &VehicleModel {
        &self.model
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entered(&self) -> u64 {
        self.entered
    }

    pub fn active_count(&self) -> usize {
        self.lanes.iter().map(VecDeque::len).sum()
    }

    pub fn departed(&self) -> &[Vehicle] {
        &self.departed
    }

    pub fn active_vehicles(&self) -> impl Iterator<Item = &Vehicle> {
        self.lanes.iter().flatten()
    }

    pub fn lane_vehicles(&self, lane: usize) -> impl Iterator<Item = &Vehicle> {
        self.lanes[lane].iter()
    }

    /// Vehicles released but still waiting for space on their entry lane.
    pub fn waiting_to_enter(&self) -> usize {
        self.waiting.values().map(VecDeque::len).sum()
    }

    fn program_slot(&self, node: usize) -> Result<usize, SimError> {
        if node >= self.network.intersections().len() {
            return Err(SimError::UnknownIntersection(format!("#{node}")));
        }
        if self.network.is_virtual(node) {
            return Err(SimError::VirtualIntersection(self.network.node_id(node).to_string()));
        }
        Ok(self.network.real_position(node).expect("real node"))
    }

    pub fn program(&self, node: usize) -> Result<&PhaseProgram, SimError> {
        Ok(&self.programs[self.program_slot(node)?])
    }

    pub fn at_decision_boundary(&self) -> bool {
        self.programs.iter().all(PhaseProgram::at_decision_boundary)
    }

    /// Applies a joint action at a decision boundary.
    ///
    /// Keeping the current phase starts a fresh 30 s green; switching runs
    /// 3 s yellow and 2 s all-red first.
    pub fn apply_actions(&mut self, joint: &JointAction) -> Result<(), SimError> {
        let mut slots = Vec::with_capacity(joint.len());
        for (&node, &phase) in joint {
            slots.push((self.program_slot(node)?, phase));
        }
        for (slot, &node) in self.network.real_intersections().iter().enumerate() {
            if !joint.contains_key(&node) {
                return Err(SimError::MissingAction(self.network.node_id(node).to_string()));
            }
            if !self.programs[slot].at_decision_boundary() {
                return Err(SimError::NotAtBoundary(self.network.node_id(node).to_string()));
            }
        }
        for (slot, phase) in slots {
            self.programs[slot].choose(phase);
        }
        Ok(())
    }

    /// Steps until every intersection is at a decision boundary; returns the
    /// number of seconds simulated.
    pub fn advance_to_boundary(&mut self) -> u64 {
        let start = self.clock;
        while !self.at_decision_boundary() {
            self.step();
        }
        self.clock - start
    }

    /// Adds a vehicle directly onto the first lane of `route` (fixtures and tests).
    pub fn place_vehicle(&mut self, route: &[&str], position: f64, speed: f64) -> Result<u64, SimError> {
        let lanes = route
            .iter()
            .map(|id| self.network.lane_index(id).ok_or_else(|| SimError::InvalidRoute(format!("unknown lane {id:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        self.network.validate_route(&lanes)?;
        let len = self.network.lane_info(lanes[0]).length;
        if !(0.0..=len).contains(&position) || speed < 0.0 {
            return Err(SimError::InvalidRoute(format!("position {position} / speed {speed} out of range")));
        }
        let id = self.next_id;
        self.next_id += 1;
        let v = Vehicle {
            id,
            route: lanes.clone().into(),
            route_index: 0,
            position,
            speed,
            enter_time: self.clock as f64,
            exit_time: None,
            cumulative_wait: 0.0,
        };
        let lane = &mut self.lanes[lanes[0]];
        let at = lane.iter().position(|o| o.position < position).unwrap_or(lane.len());
        lane.insert(at, v);
        self.entered += 1;
        Ok(id)
    }

    /// Advances the world by one second.
    pub fn step(&mut self) {
        let net = Arc::clone(&self.network);
        let model = self.model;
        let now = self.clock as f64;
        let spacing = model.spacing();

        let old = std::mem::take(&mut self.lanes);
        let mut tail: Vec<f64> =
            old.iter().map(|l| l.back().map_or(f64::INFINITY, |v| v.position)).collect();
        let mut next: Vec<VecDeque<Vehicle>> = vec![VecDeque::new(); old.len()];
        let mut entrants: Vec<(usize, Vehicle)> = Vec::new();

        for (li, lane) in old.into_iter().enumerate() {
            if lane.is_empty() {
                continue;
            }
            let info = net.lane_info(li);
            let can_pass = net.is_virtual(info.to)
                || self.programs[net.real_position(info.to).expect("real node")].permits(info.approach, info.movement);
            let mut ahead: Option<f64> = None;
            for mut v in lane {
                let old_pos = v.position;
                let mut target = old_pos + model.free_speed;
                match ahead {
                    Some(lead) => target = target.min(lead - spacing).min(info.length),
                    None if target > info.length && can_pass => match v.next_lane() {
                        None => {
                            v.speed = target - old_pos;
                            v.position = info.length;
                            v.exit_time = Some(now + 1.0);
                            self.departed.push(v);
                            ahead = Some(old_pos);
                            continue;
                        }
                        Some(nl) => {
                            let room = (tail[nl] - spacing).min(net.lane_info(nl).length);
                            if room >= 0.0 {
                                let pos = (target - info.length).min(room);
                                v.speed = (info.length - old_pos) + pos;
                                v.position = pos;
                                v.route_index += 1;
                                tail[nl] = pos;
                                entrants.push((nl, v));
                                ahead = Some(old_pos);
                                continue;
                            }
                            target = info.length;
                        }
                    },
                    None => target = target.min(info.length),
                }
                let target = target.max(old_pos);
                v.speed = target - old_pos;
                v.position = target;
                ahead = Some(old_pos);
                next[li].push_back(v);
            }
        }
        for (lane, v) in entrants {
            next[lane].push_back(v);
        }
        self.lanes = next;

        self.admit_arrivals(now);

        let mut queued = 0u64;
        for (li, lane) in self.lanes.iter_mut().enumerate() {
            if net.is_virtual(net.lane_info(li).to) {
                continue;
            }
            for v in lane.iter_mut().filter(|v| v.speed < model.queue_speed) {
                v.cumulative_wait += 1.0;
                queued += 1;
            }
        }
        self.queue_sample_sum += queued;
        self.queue_samples += 1;

        for p in &mut self.programs {
            p.tick();
        }
        self.clock += 1;
    }

    fn admit_arrivals(&mut self, now: f64) {
        let releases = &self.schedule.releases;
        while self.next_release < releases.len() && releases[self.next_release].0 <= now {
            let (release, route) = releases[self.next_release];
            let first = self.schedule.routes[route][0];
            self.waiting.entry(first).or_default().push_back(PendingVehicle { route, release });
            self.next_release += 1;
        }
        let spacing = self.model.spacing();
        for (&lane, queue) in self.waiting.iter_mut() {
            let Some(front) = queue.front() else { continue };
            let has_room = self.lanes[lane].back().map_or(true, |v| v.position >= spacing);
            if !has_room {
                continue;
            }
            let v = Vehicle {
                id: self.next_id,
                route: Arc::clone(&self.schedule.routes[front.route]),
                route_index: 0,
                position: 0.0,
                speed: self.model.free_speed,
                enter_time: front.release,
                exit_time: None,
                cumulative_wait: 0.0,
            };
            self.next_id += 1;
            self.entered += 1;
            self.lanes[lane].push_back(v);
            queue.pop_front();
        }
        self.waiting.retain(|_, q| !q.is_empty());
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }

    /// ATT, AQL and AWT so far. Vehicles still in the network count their
    /// travel time up to the current clock.
    pub fn metrics(&self) -> MetricsReport {
        let aql = if self.queue_samples == 0 {
            0.0
        } else {
            self.queue_sample_sum as f64 / self.queue_samples as f64
        };
        if self.entered == 0 {
            return MetricsReport { att: 0.0, aql, awt: 0.0 };
        }
        let now = self.clock as f64;
        let mut travel = 0.0;
        let mut wait = 0.0;
        for v in self.departed.iter().chain(self.active_vehicles()) {
            travel += v.exit_time.unwrap_or(now) - v.enter_time;
            wait += v.cumulative_wait;
        }
        let n = self.entered as f64;
        MetricsReport { att: travel / n, aql, awt: wait / n }
    }

    #[allow(dead_code)]
    pub(crate) fn queue_samples(&self) -> (u64, u64) {
        (self.queue_sample_sum, self.queue_samples)
    }
}

/// Immutable copy of a simulator state; restoring yields an independent fork.
#[derive(Clone, Debug)]
pub struct Snapshot(Arc<SimState>);

impl Snapshot {
    pub fn restore(&self) -> SimState {
        (*self.0).clone()
    }

    pub fn state(&self) -> &SimState {
        &self.0
    }
}

/// Builds a grid network and a simulator over it.
pub fn build_grid(rows: usize, cols: usize, lane_length: f64, flow: &FlowSpec, seed: u64) -> Result<SimState, SimError> {
    SimState::new(RoadNetwork::grid(rows, cols, lane_length)?, flow, seed)
}
