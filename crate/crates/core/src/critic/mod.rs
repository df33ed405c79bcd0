//! Graph-attention Q-network over intersections.

mod train;

use std::collections::BTreeMap;
use std::ops::Index;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, EpisodeSpec};
use crate::numerics::{Checkpoint, NodeId, ParamMap};
use crate::sim::{observe, IntersectionObservation, JointAction, SignalPhase, SimState};
use crate::{Error, Graph, Result, Tensor};

pub use train::{
    bellman_loss, bellman_loss_with_targets, bellman_targets, epsilon, intersection_reward, train_critic,
    ReplayBuffer, RoundLog, TrainingLog, Transition,
};

pub const FEATURE_DIM: usize = 36;

pub type Features = [f64; FEATURE_DIM];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub q_hidden: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub sample_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub target_update_interval: usize,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    /// Reward per queued vehicle.
    pub reward_scale: f64,
    pub episode: EpisodeSpec,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            heads: 4,
            head_dim: 8,
            layers: 1,
            q_hidden: 32,
            gamma: 0.8,
            learning_rate: 1e-3,
            buffer_capacity: 12_000,
            sample_size: 3_000,
            batch_size: 20,
            epochs: 100,
            target_update_interval: 5,
            epsilon_start: 0.8,
            epsilon_decay: 0.95,
            epsilon_floor: 0.2,
            reward_scale: -0.25,
            episode: EpisodeSpec::default(),
            seed: 0,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma < 1.0
            && self.buffer_capacity >= self.sample_size
            && self.sample_size >= self.batch_size
            && self.batch_size >= 1
            && self.heads >= 1
            && self.head_dim >= 1
            && self.target_update_interval >= 1
            && self.learning_rate > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("critic config {self:?}")))
        }
    }
}

/// Action values in canonical phase order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QVector(pub [f64; 4]);

impl QVector {
    /// Best phase; ties go to the lowest canonical index.
    pub fn argmax(&self) -> SignalPhase {
        SignalPhase::ALL[crate::numerics::argmax(&self.0)]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Index<SignalPhase> for QVector {
    type Output = f64;

    fn index(&self, p: SignalPhase) -> &f64 {
        &self.0[p.index()]
    }
}

/// Lane counts in `CONTROLLED_LANES` order as `[queued, seg1, seg2, seg3]`,
/// then a one-hot of the current phase.
pub fn encode_obs(obs: &IntersectionObservation) -> Features {
    let mut f = [0.0; FEATURE_DIM];
    for (k, lane) in obs.lanes.iter().enumerate() {
        f[4 * k] = lane.queued as f64;
        for s in 0..3 {
            f[4 * k + 1 + s] = lane.segments[s] as f64;
        }
    }
    f[32 + obs.current_phase.index()] = 1.0;
    f
}

/// Named critic weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    pub params: ParamMap,
}

impl CriticParams {
    pub fn init<R: Rng + ?Sized>(cfg: &CriticConfig, rng: &mut R) -> Self {
        let mut p = ParamMap::new();
        let width = cfg.heads * cfg.head_dim;
        p.insert("embed.w".into(), Tensor::glorot(FEATURE_DIM, cfg.embed_dim, rng));
        p.insert("embed.b".into(), Tensor::zeros(&[1, cfg.embed_dim]));
        let mut dim = cfg.embed_dim;
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                for m in ["wq", "wk", "wv"] {
                    p.insert(format!("layer{l}.head{h}.{m}"), Tensor::glorot(dim, cfg.head_dim, rng));
                }
            }
            p.insert(format!("layer{l}.wo"), Tensor::glorot(width, cfg.embed_dim, rng));
            p.insert(format!("layer{l}.bo"), Tensor::zeros(&[1, cfg.embed_dim]));
            dim = cfg.embed_dim;
        }
        p.insert("q.w1".into(), Tensor::glorot(dim, cfg.q_hidden, rng));
        p.insert("q.b1".into(), Tensor::zeros(&[1, cfg.q_hidden]));
        p.insert("q.w2".into(), Tensor::glorot(cfg.q_hidden, 4, rng));
        p.insert("q.b2".into(), Tensor::zeros(&[1, 4]));
        Self { params: p }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub(crate) fn leaves(&self, g: &mut Graph) -> BTreeMap<String, NodeId> {
        self.params.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone()))).collect()
    }
}

/// Key lists for a block of `copies` stacked snapshots of the same network:
/// each row attends to itself and then to its real neighbours.
pub fn attention_keys(neighbors: &[Vec<usize>], copies: usize) -> Arc<Vec<Vec<usize>>> {
    let n = neighbors.len();
    let mut keys = Vec::with_capacity(n * copies);
    for c in 0..copies {
        for (i, nb) in neighbors.iter().enumerate() {
            let mut ks = Vec::with_capacity(nb.len() + 1);
            ks.push(c * n + i);
            ks.extend(nb.iter().map(|&j| c * n + j));
            keys.push(ks);
        }
    }
    Arc::new(keys)
}

fn param(leaves: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId> {
    leaves.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("missing critic parameter {name}")))
}

/// Builds the Q-network on `x` (`[rows, 36]`) and returns the `[rows, 4]` output node.
pub(crate) fn build_forward(
    g: &mut Graph,
    leaves: &BTreeMap<String, NodeId>,
    cfg: &CriticConfig,
    x: NodeId,
    keys: Arc<Vec<Vec<usize>>>,
) -> Result<NodeId> {
    let e = g.matmul(x, param(leaves, "embed.w")?)?;
    let e = g.add(e, param(leaves, "embed.b")?)?;
    let mut h = g.relu(e)?;
    for l in 0..cfg.layers {
        let mut heads = Vec::with_capacity(cfg.heads);
        for k in 0..cfg.heads {
            let q = g.matmul(h, param(leaves, &format!("layer{l}.head{k}.wq"))?)?;
            let kk = g.matmul(h, param(leaves, &format!("layer{l}.head{k}.wk"))?)?;
            let v = g.matmul(h, param(leaves, &format!("layer{l}.head{k}.wv"))?)?;
            heads.push(g.attention(q, kk, v, Arc::clone(&keys))?);
        }
        let cat = g.concat(&heads)?;
        let o = g.matmul(cat, param(leaves, &format!("layer{l}.wo"))?)?;
        let o = g.add(o, param(leaves, &format!("layer{l}.bo"))?)?;
        h = g.relu(o)?;
    }
    let z = g.matmul(h, param(leaves, "q.w1")?)?;
    let z = g.add(z, param(leaves, "q.b1")?)?;
    let z = g.relu(z)?;
    let z = g.matmul(z, param(leaves, "q.w2")?)?;
    Ok(g.add(z, param(leaves, "q.b2")?)?)
}

fn stack(rows: &[Features]) -> Result<Tensor> {
    Ok(Tensor::new(vec![rows.len(), FEATURE_DIM], rows.iter().flatten().copied().collect())?)
}

/// Q-values for stacked snapshots; `features.len()` must be a multiple of the network size.
pub(crate) fn q_values_batch(
    params: &CriticParams,
    cfg: &CriticConfig,
    features: &[Features],
    neighbors: &[Vec<usize>],
) -> Result<Vec<QVector>> {
    let n = neighbors.len();
    if n == 0 || features.len() % n != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows for a network of {n} intersections",
            features.len()
        )));
    }
    if neighbors.iter().flatten().any(|&j| j >= n) {
        return Err(Error::InvalidArgument("neighbour index without an observation".into()));
    }
    let mut g = Graph::new();
    let leaves = params.leaves(&mut g);
    let x = g.leaf(stack(features)?);
    let out = build_forward(&mut g, &leaves, cfg, x, attention_keys(neighbors, features.len() / n))?;
    let t = g.value(out);
    Ok((0..features.len()).map(|i| QVector(t.row(i).try_into().expect("4 columns"))).collect())
}

/// Q-values for every intersection; `neighbors[i]` lists the indices of the
/// real neighbours of observation `i`.
pub fn q_forward(
    params: &CriticParams,
    cfg: &CriticConfig,
    observations: &[IntersectionObservation],
    neighbors: &[Vec<usize>],
) -> Result<Vec<QVector>> {
    if observations.len() != neighbors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} observations for {} intersections",
            observations.len(),
            neighbors.len()
        )));
    }
    let features: Vec<Features> = observations.iter().map(encode_obs).collect();
    q_values_batch(params, cfg, &features, neighbors)
}

/// Real-neighbour lists in `real_intersections()` order.
pub fn neighbor_lists(state: &SimState) -> Vec<Vec<usize>> {
    let net = state.network();
    net.real_intersections()
        .iter()
        .map(|&n| net.real_neighbors(n).iter().map(|&j| net.real_position(j).expect("real")).collect())
        .collect()
}

/// Observations of every real intersection, in id order.
pub fn observe_all(state: &SimState) -> Result<Vec<IntersectionObservation>> {
    let net = state.network();
    net.real_intersections().iter().map(|&n| Ok(observe(state, net.node_id(n))?)).collect()
}

/// Read-only critic used for scoring once training is over.
#[derive(Clone, Debug)]
pub struct FrozenCritic {
    params: Arc<CriticParams>,
    config: Arc<CriticConfig>,
}

pub const CHECKPOINT_KIND: &str = "critic";

impl FrozenCritic {
    pub fn freeze(params: CriticParams, config: CriticConfig) -> Self {
        Self { params: Arc::new(params), config: Arc::new(config) }
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn q_forward(&self, observations: &[IntersectionObservation], neighbors: &[Vec<usize>]) -> Result<Vec<QVector>> {
        q_forward(&self.params, &self.config, observations, neighbors)
    }

    /// Q-values for every real intersection of `state`, keyed by intersection id.
    pub fn q_for_state(&self, state: &SimState) -> Result<BTreeMap<String, QVector>> {
        let obs = observe_all(state)?;
        let q = self.q_forward(&obs, &neighbor_lists(state))?;
        Ok(obs.into_iter().map(|o| o.intersection).zip(q).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            params: self.params.params.clone(),
            config: Some(serde_json::to_value(&*self.config).expect("config serializes")),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::InvalidArgument(format!("checkpoint kind {:?} is not a critic", ck.kind)));
        }
        let config = ck.config.ok_or_else(|| Error::InvalidArgument("critic checkpoint has no config".into()))?;
        let config: CriticConfig =
            serde_json::from_value(config).map_err(|e| Error::InvalidArgument(format!("critic config: {e}")))?;
        Ok(Self::freeze(CriticParams { params: ck.params }, config))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn params(&self) -> &CriticParams {
        &self.params
    }
}

/// Greedy control by the critic's argmax.
pub struct CriticController(pub FrozenCritic);

impl Controller for CriticController {
    fn name(&self) -> &str {
        "critic-greedy"
    }

    fn decide(&mut self, state: &SimState, _decision: usize) -> Result<JointAction> {
        let q = self.0.q_for_state(state)?;
        let net = state.network();
        Ok(net
            .real_intersections()
            .iter()
            .map(|&n| (n, q[net.node_id(n)].argmax()))
            .collect::<JointAction>())
    }
}
