use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    attention_keys, build_forward, encode_obs, neighbor_lists, observe_all, q_values_batch, stack, CriticConfig,
    CriticParams, Features,
};
use crate::numerics::adam_step;
use crate::sim::{intersection_queue, JointAction, SignalPhase, SimState};
use crate::{AdamState, Graph, Result, Tensor};

/// Exploration rate for a training round: `max(start * decay^r, floor)`.
pub fn epsilon(cfg: &CriticConfig, round: usize) -> f64 {
    (cfg.epsilon_start * cfg.epsilon_decay.powi(round as i32)).max(cfg.epsilon_floor)
}

pub fn intersection_reward(cfg: &CriticConfig, queue_length: u32) -> f64 {
    cfg.reward_scale * queue_length as f64
}

/// One joint decision: per-intersection features before and after, in real-intersection order.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<Features>,
    pub actions: Vec<SignalPhase>,
    pub rewards: Vec<f64>,
    pub next_state: Vec<Features>,
}

/// Bounded FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

/// Bootstrap targets `r + gamma * max_a' Q_target(s', a')`, one per transition row.
pub fn bellman_targets(
    target: &CriticParams,
    cfg: &CriticConfig,
    batch: &[&Transition],
    neighbors: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len() * neighbors.len());
    for chunk in batch.chunks(256) {
        let next: Vec<Features> = chunk.iter().flat_map(|t| t.next_state.iter().copied()).collect();
        let q = q_values_batch(target, cfg, &next, neighbors)?;
        let rewards = chunk.iter().flat_map(|t| t.rewards.iter().copied());
        out.extend(rewards.zip(&q).map(|(r, qn)| r + cfg.gamma * qn.max()));
    }
    Ok(out)
}

/// Mean squared Bellman error over the batch and its intersections, with the
/// targets held fixed, and its gradient with respect to every parameter.
pub fn bellman_loss_with_targets(
    params: &CriticParams,
    cfg: &CriticConfig,
    batch: &[&Transition],
    targets: &[f64],
    neighbors: &[Vec<usize>],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let n = neighbors.len();
    let rows = batch.len() * n;
    if batch.is_empty() || targets.len() != rows {
        return Err(crate::Error::InvalidArgument(format!("{} targets for {rows} rows", targets.len())));
    }
    let mut mask = vec![0.0; rows * 4];
    let mut y = vec![0.0; rows * 4];
    for (b, t) in batch.iter().enumerate() {
        for (i, a) in t.actions.iter().enumerate() {
            let r = b * n + i;
            mask[r * 4 + a.index()] = 1.0;
            y[r * 4 + a.index()] = targets[r];
        }
    }
    let states: Vec<Features> = batch.iter().flat_map(|t| t.state.iter().copied()).collect();
    let mut g = Graph::new();
    let leaves = params.leaves(&mut g);
    let x = g.leaf(stack(&states)?);
    let q = build_forward(&mut g, &leaves, cfg, x, attention_keys(neighbors, batch.len()))?;
    let y = g.leaf(Tensor::new(vec![rows, 4], y)?);
    let mask = g.leaf(Tensor::new(vec![rows, 4], mask)?);
    let diff = g.sub(q, y)?;
    let masked = g.mul(diff, mask)?;
    let sq = g.mul(masked, masked)?;
    let total = g.sum(sq)?;
    let loss = g.scale(total, 1.0 / rows as f64)?;
    let ids: Vec<_> = leaves.values().copied().collect();
    let grads = g.gradient(loss, &ids)?;
    let named = leaves.iter().map(|(k, id)| (k.clone(), grads[id].clone())).collect();
    Ok((g.value(loss).item(), named))
}

/// Bellman loss of `params` against bootstrap targets from `target`.
pub fn bellman_loss(
    params: &CriticParams,
    target: &CriticParams,
    cfg: &CriticConfig,
    batch: &[&Transition],
    neighbors: &[Vec<usize>],
) -> Result<f64> {
    let targets = bellman_targets(target, cfg, batch, neighbors)?;
    Ok(bellman_loss_with_targets(params, cfg, batch, &targets, neighbors)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub epsilon: f64,
    /// Mean minibatch loss; `None` when the update was skipped.
    pub loss: Option<f64>,
    pub greedy_att: f64,
    pub buffer_len: usize,
}

pub type TrainingLog = Vec<RoundLog>;

fn features_of(state: &SimState) -> Result<Vec<Features>> {
    Ok(observe_all(state)?.iter().map(encode_obs).collect())
}

fn joint_of(state: &SimState, actions: &[SignalPhase]) -> JointAction {
    state.network().real_intersections().iter().copied().zip(actions.iter().copied()).collect()
}

/// Runs one episode choosing per-intersection ε-greedy actions; returns the
/// transitions and the final ATT.
fn run_round_episode(
    mut state: SimState,
    params: &CriticParams,
    cfg: &CriticConfig,
    eps: f64,
    rng: &mut ChaCha8Rng,
    mut sink: impl FnMut(Transition),
) -> Result<f64> {
    let neighbors = neighbor_lists(&state);
    let ids: Vec<String> = state
        .network()
        .real_intersections()
        .iter()
        .map(|&n| state.network().node_id(n).to_string())
        .collect();
    let mut feats = features_of(&state)?;
    for _ in 0..cfg.episode.decisions() {
        let q = q_values_batch(params, cfg, &feats, &neighbors)?;
        let actions: Vec<SignalPhase> = q
            .iter()
            .map(|qv| {
                if eps > 0.0 && rng.gen::<f64>() < eps {
                    SignalPhase::ALL[rng.gen_range(0..4)]
                } else {
                    qv.argmax()
                }
            })
            .collect();
        state.apply_actions(&joint_of(&state, &actions))?;
        state.advance_to_boundary();
        let next = features_of(&state)?;
        let rewards = ids
            .iter()
            .map(|id| Ok(intersection_reward(cfg, intersection_queue(&state, id)?)))
            .collect::<Result<Vec<_>>>()?;
        sink(Transition { state: std::mem::replace(&mut feats, next.clone()), actions, rewards, next_state: next });
    }
    Ok(state.metrics().att)
}

/// Trains the critic for `rounds` rounds; `env(round)` supplies a fresh episode.
pub fn train_critic(
    env: &mut dyn FnMut(usize) -> Result<SimState>,
    cfg: &CriticConfig,
    rounds: usize,
) -> Result<(CriticParams, TrainingLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = CriticParams::init(cfg, &mut rng);
    let mut target = params.clone();
    let mut adam: BTreeMap<String, AdamState> =
        params.params.iter().map(|(k, t)| (k.clone(), AdamState::new(t.shape()))).collect();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut log = TrainingLog::with_capacity(rounds);

    for round in 0..rounds {
        let eps = epsilon(cfg, round);
        let state = env(round)?;
        let neighbors = neighbor_lists(&state);
        run_round_episode(state, &params, cfg, eps, &mut rng, |t| buffer.push(t))?;

        let loss = if buffer.len() < cfg.batch_size {
            log::warn!("round {round}: replay buffer holds {} < batch size {}; skipping update", buffer.len(), cfg.batch_size);
            None
        } else {
            let take = cfg.sample_size.min(buffer.len());
            let picked = rand::seq::index::sample(&mut rng, buffer.len(), take).into_vec();
            let sample: Vec<&Transition> = picked.iter().map(|&i| buffer.get(i)).collect();
            let targets = bellman_targets(&target, cfg, &sample, &neighbors)?;
            let n = neighbors.len();
            let mut order: Vec<usize> = (0..sample.len()).collect();
            let (mut sum, mut steps) = (0.0, 0usize);
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&Transition> = chunk.iter().map(|&i| sample[i]).collect();
                    let y: Vec<f64> = chunk.iter().flat_map(|&i| targets[i * n..(i + 1) * n].iter().copied()).collect();
                    let (l, grads) = bellman_loss_with_targets(&params, cfg, &batch, &y, &neighbors)?;
                    for (name, value) in params.params.iter_mut() {
                        let state = adam.get_mut(name).expect("adam state per parameter");
                        let (next, next_state) = adam_step(value, &grads[name], state, cfg.learning_rate)?;
                        *value = next;
                        *state = next_state;
                    }
                    sum += l;
                    steps += 1;
                }
            }
            Some(sum / steps as f64)
        };

        if (round + 1) % cfg.target_update_interval == 0 {
            target = params.clone();
        }
        let greedy_att = run_round_episode(env(round)?, &params, cfg, 0.0, &mut rng, |_| {})?;
        log::info!("critic round {round}: eps {eps:.3} loss {loss:?} greedy ATT {greedy_att:.2}");
        log.push(RoundLog { round, epsilon: eps, loss, greedy_att, buffer_len: buffer.len() });
    }
    Ok((params, log))
}
