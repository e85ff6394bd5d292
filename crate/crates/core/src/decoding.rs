//! Construction decoders: greedy, beam search, and random reconstruction
//! (RRC) local improvement.

use crate::instances::{tour_cost, InstanceError, Tour, TspInstance};
use crate::model::{forward, ConstructionState, ModelError, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("instance too small: n={0} < 2")]
    TooSmall(usize),
    #[error("beam width must be >= 1")]
    ZeroBeam,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

/// A partial sequence in the beam, ordered by cumulative log-probability.
#[derive(Debug, Clone)]
pub struct BeamEntry {
    pub state: ConstructionState,
    pub sequence: Vec<u32>,
    pub score: f64,
    pub cost_so_far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerDecoder {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RrcConfig {
    pub iterations: usize,
    #[serde(default = "d_segment_min")]
    pub segment_min: usize,
    #[serde(default = "d_segment_max_frac")]
    pub segment_max_frac: f64,
    #[serde(default = "d_inner")]
    pub inner_decoder: InnerDecoder,
    #[serde(default)]
    pub seed: u64,
}

fn d_segment_min() -> usize {
    4
}
fn d_segment_max_frac() -> f64 {
    0.5
}
fn d_inner() -> InnerDecoder {
    InnerDecoder::Greedy
}

impl RrcConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            segment_min: d_segment_min(),
            segment_max_frac: d_segment_max_frac(),
            inner_decoder: d_inner(),
            seed,
        }
    }
}

/// Argmax with ties broken toward the lowest node id.
fn argmax_node(probs: &[f64], state: &ConstructionState) -> usize {
    let mut best = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (node, &p) in probs.iter().enumerate() {
        if !state.visited[node] && p > best_p {
            best_p = p;
            best = node;
        }
    }
    best
}

/// Greedy construction from node 0: one forward pass per step, argmax next
/// node, ties to the lowest id.
pub fn greedy_decode(
    params: &ModelParams,
    instance: &TspInstance,
    n_train: usize,
) -> Result<Tour, DecodeError> {
    let n = instance.n();
    if n < 2 {
        return Err(DecodeError::TooSmall(n));
    }
    let mut state = ConstructionState::initial(n, 0);
    let mut order = vec![0u32];
    while !state.is_terminal() {
        let probs = forward(params, instance, &state, n_train, n)?;
        let next = argmax_node(&probs, &state);
        state.visit(next);
        order.push(next as u32);
    }
    let cost = tour_cost(instance, &order)?;
    Ok(Tour { order, cost })
}

/// Beam search: rank partial sequences by cumulative log-probability, keep the
/// top `b` per step, and pick the cheapest completed tour at the end. Beam 1
/// degenerates to greedy exactly.
pub fn beam_decode(
    params: &ModelParams,
    instance: &TspInstance,
    b: usize,
    n_train: usize,
) -> Result<Tour, DecodeError> {
    let n = instance.n();
    if n < 2 {
        return Err(DecodeError::TooSmall(n));
    }
    if b == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    let mut beam = vec![BeamEntry {
        state: ConstructionState::initial(n, 0),
        sequence: vec![0],
        score: 0.0,
        cost_so_far: 0.0,
    }];
    for _ in 0..n - 1 {
        let mut candidates: Vec<BeamEntry> = Vec::with_capacity(beam.len() * n);
        for entry in &beam {
            let probs = forward(params, instance, &entry.state, n_train, n)?;
            for node in 0..n {
                if entry.state.visited[node] {
                    continue;
                }
                let mut state = entry.state.clone();
                let prev = state.current;
                state.visit(node);
                let mut sequence = entry.sequence.clone();
                sequence.push(node as u32);
                let d = dist(instance, prev, node);
                candidates.push(BeamEntry {
                    state,
                    sequence,
                    score: entry.score + probs[node].ln(),
                    cost_so_far: entry.cost_so_far + d,
                });
            }
        }
        // score descending; exact score ties resolved by sequence order so
        // pruning is deterministic and beam=1 matches greedy's lowest-id rule
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.sequence.cmp(&b.sequence))
        });
        candidates.truncate(b);
        beam = candidates;
    }
    // final selection by tour cost, not score
    let best = beam
        .into_iter()
        .map(|e| {
            let cost = e.cost_so_far + dist_u32(instance, e.sequence[n - 1], e.sequence[0]);
            (e.sequence, cost)
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(&b.0)))
        .expect("beam never empty");
    let cost = tour_cost(instance, &best.0)?;
    Ok(Tour { order: best.0, cost })
}

fn dist(instance: &TspInstance, a: usize, b: usize) -> f64 {
    let pa = instance.coords[a];
    let pb = instance.coords[b];
    ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
}

fn dist_u32(instance: &TspInstance, a: u32, b: u32) -> f64 {
    dist(instance, a as usize, b as usize)
}

/// Random reconstruction: remove the interior of a random segment of the
/// current cycle and let the model rebuild it between the segment's endpoints
/// (the same partial-solution context it was trained on); accept only strict
/// improvements. Returns the best tour and the per-iteration cost trace.
pub fn rrc_with_trace(
    params: &ModelParams,
    instance: &TspInstance,
    initial: &Tour,
    cfg: &RrcConfig,
    n_train: usize,
) -> Result<(Tour, Vec<f64>), DecodeError> {
    let n = instance.n();
    let mut best = initial.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l_max = ((cfg.segment_max_frac * n as f64).floor() as usize)
        .max(cfg.segment_min)
        .min(n - 1);
    for _ in 0..cfg.iterations {
        let l = rng.gen_range(cfg.segment_min..=l_max);
        let p = rng.gen_range(0..n);
        if l < 3 {
            trace.push(best.cost);
            continue; // no interior to rebuild
        }
        // segment occupies cyclic positions p..p+l; its interior is removed
        let seg: Vec<usize> =
            (0..l).map(|i| best.order[(p + i) % n] as usize).collect();
        let head = seg[0]; // stays attached to the preceding path
        let tail = seg[l - 1]; // stays attached to the following path
        let interior = &seg[1..l - 1];

        // partial-solution context: everything but the interior is visited;
        // the model walks from `head` and must end adjacent to `tail`, which
        // plays the sub-path-start role it saw in training
        let mut state = ConstructionState::initial(n, tail);
        for node in 0..n {
            if node != tail && !interior.contains(&node) {
                state.visited[node] = true;
            }
        }
        state.current = head;
        state.step = n - interior.len() - 1;

        let mut rebuilt = Vec::with_capacity(interior.len());
        let mut ok = true;
        for _ in 0..interior.len() {
            let probs = forward(params, instance, &state, n_train, n)?;
            let next = match cfg.inner_decoder {
                InnerDecoder::Greedy => argmax_node(&probs, &state),
                InnerDecoder::Sample => sample_node(&probs, &state, &mut rng),
            };
            if next == usize::MAX {
                ok = false;
                break;
            }
            state.visit(next);
            rebuilt.push(next as u32);
        }
        if ok {
            let mut order = Vec::with_capacity(n);
            order.push(head as u32);
            order.extend_from_slice(&rebuilt);
            order.push(tail as u32);
            for i in l..n {
                order.push(best.order[(p + i) % n]);
            }
            let cost = tour_cost(instance, &order)?;
            if cost < best.cost {
                best = Tour { order, cost };
            }
        }
        trace.push(best.cost);
    }
    Ok((best, trace))
}

pub fn rrc(
    params: &ModelParams,
    instance: &TspInstance,
    initial: &Tour,
    cfg: &RrcConfig,
    n_train: usize,
) -> Result<Tour, DecodeError> {
    rrc_with_trace(params, instance, initial, cfg, n_train).map(|(t, _)| t)
}

fn sample_node(probs: &[f64], state: &ConstructionState, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = (0..probs.len()).filter(|&i| !state.visited[i]).map(|i| probs[i]).sum();
    let mut u = rng.gen_range(0.0..1.0) * total;
    let mut last = usize::MAX;
    for (node, &p) in probs.iter().enumerate() {
        if state.visited[node] {
            continue;
        }
        last = node;
        if u < p {
            return node;
        }
        u -= p;
    }
    last // numeric slop: fall back to the final available node
}
