//! Supervised next-node training on partial reference tours: AdamW with the
//! exponential step-decay schedule, single-pass or multi-epoch over a labeled
//! dataset.

use crate::autodiff::Tape;
use crate::instances::TspInstance;
use crate::model::{forward_on_tape, BoundParams, ConstructionState, ModelError, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("tour too short for partial sampling: n={0} < 5")]
    TourTooShort(usize),
    #[error("instance {0} is missing a reference tour")]
    Unlabeled(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}: {loss}")]
    NonFinite { step: usize, loss: f64 },
    #[error(
        "single-pass mode needs count >= batch*steps: have {have}, need {need}"
    )]
    DatasetExhausted { have: u64, need: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad training-state file: {0}")]
    BadState(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epochs")]
pub enum TrainMode {
    SinglePass,
    Epochs(usize),
}

/// Full optimizer/schedule configuration; serialized verbatim into run
/// manifests so a run is auditable without its command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub total_steps: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_gamma")]
    pub decay_gamma: f64,
    #[serde(default = "d_decay_every")]
    pub decay_every: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_mode")]
    pub mode: TrainMode,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
}

fn d_batch() -> usize {
    1024
}
fn d_steps() -> usize {
    60_000
}
fn d_lr0() -> f64 {
    1.25e-4
}
fn d_gamma() -> f64 {
    0.997
}
fn d_decay_every() -> usize {
    100
}
fn d_wd() -> f64 {
    0.01
}
fn d_mode() -> TrainMode {
    TrainMode::SinglePass
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: d_batch(),
            total_steps: d_steps(),
            lr0: d_lr0(),
            decay_gamma: d_gamma(),
            decay_every: d_decay_every(),
            weight_decay: d_wd(),
            grad_clip: None,
            seed: 0,
            mode: d_mode(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr0 <= 0.0 {
            return Err(TrainError::InvalidConfig("lr0 must be positive".into()));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(TrainError::InvalidConfig("decay_gamma must be in (0,1]".into()));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size and decay_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Schedule: lr0 * gamma^(step / decay_every), integer division.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr0 * self.decay_gamma.powi((step / self.decay_every) as i32)
    }
}

/// AdamW accumulators, flat over the checkpoint parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let len = params.flatten().len();
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One supervised example: a partially-constructed tour plus the true next
/// node along the reference solution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub instance: TspInstance,
    pub state: ConstructionState,
    pub target: usize,
}

/// Draws a partial solution from a reference tour: random orientation,
/// sub-path length l ~ U{4..n}, random rotation; the first l-1 nodes are
/// visited and the l-th is the supervision target.
pub fn sample_partial(
    tour: &[u32],
    rng: &mut ChaCha8Rng,
) -> Result<(ConstructionState, usize), TrainError> {
    let n = tour.len();
    if n < 5 {
        return Err(TrainError::TourTooShort(n));
    }
    let mut order: Vec<usize> = tour.iter().map(|&v| v as usize).collect();
    if rng.gen_bool(0.5) {
        order.reverse();
    }
    let l = rng.gen_range(4..=n);
    let s0 = rng.gen_range(0..n);
    let path: Vec<usize> = (0..l).map(|i| order[(s0 + i) % n]).collect();
    let mut state = ConstructionState::initial(n, path[0]);
    for &node in &path[1..l - 1] {
        state.visit(node);
    }
    Ok((state, path[l - 1]))
}

/// Mean negative log probability of the batch targets, differentiable through
/// `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    samples: &[Sample],
    n_train: usize,
) -> Result<crate::autodiff::Var, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut acc = None;
    for s in samples {
        let out = forward_on_tape(tape, bound, &s.instance, &s.state, n_train, s.instance.n())?;
        let slot = out
            .avail
            .iter()
            .position(|&v| v == s.target)
            .ok_or(ModelError::NoAvailableNode)?
            + 1;
        let p = tape.pick(out.probs, 0, slot).map_err(ModelError::Tape)?;
        let lp = tape.log(p);
        acc = Some(match acc {
            None => lp,
            Some(prev) => tape.add(prev, lp).map_err(ModelError::Tape)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), -1.0 / samples.len() as f64))
}

/// One forward/backward/AdamW update. Returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    samples: &[Sample],
    n_train: usize,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = BoundParams::load(&mut tape, params, true);
    let loss = batch_loss(&mut tape, &bound, samples, n_train)?;
    let loss_val = tape.scalar(loss);
    if !loss_val.is_finite() {
        return Err(TrainError::NonFinite { step: opt.step, loss: loss_val });
    }
    tape.backward(loss).map_err(ModelError::Tape)?;

    // flat gradient in checkpoint order
    let mut grad = Vec::with_capacity(opt.m.len());
    for v in bound.vars_in_order() {
        match tape.grad(v) {
            Some(g) => grad.extend_from_slice(g),
            None => {
                let (r, c) = tape.shape(v);
                grad.extend(std::iter::repeat(0.0).take(r * c));
            }
        }
    }
    debug_assert_eq!(grad.len(), opt.m.len());

    if let Some(clip) = cfg.grad_clip {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > clip {
            let k = clip / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
    }

    // decay flags per scalar, in the same flat order
    let mut flat = params.flatten();
    let mut decay = Vec::with_capacity(flat.len());
    for t in params.tensors() {
        decay.extend(std::iter::repeat(t.decay).take(t.len()));
    }

    opt.step += 1;
    let t = opt.step as i32;
    let lr = cfg.lr_at(opt.step - 1);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..flat.len() {
        let g = grad[i];
        opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * g;
        opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        let mut update = mhat / (vhat.sqrt() + cfg.eps);
        if decay[i] {
            update += cfg.weight_decay * flat[i]; // decoupled decay
        }
        flat[i] -= lr * update;
    }
    params.unflatten(&flat)?;
    Ok(loss_val)
}

/// Mixes a salt into the dataset seed so sample randomness (orientation,
/// sub-path) is independent of instance-generation randomness.
fn sample_rng(seed: u64, global_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::instances::instance_seed(
        seed ^ 0xa5a5_5a5a_dead_beef,
        global_index,
    ))
}

/// Assembles the batch for `step`: instance index and per-sample RNG are both
/// pure functions of (seed, step, slot), so any thread count and any
/// resume point reproduce the same batches.
pub fn assemble_batch(
    cfg: &TrainConfig,
    instances: &[TspInstance],
    step: usize,
) -> Result<Vec<Sample>, TrainError> {
    (0..cfg.batch_size)
        .into_par_iter()
        .map(|j| {
            let global = (step * cfg.batch_size + j) as u64;
            let idx = match cfg.mode {
                TrainMode::SinglePass => global as usize,
                TrainMode::Epochs(_) => (global % instances.len() as u64) as usize,
            };
            let inst = &instances[idx];
            let tour = inst.ref_tour.as_ref().ok_or(TrainError::Unlabeled(idx))?;
            let mut rng = sample_rng(cfg.seed, global);
            let (state, target) = sample_partial(tour, &mut rng)?;
            Ok(Sample { instance: inst.clone(), state, target })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Runs steps `start_step..limit` where limit is `total_steps` (single-pass)
/// or `epochs * floor(count/batch)` (epochs mode). `on_step` fires after each
/// update (checkpointing, logging).
pub fn run_training(
    cfg: &TrainConfig,
    instances: &[TspInstance],
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    start_step: usize,
    mut on_step: impl FnMut(&LossPoint, &ModelParams, &OptimizerState),
) -> Result<Vec<LossPoint>, TrainError> {
    cfg.validate()?;
    let n_train = instances.first().map(|i| i.n()).unwrap_or(0);
    let total = match cfg.mode {
        TrainMode::SinglePass => {
            let need = (cfg.batch_size * cfg.total_steps) as u64;
            if (instances.len() as u64) < need {
                return Err(TrainError::DatasetExhausted {
                    have: instances.len() as u64,
                    need,
                });
            }
            cfg.total_steps
        }
        TrainMode::Epochs(k) => k * (instances.len() / cfg.batch_size),
    };
    let mut curve = Vec::with_capacity(total.saturating_sub(start_step));
    for step in start_step..total {
        let batch = assemble_batch(cfg, instances, step)?;
        let loss = train_step(params, opt, cfg, &batch, n_train)?;
        let point = LossPoint { step, lr: cfg.lr_at(step), loss };
        on_step(&point, params, opt);
        curve.push(point);
    }
    Ok(curve)
}

const STATE_MAGIC: &[u8; 4] = b"DTTS";

/// Persists optimizer moments + step so an interrupted run resumes
/// bit-exactly (the parameters themselves live in the f32 checkpoint, so the
/// resume path stores them here too, at full precision).
pub fn save_train_state(
    path: &Path,
    params: &ModelParams,
    opt: &OptimizerState,
) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STATE_MAGIC)?;
    w.write_all(&(opt.step as u64).to_le_bytes())?;
    let flat = params.flatten();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for buf in [&flat, &opt.m, &opt.v] {
        for v in buf.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_train_state(
    path: &Path,
    params: &mut ModelParams,
) -> Result<OptimizerState, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(TrainError::BadState("bad magic".into()));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let step = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let len = u64::from_le_bytes(buf8) as usize;
    if len != params.flatten().len() {
        return Err(TrainError::BadState(format!(
            "state has {len} parameters, model needs {}",
            params.flatten().len()
        )));
    }
    let read_vec = |r: &mut BufReader<File>| -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let flat = read_vec(&mut r)?;
    let m = read_vec(&mut r)?;
    let v = read_vec(&mut r)?;
    params.unflatten(&flat)?;
    Ok(OptimizerState { m, v, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_labeled, DistributionKind, LabelKind, Source};
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 16, 2, 8, 64)
    }

    fn labeled(n: usize, count: u64, seed: u64) -> Vec<TspInstance> {
        generate_labeled(DistributionKind::Uniform, n, count, seed, LabelKind::HeldKarp).unwrap()
    }

    #[test]
    fn lr_schedule_closed_form() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1.25e-4);
        assert_eq!(cfg.lr_at(99), 1.25e-4);
        assert!((cfg.lr_at(100) - 1.25e-4 * 0.997).abs() < 1e-18);
        for step in [0usize, 1, 99, 100, 101, 500, 99_999] {
            let expect = 1.25e-4 * 0.997f64.powi((step / 100) as i32);
            assert_eq!(cfg.lr_at(step), expect);
        }
    }

    #[test]
    fn sample_partial_contract() {
        let insts = labeled(8, 1, 5);
        let tour = insts[0].ref_tour.clone().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut target_seen = vec![false; 8];
        for _ in 0..10_000 {
            let (state, target) = sample_partial(&tour, &mut rng).unwrap();
            assert!(!state.visited[target], "target must be available");
            target_seen[target] = true;
            // visited nodes form a contiguous sub-path of the tour in one
            // orientation, of length l-1 in {3..n-1}
            let k = state.visited.iter().filter(|&&v| v).count();
            assert!((3..=7).contains(&k));
        }
        assert!(target_seen.iter().all(|&v| v), "coverage: {target_seen:?}");
    }

    #[test]
    fn sample_partial_forced_move_when_full_length() {
        let tour: Vec<u32> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // draw until l == n: then exactly one available node, the target
        for _ in 0..200 {
            let (state, target) = sample_partial(&tour, &mut rng).unwrap();
            let avail = state.available();
            if avail.len() == 1 {
                assert_eq!(avail[0], target);
                return;
            }
        }
        panic!("never drew l == n in 200 samples");
    }

    #[test]
    fn short_tour_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_partial(&[0, 1, 2, 3], &mut rng),
            Err(TrainError::TourTooShort(4))
        ));
    }

    #[test]
    fn symmetric_loss_is_ln_k() {
        // All nodes at the same coordinate: untrained ReZero model predicts
        // uniformly over the k available nodes, so NLL = ln(k).
        let params = ModelParams::init(tiny(), 2).unwrap();
        let n = 6;
        let instance = TspInstance {
            coords: vec![[0.25, 0.75]; n],
            raw_coords: None,
            ref_tour: None,
            ref_cost: None,
            source: Source::Generated { kind: DistributionKind::Uniform, seed: 0 },
        };
        let state = ConstructionState::initial(n, 0);
        let sample = Sample { instance, state, target: 3 };
        let mut tape = Tape::new();
        let bound = BoundParams::load(&mut tape, &params, false);
        let loss = batch_loss(&mut tape, &bound, &[sample], n).unwrap();
        let k = (n - 1) as f64;
        assert!((tape.scalar(loss) - k.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        // Gradient of a constant loss is zero; with weight_decay = 0 the
        // AdamW update must leave every parameter unchanged.
        let mut params = ModelParams::init(tiny(), 4).unwrap();
        let before = params.flatten();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = OptimizerState::new(&params);
        // hand-rolled step with an all-zero gradient
        let grad = vec![0.0; before.len()];
        opt.step += 1;
        let mut flat = params.flatten();
        for i in 0..flat.len() {
            opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * grad[i];
            opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = opt.m[i] / (1.0 - cfg.beta1);
            let vhat = opt.v[i] / (1.0 - cfg.beta2);
            flat[i] -= cfg.lr_at(0) * (mhat / (vhat.sqrt() + cfg.eps));
        }
        params.unflatten(&flat).unwrap();
        assert_eq!(params.flatten(), before);
    }

    #[test]
    fn ten_steps_bit_identical() {
        let insts = labeled(7, 64, 11);
        let cfg = TrainConfig {
            batch_size: 4,
            total_steps: 10,
            mode: TrainMode::Epochs(0), // limit via explicit loop below
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut params = ModelParams::init(tiny(), 8).unwrap();
            let mut opt = OptimizerState::new(&params);
            for step in 0..10 {
                let cfg_e = TrainConfig { mode: TrainMode::Epochs(1), ..cfg.clone() };
                let batch = assemble_batch(&cfg_e, &insts, step).unwrap();
                train_step(&mut params, &mut opt, &cfg_e, &batch, 7).unwrap();
            }
            params.flatten()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_tensor_moves_after_one_step() {
        let insts = labeled(7, 8, 13);
        let cfg = TrainConfig {
            batch_size: 8,
            seed: 5,
            mode: TrainMode::Epochs(1),
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(tiny(), 21).unwrap();
        // at exact ReZero init the start embedding has identically-zero
        // gradient (its only route to the loss is the zeroed attention path);
        // nonzero alphas make every tensor live
        for l in params.layers.iter_mut() {
            l.alpha1 = 0.1;
            l.alpha2 = 0.1;
        }
        let mut opt = OptimizerState::new(&params);
        let before = params.flatten();
        let batch = assemble_batch(&cfg, &insts, 0).unwrap();
        train_step(&mut params, &mut opt, &cfg, &batch, 7).unwrap();
        let after = params.flatten();
        // per-tensor: some element changed (ReZero alphas receive gradient
        // through the residual product even at alpha = 0)
        let mut offset = 0;
        for t in params.tensors() {
            let len = t.len();
            let changed = (offset..offset + len).any(|i| before[i] != after[i]);
            assert!(changed, "tensor {} unchanged", t.name);
            offset += len;
        }
    }

    #[test]
    fn loss_decreases_on_tiny_run() {
        let insts = labeled(7, 256, 17);
        let cfg = TrainConfig {
            batch_size: 16,
            seed: 2,
            mode: TrainMode::Epochs(5),
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(tiny(), 1).unwrap();
        let mut opt = OptimizerState::new(&params);
        let curve = run_training(&cfg, &insts, &mut params, &mut opt, 0, |_, _, _| {}).unwrap();
        assert_eq!(curve.len(), 5 * (256 / 16));
        let first = curve[0].loss;
        let last = curve.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn single_pass_accounting() {
        let insts = labeled(7, 32, 19);
        let cfg = TrainConfig {
            batch_size: 8,
            total_steps: 4,
            seed: 1,
            mode: TrainMode::SinglePass,
            ..TrainConfig::default()
        };
        let mut params = ModelParams::init(tiny(), 2).unwrap();
        let mut opt = OptimizerState::new(&params);
        let curve = run_training(&cfg, &insts, &mut params, &mut opt, 0, |_, _, _| {}).unwrap();
        assert_eq!(curve.len(), 4); // 4 steps x 8 = exactly the 32 instances

        let starved = TrainConfig { total_steps: 5, ..cfg };
        let mut p2 = ModelParams::init(tiny(), 2).unwrap();
        let mut o2 = OptimizerState::new(&p2);
        assert!(matches!(
            run_training(&starved, &insts, &mut p2, &mut o2, 0, |_, _, _| {}),
            Err(TrainError::DatasetExhausted { have: 32, need: 40 })
        ));
    }

    #[test]
    fn resume_reproduces_run_bit_exactly() {
        let insts = labeled(7, 128, 23);
        let cfg = TrainConfig {
            batch_size: 8,
            seed: 9,
            mode: TrainMode::Epochs(2),
            ..TrainConfig::default()
        };
        // straight run: 32 steps
        let mut params_a = ModelParams::init(tiny(), 6).unwrap();
        let mut opt_a = OptimizerState::new(&params_a);
        run_training(&cfg, &insts, &mut params_a, &mut opt_a, 0, |_, _, _| {}).unwrap();

        // interrupted run: stop at 16, persist, reload, continue
        let dir = std::env::temp_dir().join("deeptour-train-test");
        std::fs::create_dir_all(&dir).unwrap();
        let state_path = dir.join("mid.state");
        let mut params_b = ModelParams::init(tiny(), 6).unwrap();
        let mut opt_b = OptimizerState::new(&params_b);
        let half = TrainConfig { mode: TrainMode::Epochs(1), ..cfg.clone() };
        run_training(&half, &insts, &mut params_b, &mut opt_b, 0, |_, _, _| {}).unwrap();
        save_train_state(&state_path, &params_b, &opt_b).unwrap();

        let mut params_c = ModelParams::zeros(tiny()).unwrap();
        let mut opt_c = load_train_state(&state_path, &mut params_c).unwrap();
        assert_eq!(opt_c.step, 16);
        run_training(&cfg, &insts, &mut params_c, &mut opt_c, 16, |_, _, _| {}).unwrap();

        assert_eq!(params_a.flatten(), params_c.flatten());
        assert_eq!(opt_a, opt_c);
    }

    #[test]
    fn batch_loss_grad_check() {
        // end-to-end gradient of the batched loss vs central differences
        let insts = labeled(6, 4, 29);
        let cfg = TrainConfig {
            batch_size: 4,
            seed: 7,
            mode: TrainMode::Epochs(1),
            ..TrainConfig::default()
        };
        let samples = assemble_batch(&cfg, &insts, 0).unwrap();
        let mcfg = tiny();
        let params = ModelParams::init(mcfg, 12).unwrap();
        let flat = params.flatten();

        let loss_of = |vals: &[f64]| {
            let mut p = ModelParams::zeros(mcfg).unwrap();
            p.unflatten(vals).unwrap();
            let mut tape = Tape::new();
            let bound = BoundParams::load(&mut tape, &p, false);
            let l = batch_loss(&mut tape, &bound, &samples, 6).unwrap();
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let bound = BoundParams::load(&mut tape, &params, true);
        let loss = batch_loss(&mut tape, &bound, &samples, 6).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for v in bound.vars_in_order() {
            match tape.grad(v) {
                Some(g) => analytic.extend_from_slice(g),
                None => {
                    let (r, c) = tape.shape(v);
                    analytic.extend(std::iter::repeat(0.0).take(r * c));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let eps = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..flat.len());
            let mut up = flat.clone();
            up[i] += eps;
            let mut dn = flat.clone();
            dn[i] -= eps;
            let central = (loss_of(&up) - loss_of(&dn)) / (2.0 * eps);
            let rel =
                (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
            assert!(rel < 1e-4, "param {i}: {} vs {central}", analytic[i]);
        }
    }
}
