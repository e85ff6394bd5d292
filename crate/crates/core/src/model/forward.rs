//! Forward pass: embedding, gated-attention blocks, masked output head.

use super::{ConstructionState, Linear, ModelConfig, ModelError, ModelParams};
use crate::autodiff::{Tape, TapeError, Var};
use crate::instances::TspInstance;

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub wg: BoundLinear,
    pub ffn1: BoundLinear,
    pub ffn2: BoundLinear,
    pub alpha1: Var,
    pub alpha2: Var,
}

/// Model parameters materialized as tape leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub config: ModelConfig,
    pub embed_all: BoundLinear,
    pub embed_start: BoundLinear,
    pub embed_current: BoundLinear,
    pub layers: Vec<BoundLayer>,
    pub head: BoundLinear,
}

impl BoundParams {
    /// Loads every parameter tensor onto `tape`, in checkpoint order.
    pub fn load(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let lin = |tape: &mut Tape, l: &Linear| BoundLinear {
            w: tape.leaf(l.rows, l.cols, l.w.clone(), trainable),
            b: tape.leaf(1, l.cols, l.b.clone(), trainable),
        };
        let embed_all = lin(tape, &params.embed_all);
        let embed_start = lin(tape, &params.embed_start);
        let embed_current = lin(tape, &params.embed_current);
        let layers = params
            .layers
            .iter()
            .map(|layer| BoundLayer {
                wq: lin(tape, &layer.wq),
                wk: lin(tape, &layer.wk),
                wv: lin(tape, &layer.wv),
                wo: lin(tape, &layer.wo),
                wg: lin(tape, &layer.wg),
                ffn1: lin(tape, &layer.ffn1),
                ffn2: lin(tape, &layer.ffn2),
                alpha1: tape.leaf(1, 1, vec![layer.alpha1], trainable),
                alpha2: tape.leaf(1, 1, vec![layer.alpha2], trainable),
            })
            .collect();
        let head = lin(tape, &params.head);
        Self {
            config: params.config,
            embed_all,
            embed_start,
            embed_current,
            layers,
            head,
        }
    }

    /// Leaf handles in the same order as `ModelParams::tensors`.
    pub fn vars_in_order(&self) -> Vec<Var> {
        let mut out = Vec::new();
        fn lin(out: &mut Vec<Var>, l: &BoundLinear) {
            out.push(l.w);
            out.push(l.b);
        }
        lin(&mut out, &self.embed_all);
        lin(&mut out, &self.embed_start);
        lin(&mut out, &self.embed_current);
        for layer in &self.layers {
            lin(&mut out, &layer.wq);
            lin(&mut out, &layer.wk);
            lin(&mut out, &layer.wv);
            lin(&mut out, &layer.wo);
            lin(&mut out, &layer.wg);
            lin(&mut out, &layer.ffn1);
            lin(&mut out, &layer.ffn2);
            out.push(layer.alpha1);
            out.push(layer.alpha2);
        }
        lin(&mut out, &self.head);
        out
    }
}

fn linear(tape: &mut Tape, x: Var, l: &BoundLinear) -> Result<Var, TapeError> {
    let y = tape.matmul(x, l.w)?;
    tape.add_bias(y, l.b)
}

/// Output of one decoding-step forward pass.
pub struct ForwardOutput {
    /// 1 x s probability row: index 0 is the start row, 1..=a the available
    /// nodes in ascending id order, s-1 the current row. Masked rows are
    /// exactly 0.
    pub probs: Var,
    /// Node ids of the available rows, ascending.
    pub avail: Vec<usize>,
    /// Final-layer embeddings, s x width.
    pub hidden: Var,
}

/// The attention-score multiplier applied on top of 1/sqrt(d_k) at inference;
/// exactly 1.0 in-distribution so the corrected and uncorrected paths are
/// bit-identical there.
pub fn size_scale(n_train: usize, n_test: usize) -> f64 {
    if n_test == n_train {
        1.0
    } else {
        (n_test as f64).ln() / (n_train as f64).ln()
    }
}

/// One decoding step on an existing tape (used by training, which shares the
/// tape across a batch).
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    instance: &TspInstance,
    state: &ConstructionState,
    n_train: usize,
    n_test: usize,
) -> Result<ForwardOutput, ModelError> {
    let cfg = &bound.config;
    let avail = state.available();
    if avail.is_empty() {
        return Err(ModelError::NoAvailableNode);
    }
    let a = avail.len();
    let s = a + 2;
    let n_scale = size_scale(n_train, n_test);

    // Embedding: start row, available rows (ascending id), current row.
    let start_c = tape.constant(1, 2, instance.coords[state.start].to_vec());
    let cur_c = tape.constant(1, 2, instance.coords[state.current].to_vec());
    let avail_c = {
        let mut v = Vec::with_capacity(a * 2);
        for &i in &avail {
            v.extend_from_slice(&instance.coords[i]);
        }
        tape.constant(a, 2, v)
    };
    let start_e = linear(tape, start_c, &bound.embed_start)?;
    let avail_e = linear(tape, avail_c, &bound.embed_all)?;
    let cur_e = linear(tape, cur_c, &bound.embed_current)?;
    let mut x = tape.concat_rows(&[start_e, avail_e, cur_e])?;

    let score_scale = n_scale / (cfg.qkv_dim as f64).sqrt();
    for layer in &bound.layers {
        let attn = gated_attention(tape, x, layer, cfg, score_scale)?;
        let h_hat = if cfg.rezero {
            let scaled = tape.mul_scalar(attn, layer.alpha1)?;
            tape.add(x, scaled)?
        } else {
            tape.add(x, attn)?
        };
        let f1 = linear(tape, h_hat, &layer.ffn1)?;
        let act = tape.relu(f1);
        let ffn = linear(tape, act, &layer.ffn2)?;
        x = if cfg.rezero {
            let scaled = tape.mul_scalar(ffn, layer.alpha2)?;
            tape.add(h_hat, scaled)?
        } else {
            tape.add(h_hat, ffn)?
        };
    }

    let logits_col = linear(tape, x, &bound.head)?; // s x 1
    let logits = tape.transpose(logits_col); // 1 x s
    let mut mask = vec![false; s];
    mask[0] = true; // start row
    mask[s - 1] = true; // current row
    let probs = tape.masked_softmax(logits, &mask)?;
    Ok(ForwardOutput { probs, avail, hidden: x })
}

fn gated_attention(
    tape: &mut Tape,
    x: Var,
    layer: &BoundLayer,
    cfg: &ModelConfig,
    score_scale: f64,
) -> Result<Var, ModelError> {
    let q = linear(tape, x, &layer.wq)?;
    let k = linear(tape, x, &layer.wk)?;
    let v = linear(tape, x, &layer.wv)?;
    let dk = cfg.qkv_dim;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, score_scale);
        let weights = tape.softmax(scaled)?; // full bidirectional attention
        heads.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let mha = linear(tape, cat, &layer.wo)?;
    if cfg.gated_attention {
        let g_lin = linear(tape, x, &layer.wg)?;
        let gate = tape.sigmoid(g_lin);
        Ok(tape.hadamard(mha, gate)?)
    } else {
        Ok(mha)
    }
}

/// Probability over all n nodes for the next move: visited nodes are exactly
/// 0, available nodes sum to 1.
pub fn forward(
    params: &ModelParams,
    instance: &TspInstance,
    state: &ConstructionState,
    n_train: usize,
    n_test: usize,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::load(&mut tape, params, false);
    let out = forward_on_tape(&mut tape, &bound, instance, state, n_train, n_test)?;
    let row = tape.values(out.probs);
    let mut probs = vec![0.0; instance.n()];
    for (slot, &node) in out.avail.iter().enumerate() {
        probs[node] = row[slot + 1];
    }
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::instances::{generate, DistributionKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(2, 16, 2, 8, 64)
    }

    fn inst(n: usize, seed: u64) -> crate::instances::TspInstance {
        generate(DistributionKind::Uniform, n, seed).unwrap()
    }

    #[test]
    fn embedding_shape_arithmetic() {
        let params = ModelParams::init(tiny_config(), 0).unwrap();
        let instance = inst(4, 1);
        let state = ConstructionState::initial(4, 0);
        let mut tape = Tape::new();
        let bound = BoundParams::load(&mut tape, &params, false);
        let out = forward_on_tape(&mut tape, &bound, &instance, &state, 4, 4).unwrap();
        // a=3 available nodes plus start and current rows
        assert_eq!(tape.shape(out.probs), (1, 5));
        assert_eq!(tape.shape(out.hidden), (5, 16));
    }

    #[test]
    fn zero_coordinates_give_bias_rows() {
        let mut params = ModelParams::init(tiny_config(), 0).unwrap();
        for (i, b) in params.embed_all.b.iter_mut().enumerate() {
            *b = i as f64 * 0.1;
        }
        let instance = crate::instances::TspInstance {
            coords: vec![[0.0, 0.0]; 4],
            raw_coords: None,
            ref_tour: None,
            ref_cost: None,
            source: crate::instances::Source::Generated {
                kind: DistributionKind::Uniform,
                seed: 0,
            },
        };
        let state = ConstructionState::initial(4, 0);
        let mut tape = Tape::new();
        let bound = BoundParams::load(&mut tape, &params, false);
        let start_c = tape.constant(1, 2, vec![0.0, 0.0]);
        let row = linear(&mut tape, start_c, &bound.embed_all).unwrap();
        assert_eq!(tape.values(row), params.embed_all.b.as_slice());
        // and the full forward still runs on the degenerate instance
        forward(&params, &instance, &state, 4, 4).unwrap();
    }

    #[test]
    fn rezero_init_probs_from_raw_embeddings() {
        // At fresh ReZero init the blocks are identities, so two available
        // nodes with identical coordinates get equal probability.
        let params = ModelParams::init(tiny_config(), 7).unwrap();
        let mut instance = inst(5, 2);
        instance.coords[3] = instance.coords[4];
        let state = ConstructionState::initial(5, 0);
        let probs = forward(&params, &instance, &state, 5, 5).unwrap();
        assert!((probs[3] - probs[4]).abs() < 1e-15);
        assert_eq!(probs[0], 0.0);
    }

    #[test]
    fn rezero_blocks_are_identity_at_init() {
        let params = ModelParams::init(tiny_config(), 3).unwrap();
        let instance = inst(6, 4);
        let state = ConstructionState::initial(6, 2);
        let mut tape = Tape::new();
        let bound = BoundParams::load(&mut tape, &params, false);
        let out = forward_on_tape(&mut tape, &bound, &instance, &state, 6, 6).unwrap();
        // hidden must equal the raw embedding rows exactly
        let start_c = tape.constant(1, 2, instance.coords[2].to_vec());
        let start_e = linear(&mut tape, start_c, &bound.embed_start).unwrap();
        let hidden_row0 = tape.values(out.hidden)[..16].to_vec();
        assert_eq!(hidden_row0, tape.values(start_e));
    }

    #[test]
    fn probabilities_normalized_and_masked() {
        let params = ModelParams::init(tiny_config(), 11).unwrap();
        let instance = inst(8, 9);
        let mut state = ConstructionState::initial(8, 0);
        state.visit(5);
        state.visit(2);
        let probs = forward(&params, &instance, &state, 8, 8).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(probs[0], 0.0);
        assert_eq!(probs[5], 0.0);
        assert_eq!(probs[2], 0.0);
    }

    #[test]
    fn log_n_neutral_in_distribution() {
        let mut params = ModelParams::init(tiny_config(), 13).unwrap();
        // nonzero residual scalars so the attention path is live
        for l in params.layers.iter_mut() {
            l.alpha1 = 0.5;
            l.alpha2 = 0.5;
        }
        let instance = inst(7, 5);
        let state = ConstructionState::initial(7, 0);
        let a = forward(&params, &instance, &state, 7, 7).unwrap();
        let b = forward(&params, &instance, &state, 10, 7).unwrap();
        assert_ne!(a, b, "cross-size correction must engage when n differs");
        assert_eq!(size_scale(7, 7), 1.0);
    }

    #[test]
    fn permutation_equivariance() {
        // Relabeling two available nodes swaps their probabilities exactly.
        let params = ModelParams::init(tiny_config(), 17).unwrap();
        let mut instance = inst(6, 8);
        let state = ConstructionState::initial(6, 0);
        let before = forward(&params, &instance, &state, 6, 6).unwrap();
        instance.coords.swap(2, 4);
        let after = forward(&params, &instance, &state, 6, 6).unwrap();
        assert_eq!(before[2], after[4]);
        assert_eq!(before[4], after[2]);
        assert_eq!(before[1], after[1]);
    }

    #[test]
    fn terminal_state_is_error() {
        let params = ModelParams::init(tiny_config(), 0).unwrap();
        let instance = inst(4, 0);
        let mut state = ConstructionState::initial(4, 0);
        state.visit(1);
        state.visit(2);
        state.visit(3);
        assert!(matches!(
            forward(&params, &instance, &state, 4, 4),
            Err(ModelError::NoAvailableNode)
        ));
    }

    #[test]
    fn gate_disabled_matches_plain_mha_shape() {
        let mut cfg = tiny_config();
        cfg.gated_attention = false;
        let params = ModelParams::init(cfg, 19).unwrap();
        let instance = inst(5, 3);
        let state = ConstructionState::initial(5, 0);
        let probs = forward(&params, &instance, &state, 5, 5).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gate_weights_halve_attention() {
        // W_G = 0, b_G = 0 -> sigmoid gate is 0.5 everywhere, so the gated
        // output is half of plain MHA.
        let mut params = ModelParams::init(tiny_config(), 23).unwrap();
        // make residual paths visible
        for l in params.layers.iter_mut() {
            l.alpha1 = 0.7;
            l.wg.w.iter_mut().for_each(|v| *v = 0.0);
            l.wg.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let instance = inst(5, 6);
        let state = ConstructionState::initial(5, 0);
        let gated = forward(&params, &instance, &state, 5, 5).unwrap();

        let mut plain = params.clone();
        plain.config.gated_attention = false;
        // halve the attention contribution instead of gating
        for l in plain.layers.iter_mut() {
            l.alpha1 = 0.35;
        }
        let halved = forward(&plain, &instance, &state, 5, 5).unwrap();
        for (a, b) in gated.iter().zip(&halved) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_row_attention_is_identity_weight() {
        // With one available node, each attention row still softmaxes over
        // the 3 context rows; a degenerate 1-row input would give weight 1.0.
        let mut tape = Tape::new();
        let x = tape.constant(1, 4, vec![0.3, -0.2, 0.9, 0.1]);
        let xt = tape.transpose(x);
        let scores = tape.matmul(x, xt).unwrap();
        let w = tape.softmax(scores).unwrap();
        assert_eq!(tape.values(w), &[1.0]);
    }

    #[test]
    fn full_model_grad_check() {
        // Gradient of the NLL through the whole model w.r.t. a sample of
        // parameters, against central differences on the flattened vector.
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 29).unwrap();
        let instance = inst(6, 10);
        let mut state = ConstructionState::initial(6, 0);
        state.visit(3);
        let target = 5usize;

        let flat = params.flatten();
        let loss_of = |flat_vals: &[f64]| -> f64 {
            let mut p = ModelParams::zeros(cfg).unwrap();
            p.unflatten(flat_vals).unwrap();
            let probs = forward(&p, &instance, &state, 6, 6).unwrap();
            -probs[target].ln()
        };

        // analytic gradient
        let mut tape = Tape::new();
        let mut p = ModelParams::zeros(cfg).unwrap();
        p.unflatten(&flat).unwrap();
        let bound = BoundParams::load(&mut tape, &p, true);
        let out = forward_on_tape(&mut tape, &bound, &instance, &state, 6, 6).unwrap();
        let slot = out.avail.iter().position(|&v| v == target).unwrap() + 1;
        let picked = tape.pick(out.probs, 0, slot).unwrap();
        let lp = tape.log(picked);
        let loss = tape.scale(lp, -1.0);
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for v in bound.vars_in_order() {
            match tape.grad(v) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat(0.0).take({
                    let (r, c) = tape.shape(v);
                    r * c
                })),
            }
        }
        assert_eq!(analytic.len(), flat.len());

        // spot-check >= 20 random parameters with central differences
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eps = 1e-5;
        let mut checked = 0;
        while checked < 25 {
            let i = rng.gen_range(0..flat.len());
            let mut up = flat.clone();
            up[i] += eps;
            let mut dn = flat.clone();
            dn[i] -= eps;
            let central = (loss_of(&up) - loss_of(&dn)) / (2.0 * eps);
            let rel = (analytic[i] - central).abs()
                / (analytic[i].abs() + central.abs() + 1e-12);
            assert!(rel < 1e-4, "param {i}: analytic {} central {central}", analytic[i]);
            checked += 1;
        }
    }

    #[test]
    fn block_grad_check() {
        // One decoder block as a function of its input rows.
        let cfg = tiny_config();
        let mut params = ModelParams::init(cfg, 31).unwrap();
        params.layers[0].alpha1 = 0.4;
        params.layers[0].alpha2 = -0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = params.clone();
        let err = finite_difference_check(3, 16, &x0, 1e-5, move |tape, leaf| {
            let bound = BoundParams::load(tape, &p, false);
            let layer = &bound.layers[0];
            let attn = gated_attention(tape, leaf, layer, &cfg, 1.0 / (8f64).sqrt())
                .map_err(|_| crate::autodiff::TapeError::Dimension("attn".into()))?;
            let scaled = tape.mul_scalar(attn, layer.alpha1)?;
            let h_hat = tape.add(leaf, scaled)?;
            let f1 = linear(tape, h_hat, &layer.ffn1)?;
            let act = tape.relu(f1);
            let ffn = linear(tape, act, &layer.ffn2)?;
            let s2 = tape.mul_scalar(ffn, layer.alpha2)?;
            let out = tape.add(h_hat, s2)?;
            Ok(tape.sum(out))
        })
        .unwrap();
        assert!(err < 1e-5, "block grad err {err}");
    }
}
