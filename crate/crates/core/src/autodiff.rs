//! Minimal dense reverse-mode automatic differentiation.
//!
//! Tensors are 2-D row-major `f64` buffers owned by a [`Tape`]. Every forward
//! op records a node with its local gradient rule; [`Tape::backward`] walks the
//! tape once in reverse. Tapes are single-threaded and rebuilt per forward
//! pass, which keeps the rules auditable and handles the varying sequence
//! lengths of step-wise decoding.
//!
//! Broadcasting is deliberately restricted: scalar-vs-tensor (`scale`),
//! equal-shape elementwise, and a dedicated row-bias add. Nothing else.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("softmax row {0} is fully masked")]
    AllMasked(usize),
    #[error("backward requires a scalar loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
}

/// Handle to a tensor living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a (r x c)` plus a `1 x c` bias added to every row.
    AddBias(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    /// Row-wise stabilized softmax; `true` in the mask means "excluded".
    MaskedSoftmax(Var, Vec<bool>),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Log(Var),
    /// Matrix times a learnable 1x1 scalar (the only scalar broadcast).
    MulScalar(Var, Var),
    /// Single element `(row, col)` extracted as a 1x1 scalar.
    Pick(Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Wengert list: nodes are appended in topological order during the forward
/// pass and visited exactly once, in reverse, during backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, values.len());
        self.nodes.push(Node { rows, cols, values, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Scalar value of a 1x1 tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].values[0]
    }

    /// Gradient populated by the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(rows * cols, values.len(), "leaf shape/value mismatch");
        self.push(rows, cols, values, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        self.leaf(rows, cols, values, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TapeError::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(TapeError::Dimension(format!(
                "add {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x c` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TapeError> {
        let (m, n) = self.shape(a);
        if self.shape(bias) != (1, n) {
            return Err(TapeError::Dimension(format!(
                "bias {:?} for {m}x{n}",
                self.shape(bias)
            )));
        }
        let bv = self.nodes[bias.0].values.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y))
            .collect();
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(m, n, out, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * k).collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Scale(a, k), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            return Err(TapeError::Dimension(format!(
                "hadamard {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Hadamard(a, b), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Relu(a), ng)
    }

    /// Row-wise softmax with max-subtraction stabilization. Masked entries are
    /// excluded from the normalization and come out exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, TapeError> {
        let (m, n) = self.shape(a);
        if mask.len() != m * n {
            return Err(TapeError::Dimension(format!(
                "mask len {} for {m}x{n}",
                mask.len()
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[a.0].values[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if !mrow[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TapeError::AllMasked(i));
            }
            let mut sum = 0.0;
            for j in 0..n {
                if !mrow[j] {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(m, n, out, Op::MaskedSoftmax(a, mask.to_vec()), ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TapeError> {
        let (m, n) = self.shape(a);
        self.masked_softmax(a, &vec![false; m * n])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(n, m, out, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != n {
                return Err(TapeError::Dimension(format!("concat_rows cols {c} vs {n}")));
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, n, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(TapeError::Dimension(format!(
                "slice_cols {start}..{} of {n}",
                start + len
            )));
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(m, len, out, Op::SliceCols(a, start, len), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let (m, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(TapeError::Dimension(format!("concat_cols rows {r} vs {m}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, c) = self.shape(p);
                out.extend_from_slice(&self.nodes[p.0].values[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Multiplies every entry of `a` by the 1x1 tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TapeError> {
        if self.shape(s) != (1, 1) {
            return Err(TapeError::Dimension(format!(
                "mul_scalar expects 1x1 scalar, got {:?}",
                self.shape(s)
            )));
        }
        let (m, n) = self.shape(a);
        let k = self.nodes[s.0].values[0];
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * k).collect();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(m, n, out, Op::MulScalar(a, s), ng))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let ng = self.needs(a);
        self.push(m, n, out, Op::Log(a), ng)
    }

    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var, TapeError> {
        let (m, n) = self.shape(a);
        if row >= m || col >= n {
            return Err(TapeError::Dimension(format!("pick ({row},{col}) of {m}x{n}")));
        }
        let v = self.nodes[a.0].values[row * n + col];
        let ng = self.needs(a);
        Ok(self.push(1, 1, vec![v], Op::Pick(a, row, col), ng))
    }

    fn accum(&mut self, v: Var, delta: &[f64]) {
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Populates `grad` for every node that leads to a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), TapeError> {
        let (m, n) = self.shape(loss);
        if (m, n) != (1, 1) {
            return Err(TapeError::NonScalarLoss(m, n));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            let node = self.nodes[idx].clone();
            let (rows, cols) = (node.rows, node.cols);
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ma, ka) = self.shape(a);
                    let (_, nb) = self.shape(b);
                    if self.needs(a) {
                        // dA = dC . B^T
                        let bv = &self.nodes[b.0].values;
                        let mut da = vec![0.0; ma * ka];
                        for i in 0..ma {
                            for p in 0..ka {
                                let mut acc = 0.0;
                                for j in 0..nb {
                                    acc += g[i * nb + j] * bv[p * nb + j];
                                }
                                da[i * ka + p] = acc;
                            }
                        }
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        // dB = A^T . dC
                        let av = &self.nodes[a.0].values;
                        let mut db = vec![0.0; ka * nb];
                        for p in 0..ka {
                            for i in 0..ma {
                                let x = av[i * ka + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..nb {
                                    db[p * nb + j] += x * g[i * nb + j];
                                }
                            }
                        }
                        self.accum(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.accum(a, &g);
                    }
                    if self.needs(b) {
                        self.accum(b, &g);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.needs(a) {
                        self.accum(a, &g);
                    }
                    if self.needs(bias) {
                        let mut db = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        self.accum(bias, &db);
                    }
                }
                Op::Scale(a, k) => {
                    if self.needs(a) {
                        let da: Vec<f64> = g.iter().map(|x| x * k).collect();
                        self.accum(a, &da);
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.needs(a) {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[b.0].values)
                            .map(|(gi, bi)| gi * bi)
                            .collect();
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].values)
                            .map(|(gi, ai)| gi * ai)
                            .collect();
                        self.accum(b, &db);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(a) {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&node.values)
                            .map(|(gi, y)| gi * y * (1.0 - y))
                            .collect();
                        self.accum(a, &da);
                    }
                }
                Op::Relu(a) => {
                    if self.needs(a) {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].values)
                            .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                            .collect();
                        self.accum(a, &da);
                    }
                }
                Op::MaskedSoftmax(a, mask) => {
                    if self.needs(a) {
                        let y = &node.values;
                        let mut da = vec![0.0; rows * cols];
                        for i in 0..rows {
                            let mut dot = 0.0;
                            for j in 0..cols {
                                dot += g[i * cols + j] * y[i * cols + j];
                            }
                            for j in 0..cols {
                                if !mask[i * cols + j] {
                                    da[i * cols + j] =
                                        y[i * cols + j] * (g[i * cols + j] - dot);
                                }
                            }
                        }
                        self.accum(a, &da);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(a) {
                        let mut da = vec![0.0; rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                da[j * rows + i] = g[i * cols + j];
                            }
                        }
                        self.accum(a, &da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(p);
                        if self.needs(p) {
                            self.accum(p, &g[offset..offset + r * c]);
                        }
                        offset += r * c;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    if self.needs(a) {
                        let (ma, na) = self.shape(a);
                        let mut da = vec![0.0; ma * na];
                        for i in 0..ma {
                            for j in 0..len {
                                da[i * na + start + j] = g[i * len + j];
                            }
                        }
                        self.accum(a, &da);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts.clone() {
                        let (r, c) = self.shape(p);
                        if self.needs(p) {
                            let mut dp = vec![0.0; r * c];
                            for i in 0..r {
                                for j in 0..c {
                                    dp[i * c + j] = g[i * cols + offset + j];
                                }
                            }
                            self.accum(p, &dp);
                        }
                        offset += c;
                    }
                }
                Op::Sum(a) => {
                    if self.needs(a) {
                        let (ma, na) = self.shape(a);
                        self.accum(a, &vec![g[0]; ma * na]);
                    }
                }
                Op::Log(a) => {
                    if self.needs(a) {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].values)
                            .map(|(gi, x)| gi / x)
                            .collect();
                        self.accum(a, &da);
                    }
                }
                Op::MulScalar(a, s) => {
                    let k = self.nodes[s.0].values[0];
                    if self.needs(a) {
                        let da: Vec<f64> = g.iter().map(|x| x * k).collect();
                        self.accum(a, &da);
                    }
                    if self.needs(s) {
                        let ds: f64 = g
                            .iter()
                            .zip(&self.nodes[a.0].values)
                            .map(|(gi, ai)| gi * ai)
                            .sum();
                        self.accum(s, &[ds]);
                    }
                }
                Op::Pick(a, row, col) => {
                    if self.needs(a) {
                        let (ma, na) = self.shape(a);
                        let mut da = vec![0.0; ma * na];
                        da[row * na + col] = g[0];
                        self.accum(a, &da);
                    }
                }
            }
            // Restore the gradient of this node so callers can inspect it.
            self.grads[idx] = Some(g);
        }
        Ok(())
    }
}

/// Max over coordinates of the relative disagreement between the analytic
/// gradient of `f` at `x` and a central finite difference with step `eps`.
///
/// `f` must build a scalar loss from the supplied leaf on a fresh tape.
pub fn finite_difference_check<F>(
    rows: usize,
    cols: usize,
    x: &[f64],
    eps: f64,
    f: F,
) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TapeError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(rows, cols, x.to_vec(), true);
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape.grad(leaf).expect("leaf gradient").to_vec();

    let eval = |pt: &[f64]| -> Result<f64, TapeError> {
        let mut t = Tape::new();
        let l = t.leaf(rows, cols, pt.to_vec(), false);
        let out = f(&mut t, l)?;
        Ok(t.scalar(out))
    };

    let mut worst: f64 = 0.0;
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        let orig = pt[i];
        pt[i] = orig + eps;
        let up = eval(&pt)?;
        pt[i] = orig - eps;
        let down = eval(&pt)?;
        pt[i] = orig;
        let central = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = t.constant(3, 3, (0..9).map(|x| x as f64).collect());
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.values(p), t.values(m));
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t.constant(2, 1, vec![1.0, 1.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.values(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]);
        let b = t.constant(2, 2, vec![0.0; 4]);
        assert!(matches!(t.matmul(a, b), Err(TapeError::Dimension(_))));
    }

    #[test]
    fn matmul_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_vec(&mut rng, 20);
        let b = rand_vec(&mut rng, 15);
        let err = finite_difference_check(4, 5, &a, 1e-5, |t, leaf| {
            let bv = t.constant(5, 3, b.clone());
            let c = t.matmul(leaf, bv)?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(err < 1e-6, "matmul grad err {err}");
        // Gradient w.r.t. the right operand as well.
        let err = finite_difference_check(5, 3, &b, 1e-5, |t, leaf| {
            let av = t.constant(4, 5, a.clone());
            let c = t.matmul(av, leaf)?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(err < 1e-6, "matmul rhs grad err {err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let a = t.constant(1, 4, vec![0.0; 4]);
        let s = t.softmax(a).unwrap();
        for v in t.values(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_hand_value() {
        let mut t = Tape::new();
        let a = t.constant(1, 3, vec![1.0, 2.0, 3.0]);
        let s = t.masked_softmax(a, &[false, false, true]).unwrap();
        let e = std::f64::consts::E;
        let expect = [1.0 / (1.0 + e), e / (1.0 + e), 0.0];
        for (v, want) in t.values(s).iter().zip(expect) {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
        assert_eq!(t.values(s)[2], 0.0);
    }

    #[test]
    fn masked_softmax_all_masked_row() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]);
        assert!(matches!(
            t.masked_softmax(a, &[true, true]),
            Err(TapeError::AllMasked(0))
        ));
    }

    #[test]
    fn masked_softmax_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(&mut rng, 6);
        let mask = vec![false, true, false, false, false, true];
        let weights = rand_vec(&mut rng, 6);
        let m = mask.clone();
        let err = finite_difference_check(2, 3, &x, 1e-5, move |t, leaf| {
            let s = t.masked_softmax(leaf, &m)?;
            let w = t.constant(2, 3, weights.clone());
            let p = t.hadamard(s, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(err < 1e-6, "masked softmax grad err {err}");
    }

    #[test]
    fn elementwise_analytic_values() {
        let mut t = Tape::new();
        let z = t.constant(1, 1, vec![0.0]);
        let s = t.sigmoid(z);
        assert!((t.scalar(s) - 0.5).abs() < 1e-15);
        let neg = t.constant(1, 2, vec![-3.0, 3.0]);
        let r = t.relu(neg);
        assert_eq!(t.values(r), &[0.0, 3.0]);
    }

    #[test]
    fn hadamard_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_vec(&mut rng, 9);
        let b = rand_vec(&mut rng, 9);
        let err = finite_difference_check(3, 3, &a, 1e-5, |t, leaf| {
            let bv = t.constant(3, 3, b.clone());
            let h = t.hadamard(leaf, bv)?;
            Ok(t.sum(h))
        })
        .unwrap();
        assert!(err < 1e-6, "hadamard grad err {err}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0], true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_square_gives_x() {
        let mut t = Tape::new();
        let vals = vec![1.0, -2.0, 0.5, 3.0];
        let x = t.leaf(2, 2, vals.clone(), true);
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        for (g, v) in t.grad(x).unwrap().iter().zip(&vals) {
            assert!((g - v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let mut t = Tape::new();
        let x = t.leaf(2, 2, vec![0.0; 4], true);
        assert!(matches!(t.backward(x), Err(TapeError::NonScalarLoss(2, 2))));
    }

    #[test]
    fn backward_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(2, 2, vec![0.3, -1.7, 2.2, 0.9], true);
            let s = t.sigmoid(x);
            let h = t.hadamard(s, x).unwrap();
            let sum = t.sum(h);
            t.backward(sum).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "grads must be bit-identical across runs");
    }

    #[test]
    fn fd_check_sum_of_squares() {
        let err = finite_difference_check(1, 2, &[1.0, 2.0], 1e-5, |t, leaf| {
            let sq = t.hadamard(leaf, leaf)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "sum of squares fd err {err}");
    }

    #[test]
    fn fd_check_constant_function() {
        let err = finite_difference_check(1, 3, &[1.0, 2.0, 3.0], 1e-5, |t, leaf| {
            let zero = t.scale(leaf, 0.0);
            let s = t.sum(zero);
            let c = t.constant(1, 1, vec![42.0]);
            t.add(s, c)
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_masked_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(&mut rng, 5);
        let mask = vec![false, false, true, false, false];
        let err = finite_difference_check(1, 5, &x, 1e-5, move |t, leaf| {
            let p = t.masked_softmax(leaf, &mask)?;
            let target = t.pick(p, 0, 3)?;
            let lp = t.log(target);
            Ok(t.scale(lp, -1.0))
        })
        .unwrap();
        assert!(err < 1e-6, "cross entropy fd err {err}");
    }

    #[test]
    fn registered_ops_random_grad_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let x = rand_vec(&mut rng, 12);
            let err = finite_difference_check(3, 4, &x, 1e-5, |t, leaf| {
                let s = t.sigmoid(leaf);
                let r = t.relu(leaf);
                let mix = t.add(s, r)?;
                let sc = t.scale(mix, 0.7);
                let tr = t.transpose(sc);
                let back = t.transpose(tr);
                let soft = t.softmax(back)?;
                let h = t.hadamard(soft, leaf)?;
                Ok(t.sum(h))
            })
            .unwrap();
            assert!(err < 1e-6, "trial {trial}: grad err {err}");
        }
    }
}
