//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Operations are appended in execution order, so the tape is topologically
//! sorted by construction. [`Tape::backward`] walks it once in reverse,
//! applying each node's local gradient rule.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    RepeatRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-writer recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    relu_pattern: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let requires = inputs.iter().any(|&v| self.needs_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(op, self.shape(s), &[1]));
        }
        Ok(())
    }

    fn check_matrix(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref other => Err(Error::shape(op, other, &[2])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = tensor::matmul_dims(self.shape(a), self.shape(b))?;
        let data = tensor::matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = tensor::matmul_nt_raw(self.data(a), self.data(b), m, k, n);
        self.push(vec![m, n], data, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("transpose", a)?;
        let data = tensor::transpose_raw(self.data(a), r, c);
        self.push(vec![c, r], data, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), &[a])
    }

    /// Adds a `[D]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        self.push(self.shape(x).to_vec(), data, Op::AddBias(x, bias), &[x, bias])
    }

    /// `s · x` where `s` is a single-element tensor on the tape.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("mul_scalar", s)?;
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| sv * v).collect();
        self.push(self.shape(x).to_vec(), data, Op::MulScalar(x, s), &[x, s])
    }

    /// `x + s` where `s` is a single-element tensor on the tape.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar("add_scalar", s)?;
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| v + sv).collect();
        self.push(self.shape(x).to_vec(), data, Op::AddScalar(x, s), &[x, s])
    }

    /// Hash of every ReLU's active set so far. Two forward passes with equal
    /// patterns lie in the same smooth piece of the computation.
    pub fn relu_pattern(&self) -> u64 {
        self.relu_pattern
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut pattern = self.relu_pattern;
        for &v in self.data(x) {
            pattern = (pattern ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3);
        }
        self.relu_pattern = pattern;
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("softmax_rows on non-finite input".into()));
        }
        let data = tensor::softmax_rows_raw(self.data(x), self.value(x).cols());
        self.push(self.shape(x).to_vec(), data, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        tensor::check_layer_norm(self.shape(x), self.shape(gain), self.shape(bias))?;
        let d = self.value(x).cols();
        let (y, xhat, rstd) =
            tensor::layer_norm_raw(self.data(x), self.data(gain), self.data(bias), d);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(self.shape(x).to_vec(), y, op, &[x, gain, bias])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_matrix("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.data(x);
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.push(vec![r, len], data, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_matrix("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        self.push(vec![len, c], data, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.check_matrix("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.check_matrix("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(vec![r, total], data, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = self.check_matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.check_matrix("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            data.extend_from_slice(self.data(p));
        }
        self.push(vec![rows, c], data, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.check_matrix("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Vocabulary {
                token: bad as u32,
                vocab: r,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(vec![ids.len(), c], data, op, &[table])
    }

    /// Column means, as a `[1×D]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("mean_rows", x)?;
        let mut data = vec![0.0; c];
        for row in self.data(x).chunks_exact(c) {
            for (m, v) in data.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut data {
            *m /= r as f64;
        }
        self.push(vec![1, c], data, Op::MeanRows(x), &[x])
    }

    /// Tiles a `[1×D]` matrix into `[n×D]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.check_matrix("repeat_rows", x)?;
        if r != 1 || n == 0 {
            return Err(Error::shape("repeat_rows", &[r, c], &[n]));
        }
        let data = self.data(x).repeat(n);
        self.push(vec![n, c], data, Op::RepeatRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Summed token cross-entropy of `logits: [T×V]` against `targets`,
    /// with the target distribution `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (t, v) = self.check_matrix("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Vocabulary {
                token: bad as u32,
                vocab: v,
            });
        }
        if !self.value(logits).is_finite() {
            return Err(Error::Numeric("cross_entropy on non-finite logits".into()));
        }
        let probs = tensor::softmax_rows_raw(self.data(logits), v);
        let mut loss = 0.0;
        for (i, row) in self.data(logits).chunks_exact(v).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let target_lp = row[targets[i]] - lse;
            let mean_lp = row.iter().map(|x| x - lse).sum::<f64>() / v as f64;
            loss -= (1.0 - smoothing) * target_lp + smoothing * mean_lp;
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            smoothing,
            probs,
        };
        self.push(vec![1], vec![loss], op, &[logits])
    }

    /// Clears gradient buffers so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.backward_done = false;
    }

    /// Back-propagates from a scalar `loss`, filling the gradient of every
    /// node that requires one. Leaves that do not influence the loss get a
    /// zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.needs_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.local_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !node.value.requires_grad() {
                continue;
            }
            let g = match (g, &node.op) {
                (Some(g), _) => Some(g),
                (None, Op::Leaf) => Some(vec![0.0; node.value.numel()]),
                (None, _) => None,
            };
            node.value.set_grad(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn local_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs_grad(a) {
                    let ga = tensor::matmul_nt_raw(g, self.data(b), m, n, k);
                    accumulate(self, grads, a, &ga);
                }
                if self.needs_grad(b) {
                    let gb = tensor::matmul_tn_raw(self.data(a), g, m, k, n);
                    accumulate(self, grads, b, &gb);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.needs_grad(a) {
                    let ga = tensor::matmul_raw(g, self.data(b), m, n, k);
                    accumulate(self, grads, a, &ga);
                }
                if self.needs_grad(b) {
                    let gb = tensor::matmul_tn_raw(g, self.data(a), m, n, k);
                    accumulate(self, grads, b, &gb);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                let ga = tensor::transpose_raw(g, c, r);
                accumulate(self, grads, a, &ga);
            }
            &Op::Add(a, b) => {
                accumulate(self, grads, a, g);
                accumulate(self, grads, b, g);
            }
            &Op::Sub(a, b) => {
                accumulate(self, grads, a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(self, grads, b, &neg);
            }
            &Op::Mul(a, b) => {
                let ga = zip_map(g, self.data(b), |x, y| x * y);
                let gb = zip_map(g, self.data(a), |x, y| x * y);
                accumulate(self, grads, a, &ga);
                accumulate(self, grads, b, &gb);
            }
            &Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(self, grads, a, &ga);
            }
            &Op::AddBias(x, bias) => {
                accumulate(self, grads, x, g);
                if self.needs_grad(bias) {
                    let d = self.value(bias).numel();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(self, grads, bias, &gb);
                }
            }
            &Op::MulScalar(x, s) => {
                let sv = self.data(s)[0];
                if self.needs_grad(x) {
                    let gx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    accumulate(self, grads, x, &gx);
                }
                if self.needs_grad(s) {
                    let gs = g.iter().zip(self.data(x)).map(|(a, b)| a * b).sum::<f64>();
                    accumulate(self, grads, s, &[gs]);
                }
            }
            &Op::AddScalar(x, s) => {
                accumulate(self, grads, x, g);
                if self.needs_grad(s) {
                    accumulate(self, grads, s, &[g.iter().sum()]);
                }
            }
            &Op::Relu(x) => {
                let gx = zip_map(g, self.data(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(self, grads, x, &gx);
            }
            &Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(self, grads, x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gain_v = self.data(*gain);
                if self.needs_grad(*gain) || self.needs_grad(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    accumulate(self, grads, *gain, &gg);
                    accumulate(self, grads, *bias, &gb);
                }
                if self.needs_grad(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(self, grads, *x, &gx);
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let len = node.value.cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(self, grads, x, &gx);
            }
            &Op::SliceRows { x, start } => {
                let c = self.shape(x)[1];
                let mut gx = vec![0.0; self.value(x).numel()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(self, grads, x, &gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs_grad(p) {
                        let mut gp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + pc]);
                        }
                        accumulate(self, grads, p, &gp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    accumulate(self, grads, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs_grad(*table) {
                    let c = self.value(*table).cols();
                    let mut gt = vec![0.0; self.value(*table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[i * c + j];
                        }
                    }
                    accumulate(self, grads, *table, &gt);
                }
            }
            &Op::MeanRows(x) => {
                let r = self.value(x).rows();
                let scaled: Vec<f64> = g.iter().map(|v| v / r as f64).collect();
                let gx = scaled.repeat(r);
                accumulate(self, grads, x, &gx);
            }
            &Op::RepeatRows(x) => {
                let c = self.value(x).cols();
                let mut gx = vec![0.0; c];
                for row in g.chunks_exact(c) {
                    for (a, v) in gx.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                accumulate(self, grads, x, &gx);
            }
            &Op::Sum(x) => {
                let gx = vec![g[0]; self.value(x).numel()];
                accumulate(self, grads, x, &gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let uniform = smoothing / v as f64;
                let mut gl = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    let row = &mut gl[i * v..(i + 1) * v];
                    for p in row.iter_mut() {
                        *p = (*p - uniform) * g[0];
                    }
                    row[y] -= (1.0 - smoothing) * g[0];
                }
                accumulate(self, grads, *logits, &gl);
            }
        }
    }
}

/// Convenience form of [`Tape::backward`].
pub fn backward_all(tape: &mut Tape, loss: Var) -> Result<()> {
    tape.backward(loss)
}

fn accumulate(tape: &Tape, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if !tape.needs_grad(v) {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_input_broadcast() {
        let mut tape = Tape::new();
        let w = tape.param(mat(&[vec![0.3, -1.0, 2.0], vec![0.5, 0.1, -0.2]]));
        let x = tape.constant(mat(&[vec![1.0], vec![2.0], vec![-3.0]]));
        let wx = tape.matmul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, -3.0, 1.0, 2.0, -3.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(mat(&[vec![0.3, -1.0], vec![0.5, 0.1]]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        tape.reset_grads();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros(&[3]));
        let loss = tape.mul(used, used).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(used).unwrap(), &[4.0]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn cross_entropy_on_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[3, 5]));
        let loss = tape.cross_entropy(logits, &[0, 4, 2], 0.0).unwrap();
        let expected = 3.0 * (5.0f64).ln();
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 5, 1], 0.0),
            Err(Error::Vocabulary { .. })
        ));
    }
}
