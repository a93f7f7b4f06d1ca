//! Dense f64 tensors plus a define-by-run reverse-mode autodiff tape.
//!
//! A `Tensor` is plain host storage (parameters, dataset features, pooled
//! keys). A `Tape` records one forward pass over flat buffers and replays it
//! in reverse to accumulate gradients. Tapes are rebuilt every step; nothing
//! is retained between passes.
//!
//! Everything is 64-bit and row-major. Shape mismatches are wiring bugs, so
//! op builders panic with a dimension report instead of returning errors.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, CocoError, Result};

pub const GELU_COEF: f64 = 0.044715;

/// Host tensor: shape, row-major data, and (for parameters) a gradient slot
/// filled in after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// A trainable tensor (gradient slot reserved, filled by training steps).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    /// Gaussian-initialized parameter.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    /// Copy of this tensor with gradient tracking stripped. Used for the
    /// momentum-side parameter mirrors, which must never carry gradients.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected rank-2 tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var, usize),
    MaskedSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    GatherRows(Var, Vec<usize>),
    ReplaceRows { src: Var, row: Var, positions: Vec<usize> },
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    ConcatCols(Var, Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    L2NormalizeRows(Var),
    CrossEntropyRows(Var, Vec<usize>),
    BceWithLogits(Var, f64),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass. Parameters registered via [`Tape::param`] are
/// deduplicated by address so a tensor used in several places accumulates a
/// single gradient.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    params: HashMap<usize, Var>,
    param_order: Vec<(usize, Var)>,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn addr(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        assert_eq!(s.len(), 2, "expected rank-2 value, got shape {:?}", s);
        (s[0], s[1])
    }

    /// Detach a value into a host tensor.
    pub fn detach(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].data.len(), 1, "expected scalar value");
        self.nodes[v.0].data[0]
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    /// Constant leaf from a raw buffer.
    pub fn input_data(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf, false)
    }

    /// Gradient leaf for a parameter tensor, deduplicated by address: calling
    /// this twice with the same tensor returns the same node, so fan-out
    /// accumulates into one gradient buffer.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = addr(t);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        self.param_order.push((key, v));
        v
    }

    /// Gradient leaf that is not tied to a stored parameter (used by
    /// grad_check to differentiate w.r.t. an arbitrary input).
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf, true)
    }

    /// Addresses of every parameter registered as a gradient leaf. Used by
    /// the training loop to audit that frozen (key-side) parameters never
    /// enter the differentiable graph.
    pub fn registered_param_addrs(&self) -> impl Iterator<Item = usize> + '_ {
        self.param_order.iter().map(|(a, _)| *a)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(
            k, k2,
            "matmul shape mismatch: [{}x{}] * [{}x{}]",
            m, k, k2, n
        );
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Add(a, b), ng)
    }

    /// Broadcast a length-d row vector over every row of an [n, d] matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, d) = self.dims2(a);
        let rs = self.shape(row);
        assert!(
            rs == [d] || rs == [1, d],
            "add_row shape mismatch: [{}x{}] + {:?}",
            n,
            d,
            rs
        );
        let mut data = self.value(a).to_vec();
        let r = self.value(row).to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += r[j];
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(vec![n, d], data, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "sub shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Scale(x, c), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|v| v + c).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::AddConst(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Relu(x), ng)
    }

    /// Softmax along `axis`, max-subtracted for stability. Rank-1 tensors use
    /// axis 0; rank-2 tensors normalize down columns (axis 0) or along rows
    /// (axis 1).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let data = match shape.len() {
            1 => {
                assert_eq!(axis, 0, "axis {} invalid for rank-1 softmax", axis);
                let mut out = self.value(x).to_vec();
                softmax_line(&mut out);
                out
            }
            2 => {
                let (n, d) = (shape[0], shape[1]);
                let src = self.value(x).to_vec();
                let mut out = vec![0.0; n * d];
                match axis {
                    1 => {
                        for i in 0..n {
                            let mut line = src[i * d..(i + 1) * d].to_vec();
                            softmax_line(&mut line);
                            out[i * d..(i + 1) * d].copy_from_slice(&line);
                        }
                    }
                    0 => {
                        for j in 0..d {
                            let mut line: Vec<f64> = (0..n).map(|i| src[i * d + j]).collect();
                            softmax_line(&mut line);
                            for i in 0..n {
                                out[i * d + j] = line[i];
                            }
                        }
                    }
                    _ => panic!("axis {} invalid for rank-2 softmax", axis),
                }
                out
            }
            r => panic!("softmax supports rank 1 or 2, got rank {}", r),
        };
        let ng = self.needs(x);
        self.push(shape, data, Op::Softmax(x, axis), ng)
    }

    /// Row-wise softmax over the entries where `allowed` is true; disallowed
    /// entries come out exactly zero. Equivalent to setting disallowed logits
    /// to -inf before a plain softmax, without ever materializing infinities.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Var {
        let (n, d) = self.dims2(x);
        assert_eq!(
            allowed.len(),
            n * d,
            "mask length {} does not match [{}x{}]",
            allowed.len(),
            n,
            d
        );
        for i in 0..n {
            assert!(
                allowed[i * d..(i + 1) * d].iter().any(|&a| a),
                "fully-masked softmax row {}",
                i
            );
        }
        let src = self.value(x).to_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let m = &allowed[i * d..(i + 1) * d];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &a)| a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                if m[j] {
                    let e = (row[j] - mx).exp();
                    out[i * d + j] = e;
                    sum += e;
                }
            }
            for j in 0..d {
                out[i * d + j] /= sum;
            }
        }
        let ng = self.needs(x);
        self.push(vec![n, d], out, Op::MaskedSoftmaxRows(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (n, d) = self.dims2(x);
        assert_eq!(self.shape(gain), [d], "layer_norm gain shape mismatch");
        assert_eq!(self.shape(bias), [d], "layer_norm bias shape mismatch");
        let src = self.value(x).to_vec();
        let g = self.value(gain).to_vec();
        let b = self.value(bias).to_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let (xhat, _) = layer_norm_row(row, eps);
            for j in 0..d {
                out[i * d + j] = g[j] * xhat[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(vec![n, d], out, Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    /// Select rows of a rank-2 tensor by index (embedding lookup). Gradient
    /// scatter-adds back, so repeated indices accumulate.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let (r, d) = self.dims2(table);
        for &i in indices {
            assert!(i < r, "gather index {} out of range for {} rows", i, r);
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(vec![indices.len(), d], out, Op::GatherRows(table, indices.to_vec()), ng)
    }

    /// Copy `src` with the listed rows overwritten by a broadcast row vector
    /// (the learned frame-mask embedding path).
    pub fn replace_rows(&mut self, src: Var, positions: &[usize], row: Var) -> Var {
        let (n, d) = self.dims2(src);
        let rs = self.shape(row);
        assert!(
            rs == [d] || rs == [1, d],
            "replace_rows row shape {:?} does not match width {}",
            rs,
            d
        );
        for &p in positions {
            assert!(p < n, "replace_rows position {} out of range for {} rows", p, n);
        }
        let mut data = self.value(src).to_vec();
        let r = self.value(row).to_vec();
        for &p in positions {
            data[p * d..(p + 1) * d].copy_from_slice(&r);
        }
        let ng = self.needs(src) || self.needs(row);
        self.push(
            vec![n, d],
            data,
            Op::ReplaceRows { src, row, positions: positions.to_vec() },
            ng,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (na, da) = self.dims2(a);
        let (nb, db) = self.dims2(b);
        assert_eq!(da, db, "concat_rows width mismatch: {} vs {}", da, db);
        let mut data = self.value(a).to_vec();
        data.extend_from_slice(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![na + nb, da], data, Op::ConcatRows(a, b), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (n, d) = self.dims2(x);
        assert!(
            start < end && end <= n,
            "slice_rows range {}..{} invalid for {} rows",
            start,
            end,
            n
        );
        let data = self.value(x)[start * d..end * d].to_vec();
        let ng = self.needs(x);
        self.push(vec![end - start, d], data, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (na, da) = self.dims2(a);
        let (nb, db) = self.dims2(b);
        assert_eq!(na, nb, "concat_cols row-count mismatch: {} vs {}", na, nb);
        let (va, vb) = (self.value(a).to_vec(), self.value(b).to_vec());
        let mut data = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            data.extend_from_slice(&va[i * da..(i + 1) * da]);
            data.extend_from_slice(&vb[i * db..(i + 1) * db]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![na, da + db], data, Op::ConcatCols(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, d) = self.dims2(x);
        let src = self.value(x);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = src[i * d + j];
            }
        }
        let ng = self.needs(x);
        self.push(vec![d, n], data, Op::Transpose(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s / n as f64], Op::MeanAll(x), ng)
    }

    /// Normalize each row to unit Euclidean norm. Zero rows are rejected by
    /// callers before reaching the tape; a zero or non-finite row here
    /// propagates NaN instead of panicking, so training aborts report the
    /// offending loss term rather than crashing mid-forward.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims2(x);
        let src = self.value(x).to_vec();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = l2_norm(row);
            let norm = if norm > 0.0 && norm.is_finite() { norm } else { f64::NAN };
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        let ng = self.needs(x);
        self.push(vec![n, d], out, Op::L2NormalizeRows(x), ng)
    }

    /// Mean softmax cross-entropy of each row against its target index.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, v) = self.dims2(logits);
        assert_eq!(targets.len(), n, "one target per logit row");
        for &t in targets {
            assert!(t < v, "target {} out of range for {} classes", t, v);
        }
        let src = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * v..(i + 1) * v];
            total += log_sum_exp(row) - row[t];
        }
        let ng = self.needs(logits);
        self.push(
            vec![1],
            vec![total / n as f64],
            Op::CrossEntropyRows(logits, targets.to_vec()),
            ng,
        )
    }

    /// Numerically stable binary cross-entropy on a scalar logit.
    pub fn bce_with_logits(&mut self, score: Var, label: f64) -> Var {
        assert_eq!(self.value(score).len(), 1, "bce expects a scalar score");
        assert!(label == 0.0 || label == 1.0, "label must be 0 or 1");
        let s = self.value(score)[0];
        let loss = s.max(0.0) - s * label + (-s.abs()).exp().ln_1p();
        let ng = self.needs(score);
        self.push(vec![1], vec![loss], Op::BceWithLogits(score, label), ng)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients for every grad-requiring
    /// node are accumulated additively; read them back with [`Tape::grad`]
    /// or [`Tape::grad_of`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        assert!(!self.ran_backward, "backward may run only once per tape");
        self.ran_backward = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| if n.needs_grad { vec![0.0; n.data.len()] } else { Vec::new() })
            .collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // loss does not depend on any parameter
        }
        self.grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_empty() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize) {
        let g = std::mem::take(&mut self.grads[i]);
        match &self.nodes[i].op {
            Op::Leaf => {
                self.grads[i] = g;
                return;
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.dims2(a);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let bv = &self.nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    // dA = g  Bᵀ
                    for i_ in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i_ * n + j] * bv[p * n + j];
                            }
                            da[i_ * k + p] = acc;
                        }
                    }
                    acc_into(&mut self.grads[a.0], &da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].data;
                    let mut db = vec![0.0; k * n];
                    // dB = Aᵀ  g
                    for p in 0..k {
                        for i_ in 0..m {
                            let aip = av[i_ * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i_ * n..(i_ + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                    acc_into(&mut self.grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc_into(&mut self.grads[a.0], &g);
                }
                if self.needs(b) {
                    acc_into(&mut self.grads[b.0], &g);
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let (n, d) = self.dims2(a);
                if self.needs(a) {
                    acc_into(&mut self.grads[a.0], &g);
                }
                if self.needs(row) {
                    let dr = &mut self.grads[row.0];
                    for i_ in 0..n {
                        for j in 0..d {
                            dr[j] += g[i_ * d + j];
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    acc_into(&mut self.grads[a.0], &g);
                }
                if self.needs(b) {
                    for (dst, s) in self.grads[b.0].iter_mut().zip(&g) {
                        *dst -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    for ((dst, s), x) in self.grads[a.0].iter_mut().zip(&g).zip(&bv) {
                        *dst += s * x;
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    for ((dst, s), x) in self.grads[b.0].iter_mut().zip(&g).zip(&av) {
                        *dst += s * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                for (dst, s) in self.grads[x.0].iter_mut().zip(&g) {
                    *dst += s * c;
                }
            }
            Op::AddConst(x) => {
                let x = *x;
                acc_into(&mut self.grads[x.0], &g);
            }
            Op::Gelu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].data.clone();
                for ((dst, s), &v) in self.grads[x.0].iter_mut().zip(&g).zip(&xv) {
                    *dst += s * gelu_grad_scalar(v);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = self.nodes[x.0].data.clone();
                for ((dst, s), &v) in self.grads[x.0].iter_mut().zip(&g).zip(&xv) {
                    if v > 0.0 {
                        *dst += s;
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (x, axis) = (*x, *axis);
                let out = self.nodes[i].data.clone();
                let shape = self.nodes[i].shape.clone();
                let dx = softmax_backward(&out, &g, &shape, axis);
                acc_into(&mut self.grads[x.0], &dx);
            }
            Op::MaskedSoftmaxRows(x) => {
                let x = *x;
                let out = self.nodes[i].data.clone();
                let shape = self.nodes[i].shape.clone();
                let dx = softmax_backward(&out, &g, &shape, 1);
                acc_into(&mut self.grads[x.0], &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let (n, d) = self.dims2(x);
                let xv = self.nodes[x.0].data.clone();
                let gv = self.nodes[gain.0].data.clone();
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (xhat, inv) = layer_norm_row(row, eps);
                    if self.needs(gain) {
                        let dg = &mut self.grads[gain.0];
                        for j in 0..d {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if self.needs(bias) {
                        let db = &mut self.grads[bias.0];
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    if self.needs(x) {
                        // dxhat = g ⊙ gain; dx = inv (dxhat − mean(dxhat) − xhat mean(dxhat⊙xhat))
                        let dxhat: Vec<f64> = (0..d).map(|j| grow[j] * gv[j]).collect();
                        let m1: f64 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dx = &mut self.grads[x.0];
                        for j in 0..d {
                            dx[r * d + j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                let table = *table;
                let indices = indices.clone();
                let d = self.shape(table)[1];
                let dt = &mut self.grads[table.0];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[r * d + j];
                    }
                }
            }
            Op::ReplaceRows { src, row, positions } => {
                let (src, row) = (*src, *row);
                let positions = positions.clone();
                let (_, d) = self.dims2(src);
                if self.needs(row) {
                    let dr = &mut self.grads[row.0];
                    for &p in &positions {
                        for j in 0..d {
                            dr[j] += g[p * d + j];
                        }
                    }
                }
                if self.needs(src) {
                    let mut gs = g.clone();
                    for &p in &positions {
                        for v in &mut gs[p * d..(p + 1) * d] {
                            *v = 0.0;
                        }
                    }
                    acc_into(&mut self.grads[src.0], &gs);
                }
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let na = self.shape(a)[0] * self.shape(a)[1];
                if self.needs(a) {
                    acc_into(&mut self.grads[a.0], &g[..na]);
                }
                if self.needs(b) {
                    acc_into(&mut self.grads[b.0], &g[na..]);
                }
            }
            Op::SliceRows(x, start) => {
                let (x, start) = (*x, *start);
                let d = self.shape(x)[1];
                let dx = &mut self.grads[x.0];
                for (k, s) in g.iter().enumerate() {
                    dx[start * d + k] += s;
                }
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let (n, da) = self.dims2(a);
                let db = self.shape(b)[1];
                if self.needs(a) {
                    let dst = &mut self.grads[a.0];
                    for i_ in 0..n {
                        for j in 0..da {
                            dst[i_ * da + j] += g[i_ * (da + db) + j];
                        }
                    }
                }
                if self.needs(b) {
                    let dst = &mut self.grads[b.0];
                    for i_ in 0..n {
                        for j in 0..db {
                            dst[i_ * db + j] += g[i_ * (da + db) + da + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                let (n, d) = self.dims2(x);
                let dx = &mut self.grads[x.0];
                for i_ in 0..n {
                    for j in 0..d {
                        dx[i_ * d + j] += g[j * n + i_];
                    }
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                let s = g[0];
                for dst in self.grads[x.0].iter_mut() {
                    *dst += s;
                }
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].data.len() as f64;
                let s = g[0] / n;
                for dst in self.grads[x.0].iter_mut() {
                    *dst += s;
                }
            }
            Op::L2NormalizeRows(x) => {
                let x = *x;
                let (n, d) = self.dims2(x);
                let xv = self.nodes[x.0].data.clone();
                let yv = self.nodes[i].data.clone();
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let y = &yv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let norm = l2_norm(row);
                    let dot: f64 = grow.iter().zip(y).map(|(a, b)| a * b).sum();
                    let dx = &mut self.grads[x.0];
                    for j in 0..d {
                        dx[r * d + j] += (grow[j] - y[j] * dot) / norm;
                    }
                }
            }
            Op::CrossEntropyRows(logits, targets) => {
                let logits = *logits;
                let targets = targets.clone();
                let (n, v) = self.dims2(logits);
                let lv = self.nodes[logits.0].data.clone();
                let scale = g[0] / n as f64;
                let dl = &mut self.grads[logits.0];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv[r * v..(r + 1) * v];
                    let mut p = row.to_vec();
                    softmax_line(&mut p);
                    for j in 0..v {
                        let delta = if j == t { 1.0 } else { 0.0 };
                        dl[r * v + j] += scale * (p[j] - delta);
                    }
                }
            }
            Op::BceWithLogits(score, label) => {
                let (score, label) = (*score, *label);
                let s = self.nodes[score.0].data[0];
                let sig = 1.0 / (1.0 + (-s).exp());
                self.grads[score.0][0] += g[0] * (sig - label);
            }
        }
        self.grads[i] = g;
    }

    /// Gradient buffer of a node (empty slice if it required no gradient or
    /// backward has not run).
    pub fn grad(&self, v: Var) -> &[f64] {
        self.grads.get(v.0).map(|g| g.as_slice()).unwrap_or(&[])
    }

    /// Gradient of a registered parameter tensor, if it was used in this pass.
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&addr(t)).map(|v| self.grad(*v))
    }
}

// ── Scalar kernels ──────────────────────────────────────────────────────

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_line(line: &mut [f64]) {
    let mx = line.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in line.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in line.iter_mut() {
        *v /= sum;
    }
}

fn softmax_backward(out: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut dx = vec![0.0; out.len()];
    let line_backward = |s: &[f64], gl: &[f64], dst: &mut [f64]| {
        let dot: f64 = s.iter().zip(gl).map(|(a, b)| a * b).sum();
        for j in 0..s.len() {
            dst[j] += s[j] * (gl[j] - dot);
        }
    };
    match shape.len() {
        1 => line_backward(out, g, &mut dx),
        2 => {
            let (n, d) = (shape[0], shape[1]);
            match axis {
                1 => {
                    for i in 0..n {
                        line_backward(
                            &out[i * d..(i + 1) * d],
                            &g[i * d..(i + 1) * d],
                            &mut dx[i * d..(i + 1) * d],
                        );
                    }
                }
                0 => {
                    for j in 0..d {
                        let s: Vec<f64> = (0..n).map(|i| out[i * d + j]).collect();
                        let gl: Vec<f64> = (0..n).map(|i| g[i * d + j]).collect();
                        let mut dl = vec![0.0; n];
                        line_backward(&s, &gl, &mut dl);
                        for i in 0..n {
                            dx[i * d + j] += dl[i];
                        }
                    }
                }
                _ => unreachable!(),
            }
        }
        _ => unreachable!(),
    }
    dx
}

fn layer_norm_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv).collect(), inv)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// out += a  b for row-major [m,k] x [k,n].
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn acc_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Compare the tape gradient of `build` (a scalar-valued function of one
/// tensor) against central finite differences. Returns the max over
/// components of |g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8).
pub fn grad_check<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(h > 0.0, "step size must be positive");
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.shape.clone(), x.data.clone());
    let loss = build(&mut tape, leaf);
    if tape.value(loss).len() != 1 {
        return Err(invalid(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    let g_ad = tape.grad(leaf).to_vec();
    if g_ad.is_empty() {
        return Err(invalid("function does not depend on the checked tensor"));
    }

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(x.shape.clone(), data.to_vec());
        let l = build(&mut t, v);
        if t.value(l).len() != 1 {
            return Err(invalid("function must stay scalar-valued"));
        }
        Ok(t.value(l)[0])
    };

    let mut worst = 0.0f64;
    let mut probe = x.data.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let g_fd = (up - down) / (2.0 * h);
        let denom = g_ad[i].abs().max(g_fd.abs()).max(1e-8);
        worst = worst.max((g_ad[i] - g_fd).abs() / denom);
    }
    Ok(worst)
}

/// Convenience wrapper returning an error if the check exceeds `tol`.
pub fn assert_grad_check<F>(build: F, x: &Tensor, h: f64, tol: f64, what: &str) -> Result<()>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let err = grad_check(build, x, h)?;
    if err > tol {
        return Err(CocoError::Invalid(format!(
            "gradient check failed for {}: max relative error {:.3e} > {:.1e}",
            what, err, tol
        )));
    }
    Ok(())
}
