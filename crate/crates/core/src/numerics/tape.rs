//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the tape in reverse
//! once; the tape is left intact, so it can be inspected afterwards but a
//! second `backward` recomputes from scratch.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttentionMask, AttentionSaved, Segment, SegmentSaved};
use super::linalg;
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, MatMut, MatRef, Tensor};
use super::NumericsError;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Gather {
        sources: Vec<Var>,
        index: Vec<(u32, u32)>,
    },
    Reshape(Var),
    SelectColumn(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        saved: AttentionSaved,
    },
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        saved: SegmentSaved,
    },
    SqDist(Var, Var),
    Matern52(Var),
    AddDiag(Var, Var),
    GpNll {
        k: Var,
        y: Var,
        chol: Vec<f64>,
        alpha: Vec<f64>,
    },
    GaussianNll {
        mu: Var,
        sigma: Var,
        y: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to a tracked leaf created by [`Tape::variable`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    /// Adds another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records everything needed for `backward`.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape for inference: parameters enter as constants, so nothing is
    /// tracked and `backward` yields no parameter gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push_raw(value, op, tracked)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Tracked input without a parameter id; its gradient is read with
    /// [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        let tracked = self.record;
        self.push_raw(value, Op::Leaf, tracked)
    }

    /// Places a stored parameter on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).clone();
        if self.record {
            self.push_raw(value, Op::Param(id), true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
            Tensor::new(x.shape(), data)
        };
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let x = self.value(a);
            Tensor::new(x.shape(), x.data().iter().map(|v| f(*v)).collect())
        };
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        self.zip_map(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&mut self, x: Var, r: Var, mul: bool) -> Var {
        let value = {
            let xv = self.value(x);
            let rv = self.value(r);
            let d = xv.row_len();
            assert_eq!(rv.numel(), d, "row broadcast: width mismatch");
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(d) {
                for (a, b) in row.iter_mut().zip(rv.data()) {
                    if mul {
                        *a *= b;
                    } else {
                        *a += b;
                    }
                }
            }
            Tensor::new(xv.shape(), data)
        };
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        self.push(value, op, &[x, r])
    }

    /// `x + r` with `r` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        self.row_broadcast(x, r, false)
    }

    /// `x ⊙ r` with `r` broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        self.row_broadcast(x, r, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// `x · s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let value = {
            let xv = self.value(x);
            Tensor::new(xv.shape(), xv.data().iter().map(|v| v * c).collect())
        };
        self.push(value, Op::MulScalarVar(x, s), &[x, s])
    }

    /// `[.., k] × [k, n] → [.., n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            assert_eq!(bv.rank(), 2, "matmul: right operand must be a matrix");
            let k = av.row_len();
            assert_eq!(bv.shape()[0], k, "matmul: inner dimensions differ");
            let n = bv.shape()[1];
            let m = av.n_rows();
            let mut out = vec![0.0; m * n];
            gemm(
                1.0,
                MatRef::dense(av.data(), 0, m, k),
                MatRef::dense(bv.data(), 0, k, n),
                0.0,
                MatMut::dense(&mut out, 0, n),
            );
            let mut shape = av.shape().to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, out)
        };
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| x * std_normal_cdf(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(x.row_len()) {
                softmax_in_place(row);
            }
            Tensor::new(x.shape(), data)
        };
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis followed by `γ ⊙ · + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-10;
        let (value, xhat, rstd) = {
            let xv = self.value(x);
            let (g, b) = (self.value(gamma).data(), self.value(beta).data());
            let d = xv.row_len();
            assert_eq!(g.len(), d, "layer_norm: gamma width");
            assert_eq!(b.len(), d, "layer_norm: beta width");
            let mut out = vec![0.0; xv.numel()];
            let mut xhat = vec![0.0; xv.numel()];
            let mut rstd = Vec::with_capacity(xv.n_rows());
            for (r, row) in xv.data().chunks(d).enumerate() {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + EPS).sqrt();
                rstd.push(rs);
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
            (Tensor::new(xv.shape(), out), xhat, rstd)
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout with a mask drawn from `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = {
            let xv = self.value(x);
            Tensor::new(
                xv.shape(),
                xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
            )
        };
        self.push(value, Op::Dropout(x, mask), &[x])
    }

    /// Builds a `[index.len(), d]` matrix whose row `r` is row `index[r].1`
    /// of `sources[index[r].0]`. All sources must share the row width `d`.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Var {
        let d = self.value(sources[0]).row_len();
        for s in sources {
            assert_eq!(self.value(*s).row_len(), d, "gather_rows: row widths differ");
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &(s, r) in index {
            data.extend_from_slice(self.value(sources[s]).row(r));
        }
        let value = Tensor::new(vec![index.len(), d], data);
        let op = Op::Gather {
            sources: sources.to_vec(),
            index: index.iter().map(|&(s, r)| (s as u32, r as u32)).collect(),
        };
        self.push(value, op, sources)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshaped(shape.to_vec());
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Column `j` of a `[n, d]` matrix as a length-`n` vector.
    pub fn select_column(&mut self, x: Var, j: usize) -> Var {
        let value = {
            let xv = self.value(x);
            let d = xv.row_len();
            assert!(j < d);
            Tensor::vector(xv.data().chunks(d).map(|r| r[j]).collect())
        };
        self.push(value, Op::SelectColumn(x, j), &[x])
    }

    /// Multi-head scaled dot-product attention over `[B, Lq, D]` queries and
    /// `[B, Lk, D]` keys/values. Disallowed positions get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (out, saved) = attention::forward(
            self.value(q),
            self.value(k),
            self.value(v),
            mask,
            heads,
        )?;
        Ok(self.push(out, Op::Attention { q, k, v, saved }, &[q, k, v]))
    }

    /// Multi-head attention over packed `[rows, dim]` activations split into
    /// independent [`Segment`]s. Rows outside every segment come out as zero.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (out, saved) = attention::segment_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            segments,
            heads,
        )?;
        Ok(self.push(out, Op::SegmentAttention { q, k, v, saved }, &[q, k, v]))
    }

    /// Pairwise squared Euclidean distances between rows: `[n, d] × [m, d] → [n, m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            let d = av.row_len();
            assert_eq!(bv.row_len(), d, "sq_dist: widths differ");
            let (n, m) = (av.n_rows(), bv.n_rows());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let ai = av.row(i);
                for j in 0..m {
                    out[i * m + j] = ai
                        .iter()
                        .zip(bv.row(j))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                }
            }
            Tensor::new(vec![n, m], out)
        };
        self.push(value, Op::SqDist(a, b), &[a, b])
    }

    /// Matérn-5/2 correlation as a function of squared scaled distance.
    pub fn matern52(&mut self, d2: Var) -> Var {
        self.map(d2, Op::Matern52(d2), matern52_from_sq)
    }

    /// `k + s·I` for square `k` and single-element `s`.
    pub fn add_diag(&mut self, k: Var, s: Var) -> Var {
        let value = {
            let kv = self.value(k);
            let n = kv.shape()[0];
            assert_eq!(kv.shape(), [n, n], "add_diag: matrix must be square");
            let c = self.value(s).item();
            let mut data = kv.data().to_vec();
            for i in 0..n {
                data[i * n + i] += c;
            }
            Tensor::new(vec![n, n], data)
        };
        self.push(value, Op::AddDiag(k, s), &[k, s])
    }

    /// Negative log marginal likelihood `½ yᵀK⁻¹y + ½ log|K| + (n/2) log 2π`
    /// of a zero-mean Gaussian with covariance `k + jitter·I`. The jitter is
    /// escalated ×10 up to three times before giving up.
    pub fn gp_nll(&mut self, k: Var, y: Var, jitter: f64) -> Result<Var, NumericsError> {
        let (value, chol, alpha) = {
            let kv = self.value(k);
            let yv = self.value(y);
            let n = yv.numel();
            assert_eq!(kv.shape(), [n, n], "gp_nll: covariance shape");
            let (chol, _) = linalg::cholesky_with_jitter(kv.data(), n, jitter, 3)
                .map_err(|j| NumericsError::NotPositiveDefinite { jitter: j })?;
            let alpha = linalg::cholesky_solve(&chol, n, yv.data());
            let quad: f64 = yv.data().iter().zip(&alpha).map(|(a, b)| a * b).sum();
            let nll = 0.5 * quad + linalg::half_log_det(&chol, n) + 0.5 * n as f64 * LN_2PI;
            if !nll.is_finite() {
                return Err(NumericsError::NonFinite("gp marginal likelihood"));
            }
            (Tensor::scalar(nll), chol, alpha)
        };
        Ok(self.push(value, Op::GpNll { k, y, chol, alpha }, &[k, y]))
    }

    /// `Σ_i ½ ln(2π σ_i²) + (y_i − μ_i)² / (2σ_i²)`.
    pub fn gaussian_nll(&mut self, y: &[f64], mu: Var, sigma: Var) -> Result<Var, NumericsError> {
        let total = {
            let (m, s) = (self.value(mu).data(), self.value(sigma).data());
            assert_eq!(m.len(), y.len(), "gaussian_nll: mu length");
            assert_eq!(s.len(), y.len(), "gaussian_nll: sigma length");
            let mut total = 0.0;
            for i in 0..y.len() {
                total += gaussian_nll(y[i], m[i], s[i])?;
            }
            total
        };
        Ok(self.push(
            Tensor::scalar(total),
            Op::GaussianNll {
                mu,
                sigma,
                y: y.to_vec(),
            },
            &[mu, sigma],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter placed on this tape gets an entry, zero if the loss
    /// does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(NumericsError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0]));
        }
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                op => self.backprop_op(op, &node.value, g, &mut grads)?,
            }
        }
        // parameters the loss never reached
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                out.params
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.tracked && matches!(node.op, Op::Leaf) {
                out.leaves
                    .entry(i)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop_op(
        &self,
        op: &Op,
        out: &Tensor,
        g: Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let gd = g.data();
        let elementwise = |v: Var, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let x = self.value(v);
            Tensor::new(
                x.shape(),
                gd.iter().enumerate().map(|(i, gi)| f(i, *gi)).collect(),
            )
        };
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.tracked(*b) {
                    let neg = elementwise(*b, &|_, gi| -gi);
                    self.accumulate(grads, *b, neg);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let ga = elementwise(*a, &|i, gi| gi * bv[i]);
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = elementwise(*b, &|i, gi| gi * av[i]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let ga = elementwise(*a, &|i, gi| gi / bv[i]);
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = elementwise(*b, &|i, gi| -gi * av[i] / (bv[i] * bv[i]));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, r) => {
                if self.tracked(*r) {
                    let d = self.value(*r).numel();
                    self.accumulate_with(grads, *r, |acc| {
                        for row in gd.chunks(d) {
                            for (a, b) in acc.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    });
                }
                self.accumulate(grads, *x, g);
            }
            Op::MulRow(x, r) => {
                let rv = self.value(*r).data();
                let d = rv.len();
                if self.tracked(*r) {
                    let xv = self.value(*x).data();
                    self.accumulate_with(grads, *r, |acc| {
                        for (grow, xrow) in gd.chunks(d).zip(xv.chunks(d)) {
                            for j in 0..d {
                                acc[j] += grow[j] * xrow[j];
                            }
                        }
                    });
                }
                if self.tracked(*x) {
                    let gx = elementwise(*x, &|i, gi| gi * rv[i % d]);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Scale(a, c) => {
                let ga = elementwise(*a, &|_, gi| gi * c);
                self.accumulate(grads, *a, ga);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::MulScalarVar(x, s) => {
                let c = self.value(*s).item();
                if self.tracked(*s) {
                    let xv = self.value(*x).data();
                    let total: f64 = gd.iter().zip(xv).map(|(a, b)| a * b).sum();
                    self.accumulate_with(grads, *s, |acc| acc[0] += total);
                }
                if self.tracked(*x) {
                    let gx = elementwise(*x, &|_, gi| gi * c);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.row_len();
                let m = av.n_rows();
                let n = bv.shape()[1];
                if self.tracked(*a) {
                    // dA = dC · Bᵀ
                    self.accumulate_with(grads, *a, |acc| {
                        gemm(
                            1.0,
                            MatRef::dense(gd, 0, m, n),
                            MatRef::dense(bv.data(), 0, k, n).t(),
                            1.0,
                            MatMut::dense(acc, 0, k),
                        );
                    });
                }
                if self.tracked(*b) {
                    // dB = Aᵀ · dC
                    self.accumulate_with(grads, *b, |acc| {
                        gemm(
                            1.0,
                            MatRef::dense(av.data(), 0, m, k).t(),
                            MatRef::dense(gd, 0, m, n),
                            1.0,
                            MatMut::dense(acc, 0, n),
                        );
                    });
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                let ga = elementwise(*a, &|i, gi| gi * (1.0 - y[i] * y[i]));
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = elementwise(*a, &|i, gi| {
                    let xi = x[i];
                    gi * (std_normal_cdf(xi) + xi * std_normal_pdf(xi))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = out.data();
                let ga = elementwise(*a, &|i, gi| gi * y[i]);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga = elementwise(*a, &|i, gi| gi / x[i]);
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga = elementwise(*a, &|i, gi| gi * sigmoid(x[i]));
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let ga = elementwise(*a, &|i, gi| 2.0 * gi * x[i]);
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let y = out.data();
                let ga = elementwise(*a, &|i, gi| 0.5 * gi / y[i]);
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let c = g.item();
                let ga = Tensor::full(self.shape(*a), c);
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let ga = Tensor::full(self.shape(*a), g.item() / n);
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = out.data();
                let d = out.row_len();
                let mut ga = vec![0.0; y.len()];
                for ((grow, yrow), garow) in gd.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        garow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if self.tracked(*gamma) {
                    self.accumulate_with(grads, *gamma, |acc| {
                        for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                acc[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if self.tracked(*beta) {
                    self.accumulate_with(grads, *beta, |acc| {
                        for grow in gd.chunks(d) {
                            for j in 0..d {
                                acc[j] += grow[j];
                            }
                        }
                    });
                }
                if self.tracked(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(out.shape(), gx));
                }
            }
            Op::Dropout(x, mask) => {
                let gx = elementwise(*x, &|i, gi| gi * mask[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { sources, index } => {
                let d = out.row_len();
                for (si, s) in sources.iter().enumerate() {
                    if !self.tracked(*s) {
                        continue;
                    }
                    self.accumulate_with(grads, *s, |acc| {
                        for (r, &(src, row)) in index.iter().enumerate() {
                            if src as usize != si {
                                continue;
                            }
                            let row = row as usize;
                            for j in 0..d {
                                acc[row * d + j] += gd[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                let gx = g.reshaped(self.shape(*x).to_vec());
                self.accumulate(grads, *x, gx);
            }
            Op::SelectColumn(x, j) => {
                let d = self.value(*x).row_len();
                self.accumulate_with(grads, *x, |acc| {
                    for (r, gi) in gd.iter().enumerate() {
                        acc[r * d + j] += gi;
                    }
                });
            }
            Op::Attention { q, k, v, saved } => {
                let (gq, gk, gv) = attention::backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    saved,
                    &g,
                );
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::SegmentAttention { q, k, v, saved } => {
                let (gq, gk, gv) = attention::segment_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    saved,
                    &g,
                );
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.row_len();
                let (n, m) = (av.n_rows(), bv.n_rows());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    let ai = av.row(i);
                    for j in 0..m {
                        let w = 2.0 * gd[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        let bj = bv.row(j);
                        for t in 0..d {
                            let diff = w * (ai[t] - bj[t]);
                            ga[i * d + t] += diff;
                            gb[j * d + t] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), ga));
                self.accumulate(grads, *b, Tensor::new(bv.shape(), gb));
            }
            Op::Matern52(d2) => {
                let x = self.value(*d2).data();
                let ga = elementwise(*d2, &|i, gi| gi * matern52_dsq(x[i]));
                self.accumulate(grads, *d2, ga);
            }
            Op::AddDiag(k, s) => {
                let n = out.shape()[0];
                if self.tracked(*s) {
                    let tr: f64 = (0..n).map(|i| gd[i * n + i]).sum();
                    self.accumulate_with(grads, *s, |acc| acc[0] += tr);
                }
                self.accumulate(grads, *k, g);
            }
            Op::GpNll { k, y, chol, alpha } => {
                let c = g.item();
                let n = alpha.len();
                if self.tracked(*k) {
                    let inv = linalg::cholesky_inverse(chol, n);
                    let mut gk = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            gk[i * n + j] = 0.5 * c * (inv[i * n + j] - alpha[i] * alpha[j]);
                        }
                    }
                    self.accumulate(grads, *k, Tensor::new(vec![n, n], gk));
                }
                if self.tracked(*y) {
                    let gy = alpha.iter().map(|a| c * a).collect();
                    self.accumulate(grads, *y, Tensor::new(self.shape(*y), gy));
                }
            }
            Op::GaussianNll { mu, sigma, y } => {
                let c = g.item();
                let (m, s) = (self.value(*mu).data(), self.value(*sigma).data());
                if self.tracked(*mu) {
                    let gm = (0..m.len()).map(|i| c * (m[i] - y[i]) / (s[i] * s[i])).collect();
                    self.accumulate(grads, *mu, Tensor::new(self.shape(*mu), gm));
                }
                if self.tracked(*sigma) {
                    let gs = (0..s.len())
                        .map(|i| {
                            let r = y[i] - m[i];
                            c * (1.0 / s[i] - r * r / (s[i] * s[i] * s[i]))
                        })
                        .collect();
                    self.accumulate(grads, *sigma, Tensor::new(self.shape(*sigma), gs));
                }
            }
        }
        Ok(())
    }
}

/// `½ ln(2π σ²) + (y − μ)² / (2σ²)`.
pub fn gaussian_nll(y: f64, mu: f64, sigma: f64) -> Result<f64, NumericsError> {
    if !(sigma > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "gaussian_nll needs sigma > 0, got {sigma}"
        )));
    }
    let r = (y - mu) / sigma;
    Ok(0.5 * LN_2PI + sigma.ln() + 0.5 * r * r)
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const SQRT_5: f64 = 2.236_067_977_499_79;

/// `(1 + √5 r + 5r²/3) e^{−√5 r}` with `r = √d2`.
pub fn matern52_from_sq(d2: f64) -> f64 {
    let d2 = d2.max(0.0);
    let r = d2.sqrt();
    (1.0 + SQRT_5 * r + 5.0 * d2 / 3.0) * (-SQRT_5 * r).exp()
}

/// Derivative of [`matern52_from_sq`] with respect to `d2`, finite at 0.
fn matern52_dsq(d2: f64) -> f64 {
    let r = d2.max(0.0).sqrt();
    -(5.0 / 6.0) * (1.0 + SQRT_5 * r) * (-SQRT_5 * r).exp()
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = (-(10_000f64.ln()) * 2.0 * pair / dim as f64).exp();
            let angle = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data)
}
