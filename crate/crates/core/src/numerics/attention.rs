//! Fused masked multi-head attention.
//!
//! Keys that no query of a batch element may attend to are dropped before the
//! score matmul, so a mask such as "everything attends to the first `n`
//! tokens" costs `O(L·n)` rather than `O(L²)`.

use super::tape::softmax_in_place;
use super::tensor::{gemm, MatMut, MatRef, Tensor};
use super::NumericsError;

/// Boolean attention pattern: `allowed(b, i, j)` is true iff query `i` of
/// batch element `b` may attend to key `j`. A mask with `batch == 1` is
/// shared by every batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    batch: usize,
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Self {
        Self::batched(1, queries, keys, allowed)
    }

    pub fn batched(batch: usize, queries: usize, keys: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), batch * queries * keys, "mask size");
        AttentionMask {
            batch,
            queries,
            keys,
            allowed,
        }
    }

    pub fn full(queries: usize, keys: usize) -> Self {
        Self::new(queries, keys, vec![true; queries * keys])
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..queries)
            .flat_map(|i| (0..keys).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self::new(queries, keys, allowed)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        let b = if self.batch == 1 { 0 } else { b };
        self.allowed[(b * self.queries + i) * self.keys + j]
    }
}

#[derive(Debug)]
pub(crate) struct AttentionSaved {
    heads: usize,
    scale: f64,
    /// Per batch element: key indices that at least one query may see.
    active: Vec<Vec<usize>>,
    /// Per batch element: `[heads, Lq, active.len()]` attention weights.
    probs: Vec<Vec<f64>>,
}

fn dims(t: &Tensor, what: &str) -> (usize, usize, usize) {
    assert_eq!(t.rank(), 3, "attention: {what} must be [batch, tokens, dim]");
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn compact_rows(src: &Tensor, b: usize, len: usize, dim: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * dim);
    let base = b * len * dim;
    for &j in rows {
        out.extend_from_slice(&src.data()[base + j * dim..base + (j + 1) * dim]);
    }
    out
}

pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    heads: usize,
) -> Result<(Tensor, AttentionSaved), NumericsError> {
    let (batch, lq, dim) = dims(q, "queries");
    let (kb, lk, kd) = dims(k, "keys");
    assert_eq!((kb, lk, kd), (batch, v.shape()[1], v.shape()[2]), "attention: key/value shapes");
    assert_eq!(kb, batch, "attention: batch sizes differ");
    assert_eq!(kd, dim, "attention: key width differs from query width");
    assert!(heads > 0 && dim % heads == 0, "attention: {dim} not divisible by {heads} heads");
    assert!(mask.batch == 1 || mask.batch == batch, "attention: mask batch");
    assert_eq!((mask.queries, mask.keys), (lq, lk), "attention: mask shape");

    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * lq * dim];
    let mut active_all = Vec::with_capacity(batch);
    let mut probs_all = Vec::with_capacity(batch);

    for b in 0..batch {
        for i in 0..lq {
            if !(0..lk).any(|j| mask.allowed(b, i, j)) {
                return Err(NumericsError::FullyMaskedRow { batch: b, row: i });
            }
        }
        let active: Vec<usize> = (0..lk)
            .filter(|&j| (0..lq).any(|i| mask.allowed(b, i, j)))
            .collect();
        let la = active.len();
        let kc = compact_rows(k, b, lk, dim, &active);
        let vc = compact_rows(v, b, lk, dim, &active);
        let mut probs = vec![0.0; heads * lq * la];
        for h in 0..heads {
            let p = &mut probs[h * lq * la..(h + 1) * lq * la];
            let q_bh = MatRef {
                data: q.data(),
                offset: b * lq * dim + h * dh,
                rows: lq,
                cols: dh,
                row_stride: dim,
                col_stride: 1,
            };
            let k_bh = MatRef {
                data: &kc,
                offset: h * dh,
                rows: la,
                cols: dh,
                row_stride: dim,
                col_stride: 1,
            };
            gemm(scale, q_bh, k_bh.t(), 0.0, MatMut::dense(p, 0, la));
            for i in 0..lq {
                let row = &mut p[i * la..(i + 1) * la];
                let mut allowed_vals = Vec::with_capacity(la);
                for (c, &j) in active.iter().enumerate() {
                    if mask.allowed(b, i, j) {
                        allowed_vals.push(row[c]);
                    }
                }
                softmax_in_place(&mut allowed_vals);
                let mut it = allowed_vals.into_iter();
                for (c, &j) in active.iter().enumerate() {
                    row[c] = if mask.allowed(b, i, j) { it.next().unwrap() } else { 0.0 };
                }
            }
            let v_bh = MatRef {
                data: &vc,
                offset: h * dh,
                rows: la,
                cols: dh,
                row_stride: dim,
                col_stride: 1,
            };
            gemm(
                1.0,
                MatRef::dense(p, 0, lq, la),
                v_bh,
                0.0,
                MatMut {
                    data: &mut out,
                    offset: b * lq * dim + h * dh,
                    row_stride: dim,
                    col_stride: 1,
                },
            );
        }
        active_all.push(active);
        probs_all.push(probs);
    }
    Ok((
        Tensor::new(q.shape(), out),
        AttentionSaved {
            heads,
            scale,
            active: active_all,
            probs: probs_all,
        },
    ))
}

pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    saved: &AttentionSaved,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (batch, lq, dim) = dims(q, "queries");
    let lk = k.shape()[1];
    let heads = saved.heads;
    let dh = dim / heads;
    let mut gq = vec![0.0; q.numel()];
    let mut gk = vec![0.0; k.numel()];
    let mut gv = vec![0.0; v.numel()];
    let gd = g.data();

    for b in 0..batch {
        let active = &saved.active[b];
        let la = active.len();
        let kc = compact_rows(k, b, lk, dim, active);
        let vc = compact_rows(v, b, lk, dim, active);
        let mut gkc = vec![0.0; la * dim];
        let mut gvc = vec![0.0; la * dim];
        let mut dp = vec![0.0; lq * la];
        for h in 0..heads {
            let p = &saved.probs[b][h * lq * la..(h + 1) * lq * la];
            let go_bh = MatRef {
                data: gd,
                offset: b * lq * dim + h * dh,
                rows: lq,
                cols: dh,
                row_stride: dim,
                col_stride: 1,
            };
            // dV = Pᵀ dO
            gemm(
                1.0,
                MatRef::dense(p, 0, lq, la).t(),
                go_bh,
                1.0,
                MatMut {
                    data: &mut gvc,
                    offset: h * dh,
                    row_stride: dim,
                    col_stride: 1,
                },
            );
            // dP = dO Vᵀ
            gemm(1.0, go_bh, head_view(&vc, h, la, dh, dim).t(), 0.0, MatMut::dense(&mut dp, 0, la));
            // dS = P ⊙ (dP − rowsum(P ⊙ dP))
            for i in 0..lq {
                let prow = &p[i * la..(i + 1) * la];
                let drow = &mut dp[i * la..(i + 1) * la];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for c in 0..la {
                    drow[c] = prow[c] * (drow[c] - dot);
                }
            }
            // dQ = scale · dS K
            gemm(
                saved.scale,
                MatRef::dense(&dp, 0, lq, la),
                head_view(&kc, h, la, dh, dim),
                1.0,
                MatMut {
                    data: &mut gq,
                    offset: b * lq * dim + h * dh,
                    row_stride: dim,
                    col_stride: 1,
                },
            );
            // dK = scale · dSᵀ Q
            let q_bh = MatRef {
                data: q.data(),
                offset: b * lq * dim + h * dh,
                rows: lq,
                cols: dh,
                row_stride: dim,
                col_stride: 1,
            };
            gemm(
                saved.scale,
                MatRef::dense(&dp, 0, lq, la).t(),
                q_bh,
                1.0,
                MatMut {
                    data: &mut gkc,
                    offset: h * dh,
                    row_stride: dim,
                    col_stride: 1,
                },
            );
        }
        let base = b * lk * dim;
        for (c, &j) in active.iter().enumerate() {
            for t in 0..dim {
                gk[base + j * dim + t] += gkc[c * dim + t];
                gv[base + j * dim + t] += gvc[c * dim + t];
            }
        }
    }
    (
        Tensor::new(q.shape(), gq),
        Tensor::new(k.shape(), gk),
        Tensor::new(v.shape(), gv),
    )
}

fn head_view(data: &[f64], h: usize, rows: usize, dh: usize, dim: usize) -> MatRef<'_> {
    MatRef {
        data,
        offset: h * dh,
        rows,
        cols: dh,
        row_stride: dim,
        col_stride: 1,
    }
}

/// A run of `len` consecutive rows of a packed `[rows, dim]` activation.
/// Every row of the run attends to the first `keys` rows of the run and to
/// nothing else.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub keys: usize,
}

#[derive(Debug)]
pub(crate) struct SegmentSaved {
    heads: usize,
    scale: f64,
    segments: Vec<Segment>,
    /// Per segment and head: `[len, keys]` attention weights, concatenated.
    probs: Vec<f64>,
}

fn strided(data: &[f64], row: usize, h: usize, rows: usize, dh: usize, dim: usize) -> MatRef<'_> {
    MatRef {
        data,
        offset: row * dim + h * dh,
        rows,
        cols: dh,
        row_stride: dim,
        col_stride: 1,
    }
}

fn strided_mut(data: &mut [f64], row: usize, h: usize, dh: usize, dim: usize) -> MatMut<'_> {
    MatMut {
        data,
        offset: row * dim + h * dh,
        row_stride: dim,
        col_stride: 1,
    }
}

pub(crate) fn segment_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    segments: &[Segment],
    heads: usize,
) -> Result<(Tensor, SegmentSaved), NumericsError> {
    assert_eq!(q.rank(), 2, "segment attention: queries must be [rows, dim]");
    assert_eq!(q.shape(), k.shape(), "segment attention: key shape");
    assert_eq!(q.shape(), v.shape(), "segment attention: value shape");
    let (rows, dim) = (q.shape()[0], q.shape()[1]);
    assert!(heads > 0 && dim % heads == 0, "attention: {dim} not divisible by {heads} heads");
    let mut end = 0;
    for (b, s) in segments.iter().enumerate() {
        assert!(s.start >= end && s.start + s.len <= rows, "segments must be ordered and disjoint");
        if s.keys == 0 && s.len > 0 {
            return Err(NumericsError::FullyMaskedRow { batch: b, row: 0 });
        }
        assert!(s.keys <= s.len, "segment keys exceed its length");
        end = s.start + s.len;
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * dim];
    let total: usize = segments.iter().map(|s| s.len * s.keys).sum::<usize>() * heads;
    let mut probs = vec![0.0; total];
    let mut off = 0;
    for s in segments {
        for h in 0..heads {
            let n = s.len * s.keys;
            let p = &mut probs[off..off + n];
            gemm(
                scale,
                strided(q.data(), s.start, h, s.len, dh, dim),
                strided(k.data(), s.start, h, s.keys, dh, dim).t(),
                0.0,
                MatMut::dense(p, 0, s.keys),
            );
            for row in p.chunks_mut(s.keys) {
                softmax_in_place(row);
            }
            gemm(
                1.0,
                MatRef::dense(p, 0, s.len, s.keys),
                strided(v.data(), s.start, h, s.keys, dh, dim),
                0.0,
                strided_mut(&mut out, s.start, h, dh, dim),
            );
            off += n;
        }
    }
    Ok((
        Tensor::new(q.shape(), out),
        SegmentSaved {
            heads,
            scale,
            segments: segments.to_vec(),
            probs,
        },
    ))
}

pub(crate) fn segment_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    saved: &SegmentSaved,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let dim = q.shape()[1];
    let heads = saved.heads;
    let dh = dim / heads;
    let mut gq = vec![0.0; q.numel()];
    let mut gk = vec![0.0; k.numel()];
    let mut gv = vec![0.0; v.numel()];
    let gd = g.data();
    let mut ds = Vec::new();
    let mut off = 0;
    for s in &saved.segments {
        for h in 0..heads {
            let n = s.len * s.keys;
            let p = &saved.probs[off..off + n];
            off += n;
            let go = strided(gd, s.start, h, s.len, dh, dim);
            // dV = Pᵀ dO
            gemm(
                1.0,
                MatRef::dense(p, 0, s.len, s.keys).t(),
                go,
                1.0,
                strided_mut(&mut gv, s.start, h, dh, dim),
            );
            // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP))
            ds.clear();
            ds.resize(n, 0.0);
            gemm(
                1.0,
                go,
                strided(v.data(), s.start, h, s.keys, dh, dim).t(),
                0.0,
                MatMut::dense(&mut ds, 0, s.keys),
            );
            for (drow, prow) in ds.chunks_mut(s.keys).zip(p.chunks(s.keys)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ = scale · dS K,  dK = scale · dSᵀ Q
            gemm(
                saved.scale,
                MatRef::dense(&ds, 0, s.len, s.keys),
                strided(k.data(), s.start, h, s.keys, dh, dim),
                1.0,
                strided_mut(&mut gq, s.start, h, dh, dim),
            );
            gemm(
                saved.scale,
                MatRef::dense(&ds, 0, s.len, s.keys).t(),
                strided(q.data(), s.start, h, s.len, dh, dim),
                1.0,
                strided_mut(&mut gk, s.start, h, dh, dim),
            );
        }
    }
    (
        Tensor::new(q.shape(), gq),
        Tensor::new(k.shape(), gk),
        Tensor::new(v.shape(), gv),
    )
}
