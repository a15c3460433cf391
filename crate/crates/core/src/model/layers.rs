//! Building blocks shared by the surrogate networks: dense layers, MLPs and
//! pre-norm transformer blocks over packed, variable-length segments.

use rand::Rng;

use crate::numerics::{NumericsError, ParamId, ParamStore, Segment, Tape, Tensor, Var};

/// Forward-pass context: parameter source plus the dropout stream.
pub(crate) struct Fwd<'a> {
    pub store: &'a ParamStore,
    dropout: Option<(f64, u64)>,
    calls: u64,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore, dropout: Option<(f64, u64)>) -> Self {
        Fwd {
            store,
            dropout: dropout.filter(|&(rate, _)| rate > 0.0),
            calls: 0,
        }
    }

    pub fn param(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.store, id)
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.dropout {
            Some((rate, seed)) => {
                self.calls += 1;
                let s = seed ^ self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                tape.dropout(x, rate, s)
            }
            None => x,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, f: &Fwd, tape: &mut Tape, x: Var) -> Var {
        let w = f.param(tape, self.w);
        let y = tape.matmul(x, w);
        let b = f.param(tape, self.b);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, f: &Fwd, tape: &mut Tape, x: Var) -> Var {
        let g = f.param(tape, self.gamma);
        let b = f.param(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Mlp {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, f: &Fwd, tape: &mut Tape, x: Var) -> Var {
        let h = self.first.forward(f, tape, x);
        let h = tape.gelu(h);
        self.second.forward(f, tape, h)
    }
}

/// Layout of a packed `[rows, dim]` activation made of consecutive
/// segments. Inside segment `b`, every row attends to the first `keys[b]`
/// rows of that segment and nothing else.
#[derive(Clone, Debug)]
pub(crate) struct Segments {
    parts: Vec<Segment>,
}

impl Segments {
    pub fn new(lens: Vec<usize>, keys: Vec<usize>) -> Self {
        assert_eq!(lens.len(), keys.len());
        let mut parts = Vec::with_capacity(lens.len());
        let mut start = 0;
        for (len, keys) in lens.into_iter().zip(keys) {
            assert!(keys >= 1 && keys <= len);
            parts.push(Segment { start, len, keys });
            start += len;
        }
        Segments { parts }
    }

    pub fn start(&self, b: usize) -> usize {
        self.parts[b].start
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff: Mlp,
    heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ff_dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: Mlp::new(store, &format!("{name}.ff"), [dim, ff_dim, dim], rng),
            heads,
        }
    }

    pub fn forward(&self, f: &mut Fwd, tape: &mut Tape, x: Var, segs: &Segments) -> Result<Var, NumericsError> {
        let h = self.ln1.forward(f, tape, x);
        let q = self.wq.forward(f, tape, h);
        let k = self.wk.forward(f, tape, h);
        let v = self.wv.forward(f, tape, h);
        let attended = tape.segment_attention(q, k, v, &segs.parts, self.heads)?;
        let o = self.wo.forward(f, tape, attended);
        let o = f.dropout(tape, o);
        let x = tape.add(x, o);
        let h = self.ln2.forward(f, tape, x);
        let y = self.ff.forward(f, tape, h);
        let y = f.dropout(tape, y);
        Ok(tape.add(x, y))
    }
}
