//! Central finite-difference oracle for the autodiff tape.
//!
//! Only forward values are used here; the backward pass under test is
//! compared against `(L(x + h) − L(x − h)) / 2h` coordinate by coordinate.

use auxbo::numerics::{AttentionMask, Segment, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_MIN_GRAD: f64 = 1e-6;

/// A scalar-valued graph over a fixed list of tracked inputs.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel_err: f64,
}

fn eval(build: &Builder<'_>, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).item()
}

/// Compares analytic and central-difference gradients for every input
/// coordinate whose gradient magnitude exceeds [`FD_MIN_GRAD`].
pub fn check(build: &Builder<'_>, inputs: &[Tensor]) -> Result<FdReport, String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let mut report = FdReport {
        checked: 0,
        worst_rel_err: 0.0,
    };
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("tracked input has a gradient");
        for i in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= FD_STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale <= FD_MIN_GRAD {
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            report.worst_rel_err = report.worst_rel_err.max(rel);
            if rel > FD_REL_TOL {
                return Err(format!(
                    "input {which} coord {i}: analytic {a:.10e} vs numeric {numeric:.10e} (rel {rel:.3e})"
                ));
            }
        }
    }
    Ok(report)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Reduces any tensor to a scalar through fixed random weights, so that every
/// output coordinate influences the loss differently.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(x, w);
    tape.sum(prod)
}

pub struct Primitive {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Builder<'static>>,
}

/// One finite-difference case per differentiable primitive of the tape.
pub fn primitive_cases(seed: u64) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m34 = |rng: &mut ChaCha8Rng| random_tensor(rng, &[3, 4], -1.5, 1.5);
    let pos34 = |rng: &mut ChaCha8Rng| random_tensor(rng, &[3, 4], 0.5, 2.0);
    let mut cases: Vec<Primitive> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $body:expr) => {
            cases.push(Primitive { name: $name, inputs: vec![$($input),*], build: Box::new($body) });
        };
    }
    case!("add", [m34(&mut rng), m34(&mut rng)], |t, v| { let o = t.add(v[0], v[1]); project(t, o, 1) });
    case!("sub", [m34(&mut rng), m34(&mut rng)], |t, v| { let o = t.sub(v[0], v[1]); project(t, o, 2) });
    case!("mul", [m34(&mut rng), m34(&mut rng)], |t, v| { let o = t.mul(v[0], v[1]); project(t, o, 3) });
    case!("div", [m34(&mut rng), pos34(&mut rng)], |t, v| { let o = t.div(v[0], v[1]); project(t, o, 4) });
    case!("add_row", [m34(&mut rng), random_tensor(&mut rng, &[4], -1.0, 1.0)], |t, v| { let o = t.add_row(v[0], v[1]); project(t, o, 5) });
    case!("mul_row", [m34(&mut rng), random_tensor(&mut rng, &[4], -1.0, 1.0)], |t, v| { let o = t.mul_row(v[0], v[1]); project(t, o, 6) });
    case!("scale", [m34(&mut rng)], |t, v| { let o = t.scale(v[0], -0.7); project(t, o, 7) });
    case!("add_scalar", [m34(&mut rng)], |t, v| { let o = t.add_scalar(v[0], 0.3); let o = t.square(o); project(t, o, 8) });
    case!("mul_scalar", [m34(&mut rng), Tensor::scalar(0.8)], |t, v| { let o = t.mul_scalar(v[0], v[1]); project(t, o, 9) });
    case!("matmul", [m34(&mut rng), random_tensor(&mut rng, &[4, 2], -1.0, 1.0)], |t, v| { let o = t.matmul(v[0], v[1]); project(t, o, 10) });
    case!("tanh", [m34(&mut rng)], |t, v| { let o = t.tanh(v[0]); project(t, o, 11) });
    case!("gelu", [m34(&mut rng)], |t, v| { let o = t.gelu(v[0]); project(t, o, 12) });
    case!("exp", [m34(&mut rng)], |t, v| { let o = t.exp(v[0]); project(t, o, 13) });
    case!("log", [pos34(&mut rng)], |t, v| { let o = t.log(v[0]); project(t, o, 14) });
    case!("softplus", [m34(&mut rng)], |t, v| { let o = t.softplus(v[0]); project(t, o, 15) });
    case!("square", [m34(&mut rng)], |t, v| { let o = t.square(v[0]); project(t, o, 16) });
    case!("sqrt", [pos34(&mut rng)], |t, v| { let o = t.sqrt(v[0]); project(t, o, 17) });
    case!("sum", [m34(&mut rng)], |t, v| { let s = t.sum(v[0]); t.square(s) });
    case!("mean", [m34(&mut rng)], |t, v| { let s = t.mean(v[0]); t.square(s) });
    case!("softmax", [m34(&mut rng)], |t, v| { let o = t.softmax(v[0]); project(t, o, 18) });
    case!("layer_norm", [m34(&mut rng), random_tensor(&mut rng, &[4], 0.5, 1.5), random_tensor(&mut rng, &[4], -0.5, 0.5)],
        |t, v| { let o = t.layer_norm(v[0], v[1], v[2]); project(t, o, 19) });
    case!("dropout", [m34(&mut rng)], |t, v| { let o = t.dropout(v[0], 0.3, 99); project(t, o, 20) });
    case!("gather_rows", [m34(&mut rng), random_tensor(&mut rng, &[2, 4], -1.0, 1.0)],
        |t, v| { let o = t.gather_rows(&[v[0], v[1]], &[(1, 0), (0, 2), (0, 2), (1, 1), (0, 0)]); project(t, o, 21) });
    case!("reshape", [m34(&mut rng)], |t, v| { let o = t.reshape(v[0], &[2, 6]); project(t, o, 22) });
    case!("select_column", [m34(&mut rng)], |t, v| { let o = t.select_column(v[0], 2); project(t, o, 23) });
    case!("attention", [random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0), random_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0), random_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0)],
        |t, v| {
            let mask = AttentionMask::batched(2, 3, 5, (0..30).map(|i| i % 7 != 3 && i % 5 != 4).collect());
            let o = t.attention(v[0], v[1], v[2], &mask, 2).unwrap();
            project(t, o, 24)
        });
    case!("segment_attention", [random_tensor(&mut rng, &[9, 4], -1.0, 1.0), random_tensor(&mut rng, &[9, 4], -1.0, 1.0), random_tensor(&mut rng, &[9, 4], -1.0, 1.0)],
        |t, v| {
            let segs = [Segment { start: 0, len: 4, keys: 2 }, Segment { start: 5, len: 4, keys: 4 }];
            let o = t.segment_attention(v[0], v[1], v[2], &segs, 2).unwrap();
            project(t, o, 28)
        });
    case!("sq_dist", [m34(&mut rng), random_tensor(&mut rng, &[2, 4], -1.0, 1.0)], |t, v| { let o = t.sq_dist(v[0], v[1]); project(t, o, 25) });
    case!("matern52", [pos34(&mut rng)], |t, v| { let o = t.matern52(v[0]); project(t, o, 26) });
    case!("add_diag", [random_tensor(&mut rng, &[3, 3], -1.0, 1.0), Tensor::scalar(0.4)], |t, v| { let o = t.add_diag(v[0], v[1]); project(t, o, 27) });
    case!("gp_nll", [random_tensor(&mut rng, &[4, 2], -1.0, 1.0), random_tensor(&mut rng, &[4], -1.0, 1.0)],
        |t, v| {
            let d2 = t.sq_dist(v[0], v[0]);
            let neg = t.scale(d2, -0.5);
            let k = t.exp(neg);
            let noise = t.constant(Tensor::scalar(0.1));
            let k = t.add_diag(k, noise);
            t.gp_nll(k, v[1], 1e-6).unwrap()
        });
    case!("gaussian_nll", [random_tensor(&mut rng, &[5], -1.0, 1.0), random_tensor(&mut rng, &[5], 0.3, 1.5)],
        |t, v| t.gaussian_nll(&[0.1, -0.4, 0.9, 0.0, 0.5], v[0], v[1]).unwrap());
    cases
}

/// Random composite graph over a `[3, 4]` input, a `[4, 4]` weight and a
/// `[4]` bias, chaining between four and eight primitives.
pub fn random_composite(seed: u64) -> (Vec<Tensor>, Box<Builder<'static>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        random_tensor(&mut rng, &[4, 4], -0.8, 0.8),
        random_tensor(&mut rng, &[4], -0.5, 0.5),
        random_tensor(&mut rng, &[4], 0.5, 1.5),
    ];
    let n_ops = rng.random_range(4..=8);
    let ops: Vec<u32> = (0..n_ops).map(|_| rng.random_range(0..14)).collect();
    let build = move |t: &mut Tape, v: &[Var]| {
        let mut x = v[0];
        for (step, op) in ops.iter().enumerate() {
            x = match op {
                0 => t.matmul(x, v[1]),
                1 => t.add_row(x, v[2]),
                2 => t.tanh(x),
                3 => t.gelu(x),
                4 => t.softplus(x),
                5 => t.layer_norm(x, v[3], v[2]),
                6 => t.softmax(x),
                7 => {
                    let y = t.mul_row(x, v[3]);
                    t.add(x, y)
                }
                8 => {
                    let q = t.reshape(x, &[1, 3, 4]);
                    let mask = AttentionMask::from_fn(3, 3, |i, j| j <= i);
                    let o = t.attention(q, q, q, &mask, 2).unwrap();
                    t.reshape(o, &[3, 4])
                }
                9 => {
                    let s = t.square(x);
                    let s = t.add_scalar(s, 1.0);
                    t.div(x, s)
                }
                10 => t.dropout(x, 0.25, 1000 + step as u64),
                11 => t.gather_rows(&[x], &[(0, 2), (0, 0), (0, 1)]),
                12 => {
                    let e = t.scale(x, 0.5);
                    t.exp(e)
                }
                _ => {
                    let y = t.matmul(x, v[1]);
                    t.mul(x, y)
                }
            };
        }
        project(t, x, 77)
    };
    (inputs, Box::new(build))
}
