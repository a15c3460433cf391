//! Reverse-mode differentiation of a small graph, checked against central
//! finite differences.

use auxbo::numerics::{Tape, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> (f64, Tensor) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.variable(w.clone());
    let h = tape.matmul(xv, wv);
    let h = tape.tanh(h);
    let s = tape.square(h);
    let l = tape.mean(s);
    let grads = tape.backward(l).expect("finite graph");
    (tape.value(l).item(), grads.wrt(wv).expect("w is on the tape").clone())
}

fn main() {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]]);
    let w = Tensor::from_rows(&[vec![0.2, -0.5], vec![0.7, 0.1], vec![-0.3, 0.9]]);
    let (value, grad) = loss(&x, &w);
    println!("loss {value:.6}");
    let eps = 1e-6;
    for i in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[i] += eps;
        let mut minus = w.clone();
        minus.data_mut()[i] -= eps;
        let fd = (loss(&x, &plus).0 - loss(&x, &minus).0) / (2.0 * eps);
        println!("dL/dw[{i}]  tape {:+.8}  finite difference {:+.8}", grad.data()[i], fd);
    }
}
