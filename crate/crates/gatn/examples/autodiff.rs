//! Reverse-mode autodiff on the tape: record a small graph, run one
//! backward pass, and compare a gradient against a finite difference.

use gatn::tensor::{Tape, Tensor};

fn main() {
    // loss = sum(relu(x W + b) * x W + b ...): a tiny dense -> relu -> sum
    let x = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.7]).unwrap();
    let w = Tensor::from_vec(&[3, 2], vec![0.1, -0.3, 0.8, 0.4, -0.5, 0.9]).unwrap();
    let b = Tensor::from_vec(&[2], vec![0.05, -0.02]).unwrap();

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.leaf(w.clone(), true);
    let bv = tape.leaf(b.clone(), true);
    let h = tape.dense(xv, wv, bv).unwrap();
    let a = tape.relu(h).unwrap();
    let loss = tape.sum(a).unwrap();
    tape.backward(loss).unwrap();

    println!("loss = {:.6}", tape.value(loss).item());
    println!("dloss/dW = {:?}", tape.grad(wv).unwrap().data());
    println!("dloss/db = {:?}", tape.grad(bv).unwrap().data());

    // sanity: finite difference on one weight element
    let eps = 1e-6;
    let eval = |delta: f64| {
        let mut w2 = w.clone();
        w2.data_mut()[0] += delta;
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), false);
        let wv = t.leaf(w2, false);
        let bv = t.leaf(b.clone(), false);
        let h = t.dense(xv, wv, bv).unwrap();
        let a = t.relu(h).unwrap();
        let l = t.sum(a).unwrap();
        t.value(l).item()
    };
    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
    let ad = tape.grad(wv).unwrap().data()[0];
    println!("dloss/dW[0]: analytic {ad:.8} vs finite difference {fd:.8}");

    // gradients of intermediates are retained too: the attention map relies
    // on reading d(entropy)/d(feature grid) off the tape
    println!("dloss/d(hidden) = {:?}", tape.grad(h).unwrap().data());
    println!("backward passes: {}", tape.backward_runs());
}
