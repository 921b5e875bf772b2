//! The tensor engine in isolation: build a small expression, run the
//! backward pass, and confirm one gradient against a central difference.
//!
//!     cargo run --example autodiff_basics

use cosalign::tensor::gradcheck::grad_check;
use cosalign::tensor::{ops, Tensor};

fn main() {
    // f(w, x) = sum(relu(w * x + 0.5)), elementwise over four lanes.
    let w = Tensor::<f64>::parameter(&[4], vec![0.8, -1.2, 0.3, 2.0]).unwrap();
    let x = Tensor::<f64>::new(&[4], vec![1.5, 0.7, -0.4, 0.2]).unwrap();

    let prod = ops::mul(&w, &x).unwrap();
    let shifted = ops::affine(&prod, 1.0, 0.5);
    let loss = ops::sum(&ops::relu(&shifted));

    println!("loss = {:.6}", loss.value());
    loss.backward().unwrap();

    // Lane 1 has w*x + 0.5 = -0.34 < 0, so relu blocks its gradient;
    // the constant input x never collects one at all.
    println!("dL/dw = {:?}", w.grad().unwrap());
    assert_eq!(w.grad().unwrap()[1], 0.0);
    assert!(x.grad().is_none(), "x was not declared a parameter");

    // Gradients accumulate across backward calls until reset.
    loss.backward().unwrap();
    assert_eq!(w.grad().unwrap()[0], 2.0 * 1.5);
    w.zero_grad();

    // The same engine check used by the test suite, on a fresh expression.
    let report = grad_check(
        "relu-affine-product",
        |inputs| {
            let p = ops::mul(&inputs[0], &x).unwrap();
            ops::sum(&ops::relu(&ops::affine(&p, 1.0, 0.5)))
        },
        &[w],
        1e-6,
        1e-6,
    );
    println!("{report}");
    assert!(report.passed());
}
