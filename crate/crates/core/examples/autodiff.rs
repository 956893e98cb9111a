//! Reverse-mode differentiation on a small expression, checked against
//! central finite differences.

use owpsnet::tensor::finite_diff_check;
use owpsnet::{Tape, Tensor};

fn main() -> owpsnet::Result<()> {
    // f(x) = sum(sigmoid(x) * x^2)
    let f = |tape: &mut Tape<f64>, x| {
        let s = tape.sigmoid(x);
        let sq = tape.square(x);
        let prod = tape.mul(s, sq)?;
        Ok(tape.sum(prod))
    };

    let x = Tensor::from_vec(&[4], vec![-1.5, -0.2, 0.3, 2.0])?;
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    println!("f(x)  = {:.6}", tape.value(y).item());
    println!("df/dx = {:?}", tape.grad(xv).unwrap());

    let check = finite_diff_check(f, &x, 1e-5)?;
    println!("finite differences agree to {:.2e} (max relative error)", check.max_rel_err);
    Ok(())
}
