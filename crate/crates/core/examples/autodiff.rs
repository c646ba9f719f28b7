//! Reverse-mode autodiff on a tape, checked against central differences.
//!
//! `cargo run --example autodiff`

use nfuse::tensor::{finite_difference_grad, max_relative_error};
use nfuse::{Result, Tape, Tensor};

fn loss(tape: &Tape<f64>, x: &Tensor<f64>, w: &Tensor<f64>, labels: &[usize]) -> Result<Tensor<f64>> {
    let h = tape.gelu(&tape.matmul(x, w)?)?;
    let h = tape.layer_norm(&h, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5)?;
    tape.cross_entropy(&h, labels)
}

fn main() -> Result<()> {
    let x = Tensor::from_f64(&[2, 4], &[0.5, -1.0, 2.0, 0.1, -0.3, 0.8, 1.2, -2.0])?;
    let w = Tensor::from_f64(&[4, 3], &[0.2, -0.1, 0.4, 0.7, 0.3, -0.6, -0.5, 0.9, 0.1, 0.05, -0.2, 0.3])?;
    let labels = [2, 0];

    let tape = Tape::new();
    let wl = tape.leaf(&w);
    let l = loss(&tape, &x, &wl, &labels)?;
    let analytic = tape.backward(&l)?.wrt(&wl)?;
    println!("loss {:.6} over {} tape nodes", l.item(), tape.len());

    let numeric = finite_difference_grad(|w| Ok(loss(&Tape::new(), &x, w, &labels)?.item()), &w, 1e-6)?;
    println!("dL/dw analytic {:?}", analytic.to_f64_vec());
    println!("dL/dw numeric  {:?}", numeric.to_f64_vec());
    println!("max relative error {:.2e}", max_relative_error(&analytic, &numeric)?);
    Ok(())
}
