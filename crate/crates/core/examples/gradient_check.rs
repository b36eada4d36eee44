//! Reverse-mode gradients against central finite differences on a small
//! attention-style graph.

use dpldm::autodiff::Tape;
use dpldm::rng::{stream, Purpose};
use dpldm::tensor::Tensor;

fn loss(x: &Tensor, w: &Tensor) -> dpldm::Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone().with_grad(true));
    let h = tape.linear(xv, wv, None)?;
    let h = tape.silu(h);
    let p = tape.softmax(h, 1)?;
    let sq = tape.mul(p, p)?;
    let l = tape.sum(sq);
    Ok((tape.value(l).data()[0], tape.grad_of(l, wv)?))
}

fn main() -> dpldm::Result<()> {
    let mut rng = stream(0, Purpose::Init, &[]);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 4], 0.5, &mut rng);
    let (_, analytic) = loss(&x, &w)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..w.numel() {
        let mut up = w.clone();
        up.data_mut()[i] += h;
        let mut down = w.clone();
        down.data_mut()[i] -= h;
        let fd = (loss(&x, &up)?.0 - loss(&x, &down)?.0) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
    }
    println!("{} weights, worst relative error {worst:.2e}", w.numel());
    Ok(())
}
