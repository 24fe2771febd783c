//! Fits sin(x) with a tanh MLP trained by Adam on the tape autodiff.

use mimalloc::MiMalloc;
use ndarray::Array2;
use tclab::nn::{Activation, Adam, AdamConfig, Graph, Mlp};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() -> tclab::Result<()> {
    let mut rng = tclab::seed::rng(1);
    let mut net = Mlp::new(&[1, 32, 32, 1], Activation::Tanh, &mut rng)?;
    let mut opt = Adam::new(&net, AdamConfig::with_lr(3e-3));

    let n = 128;
    let x = Array2::from_shape_fn((n, 1), |(i, _)| -3.0 + 6.0 * i as f64 / (n - 1) as f64);
    let y = x.mapv(f64::sin);

    for step in 0..=2000 {
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let xv = g.leaf(x.clone());
        let yv = g.leaf(y.clone());
        let pred = net.forward_on(&mut g, &p, xv)?;
        let loss = g.mse(pred, yv)?;
        if step % 400 == 0 {
            println!("step {step:>4}  mse {:.6}", g.scalar(loss));
        }
        let grads = p.grads(&net, &g.backward(loss)?);
        opt.step(&mut net, &grads)?;
    }
    let probe = Array2::from_shape_vec((3, 1), vec![-1.5, 0.0, 1.0]).expect("shape");
    let out = net.forward(&probe)?;
    for (xi, yi) in probe.iter().zip(out.iter()) {
        println!("f({xi:+.2}) = {yi:+.4}   sin = {:+.4}", xi.sin());
    }
    Ok(())
}
