//! Trains each MI estimator on a correlated 2-d Gaussian and compares with the exact MI.

use mimalloc::MiMalloc;
use nalgebra::DMatrix;
use ndarray::s;
use tclab::gaussian::{analytic_mi, GaussianSampler, GaussianSpec};
use tclab::mi::{EstimatorConfig, EstimatorKind, MiEstimator, PairedBatch};
use tclab::seed;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() -> tclab::Result<()> {
    let mi = 1.0_f64;
    let rho = (1.0 - (-2.0 * mi).exp()).sqrt();
    let spec = GaussianSpec::from_sigma(DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]), 0)?;
    println!("rho = {rho:.4}, exact MI = {:.4}", analytic_mi(&spec.sigma, &[0], &[1])?);

    let cfg = EstimatorConfig::desk();
    let iters = 2000;
    for kind in EstimatorKind::ALL {
        let mut est = MiEstimator::new(kind, 1, 1, &cfg, 3)?;
        let mut sampler = GaussianSampler::new(&spec, "pair", 4)?;
        let mut tail = Vec::new();
        for it in 0..iters {
            let xy = sampler.draw(cfg.batch);
            let batch = PairedBatch::new(
                xy.slice(s![.., 0..1]).to_owned(),
                xy.slice(s![.., 1..2]).to_owned(),
                seed::derive(9, seed::stream::NEGATIVES, it as u64),
            )?;
            let out = est.train_step(&batch)?;
            if it >= iters - iters / 10 {
                tail.push(out.bound);
            }
        }
        let avg = tail.iter().sum::<f64>() / tail.len() as f64;
        let side = if kind.is_lower_bound() { "lower" } else { "upper" };
        println!("{:<8} ({side} bound)  tail mean {avg:.4}", kind.name());
    }
    Ok(())
}
