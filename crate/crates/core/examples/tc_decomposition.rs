//! Estimates TC of a 4-d Gaussian along the TREE and LINE paths with MINE.

use mimalloc::MiMalloc;
use tclab::decomp::{build_plan, estimate_tc, PathKind};
use tclab::gaussian::{gen_spec_with_target_tc, GaussianSampler};
use tclab::mi::{EstimatorConfig, EstimatorKind};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() -> tclab::Result<()> {
    let spec = gen_spec_with_target_tc(4, 5.0, 21)?;
    let cfg = EstimatorConfig::desk();
    for path in [PathKind::Tree, PathKind::Line] {
        let plan = build_plan(path, 4)?;
        let exact = plan.analytic_terms(&spec.sigma)?;
        let mut sampler = GaussianSampler::new(&spec, "m0", 8)?;
        let run = estimate_tc(&mut sampler, &plan, EstimatorKind::Mine, &cfg, 2000, 17)?;
        println!("{path} path, true TC {:.3}", spec.true_tc);
        for (k, (est, tru)) in run.final_terms().iter().zip(&exact).enumerate() {
            println!("  term {k}: estimate {est:.4}  exact {tru:.4}");
        }
        println!("  total: {:.4}", run.final_estimate().unwrap_or(f64::NAN));
        if path == PathKind::Tree {
            println!("  third-term share: {:.3}", run.third_term_proportion()?);
        }
    }
    Ok(())
}
