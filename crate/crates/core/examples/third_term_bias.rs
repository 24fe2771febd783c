//! Rank correlation between the cross-term share and the absolute error, per TC level.

use mimalloc::MiMalloc;
use tclab::analysis::{bias_correlation_from_runs, Report, Scale};
use tclab::dataset::{generate_dataset, SweepSettings};
use tclab::decomp::PathKind;
use tclab::mi::{EstimatorConfig, EstimatorKind};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() -> tclab::Result<()> {
    let settings = SweepSettings {
        path: PathKind::Tree,
        iters: 600,
        estimator: EstimatorConfig::desk(),
    };
    let kinds = [EstimatorKind::Mine, EstimatorKind::Nwj];
    let build = generate_dataset(&[2.0, 6.0, 10.0], 6, &kinds, &settings, 5, 0)?;
    let rows = bias_correlation_from_runs(&build.runs);
    Report::bias_detail(&rows).write(std::io::stdout().lock(), 5, Scale::Desk)?;
    Ok(())
}
