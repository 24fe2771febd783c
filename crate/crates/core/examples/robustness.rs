//! Trains on levels 1-5 only and scores on the unseen 6-10 range under both losses.

use mimalloc::MiMalloc;
use tclab::analysis::{robustness_experiment, Report, Scale};
use tclab::corrector::{CorrectorConfig, LossKind};
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
    let kinds = [EstimatorKind::Mine];
    let levels: Vec<f64> = (1..=10).map(f64::from).collect();
    let build = generate_dataset(&levels, 6, &kinds, &settings, 4, 0)?;
    let base = CorrectorConfig {
        pretrain_epochs: 60,
        finetune_epochs: 120,
        ..CorrectorConfig::default()
    };
    let rows = robustness_experiment(&build.records, &kinds, &[LossKind::Mse, LossKind::L1], &base, 4, 0)?;
    Report::robustness(&rows).write(std::io::stdout().lock(), 4, Scale::Desk)?;
    Ok(())
}
