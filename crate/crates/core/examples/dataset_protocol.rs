//! Builds a small sequence dataset, splits it, and normalizes the features.

use mimalloc::MiMalloc;
use tclab::dataset::{generate_dataset, normalize_features, split_dataset, write_records, SplitKind, SweepSettings};
use tclab::decomp::PathKind;
use tclab::mi::{EstimatorConfig, EstimatorKind};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() -> tclab::Result<()> {
    let settings = SweepSettings {
        path: PathKind::Tree,
        iters: 300,
        estimator: EstimatorConfig::desk(),
    };
    let levels: Vec<f64> = (1..=10).map(f64::from).collect();
    let build = generate_dataset(&levels, 2, &[EstimatorKind::Mine, EstimatorKind::Club], &settings, 1, 0)?;
    println!("{} matrices, {} records, {} dropped", build.matrices.len(), build.records.len(), build.dropped());

    for kind in [SplitKind::Ratio37, SplitKind::Ratio46, SplitKind::TcMask610] {
        let sp = split_dataset(&build.records, kind, 1)?;
        println!("{kind:?}: train {} / test {}", sp.train.len(), sp.test.len());
    }

    let (_, stats) = normalize_features(&build.records, None)?;
    println!("position 29: mean {:.3} std {:.3}", stats.mean[29], stats.std[29]);

    let mut head = Vec::new();
    write_records(&build.records[..2], &mut head)?;
    print!("{}", String::from_utf8_lossy(&head).lines().map(|l| format!("{:.100}...\n", l)).collect::<String>());
    Ok(())
}
