//! Trains a two-head corrector and compares it with the raw estimates on held-out matrices.

use mimalloc::MiMalloc;
use tclab::corrector::{estimator_metrics, train_corrector, CorrectorConfig};
use tclab::dataset::{generate_dataset, split_dataset, SplitKind, SweepSettings};
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
    let heads = vec![EstimatorKind::Mine, EstimatorKind::Nwj];
    let levels: Vec<f64> = (1..=10).map(f64::from).collect();
    let build = generate_dataset(&levels, 6, &heads, &settings, 3, 0)?;
    let sp = split_dataset(&build.records, SplitKind::Ratio46, 3)?;

    let cfg = CorrectorConfig {
        pretrain_epochs: 60,
        finetune_epochs: 120,
        ..CorrectorConfig::with_heads(&heads)
    };
    let (model, history) = train_corrector(&sp.train, &cfg, Some(&sp.test))?;
    if let (Some(first), Some(last)) = (history.finetune.first(), history.finetune.last()) {
        println!("fine-tune loss {:.4} -> {:.4}", first.total, last.total);
    }
    let corr = model.evaluate(&sp.test)?;
    let all = corr.last().expect("aggregate row");
    println!("corrector    MAE {:.4}  MSE {:.4}", all.mae, all.mse);
    for k in heads {
        let m = estimator_metrics(&sp.test, k);
        let m = m.last().expect("aggregate row");
        println!("raw {:<8} MAE {:.4}  MSE {:.4}", k.name(), m.mae, m.mse);
    }
    Ok(())
}
