//! Correlation statistics and the experiment drivers behind the CSV reports.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{estimator_metrics, metrics_by_level, train_corrector, CorrectorConfig, CorrectorModel, LossKind};
use crate::dataset::{split_dataset, sweep, SequenceRecord, SplitKind, SweepRun, SweepSettings};
use crate::decomp::third_term_proportion;
use crate::error::{Error, Result};
use crate::gaussian::generate_matrices;
use crate::mi::EstimatorKind;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

impl Scale {
    pub fn specs_per_level(self) -> usize {
        match self {
            Scale::Desk => 20,
            Scale::Full => 200,
        }
    }

    pub fn iters(self) -> usize {
        3000
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::InvalidArgument(format!("unknown scale '{other}'"))),
        }
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("correlation inputs must be finite".into()));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

/// Correlation between third-term share and absolute error at one (kind, level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrelationRow {
    pub kind: EstimatorKind,
    pub level: i64,
    pub n: usize,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub mean_abs_error: f64,
    pub mean_third_share: f64,
}

/// Groups converged TREE runs by (kind, rounded true TC).
pub fn bias_correlation_from_runs(runs: &[SweepRun]) -> Vec<BiasCorrelationRow> {
    let mut groups: BTreeMap<(EstimatorKind, i64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.is_ok()) {
        let Ok(share) = third_term_proportion(&r.final_terms) else {
            continue;
        };
        let g = groups.entry((r.kind, r.true_tc.round() as i64)).or_default();
        g.0.push(share);
        g.1.push((r.final_estimate - r.true_tc).abs());
    }
    groups
        .into_iter()
        .map(|((kind, level), (share, err))| {
            let n = share.len() as f64;
            BiasCorrelationRow {
                kind,
                level,
                n: share.len(),
                spearman: spearman(&share, &err).ok(),
                pearson: pearson(&share, &err).ok(),
                mean_abs_error: err.iter().sum::<f64>() / n,
                mean_third_share: share.iter().sum::<f64>() / n,
            }
        })
        .collect()
}

/// Mean of a coefficient over the rows of `kind` whose level lies in `levels`.
pub fn mean_coefficient(
    rows: &[BiasCorrelationRow],
    kind: EstimatorKind,
    levels: std::ops::RangeInclusive<i64>,
    pick: fn(&BiasCorrelationRow) -> Option<f64>,
) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.kind == kind && levels.contains(&r.level))
        .filter_map(pick)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Generates TREE runs at every level and correlates third-term share with error.
pub fn bias_correlation_experiment(
    kinds: &[EstimatorKind],
    tc_levels: &[f64],
    specs_per_level: usize,
    settings: &SweepSettings,
    seed: u64,
    jobs: usize,
) -> Result<(Vec<SweepRun>, Vec<BiasCorrelationRow>)> {
    let matrices = generate_matrices(4, tc_levels, specs_per_level, seed)?;
    let runs = sweep(&matrices, kinds, settings, seed, jobs)?;
    let rows = bias_correlation_from_runs(&runs);
    Ok((runs, rows))
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Held-out error of a single-head corrector and of its raw estimator at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// `None` marks the aggregate over all levels.
    pub level: Option<i64>,
    pub kind: EstimatorKind,
    pub corrector_mae: f64,
    /// Spread of the corrector MAE across training repetitions.
    pub corrector_mae_sd: f64,
    pub estimator_mae: f64,
    pub n: usize,
}

/// Repeated train/test protocol for single-head correctors.
///
/// Each repetition draws a fresh split and a fresh corrector seed; per-level MAEs are
/// averaged over repetitions.
pub fn accuracy_experiment(
    records: &[SequenceRecord],
    kinds: &[EstimatorKind],
    split: SplitKind,
    repetitions: usize,
    base: &CorrectorConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<AccuracyRow>> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("need at least one repetition".into()));
    }
    let tasks: Vec<(usize, EstimatorKind)> = (0..repetitions).flat_map(|r| kinds.iter().map(move |&k| (r, k))).collect();
    type Tables = (Vec<crate::corrector::LevelMetrics>, Vec<crate::corrector::LevelMetrics>);
    let results: Vec<Result<Tables>> = with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(rep, kind)| {
                let rep_seed = seed::derive(seed, seed::stream::REPETITION, rep as u64);
                let sp = split_dataset(records, split, rep_seed)?;
                let train: Vec<_> = sp.train.iter().filter(|r| r.estimator == kind).cloned().collect();
                let test: Vec<_> = sp.test.iter().filter(|r| r.estimator == kind).cloned().collect();
                let cfg = CorrectorConfig {
                    heads: vec![kind],
                    seed: seed::derive(rep_seed, seed::stream::CORRECTOR, kind.index() as u64),
                    ..base.clone()
                };
                let (model, _) = train_corrector(&train, &cfg, None)?;
                Ok((model.evaluate(&test)?, estimator_metrics(&test, kind)))
            })
            .collect()
    })?;
    // (kind, level) -> per-repetition corrector MAEs, raw MAEs, and matrix count
    type Acc = (Vec<f64>, Vec<f64>, usize);
    let mut acc: BTreeMap<(EstimatorKind, Option<i64>), Acc> = BTreeMap::new();
    for ((_, kind), res) in tasks.iter().zip(results) {
        let (corr, est) = res?;
        for (c, e) in corr.iter().zip(&est) {
            let slot = acc.entry((*kind, c.level)).or_default();
            slot.0.push(c.mae);
            slot.1.push(e.mae);
            slot.2 += c.n;
        }
    }
    let mut rows: Vec<AccuracyRow> = acc
        .into_iter()
        .map(|((kind, level), (c, e, n))| {
            let k = c.len() as f64;
            let mean = c.iter().sum::<f64>() / k;
            AccuracyRow {
                level,
                kind,
                corrector_mae: mean,
                corrector_mae_sd: (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt(),
                estimator_mae: e.iter().sum::<f64>() / e.len() as f64,
                n: n / c.len(),
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.level.is_none(), r.level, r.kind));
    Ok(rows)
}

/// Pooled comparison over a level range: mean absolute errors of corrector and raw
/// estimator over all held-out matrices at those levels.
pub fn pooled_mae(rows: &[AccuracyRow], kind: EstimatorKind, levels: std::ops::RangeInclusive<i64>) -> Option<(f64, f64)> {
    let sel: Vec<&AccuracyRow> = rows
        .iter()
        .filter(|r| r.kind == kind && r.level.is_some_and(|l| levels.contains(&l)))
        .collect();
    let n: usize = sel.iter().map(|r| r.n).sum();
    if n == 0 {
        return None;
    }
    let w = |f: fn(&AccuracyRow) -> f64| sel.iter().map(|r| f(r) * r.n as f64).sum::<f64>() / n as f64;
    Some((w(|r| r.corrector_mae), w(|r| r.estimator_mae)))
}

/// Spread of repeated estimation on one level, for the raw estimator and the corrector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub level: i64,
    pub kind: EstimatorKind,
    /// Mean over matrices of the across-rerun variance of the final estimate.
    pub estimator_variance: f64,
    /// Mean over matrices of the across-rerun variance of the corrected estimate.
    pub corrector_rerun_variance: Option<f64>,
    /// Variance of repeated corrector calls on identical input.
    pub corrector_repeat_variance: Option<f64>,
    pub estimator_mae: f64,
    pub corrector_mae: Option<f64>,
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

fn mean_abs_error(v: &[f64], truth: f64) -> f64 {
    v.iter().map(|x| (x - truth).abs()).sum::<f64>() / v.len() as f64
}

/// Raw and corrected final estimates of one matrix across reruns.
#[derive(Default)]
struct RerunCell {
    truth: f64,
    raw: Vec<f64>,
    corrected: Vec<f64>,
    repeat_variance: Option<f64>,
}

/// Reruns each estimator `repetitions` times per matrix with independent seeds.
///
/// Single-head `models`, keyed by kind, are applied to every rerun's sequence.
#[allow(clippy::too_many_arguments)]
pub fn bias_variance_experiment(
    kinds: &[EstimatorKind],
    tc_levels: &[f64],
    specs_per_level: usize,
    repetitions: usize,
    settings: &SweepSettings,
    models: &BTreeMap<EstimatorKind, CorrectorModel>,
    seed: u64,
    jobs: usize,
) -> Result<Vec<VarianceRow>> {
    if repetitions < 2 {
        return Err(Error::InvalidArgument("variance needs at least two repetitions".into()));
    }
    let matrices = generate_matrices(4, tc_levels, specs_per_level, seed)?;
    let mut reps = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let rep_seed = seed::derive(seed, seed::stream::REPETITION, r as u64);
        reps.push(sweep(&matrices, kinds, settings, rep_seed, jobs)?);
    }
    let mut cells: BTreeMap<(EstimatorKind, i64), BTreeMap<String, RerunCell>> = BTreeMap::new();
    for runs in &reps {
        for run in runs.iter().filter(|r| r.is_ok()) {
            let cell = cells.entry((run.kind, run.true_tc.round() as i64)).or_default();
            let entry = cell.entry(run.matrix_id.clone()).or_insert_with(|| RerunCell { truth: run.true_tc, ..Default::default() });
            entry.raw.push(run.final_estimate);
            if let Some(model) = models.get(&run.kind) {
                let p = model.predict(std::slice::from_ref(&run.sequence))?;
                entry.corrected.push(p);
                if entry.repeat_variance.is_none() {
                    let repeated: Vec<f64> = (0..10)
                        .map(|_| model.predict(std::slice::from_ref(&run.sequence)))
                        .collect::<Result<_>>()?;
                    entry.repeat_variance = Some(variance(&repeated));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for ((kind, level), per_matrix) in cells {
        let usable: Vec<_> = per_matrix.values().filter(|e| e.raw.len() >= 2).collect();
        if usable.is_empty() {
            continue;
        }
        let k = usable.len() as f64;
        let mean_of = |f: &dyn Fn(&RerunCell) -> f64| usable.iter().map(|e| f(e)).sum::<f64>() / k;
        let has_model = models.contains_key(&kind);
        rows.push(VarianceRow {
            level,
            kind,
            estimator_variance: mean_of(&|e| variance(&e.raw)),
            corrector_rerun_variance: has_model.then(|| mean_of(&|e| variance(&e.corrected))),
            corrector_repeat_variance: has_model.then(|| mean_of(&|e| e.repeat_variance.unwrap_or(0.0))),
            estimator_mae: mean_of(&|e| mean_abs_error(&e.raw, e.truth)),
            corrector_mae: has_model.then(|| mean_of(&|e| mean_abs_error(&e.corrected, e.truth))),
        });
    }
    rows.sort_by_key(|r| (r.level, r.kind));
    Ok(rows)
}

/// Extrapolation check: train on low levels, score on the held-back high levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub loss: LossKind,
    pub kind: EstimatorKind,
    pub level: Option<i64>,
    pub corrector_mae: f64,
    pub estimator_mae: f64,
    pub n: usize,
}

pub fn robustness_experiment(
    records: &[SequenceRecord],
    kinds: &[EstimatorKind],
    losses: &[LossKind],
    base: &CorrectorConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<RobustnessRow>> {
    let sp = split_dataset(records, SplitKind::TcMask610, seed)?;
    if sp.test.is_empty() {
        return Err(Error::InvalidArgument("masked split has no test records".into()));
    }
    let tasks: Vec<(LossKind, EstimatorKind)> = losses.iter().flat_map(|&l| kinds.iter().map(move |&k| (l, k))).collect();
    let results: Vec<Result<Vec<RobustnessRow>>> = with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(loss, kind)| {
                let train: Vec<_> = sp.train.iter().filter(|r| r.estimator == kind).cloned().collect();
                let test: Vec<_> = sp.test.iter().filter(|r| r.estimator == kind).cloned().collect();
                let cfg = CorrectorConfig {
                    heads: vec![kind],
                    loss,
                    seed: seed::derive(seed, seed::stream::CORRECTOR, kind.index() as u64),
                    ..base.clone()
                };
                let (model, _) = train_corrector(&train, &cfg, None)?;
                let corr = model.evaluate(&test)?;
                let est = estimator_metrics(&test, kind);
                Ok(corr
                    .iter()
                    .zip(&est)
                    .map(|(c, e)| RobustnessRow {
                        loss,
                        kind,
                        level: c.level,
                        corrector_mae: c.mae,
                        estimator_mae: e.mae,
                        n: c.n,
                    })
                    .collect())
            })
            .collect()
    })?;
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Test-error curve of one head combination under one fine-tune loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadCurve {
    pub heads: Vec<EstimatorKind>,
    pub loss: LossKind,
    pub test_mse: Vec<f64>,
    pub test_mae: Vec<f64>,
}

impl HeadCurve {
    pub fn label(&self) -> String {
        self.heads.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }

    /// Test error under the curve's own loss at the last epoch.
    pub fn final_error(&self) -> f64 {
        let v = match self.loss {
            LossKind::Mse => &self.test_mse,
            LossKind::L1 => &self.test_mae,
        };
        v.last().copied().unwrap_or(f64::NAN)
    }
}

/// Every single head and every pair of heads from `kinds`.
pub fn head_sets(kinds: &[EstimatorKind]) -> Vec<Vec<EstimatorKind>> {
    let mut sets: Vec<Vec<EstimatorKind>> = kinds.iter().map(|&k| vec![k]).collect();
    for (i, &a) in kinds.iter().enumerate() {
        for &b in &kinds[i + 1..] {
            sets.push(vec![a, b]);
        }
    }
    sets
}

/// Trains one corrector per head set on a single split and records test curves.
pub fn head_comparison_experiment(
    records: &[SequenceRecord],
    sets: &[Vec<EstimatorKind>],
    losses: &[LossKind],
    split: SplitKind,
    base: &CorrectorConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<HeadCurve>> {
    let sp = split_dataset(records, split, seed)?;
    let tasks: Vec<(&Vec<EstimatorKind>, LossKind)> = sets.iter().flat_map(|s| losses.iter().map(move |&l| (s, l))).collect();
    let out: Vec<Result<HeadCurve>> = with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(heads, loss)| {
                let cfg = CorrectorConfig {
                    heads: heads.clone(),
                    loss,
                    seed: seed::derive(seed, seed::stream::CORRECTOR, 0),
                    ..base.clone()
                };
                let (_, hist) = train_corrector(&sp.train, &cfg, Some(&sp.test))?;
                Ok(HeadCurve {
                    heads: heads.clone(),
                    loss,
                    test_mse: hist.finetune.iter().filter_map(|e| e.test_mse).collect(),
                    test_mae: hist.finetune.iter().filter_map(|e| e.test_mae).collect(),
                })
            })
            .collect()
    })?;
    out.into_iter().collect()
}

/// Plot-ready CSV table with a `# seed=<s> scale=<desk|full>` comment line.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn fmt_level(level: Option<i64>) -> String {
    level.map_or_else(|| "all".to_string(), |l| l.to_string())
}

impl Report {
    pub fn new(header: &[&str]) -> Self {
        Report {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, mut w: W, seed: u64, scale: Scale) -> Result<()> {
        writeln!(w, "# seed={seed} scale={scale}")?;
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(&self.header)?;
        for r in &self.rows {
            out.write_record(r)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Wide `level,<kind>...` table of one correlation coefficient.
    pub fn bias_correlation(rows: &[BiasCorrelationRow], kinds: &[EstimatorKind], pick: fn(&BiasCorrelationRow) -> Option<f64>) -> Self {
        let mut header = vec!["level".to_string()];
        header.extend(kinds.iter().map(|k| k.name().to_string()));
        let mut levels: Vec<i64> = rows.iter().map(|r| r.level).collect();
        levels.sort_unstable();
        levels.dedup();
        let mut report = Report { header, rows: Vec::new() };
        for level in levels {
            let mut row = vec![level.to_string()];
            for &k in kinds {
                row.push(fmt_opt(rows.iter().find(|r| r.kind == k && r.level == level).and_then(pick)));
            }
            report.push(row);
        }
        report
    }

    pub fn bias_detail(rows: &[BiasCorrelationRow]) -> Self {
        let mut r = Report::new(&["level", "estimator", "n", "spearman", "pearson", "mean_abs_error", "mean_third_share"]);
        for x in rows {
            r.push(vec![
                x.level.to_string(),
                x.kind.to_string(),
                x.n.to_string(),
                fmt_opt(x.spearman),
                fmt_opt(x.pearson),
                x.mean_abs_error.to_string(),
                x.mean_third_share.to_string(),
            ]);
        }
        r
    }

    pub fn accuracy(rows: &[AccuracyRow]) -> Self {
        let mut r = Report::new(&["level", "estimator", "n", "corrector_mae", "corrector_mae_sd", "estimator_mae"]);
        for x in rows {
            r.push(vec![
                fmt_level(x.level),
                x.kind.to_string(),
                x.n.to_string(),
                x.corrector_mae.to_string(),
                x.corrector_mae_sd.to_string(),
                x.estimator_mae.to_string(),
            ]);
        }
        r
    }

    pub fn variance(rows: &[VarianceRow]) -> Self {
        let mut r = Report::new(&[
            "level",
            "estimator",
            "estimator_variance",
            "corrector_rerun_variance",
            "corrector_repeat_variance",
            "estimator_mae",
            "corrector_mae",
        ]);
        for x in rows {
            r.push(vec![
                x.level.to_string(),
                x.kind.to_string(),
                x.estimator_variance.to_string(),
                fmt_opt(x.corrector_rerun_variance),
                fmt_opt(x.corrector_repeat_variance),
                x.estimator_mae.to_string(),
                fmt_opt(x.corrector_mae),
            ]);
        }
        r
    }

    pub fn robustness(rows: &[RobustnessRow]) -> Self {
        let mut r = Report::new(&["level", "loss", "estimator", "n", "corrector_mae", "estimator_mae"]);
        for x in rows {
            r.push(vec![
                fmt_level(x.level),
                x.loss.to_string(),
                x.kind.to_string(),
                x.n.to_string(),
                x.corrector_mae.to_string(),
                x.estimator_mae.to_string(),
            ]);
        }
        r
    }

    /// Long-format `epoch,heads,loss,test_mse,test_mae` curves.
    pub fn head_curves(curves: &[HeadCurve]) -> Self {
        let mut r = Report::new(&["epoch", "heads", "loss", "test_mse", "test_mae"]);
        for c in curves {
            for (e, (mse, mae)) in c.test_mse.iter().zip(&c.test_mae).enumerate() {
                r.push(vec![e.to_string(), c.label(), c.loss.to_string(), mse.to_string(), mae.to_string()]);
            }
        }
        r
    }
}

/// Per-level (truth, prediction) metrics of the raw estimator over sweep runs.
pub fn sweep_metrics(runs: &[SweepRun], kind: EstimatorKind) -> Vec<crate::corrector::LevelMetrics> {
    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .filter(|r| r.kind == kind && r.is_ok())
        .map(|r| (r.true_tc, r.final_estimate))
        .collect();
    metrics_by_level(&pairs)
}
