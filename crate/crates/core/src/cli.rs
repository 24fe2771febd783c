//! Command-line driver: argument types, config echo and replay, and subcommand bodies.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    accuracy_experiment, bias_correlation_from_runs, bias_variance_experiment, head_comparison_experiment, head_sets,
    mean_coefficient, robustness_experiment, Report, Scale,
};
use crate::corrector::{estimator_metrics, train_corrector, CorrectorConfig, CorrectorModel, LossKind};
use crate::dataset::{
    dataset_from_matrices, read_records, split_dataset, window_means, write_records, SequenceRecord, SplitKind, SweepRun,
    SweepSettings, SEQ_LEN,
};
use crate::decomp::{build_plan, estimate_tc, PathKind, PoolSource};
use crate::error::{Error, Result};
use crate::gaussian::{generate_matrices, MatrixEntry};
use crate::mi::{parse_kinds, EstimatorConfig, EstimatorKind};
use crate::seed;

pub const OUT_ENV: &str = "TC_LAB_OUT";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "tclab", version, about = "Total-correlation estimation with MI bounds and a learned corrector")]
pub struct Cli {
    /// Replay a run from its emitted config.json.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 uses every core); results do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (default: $TC_LAB_OUT or ./tclab-out).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_scale)]
    pub scale: Option<Scale>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

fn parse_scale(s: &str) -> std::result::Result<Scale, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand")]
pub enum Command {
    /// Generate covariance matrices at target TC levels.
    GenMatrices(GenMatricesArgs),
    /// Run estimators on every matrix and write 30-point estimate sequences.
    GenDataset(GenDatasetArgs),
    /// Pretrain and fine-tune a corrector on a dataset split.
    TrainCorrector(TrainArgs),
    /// Corrected TC for precomputed sequences or raw samples.
    Predict(PredictArgs),
    /// Run an experiment suite and write CSV reports.
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "experiment")]
pub enum Experiment {
    /// Third-term share versus absolute error, per level.
    BiasCorrelation(BiasCorrelationArgs),
    /// Repeated corrector training plus estimator rerun variance.
    BiasVariance(BiasVarianceArgs),
    /// Train on levels 1-5, score on 6-10, under both fine-tune losses.
    Robustness(RobustnessArgs),
    /// Test-error curves of single- and two-head correctors.
    Heads(HeadsArgs),
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct LevelArgs {
    #[arg(long, default_value_t = 4)]
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// TC levels in nats: `a..b` (inclusive integer steps) or a comma list.
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub per_level: Option<usize>,
}

fn default_dim() -> usize {
    4
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct EstimationArgs {
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long)]
    pub path: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated hidden widths of the lower-bound critics.
    #[arg(long)]
    pub critic_hidden: Option<String>,
    /// Comma-separated hidden widths of the CLUB conditionals.
    #[arg(long)]
    pub club_hidden: Option<String>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorrectorArgs {
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub corrector_batch: Option<usize>,
    #[arg(long)]
    pub corrector_lr: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenMatricesArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenDatasetArgs {
    /// Matrices JSON (default: generate at the scale preset).
    #[arg(long)]
    pub matrices: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
    /// Largest tolerated share of diverged runs before exiting with status 3.
    #[arg(long)]
    pub max_diverged: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub corrector: CorrectorArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset-format CSV with one sequence per head.
    #[arg(long, conflicts_with = "samples")]
    pub sequences: Option<PathBuf>,
    /// Raw samples CSV (header row, one column per variable); estimation runs first.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Restrict a sequence file to one matrix.
    #[arg(long)]
    pub matrix_id: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct BiasCorrelationArgs {
    /// Reuse runs.json from gen-dataset instead of sweeping again.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct BiasVarianceArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Generate the dataset when `--dataset` is absent or missing.
    #[arg(long)]
    #[serde(default)]
    pub build_missing: bool,
    /// Independent corrector trainings.
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Estimator reruns per matrix for the variance table.
    #[arg(long)]
    pub reruns: Option<usize>,
    /// Matrices per level for the variance table.
    #[arg(long)]
    pub variance_per_level: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub corrector: CorrectorArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(default)]
    pub build_missing: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub corrector: CorrectorArgs,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct HeadsArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(default)]
    pub build_missing: bool,
    #[arg(long)]
    pub split: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub levels: LevelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub corrector: CorrectorArgs,
}

/// Effective configuration of a run, echoed as config.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scale: Scale,
    pub out_dir: PathBuf,
    pub command: Command,
}

/// Failure with the process exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        let code = if matches!(error, Error::Diverged { .. }) { 3 } else { 2 };
        CliError { code, error }
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("tclab-out"))
}

/// Parses `a..b` (inclusive, unit steps) or a comma list.
pub fn parse_levels(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("invalid levels '{s}'"));
    let levels: Vec<f64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (i64, i64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).map(|l| l as f64).collect()
    } else {
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if levels.is_empty() || levels.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(bad());
    }
    Ok(levels)
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Ok(w),
            _ => Err(Error::InvalidArgument(format!("invalid layer widths '{s}'"))),
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl LevelArgs {
    fn resolve(&mut self, scale: Scale) {
        self.levels.get_or_insert_with(|| "1..10".into());
        self.per_level.get_or_insert(scale.specs_per_level());
    }

    fn values(&self) -> Result<Vec<f64>> {
        parse_levels(self.levels.as_deref().unwrap_or("1..10"))
    }
}

impl EstimationArgs {
    fn resolve(&mut self, scale: Scale) {
        let d = EstimatorConfig::default();
        self.kinds.get_or_insert_with(|| join(&EstimatorKind::ALL.map(|k| k.name())));
        self.path.get_or_insert_with(|| PathKind::Tree.to_string());
        self.iters.get_or_insert(scale.iters());
        self.batch.get_or_insert(d.batch);
        self.lr.get_or_insert(d.lr);
        self.critic_hidden.get_or_insert_with(|| join(&d.critic_hidden));
        self.club_hidden.get_or_insert_with(|| join(&d.club_hidden));
    }

    fn kinds(&self) -> Result<Vec<EstimatorKind>> {
        parse_kinds(self.kinds.as_deref().unwrap_or("mine,nwj,infonce,club"))
    }

    fn settings(&self) -> Result<SweepSettings> {
        let d = EstimatorConfig::default();
        let settings = SweepSettings {
            path: self.path.as_deref().unwrap_or("TREE").parse()?,
            iters: self.iters.unwrap_or(3000),
            estimator: EstimatorConfig {
                critic_hidden: self.critic_hidden.as_deref().map(parse_widths).transpose()?.unwrap_or(d.critic_hidden),
                club_hidden: self.club_hidden.as_deref().map(parse_widths).transpose()?.unwrap_or(d.club_hidden),
                lr: self.lr.unwrap_or(d.lr),
                batch: self.batch.unwrap_or(d.batch),
                ema_rate: d.ema_rate,
            },
        };
        settings.validate()?;
        Ok(settings)
    }
}

impl CorrectorArgs {
    fn resolve(&mut self) {
        let d = CorrectorConfig::default();
        self.loss.get_or_insert_with(|| d.loss.to_string());
        self.pretrain_epochs.get_or_insert(d.pretrain_epochs);
        self.finetune_epochs.get_or_insert(d.finetune_epochs);
        self.corrector_batch.get_or_insert(d.batch);
        self.corrector_lr.get_or_insert(d.lr);
    }

    fn config(&self, heads: Vec<EstimatorKind>, seed: u64) -> Result<CorrectorConfig> {
        let d = CorrectorConfig::default();
        Ok(CorrectorConfig {
            heads,
            loss: self.loss.as_deref().map(str::parse).transpose()?.unwrap_or(d.loss),
            pretrain_epochs: self.pretrain_epochs.unwrap_or(d.pretrain_epochs),
            finetune_epochs: self.finetune_epochs.unwrap_or(d.finetune_epochs),
            batch: self.corrector_batch.unwrap_or(d.batch),
            lr: self.corrector_lr.unwrap_or(d.lr),
            seed,
            ..d
        })
    }
}

impl Command {
    /// Fills every defaulted option so the echoed config is self-contained.
    fn resolve(&mut self, scale: Scale) {
        match self {
            Command::GenMatrices(a) => a.levels.resolve(scale),
            Command::GenDataset(a) => {
                a.levels.resolve(scale);
                a.estimation.resolve(scale);
                a.max_diverged.get_or_insert(0.1);
            }
            Command::TrainCorrector(a) => {
                a.heads.get_or_insert_with(|| "mine".into());
                a.split.get_or_insert_with(|| "RATIO_37".into());
                a.corrector.resolve();
            }
            Command::Predict(a) => a.estimation.resolve(scale),
            Command::Experiment(Experiment::BiasCorrelation(a)) => {
                a.levels.resolve(scale);
                a.estimation.resolve(scale);
            }
            Command::Experiment(Experiment::BiasVariance(a)) => {
                a.levels.resolve(scale);
                a.estimation.resolve(scale);
                a.corrector.resolve();
                a.repetitions.get_or_insert(30);
                a.reruns.get_or_insert(10);
                a.variance_per_level.get_or_insert(5);
            }
            Command::Experiment(Experiment::Robustness(a)) => {
                a.levels.resolve(scale);
                a.estimation.resolve(scale);
                a.corrector.resolve();
            }
            Command::Experiment(Experiment::Heads(a)) => {
                a.levels.resolve(scale);
                a.estimation.resolve(scale);
                a.corrector.resolve();
                a.split.get_or_insert_with(|| "RATIO_37".into());
            }
        }
    }
}

impl RunConfig {
    /// Effective configuration from parsed arguments or a replayed config file.
    pub fn from_cli(cli: Cli) -> Result<Self> {
        let mut config = match (&cli.config, cli.command) {
            (Some(path), None) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let mut cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
                if cli.seed.is_some() || cli.scale.is_some() {
                    return Err(Error::Config("--seed and --scale come from the replayed config".into()));
                }
                if let Some(out) = cli.out_dir {
                    cfg.out_dir = out;
                }
                cfg
            }
            (Some(_), Some(_)) => return Err(Error::Config("--config replaces the subcommand; give one or the other".into())),
            (None, None) => return Err(Error::Config("a subcommand or --config is required".into())),
            (None, Some(command)) => RunConfig {
                seed: cli.seed.unwrap_or(0),
                scale: cli.scale.unwrap_or(Scale::Desk),
                out_dir: cli.out_dir.unwrap_or_else(default_out_dir),
                command,
            },
        };
        config.command.resolve(config.scale);
        Ok(config)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))?))
    }

    fn report(&self, name: &str, report: &Report) -> Result<()> {
        let mut w = self.create(name)?;
        report.write(&mut w, self.seed, self.scale)?;
        w.flush()?;
        Ok(())
    }
}

/// Runs a parsed command line; returns the text printed on standard output.
pub fn run(cli: Cli) -> std::result::Result<String, CliError> {
    let jobs = cli.jobs.unwrap_or(0);
    let config = RunConfig::from_cli(cli)?;
    execute(&config, jobs)
}

pub fn execute(config: &RunConfig, jobs: usize) -> std::result::Result<String, CliError> {
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", config.out_dir.display())))?;
    let mut echo = config.create(CONFIG_FILE)?;
    echo.write_all(serde_json::to_string_pretty(config).map_err(Error::from)?.as_bytes()).map_err(Error::from)?;
    echo.write_all(b"\n").map_err(Error::from)?;
    echo.flush().map_err(Error::from)?;
    match &config.command {
        Command::GenMatrices(a) => gen_matrices(config, a),
        Command::GenDataset(a) => gen_dataset(config, a, jobs),
        Command::TrainCorrector(a) => Ok(train(config, a)?),
        Command::Predict(a) => Ok(predict(config, a)?),
        Command::Experiment(Experiment::BiasCorrelation(a)) => Ok(bias_correlation(config, a, jobs)?),
        Command::Experiment(Experiment::BiasVariance(a)) => Ok(bias_variance(config, a, jobs)?),
        Command::Experiment(Experiment::Robustness(a)) => Ok(robustness(config, a, jobs)?),
        Command::Experiment(Experiment::Heads(a)) => Ok(heads(config, a, jobs)?),
    }
}

fn read_matrices(path: &Path) -> Result<Vec<MatrixEntry>> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open matrices {}: {e}", path.display())))?;
    let entries: Vec<MatrixEntry> = serde_json::from_reader(BufReader::new(f))?;
    for e in &entries {
        e.spec.validate()?;
    }
    Ok(entries)
}

fn write_json<T: Serialize>(config: &RunConfig, name: &str, value: &T) -> Result<()> {
    let mut w = config.create(name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn matrices_for(config: &RunConfig, levels: &LevelArgs) -> Result<Vec<MatrixEntry>> {
    generate_matrices(levels.dim, &levels.values()?, levels.per_level.unwrap_or(20), config.seed)
}

fn gen_matrices(config: &RunConfig, a: &GenMatricesArgs) -> std::result::Result<String, CliError> {
    let matrices = matrices_for(config, &a.levels)?;
    write_json(config, "matrices.json", &matrices)?;
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    for m in &matrices {
        *hist.entry(m.spec.true_tc.round() as i64).or_default() += 1;
    }
    let parts: Vec<String> = hist.iter().map(|(l, n)| format!("{l}:{n}")).collect();
    Ok(format!("{} matrices (level:count {})\n", matrices.len(), parts.join(" ")))
}

fn build_dataset(
    config: &RunConfig,
    matrices: Vec<MatrixEntry>,
    est: &EstimationArgs,
    jobs: usize,
) -> Result<(Vec<SweepRun>, Vec<SequenceRecord>)> {
    let settings = est.settings()?;
    if matrices.iter().any(|m| m.spec.dim != matrices[0].spec.dim) {
        return Err(Error::Config("matrices differ in dimension".into()));
    }
    log::info!(
        "running {} estimator(s) on {} matrices, {} iterations each",
        est.kinds()?.len(),
        matrices.len(),
        settings.iters
    );
    let build = dataset_from_matrices(matrices, &est.kinds()?, &settings, config.seed, jobs)?;
    log::info!("{} records, {} diverged runs dropped", build.records.len(), build.dropped());
    Ok((build.runs, build.records))
}

fn gen_dataset(config: &RunConfig, a: &GenDatasetArgs, jobs: usize) -> std::result::Result<String, CliError> {
    let matrices = match &a.matrices {
        Some(p) => read_matrices(p)?,
        None => matrices_for(config, &a.levels)?,
    };
    let total = matrices.len() * a.estimation.kinds()?.len();
    let (runs, records) = build_dataset(config, matrices, &a.estimation, jobs)?;
    write_records(&records, config.create("dataset.csv")?)?;
    write_json(config, "runs.json", &runs)?;
    let dropped = total - records.len();
    check_divergence(dropped, total, a.max_diverged.unwrap_or(0.1))?;
    Ok(format!("{} records ({dropped} diverged runs dropped)\n", records.len()))
}

fn check_divergence(dropped: usize, total: usize, limit: f64) -> Result<()> {
    if total > 0 && dropped as f64 / total as f64 > limit {
        return Err(Error::Diverged {
            iteration: 0,
            detail: format!("{dropped} of {total} runs diverged, above the {limit} threshold"),
        });
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Vec<SequenceRecord>> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open dataset {}: {e}", path.display())))?;
    read_records(BufReader::new(f))
}

fn require_heads(records: &[SequenceRecord], heads: &[EstimatorKind]) -> Result<()> {
    for h in heads {
        if !records.iter().any(|r| r.estimator == *h) {
            return Err(Error::Config(format!("head '{h}' has no records in the dataset")));
        }
    }
    Ok(())
}

/// Sample dimension recorded in the config.json written next to a generated dataset.
fn dataset_dim(dataset: &Path) -> Option<usize> {
    let text = fs::read_to_string(dataset.parent()?.join(CONFIG_FILE)).ok()?;
    let cfg: RunConfig = serde_json::from_str(&text).ok()?;
    match cfg.command {
        Command::GenDataset(a) if a.matrices.is_none() => Some(a.levels.dim),
        Command::GenDataset(a) => read_matrices(a.matrices.as_deref()?).ok()?.first().map(|m| m.spec.dim),
        _ => None,
    }
}

fn train(config: &RunConfig, a: &TrainArgs) -> Result<String> {
    let records = load_dataset(&a.dataset)?;
    let heads = parse_kinds(a.heads.as_deref().unwrap_or("mine"))?;
    require_heads(&records, &heads)?;
    let split: SplitKind = a.split.as_deref().unwrap_or("RATIO_37").parse()?;
    let sp = split_dataset(&records, split, config.seed)?;
    let cfg = a.corrector.config(heads, seed::derive(config.seed, seed::stream::CORRECTOR, 0))?;
    let (mut model, history) = train_corrector(&sp.train, &cfg, Some(&sp.test))?;
    model.training_meta.sample_dim = dataset_dim(&a.dataset);
    fs::write(config.path("model.json"), model.to_json()? + "\n")?;
    let mut w = config.create("metrics.csv")?;
    let mut header = String::from("stage,epoch,train_total,train_corr");
    for k in model.head_kinds() {
        header.push_str(&format!(",recon_{k}"));
    }
    header.push_str(",test_mae,test_mse\n");
    w.write_all(header.as_bytes())?;
    for (h, curve) in history.pretrain.iter().enumerate() {
        for (e, v) in curve.iter().enumerate() {
            let mut recon = vec![String::new(); model.heads.len()];
            recon[h] = v.to_string();
            writeln!(w, "pretrain,{e},,,{},,", recon.join(","))?;
        }
    }
    for e in &history.finetune {
        let recon: Vec<String> = e.recon.iter().map(f64::to_string).collect();
        writeln!(
            w,
            "finetune,{},{},{},{},{},{}",
            e.epoch,
            e.total,
            e.corr,
            recon.join(","),
            crate::analysis::fmt_opt(e.test_mae),
            crate::analysis::fmt_opt(e.test_mse)
        )?;
    }
    w.flush()?;
    let test = model.evaluate(&sp.test).ok();
    let agg = test.as_ref().and_then(|t| t.last().cloned());
    Ok(match agg {
        Some(m) => format!(
            "trained {} corrector on {} matrices; test MAE {} MSE {} over {} matrices\n",
            join(&model.head_kinds()),
            model.training_meta.train_examples,
            m.mae,
            m.mse,
            m.n
        ),
        None => format!("trained {} corrector on {} matrices\n", join(&model.head_kinds()), model.training_meta.train_examples),
    })
}

fn read_samples(path: &Path) -> Result<ndarray::Array2<f64>> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open samples {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(f));
    let mut flat = Vec::new();
    let mut cols = None;
    for row in rdr.records() {
        let row = row?;
        let vals = row
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("non-numeric sample '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::InvalidArgument("ragged sample rows".into()));
        }
        flat.extend(vals);
    }
    let cols = cols.ok_or_else(|| Error::InvalidArgument("sample file is empty".into()))?;
    Ok(ndarray::Array2::from_shape_vec((flat.len() / cols, cols), flat).expect("rectangular"))
}

#[derive(Serialize)]
struct Prediction {
    matrix_id: Option<String>,
    prediction: f64,
    raw_estimates: BTreeMap<EstimatorKind, f64>,
}

fn predict(config: &RunConfig, a: &PredictArgs) -> Result<String> {
    let text = fs::read_to_string(&a.model).map_err(|e| Error::Config(format!("cannot open model {}: {e}", a.model.display())))?;
    let model = CorrectorModel::from_json(&text)?;
    let kinds = model.head_kinds();
    let mut out = Vec::new();
    if let Some(path) = &a.sequences {
        let records = load_dataset(path)?;
        let mut groups: BTreeMap<&str, BTreeMap<EstimatorKind, &SequenceRecord>> = crate::dataset::group_by_matrix(&records);
        if let Some(id) = &a.matrix_id {
            groups.retain(|k, _| k == id);
        }
        for (id, by_kind) in groups {
            let Some(recs) = kinds.iter().map(|k| by_kind.get(k).copied()).collect::<Option<Vec<_>>>() else {
                continue;
            };
            let seqs: Vec<Vec<f64>> = recs.iter().map(|r| r.sequence.clone()).collect();
            out.push(Prediction {
                matrix_id: Some(id.to_string()),
                prediction: model.predict(&seqs)?,
                raw_estimates: recs.iter().map(|r| (r.estimator, r.raw_estimate())).collect(),
            });
        }
        out.sort_by_key(|p| p.matrix_id.as_deref().and_then(crate::gaussian::matrix_index));
        if out.is_empty() {
            return Err(Error::Config(format!("no matrix in {} has sequences for every model head", path.display())));
        }
    } else if let Some(path) = &a.samples {
        let data = read_samples(path)?;
        if let Some(expected) = model.training_meta.sample_dim {
            if data.ncols() != expected {
                return Err(Error::Config(format!("samples have {} columns, model expects dim {expected}", data.ncols())));
            }
        }
        let settings = a.estimation.settings()?;
        let plan = build_plan(settings.path, data.ncols())?;
        let mut seqs = Vec::new();
        let mut raw = BTreeMap::new();
        for &kind in &kinds {
            let run_seed = seed::derive(config.seed, seed::stream::RUN, kind.index() as u64);
            let mut src = PoolSource::new(data.clone(), seed::derive(run_seed, seed::stream::SAMPLING, 0))?;
            let run = estimate_tc(&mut src, &plan, kind, &settings.estimator, settings.iters, run_seed)?;
            if !run.is_ok() {
                return Err(Error::Diverged {
                    iteration: run.trace.len(),
                    detail: format!("{kind} estimation diverged"),
                });
            }
            let seq = window_means(&run.trace.totals, SEQ_LEN)?;
            raw.insert(kind, seq[SEQ_LEN - 3..].iter().sum::<f64>() / 3.0);
            seqs.push(seq);
        }
        out.push(Prediction {
            matrix_id: None,
            prediction: model.predict(&seqs)?,
            raw_estimates: raw,
        });
    } else {
        return Err(Error::Config("predict needs --sequences or --samples".into()));
    }
    write_json(config, "prediction.json", &out)?;
    Ok(if out.len() == 1 {
        format!("{}\n", out[0].prediction)
    } else {
        out.iter().map(|p| format!("{},{}\n", p.matrix_id.as_deref().unwrap_or(""), p.prediction)).collect()
    })
}

fn summary(config: &RunConfig, text: &str) -> Result<String> {
    fs::write(config.path("summary.txt"), text)?;
    Ok(text.to_string())
}

fn bias_correlation(config: &RunConfig, a: &BiasCorrelationArgs, jobs: usize) -> Result<String> {
    let kinds = a.estimation.kinds()?;
    let runs: Vec<SweepRun> = match &a.runs {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::Config(format!("cannot open runs {}: {e}", p.display())))?;
            serde_json::from_reader(BufReader::new(f))?
        }
        None => {
            let settings = a.estimation.settings()?;
            if settings.path != PathKind::Tree || a.levels.dim != 4 {
                return Err(Error::Config("bias correlation uses the dim-4 TREE path".into()));
            }
            let (runs, _) = build_dataset(config, matrices_for(config, &a.levels)?, &a.estimation, jobs)?;
            runs
        }
    };
    let rows = bias_correlation_from_runs(&runs);
    config.report("bias_spearman.csv", &Report::bias_correlation(&rows, &kinds, |r| r.spearman))?;
    config.report("bias_pearson.csv", &Report::bias_correlation(&rows, &kinds, |r| r.pearson))?;
    config.report("bias_detail.csv", &Report::bias_detail(&rows))?;
    let mut text = String::from("estimator  spearman(1-2)  spearman(6-10)  pearson(6-10)\n");
    for k in kinds {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        text.push_str(&format!(
            "{:<10} {:>13} {:>15} {:>14}\n",
            k.name(),
            f(mean_coefficient(&rows, k, 1..=2, |r| r.spearman)),
            f(mean_coefficient(&rows, k, 6..=10, |r| r.spearman)),
            f(mean_coefficient(&rows, k, 6..=10, |r| r.pearson)),
        ));
    }
    summary(config, &text)
}

fn dataset_or_build(
    config: &RunConfig,
    dataset: &Option<PathBuf>,
    build_missing: bool,
    levels: &LevelArgs,
    est: &EstimationArgs,
    jobs: usize,
) -> Result<Vec<SequenceRecord>> {
    match dataset {
        Some(p) if p.exists() => load_dataset(p),
        _ if build_missing => {
            let (_, records) = build_dataset(config, matrices_for(config, levels)?, est, jobs)?;
            write_records(&records, config.create("dataset.csv")?)?;
            Ok(records)
        }
        Some(p) => Err(Error::Config(format!("dataset {} not found (pass --build-missing to generate it)", p.display()))),
        None => Err(Error::Config("experiment needs --dataset or --build-missing".into())),
    }
}

fn bias_variance(config: &RunConfig, a: &BiasVarianceArgs, jobs: usize) -> Result<String> {
    let records = dataset_or_build(config, &a.dataset, a.build_missing, &a.levels, &a.estimation, jobs)?;
    let kinds = a.estimation.kinds()?;
    require_heads(&records, &kinds)?;
    let base = a.corrector.config(vec![kinds[0]], 0)?;
    let reps = a.repetitions.unwrap_or(30);
    let acc = accuracy_experiment(&records, &kinds, SplitKind::Ratio46, reps, &base, config.seed, jobs)?;
    config.report("accuracy.csv", &Report::accuracy(&acc))?;

    let mut models = BTreeMap::new();
    for &k in &kinds {
        let train: Vec<_> = records.iter().filter(|r| r.estimator == k).cloned().collect();
        let cfg = CorrectorConfig {
            heads: vec![k],
            seed: seed::derive(config.seed, seed::stream::CORRECTOR, k.index() as u64),
            ..base.clone()
        };
        models.insert(k, train_corrector(&train, &cfg, None)?.0);
    }
    let var = bias_variance_experiment(
        &kinds,
        &a.levels.values()?,
        a.variance_per_level.unwrap_or(5),
        a.reruns.unwrap_or(10),
        &a.estimation.settings()?,
        &models,
        seed::derive(config.seed, seed::stream::REPETITION, 1 << 32),
        jobs,
    )?;
    config.report("variance.csv", &Report::variance(&var))?;
    let mut text = String::from("estimator  corrector_mae  estimator_mae  (all levels, held-out)\n");
    for r in acc.iter().filter(|r| r.level.is_none()) {
        text.push_str(&format!("{:<10} {:>13.4} {:>14.4}\n", r.kind.name(), r.corrector_mae, r.estimator_mae));
    }
    summary(config, &text)
}

fn robustness(config: &RunConfig, a: &RobustnessArgs, jobs: usize) -> Result<String> {
    let records = dataset_or_build(config, &a.dataset, a.build_missing, &a.levels, &a.estimation, jobs)?;
    let kinds = a.estimation.kinds()?;
    require_heads(&records, &kinds)?;
    let base = a.corrector.config(vec![kinds[0]], 0)?;
    let rows = robustness_experiment(&records, &kinds, &[LossKind::Mse, LossKind::L1], &base, config.seed, jobs)?;
    config.report("robustness.csv", &Report::robustness(&rows))?;
    let mut text = String::from("loss estimator  corrector_mae  estimator_mae  (levels 6-10)\n");
    for r in rows.iter().filter(|r| r.level.is_none()) {
        text.push_str(&format!("{:<4} {:<10} {:>13.4} {:>14.4}\n", r.loss, r.kind.name(), r.corrector_mae, r.estimator_mae));
    }
    summary(config, &text)
}

fn heads(config: &RunConfig, a: &HeadsArgs, jobs: usize) -> Result<String> {
    let records = dataset_or_build(config, &a.dataset, a.build_missing, &a.levels, &a.estimation, jobs)?;
    let kinds = a.estimation.kinds()?;
    require_heads(&records, &kinds)?;
    let split: SplitKind = a.split.as_deref().unwrap_or("RATIO_37").parse()?;
    let base = a.corrector.config(vec![kinds[0]], 0)?;
    let curves = head_comparison_experiment(
        &records,
        &head_sets(&kinds),
        &[LossKind::Mse, LossKind::L1],
        split,
        &base,
        config.seed,
        jobs,
    )?;
    config.report("heads.csv", &Report::head_curves(&curves))?;
    let mut text = String::from("heads                loss  final_test_error\n");
    for c in &curves {
        text.push_str(&format!("{:<20} {:<5} {:.4}\n", c.label(), c.loss, c.final_error()));
    }
    let sp = split_dataset(&records, split, config.seed)?;
    for &k in &kinds {
        if let Some(m) = estimator_metrics(&sp.test, k).last() {
            text.push_str(&format!("raw {:<16} mse   {:.4}  mae {:.4}\n", k.name(), m.mse, m.mae));
        }
    }
    summary(config, &text)
}
