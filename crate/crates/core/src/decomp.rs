//! Total correlation as a sum of mutual-information terms along a decomposition path.
//!
//! For `Z = (Z_1, ..., Z_d)` the chain rule gives
//! `TC(Z) = sum_i I(Z_{<i}; Z_i)` (the LINE path). The TREE path splits variables into
//! halves recursively: `TC(Z) = TC(A) + TC(B) + I(A; B)`. Each term gets its own
//! estimator and all estimators train jointly on shared batches.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{analytic_mi, GaussianSampler};
use crate::mi::{EstimatorConfig, EstimatorKind, MiEstimator, PairedBatch};
use crate::seed;

/// Share of final iterations averaged into the reported estimate.
pub const TAIL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PathKind {
    Tree,
    Line,
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::Tree => "TREE",
            PathKind::Line => "LINE",
        })
    }
}

impl FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TREE" => Ok(PathKind::Tree),
            "LINE" => Ok(PathKind::Line),
            other => Err(Error::InvalidArgument(format!("unknown decomposition path '{other}'"))),
        }
    }
}

/// One MI term `I(Z_x; Z_y)` over 0-based variable indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub path: PathKind,
    pub dim: usize,
    pub terms: Vec<Term>,
}

fn tree_terms(vars: &[usize], out: &mut Vec<Term>) {
    if vars.len() < 2 {
        return;
    }
    let (a, b) = vars.split_at(vars.len() / 2);
    tree_terms(a, out);
    tree_terms(b, out);
    out.push(Term {
        x: a.to_vec(),
        y: b.to_vec(),
    });
}

/// Ordered MI terms for `path` over `dim` variables.
///
/// TREE needs every split to be even, so `dim` must be a power of two.
pub fn build_plan(path: PathKind, dim: usize) -> Result<DecompositionPlan> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("decomposition needs dim >= 2, got {dim}")));
    }
    let vars: Vec<usize> = (0..dim).collect();
    let terms = match path {
        PathKind::Line => (1..dim)
            .map(|i| Term {
                x: vars[..i].to_vec(),
                y: vec![i],
            })
            .collect(),
        PathKind::Tree => {
            if !dim.is_power_of_two() {
                return Err(Error::Unsupported(format!(
                    "TREE decomposition needs even splits at every level; dim {dim} is not a power of two"
                )));
            }
            let mut terms = Vec::with_capacity(dim - 1);
            tree_terms(&vars, &mut terms);
            terms
        }
    };
    Ok(DecompositionPlan { path, dim, terms })
}

impl DecompositionPlan {
    /// Exact value of every term under covariance `sigma`.
    pub fn analytic_terms(&self, sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
        if sigma.nrows() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "plan is for dim {}, covariance is {}x{}",
                self.dim,
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        self.terms.iter().map(|t| analytic_mi(sigma, &t.x, &t.y)).collect()
    }

    /// Whether this is the dim-4 TREE plan whose last term couples the two halves.
    pub fn has_cross_term(&self) -> bool {
        self.path == PathKind::Tree && self.dim == 4
    }
}

/// Anything that yields `batch x dim` sample matrices.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn next_batch(&mut self, batch: usize) -> Result<Array2<f64>>;
}

impl SampleSource for GaussianSampler {
    fn dim(&self) -> usize {
        GaussianSampler::dim(self)
    }

    fn next_batch(&mut self, batch: usize) -> Result<Array2<f64>> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(self.draw(batch))
    }
}

/// Fixed sample pool; each batch is a fresh random subset of rows.
pub struct PoolSource {
    data: Array2<f64>,
    rng: ChaCha8Rng,
}

impl PoolSource {
    pub fn new(data: Array2<f64>, seed: u64) -> Result<Self> {
        if data.nrows() < 2 || data.ncols() == 0 || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("sample pool needs >= 2 finite rows".into()));
        }
        Ok(PoolSource {
            data,
            rng: seed::rng(seed),
        })
    }
}

impl SampleSource for PoolSource {
    fn dim(&self) -> usize {
        self.data.ncols()
    }

    fn next_batch(&mut self, batch: usize) -> Result<Array2<f64>> {
        if batch == 0 || batch > self.data.nrows() {
            return Err(Error::InvalidArgument(format!(
                "batch {batch} does not fit a pool of {} rows",
                self.data.nrows()
            )));
        }
        let rows = index::sample(&mut self.rng, self.data.nrows(), batch).into_vec();
        Ok(self.data.select(Axis(0), &rows))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged { iteration: usize, term: usize, detail: String },
}

/// Per-iteration term bounds and their totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub terms: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    /// Writes `iter,term_0,...,total` rows with round-trip float text.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n_terms = self.terms.first().map_or(0, Vec::len);
        let mut header = String::from("iter");
        for k in 0..n_terms {
            header.push_str(&format!(",term_{k}"));
        }
        header.push_str(",total\n");
        w.write_all(header.as_bytes())?;
        for (i, (terms, total)) in self.terms.iter().zip(&self.totals).enumerate() {
            let mut line = i.to_string();
            for v in terms {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line.push(',');
            line.push_str(&total.to_string());
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

fn tail_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = ((values.len() as f64 * TAIL_FRACTION).ceil() as usize).clamp(1, values.len());
    let tail = &values[values.len() - k..];
    Some(tail.iter().sum::<f64>() / k as f64)
}

pub struct TcEstimatorRun {
    pub plan: DecompositionPlan,
    pub kind: EstimatorKind,
    pub estimators: Vec<MiEstimator>,
    pub trace: Trace,
    pub status: RunStatus,
}

impl TcEstimatorRun {
    /// Mean total over the final tenth of the trace.
    pub fn final_estimate(&self) -> Option<f64> {
        tail_mean(&self.trace.totals)
    }

    /// Tail mean of every term, in plan order.
    pub fn final_terms(&self) -> Vec<f64> {
        (0..self.plan.terms.len())
            .filter_map(|k| {
                let col: Vec<f64> = self.trace.terms.iter().map(|row| row[k]).collect();
                tail_mean(&col)
            })
            .collect()
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    /// Share of the final TREE estimate carried by the cross term `I(Z_12; Z_34)`.
    pub fn third_term_proportion(&self) -> Result<f64> {
        if !self.plan.has_cross_term() {
            return Err(Error::Unsupported("third-term proportion is defined for the dim-4 TREE path".into()));
        }
        third_term_proportion(&self.final_terms())
    }
}

/// `terms[2] / sum(terms)` for a three-term TREE decomposition.
pub fn third_term_proportion(terms: &[f64]) -> Result<f64> {
    if terms.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 terms, got {}", terms.len())));
    }
    let total: f64 = terms.iter().sum();
    if total.abs() < 1e-12 {
        return Err(Error::Undefined("total estimate is zero".into()));
    }
    Ok(terms[2] / total)
}

/// Trains one estimator per plan term jointly for `iters` iterations.
///
/// Divergence stops the run early and is reported in the status; the trace keeps all
/// completed iterations.
pub fn estimate_tc(
    source: &mut dyn SampleSource,
    plan: &DecompositionPlan,
    kind: EstimatorKind,
    config: &EstimatorConfig,
    iters: usize,
    run_seed: u64,
) -> Result<TcEstimatorRun> {
    if source.dim() != plan.dim {
        return Err(Error::InvalidArgument(format!(
            "source has dim {}, plan expects {}",
            source.dim(),
            plan.dim
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iteration count must be positive".into()));
    }
    let mut estimators = plan
        .terms
        .iter()
        .enumerate()
        .map(|(k, t)| {
            MiEstimator::new(kind, t.x.len(), t.y.len(), config, seed::derive(run_seed, seed::stream::INIT, k as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_terms = plan.terms.len();
    let mut trace = Trace {
        terms: Vec::with_capacity(iters),
        totals: Vec::with_capacity(iters),
    };
    let mut status = RunStatus::Ok;
    'outer: for it in 0..iters {
        let z = source.next_batch(config.batch)?;
        let mut values = Vec::with_capacity(n_terms);
        for (k, (term, est)) in plan.terms.iter().zip(estimators.iter_mut()).enumerate() {
            let neg_seed = seed::derive(run_seed, seed::stream::NEGATIVES, (it * n_terms + k) as u64);
            let batch = PairedBatch::new(z.select(Axis(1), &term.x), z.select(Axis(1), &term.y), neg_seed)?;
            match est.train_step(&batch) {
                Ok(out) => values.push(out.bound),
                Err(Error::Diverged { detail, .. }) => {
                    status = RunStatus::Diverged {
                        iteration: it,
                        term: k,
                        detail,
                    };
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        trace.totals.push(values.iter().sum());
        trace.terms.push(values);
    }
    if let RunStatus::Diverged { iteration, term, detail } = &status {
        log::warn!("{kind} run diverged at iteration {iteration} (term {term}): {detail}");
    }
    Ok(TcEstimatorRun {
        plan: plan.clone(),
        kind,
        estimators,
        trace,
        status,
    })
}
