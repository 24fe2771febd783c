//! Variational mutual-information estimators over paired variable groups.
//!
//! Lower bounds share a scalar critic `T(x, y)`:
//!
//! * MINE (Donsker-Varadhan): `mean_joint[T] - log mean_neg[e^T]`
//! * NWJ: `mean_joint[T] - mean_neg[e^(T - 1)]`
//! * InfoNCE: `mean_i log(e^T(x_i, y_i) / (1/B sum_j e^T(x_i, y_j)))`, at most `log B`
//!
//! CLUB is an upper bound built from a diagonal-Gaussian conditional `q(y | x)`:
//! `mean_joint[log q(y | x)] - mean_neg[log q(y' | x)]`. Its conditional is trained by
//! maximum likelihood, not by optimizing the bound.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{hcat, Activation, Adam, AdamConfig, Graph, Mlp, Var};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mine,
    Nwj,
    Infonce,
    Club,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Mine,
        EstimatorKind::Nwj,
        EstimatorKind::Infonce,
        EstimatorKind::Club,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mine => "mine",
            EstimatorKind::Nwj => "nwj",
            EstimatorKind::Infonce => "infonce",
            EstimatorKind::Club => "club",
        }
    }

    pub fn is_lower_bound(self) -> bool {
        self != EstimatorKind::Club
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mine" => Ok(EstimatorKind::Mine),
            "nwj" => Ok(EstimatorKind::Nwj),
            "infonce" | "info_nce" | "info-nce" => Ok(EstimatorKind::Infonce),
            "club" => Ok(EstimatorKind::Club),
            other => Err(Error::InvalidArgument(format!("unknown estimator kind '{other}'"))),
        }
    }
}

/// Parses a comma-separated kind list such as `mine,infonce`.
pub fn parse_kinds(list: &str) -> Result<Vec<EstimatorKind>> {
    let kinds = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("empty estimator list".into()));
    }
    Ok(kinds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Hidden widths of the lower-bound critic (relu).
    pub critic_hidden: Vec<usize>,
    /// Hidden widths of each CLUB conditional network (tanh).
    pub club_hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    /// Moving-average rate of MINE's gradient denominator.
    pub ema_rate: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            critic_hidden: vec![64, 64],
            club_hidden: vec![64, 64],
            lr: 1e-3,
            batch: 128,
            ema_rate: 0.99,
        }
    }
}

impl EstimatorConfig {
    /// Compact networks sized for single-core desk-scale sweeps.
    pub fn desk() -> Self {
        EstimatorConfig {
            critic_hidden: vec![32],
            club_hidden: vec![32],
            lr: 2e-3,
            batch: 64,
            ema_rate: 0.99,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::InvalidArgument("estimator batch must be at least 2".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::InvalidArgument("learning rate must be > 0 and EMA rate in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Row-aligned joint draws plus within-batch shuffled negatives.
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub y_shuffled: Array2<f64>,
}

impl PairedBatch {
    pub fn new(x: Array2<f64>, y: Array2<f64>, negatives_seed: u64) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::InvalidArgument(format!(
                "x has {} rows, y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        let y_shuffled = make_negatives(&y, negatives_seed)?;
        Ok(PairedBatch { x, y, y_shuffled })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Random permutation of `0..n` with no fixed points (`n >= 2`).
///
/// A uniform shuffle is drawn first; each remaining fixed point is then swapped with
/// its successor, which clears it without creating another.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 rows for negatives, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed));
    for i in 0..n {
        if perm[i] == i {
            perm.swap(i, (i + 1) % n);
        }
    }
    Ok(perm)
}

/// `y` with rows permuted by [`derangement`]: row `i` of the result is `y[perm[i]]`.
pub fn make_negatives(y: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    let perm = derangement(y.nrows(), seed)?;
    Ok(y.select(ndarray::Axis(0), &perm))
}

#[derive(Clone, Debug)]
enum Model {
    Critic { net: Mlp, opt: Adam },
    Club { mu: Mlp, logvar: Mlp, opt_mu: Adam, opt_logvar: Adam },
}

/// Result of one optimizer step: the bound on the batch (before the update) and the
/// minimized loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub bound: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct MiEstimator {
    kind: EstimatorKind,
    x_dim: usize,
    y_dim: usize,
    config: EstimatorConfig,
    model: Model,
    ema_denominator: Option<f64>,
    steps: usize,
    exp_clamps: usize,
}

struct Built {
    bound: Var,
    objective: Var,
    /// Mean of `e^T` on negatives (MINE only), feeds the moving average.
    neg_exp_mean: Option<f64>,
}

impl MiEstimator {
    pub fn new(kind: EstimatorKind, x_dim: usize, y_dim: usize, config: &EstimatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if x_dim == 0 || y_dim == 0 {
            return Err(Error::InvalidArgument("estimator dims must be positive".into()));
        }
        let mut rng = seed::rng(seed);
        let adam = AdamConfig::with_lr(config.lr);
        let model = if kind == EstimatorKind::Club {
            let dims: Vec<usize> = std::iter::once(x_dim)
                .chain(config.club_hidden.iter().copied())
                .chain(std::iter::once(y_dim))
                .collect();
            let mu = Mlp::new(&dims, Activation::Tanh, &mut rng)?;
            let logvar = Mlp::new(&dims, Activation::Tanh, &mut rng)?;
            Model::Club {
                opt_mu: Adam::new(&mu, adam),
                opt_logvar: Adam::new(&logvar, adam),
                mu,
                logvar,
            }
        } else {
            let dims: Vec<usize> = std::iter::once(x_dim + y_dim)
                .chain(config.critic_hidden.iter().copied())
                .chain(std::iter::once(1))
                .collect();
            let net = Mlp::new(&dims, Activation::Relu, &mut rng)?;
            Model::Critic {
                opt: Adam::new(&net, adam),
                net,
            }
        };
        Ok(MiEstimator {
            kind,
            x_dim,
            y_dim,
            config: config.clone(),
            model,
            ema_denominator: None,
            steps: 0,
            exp_clamps: 0,
        })
    }

    /// Lower-bound estimator with a caller-supplied critic (used for degenerate checks).
    pub fn with_critic(kind: EstimatorKind, x_dim: usize, y_dim: usize, critic: Mlp, config: &EstimatorConfig) -> Result<Self> {
        if !kind.is_lower_bound() {
            return Err(Error::InvalidArgument("CLUB has no critic".into()));
        }
        if critic.input_dim() != x_dim + y_dim || critic.output_dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "critic must map {} inputs to 1 output",
                x_dim + y_dim
            )));
        }
        Ok(MiEstimator {
            kind,
            x_dim,
            y_dim,
            config: config.clone(),
            model: Model::Critic {
                opt: Adam::new(&critic, AdamConfig::with_lr(config.lr)),
                net: critic,
            },
            ema_denominator: None,
            steps: 0,
            exp_clamps: 0,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn ema_denominator(&self) -> Option<f64> {
        self.ema_denominator
    }

    /// Entries clamped inside `exp` over the estimator's lifetime.
    pub fn exp_clamps(&self) -> usize {
        self.exp_clamps
    }

    fn check_dims(&self, batch: &PairedBatch) -> Result<()> {
        if batch.x.ncols() != self.x_dim || batch.y.ncols() != self.y_dim || batch.y_shuffled.dim() != batch.y.dim() {
            return Err(Error::InvalidArgument(format!(
                "batch dims {}/{} do not match estimator {}/{}",
                batch.x.ncols(),
                batch.y.ncols(),
                self.x_dim,
                self.y_dim
            )));
        }
        if batch.x.nrows() != batch.y.nrows() || batch.len() < 2 {
            return Err(Error::InvalidArgument("batch needs at least two aligned rows".into()));
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph, batch: &PairedBatch) -> Result<(Built, Vec<crate::nn::Bound>)> {
        match &self.model {
            Model::Critic { net, .. } => {
                let p = net.bind(g);
                let built = self.build_lower(g, net, &p, batch)?;
                Ok((built, vec![p]))
            }
            Model::Club { mu, logvar, .. } => {
                let pm = mu.bind(g);
                let pl = logvar.bind(g);
                let built = build_club(g, mu, &pm, logvar, &pl, batch)?;
                Ok((built, vec![pm, pl]))
            }
        }
    }

    fn build_lower(&self, g: &mut Graph, net: &Mlp, p: &crate::nn::Bound, batch: &PairedBatch) -> Result<Built> {
        let b = batch.len() as f64;
        if self.kind == EstimatorKind::Infonce {
            let x = g.leaf(batch.x.clone());
            let y = g.leaf(batch.y.clone());
            let pairs = net.forward_pairs_on(g, p, x, y)?;
            let n = batch.len();
            let scores = g.reshape(pairs, n, n)?;
            let positive = g.diagonal(scores)?;
            let lse = g.row_log_sum_exp(scores)?;
            let diff = g.sub(positive, lse)?;
            let mean = g.mean(diff)?;
            let bound = g.shift(mean, b.ln());
            let objective = g.scale(bound, -1.0);
            return Ok(Built {
                bound,
                objective,
                neg_exp_mean: None,
            });
        }

        let joint = g.leaf(hcat(&[&batch.x, &batch.y])?);
        let marginal = g.leaf(hcat(&[&batch.x, &batch.y_shuffled])?);
        let t_joint = net.forward_on(g, p, joint)?;
        let t_neg = net.forward_on(g, p, marginal)?;
        let joint_mean = g.mean(t_joint)?;
        match self.kind {
            EstimatorKind::Mine => {
                let lse = g.log_sum_exp(t_neg)?;
                let log_mean_exp = g.shift(lse, -b.ln());
                let bound = g.sub(joint_mean, log_mean_exp)?;
                let e = g.exp(t_neg);
                let e_mean = g.mean(e)?;
                let m = g.scalar(e_mean);
                let denom = match self.ema_denominator {
                    Some(prev) => self.config.ema_rate * prev + (1.0 - self.config.ema_rate) * m,
                    None => m,
                };
                // Gradient of log E[e^T] estimated as grad E[e^T] / moving average.
                let corrected = g.scale(e_mean, 1.0 / denom);
                let surrogate = g.sub(joint_mean, corrected)?;
                let objective = g.scale(surrogate, -1.0);
                Ok(Built {
                    bound,
                    objective,
                    neg_exp_mean: Some(m),
                })
            }
            EstimatorKind::Nwj => {
                let shifted = g.shift(t_neg, -1.0);
                let e = g.exp(shifted);
                let e_mean = g.mean(e)?;
                let bound = g.sub(joint_mean, e_mean)?;
                let objective = g.scale(bound, -1.0);
                Ok(Built {
                    bound,
                    objective,
                    neg_exp_mean: None,
                })
            }
            EstimatorKind::Infonce | EstimatorKind::Club => unreachable!("handled above"),
        }
    }

    /// Bound on `batch` under the current parameters.
    pub fn bound_value(&self, batch: &PairedBatch) -> Result<f64> {
        self.check_dims(batch)?;
        let mut g = Graph::new();
        let (built, _) = self.build(&mut g, batch)?;
        let v = g.scalar(built.bound);
        if !v.is_finite() {
            return Err(Error::Diverged {
                iteration: self.steps,
                detail: format!("{} bound is {v}", self.kind),
            });
        }
        Ok(v)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &PairedBatch) -> Result<StepOutcome> {
        self.check_dims(batch)?;
        let mut g = Graph::new();
        let (built, bound_params) = self.build(&mut g, batch)?;
        let bound = g.scalar(built.bound);
        let loss = match self.model {
            Model::Critic { .. } => -bound,
            Model::Club { .. } => g.scalar(built.objective),
        };
        if !bound.is_finite() || !g.scalar(built.objective).is_finite() {
            return Err(Error::Diverged {
                iteration: self.steps,
                detail: format!("{} produced bound {bound}, loss {loss}", self.kind),
            });
        }
        let grads = g.backward(built.objective)?;
        self.exp_clamps += g.exp_clamps();
        match &mut self.model {
            Model::Critic { net, opt } => {
                let gr = bound_params[0].grads(net, &grads);
                opt.step(net, &gr)?;
            }
            Model::Club { mu, logvar, opt_mu, opt_logvar } => {
                let gm = bound_params[0].grads(mu, &grads);
                let gl = bound_params[1].grads(logvar, &grads);
                opt_mu.step(mu, &gm)?;
                opt_logvar.step(logvar, &gl)?;
            }
        }
        if let Some(m) = built.neg_exp_mean {
            let rate = self.config.ema_rate;
            self.ema_denominator = Some(match self.ema_denominator {
                Some(prev) => rate * prev + (1.0 - rate) * m,
                None => m,
            });
        }
        self.steps += 1;
        Ok(StepOutcome { bound, loss })
    }

    pub fn checkpoint(&self) -> EstimatorCheckpoint {
        let (critic, mu, logvar) = match &self.model {
            Model::Critic { net, .. } => (Some(net.clone()), None, None),
            Model::Club { mu, logvar, .. } => (None, Some(mu.clone()), Some(logvar.clone())),
        };
        EstimatorCheckpoint {
            kind: self.kind,
            x_dim: self.x_dim,
            y_dim: self.y_dim,
            ema_denominator: self.ema_denominator,
            critic,
            mu,
            logvar,
        }
    }
}

/// Negative log-density of a diagonal Gaussian, summed over columns, averaged over rows.
fn gaussian_nll(g: &mut Graph, y: Var, mu: Var, logvar: Var) -> Result<Var> {
    let rows = g.value(y).nrows() as f64;
    let cols = g.value(y).ncols() as f64;
    let d = g.sub(y, mu)?;
    let sq = g.mul(d, d)?;
    let neg_lv = g.scale(logvar, -1.0);
    let precision = g.exp(neg_lv);
    let weighted = g.mul(sq, precision)?;
    let terms = g.add(weighted, logvar)?;
    let total = g.sum(terms);
    let per_row = g.scale(total, 0.5 / rows);
    Ok(g.shift(per_row, 0.5 * cols * (2.0 * std::f64::consts::PI).ln()))
}

fn build_club(
    g: &mut Graph,
    mu_net: &Mlp,
    pm: &crate::nn::Bound,
    lv_net: &Mlp,
    pl: &crate::nn::Bound,
    batch: &PairedBatch,
) -> Result<Built> {
    let x = g.leaf(batch.x.clone());
    let y = g.leaf(batch.y.clone());
    let y_neg = g.leaf(batch.y_shuffled.clone());
    let mu = mu_net.forward_on(g, pm, x)?;
    let logvar = lv_net.forward_on(g, pl, x)?;
    let nll_joint = gaussian_nll(g, y, mu, logvar)?;
    let nll_neg = gaussian_nll(g, y_neg, mu, logvar)?;
    let bound = g.sub(nll_neg, nll_joint)?;
    Ok(Built {
        bound,
        objective: nll_joint,
        neg_exp_mean: None,
    })
}

/// Estimator state on disk: network checkpoints plus estimator metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCheckpoint {
    pub kind: EstimatorKind,
    pub x_dim: usize,
    pub y_dim: usize,
    pub ema_denominator: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<Mlp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Mlp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logvar: Option<Mlp>,
}
