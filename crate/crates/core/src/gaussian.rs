//! Zero-mean Gaussian ground truth: unit-diagonal covariances with a prescribed total
//! correlation, exact TC / block-MI oracles, and seeded sampling.
//!
//! For `Z ~ N(0, S)` the total correlation is `1/2 (sum_i log S_ii - log det S)`, which
//! for unit-diagonal `S` reduces to `-1/2 log det S`. All values are in nats.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::seed;

/// Jitter added to the diagonal when a factorization fails.
pub const JITTER: f64 = 1e-12;
/// Generator tolerance on `|analytic_tc - target|`.
pub const TARGET_TOLERANCE: f64 = 1e-6;
const MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub dim: usize,
    #[serde(serialize_with = "ser_rows", deserialize_with = "de_rows")]
    pub sigma: DMatrix<f64>,
    pub true_tc: f64,
    pub seed: u64,
    /// Diagonal jitter needed to factor `sigma`; zero in all but pathological cases.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub jitter: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn ser_rows<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect();
    rows.serialize(s)
}

fn de_rows<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(serde::de::Error::custom("sigma must be a square array of arrays"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl GaussianSpec {
    /// Builds a spec from a covariance, labelling it with its analytic TC.
    pub fn from_sigma(sigma: DMatrix<f64>, seed: u64) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::InvalidArgument("sigma must be a non-empty square matrix".into()));
        }
        let true_tc = analytic_tc(&sigma)?;
        Ok(GaussianSpec {
            dim: sigma.nrows(),
            sigma,
            true_tc,
            seed,
            jitter: 0.0,
        })
    }

    pub fn identity(dim: usize) -> Self {
        GaussianSpec {
            dim,
            sigma: DMatrix::identity(dim, dim),
            true_tc: 0.0,
            seed: 0,
            jitter: 0.0,
        }
    }

    /// Checks the structural invariants: square, symmetric and unit-diagonal to
    /// 1e-12, positive definite, and labelled with its own analytic TC.
    pub fn validate(&self) -> Result<()> {
        let s = &self.sigma;
        if s.nrows() != self.dim || s.ncols() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "sigma is {}x{} but dim is {}",
                s.nrows(),
                s.ncols(),
                self.dim
            )));
        }
        for i in 0..self.dim {
            if (s[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("diagonal entry {i} is {}", s[(i, i)])));
            }
            for j in 0..i {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!("sigma is not symmetric at ({i}, {j})")));
                }
            }
        }
        let tc = analytic_tc(s)?;
        if (tc - self.true_tc).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "label {} differs from analytic TC {tc}",
                self.true_tc
            )));
        }
        Ok(())
    }

    /// Lower Cholesky factor of `sigma + jitter * I`.
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        let mut s = self.sigma.clone();
        for i in 0..self.dim {
            s[(i, i)] += self.jitter;
        }
        cholesky(&s)
    }
}

/// Lower-triangular Cholesky factor; names the first non-positive pivot on failure.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidArgument("cholesky needs a square matrix".into()));
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Ok(l)
}

pub fn log_det_spd(a: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Total correlation of `N(0, sigma)` in nats.
pub fn analytic_tc(sigma: &DMatrix<f64>) -> Result<f64> {
    let log_det = log_det_spd(sigma)?;
    let log_diag: f64 = sigma.diagonal().iter().map(|d| d.ln()).sum();
    Ok(0.5 * (log_diag - log_det))
}

pub fn principal_submatrix(sigma: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| sigma[(idx[i], idx[j])])
}

/// Checks that `a` and `b` are non-empty, disjoint, and together cover `0..dim`.
pub fn validate_split(dim: usize, a: &[usize], b: &[usize]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("both sides of a split must be non-empty".into()));
    }
    let mut seen = vec![false; dim];
    for &i in a.iter().chain(b) {
        if i >= dim {
            return Err(Error::InvalidArgument(format!("index {i} out of range for dim {dim}")));
        }
        if seen[i] {
            return Err(Error::InvalidArgument(format!("index {i} appears twice in split")));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!("index {missing} missing from split")));
    }
    Ok(())
}

/// Mutual information between two index groups of `N(0, sigma)`, which need not cover
/// every dimension but must be disjoint and non-empty.
pub fn analytic_mi(sigma: &DMatrix<f64>, a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() || a.iter().any(|i| b.contains(i)) {
        return Err(Error::InvalidArgument("MI groups must be non-empty and disjoint".into()));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&i| i >= sigma.nrows()) {
        return Err(Error::InvalidArgument(format!("index {bad} out of range")));
    }
    let joint: Vec<usize> = a.iter().chain(b).copied().collect();
    let ld_a = log_det_spd(&principal_submatrix(sigma, a))?;
    let ld_b = log_det_spd(&principal_submatrix(sigma, b))?;
    let ld_ab = log_det_spd(&principal_submatrix(sigma, &joint))?;
    Ok(0.5 * (ld_a + ld_b - ld_ab))
}

/// `I(Z_A; Z_B)` for a split `(A, B)` covering every dimension.
pub fn analytic_mi_blocks(sigma: &DMatrix<f64>, a: &[usize], b: &[usize]) -> Result<f64> {
    validate_split(sigma.nrows(), a, b)?;
    analytic_mi(sigma, a, b)
}

fn normalize_to_correlation(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d: Vec<f64> = m.diagonal().iter().copied().collect();
    if d.iter().any(|&x| x <= 1e-10 || !x.is_finite()) {
        return None;
    }
    let n = m.nrows();
    let mut out = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (d[i] * d[j]).sqrt());
    for i in 0..n {
        out[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Some(out)
}

/// One-parameter family `S(s) = e^{-s} I + (1 - e^{-s}) K` from the identity (`s = 0`)
/// toward a singular correlation matrix `K` (`s -> inf`).
struct Family {
    target: DMatrix<f64>,
}

impl Family {
    fn random(dim: usize, rng: &mut ChaCha8Rng) -> Option<Family> {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let base = normalize_to_correlation(&(&a * a.transpose()))?;
        let eig = SymmetricEigen::new(base);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let compressed = rng.random_range(1..dim);
        let mut values = eig.eigenvalues.clone();
        for &i in &order[..compressed] {
            values[i] = 0.0;
        }
        let q = &eig.eigenvectors;
        let k = q * DMatrix::from_diagonal(&values) * q.transpose();
        Some(Family {
            target: normalize_to_correlation(&k)?,
        })
    }

    fn at(&self, s: f64) -> DMatrix<f64> {
        let w = -(-s).exp_m1();
        let n = self.target.nrows();
        let mut m = &self.target * w;
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        for i in 0..n {
            for j in 0..i {
                let v = m[(i, j)];
                m[(j, i)] = v;
            }
        }
        m
    }

    fn tc(&self, s: f64) -> Option<f64> {
        analytic_tc(&self.at(s)).ok()
    }

    /// Bisects `s` so that `tc(s)` hits `target`; `tc` is increasing in `s` with `tc(0) = 0`.
    fn solve(&self, target: f64) -> Option<DMatrix<f64>> {
        let mut hi = 1.0;
        loop {
            match self.tc(hi) {
                Some(tc) if tc >= target => break,
                Some(_) if hi < 40.0 => hi *= 2.0,
                _ => return None,
            }
        }
        let mut lo = 0.0;
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            let tc = self.tc(mid)?;
            if (tc - target).abs() <= 1e-10 {
                return Some(self.at(mid));
            }
            if tc < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let best = self.at(0.5 * (lo + hi));
        let tc = analytic_tc(&best).ok()?;
        ((tc - target).abs() <= TARGET_TOLERANCE).then_some(best)
    }
}

/// Random unit-diagonal covariance whose TC is within [`TARGET_TOLERANCE`] of `target_tc`.
pub fn gen_spec_with_target_tc(dim: usize, target_tc: f64, seed: u64) -> Result<GaussianSpec> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dim must be at least 2, got {dim}")));
    }
    if !target_tc.is_finite() || target_tc < 0.0 {
        return Err(Error::InvalidArgument(format!("target TC must be finite and >= 0, got {target_tc}")));
    }
    if target_tc == 0.0 {
        let mut spec = GaussianSpec::identity(dim);
        spec.seed = seed;
        return Ok(spec);
    }
    let mut rng = seed::rng(seed);
    for attempt in 0..MAX_ATTEMPTS {
        let Some(family) = Family::random(dim, &mut rng) else {
            log::debug!("degenerate random factor on attempt {attempt}");
            continue;
        };
        let Some(sigma) = family.solve(target_tc) else {
            log::debug!("could not bracket TC {target_tc} on attempt {attempt}");
            continue;
        };
        let mut spec = GaussianSpec::from_sigma(sigma, seed)?;
        if spec.factor().is_err() {
            spec.jitter = JITTER;
            if spec.factor().is_err() {
                continue;
            }
        }
        if (spec.true_tc - target_tc).abs() <= TARGET_TOLERANCE {
            return Ok(spec);
        }
    }
    Err(Error::TargetUnreachable {
        target: target_tc,
        attempts: MAX_ATTEMPTS,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    /// `B x dim`, one sample per row.
    pub data: Array2<f64>,
    pub spec_id: String,
}

/// Draws i.i.d. rows from `N(0, sigma)` as `L e` with `e` standard normal.
pub struct GaussianSampler {
    factor: DMatrix<f64>,
    rng: ChaCha8Rng,
    spec_id: String,
}

impl GaussianSampler {
    pub fn new(spec: &GaussianSpec, spec_id: impl Into<String>, seed: u64) -> Result<Self> {
        Ok(GaussianSampler {
            factor: spec.factor()?,
            rng: seed::rng(seed),
            spec_id: spec_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn draw(&mut self, batch: usize) -> Array2<f64> {
        let dim = self.dim();
        let mut out = Array2::zeros((batch, dim));
        let mut e = vec![0.0; dim];
        for mut row in out.rows_mut() {
            for v in e.iter_mut() {
                *v = self.rng.sample(StandardNormal);
            }
            for i in 0..dim {
                let mut acc = 0.0;
                for (k, ek) in e.iter().enumerate().take(i + 1) {
                    acc += self.factor[(i, k)] * ek;
                }
                row[i] = acc;
            }
        }
        out
    }

    pub fn next_batch(&mut self, batch: usize) -> SampleBatch {
        SampleBatch {
            data: self.draw(batch),
            spec_id: self.spec_id.clone(),
        }
    }
}

pub fn sample(spec: &GaussianSpec, spec_id: &str, batch: usize, seed: u64) -> Result<SampleBatch> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    Ok(GaussianSampler::new(spec, spec_id, seed)?.next_batch(batch))
}

/// Unbiased sample covariance of the rows of `data`.
pub fn empirical_covariance(data: &Array2<f64>) -> DMatrix<f64> {
    let (n, d) = data.dim();
    let means: Vec<f64> = (0..d).map(|j| data.column(j).sum() / n as f64).collect();
    DMatrix::from_fn(d, d, |i, j| {
        data.rows()
            .into_iter()
            .map(|r| (r[i] - means[i]) * (r[j] - means[j]))
            .sum::<f64>()
            / (n as f64 - 1.0)
    })
}

/// A spec paired with its stable identifier `m<index>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub id: String,
    #[serde(flatten)]
    pub spec: GaussianSpec,
}

pub fn matrix_id(index: usize) -> String {
    format!("m{index}")
}

/// Numeric part of an `m<index>` identifier, for canonical ordering.
pub fn matrix_index(id: &str) -> Option<usize> {
    id.strip_prefix('m')?.parse().ok()
}

/// `per_level` specs at each TC level, ids assigned level-major.
pub fn generate_matrices(dim: usize, levels: &[f64], per_level: usize, root_seed: u64) -> Result<Vec<MatrixEntry>> {
    let mut out = Vec::with_capacity(levels.len() * per_level);
    for &level in levels {
        for _ in 0..per_level {
            let index = out.len();
            let spec_seed = seed::derive(root_seed, seed::stream::MATRIX, index as u64);
            let spec = gen_spec_with_target_tc(dim, level, spec_seed)?;
            out.push(MatrixEntry {
                id: matrix_id(index),
                spec,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    fn equicorrelated(dim: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho })
    }

    #[test]
    fn identity_has_zero_tc() {
        for dim in 1..6 {
            assert_eq!(analytic_tc(&DMatrix::identity(dim, dim)).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_dim_half_correlation() {
        let tc = analytic_tc(&equicorrelated(2, 0.5)).unwrap();
        // -1/2 ln(0.75)
        assert!((tc - 0.143_841_036_225_890_2).abs() < 1e-12);
        assert!((tc - 0.14384).abs() < 5e-6);
    }

    #[test]
    fn equicorrelated_four_dim() {
        let rho: f64 = 0.9;
        let closed = -0.5 * ((1.0 - rho).powi(3) * (1.0 + 3.0 * rho)).ln();
        let tc = analytic_tc(&equicorrelated(4, rho)).unwrap();
        assert!((tc - closed).abs() < 1e-12);
        assert!((tc - 2.799_711_229_665_979).abs() < 1e-12);
    }

    #[test]
    fn non_positive_definite_names_pivot() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        match analytic_tc(&m) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("expected pivot error, got {other:?}"),
        }
    }

    #[test]
    fn block_mi_examples() {
        let rho: f64 = 0.8;
        let mi = analytic_mi_blocks(&equicorrelated(2, rho), &[0], &[1]).unwrap();
        assert!((mi - (-0.5 * (1.0 - rho * rho).ln())).abs() < 1e-12);
        assert!((mi - 0.51083).abs() < 5e-6);

        let mut block = DMatrix::identity(4, 4);
        block[(0, 1)] = 0.8;
        block[(1, 0)] = 0.8;
        block[(2, 3)] = -0.3;
        block[(3, 2)] = -0.3;
        assert!(analytic_mi_blocks(&block, &[0, 1], &[2, 3]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bad_splits_are_rejected() {
        let s = DMatrix::identity(4, 4);
        assert!(analytic_mi_blocks(&s, &[0, 1], &[1, 2, 3]).is_err());
        assert!(analytic_mi_blocks(&s, &[0, 1], &[2]).is_err());
        assert!(analytic_mi_blocks(&s, &[], &[0, 1, 2, 3]).is_err());
        assert!(analytic_mi_blocks(&s, &[0, 1], &[2, 7]).is_err());
    }

    #[test]
    fn zero_target_is_identity() {
        let spec = gen_spec_with_target_tc(4, 0.0, 9).unwrap();
        assert_eq!(spec.sigma, DMatrix::identity(4, 4));
        assert_eq!(spec.true_tc, 0.0);
    }

    #[test]
    fn target_five_and_ten() {
        let spec = gen_spec_with_target_tc(4, 5.0, 7).unwrap();
        assert!((spec.true_tc - 5.0).abs() <= 1e-6);
        spec.validate().unwrap();

        let spec = gen_spec_with_target_tc(4, 10.0, 7).unwrap();
        assert!((spec.true_tc - 10.0).abs() <= 1e-6);
        // Independent determinant via LU.
        let det = spec.sigma.clone().lu().determinant();
        assert!((det.ln() + 20.0).abs() < 1e-6, "ln det = {}", det.ln());
        spec.factor().unwrap();
    }

    #[test]
    fn distinct_seeds_distinct_matrices() {
        let a = gen_spec_with_target_tc(4, 3.0, 1).unwrap();
        let b = gen_spec_with_target_tc(4, 3.0, 2).unwrap();
        assert_ne!(a.sigma, b.sigma);
        assert_eq!(a, gen_spec_with_target_tc(4, 3.0, 1).unwrap());
    }

    #[test]
    fn invalid_generator_arguments() {
        assert!(gen_spec_with_target_tc(1, 1.0, 0).is_err());
        assert!(gen_spec_with_target_tc(4, -1.0, 0).is_err());
        assert!(gen_spec_with_target_tc(4, f64::NAN, 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = gen_spec_with_target_tc(4, 2.0, 3).unwrap();
        let a = sample(&spec, "m0", 50, 17).unwrap();
        let b = sample(&spec, "m0", 50, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&spec, "m0", 50, 18).unwrap());
        assert!(sample(&spec, "m0", 0, 1).is_err());
    }

    #[test]
    fn identity_samples_have_identity_covariance() {
        let batch = sample(&GaussianSpec::identity(3), "id", 100_000, 5).unwrap();
        let c = empirical_covariance(&batch.data);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - expect).abs() < 0.05);
            }
        }
    }

    #[test]
    fn plug_in_tc_of_equicorrelated_samples() {
        let spec = GaussianSpec::from_sigma(equicorrelated(4, 0.9), 0).unwrap();
        let batch = sample(&spec, "eq", 100_000, 21).unwrap();
        let plug_in = analytic_tc(&empirical_covariance(&batch.data)).unwrap();
        assert!((plug_in - 2.799_711_229_665_979).abs() < 0.05, "plug-in TC {plug_in}");
    }

    #[test]
    fn json_layout() {
        let spec = GaussianSpec::from_sigma(equicorrelated(2, 0.5), 4).unwrap();
        let entry = MatrixEntry { id: matrix_id(3), spec };
        let v = serde_json::to_value(&entry).unwrap();
        assert_eq!(v["id"], "m3");
        assert_eq!(v["dim"], 2);
        assert_eq!(v["sigma"], serde_json::json!([[1.0, 0.5], [0.5, 1.0]]));
        assert_eq!(v["seed"], 4);
        assert!(v.get("jitter").is_none());
        let back: MatrixEntry = serde_json::from_value(v).unwrap();
        assert_eq!(back, entry);
        assert_eq!(matrix_index("m12"), Some(12));
    }

    fn random_correlation(dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seed::rng(seed);
        let a = DMatrix::from_fn(dim, dim + 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        normalize_to_correlation(&(&a * a.transpose())).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn log_det_additivity(seed in any::<u64>(), dim in 2usize..=8, cut in 1usize..8) {
            let cut = cut.min(dim - 1);
            let sigma = random_correlation(dim, seed);
            let a: Vec<usize> = (0..cut).collect();
            let b: Vec<usize> = (cut..dim).collect();
            let whole = analytic_tc(&sigma).unwrap();
            let parts = analytic_tc(&principal_submatrix(&sigma, &a)).unwrap()
                + analytic_tc(&principal_submatrix(&sigma, &b)).unwrap()
                + analytic_mi_blocks(&sigma, &a, &b).unwrap();
            prop_assert!((whole - parts).abs() < 1e-9);
        }

        #[test]
        fn generator_hits_target(seed in any::<u64>(), target in 0.0f64..10.0) {
            let spec = gen_spec_with_target_tc(4, target, seed).unwrap();
            prop_assert!((spec.true_tc - target).abs() <= TARGET_TOLERANCE);
            spec.validate().unwrap();
        }
    }
}
