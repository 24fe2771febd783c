//! Supervised corrector: per-estimator under-complete autoencoders whose bottlenecks
//! feed a small regressor that predicts the true TC from estimate sequences.
//!
//! Training runs in two stages. Pretraining fits each autoencoder on its own head's
//! sequences. Fine-tuning then minimizes the joint objective
//! `sum_h recon_h + corr(y_pred, y_true)` end to end.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_by_matrix, FeatureStats, SequenceRecord, SEQ_LEN};
use crate::error::{Error, Result};
use crate::mi::EstimatorKind;
use crate::nn::{hcat, Activation, Adam, AdamConfig, Bound, Graph, Mlp, Var};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    Mse,
    L1,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::L1 => "l1",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "l1" | "mae" => Ok(LossKind::L1),
            other => Err(Error::InvalidArgument(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorConfig {
    pub heads: Vec<EstimatorKind>,
    pub encoder_hidden: usize,
    pub bottleneck: usize,
    pub regressor_hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        CorrectorConfig {
            heads: vec![EstimatorKind::Mine],
            encoder_hidden: 16,
            bottleneck: 8,
            regressor_hidden: vec![32, 16],
            pretrain_epochs: 200,
            finetune_epochs: 300,
            batch: 64,
            lr: 1e-3,
            loss: LossKind::Mse,
            seed: 0,
        }
    }
}

impl CorrectorConfig {
    pub fn with_heads(heads: &[EstimatorKind]) -> Self {
        CorrectorConfig {
            heads: heads.to_vec(),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("corrector needs at least one head".into()));
        }
        let mut seen = self.heads.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.heads.len() {
            return Err(Error::Config("corrector heads must be distinct".into()));
        }
        if self.bottleneck == 0 || self.bottleneck >= SEQ_LEN {
            return Err(Error::Config(format!(
                "bottleneck {} must be positive and narrower than the {SEQ_LEN}-point input",
                self.bottleneck
            )));
        }
        if self.encoder_hidden == 0 || self.batch == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("encoder width, batch and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: EstimatorKind,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub kind: EstimatorKind,
    #[serde(flatten)]
    pub stats: FeatureStats,
}

/// Fixed affine map from the regressor output to nats: `y = mean + std * r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub const IDENTITY: TargetScale = TargetScale { mean: 0.0, std: 1.0 };
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_examples: usize,
    pub skipped_examples: usize,
    /// Dimension of the samples the training sequences were estimated from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectorModel {
    pub heads: Vec<Head>,
    pub regressor: Mlp,
    pub loss_kind: LossKind,
    pub feature_stats: Vec<HeadStats>,
    pub target_scale: TargetScale,
    pub training_meta: TrainingMeta,
}

/// Per-head inputs for a set of matrices, aligned by row.
#[derive(Clone, Debug)]
pub struct Examples {
    pub matrix_ids: Vec<String>,
    pub inputs: Vec<Array2<f64>>,
    pub labels: Array2<f64>,
    /// Raw estimator outputs per head, for baseline comparisons.
    pub raw: Vec<Vec<f64>>,
    pub skipped: usize,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.labels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.nrows() == 0
    }

    fn subset(&self, rows: &[usize]) -> (Vec<Array2<f64>>, Array2<f64>) {
        (
            self.inputs.iter().map(|x| x.select(Axis(0), rows)).collect(),
            self.labels.select(Axis(0), rows),
        )
    }
}

/// One fine-tuning epoch: mean of each loss component over the epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub recon: Vec<f64>,
    pub corr: f64,
    pub test_mae: Option<f64>,
    pub test_mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingHistory {
    /// Per head, full-train reconstruction MSE before training and after each epoch.
    pub pretrain: Vec<Vec<f64>>,
    pub finetune: Vec<EpochLoss>,
}

fn vec_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CorrectorModel {
    /// Untrained model with identity feature and target scaling.
    pub fn new(config: &CorrectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, seed::stream::CORRECTOR, 0));
        let heads = config
            .heads
            .iter()
            .map(|&kind| {
                Ok(Head {
                    kind,
                    encoder: Mlp::new(&[SEQ_LEN, config.encoder_hidden, config.bottleneck], Activation::Relu, &mut rng)?,
                    decoder: Mlp::new(&[config.bottleneck, config.encoder_hidden, SEQ_LEN], Activation::Relu, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let reg_dims: Vec<usize> = std::iter::once(config.bottleneck * config.heads.len())
            .chain(config.regressor_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let regressor = Mlp::new(&reg_dims, Activation::Relu, &mut rng)?;
        Ok(CorrectorModel {
            feature_stats: config
                .heads
                .iter()
                .map(|&kind| HeadStats {
                    kind,
                    stats: FeatureStats {
                        mean: vec![0.0; SEQ_LEN],
                        std: vec![0.0; SEQ_LEN],
                    },
                })
                .collect(),
            heads,
            regressor,
            loss_kind: config.loss,
            target_scale: TargetScale::IDENTITY,
            training_meta: TrainingMeta {
                seed: config.seed,
                batch: config.batch,
                lr: config.lr,
                ..TrainingMeta::default()
            },
        })
    }

    pub fn head_kinds(&self) -> Vec<EstimatorKind> {
        self.heads.iter().map(|h| h.kind).collect()
    }

    /// Fits per-head input standardization on `records`.
    pub fn fit_feature_stats(&mut self, records: &[SequenceRecord]) -> Result<()> {
        for hs in &mut self.feature_stats {
            let seqs: Vec<&[f64]> = records
                .iter()
                .filter(|r| r.estimator == hs.kind)
                .map(|r| r.sequence.as_slice())
                .collect();
            if seqs.is_empty() {
                return Err(Error::Config(format!("no training records for head {}", hs.kind)));
            }
            hs.stats = FeatureStats::fit(&seqs)?;
        }
        Ok(())
    }

    /// Aligns records into per-head inputs; matrices missing a head are skipped.
    pub fn examples(&self, records: &[SequenceRecord]) -> Result<Examples> {
        let groups = group_by_matrix(records);
        let kinds = self.head_kinds();
        let mut ids = Vec::new();
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); kinds.len()];
        let mut raw: Vec<Vec<f64>> = vec![Vec::new(); kinds.len()];
        let mut labels = Vec::new();
        let mut skipped = 0;
        for (id, by_kind) in &groups {
            let Some(recs) = kinds.iter().map(|k| by_kind.get(k)).collect::<Option<Vec<_>>>() else {
                skipped += 1;
                continue;
            };
            for (h, r) in recs.iter().enumerate() {
                rows[h].extend(self.feature_stats[h].stats.apply(&r.sequence)?);
                raw[h].push(r.raw_estimate());
            }
            labels.push(recs[0].true_tc);
            ids.push(id.to_string());
        }
        if skipped > 0 {
            log::info!("skipped {skipped} matrices lacking a sequence for some head");
        }
        let n = ids.len();
        Ok(Examples {
            matrix_ids: ids,
            inputs: rows
                .into_iter()
                .map(|r| Array2::from_shape_vec((n, SEQ_LEN), r).expect("row count"))
                .collect(),
            labels: Array2::from_shape_vec((n, 1), labels).expect("row count"),
            raw,
            skipped,
        })
    }

    fn recon_mse(head: &Head, x: &Array2<f64>) -> Result<f64> {
        let r = head.decoder.forward(&head.encoder.forward(x)?)?;
        Ok((&r - x).mapv(|v| v * v).mean().unwrap_or(0.0))
    }

    /// Trains every autoencoder on its head's sequences. Feature statistics are fitted
    /// here from the same records.
    pub fn pretrain(&mut self, records: &[SequenceRecord], epochs: usize) -> Result<Vec<Vec<f64>>> {
        self.fit_feature_stats(records)?;
        self.training_meta.pretrain_epochs = epochs;
        let batch = self.training_meta.batch.max(1);
        let adam = AdamConfig::with_lr(self.training_meta.lr);
        let mut history = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter_mut().enumerate() {
            let stats = &self.feature_stats[h].stats;
            let rows: Vec<f64> = records
                .iter()
                .filter(|r| r.estimator == head.kind)
                .map(|r| stats.apply(&r.sequence))
                .collect::<Result<Vec<_>>>()?
                .concat();
            let n = rows.len() / SEQ_LEN;
            let x = Array2::from_shape_vec((n, SEQ_LEN), rows).expect("row count");
            let mut opt_e = Adam::new(&head.encoder, adam);
            let mut opt_d = Adam::new(&head.decoder, adam);
            let mut curve = vec![Self::recon_mse(head, &x)?];
            let mut order: Vec<usize> = (0..n).collect();
            for epoch in 0..epochs {
                let key = (h as u64) << 32 | epoch as u64;
                order.shuffle(&mut seed::rng(seed::derive(self.training_meta.seed, seed::stream::CORRECTOR, 1 + key)));
                for chunk in order.chunks(batch) {
                    let xb = x.select(Axis(0), chunk);
                    let mut g = Graph::new();
                    let pe = head.encoder.bind(&mut g);
                    let pd = head.decoder.bind(&mut g);
                    let xv = g.leaf(xb);
                    let z = head.encoder.forward_on(&mut g, &pe, xv)?;
                    let r = head.decoder.forward_on(&mut g, &pd, z)?;
                    let loss = g.mse(r, xv)?;
                    let grads = g.backward(loss)?;
                    let (ge, gd) = (pe.grads(&head.encoder, &grads), pd.grads(&head.decoder, &grads));
                    opt_e.step(&mut head.encoder, &ge)?;
                    opt_d.step(&mut head.decoder, &gd)?;
                }
                let mse = Self::recon_mse(head, &x)?;
                if !mse.is_finite() {
                    return Err(Error::Diverged {
                        iteration: epoch,
                        detail: format!("{} autoencoder reconstruction is {mse}", head.kind),
                    });
                }
                curve.push(mse);
            }
            history.push(curve);
        }
        Ok(history)
    }

    fn corr_loss(&self, g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
        match self.loss_kind {
            LossKind::Mse => g.mse(pred, truth),
            LossKind::L1 => g.mae(pred, truth),
        }
    }

    /// Joint fine-tuning on aligned examples. When `monitor` is given, its MAE and MSE
    /// are recorded after every epoch.
    pub fn finetune(&mut self, train: &Examples, epochs: usize, monitor: Option<&Examples>) -> Result<Vec<EpochLoss>> {
        if train.is_empty() {
            return Err(Error::Config("no complete training examples for fine-tuning".into()));
        }
        let labels: Vec<f64> = train.labels.iter().copied().collect();
        let (mean, std) = vec_mean_std(&labels);
        self.target_scale = TargetScale {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        };
        self.training_meta.finetune_epochs = epochs;
        self.training_meta.train_examples = train.len();
        self.training_meta.skipped_examples = train.skipped;
        let batch = self.training_meta.batch.max(1);
        let adam = AdamConfig::with_lr(self.training_meta.lr);
        let mut opt_enc: Vec<Adam> = self.heads.iter().map(|h| Adam::new(&h.encoder, adam)).collect();
        let mut opt_dec: Vec<Adam> = self.heads.iter().map(|h| Adam::new(&h.decoder, adam)).collect();
        let mut opt_reg = Adam::new(&self.regressor, adam);
        let n_heads = self.heads.len();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut seed::rng(seed::derive(
                self.training_meta.seed,
                seed::stream::CORRECTOR,
                (1 << 48) | epoch as u64,
            )));
            let mut sums = vec![0.0; n_heads + 2];
            for chunk in order.chunks(batch) {
                let (xs, y) = train.subset(chunk);
                let mut g = Graph::new();
                let pe: Vec<Bound> = self.heads.iter().map(|h| h.encoder.bind(&mut g)).collect();
                let pd: Vec<Bound> = self.heads.iter().map(|h| h.decoder.bind(&mut g)).collect();
                let pr = self.regressor.bind(&mut g);
                let mut codes = Vec::with_capacity(n_heads);
                let mut recon = Vec::with_capacity(n_heads);
                for (h, x) in xs.into_iter().enumerate() {
                    let xv = g.leaf(x);
                    let z = self.heads[h].encoder.forward_on(&mut g, &pe[h], xv)?;
                    let r = self.heads[h].decoder.forward_on(&mut g, &pd[h], z)?;
                    recon.push(g.mse(r, xv)?);
                    codes.push(z);
                }
                let cat = g.concat_cols(&codes)?;
                let out = self.regressor.forward_on(&mut g, &pr, cat)?;
                let scaled = g.scale(out, self.target_scale.std);
                let pred = g.shift(scaled, self.target_scale.mean);
                let truth = g.leaf(y);
                let corr = self.corr_loss(&mut g, pred, truth)?;
                let mut total = corr;
                for &r in &recon {
                    total = g.add(total, r)?;
                }
                let value = g.scalar(total);
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        iteration: epoch,
                        detail: format!("fine-tune loss is {value}"),
                    });
                }
                let w = chunk.len() as f64 / train.len() as f64;
                for (h, &r) in recon.iter().enumerate() {
                    sums[h] += w * g.scalar(r);
                }
                sums[n_heads] += w * g.scalar(corr);
                sums[n_heads + 1] += w * value;
                let grads = g.backward(total)?;
                for h in 0..n_heads {
                    let head = &mut self.heads[h];
                    let (ge, gd) = (pe[h].grads(&head.encoder, &grads), pd[h].grads(&head.decoder, &grads));
                    opt_enc[h].step(&mut head.encoder, &ge)?;
                    opt_dec[h].step(&mut head.decoder, &gd)?;
                }
                let gr = pr.grads(&self.regressor, &grads);
                opt_reg.step(&mut self.regressor, &gr)?;
            }
            let (test_mae, test_mse) = match monitor {
                Some(m) if !m.is_empty() => {
                    let pred = self.predict_examples(m)?;
                    let all = metrics(&m.labels.iter().copied().zip(pred).collect::<Vec<_>>());
                    (Some(all.mae), Some(all.mse))
                }
                _ => (None, None),
            };
            history.push(EpochLoss {
                epoch,
                total: sums[n_heads + 1],
                recon: sums[..n_heads].to_vec(),
                corr: sums[n_heads],
                test_mae,
                test_mse,
            });
        }
        Ok(history)
    }

    fn predict_normalized(&self, xs: &[Array2<f64>]) -> Result<Vec<f64>> {
        let codes = self
            .heads
            .iter()
            .zip(xs)
            .map(|(h, x)| h.encoder.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array2<f64>> = codes.iter().collect();
        let out = self.regressor.forward(&hcat(&refs)?)?;
        Ok(out.iter().map(|r| self.target_scale.mean + self.target_scale.std * r).collect())
    }

    /// Predictions for aligned examples, in row order.
    pub fn predict_examples(&self, ex: &Examples) -> Result<Vec<f64>> {
        if ex.inputs.len() != self.heads.len() {
            return Err(Error::InvalidArgument("examples do not match model heads".into()));
        }
        if ex.is_empty() {
            return Ok(Vec::new());
        }
        self.predict_normalized(&ex.inputs)
    }

    /// Corrected TC from one raw sequence per head, in head order.
    pub fn predict(&self, sequences: &[Vec<f64>]) -> Result<f64> {
        if sequences.len() != self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "model has {} heads, got {} sequences",
                self.heads.len(),
                sequences.len()
            )));
        }
        let xs = sequences
            .iter()
            .zip(&self.feature_stats)
            .map(|(s, hs)| {
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("sequence has non-finite values".into()));
                }
                let row = hs.stats.apply(s)?;
                Ok(Array2::from_shape_vec((1, SEQ_LEN), row).expect("validated length"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.predict_normalized(&xs)?[0])
    }

    /// Per-level error table on `records`; matrices lacking a head are skipped.
    pub fn evaluate(&self, records: &[SequenceRecord]) -> Result<Vec<LevelMetrics>> {
        let ex = self.examples(records)?;
        if ex.is_empty() {
            return Err(Error::InvalidArgument("no complete test examples".into()));
        }
        let pred = self.predict_examples(&ex)?;
        Ok(metrics_by_level(&ex.labels.iter().copied().zip(pred).collect::<Vec<_>>()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: CorrectorModel = serde_json::from_str(text)?;
        let width = model.heads.iter().map(|h| h.encoder.output_dim()).sum::<usize>();
        if model.heads.is_empty()
            || model.regressor.input_dim() != width
            || model.feature_stats.len() != model.heads.len()
            || model.heads.iter().any(|h| h.encoder.input_dim() != SEQ_LEN || h.encoder.output_dim() >= SEQ_LEN)
        {
            return Err(Error::InvalidArgument("inconsistent corrector model file".into()));
        }
        Ok(model)
    }
}

/// Builds, pretrains and fine-tunes a corrector on `train` records.
pub fn train_corrector(
    train: &[SequenceRecord],
    config: &CorrectorConfig,
    monitor: Option<&[SequenceRecord]>,
) -> Result<(CorrectorModel, TrainingHistory)> {
    let mut model = CorrectorModel::new(config)?;
    let pretrain = model.pretrain(train, config.pretrain_epochs)?;
    let ex = model.examples(train)?;
    let mon = monitor.map(|m| model.examples(m)).transpose()?;
    let finetune = model.finetune(&ex, config.finetune_epochs, mon.as_ref())?;
    Ok((model, TrainingHistory { pretrain, finetune }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    /// Rounded true TC, or `None` for the aggregate row.
    pub level: Option<i64>,
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    pub bias: f64,
}

/// Error metrics over `(truth, prediction)` pairs.
pub fn metrics(pairs: &[(f64, f64)]) -> LevelMetrics {
    let n = pairs.len();
    let nf = n.max(1) as f64;
    LevelMetrics {
        level: None,
        n,
        mae: pairs.iter().map(|(t, p)| (p - t).abs()).sum::<f64>() / nf,
        mse: pairs.iter().map(|(t, p)| (p - t).powi(2)).sum::<f64>() / nf,
        bias: pairs.iter().map(|(t, p)| p - t).sum::<f64>() / nf,
    }
}

/// One row per rounded true-TC level, followed by the aggregate row.
pub fn metrics_by_level(pairs: &[(f64, f64)]) -> Vec<LevelMetrics> {
    let mut levels: BTreeMap<i64, Vec<(f64, f64)>> = BTreeMap::new();
    for &(t, p) in pairs {
        levels.entry(t.round() as i64).or_default().push((t, p));
    }
    let mut rows: Vec<LevelMetrics> = levels
        .into_iter()
        .map(|(level, v)| LevelMetrics {
            level: Some(level),
            ..metrics(&v)
        })
        .collect();
    rows.push(metrics(pairs));
    rows
}

/// Error table of the uncorrected estimator (`raw_estimate`) on records of `kind`.
pub fn estimator_metrics(records: &[SequenceRecord], kind: EstimatorKind) -> Vec<LevelMetrics> {
    let pairs: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.estimator == kind)
        .map(|r| (r.true_tc, r.raw_estimate()))
        .collect();
    metrics_by_level(&pairs)
}
