//! Optimization, early stopping, gradient checking and the per-fold
//! training driver.

use std::collections::BTreeMap;

use memfuse_core::corpus::Dataset;
use memfuse_core::features::FeatureBundle;
use memfuse_core::metrics::{rmse, spearman};
use memfuse_core::splits::NestedSplits;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FusionConfig, TrainConfig};
use crate::model::{FusionInput, FusionModel, StreamDims};
use crate::tape::{LossParts, Tensor};
use crate::FusionError;

type Result<T> = std::result::Result<T, FusionError>;

/// Adam state for the trainable parameters of one model.
pub struct Adam {
    cfg: TrainConfig,
    m: BTreeMap<usize, Tensor>,
    v: BTreeMap<usize, Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update; `grads` maps parameter index to gradient.
    pub fn step(&mut self, model: &mut FusionModel, grads: &BTreeMap<usize, Tensor>) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (&i, g) in grads {
            let m = self.m.entry(i).or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v.entry(i).or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let mut w = model.params()[i].value.clone();
            for j in 0..g.data.len() {
                m.data[j] = b1 * m.data[j] + (1.0 - b1) * g.data[j];
                v.data[j] = b2 * v.data[j] + (1.0 - b2) * g.data[j] * g.data[j];
                let mh = m.data[j] / c1;
                let vh = v.data[j] / c2;
                w.data[j] -= self.cfg.learning_rate * mh / (vh.sqrt() + self.cfg.adam_eps);
            }
            model.set_param_value(i, w);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub parts: LossParts,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Gradients of the composite loss for every trainable parameter.
pub fn loss_and_gradients(
    model: &FusionModel,
    inputs: &[&FusionInput],
    targets: &[f64],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, LossParts, BTreeMap<usize, Tensor>)> {
    let mut f = model.forward(inputs, true, dropout_rng)?;
    let (loss, parts) = model.loss(&mut f, targets)?;
    let value = f.tape.value(loss).data[0];
    let grads = f.tape.backward(loss);
    let mut out = BTreeMap::new();
    for i in model.trainable_indices() {
        let p = &model.params()[i].value;
        let g = grads
            .get(f.params[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.rows, p.cols));
        out.insert(i, g);
    }
    Ok((value, parts, out))
}

/// Forward, backward, global-norm clipping and one Adam update.
pub fn train_step(
    model: &mut FusionModel,
    opt: &mut Adam,
    inputs: &[&FusionInput],
    targets: &[f64],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepStats> {
    let (loss, parts, mut grads) = loss_and_gradients(model, inputs, targets, dropout_rng)?;
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if !loss.is_finite() || !norm.is_finite() {
        return Err(FusionError::NonFiniteLoss(format!(
            "loss {loss}, gradient norm {norm}, batch of {}",
            inputs.len()
        )));
    }
    let clip = opt.cfg.clip_norm;
    if norm > clip {
        let s = clip / norm;
        grads.values_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x *= s));
    }
    opt.step(model, &grads);
    Ok(StepStats {
        loss,
        parts,
        grad_norm: norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_srcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_valid_srcc: f64,
}

fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    // a one-element batch has no correlation; fold it into its neighbour
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Trains on `train`, early-stopping on validation SRCC; leaves `model` at
/// the best epoch's parameters.
pub fn train_model(
    model: &mut FusionModel,
    train: (&[FusionInput], &[f64]),
    valid: (&[FusionInput], &[f64]),
) -> Result<TrainOutcome> {
    let tcfg = model.config().train();
    let (xs, ys) = train;
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(FusionError::BatchTooSmall { n: xs.len() });
    }
    if valid.0.len() < 2 || valid.0.len() != valid.1.len() {
        return Err(FusionError::BatchTooSmall { n: valid.0.len() });
    }
    let valid_refs: Vec<&FusionInput> = valid.0.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = Adam::new(tcfg);
    let trainable = model.trainable_indices();
    let snapshot =
        |m: &FusionModel| -> Vec<Tensor> { trainable.iter().map(|&i| m.params()[i].value.clone()).collect() };

    let mut best = (0usize, f64::NEG_INFINITY, snapshot(model));
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n_batches = 0;
        for batch in batches(&order, tcfg.batch_size) {
            let bx: Vec<&FusionInput> = batch.iter().map(|&i| &xs[i]).collect();
            let by: Vec<f64> = batch.iter().map(|&i| ys[i]).collect();
            let stats = train_step(model, &mut opt, &bx, &by, Some(&mut rng)).map_err(|e| match e {
                FusionError::NonFiniteLoss(d) => FusionError::NonFiniteLoss(format!("epoch {epoch}: {d}")),
                other => other,
            })?;
            total += stats.loss;
            n_batches += 1;
        }
        let preds = model.predict(&valid_refs)?;
        let srcc = spearman(&preds, valid.1).map_err(|e| FusionError::Metric(e.to_string()))?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / n_batches as f64,
            valid_srcc: srcc,
        });
        if srcc > best.1 {
            best = (epoch, srcc, snapshot(model));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.early_stopping_rounds {
                break;
            }
        }
    }
    for (&i, t) in trainable.iter().zip(best.2) {
        model.set_param_value(i, t);
    }
    Ok(TrainOutcome {
        history,
        best_epoch: best.0,
        best_valid_srcc: best.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub n_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

pub const GRADCHECK_STEP: f64 = 1e-5;

/// Compares analytic gradients of the composite loss with central finite
/// differences for every element of every trainable parameter. Relative
/// error uses the denominator `max(|a|, |b|, 1e-8)`.
pub fn check_gradients(
    model: &FusionModel,
    inputs: &[&FusionInput],
    targets: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if model.has_lora() && model.config().lora_dropout > 0.0 {
        return Err(FusionError::InvalidConfig(
            "gradient checking requires lora_dropout = 0".into(),
        ));
    }
    let (_, _, grads) = loss_and_gradients(model, inputs, targets, None)?;
    let loss_at = |m: &FusionModel| -> Result<f64> {
        let mut f = m.forward(inputs, false, None)?;
        let (l, _) = m.loss(&mut f, targets)?;
        Ok(f.tape.value(l).data[0])
    };
    let mut probe = model.clone();
    let mut entries = Vec::new();
    for (&i, g) in &grads {
        let base = model.params()[i].value.clone();
        let mut worst = 0.0f64;
        for j in 0..base.data.len() {
            let mut w = base.clone();
            w.data[j] = base.data[j] + GRADCHECK_STEP;
            probe.set_param_value(i, w.clone());
            let up = loss_at(&probe)?;
            w.data[j] = base.data[j] - GRADCHECK_STEP;
            probe.set_param_value(i, w);
            let down = loss_at(&probe)?;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = g.data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        probe.set_param_value(i, base);
        entries.push(GradCheckEntry {
            param: model.params()[i].name.clone(),
            n_checked: g.data.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    if let Some(bad) = entries.iter().find(|e| e.max_rel_error > tolerance) {
        return Err(FusionError::GradCheckFailure {
            param: bad.param.clone(),
            rel_error: bad.max_rel_error,
        });
    }
    Ok(GradCheckReport { entries, max_rel_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionFold {
    pub outer: usize,
    pub outcome: TrainOutcome,
    pub test_ids: Vec<String>,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub srcc: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct FusionRun {
    pub folds: Vec<FusionFold>,
    pub models: Vec<FusionModel>,
}

impl FusionRun {
    pub fn mean_srcc(&self) -> f64 {
        self.folds.iter().map(|f| f.srcc).sum::<f64>() / self.folds.len() as f64
    }
}

/// Trains one model per outer fold on inner split 0 (train / early-stopping
/// validation) and evaluates it on the outer test ids. `bundles_per_outer[o]`
/// must be the bundles assembled for outer fold `o`, inner split 0.
pub fn train_fusion(
    ds: &Dataset,
    splits: &NestedSplits,
    bundles_per_outer: &[BTreeMap<String, FeatureBundle>],
    cfg: &FusionConfig,
) -> Result<FusionRun> {
    cfg.validate()?;
    if bundles_per_outer.len() != splits.outer_folds.len() {
        return Err(FusionError::InvalidConfig(format!(
            "{} bundle sets for {} outer folds",
            bundles_per_outer.len(),
            splits.outer_folds.len()
        )));
    }
    let target = splits.target;
    let mut folds = Vec::new();
    let mut models = Vec::new();
    for (o, fold) in splits.outer_folds.iter().enumerate() {
        let bundles = &bundles_per_outer[o];
        let inner = fold
            .inner_splits
            .first()
            .ok_or_else(|| FusionError::InvalidConfig(format!("outer fold {o} has no inner split")))?;
        let first = inner
            .train_ids
            .first()
            .and_then(|id| bundles.get(id))
            .ok_or_else(|| FusionError::StreamMismatch(format!("no bundles for outer fold {o}")))?;
        let generated = cfg.generated_embedding.then_some(cfg.prompt);
        let dims = StreamDims::from_bundle(first, generated);
        let mut model = FusionModel::new(cfg, dims)?;
        let build = |ids: &[String]| -> Result<(Vec<FusionInput>, Vec<f64>)> {
            let mut xs = Vec::with_capacity(ids.len());
            let mut ys = Vec::with_capacity(ids.len());
            for id in ids {
                let rec = ds
                    .get(id)
                    .ok_or_else(|| FusionError::StreamMismatch(format!("unknown record {id}")))?;
                let b = bundles
                    .get(id)
                    .ok_or_else(|| FusionError::StreamMismatch(format!("no bundle for {id}")))?;
                xs.push(model.prepare(&rec.title, b, cfg.prompt)?);
                ys.push(rec.target(target));
            }
            Ok((xs, ys))
        };
        let (tx, ty) = build(&inner.train_ids)?;
        let (vx, vy) = build(&inner.valid_ids)?;
        let (sx, sy) = build(&fold.test_ids)?;
        let outcome = train_model(&mut model, (&tx, &ty), (&vx, &vy))?;
        let refs: Vec<&FusionInput> = sx.iter().collect();
        let predictions = model.predict(&refs)?;
        let srcc = spearman(&predictions, &sy).map_err(|e| FusionError::Metric(e.to_string()))?;
        let err = rmse(&predictions, &sy).map_err(|e| FusionError::Metric(e.to_string()))?;
        folds.push(FusionFold {
            outer: o,
            outcome,
            test_ids: fold.test_ids.clone(),
            predictions,
            targets: sy,
            srcc,
            rmse: err,
        });
        models.push(model);
    }
    Ok(FusionRun { folds, models })
}
