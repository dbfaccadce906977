//! Supervised and autoregressive training loops.
//!
//! Each optimizer step computes per-sample gradients on independent tapes
//! (in parallel when a rayon pool is available) and sums them in sample
//! order, so results do not depend on the worker count.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use super::optim::AdamW;
use super::{lr_at, Result, TrainConfig, TrainError};
use crate::data::{zscore_apply, zscore_fit, DataError, DatasetSplit, NormalizationStats, SubjectRecord};
use crate::geometry::PatchSet;
use crate::model::{ar_forward, ar_loss, forward, ForwardOptions, ModelError, SimModel};
use crate::tensor::{Graph, Tape, Tensor};

/// One subject as model input: normalized patch tensors of both
/// hemispheres and the standardized label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub left: Tensor,
    pub right: Tensor,
    /// Standardized target; 0 when unlabelled.
    pub target: f64,
    /// Label in original units, NaN when unlabelled.
    pub label: f64,
}

/// Train-split label moments used to standardize regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub norm: NormalizationStats,
    pub label: LabelStats,
}

impl PreparedData {
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Turn normalized-or-raw records into samples with `keep` patches per
/// hemisphere. Records are normalized with `norm`.
pub fn make_samples(
    records: &[&SubjectRecord],
    norm: &NormalizationStats,
    patches: &PatchSet,
    keep: usize,
    label: Option<&LabelStats>,
) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            let z = zscore_apply(r, norm)?;
            let (left, right) = z.patches(patches, keep)?;
            let (target, raw) = match label {
                Some(ls) => {
                    let y = r.label(&ls.name)?;
                    ((y - ls.mean) / ls.std, y)
                }
                None => (0.0, f64::NAN),
            };
            Ok(Sample {
                id: r.subject_id.clone(),
                left,
                right,
                target,
                label: raw,
            })
        })
        .collect()
}

/// Fit feature and label statistics on the train split and build samples
/// for every split.
pub fn prepare_dataset(
    records: &[SubjectRecord],
    split: &DatasetSplit,
    patches: &PatchSet,
    keep: usize,
) -> Result<PreparedData> {
    let by_id: HashMap<&str, &SubjectRecord> =
        records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
    let pick = |ids: &[String]| -> Result<Vec<&SubjectRecord>> {
        ids.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    TrainError::Data(DataError::Invalid(format!("split names unknown subject {id}")))
                })
            })
            .collect()
    };
    let (train, val, test) = (pick(&split.train)?, pick(&split.val)?, pick(&split.test)?);
    let norm = zscore_fit(&train, "train")?;
    let ys: Vec<f64> = train
        .iter()
        .map(|r| r.label(&split.label))
        .collect::<Result<_, _>>()?;
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    let label = LabelStats {
        name: split.label.clone(),
        mean,
        std: if sd > 0.0 { sd } else { 1.0 },
    };
    Ok(PreparedData {
        train: make_samples(&train, &norm, patches, keep, Some(&label))?,
        val: make_samples(&val, &norm, patches, keep, Some(&label))?,
        test: make_samples(&test, &norm, patches, keep, Some(&label))?,
        norm,
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch by validation MAE.
    pub model: SimModel,
    pub best_epoch: Option<usize>,
    pub curves: Vec<EpochRecord>,
    pub test: MetricReport,
    pub val: MetricReport,
}

/// What the autoregressive objective regresses onto.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArTarget {
    /// Position `t` predicts patch `t + 1`.
    NextPatch,
    /// Control: the next-patch rows permuted by a fixed seeded shuffle.
    Permuted(u64),
}

#[derive(Debug, Clone)]
pub struct ArOutcome {
    pub model: SimModel,
    pub curves: Vec<EpochRecord>,
    /// Mean next-patch loss on the training samples before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

enum Objective<'a> {
    Supervised,
    Ar(&'a ArTarget),
}

fn diverged(epoch: usize, e: TrainError) -> TrainError {
    match e {
        TrainError::Model(ModelError::NonFinite(what)) | TrainError::NonFiniteGradient(what) => {
            TrainError::Diverged { epoch, what }
        }
        other => other,
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Rows `1..2n` of the flattened patch sequence, reordered by `perm`.
fn permuted_targets(model: &SimModel, s: &Sample, perm: &[usize]) -> Result<Tensor> {
    let pd = model.config.patch_dim();
    let rows: Vec<&[f64]> = s.left.data().chunks(pd).chain(s.right.data().chunks(pd)).collect();
    let mut data = Vec::with_capacity(perm.len() * pd);
    for &k in perm {
        data.extend_from_slice(rows[k + 1]);
    }
    Ok(Tensor::new([perm.len(), pd], data)?)
}

/// Loss and parameter gradients for one sample.
fn sample_grad(
    model: &SimModel,
    s: &Sample,
    obj: &Objective<'_>,
    opts: ForwardOptions,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let t = &tape;
    let g = &t;
    let nodes = model.bind(&t);
    let l = g.constant(s.left.clone());
    let r = g.constant(s.right.clone());
    let loss = match obj {
        Objective::Supervised => {
            let y = forward(&t, model, &nodes, &l, &r, opts)?;
            let target = Tensor::full([model.config.head_out], s.target);
            g.mse(&y, &g.constant(target))?
        }
        Objective::Ar(ArTarget::NextPatch) => ar_loss(&t, model, &nodes, &l, &r, opts)?,
        Objective::Ar(ArTarget::Permuted(seed)) => {
            let rows = 2 * model.config.seq_patches - 1;
            let pred = ar_forward(&t, model, &nodes, &l, &r, opts)?;
            let head = g.narrow(&pred, 0, 0, rows)?;
            let target = permuted_targets(model, s, &permutation(rows, *seed))?;
            g.mse(&head, &g.constant(target))?
        }
    };
    let value = g.value(&loss).item()?;
    if !value.is_finite() {
        return Err(ModelError::NonFinite("loss".into()).into());
    }
    let grads = tape.backward(loss)?;
    let out = model
        .params()
        .iter()
        .zip(&nodes)
        .map(|(p, v)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}

/// Mean loss over `batch` and the summed-then-averaged gradient.
fn batch_grad(
    model: &SimModel,
    batch: &[&Sample],
    obj: &Objective<'_>,
    opts: ForwardOptions,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let parts: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| sample_grad(model, s, obj, opts))
        .collect::<Result<_>>()?;
    let mut losses = Vec::with_capacity(parts.len());
    let mut sum: Option<Vec<Tensor>> = None;
    for (loss, g) in parts {
        losses.push(loss);
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut sum = sum.unwrap_or_default();
    let k = batch.len() as f64;
    for t in &mut sum {
        for x in t.data_mut() {
            *x /= k;
        }
    }
    Ok((losses, sum))
}

/// One epoch of shuffled mini-batch AdamW. Returns the mean per-sample
/// loss seen during the epoch.
fn run_epoch(
    model: &mut SimModel,
    opt: &mut AdamW,
    samples: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    obj: &Objective<'_>,
) -> Result<f64> {
    let opts = ForwardOptions {
        recompute: cfg.recompute,
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let (losses, grads) = batch_grad(model, &batch, obj, opts)?;
        total += losses.iter().sum::<f64>();
        let mut params: Vec<Tensor> = model.params().iter().map(|p| p.value.as_ref().clone()).collect();
        opt.step(&mut params, &grads, &names, lr)?;
        model.set_all(params)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Predictions in label units for `samples`, as a report.
pub fn evaluate(
    model: &SimModel,
    samples: &[Sample],
    label: &LabelStats,
    split: &str,
) -> Result<MetricReport> {
    let preds: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let y = model.predict(&s.left, &s.right)?;
            Ok(label.mean + label.std * y[0])
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport::new(
        split,
        samples.iter().map(|s| s.id.clone()).collect(),
        preds,
        samples.iter().map(|s| s.label).collect(),
    ))
}

fn std_mse(report: &MetricReport, label: &LabelStats) -> f64 {
    report.mse_mean / (label.std * label.std)
}

pub fn train_supervised(model: SimModel, data: &PreparedData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_supervised_with(model, data, cfg, |_, _| true)
}

/// Supervised training; `hook` runs after every epoch and stops training
/// early by returning `false`.
pub fn train_supervised_with(
    mut model: SimModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&EpochRecord, &SimModel) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);
    let snapshot = |m: &SimModel| -> Vec<Arc<Tensor>> { m.params().iter().map(|p| p.value.clone()).collect() };
    let mut best: (f64, Option<usize>, Vec<Arc<Tensor>>) = (f64::INFINITY, None, snapshot(&model));
    let mut curves = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let train_loss = run_epoch(&mut model, &mut opt, &data.train, cfg, epoch, lr, &Objective::Supervised)
            .map_err(|e| diverged(epoch, e))?;
        let (val_loss, val_mae, score) = if data.val.is_empty() {
            (None, None, train_loss)
        } else {
            let r = evaluate(&model, &data.val, &data.label, "val").map_err(|e| diverged(epoch, e))?;
            (Some(std_mse(&r, &data.label)), Some(r.mae_mean), r.mae_mean)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_mae,
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} train {train_loss:.5} val_mae {}",
            val_mae.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
        if score < best.0 {
            best = (score, Some(epoch), snapshot(&model));
        }
        curves.push(rec);
        if !hook(curves.last().expect("pushed"), &model) {
            break;
        }
    }
    model.set_all(best.2.iter().map(|t| t.as_ref().clone()).collect())?;
    let mut test = evaluate(&model, &data.test, &data.label, "test")?;
    test.curves = curves.clone();
    let mut val = evaluate(&model, &data.val, &data.label, "val")?;
    val.curves = curves.clone();
    Ok(TrainOutcome {
        model,
        best_epoch: best.1,
        curves,
        test,
        val,
    })
}

/// Mean true next-patch loss over `samples`.
pub fn ar_eval(model: &SimModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let tape = crate::tensor::Eager;
            let g = &tape;
            let nodes = model.bind(g);
            let l = g.constant(s.left.clone());
            let r = g.constant(s.right.clone());
            let loss = ar_loss(g, model, &nodes, &l, &r, ForwardOptions::default())?;
            Ok(loss.item()?)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Autoregressive pretraining. A decoder is attached when missing;
/// `heldout` feeds the per-epoch validation loss.
pub fn train_ar(
    mut model: SimModel,
    samples: &[Sample],
    heldout: &[Sample],
    cfg: &TrainConfig,
    target: &ArTarget,
) -> Result<ArOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    if !model.has_decoder() {
        model.attach_decoder(cfg.seed);
    }
    let initial_loss = ar_eval(&model, samples)?;
    let mut opt = AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay);
    let mut curves = Vec::new();
    let obj = Objective::Ar(target);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let train_loss = run_epoch(&mut model, &mut opt, samples, cfg, epoch, lr, &obj)
            .map_err(|e| diverged(epoch, e))?;
        let val_loss = if heldout.is_empty() {
            None
        } else {
            Some(ar_eval(&model, heldout).map_err(|e| diverged(epoch, e))?)
        };
        log::info!("ar epoch {epoch} lr {lr:.3e} train {train_loss:.5}");
        curves.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_mae: None,
        });
    }
    let final_loss = ar_eval(&model, samples)?;
    Ok(ArOutcome {
        model,
        curves,
        initial_loss,
        final_loss,
    })
}
