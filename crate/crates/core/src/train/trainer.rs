use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::autodiff::Tape;
use crate::data::{crop, pad_to, Augment, CropRecord, NoAugment, Sample};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Real, Tensor};

use super::adam::{Adam, AdamConfig};
use super::loss::bce_loss;
use super::metrics::{
    confusion, percent, roc_auc, scalar_metrics, scored_pixels, ConfusionCounts, Roc, ScalarMetrics,
};

pub const THREADS_ENV: &str = "MCUNET_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    /// Images per optimizer step; gradients are averaged across the batch.
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle of the training split.
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        // Zero is allowed: it freezes the weights, which is useful as a control run.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            ));
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return fail(format!(
                "adam_epsilon must be positive, got {}",
                self.adam_epsilon
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// A sample padded to a size the network accepts.
#[derive(Clone, Debug)]
pub struct Prepared<T: Real> {
    pub id: String,
    pub image: Tensor<T>,
    pub label: Tensor<T>,
    /// FOV restricted to the unpadded region.
    pub loss_mask: Tensor<T>,
    pub record: CropRecord,
}

pub fn prepare<T: Real>(model: &Model<T>, sample: &Sample<T>) -> Result<Prepared<T>> {
    let s = sample.image.shape();
    let (h, w) = model.aligned_dims(s.h, s.w);
    let (image, record) = pad_to(&sample.image, h, w)?;
    let (label, _) = pad_to(&sample.label, h, w)?;
    let fov = sample
        .fov_mask
        .clone()
        .unwrap_or_else(|| Tensor::ones([1, 1, s.h, s.w]));
    let (loss_mask, _) = pad_to(&fov, h, w)?;
    Ok(Prepared {
        id: sample.id.clone(),
        image,
        label,
        loss_mask,
        record,
    })
}

/// Forward and backward on one prepared sample. Returns the loss and the
/// gradient of every trainable tensor.
pub fn loss_and_grads<T: Real>(
    model: &mut Model<T>,
    p: &Prepared<T>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let bindings = model.bind(&mut tape, true);
    let x = tape.constant(p.image.clone());
    let out = model.forward(&mut tape, &bindings, &x)?;
    let loss = bce_loss(&mut tape, &out, &p.label, Some(&p.loss_mask))?;
    let value = loss.value().item()?.as_f64();
    let mut grads = tape.backward(&loss)?;
    let mut out = BTreeMap::new();
    for (name, var) in bindings.iter() {
        let g = grads
            .take(var)
            .ok_or_else(|| Error::Autodiff(format!("no gradient reached {name}")))?;
        out.insert(name.to_string(), g);
    }
    Ok((value, out))
}

/// One optimizer step over `batch`; returns the mean loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut Adam,
    batch: &[&Prepared<T>],
) -> Result<f64> {
    let step = opt.step_count() + 1;
    let diverged = |e: Error| match e {
        Error::Numeric { .. } => Error::Diverged {
            step,
            detail: e.to_string(),
        },
        other => other,
    };
    model.set_mode(Mode::Train);
    let mut total = 0.0;
    let mut sum: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for p in batch {
        let (loss, grads) = loss_and_grads(model, p).map_err(diverged)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    if batch.len() > 1 {
        let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
        for g in sum.values_mut() {
            *g = g.map(|v| v * scale);
        }
    }
    opt.step(model.params_mut(), &sum)?;
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageEval {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: ScalarMetrics,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    pub counts: ConfusionCounts,
    pub metrics: ScalarMetrics,
    /// Pooled over every evaluated pixel; `None` for a single-class region.
    pub roc: Option<Roc>,
}

pub const METRICS_HEADER: &str = "ACC,SEN,SP,AUC,F1";

impl EvalReport {
    pub fn auc(&self) -> Option<f64> {
        self.roc.as_ref().map(|r| r.auc)
    }

    /// Header plus one row, percent with two decimals.
    pub fn metrics_table(&self) -> String {
        let m = &self.metrics;
        format!(
            "{METRICS_HEADER}\n{},{},{},{},{}\n",
            percent(m.acc),
            percent(m.se),
            percent(m.sp),
            percent(self.auc()),
            percent(m.f1)
        )
    }

    pub fn per_image_csv(&self) -> String {
        let mut out = format!("id,{METRICS_HEADER},tp,tn,fp,fn\n");
        for e in &self.per_image {
            let m = &e.metrics;
            let c = &e.counts;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                e.id,
                percent(m.acc),
                percent(m.se),
                percent(m.sp),
                percent(e.auc),
                percent(m.f1),
                c.tp,
                c.tn,
                c.fp,
                c.fn_
            );
        }
        out
    }
}

/// Worker count for evaluation: `MCUNET_THREADS` if set, else all cores.
pub fn eval_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Eval-mode prediction cropped back to the sample's own size.
pub fn predict_sample<T: Real>(model: &Model<T>, p: &Prepared<T>) -> Result<Tensor<T>> {
    crop(&model.predict(&p.image)?, &p.record)
}

/// Evaluates inside each sample's FOV mask, or over all pixels without one.
type ScoredImage = (ImageEval, Vec<(f64, bool)>);

/// Images are processed concurrently; results are reduced in input order.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    samples: &[Sample<T>],
    threshold: f64,
) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads()?)
        .build()
        .map_err(|e| Error::Config(format!("evaluation thread pool: {e}")))?;
    let results: Vec<Result<ScoredImage>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let prepared = prepare(model, s)?;
                let pred = predict_sample(model, &prepared)?;
                let mask = s.fov_mask.as_ref();
                let counts = confusion(&pred, &s.label, mask, threshold)?;
                let scored = scored_pixels(&pred, &s.label, mask)?;
                let auc = roc_auc(&scored)?.map(|r| r.auc);
                let eval = ImageEval {
                    id: s.id.clone(),
                    counts,
                    metrics: scalar_metrics(&counts),
                    auc,
                };
                Ok((eval, scored))
            })
            .collect()
    });
    let mut per_image = Vec::with_capacity(samples.len());
    let mut counts = ConfusionCounts::default();
    let mut pooled = Vec::new();
    for r in results {
        let (eval, scored) = r?;
        counts += eval.counts;
        pooled.extend(scored);
        per_image.push(eval);
    }
    Ok(EvalReport {
        per_image,
        counts,
        metrics: scalar_metrics(&counts),
        roc: roc_auc(&pooled)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
    /// Test-split evaluation; `None` when the split is empty.
    pub eval: Option<EvalReport>,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,mean_loss,acc,se,sp,f1,auc";

fn fraction(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| v.to_string())
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let (m, auc) = match &self.eval {
            Some(e) => (e.metrics, e.auc()),
            None => (ScalarMetrics::default(), None),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.mean_loss,
            fraction(m.acc),
            fraction(m.se),
            fraction(m.sp),
            fraction(m.f1),
            fraction(auc)
        )
    }
}

pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Sample<T>],
    test_set: &[Sample<T>],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    train_with(model, train_set, test_set, config, &NoAugment, on_epoch)
}

/// Trains for `config.epochs` epochs. Each epoch visits the training split
/// in a seeded shuffled order, then evaluates the test split.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    train_set: &[Sample<T>],
    test_set: &[Sample<T>],
    config: &TrainConfig,
    augment: &dyn Augment<T>,
    mut on_epoch: impl FnMut(&EpochLog, &Model<T>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut opt = Adam::new(config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut step_losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| prepare(model, &augment.apply(train_set[i].clone(), epoch)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Prepared<T>> = batch.iter().collect();
            step_losses.push(train_step(model, &mut opt, &refs)?);
        }
        model.set_mode(Mode::Eval);
        let eval = if test_set.is_empty() {
            None
        } else {
            Some(evaluate(model, test_set, config.threshold)?)
        };
        let log = EpochLog {
            epoch,
            mean_loss: step_losses.iter().sum::<f64>() / step_losses.len() as f64,
            step_losses,
            eval,
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}
