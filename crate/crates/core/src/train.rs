//! Mini-batch training and sharded evaluation.

use echodepth_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::{KvList, KvMap};
use crate::metrics::{MetricsAccumulator, MetricsReport, RelMode};
use crate::model::{Batch, Model};
use crate::optim::{Adam, AdamConfig};
use crate::params::{apply_stat_updates, Ctx};
use crate::scene::RenderedSample;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Evaluate the validation split after every epoch.
    pub eval_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            eval_val: true,
        }
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> KvList {
        let mut kv = KvList::new();
        kv.push("train.epochs", self.epochs);
        kv.push("train.batch_size", self.batch_size);
        kv.push("train.seed", self.seed);
        kv.push("train.eval_val", self.eval_val);
        kv.extend(&self.adam.to_kv());
        kv
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            epochs: map.get_or("train.epochs", d.epochs)?,
            batch_size: map.get_or("train.batch_size", d.batch_size)?,
            seed: map.get_or("train.seed", d.seed)?,
            eval_val: map.get_or("train.eval_val", d.eval_val)?,
            adam: AdamConfig::from_kv(map)?,
        })
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub report: MetricsReport,
}

pub const CSV_HEADER: &str = "epoch,split,loss,rmse,rel,log10,d1,d2,d3,n_valid";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, r.rmse, r.rel, r.log10, r.delta1, r.delta2, r.delta3, r.n_valid
        )
    }
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    pub final_loss: f64,
}

/// Trains in place. `on_epoch` runs after every epoch with the records so far.
pub fn train(
    model: &mut Model,
    train_set: &[RenderedSample],
    val_set: Option<&[RenderedSample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &[EpochRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam.clone(), &model.store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut steps = 0;
    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = MetricsAccumulator::new(RelMode::Absolute);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&RenderedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_samples(&samples)?;
            let loss = train_step(model, &mut opt, &batch, &mut acc).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged {
                    epoch,
                    step: steps + 1,
                    loss,
                },
                other => other,
            })?;
            steps += 1;
            loss_sum += loss;
            batches += 1;
            final_loss = loss;
        }
        records.push(EpochRecord {
            epoch,
            split: "train",
            loss: loss_sum / batches as f64,
            report: acc.report()?,
        });
        if cfg.eval_val {
            if let Some(val) = val_set {
                let ev = evaluate(model, val, RelMode::Absolute)?;
                records.push(EpochRecord {
                    epoch,
                    split: "val",
                    loss: ev.loss,
                    report: ev.report,
                });
            }
        }
        on_epoch(model, &records)?;
    }
    Ok(TrainOutcome {
        records,
        steps,
        final_loss,
    })
}

/// Forward, backward and one optimizer update on a single batch. Returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut Adam, batch: &Batch, acc: &mut MetricsAccumulator) -> Result<f64> {
    let (loss, grads, stats) = {
        let mut ctx = Ctx::new(&model.store, true);
        let out = model.forward(&mut ctx, batch)?;
        let loss_var = model.loss(&mut ctx, &out, batch)?;
        let loss = ctx.g.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: 0, step: 0, loss });
        }
        acc.add(ctx.g.value(out.depth).data(), batch.depth.data(), Some(&batch.mask))?;
        if ctx.g.requires_grad(loss_var) {
            ctx.g.backward(loss_var)?;
        }
        (loss, ctx.gradients(), ctx.take_stat_updates())
    };
    opt.step(&mut model.store, &grads)?;
    apply_stat_updates(&mut model.store, stats)?;
    Ok(loss)
}

pub struct EvalResult {
    pub report: MetricsReport,
    /// Mean per-sample loss.
    pub loss: f64,
}

/// Evaluates sample by sample in parallel; per-sample accumulators are
/// merged in sample order so the result does not depend on scheduling.
pub fn evaluate(model: &Model, samples: &[RenderedSample], mode: RelMode) -> Result<EvalResult> {
    evaluate_with(model, samples, mode, |s| s.image.clone())
}

/// [`evaluate`] with each input image replaced by `image(sample)`.
pub fn evaluate_with(
    model: &Model,
    samples: &[RenderedSample],
    mode: RelMode,
    image: impl Fn(&RenderedSample) -> Tensor + Sync,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let per_sample: Vec<(MetricsAccumulator, f64)> = samples
        .par_iter()
        .map(|s| {
            let batch = Batch::with_images(&[s], &image)?;
            let mut ctx = Ctx::new(&model.store, false);
            let out = model.forward(&mut ctx, &batch)?;
            let loss = model.loss(&mut ctx, &out, &batch)?;
            let mut acc = MetricsAccumulator::new(mode);
            acc.add(ctx.g.value(out.depth).data(), batch.depth.data(), Some(&batch.mask))?;
            Ok((acc, ctx.g.value(loss).item()))
        })
        .collect::<Result<_>>()?;
    let mut total = MetricsAccumulator::new(mode);
    let mut loss = 0.0;
    for (acc, l) in &per_sample {
        total.merge(acc);
        loss += l;
    }
    Ok(EvalResult {
        report: total.report()?,
        loss: loss / samples.len() as f64,
    })
}

/// Depth prediction and (for fused models) attention map for one sample, in eval mode.
pub fn predict(model: &Model, sample: &RenderedSample) -> Result<(Tensor, Option<Tensor>)> {
    let batch = Batch::from_samples(&[sample])?;
    let mut ctx = Ctx::new(&model.store, false);
    let out = model.forward(&mut ctx, &batch)?;
    let alpha = out.alpha.map(|a| ctx.g.value(a).clone());
    Ok((ctx.g.value(out.depth).clone(), alpha))
}
