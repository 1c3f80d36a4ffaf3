//! Training loop, mIoU evaluation and the confusion-matrix metric.

use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use super::optim::{make_param_groups, AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::pipeline::{SegmentationPipeline, IGNORE_INDEX};
use crate::tensor::{Rng, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate of every non-backbone parameter; the backbone uses a tenth.
    pub base_lr: f64,
    pub optimizer: AdamWConfig,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            base_lr: 1e-3,
            optimizer: AdamWConfig::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss per step, step 1 first.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

/// Trains in place. Each step draws `batch_size` items from a seeded,
/// per-epoch shuffle, averages per-image gradients and applies AdamW. Text
/// embeddings are constants of every graph and never receive gradients.
pub fn train<T: Scalar>(
    pipeline: &mut SegmentationPipeline<T>,
    data: &SyntheticDataset,
    eval: Option<&SyntheticDataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let groups = make_param_groups(pipeline, cfg.base_lr)?;
    let mut opt = AdamW::new(&pipeline.store, groups, cfg.optimizer.clone())?;
    let mut order_rng = Rng::new(seed).fork(0x5348_5546);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog { losses: Vec::with_capacity(cfg.steps), evals: Vec::new() };
    let inv_batch = T::lit(1.0 / cfg.batch_size as f64);

    for step in 1..=cfg.steps {
        let mut acc: Vec<Option<Vec<T>>> = vec![None; pipeline.store.len()];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order_rng.shuffle(&mut order);
                order.reverse();
            }
            let sample = &data.items[order.pop().expect("refilled above")];
            let s = Session::new(&pipeline.store);
            let loss = pipeline
                .forward(&s, &sample.image_as::<T>())
                .and_then(|out| pipeline.loss(&out, &sample.labels))
                .map_err(|e| non_finite_at(e, step))?;
            let value = loss.item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            batch_loss += value;
            s.graph().backward(&loss).map_err(|e| non_finite_at(e, step))?;
            for (id, g) in s.gradients() {
                match &mut acc[id.0] {
                    Some(a) => a.iter_mut().zip(g.data()).for_each(|(a, &g)| *a += g),
                    slot => *slot = Some(g.into_data()),
                }
            }
        }
        for (i, g) in acc.into_iter().enumerate() {
            let p = pipeline.store.get_mut(crate::nn::ParamId(i));
            match g {
                Some(mut g) => {
                    g.iter_mut().for_each(|v| *v *= inv_batch);
                    p.set_grad(g)?;
                }
                None => p.zero_grad(),
            }
        }
        opt.step(&mut pipeline.store)?;
        log.losses.push(batch_loss / cfg.batch_size as f64);
        if let Some(eval) = eval {
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
                log.evals.push(EvalPoint { step, miou: evaluate_miou(pipeline, eval)?.miou });
            }
        }
    }
    Ok(log)
}

fn non_finite_at(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        e => e,
    }
}

/// `K x K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Pixels labelled with the ignore index are skipped.
    pub fn add(&mut self, predicted: &[usize], labels: &[usize]) -> Result<()> {
        if predicted.len() != labels.len() {
            return Err(Error::ShapeMismatch { op: "confusion", lhs: vec![predicted.len()], rhs: vec![labels.len()] });
        }
        for (&p, &l) in predicted.iter().zip(labels) {
            if l == IGNORE_INDEX {
                continue;
            }
            for v in [p, l] {
                if v >= self.classes {
                    return Err(Error::LabelOutOfRange { label: v, classes: self.classes });
                }
            }
            self.counts[l * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither prediction nor ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.count(k, k);
                let fn_: u64 = (0..self.classes).map(|p| self.count(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|t| self.count(t, k)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a defined IoU; 0 if there are none.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn evaluate_miou<T: Scalar>(pipeline: &SegmentationPipeline<T>, data: &SyntheticDataset) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(pipeline.classes());
    for s in &data.items {
        cm.add(&pipeline.predict(&s.image_as::<T>())?, &s.labels)?;
    }
    Ok(MiouReport { miou: cm.miou(), per_class_iou: cm.iou() })
}
