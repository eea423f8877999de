use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::data::GroundedSample;
use super::forward::grad;
use super::loss::{LossBreakdown, LossWeights};
use super::optim::{lr_at, AdamW, AdamWConfig, Schedule};
use crate::backbone::Backbone;
use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor};
use crate::prune::{GlimpseParams, Pipeline};
use crate::vip::{select_tokens, VipConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_one")]
    pub epochs: usize,
    /// Samples averaged into each optimizer step.
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

fn default_lr() -> f64 {
    3e-3
}

fn default_warmup() -> f64 {
    0.1
}

fn default_schedule() -> Schedule {
    Schedule::Cosine
}

fn default_one() -> usize {
    1
}

fn default_dataset_size() -> usize {
    2000
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            warmup_ratio: default_warmup(),
            schedule: default_schedule(),
            epochs: 1,
            grad_accum: 1,
            seed: 0,
            dataset_size: default_dataset_size(),
            weights: LossWeights::default(),
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            bail!(Config, "warmup_ratio {} outside [0, 1]", self.warmup_ratio);
        }
        if self.epochs == 0 || self.grad_accum == 0 {
            bail!(Config, "epochs and grad_accum must be at least 1");
        }
        self.weights.validate()
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        (samples * self.epochs).div_ceil(self.grad_accum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub recall: f64,
    pub retention: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GlimpseParams,
    pub history: Vec<StepMetrics>,
    pub optimizer: AdamW,
}

/// `|keep ∩ fg| / |fg|`; a sample without foreground counts as fully recalled.
pub fn foreground_recall(keep: &[usize], mask: &[f64]) -> f64 {
    let fg = mask.iter().filter(|&&m| m > 0.5).count();
    if fg == 0 {
        return 1.0;
    }
    keep.iter().filter(|&&i| mask[i] > 0.5).count() as f64 / fg as f64
}

pub fn iou(keep: &[usize], mask: &[f64]) -> f64 {
    let fg = mask.iter().filter(|&&m| m > 0.5).count();
    let inter = keep.iter().filter(|&&i| mask[i] > 0.5).count();
    let union = fg + keep.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn epoch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.below(i + 1));
    }
    v
}

/// Trains glimpse rows and the predictor with the backbone frozen. `on_step`
/// sees every step's metrics as they are produced.
pub fn train(
    backbone: &Backbone,
    init: &GlimpseParams,
    vip_cfg: &VipConfig,
    dataset: &[GroundedSample],
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    if dataset.is_empty() {
        bail!(Config, "training needs at least one sample");
    }
    let mut params = init.clone();
    let shapes: Vec<&Tensor> = init.named().into_iter().map(|(_, t)| t).collect();
    let mut opt = AdamW::new(tcfg.adamw, &shapes);
    let total = tcfg.total_steps(dataset.len());
    let mut rng = Rng::new(tcfg.seed);
    let order: Vec<usize> = (0..tcfg.epochs).flat_map(|_| epoch_order(dataset.len(), &mut rng)).collect();
    let mut history = Vec::with_capacity(total);

    for (step, chunk) in order.chunks(tcfg.grad_accum).enumerate() {
        let mut acc = params.zeros_like();
        let (mut lang, mut dice, mut bce, mut recall, mut retention) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &i in chunk {
            let sample = &dataset[i];
            let (out, g) = grad(backbone, &params, vip_cfg, sample, &tcfg.weights)?;
            if !out.loss.total.is_finite() {
                bail!(Numeric, "non-finite loss {} at step {} (sample {})", out.loss.total, step, i);
            }
            for (a, gv) in acc.tensors_mut().into_iter().zip(g.named()) {
                a.add_assign(gv.1)?;
            }
            lang += out.loss.lang;
            dice += out.loss.dice;
            bce += out.loss.bce;
            let sel = select_tokens(&out.importance, vip_cfg);
            recall += foreground_recall(&sel.keep, &sample.mask);
            retention += sel.retention_rate();
        }
        let k = chunk.len() as f64;
        let inv = 1.0 / k;
        for t in acc.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let lr = lr_at(step, total, tcfg.lr, tcfg.warmup_ratio, tcfg.schedule);
        let grads: Vec<&Tensor> = acc.named().into_iter().map(|(_, t)| t).collect();
        opt.update(params.tensors_mut(), &grads, lr);
        if params.named().iter().any(|(_, t)| !t.is_finite()) {
            bail!(Numeric, "parameters became non-finite at step {}", step);
        }
        let m = StepMetrics {
            step,
            lr,
            loss: LossBreakdown::new(lang * inv, dice * inv, bce * inv, &tcfg.weights),
            recall: recall * inv,
            retention: retention * inv,
        };
        on_step(&m);
        history.push(m);
    }
    Ok(TrainOutcome {
        params,
        history,
        optimizer: opt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub foreground_recall: f64,
    pub mean_iou: f64,
    pub mean_retention: f64,
    pub answer_accuracy: f64,
}

/// Pruned inference on held-out samples, greedy decoding up to the answer length.
pub fn evaluate(backbone: &Backbone, params: &GlimpseParams, vip_cfg: &VipConfig, dataset: &[GroundedSample]) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        bail!(Config, "evaluation needs at least one sample");
    }
    let pipe = Pipeline::new(backbone, params, vip_cfg);
    let (mut recall, mut iou_sum, mut retention, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for s in dataset {
        let gen = pipe.generate(&s.image, &s.question_ids, s.answer_ids.len().max(1))?;
        recall += foreground_recall(&gen.selection.keep, &s.mask);
        iou_sum += iou(&gen.selection.keep, &s.mask);
        retention += gen.selection.retention_rate();
        correct += usize::from(gen.answer_ids == s.answer_ids);
    }
    let n = dataset.len() as f64;
    Ok(EvalMetrics {
        foreground_recall: recall / n,
        mean_iou: iou_sum / n,
        mean_retention: retention / n,
        answer_accuracy: correct as f64 / n,
    })
}
