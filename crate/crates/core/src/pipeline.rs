//! Supervised training for stage 1 (style-mixed pre-training on natural
//! images) and stage 3 (fine-tuning on a labeled drawing subset).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::augment::augment_supervised;
use crate::datapipe::{
    apply_style, mosaic, schedule_augmentation, subset_sampler, AnnotatedImage, AugmentationPolicy, StyleBank,
    SubsetSize,
};
use crate::detector::{alternate_head, Checkpoint, Detector, DetectorParams, Stage};
use crate::error::{Error, Result};
use crate::eval::{evaluate, APReport};
use crate::geometry::Klass;
use crate::losses::supervised_loss;
use crate::rng;
use crate::selfsup::sgd_step;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    /// SGD with classic momentum `TrainConfig::momentum`.
    Sgd,
}

/// Adam with bias correction; first and second moments live here.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape { expected: format!("{} gradients", self.m.len()), got: grads.len().to_string() });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {} at parameter {i}", grads[i])));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    /// Only used by [`Optimizer::Sgd`].
    pub momentum: f64,
    /// Regression weight in the total loss.
    pub beta: f64,
    pub augmentation: AugmentationPolicy,
    pub style_bank: StyleBank,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            optimizer: Optimizer::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta: 2.0,
            augmentation: AugmentationPolicy { no_aug_epochs: 2, ..Default::default() },
            style_bank: StyleBank::none(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || !(self.beta >= 0.0) {
            return Err(Error::Config("lr, momentum and beta out of range".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_face_ap: Option<f64>,
    pub dev_body_ap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best dev checkpoint, or the final one without a dev set.
    pub best: Checkpoint,
    pub best_dev: Option<APReport>,
    pub log: Vec<EpochRecord>,
    /// Total loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// One training sample for `epoch`, position `pos` in the shuffled order:
/// optional mosaic, style mixing per source image, then augmentation.
fn make_sample(
    train: &[AnnotatedImage],
    idx: usize,
    input: usize,
    policy: &AugmentationPolicy,
    bank: &StyleBank,
    seed: u64,
) -> Result<AnnotatedImage> {
    let mut r = rng::rng_for(seed, &[rng::str_id("sample")]);
    let styled = |i: usize, k: u64| {
        let src = &train[i];
        let src = if src.image.width != input || src.image.height != input { src.resized(input) } else { src.clone() };
        let image = apply_style(&src.image, &src.id, bank, rng::derive(seed, &[rng::str_id("style"), k]));
        AnnotatedImage { image, ..src }
    };
    let mut sample = if policy.enabled && r.gen_bool(policy.mosaic_prob) {
        let mut parts = vec![styled(idx, 0)];
        for k in 1..4 {
            parts.push(styled(r.gen_range(0..train.len()), k));
        }
        mosaic(&parts, input, rng::derive(seed, &[rng::str_id("mosaic")]))?
    } else {
        styled(idx, 0)
    };
    let (image, labels) = augment_supervised(&sample.image, &sample.labels, policy, rng::derive(seed, &[rng::str_id("aug")]));
    sample.image = image;
    sample.labels = labels;
    Ok(sample)
}

/// Minibatch training; heads alternate per optimizer step. The dev
/// set is evaluated before training and after every epoch, keeping the best.
pub fn train_supervised(
    detector: &Detector,
    init: &DetectorParams,
    train: &[AnnotatedImage],
    dev: &[AnnotatedImage],
    cfg: &TrainConfig,
    stage: Stage,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    detector.check_params(init)?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let input = detector.config().input_size;
    let mut params = init.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut adam = Adam::new(params.len());
    let mut grad = vec![0.0; params.len()];
    let mut losses = Vec::new();
    let mut log = Vec::new();
    let mut step = 0u64;
    let eval = |p: &DetectorParams| -> Result<Option<APReport>> {
        if dev.is_empty() {
            Ok(None)
        } else {
            evaluate(detector, p, dev, seed).map(Some)
        }
    };
    let mut best = (params.clone(), 0usize, eval(&params)?);
    for epoch in 0..cfg.epochs {
        let policy = schedule_augmentation(epoch, cfg.epochs, &cfg.augmentation);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::rng_for(seed, &[rng::str_id("epoch"), epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut n_steps = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let klass = alternate_head(step);
            grad.fill(0.0);
            let mut total = 0.0;
            for (j, &idx) in batch.iter().enumerate() {
                let pos = b * cfg.batch_size + j;
                let s = rng::derive(seed, &[epoch as u64, pos as u64]);
                let sample = make_sample(train, idx, input, &policy, &cfg.style_bank, s)?;
                let config = detector.config();
                let l = detector.loss_and_grad(&params, &sample.image, klass, &mut grad, |out| {
                    supervised_loss(out, sample.labels.get(klass), config, cfg.beta)
                })?;
                total += l.total;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let loss = total * scale;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{stage:?} loss at epoch {epoch}, step {step}")));
            }
            match cfg.optimizer {
                Optimizer::Adam => adam.step(params.values_mut(), &grad, cfg.lr)?,
                Optimizer::Sgd => sgd_step(params.values_mut(), &grad, cfg.lr, cfg.momentum, &mut velocity)?,
            }
            losses.push(loss);
            epoch_loss += loss;
            n_steps += 1;
            step += 1;
        }
        let dev_report = eval(&params)?;
        let rec = EpochRecord {
            epoch,
            mean_loss: epoch_loss / n_steps.max(1) as f64,
            dev_face_ap: dev_report.as_ref().map(|r| r.per_class_ap[&Klass::Face]),
            dev_body_ap: dev_report.as_ref().map(|r| r.per_class_ap[&Klass::Body]),
        };
        log::info!("{stage:?} epoch {epoch} loss {:.4} dev {:?}", rec.mean_loss, dev_report.as_ref().map(|r| r.mean_ap));
        log.push(rec);
        let better = match (&dev_report, &best.2) {
            (Some(new), Some(old)) => new.mean_ap > old.mean_ap,
            _ => true,
        };
        if better {
            best = (params.clone(), epoch + 1, dev_report);
        }
    }
    let (best_params, epoch, best_dev) = best;
    let mut ckpt = Checkpoint::new(stage, epoch as u64, detector.config().clone(), best_params);
    ckpt.meta = serde_json::json!({ "train": cfg, "seed": seed });
    Ok(TrainOutcome { best: ckpt, best_dev, log, losses })
}

/// Stage 1: supervised pre-training on natural images with style mixing.
pub fn run_stage1(
    detector: &Detector,
    init: &DetectorParams,
    natural: &[AnnotatedImage],
    dev: &[AnnotatedImage],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_supervised(detector, init, natural, dev, cfg, Stage::Stage1, seed)
}

/// Stage 3: fine-tune on a sampled subset of labeled drawings and report
/// test AP of the selected checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_stage3(
    detector: &Detector,
    init: &DetectorParams,
    labeled: &[AnnotatedImage],
    subset: SubsetSize,
    dev: &[AnnotatedImage],
    test: &[AnnotatedImage],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainOutcome, APReport)> {
    let train = subset_sampler(labeled, subset, rng::derive(seed, &[rng::str_id("stage3-subset")]))?;
    let outcome = train_supervised(detector, init, &train, dev, cfg, Stage::Stage3, seed)?;
    let report = evaluate(detector, &outcome.best.params, test, seed)?;
    Ok((outcome, report))
}
