//! Stage 2: teacher-student self-training on unlabeled drawings.
//!
//! Per step the teacher labels a weakly augmented view, the student learns
//! from a strongly augmented view of the same image, the teacher follows the
//! student by exponential moving average and, every `phi` steps, the student
//! is overwritten with the teacher.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::augment::{augment_student_extras, augment_weak};
use crate::datapipe::{AnnotatedImage, AugmentationPolicy, Image, Labels};
use crate::detector::{alternate_head, postprocess, Checkpoint, Detector, DetectorParams, Stage};
use crate::error::{Error, Result};
use crate::eval::{evaluate, APReport};
use crate::geometry::{BBox, Klass, ScoredBox};
use crate::losses::{focal_loss, ohem_loss, LossBreakdown, OhemConfig};
use crate::rng;

/// Student reset period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phi {
    #[serde(rename = "never")]
    Never,
    #[serde(untagged)]
    Every(u64),
}

/// Confidence loss used for the student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SelfSupLoss {
    Ohem,
    Focal { alpha: Option<f64>, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfSupConfig {
    pub phi: Phi,
    /// EMA keep rate of the teacher.
    pub d: f64,
    pub beta: f64,
    /// Teacher confidence needed for a pseudo-label.
    pub c_teac: f64,
    pub ct_pos_thresh: f64,
    pub ct_neg_thresh: f64,
    pub neg_pos_ratio: usize,
    pub min_neg: usize,
    pub lr: f64,
    /// 0 is plain SGD.
    pub momentum_gamma: f64,
    pub pseudo_nms_thresh: f64,
    pub max_iterations: u64,
    pub eval_interval: u64,
    pub loss: SelfSupLoss,
    /// Only the noise, color and crop settings apply to the student view.
    pub augmentation: AugmentationPolicy,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        SelfSupConfig {
            phi: Phi::Every(500),
            d: 0.9996,
            beta: 2.0,
            c_teac: 0.65,
            ct_pos_thresh: 0.5,
            ct_neg_thresh: 0.5,
            neg_pos_ratio: 3,
            min_neg: 16,
            lr: 1e-4,
            momentum_gamma: 0.0,
            pseudo_nms_thresh: 0.4,
            max_iterations: 2000,
            eval_interval: 100,
            loss: SelfSupLoss::Ohem,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl SelfSupConfig {
    pub fn ohem(&self) -> OhemConfig {
        OhemConfig {
            ct_pos_thresh: self.ct_pos_thresh,
            ct_neg_thresh: self.ct_neg_thresh,
            neg_pos_ratio: self.neg_pos_ratio,
            min_neg: self.min_neg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("d", self.d)?;
        unit("c_teac", self.c_teac)?;
        unit("pseudo_nms_thresh", self.pseudo_nms_thresh)?;
        self.ohem().validate()?;
        if !(0.0..1.0).contains(&self.momentum_gamma) {
            return Err(Error::Config(format!("momentum_gamma = {} outside [0, 1)", self.momentum_gamma)));
        }
        if self.phi == Phi::Every(0) {
            return Err(Error::Config("phi must be at least 1 or \"never\"".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.beta >= 0.0) {
            return Err(Error::Config("lr and beta must be finite and non-negative".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if let SelfSupLoss::Focal { alpha, gamma } = self.loss {
            if alpha.is_some_and(|a| !(0.0..=1.0).contains(&a)) || gamma < 0.0 {
                return Err(Error::Config("focal alpha must lie in [0, 1] and gamma be non-negative".into()));
            }
        }
        self.augmentation.validate()
    }
}

/// `teacher = d * teacher + (1 - d) * student`, elementwise.
pub fn ema_update(teacher: &mut DetectorParams, student: &DetectorParams, d: f64) -> Result<()> {
    teacher.check_layout(student)?;
    for (t, &s) in teacher.values_mut().iter_mut().zip(student.values()) {
        *t = d * *t + (1.0 - d) * s;
    }
    Ok(())
}

/// Plain SGD when `gamma == 0`, otherwise `v = gamma * v + g; p -= lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, gamma: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape {
            expected: format!("{} gradients and velocities", params.len()),
            got: format!("{} and {}", grads.len(), velocity.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {} at parameter {i}", grads[i])));
    }
    if gamma == 0.0 {
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
    } else {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            *v = gamma * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub teacher: DetectorParams,
    pub student: DetectorParams,
    /// Completed steps.
    pub iteration: u64,
    pub rng_seed: u64,
    /// Student momentum buffer.
    pub velocity: Vec<f64>,
}

impl TrainerState {
    /// Teacher and student both start from `init`.
    pub fn new(init: &DetectorParams, rng_seed: u64) -> Self {
        TrainerState {
            teacher: init.clone(),
            student: init.clone(),
            iteration: 0,
            rng_seed,
            velocity: vec![0.0; init.len()],
        }
    }
}

/// Copies the teacher into the student when `iteration` is a positive
/// multiple of `phi`, zeroing the momentum buffer. Returns whether it fired.
pub fn maybe_reset_student(state: &mut TrainerState, phi: Phi) -> bool {
    match phi {
        Phi::Every(p) if state.iteration > 0 && state.iteration % p == 0 => {
            state.student.copy_from(&state.teacher).expect("teacher and student share a layout");
            state.velocity.fill(0.0);
            true
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub face: Vec<ScoredBox>,
    pub body: Vec<ScoredBox>,
}

impl PseudoLabelSet {
    pub fn get(&self, klass: Klass) -> &[ScoredBox] {
        match klass {
            Klass::Face => &self.face,
            Klass::Body => &self.body,
        }
    }

    pub fn len(&self) -> usize {
        self.face.len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Labels {
        let boxes = |v: &[ScoredBox]| v.iter().map(|s| s.bbox).collect::<Vec<BBox>>();
        Labels { face: boxes(&self.face), body: boxes(&self.body) }
    }
}

/// Teacher detections with score at least `c_teac`, NMS'd per class.
pub fn generate_pseudo_labels(
    detector: &Detector,
    teacher: &DetectorParams,
    image: &Image,
    cfg: &SelfSupConfig,
) -> Result<PseudoLabelSet> {
    let outputs = detector.forward_both(teacher, image)?;
    let dets = postprocess(&outputs, detector.config(), cfg.c_teac, cfg.pseudo_nms_thresh)?;
    Ok(PseudoLabelSet { face: dets.face, body: dets.body })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub klass: Klass,
    pub loss: LossBreakdown,
    pub n_pseudo: usize,
    pub reset: bool,
}

/// One teacher-student step on `raw`.
pub fn selfsup_step(
    detector: &Detector,
    state: &mut TrainerState,
    raw: &Image,
    cfg: &SelfSupConfig,
) -> Result<StepReport> {
    let it = state.iteration;
    let seed = rng::derive(state.rng_seed, &[rng::str_id("step"), it]);
    let (weak, _) = augment_weak(raw, &Labels::default(), seed);
    let pseudo = generate_pseudo_labels(detector, &state.teacher, &weak, cfg)?;
    let (strong, targets) = augment_student_extras(&weak, &pseudo.labels(), &cfg.augmentation, rng::derive(seed, &[1]));
    let klass = alternate_head(it);
    let config = detector.config().clone();
    let mut grad = vec![0.0; state.student.len()];
    let ohem = cfg.ohem();
    let loss = detector.loss_and_grad(&state.student, &strong, klass, &mut grad, |out| match cfg.loss {
        SelfSupLoss::Ohem => ohem_loss(out, targets.get(klass), &config, &ohem, cfg.beta),
        SelfSupLoss::Focal { alpha, gamma } => focal_loss(out, targets.get(klass), &config, alpha, gamma, cfg.beta),
    })?;
    sgd_step(state.student.values_mut(), &grad, cfg.lr, cfg.momentum_gamma, &mut state.velocity)?;
    ema_update(&mut state.teacher, &state.student, cfg.d)?;
    state.iteration += 1;
    let reset = maybe_reset_student(state, cfg.phi);
    Ok(StepReport { klass, loss, n_pseudo: pseudo.len(), reset })
}

/// One row of the stage-2 curve log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: u64,
    pub teacher_face_ap: f64,
    pub teacher_body_ap: f64,
    pub student_face_ap: f64,
    pub student_body_ap: f64,
    /// Mean loss over the steps since the previous record.
    pub loss_conf: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
}

pub const CURVE_HEADER: &str =
    "iteration,teacher_face_ap,teacher_body_ap,student_face_ap,student_body_ap,loss_conf,loss_reg,loss_total";

impl CurveRecord {
    pub fn teacher_mean(&self) -> f64 {
        (self.teacher_face_ap + self.teacher_body_ap) / 2.0
    }

    pub fn student_mean(&self) -> f64 {
        (self.student_face_ap + self.student_body_ap) / 2.0
    }
}

pub fn curve_to_csv(records: &[CurveRecord]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.teacher_face_ap,
            r.teacher_body_ap,
            r.student_face_ap,
            r.student_body_ap,
            r.loss_conf,
            r.loss_reg,
            r.loss_total
        );
    }
    s
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurveRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => return Err(Error::Data(format!("curve log header mismatch: {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Data(format!("curve log row {}: expected 8 fields, got {}", n + 1, f.len())));
            }
            let num = |i: usize| {
                f[i].trim().parse::<f64>().map_err(|e| Error::Data(format!("curve log row {}: {e}", n + 1)))
            };
            Ok(CurveRecord {
                iteration: f[0].trim().parse().map_err(|e| Error::Data(format!("curve log row {}: {e}", n + 1)))?,
                teacher_face_ap: num(1)?,
                teacher_body_ap: num(2)?,
                student_face_ap: num(3)?,
                student_body_ap: num(4)?,
                loss_conf: num(5)?,
                loss_reg: num(6)?,
                loss_total: num(7)?,
            })
        })
        .collect()
}

pub fn write_curve_log(path: &Path, records: &[CurveRecord]) -> Result<()> {
    std::fs::write(path, curve_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_curve_log(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    curve_from_csv(&text)
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    /// Teacher with the best dev AP (the final teacher without a dev set).
    pub best: Checkpoint,
    pub best_dev: Option<APReport>,
    pub curve: Vec<CurveRecord>,
    pub losses: Vec<LossBreakdown>,
    pub state: TrainerState,
}

/// Loops [`selfsup_step`] over images drawn uniformly from `unlabeled`,
/// evaluating teacher and student on `dev` at iteration 0 and every
/// `eval_interval` steps.
pub fn run_stage2(
    detector: &Detector,
    init: &DetectorParams,
    unlabeled: &[AnnotatedImage],
    dev: &[AnnotatedImage],
    cfg: &SelfSupConfig,
    seed: u64,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    detector.check_params(init)?;
    if unlabeled.is_empty() {
        return Err(Error::Data("stage 2 needs at least one unlabeled image".into()));
    }
    let mut state = TrainerState::new(init, rng::derive(seed, &[rng::str_id("stage2")]));
    let mut stream = rng::rng_for(seed, &[rng::str_id("stage2-stream")]);
    let mut curve = Vec::new();
    let mut losses = Vec::with_capacity(cfg.max_iterations as usize);
    let mut best = (state.teacher.clone(), 0u64, None::<APReport>);
    let mut window = (LossBreakdown::default(), 0usize);

    let record = |state: &TrainerState, window: &mut (LossBreakdown, usize), best: &mut (DetectorParams, u64, Option<APReport>), curve: &mut Vec<CurveRecord>| -> Result<()> {
        if dev.is_empty() {
            return Ok(());
        }
        let t = evaluate(detector, &state.teacher, dev, seed)?;
        let s = evaluate(detector, &state.student, dev, seed)?;
        let n = window.1.max(1) as f64;
        curve.push(CurveRecord {
            iteration: state.iteration,
            teacher_face_ap: t.per_class_ap[&Klass::Face],
            teacher_body_ap: t.per_class_ap[&Klass::Body],
            student_face_ap: s.per_class_ap[&Klass::Face],
            student_body_ap: s.per_class_ap[&Klass::Body],
            loss_conf: window.0.conf / n,
            loss_reg: window.0.reg / n,
            loss_total: window.0.total / n,
        });
        log::info!("stage2 it {} teacher AP {:.4} student AP {:.4}", state.iteration, t.mean_ap, s.mean_ap);
        if best.2.as_ref().map_or(true, |b| t.mean_ap > b.mean_ap) {
            *best = (state.teacher.clone(), state.iteration, Some(t));
        }
        *window = (LossBreakdown::default(), 0);
        Ok(())
    };

    record(&state, &mut window, &mut best, &mut curve)?;
    while state.iteration < cfg.max_iterations {
        let raw = &unlabeled[stream.gen_range(0..unlabeled.len())].image;
        let step = selfsup_step(detector, &mut state, raw, cfg)?;
        if !step.loss.total.is_finite() {
            return Err(Error::NonFinite(format!("stage-2 loss at iteration {}", state.iteration)));
        }
        window.0.conf += step.loss.conf;
        window.0.reg += step.loss.reg;
        window.0.total += step.loss.total;
        window.1 += 1;
        losses.push(step.loss);
        if state.iteration % cfg.eval_interval == 0 {
            record(&state, &mut window, &mut best, &mut curve)?;
        }
    }
    if dev.is_empty() {
        best = (state.teacher.clone(), state.iteration, None);
    }
    let (params, iteration, best_dev) = best;
    let mut ckpt = Checkpoint::new(Stage::Stage2, iteration, detector.config().clone(), params);
    ckpt.meta = serde_json::json!({ "selfsup": cfg, "seed": seed });
    Ok(Stage2Outcome { best: ckpt, best_dev, curve, losses, state })
}
