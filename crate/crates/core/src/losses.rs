//! Detection losses.
//!
//! * [`supervised_loss`]: binary cross-entropy over every grid location plus
//!   smooth-L1 regression on positives, used for pre-training and fine-tuning.
//! * [`ohem_loss`]: the self-training loss. Confidence terms are gated by the
//!   student's own score (positives count only when confident enough,
//!   negatives only when unconfident enough) and restricted to a hard-example
//!   subset; regression is smooth-L1 on positives; the two are combined as
//!   `conf + beta * reg`.
//! * [`focal_loss`]: focal-modulated cross-entropy, the ablation baseline for
//!   the self-training stage.
//!
//! Positives are chosen by center sampling: each box is assigned to one
//! pyramid level by its longest side, and the 3x3 neighborhood around the
//! cell holding its center becomes positive.

use serde::{Deserialize, Serialize};

use crate::detector::layers::sigmoid;
use crate::detector::{assign_level, encode, DetectorConfig, HeadOutput};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhemConfig {
    pub ct_pos_thresh: f64,
    pub ct_neg_thresh: f64,
    pub neg_pos_ratio: usize,
    pub min_neg: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig { ct_pos_thresh: 0.5, ct_neg_thresh: 0.5, neg_pos_ratio: 3, min_neg: 16 }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ct_pos_thresh", self.ct_pos_thresh), ("ct_neg_thresh", self.ct_neg_thresh)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.neg_pos_ratio < 1 {
            return Err(Error::Config("neg_pos_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub reg: f64,
    pub total: f64,
    pub beta: f64,
}

pub fn total_loss(conf: f64, reg: f64, beta: f64) -> LossBreakdown {
    LossBreakdown { conf, reg, total: conf + beta * reg, beta }
}

pub fn smooth_l1(gt: f64, pred: f64) -> f64 {
    let e = (gt - pred).abs();
    if e < 1.0 {
        0.5 * e * e
    } else {
        e - 0.5
    }
}

/// Derivative of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(gt: f64, pred: f64) -> f64 {
    let d = pred - gt;
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

pub fn clamp_prob(p_hat: f64) -> f64 {
    p_hat.clamp(P_EPS, 1.0 - P_EPS)
}

/// Gate indicators `(ct_pos, ct_neg)` for a student confidence.
pub fn gates(p_hat: f64, cfg: &OhemConfig) -> (bool, bool) {
    (p_hat >= cfg.ct_pos_thresh, p_hat <= cfg.ct_neg_thresh)
}

/// Confidence loss of one selected proposal:
/// `-p * ct_pos * ln(p_hat) - (1 - p) * ct_neg * ln(1 - p_hat)`.
pub fn gated_conf_loss(positive: bool, p_hat: f64, cfg: &OhemConfig) -> f64 {
    let (ct_pos, ct_neg) = gates(p_hat, cfg);
    let q = clamp_prob(p_hat);
    match (positive, ct_pos, ct_neg) {
        (true, true, _) => -q.ln(),
        (false, _, true) => -(1.0 - q).ln(),
        _ => 0.0,
    }
}

/// Derivative of [`gated_conf_loss`] with respect to `p_hat`, gates held constant.
pub fn gated_conf_grad(positive: bool, p_hat: f64, cfg: &OhemConfig) -> f64 {
    let (ct_pos, ct_neg) = gates(p_hat, cfg);
    let clamped = !(P_EPS..=1.0 - P_EPS).contains(&p_hat);
    if clamped {
        return 0.0;
    }
    match (positive, ct_pos, ct_neg) {
        (true, true, _) => -1.0 / p_hat,
        (false, _, true) => 1.0 / (1.0 - p_hat),
        _ => 0.0,
    }
}

pub fn bce(positive: bool, p_hat: f64) -> f64 {
    let q = clamp_prob(p_hat);
    if positive {
        -q.ln()
    } else {
        -(1.0 - q).ln()
    }
}

/// Focal-modulated cross-entropy. `alpha = None` disables class balancing.
pub fn focal_conf_loss(positive: bool, p_hat: f64, alpha: Option<f64>, gamma: f64) -> f64 {
    let q = clamp_prob(p_hat);
    let (pt, at) = if positive {
        (q, alpha.unwrap_or(1.0))
    } else {
        (1.0 - q, alpha.map_or(1.0, |a| 1.0 - a))
    };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Derivative of [`focal_conf_loss`] with respect to the logit `z`, `p_hat = sigmoid(z)`.
pub fn focal_conf_grad_logit(positive: bool, z: f64, alpha: Option<f64>, gamma: f64) -> f64 {
    let q = sigmoid(z);
    if !(P_EPS..=1.0 - P_EPS).contains(&q) {
        return 0.0;
    }
    if positive {
        let a = alpha.unwrap_or(1.0);
        a * (gamma * (1.0 - q).powf(gamma) * q * q.ln() - (1.0 - q).powf(gamma + 1.0))
    } else {
        let a = alpha.map_or(1.0, |a| 1.0 - a);
        -a * (gamma * q.powf(gamma) * (1.0 - q) * (1.0 - q).ln() - q.powf(gamma + 1.0))
    }
}

/// Hard-example subset: every positive plus the highest-loss negatives, at most
/// `max(neg_pos_ratio * |positives|, min_neg)` of them. Equal losses are taken
/// in index order. Returned indices are ascending.
pub fn select_hard_examples(losses: &[f64], positives: &[usize], cfg: &OhemConfig) -> Vec<usize> {
    let mut is_pos = vec![false; losses.len()];
    for &p in positives {
        is_pos[p] = true;
    }
    let mut negs: Vec<usize> = (0..losses.len()).filter(|&i| !is_pos[i]).collect();
    negs.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    let n_pos = is_pos.iter().filter(|&&p| p).count();
    let quota = (cfg.neg_pos_ratio * n_pos).max(cfg.min_neg).min(negs.len());
    let mut out: Vec<usize> = (0..losses.len()).filter(|&i| is_pos[i]).collect();
    out.extend_from_slice(&negs[..quota]);
    out.sort_unstable();
    out
}

/// Positive cells and regression targets for one image and one head.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub levels: Vec<LevelTargets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Ground-truth index owning each cell, if positive.
    pub owner: Vec<Option<usize>>,
    /// Encoded regression target per cell (meaningful where `owner` is set).
    pub reg: Vec<[f64; 4]>,
}

impl Targets {
    pub fn n_positive(&self) -> usize {
        self.levels.iter().map(|l| l.owner.iter().flatten().count()).sum()
    }

    /// Flat location index to `(level, cell)` follows level-major order.
    pub fn positive_flat_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut base = 0;
        for l in &self.levels {
            out.extend(l.owner.iter().enumerate().filter(|(_, o)| o.is_some()).map(|(i, _)| base + i));
            base += l.owner.len();
        }
        out
    }
}

/// Center-sampling assignment. When two boxes claim a cell, the smaller box
/// wins; equal areas go to the lower index.
pub fn assign_targets(gts: &[BBox], config: &DetectorConfig) -> Targets {
    let mut levels: Vec<LevelTargets> = config
        .strides
        .iter()
        .zip(config.grid_sizes())
        .map(|(&stride, g)| LevelTargets {
            stride,
            h: g,
            w: g,
            owner: vec![None; g * g],
            reg: vec![[0.0; 4]; g * g],
        })
        .collect();
    for (gi, gt) in gts.iter().enumerate() {
        let lt = &mut levels[assign_level(gt, config)];
        let s = lt.stride as f64;
        let col = ((gt.cx / s).floor().max(0.0) as usize).min(lt.w - 1);
        let row = ((gt.cy / s).floor().max(0.0) as usize).min(lt.h - 1);
        for r in row.saturating_sub(1)..=(row + 1).min(lt.h - 1) {
            for c in col.saturating_sub(1)..=(col + 1).min(lt.w - 1) {
                let cell = r * lt.w + c;
                let take = match lt.owner[cell] {
                    None => true,
                    Some(prev) => gt.area() < gts[prev].area(),
                };
                if take {
                    lt.owner[cell] = Some(gi);
                    lt.reg[cell] = encode(gt, lt.stride, c, r);
                }
            }
        }
    }
    Targets { levels }
}

fn check_shape(out: &HeadOutput, targets: &Targets) -> Result<()> {
    let ok = out.levels.len() == targets.levels.len()
        && out
            .levels
            .iter()
            .zip(&targets.levels)
            .all(|(o, t)| o.h == t.h && o.w == t.w && o.stride == t.stride);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            expected: "head output matching the detector grid".into(),
            got: format!("{} levels", out.levels.len()),
        })
    }
}

/// Regression loss summed over positives and the four box terms, with its gradient.
fn regression(out: &HeadOutput, targets: &Targets, grad: &mut HeadOutput, scale: f64, beta: f64) -> f64 {
    let mut reg = 0.0;
    for ((lo, lt), lg) in out.levels.iter().zip(&targets.levels).zip(grad.levels.iter_mut()) {
        for cell in 0..lo.cells() {
            if lt.owner[cell].is_none() {
                continue;
            }
            let pred = lo.reg_at(cell);
            for k in 0..4 {
                reg += smooth_l1(lt.reg[cell][k], pred[k]);
                *lg.reg_at_mut(cell, k) += beta * scale * smooth_l1_grad(lt.reg[cell][k], pred[k]);
            }
        }
    }
    reg * scale
}

/// Stable `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Supervised loss for one head on one image. Both terms are normalized by
/// the number of positive cells (at least one).
pub fn supervised_loss(
    out: &HeadOutput,
    gts: &[BBox],
    config: &DetectorConfig,
    beta: f64,
) -> Result<(LossBreakdown, HeadOutput)> {
    let targets = assign_targets(gts, config);
    check_shape(out, &targets)?;
    let norm = 1.0 / targets.n_positive().max(1) as f64;
    let mut grad = out.zeros_like();
    let mut conf = 0.0;
    for ((lo, lt), lg) in out.levels.iter().zip(&targets.levels).zip(grad.levels.iter_mut()) {
        for cell in 0..lo.cells() {
            let z = lo.logits[cell];
            let p = if lt.owner[cell].is_some() { 1.0 } else { 0.0 };
            conf += softplus(z) - p * z;
            lg.logits[cell] = norm * (sigmoid(z) - p);
        }
    }
    let reg = regression(out, &targets, &mut grad, norm, beta);
    Ok((total_loss(conf * norm, reg, beta), grad))
}

/// Gated hard-example loss for one head on one image against pseudo-labels.
///
/// The confidence term is the mean gated loss over the selected subset; the
/// regression term is the mean over positive cells.
pub fn ohem_loss(
    out: &HeadOutput,
    pseudo: &[BBox],
    config: &DetectorConfig,
    cfg: &OhemConfig,
    beta: f64,
) -> Result<(LossBreakdown, HeadOutput)> {
    let targets = assign_targets(pseudo, config);
    check_shape(out, &targets)?;
    let mut per_loc = Vec::with_capacity(out.n_locations());
    let mut labels = Vec::with_capacity(out.n_locations());
    for (lo, lt) in out.levels.iter().zip(&targets.levels) {
        for cell in 0..lo.cells() {
            let pos = lt.owner[cell].is_some();
            per_loc.push(gated_conf_loss(pos, sigmoid(lo.logits[cell]), cfg));
            labels.push(pos);
        }
    }
    let positives = targets.positive_flat_indices();
    let selected = select_hard_examples(&per_loc, &positives, cfg);
    let mut grad = out.zeros_like();
    let mut conf = 0.0;
    if !selected.is_empty() {
        let inv = 1.0 / selected.len() as f64;
        let mut flat_to_level = Vec::with_capacity(per_loc.len());
        for (li, lo) in out.levels.iter().enumerate() {
            flat_to_level.extend((0..lo.cells()).map(|c| (li, c)));
        }
        for &i in &selected {
            conf += per_loc[i];
            let (li, cell) = flat_to_level[i];
            let q = sigmoid(out.levels[li].logits[cell]);
            // dL/dz = dL/dq * q (1 - q)
            grad.levels[li].logits[cell] = inv * gated_conf_grad(labels[i], q, cfg) * q * (1.0 - q);
        }
        conf *= inv;
    }
    let norm = 1.0 / targets.n_positive().max(1) as f64;
    let reg = regression(out, &targets, &mut grad, norm, beta);
    Ok((total_loss(conf, reg, beta), grad))
}

/// Focal-loss baseline for the self-training stage: every location
/// contributes, normalized by the number of positives.
pub fn focal_loss(
    out: &HeadOutput,
    pseudo: &[BBox],
    config: &DetectorConfig,
    alpha: Option<f64>,
    gamma: f64,
    beta: f64,
) -> Result<(LossBreakdown, HeadOutput)> {
    let targets = assign_targets(pseudo, config);
    check_shape(out, &targets)?;
    let norm = 1.0 / targets.n_positive().max(1) as f64;
    let mut grad = out.zeros_like();
    let mut conf = 0.0;
    for ((lo, lt), lg) in out.levels.iter().zip(&targets.levels).zip(grad.levels.iter_mut()) {
        for cell in 0..lo.cells() {
            let pos = lt.owner[cell].is_some();
            let z = lo.logits[cell];
            conf += focal_conf_loss(pos, sigmoid(z), alpha, gamma);
            lg.logits[cell] = norm * focal_conf_grad_logit(pos, z, alpha, gamma);
        }
    }
    let reg = regression(out, &targets, &mut grad, norm, beta);
    Ok((total_loss(conf * norm, reg, beta), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::LevelOutput;
    use crate::geometry::Klass;
    use rand::{Rng, SeedableRng};

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(3.0, 3.0), 0.0);
        assert_eq!(smooth_l1(0.0, 0.5), 0.125);
        assert_eq!(smooth_l1(2.0, 0.0), 1.5);
        // continuous and C1 at |e| = 1
        assert!((smooth_l1(0.0, 1.0 - 1e-12) - smooth_l1(0.0, 1.0)).abs() < 1e-11);
        assert!((smooth_l1_grad(0.0, 1.0 - 1e-12) - smooth_l1_grad(0.0, 1.0)).abs() < 1e-11);
    }

    #[test]
    fn gated_examples() {
        let cfg = OhemConfig::default();
        assert!((gated_conf_loss(true, 0.8, &cfg) - 0.223_143_551_314_209_7).abs() < 1e-12);
        assert_eq!(gated_conf_loss(true, 0.3, &cfg), 0.0);
        assert_eq!(gated_conf_loss(false, 0.6, &cfg), 0.0);
        // shared boundary point: both gates open at exactly 0.5
        assert_eq!(gates(0.5, &cfg), (true, true));
    }

    #[test]
    fn open_gates_equal_bce() {
        let cfg = OhemConfig { ct_pos_thresh: 0.0, ct_neg_thresh: 1.0, ..Default::default() };
        for i in 0..=100 {
            let q = i as f64 / 100.0;
            for pos in [true, false] {
                assert_eq!(gated_conf_loss(pos, q, &cfg), bce(pos, q));
            }
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.3, 0.7, 0.0).total, 1.3);
        assert_eq!(total_loss(1.0, 0.5, 2.0).total, 2.0);
        assert_eq!(total_loss(0.0, 0.0, 2.0).total, 0.0);
    }

    #[test]
    fn focal_examples() {
        for q in [0.1, 0.5, 0.93] {
            assert!((focal_conf_loss(true, q, None, 0.0) - bce(true, q)).abs() < 1e-15);
            assert!((focal_conf_loss(false, q, None, 0.0) - bce(false, q)).abs() < 1e-15);
        }
        assert!(focal_conf_loss(true, 1.0 - 1e-9, Some(0.25), 2.0) < 1e-12);
        let want = 0.25 * 0.25 * -(0.5f64.ln());
        assert!((focal_conf_loss(true, 0.5, Some(0.25), 2.0) - want).abs() < 1e-15);
    }

    #[test]
    fn focal_grad_matches_fd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let z: f64 = rng.gen_range(-6.0..6.0);
            let pos = rng.gen_bool(0.5);
            let gamma = rng.gen_range(0.0..3.0);
            let alpha = Some(rng.gen_range(0.05..0.95));
            let h = 1e-6;
            let fd = (focal_conf_loss(pos, sigmoid(z + h), alpha, gamma)
                - focal_conf_loss(pos, sigmoid(z - h), alpha, gamma))
                / (2.0 * h);
            let an = focal_conf_grad_logit(pos, z, alpha, gamma);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn hard_example_counts() {
        let cfg = OhemConfig::default();
        let losses: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let sel = select_hard_examples(&losses, &[], &cfg);
        assert_eq!(sel, (84..100).collect::<Vec<_>>());
        let sel = select_hard_examples(&losses[..40], &[0, 1, 2, 3], &cfg);
        assert_eq!(sel.len(), 20);
        // 4 positives + 12 negatives when the ratio exceeds the floor
        let cfg = OhemConfig { min_neg: 4, ..cfg };
        let sel = select_hard_examples(&losses[..40], &[0, 1, 2, 3], &cfg);
        assert_eq!(sel.len(), 16);
        assert_eq!(&sel[..4], &[0, 1, 2, 3]);
        assert_eq!(&sel[4..], &(28..40).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn hard_example_ties_by_index() {
        let cfg = OhemConfig { min_neg: 3, ..Default::default() };
        let losses = [0.5, 0.9, 0.5, 0.5, 0.1, 0.5];
        assert_eq!(select_hard_examples(&losses, &[], &cfg), vec![0, 1, 2]);
        assert_eq!(select_hard_examples(&losses, &[1], &cfg), vec![0, 1, 2, 3]);
    }

    fn desk() -> DetectorConfig {
        DetectorConfig { strides: vec![8, 16, 32], ..DetectorConfig::desk() }
    }

    fn random_output(cfg: &DetectorConfig, rng: &mut impl Rng, logit_scale: f64) -> HeadOutput {
        HeadOutput {
            klass: Klass::Face,
            levels: cfg
                .strides
                .iter()
                .zip(cfg.grid_sizes())
                .map(|(&stride, g)| LevelOutput {
                    stride,
                    h: g,
                    w: g,
                    logits: (0..g * g).map(|_| rng.gen_range(-logit_scale..logit_scale)).collect(),
                    reg: (0..4 * g * g).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn assignment_center_sampling() {
        let cfg = desk();
        let face = BBox::new(20.0, 28.0, 8.0, 10.0).unwrap();
        let t = assign_targets(&[face], &cfg);
        assert_eq!(t.n_positive(), 9);
        let l0 = &t.levels[0];
        // center cell col 2, row 3
        for r in 2..=4 {
            for c in 1..=3 {
                assert_eq!(l0.owner[r * 8 + c], Some(0));
            }
        }
        // corner box clips the neighborhood
        let corner = BBox::new(2.0, 2.0, 4.0, 4.0).unwrap();
        assert_eq!(assign_targets(&[corner], &cfg).n_positive(), 4);
        // smaller box wins overlapping cells
        let small = BBox::new(28.0, 28.0, 6.0, 6.0).unwrap();
        let t = assign_targets(&[face, small], &cfg);
        assert_eq!(t.levels[0].owner[3 * 8 + 3], Some(1));
    }

    #[test]
    fn supervised_zero_gt_perfect_negative() {
        let cfg = desk();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = random_output(&cfg, &mut rng, 1.0);
        for l in &mut out.levels {
            l.logits.iter_mut().for_each(|v| *v = -60.0);
        }
        let (loss, _) = supervised_loss(&out, &[], &cfg, 2.0).unwrap();
        assert!(loss.total < 1e-20);
        assert_eq!(loss.reg, 0.0);
    }

    #[test]
    fn supervised_reg_zero_at_targets() {
        let cfg = desk();
        let gt = BBox::new(30.0, 22.0, 20.0, 26.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut out = random_output(&cfg, &mut rng, 1.0);
        let t = assign_targets(&[gt], &cfg);
        for (lo, lt) in out.levels.iter_mut().zip(&t.levels) {
            for cell in 0..lo.cells() {
                if lt.owner[cell].is_some() {
                    for k in 0..4 {
                        *lo.reg_at_mut(cell, k) = lt.reg[cell][k];
                    }
                }
            }
        }
        let (loss, _) = supervised_loss(&out, &[gt], &cfg, 2.0).unwrap();
        assert_eq!(loss.reg, 0.0);
        assert!(loss.conf > 0.0);
    }

    /// Per-location double loop written independently of the vectorized path.
    fn supervised_oracle(out: &HeadOutput, gts: &[BBox], cfg: &DetectorConfig, beta: f64) -> f64 {
        let mut conf = 0.0;
        let mut reg = 0.0;
        let mut npos = 0usize;
        for level in &out.levels {
            let li = cfg.strides.iter().position(|&s| s == level.stride).unwrap();
            let s = level.stride as f64;
            for row in 0..level.h {
                for col in 0..level.w {
                    // owner: smallest-area gt (lowest index on ties) whose center cell is within 1
                    let mut owner: Option<usize> = None;
                    for (gi, g) in gts.iter().enumerate() {
                        if assign_level(g, cfg) != li {
                            continue;
                        }
                        let gc = ((g.cx / s).floor() as i64).clamp(0, level.w as i64 - 1);
                        let gr = ((g.cy / s).floor() as i64).clamp(0, level.h as i64 - 1);
                        if (gc - col as i64).abs() <= 1 && (gr - row as i64).abs() <= 1 {
                            owner = match owner {
                                Some(o) if gts[o].area() <= g.area() => Some(o),
                                _ => Some(gi),
                            };
                        }
                    }
                    let cell = row * level.w + col;
                    let q = 1.0 / (1.0 + (-level.logits[cell]).exp());
                    match owner {
                        Some(o) => {
                            npos += 1;
                            conf -= q.ln();
                            let g = gts[o];
                            let tgt = [g.cx / s - col as f64, g.cy / s - row as f64, (g.w / s).ln(), (g.h / s).ln()];
                            for k in 0..4 {
                                let e = (tgt[k] - level.reg[k * level.h * level.w + cell]).abs();
                                reg += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
                            }
                        }
                        None => conf -= (1.0 - q).ln(),
                    }
                }
            }
        }
        let n = npos.max(1) as f64;
        conf / n + beta * reg / n
    }

    #[test]
    fn supervised_matches_oracle() {
        let cfg = desk();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let out = random_output(&cfg, &mut rng, 4.0);
            let n = rng.gen_range(0..5);
            let gts: Vec<BBox> = (0..n)
                .map(|_| {
                    let w = rng.gen_range(4.0..50.0);
                    let h = rng.gen_range(4.0..50.0);
                    let cx = rng.gen_range(w / 2.0..64.0 - w / 2.0);
                    let cy = rng.gen_range(h / 2.0..64.0 - h / 2.0);
                    BBox::new(cx, cy, w, h).unwrap()
                })
                .collect();
            let (loss, _) = supervised_loss(&out, &gts, &cfg, 2.0).unwrap();
            let want = supervised_oracle(&out, &gts, &cfg, 2.0);
            assert!((loss.total - want).abs() < 1e-6 * want.max(1.0), "{} vs {want}", loss.total);
        }
    }

    fn fd_check(
        out: &HeadOutput,
        f: &dyn Fn(&HeadOutput) -> (LossBreakdown, HeadOutput),
        rng: &mut impl Rng,
        skip: &dyn Fn(&HeadOutput, usize, usize) -> bool,
    ) {
        let (_, grad) = f(out);
        let mut checked = 0;
        while checked < 60 {
            let li = rng.gen_range(0..out.levels.len());
            let is_logit = rng.gen_bool(0.5);
            let n = if is_logit { out.levels[li].logits.len() } else { out.levels[li].reg.len() };
            let i = rng.gen_range(0..n);
            if is_logit && skip(out, li, i) {
                continue;
            }
            let h = 1e-6;
            let bump = |d: f64| {
                let mut o = out.clone();
                if is_logit {
                    o.levels[li].logits[i] += d;
                } else {
                    o.levels[li].reg[i] += d;
                }
                f(&o).0.total
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = if is_logit { grad.levels[li].logits[i] } else { grad.levels[li].reg[i] };
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "level {li} idx {i} logit={is_logit}: fd {fd} vs {an}");
            checked += 1;
        }
    }

    #[test]
    fn supervised_gradient() {
        let cfg = desk();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let gts = vec![BBox::new(20.0, 30.0, 9.0, 12.0).unwrap(), BBox::new(40.0, 40.0, 30.0, 20.0).unwrap()];
        let out = random_output(&cfg, &mut rng, 3.0);
        fd_check(&out, &|o| supervised_loss(o, &gts, &cfg, 2.0).unwrap(), &mut rng, &|_, _, _| false);
    }

    #[test]
    fn ohem_gradient_away_from_gates() {
        let cfg = desk();
        let ohem = OhemConfig { ct_pos_thresh: 0.3, ct_neg_thresh: 0.7, min_neg: 200, ..Default::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let gts = vec![BBox::new(20.0, 30.0, 9.0, 12.0).unwrap()];
        let out = random_output(&cfg, &mut rng, 3.0);
        // with min_neg above the location count the subset is every location, so
        // the selection itself cannot flip under a small perturbation
        let near_gate = |o: &HeadOutput, li: usize, i: usize| {
            let q = sigmoid(o.levels[li].logits[i]);
            (q - 0.3).abs() < 1e-3 || (q - 0.7).abs() < 1e-3
        };
        fd_check(&out, &|o| ohem_loss(o, &gts, &cfg, &ohem, 2.0).unwrap(), &mut rng, &near_gate);
    }

    #[test]
    fn ohem_empty_pseudo_labels_is_negative_only() {
        let cfg = desk();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let out = random_output(&cfg, &mut rng, 3.0);
        let (loss, grad) = ohem_loss(&out, &[], &cfg, &OhemConfig::default(), 2.0).unwrap();
        assert_eq!(loss.reg, 0.0);
        assert!(loss.conf >= 0.0);
        let nonzero = grad.levels.iter().flat_map(|l| &l.logits).filter(|&&g| g != 0.0).count();
        assert!(nonzero <= 16);
        assert!(grad.levels.iter().flat_map(|l| &l.reg).all(|&g| g == 0.0));
    }
}
