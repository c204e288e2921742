use rand::Rng;

use super::layers::{silu, silu_backward, upsample2, upsample2_backward, Conv, FeatureMap};
use super::params::{DetectorParams, Segment};
use super::DetectorConfig;
use crate::datapipe::Image;
use crate::error::{Error, Result};
use crate::geometry::Klass;

/// Prior probability the confidence bias is initialized to.
const CONF_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
struct HeadConvs {
    conf_hidden: Conv,
    conf_out: Conv,
    reg_hidden: Conv,
    reg_out: Conv,
}

/// Per-stride grid outputs of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Confidence logits, row-major `h * w`.
    pub logits: Vec<f64>,
    /// Regression `(dx, dy, log_w, log_h)`, channel-major `4 * h * w`.
    pub reg: Vec<f64>,
}

impl LevelOutput {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn reg_at(&self, cell: usize) -> [f64; 4] {
        let n = self.cells();
        [self.reg[cell], self.reg[n + cell], self.reg[2 * n + cell], self.reg[3 * n + cell]]
    }

    pub fn reg_at_mut(&mut self, cell: usize, k: usize) -> &mut f64 {
        let n = self.cells();
        &mut self.reg[k * n + cell]
    }
}

/// Output of one class head for one image. Gradients with respect to the
/// outputs use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub klass: Klass,
    pub levels: Vec<LevelOutput>,
}

impl HeadOutput {
    pub fn zeros_like(&self) -> HeadOutput {
        HeadOutput {
            klass: self.klass,
            levels: self
                .levels
                .iter()
                .map(|l| LevelOutput {
                    logits: vec![0.0; l.logits.len()],
                    reg: vec![0.0; l.reg.len()],
                    ..*l
                })
                .collect(),
        }
    }

    pub fn n_locations(&self) -> usize {
        self.levels.iter().map(|l| l.cells()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.logits.iter().chain(&l.reg).all(|v| v.is_finite()))
    }
}

/// Activations of the shared backbone and neck, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    acts: Vec<FeatureMap>,
    pres: Vec<FeatureMap>,
    neck_pre: Vec<FeatureMap>,
    neck: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
struct LevelCache {
    conf_pre: FeatureMap,
    conf_act: FeatureMap,
    reg_pre: FeatureMap,
    reg_act: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    klass: Klass,
    levels: Vec<LevelCache>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    backbone: Vec<Conv>,
    taps: [usize; 3],
    laterals: [Conv; 3],
    heads: [HeadConvs; 2],
    segments: Vec<Segment>,
    n_params: usize,
}

fn scaled(base: usize, mult: f64) -> usize {
    ((base as f64 * mult).round() as usize).max(4)
}

struct Allocator {
    offset: usize,
}

impl Allocator {
    fn conv(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize) -> Conv {
        let conv = Conv { in_c, out_c, k, stride, pad: k / 2, offset: self.offset };
        self.offset += conv.n_params();
        conv
    }
}

impl Detector {
    pub fn new(config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let wm = config.width_mult;
        let extra = config.depth_mult.round() as usize;
        let n_pre = config.strides[0].trailing_zeros() as usize;
        let level_widths = [scaled(24, wm), scaled(32, wm), scaled(48, wm)];
        let neck_c = scaled(24, wm);

        let mut alloc = Allocator { offset: 0 };
        let mut segments = Vec::new();
        let mut backbone = Vec::new();
        let mut taps = [0; 3];

        let mut c = 3;
        for i in 0..n_pre - 1 {
            let out = scaled(8 << i.min(1), wm);
            backbone.push(alloc.conv(c, out, 3, 2));
            c = out;
        }
        for (level, &w) in level_widths.iter().enumerate() {
            backbone.push(alloc.conv(c, w, 3, 2));
            c = w;
            for _ in 0..extra {
                backbone.push(alloc.conv(c, c, 3, 1));
            }
            taps[level] = backbone.len() - 1;
        }
        segments.push(Segment { name: "backbone".into(), start: 0, len: alloc.offset });

        let start = alloc.offset;
        let laterals = [
            alloc.conv(level_widths[0], neck_c, 1, 1),
            alloc.conv(level_widths[1], neck_c, 1, 1),
            alloc.conv(level_widths[2], neck_c, 1, 1),
        ];
        segments.push(Segment { name: "neck".into(), start, len: alloc.offset - start });

        let mut head = |name: &str, alloc: &mut Allocator| {
            let start = alloc.offset;
            let h = HeadConvs {
                conf_hidden: alloc.conv(neck_c, neck_c, 3, 1),
                conf_out: alloc.conv(neck_c, 1, 1, 1),
                reg_hidden: alloc.conv(neck_c, neck_c, 3, 1),
                reg_out: alloc.conv(neck_c, 4, 1, 1),
            };
            segments.push(Segment { name: name.into(), start, len: alloc.offset - start });
            h
        };
        let face = head("head_face", &mut alloc);
        let body = head("head_body", &mut alloc);

        Ok(Detector {
            config: config.clone(),
            backbone,
            taps,
            laterals,
            heads: [face, body],
            segments,
            n_params: alloc.offset,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn head_segment(klass: Klass) -> &'static str {
        match klass {
            Klass::Face => "head_face",
            Klass::Body => "head_body",
        }
    }

    pub fn zero_params(&self) -> DetectorParams {
        DetectorParams::new(self.segments.clone(), vec![0.0; self.n_params])
            .expect("layout built by the detector is contiguous")
    }

    /// Fan-in scaled uniform weights, zero biases, confidence bias at the prior logit.
    pub fn init_params(&self, seed: u64) -> DetectorParams {
        let mut rng = crate::rng::rng_for(seed, &[crate::rng::str_id("detector-init")]);
        let mut params = self.zero_params();
        let values = params.values_mut();
        let mut fill = |conv: &Conv, gain: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = (gain / conv.fan_in() as f64).sqrt();
            for v in &mut values[conv.offset..conv.offset + conv.n_weights()] {
                *v = rng.gen_range(-bound..bound);
            }
        };
        for conv in self.backbone.iter().chain(&self.laterals) {
            fill(conv, 6.0, &mut rng);
        }
        for h in &self.heads {
            fill(&h.conf_hidden, 6.0, &mut rng);
            fill(&h.conf_out, 1.0, &mut rng);
            fill(&h.reg_hidden, 6.0, &mut rng);
            fill(&h.reg_out, 1.0, &mut rng);
        }
        let prior = (CONF_PRIOR / (1.0 - CONF_PRIOR)).ln();
        for h in &self.heads {
            values[h.conf_out.bias_offset()] = prior;
        }
        params
    }

    pub fn check_params(&self, params: &DetectorParams) -> Result<()> {
        if params.segments() != self.segments.as_slice() {
            return Err(Error::Layout("parameters do not match the detector configuration".into()));
        }
        Ok(())
    }

    fn input_map(&self, image: &Image) -> Result<FeatureMap> {
        let n = self.config.input_size;
        if image.width != n || image.height != n || image.data.len() != 3 * n * n {
            return Err(Error::Shape {
                expected: format!("3x{n}x{n}"),
                got: format!("3x{}x{}", image.height, image.width),
            });
        }
        Ok(FeatureMap { c: 3, h: n, w: n, data: image.data.iter().map(|&v| v as f64).collect() })
    }

    /// Runs the shared backbone and neck.
    pub fn features(&self, params: &DetectorParams, image: &Image) -> Result<FeatureCache> {
        self.check_params(params)?;
        let p = params.values();
        let mut acts = vec![self.input_map(image)?];
        let mut pres = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let pre = conv.forward(p, acts.last().expect("non-empty"));
            acts.push(silu(&pre));
            pres.push(pre);
        }
        let tap = |l: usize| &acts[self.taps[l] + 1];
        let mut neck_pre = vec![FeatureMap::zeros(0, 0, 0); 3];
        let mut neck = vec![FeatureMap::zeros(0, 0, 0); 3];
        for l in (0..3).rev() {
            let mut pre = self.laterals[l].forward(p, tap(l));
            if l < 2 {
                pre.add_assign(&upsample2(&neck[l + 1]));
            }
            neck[l] = silu(&pre);
            neck_pre[l] = pre;
        }
        Ok(FeatureCache { acts, pres, neck_pre, neck })
    }

    /// Runs one class head on cached features.
    pub fn head(&self, params: &DetectorParams, feats: &FeatureCache, klass: Klass) -> (HeadOutput, HeadCache) {
        let p = params.values();
        let h = &self.heads[klass.index()];
        let mut levels = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for (l, x) in feats.neck.iter().enumerate() {
            let conf_pre = h.conf_hidden.forward(p, x);
            let conf_act = silu(&conf_pre);
            let logits = h.conf_out.forward(p, &conf_act);
            let reg_pre = h.reg_hidden.forward(p, x);
            let reg_act = silu(&reg_pre);
            let reg = h.reg_out.forward(p, &reg_act);
            levels.push(LevelOutput {
                stride: self.config.strides[l],
                h: x.h,
                w: x.w,
                logits: logits.data,
                reg: reg.data,
            });
            caches.push(LevelCache { conf_pre, conf_act, reg_pre, reg_act });
        }
        (HeadOutput { klass, levels }, HeadCache { klass, levels: caches })
    }

    /// Forward pass of one head over a batch of images.
    pub fn forward(&self, params: &DetectorParams, images: &[Image], klass: Klass) -> Result<Vec<HeadOutput>> {
        images
            .iter()
            .map(|img| {
                let feats = self.features(params, img)?;
                Ok(self.head(params, &feats, klass).0)
            })
            .collect()
    }

    /// Both heads on one image, sharing the backbone pass. Indexed by [`Klass::index`].
    pub fn forward_both(&self, params: &DetectorParams, image: &Image) -> Result<[HeadOutput; 2]> {
        let feats = self.features(params, image)?;
        Ok([
            self.head(params, &feats, Klass::Face).0,
            self.head(params, &feats, Klass::Body).0,
        ])
    }

    /// Backpropagates `grad` (loss gradient w.r.t. the head outputs) and
    /// accumulates parameter gradients into `grad_params`.
    pub fn backward(
        &self,
        params: &DetectorParams,
        feats: &FeatureCache,
        cache: &HeadCache,
        grad: &HeadOutput,
        grad_params: &mut [f64],
    ) {
        let p = params.values();
        let h = &self.heads[cache.klass.index()];
        let mut g_neck: Vec<FeatureMap> =
            feats.neck.iter().map(|n| FeatureMap::zeros(n.c, n.h, n.w)).collect();

        for (l, lc) in cache.levels.iter().enumerate() {
            let go = &grad.levels[l];
            let x = &feats.neck[l];
            let g_logit = FeatureMap { c: 1, h: go.h, w: go.w, data: go.logits.clone() };
            let mut g = h
                .conf_out
                .backward(p, &lc.conf_act, &g_logit, grad_params, true)
                .expect("input gradient requested");
            silu_backward(&lc.conf_pre, &mut g);
            let gx = h.conf_hidden.backward(p, x, &g, grad_params, true).expect("requested");
            g_neck[l].add_assign(&gx);

            let g_reg = FeatureMap { c: 4, h: go.h, w: go.w, data: go.reg.clone() };
            let mut g = h
                .reg_out
                .backward(p, &lc.reg_act, &g_reg, grad_params, true)
                .expect("requested");
            silu_backward(&lc.reg_pre, &mut g);
            let gx = h.reg_hidden.backward(p, x, &g, grad_params, true).expect("requested");
            g_neck[l].add_assign(&gx);
        }

        // top-down neck, walked bottom-up for the adjoint
        let mut g_taps: Vec<Option<FeatureMap>> = vec![None, None, None];
        for l in 0..3 {
            let mut g = std::mem::replace(&mut g_neck[l], FeatureMap::zeros(0, 0, 0));
            silu_backward(&feats.neck_pre[l], &mut g);
            let tap = &feats.acts[self.taps[l] + 1];
            g_taps[l] = self.laterals[l].backward(p, tap, &g, grad_params, true);
            if l < 2 {
                let up = upsample2_backward(&g);
                g_neck[l + 1].add_assign(&up);
            }
        }

        let mut g: Option<FeatureMap> = None;
        for i in (0..self.backbone.len()).rev() {
            if let Some(level) = self.taps.iter().position(|&t| t == i) {
                let tg = g_taps[level].take().expect("tap gradient");
                match g.as_mut() {
                    Some(acc) => acc.add_assign(&tg),
                    None => g = Some(tg),
                }
            }
            let mut go = g.take().expect("backbone gradient");
            silu_backward(&feats.pres[i], &mut go);
            g = self.backbone[i].backward(p, &feats.acts[i], &go, grad_params, i > 0);
        }
    }

    /// Forward, loss and backward for one image and one head.
    ///
    /// `loss_fn` maps the head output to a loss value and the gradient of that
    /// loss with respect to the output. Parameter gradients are accumulated
    /// into `grad_params`.
    pub fn loss_and_grad<L>(
        &self,
        params: &DetectorParams,
        image: &Image,
        klass: Klass,
        grad_params: &mut [f64],
        loss_fn: impl FnOnce(&HeadOutput) -> Result<(L, HeadOutput)>,
    ) -> Result<L> {
        let feats = self.features(params, image)?;
        let (out, cache) = self.head(params, &feats, klass);
        let (loss, grad) = loss_fn(&out)?;
        self.backward(params, &feats, &cache, &grad, grad_params);
        Ok(loss)
    }
}
