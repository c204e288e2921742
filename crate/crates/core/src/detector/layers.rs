//! Dense feature maps and the handful of layers the detector needs, with
//! explicit backward passes.

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(pre: &FeatureMap) -> FeatureMap {
    FeatureMap {
        c: pre.c,
        h: pre.h,
        w: pre.w,
        data: pre.data.iter().map(|&x| x * sigmoid(x)).collect(),
    }
}

/// Multiplies `grad` in place by the SiLU derivative evaluated at `pre`.
pub fn silu_backward(pre: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &x) in grad.data.iter_mut().zip(&pre.data) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}

pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = FeatureMap::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(grad: &FeatureMap) -> FeatureMap {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut out = FeatureMap::zeros(grad.c, h, w);
    for c in 0..grad.c {
        let src = grad.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad.h {
            for x in 0..grad.w {
                dst[(y / 2) * w + x / 2] += src[y * grad.w + x];
            }
        }
    }
    out
}

/// A square convolution whose weights live at `offset` inside the flat
/// parameter vector: `out_c * in_c * k * k` weights followed by `out_c` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

impl Conv {
    pub fn n_weights(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    pub fn n_params(&self) -> usize {
        self.n_weights() + self.out_c
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.n_weights()
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output columns `ox` for which `ox * stride + kx - pad` falls inside `[0, n_in)`.
    fn valid_range(&self, kx: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // smallest ox with ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox*s + off <= n_in - 1
        let hi_num = n_in as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(n_out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    pub fn forward(&self, params: &[f64], input: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(input.c, self.in_c);
        let oh = self.out_dim(input.h);
        let ow = self.out_dim(input.w);
        let mut out = FeatureMap::zeros(self.out_c, oh, ow);
        let weights = &params[self.offset..self.offset + self.n_weights()];
        let biases = &params[self.bias_offset()..self.bias_offset() + self.out_c];
        let k = self.k;
        let s = self.stride;
        let xr: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_range(kx, input.w, ow)).collect();
        let yr: Vec<(usize, usize)> = (0..k).map(|ky| self.valid_range(ky, input.h, oh)).collect();
        for oc in 0..self.out_c {
            let dst = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            dst.fill(biases[oc]);
            for ic in 0..self.in_c {
                let src = input.plane(ic);
                for ky in 0..k {
                    let (y0, y1) = yr[ky];
                    for kx in 0..k {
                        let wv = weights[((oc * self.in_c + ic) * k + ky) * k + kx];
                        let (x0, x1) = xr[kx];
                        if x0 >= x1 || y0 >= y1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.pad;
                            let src_row = &src[iy * input.w..(iy + 1) * input.w];
                            let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let ix0 = x0 + kx - self.pad;
                                for (d, &v) in dst_row[x0..x1]
                                    .iter_mut()
                                    .zip(&src_row[ix0..ix0 + (x1 - x0)])
                                {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in x0..x1 {
                                    dst_row[ox] += wv * src_row[ox * s + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to `input` when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        input: &FeatureMap,
        grad_out: &FeatureMap,
        grad_params: &mut [f64],
        want_input: bool,
    ) -> Option<FeatureMap> {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let k = self.k;
        let s = self.stride;
        let weights = &params[self.offset..self.offset + self.n_weights()];
        let mut grad_in = want_input.then(|| FeatureMap::zeros(input.c, input.h, input.w));
        let xr: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_range(kx, input.w, ow)).collect();
        let yr: Vec<(usize, usize)> = (0..k).map(|ky| self.valid_range(ky, input.h, oh)).collect();
        let bias_off = self.bias_offset();
        for oc in 0..self.out_c {
            let g = grad_out.plane(oc);
            grad_params[bias_off + oc] += g.iter().sum::<f64>();
            for ic in 0..self.in_c {
                let src = input.plane(ic);
                for ky in 0..k {
                    let (y0, y1) = yr[ky];
                    for kx in 0..k {
                        let widx = ((oc * self.in_c + ic) * k + ky) * k + kx;
                        let wv = weights[widx];
                        let (x0, x1) = xr[kx];
                        if x0 >= x1 || y0 >= y1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.pad;
                            let g_row = &g[oy * ow..(oy + 1) * ow];
                            let src_row = &src[iy * input.w..(iy + 1) * input.w];
                            for ox in x0..x1 {
                                acc += g_row[ox] * src_row[ox * s + kx - self.pad];
                            }
                            if let Some(gi) = grad_in.as_mut() {
                                let n = input.h * input.w;
                                let gi_row =
                                    &mut gi.data[ic * n + iy * input.w..ic * n + (iy + 1) * input.w];
                                for ox in x0..x1 {
                                    gi_row[ox * s + kx - self.pad] += wv * g_row[ox];
                                }
                            }
                        }
                        grad_params[self.offset + widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}
