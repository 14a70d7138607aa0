use serde::{Deserialize, Serialize};

use super::conv::out_extent;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    /// Padded positions are excluded from the divisor.
    Avg,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolDims {
    pub fn resolve(input: &[usize], k: usize, stride: usize, padding: usize) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(shape_err!("pool2d input must be NCHW, got {input:?}"));
        };
        if k == 0 || stride == 0 {
            return Err(shape_err!("pool2d window and stride must be >= 1"));
        }
        if padding >= k {
            return Err(shape_err!("pool2d padding {padding} must be smaller than window {k}"));
        }
        let ho = out_extent(h, k, stride, padding, 1)
            .ok_or_else(|| shape_err!("pool2d window {k} larger than padded height {}", h + 2 * padding))?;
        let wo = out_extent(w, k, stride, padding, 1)
            .ok_or_else(|| shape_err!("pool2d window {k} larger than padded width {}", w + 2 * padding))?;
        Ok(PoolDims {
            n,
            c,
            h,
            w,
            k,
            stride,
            padding,
            ho,
            wo,
        })
    }

    /// Clipped input window `[h0, h1) x [w0, w1)` for an output position.
    #[inline]
    fn window(&self, oh: usize, ow: usize) -> (usize, usize, usize, usize) {
        let h0 = (oh * self.stride) as i64 - self.padding as i64;
        let w0 = (ow * self.stride) as i64 - self.padding as i64;
        let h1 = (h0 + self.k as i64).min(self.h as i64) as usize;
        let w1 = (w0 + self.k as i64).min(self.w as i64) as usize;
        (h0.max(0) as usize, h1, w0.max(0) as usize, w1)
    }
}

/// Returns the pooled output and, for max pooling, the flat input index of
/// each output's maximum (first occurrence wins ties).
pub(crate) fn forward(d: &PoolDims, kind: PoolKind, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let planes = d.n * d.c;
    let mut out = vec![0.0; planes * d.ho * d.wo];
    let mut argmax = match kind {
        PoolKind::Max => vec![0usize; out.len()],
        PoolKind::Avg => Vec::new(),
    };
    for p in 0..planes {
        let base = p * d.h * d.w;
        for oh in 0..d.ho {
            for ow in 0..d.wo {
                let (h0, h1, w0, w1) = d.window(oh, ow);
                let oi = (p * d.ho + oh) * d.wo + ow;
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = base + h0 * d.w + w0;
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                let i = base + ih * d.w + iw;
                                if input[i] > best {
                                    best = input[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_i;
                    }
                    PoolKind::Avg => {
                        let mut acc = 0.0;
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                acc += input[base + ih * d.w + iw];
                            }
                        }
                        out[oi] = acc / ((h1 - h0) * (w1 - w0)) as f64;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn backward(d: &PoolDims, kind: PoolKind, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let planes = d.n * d.c;
    let mut gin = vec![0.0; planes * d.h * d.w];
    match kind {
        PoolKind::Max => {
            for (g, &i) in grad_out.iter().zip(argmax) {
                gin[i] += g;
            }
        }
        PoolKind::Avg => {
            for p in 0..planes {
                let base = p * d.h * d.w;
                for oh in 0..d.ho {
                    for ow in 0..d.wo {
                        let (h0, h1, w0, w1) = d.window(oh, ow);
                        let g = grad_out[(p * d.ho + oh) * d.wo + ow] / ((h1 - h0) * (w1 - w0)) as f64;
                        for ih in h0..h1 {
                            for iw in w0..w1 {
                                gin[base + ih * d.w + iw] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}
