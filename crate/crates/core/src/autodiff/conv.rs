//! Direct (im2col-free) 2-d convolution kernels over NCHW buffers.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    pub fn simple(stride: usize, padding: usize) -> Self {
        Self::new(stride, padding, 1, 1)
    }
}

/// Output extent along one spatial axis.
pub fn out_extent(size: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = size + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Resolved problem sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn resolve(input: &[usize], weight: &[usize], geom: ConvGeom) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(shape_err!("conv2d input must be NCHW, got {input:?}"));
        };
        let [o, cg, kh, kw] = *weight else {
            return Err(shape_err!("conv2d weight must be OIHW, got {weight:?}"));
        };
        if geom.stride == 0 || geom.dilation == 0 || geom.groups == 0 {
            return Err(Error::Config(format!(
                "conv2d stride, dilation and groups must be >= 1, got {geom:?}"
            )));
        }
        if c % geom.groups != 0 || o % geom.groups != 0 {
            return Err(Error::Config(format!(
                "conv2d channels in={c} out={o} not divisible by groups={}",
                geom.groups
            )));
        }
        if cg != c / geom.groups {
            return Err(shape_err!(
                "conv2d weight expects {cg} input channels per group, input provides {}",
                c / geom.groups
            ));
        }
        let ho = out_extent(h, kh, geom.stride, geom.padding, geom.dilation)
            .ok_or_else(|| shape_err!("conv2d kernel {kh} (dilation {}) exceeds padded height {}", geom.dilation, h + 2 * geom.padding))?;
        let wo = out_extent(w, kw, geom.stride, geom.padding, geom.dilation)
            .ok_or_else(|| shape_err!("conv2d kernel {kw} (dilation {}) exceeds padded width {}", geom.dilation, w + 2 * geom.padding))?;
        Ok(ConvDims {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            geom,
        })
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.o * self.ho * self.wo * (self.c / self.geom.groups) * self.kh * self.kw) as u64
    }
}

/// Range of output indices `o` for which `o*stride + offset - padding` is inside `[0, size)`.
#[inline]
fn valid_range(size: usize, out: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    let (stride, offset, padding, size) = (stride as i64, offset as i64, padding as i64, size as i64);
    // o*stride + offset - padding >= 0
    let lo = if padding > offset {
        (padding - offset + stride - 1) / stride
    } else {
        0
    };
    // o*stride + offset - padding <= size - 1
    let top = size - 1 + padding - offset;
    let hi = if top < 0 { 0 } else { (top / stride + 1).min(out as i64) };
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Visits every (output row, input row) and (output col, input col) pairing for one
/// kernel tap, calling `f(out_index, in_index)` on flattened plane offsets.
#[inline]
fn for_each_tap(d: &ConvDims, kh: usize, kw: usize, mut f: impl FnMut(usize, usize)) {
    let s = d.geom.stride;
    let p = d.geom.padding;
    let dil = d.geom.dilation;
    let (oh0, oh1) = valid_range(d.h, d.ho, s, kh * dil, p);
    let (ow0, ow1) = valid_range(d.w, d.wo, s, kw * dil, p);
    for oh in oh0..oh1 {
        let ih = oh * s + kh * dil - p;
        let out_row = oh * d.wo;
        let in_row = ih * d.w;
        for ow in ow0..ow1 {
            let iw = ow * s + kw * dil - p;
            f(out_row + ow, in_row + iw);
        }
    }
}

pub(crate) fn forward(d: &ConvDims, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.o * d.ho * d.wo];
    let cpg = d.c / d.geom.groups;
    let opg = d.o / d.geom.groups;
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    for n in 0..d.n {
        for oc in 0..d.o {
            let g = oc / opg;
            let dst = &mut out[(n * d.o + oc) * out_plane..][..out_plane];
            for icl in 0..cpg {
                let ic = g * cpg + icl;
                let src = &input[(n * d.c + ic) * in_plane..][..in_plane];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = weight[((oc * cpg + icl) * d.kh + kh) * d.kw + kw];
                        for_each_tap(d, kh, kw, |o, i| dst[o] += wv * src[i]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input(d: &ConvDims, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; d.n * d.c * d.h * d.w];
    let cpg = d.c / d.geom.groups;
    let opg = d.o / d.geom.groups;
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    for n in 0..d.n {
        for oc in 0..d.o {
            let g = oc / opg;
            let go = &grad_out[(n * d.o + oc) * out_plane..][..out_plane];
            for icl in 0..cpg {
                let ic = g * cpg + icl;
                let dst = &mut gin[(n * d.c + ic) * in_plane..][..in_plane];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = weight[((oc * cpg + icl) * d.kh + kh) * d.kw + kw];
                        for_each_tap(d, kh, kw, |o, i| dst[i] += wv * go[o]);
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn backward_weight(d: &ConvDims, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let cpg = d.c / d.geom.groups;
    let opg = d.o / d.geom.groups;
    let mut gw = vec![0.0; d.o * cpg * d.kh * d.kw];
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    for n in 0..d.n {
        for oc in 0..d.o {
            let g = oc / opg;
            let go = &grad_out[(n * d.o + oc) * out_plane..][..out_plane];
            for icl in 0..cpg {
                let ic = g * cpg + icl;
                let src = &input[(n * d.c + ic) * in_plane..][..in_plane];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let mut acc = 0.0;
                        for_each_tap(d, kh, kw, |o, i| acc += go[o] * src[i]);
                        gw[((oc * cpg + icl) * d.kh + kh) * d.kw + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for size in 1..9 {
            for stride in 1..4 {
                for offset in 0..7 {
                    for padding in 0..4 {
                        let out = 12;
                        let (lo, hi) = valid_range(size, out, stride, offset, padding);
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + offset) as i64 - padding as i64;
                                i >= 0 && i < size as i64
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "size={size} stride={stride} offset={offset} pad={padding}");
                    }
                }
            }
        }
    }

    #[test]
    fn dilated_output_extent() {
        // k=3, dilation 2 spans 5 pixels
        assert_eq!(out_extent(8, 3, 1, 2, 2), Some(8));
        assert_eq!(out_extent(3, 5, 1, 0, 1), None);
    }
}
