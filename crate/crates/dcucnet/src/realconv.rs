//! Real 2-D cross-correlation primitives over [batch, channel, freq, time]
//! tensors, plus the transposed (fractionally-strided) form and both
//! gradient passes. The complex kernels combine four of these per op; the
//! visual frontend uses them directly.
//!
//! Inner loops run along the time axis, which is contiguous in the row-major
//! layout, so they autovectorize. The time stride gets a fast path because
//! the model always uses stride 1 there.

use crate::error::{DcucError, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub ic: usize,
    pub f: usize,
    pub t: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub sf: usize,
    pub st: usize,
    pub pf: usize,
    pub pt: usize,
    pub fo: usize,
    pub to: usize,
}

impl ConvDims {
    pub fn forward(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<ConvDims> {
        let (b, ic, f, t) = shape4(x_shape, "conv input")?;
        let (oc, wic, kh, kw) = shape4(w_shape, "conv weight")?;
        if ic != wic {
            return Err(DcucError::Shape(format!(
                "conv channel mismatch: input has {ic}, weight expects {wic}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(DcucError::Shape("conv stride must be >= 1".into()));
        }
        let (pf, pt) = padding;
        if f + 2 * pf < kh || t + 2 * pt < kw {
            return Err(DcucError::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                f + 2 * pf,
                t + 2 * pt
            )));
        }
        Ok(ConvDims {
            b,
            ic,
            f,
            t,
            oc,
            kh,
            kw,
            sf: stride.0,
            st: stride.1,
            pf,
            pt,
            fo: (f + 2 * pf - kh) / stride.0 + 1,
            to: (t + 2 * pt - kw) / stride.1 + 1,
        })
    }

    /// Dims for a transposed conv; `fo`/`to` are the (larger) output dims.
    pub fn transposed(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<ConvDims> {
        let (b, ic, f, t) = shape4(x_shape, "conv-transpose input")?;
        let (oc, wic, kh, kw) = shape4(w_shape, "conv-transpose weight")?;
        if ic != wic {
            return Err(DcucError::Shape(format!(
                "conv-transpose channel mismatch: input has {ic}, weight expects {wic}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(DcucError::Shape("conv stride must be >= 1".into()));
        }
        let (pf, pt) = padding;
        let fo_raw = (f - 1) * stride.0 + kh;
        let to_raw = (t - 1) * stride.1 + kw;
        if fo_raw <= 2 * pf || to_raw <= 2 * pt {
            return Err(DcucError::Shape(format!(
                "conv-transpose output {}x{} vanishes under padding ({pf},{pt})",
                fo_raw, to_raw
            )));
        }
        Ok(ConvDims {
            b,
            ic,
            f,
            t,
            oc,
            kh,
            kw,
            sf: stride.0,
            st: stride.1,
            pf,
            pt,
            fo: fo_raw - 2 * pf,
            to: to_raw - 2 * pt,
        })
    }
}

fn shape4(s: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if s.len() != 4 {
        return Err(DcucError::Shape(format!("{what} must be 4-D, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// out[b,o,of,ot] += scale * sum_{i,kf,kt} x[b,i,of*sf+kf-pf, ot*st+kt-pt] * w[o,i,kf,kt]
pub(crate) fn conv2d_acc(out: &mut [f64], x: &[f64], w: &[f64], d: &ConvDims, scale: f64) {
    for bb in 0..d.b {
        let xb = &x[bb * d.ic * d.f * d.t..];
        let ob = &mut out[bb * d.oc * d.fo * d.to..];
        for o in 0..d.oc {
            for of in 0..d.fo {
                let orow = &mut ob[(o * d.fo + of) * d.to..(o * d.fo + of) * d.to + d.to];
                for i in 0..d.ic {
                    for kf in 0..d.kh {
                        let fi = (of * d.sf + kf) as isize - d.pf as isize;
                        if fi < 0 || fi >= d.f as isize {
                            continue;
                        }
                        let xrow = &xb[(i * d.f + fi as usize) * d.t..][..d.t];
                        let wrow = &w[((o * d.ic + i) * d.kh + kf) * d.kw..][..d.kw];
                        for (kt, &wv) in wrow.iter().enumerate() {
                            let wv = wv * scale;
                            accumulate_gather(orow, xrow, wv, kt as isize - d.pt as isize, d.st);
                        }
                    }
                }
            }
        }
    }
}

/// orow[ot] += wv * xrow[ot*st + shift] over the valid range.
#[inline]
fn accumulate_gather(orow: &mut [f64], xrow: &[f64], wv: f64, shift: isize, st: usize) {
    let t = xrow.len() as isize;
    if st == 1 {
        let lo = (-shift).max(0) as usize;
        let hi = ((t - shift).min(orow.len() as isize)).max(0) as usize;
        if lo >= hi {
            return;
        }
        let xs = &xrow[(lo as isize + shift) as usize..][..hi - lo];
        for (a, &b) in orow[lo..hi].iter_mut().zip(xs) {
            *a += wv * b;
        }
    } else {
        for (ot, a) in orow.iter_mut().enumerate() {
            let ti = (ot * st) as isize + shift;
            if ti >= 0 && ti < t {
                *a += wv * xrow[ti as usize];
            }
        }
    }
}

/// xrow-grad scatter: dx[ot*st + shift] += wv * grow[ot].
#[inline]
fn accumulate_scatter(dxrow: &mut [f64], grow: &[f64], wv: f64, shift: isize, st: usize) {
    let t = dxrow.len() as isize;
    if st == 1 {
        let lo = (-shift).max(0) as usize;
        let hi = ((t - shift).min(grow.len() as isize)).max(0) as usize;
        if lo >= hi {
            return;
        }
        let dst = &mut dxrow[(lo as isize + shift) as usize..][..hi - lo];
        for (a, &b) in dst.iter_mut().zip(&grow[lo..hi]) {
            *a += wv * b;
        }
    } else {
        for (ot, &g) in grow.iter().enumerate() {
            let ti = (ot * st) as isize + shift;
            if ti >= 0 && ti < t {
                dxrow[ti as usize] += wv * g;
            }
        }
    }
}

/// dx[b,i,fi,ti] += scale * sum_{o,kf,kt} g[b,o,of,ot] * w[o,i,kf,kt]
/// (adjoint of `conv2d_acc` in its input).
pub(crate) fn conv2d_input_grad_acc(dx: &mut [f64], g: &[f64], w: &[f64], d: &ConvDims, scale: f64) {
    for bb in 0..d.b {
        let gb = &g[bb * d.oc * d.fo * d.to..];
        let dxb = &mut dx[bb * d.ic * d.f * d.t..];
        for o in 0..d.oc {
            for of in 0..d.fo {
                let grow = &gb[(o * d.fo + of) * d.to..][..d.to];
                for i in 0..d.ic {
                    for kf in 0..d.kh {
                        let fi = (of * d.sf + kf) as isize - d.pf as isize;
                        if fi < 0 || fi >= d.f as isize {
                            continue;
                        }
                        let dxrow = &mut dxb[(i * d.f + fi as usize) * d.t..][..d.t];
                        let wrow = &w[((o * d.ic + i) * d.kh + kf) * d.kw..][..d.kw];
                        for (kt, &wv) in wrow.iter().enumerate() {
                            accumulate_scatter(
                                dxrow,
                                grow,
                                wv * scale,
                                kt as isize - d.pt as isize,
                                d.st,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// dw[o,i,kf,kt] += scale * sum_{b,of,ot} g[b,o,of,ot] * x[b,i,of*sf+kf-pf, ot*st+kt-pt]
pub(crate) fn conv2d_weight_grad_acc(
    dw: &mut [f64],
    x: &[f64],
    g: &[f64],
    d: &ConvDims,
    scale: f64,
) {
    for bb in 0..d.b {
        let xb = &x[bb * d.ic * d.f * d.t..];
        let gb = &g[bb * d.oc * d.fo * d.to..];
        for o in 0..d.oc {
            for of in 0..d.fo {
                let grow = &gb[(o * d.fo + of) * d.to..][..d.to];
                for i in 0..d.ic {
                    for kf in 0..d.kh {
                        let fi = (of * d.sf + kf) as isize - d.pf as isize;
                        if fi < 0 || fi >= d.f as isize {
                            continue;
                        }
                        let xrow = &xb[(i * d.f + fi as usize) * d.t..][..d.t];
                        let dwrow = &mut dw[((o * d.ic + i) * d.kh + kf) * d.kw..][..d.kw];
                        for (kt, dwv) in dwrow.iter_mut().enumerate() {
                            *dwv += scale * dot_gather(grow, xrow, kt as isize - d.pt as isize, d.st);
                        }
                    }
                }
            }
        }
    }
}

/// sum_ot grow[ot] * xrow[ot*st + shift] over the valid range.
#[inline]
fn dot_gather(grow: &[f64], xrow: &[f64], shift: isize, st: usize) -> f64 {
    let t = xrow.len() as isize;
    if st == 1 {
        let lo = (-shift).max(0) as usize;
        let hi = ((t - shift).min(grow.len() as isize)).max(0) as usize;
        if lo >= hi {
            return 0.0;
        }
        let xs = &xrow[(lo as isize + shift) as usize..][..hi - lo];
        grow[lo..hi].iter().zip(xs).map(|(a, b)| a * b).sum()
    } else {
        let mut acc = 0.0;
        for (ot, &g) in grow.iter().enumerate() {
            let ti = (ot * st) as isize + shift;
            if ti >= 0 && ti < t {
                acc += g * xrow[ti as usize];
            }
        }
        acc
    }
}

/// Transposed conv: out[b,o, fi*sf+kf-pf, ti*st+kt-pt] += scale * x[b,i,fi,ti] * w[o,i,kf,kt].
pub(crate) fn conv_transpose2d_acc(out: &mut [f64], x: &[f64], w: &[f64], d: &ConvDims, scale: f64) {
    for bb in 0..d.b {
        let xb = &x[bb * d.ic * d.f * d.t..];
        let ob = &mut out[bb * d.oc * d.fo * d.to..];
        for o in 0..d.oc {
            for i in 0..d.ic {
                for fi in 0..d.f {
                    let xrow = &xb[(i * d.f + fi) * d.t..][..d.t];
                    for kf in 0..d.kh {
                        let fo = (fi * d.sf + kf) as isize - d.pf as isize;
                        if fo < 0 || fo >= d.fo as isize {
                            continue;
                        }
                        let orow = &mut ob[(o * d.fo + fo as usize) * d.to..][..d.to];
                        let wrow = &w[((o * d.ic + i) * d.kh + kf) * d.kw..][..d.kw];
                        for (kt, &wv) in wrow.iter().enumerate() {
                            accumulate_scatter(
                                orow,
                                xrow,
                                wv * scale,
                                kt as isize - d.pt as isize,
                                d.st,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `conv_transpose2d_acc` in its input: a gather with the same
/// index map.
pub(crate) fn conv_transpose2d_input_grad_acc(
    dx: &mut [f64],
    g: &[f64],
    w: &[f64],
    d: &ConvDims,
    scale: f64,
) {
    for bb in 0..d.b {
        let gb = &g[bb * d.oc * d.fo * d.to..];
        let dxb = &mut dx[bb * d.ic * d.f * d.t..];
        for o in 0..d.oc {
            for i in 0..d.ic {
                for fi in 0..d.f {
                    let dxrow = &mut dxb[(i * d.f + fi) * d.t..][..d.t];
                    for kf in 0..d.kh {
                        let fo = (fi * d.sf + kf) as isize - d.pf as isize;
                        if fo < 0 || fo >= d.fo as isize {
                            continue;
                        }
                        let grow = &gb[(o * d.fo + fo as usize) * d.to..][..d.to];
                        let wrow = &w[((o * d.ic + i) * d.kh + kf) * d.kw..][..d.kw];
                        for (kt, &wv) in wrow.iter().enumerate() {
                            accumulate_gather(
                                dxrow,
                                grow,
                                wv * scale,
                                kt as isize - d.pt as isize,
                                d.st,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// dw[o,i,kf,kt] += scale * sum x[b,i,fi,ti] * g[b,o, fi*sf+kf-pf, ti*st+kt-pt]
pub(crate) fn conv_transpose2d_weight_grad_acc(
    dw: &mut [f64],
    x: &[f64],
    g: &[f64],
    d: &ConvDims,
    scale: f64,
) {
    for bb in 0..d.b {
        let xb = &x[bb * d.ic * d.f * d.t..];
        let gb = &g[bb * d.oc * d.fo * d.to..];
        for o in 0..d.oc {
            for i in 0..d.ic {
                for fi in 0..d.f {
                    let xrow = &xb[(i * d.f + fi) * d.t..][..d.t];
                    for kf in 0..d.kh {
                        let fo = (fi * d.sf + kf) as isize - d.pf as isize;
                        if fo < 0 || fo >= d.fo as isize {
                            continue;
                        }
                        let grow = &gb[(o * d.fo + fo as usize) * d.to..][..d.to];
                        let dwrow = &mut dw[((o * d.ic + i) * d.kh + kf) * d.kw..][..d.kw];
                        for (kt, dwv) in dwrow.iter_mut().enumerate() {
                            *dwv += scale * dot_scatter(xrow, grow, kt as isize - d.pt as isize, d.st);
                        }
                    }
                }
            }
        }
    }
}

/// sum_ti xrow[ti] * grow[ti*st + shift] over the valid range.
#[inline]
fn dot_scatter(xrow: &[f64], grow: &[f64], shift: isize, st: usize) -> f64 {
    // Same index map as accumulate_scatter, reduced instead of written.
    let t = grow.len() as isize;
    if st == 1 {
        let lo = (-shift).max(0) as usize;
        let hi = ((t - shift).min(xrow.len() as isize)).max(0) as usize;
        if lo >= hi {
            return 0.0;
        }
        let gs = &grow[(lo as isize + shift) as usize..][..hi - lo];
        xrow[lo..hi].iter().zip(gs).map(|(a, b)| a * b).sum()
    } else {
        let mut acc = 0.0;
        for (ti, &xv) in xrow.iter().enumerate() {
            let to = (ti * st) as isize + shift;
            if to >= 0 && to < t {
                acc += xv * grow[to as usize];
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.b * d.oc * d.fo * d.to];
        for bb in 0..d.b {
            for o in 0..d.oc {
                for of in 0..d.fo {
                    for ot in 0..d.to {
                        let mut acc = 0.0;
                        for i in 0..d.ic {
                            for kf in 0..d.kh {
                                for kt in 0..d.kw {
                                    let fi = (of * d.sf + kf) as isize - d.pf as isize;
                                    let ti = (ot * d.st + kt) as isize - d.pt as isize;
                                    if fi >= 0
                                        && fi < d.f as isize
                                        && ti >= 0
                                        && ti < d.t as isize
                                    {
                                        acc += x[((bb * d.ic + i) * d.f + fi as usize) * d.t
                                            + ti as usize]
                                            * w[((o * d.ic + i) * d.kh + kf) * d.kw + kt];
                                    }
                                }
                            }
                        }
                        out[((bb * d.oc + o) * d.fo + of) * d.to + ot] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut seed = 123u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for &(sf, st, pf, pt) in &[(1, 1, 0, 0), (2, 1, 2, 1), (2, 2, 1, 0), (3, 1, 0, 2)] {
            let x: Vec<f64> = (0..2 * 3 * 9 * 7).map(|_| next()).collect();
            let w: Vec<f64> = (0..4 * 3 * 5 * 2).map(|_| next()).collect();
            let d = ConvDims::forward(&[2, 3, 9, 7], &[4, 3, 5, 2], (sf, st), (pf, pt)).unwrap();
            let mut out = vec![0.0; d.b * d.oc * d.fo * d.to];
            conv2d_acc(&mut out, &x, &w, &d, 1.0);
            let want = naive_conv(&x, &w, &d);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} at stride ({sf},{st})");
            }
        }
    }

    #[test]
    fn transpose_shapes_invert_forward() {
        // forward 16 -> ceil(16/2) = 8 with kh 5, pad 2; transpose 8 -> 15.
        let d = ConvDims::transposed(&[1, 1, 8, 4], &[1, 1, 5, 2], (2, 1), (2, 0)).unwrap();
        assert_eq!(d.fo, 15);
        assert_eq!(d.to, 5);
        let d2 = ConvDims::transposed(&[1, 1, 9, 4], &[1, 1, 5, 2], (2, 1), (2, 0)).unwrap();
        assert_eq!(d2.fo, 17);
    }

    #[test]
    fn rejects_oversized_kernel() {
        assert!(ConvDims::forward(&[1, 1, 3, 3], &[1, 1, 5, 1], (1, 1), (0, 0)).is_err());
    }
}
