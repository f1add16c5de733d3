//! Complex-valued neural kernels: complex Conv2d, complex transposed Conv2d,
//! complex batch normalization, and real-valued PReLU.
//!
//! A complex convolution with kernel W = Wr + jWi applied to X = Xr + jXi
//! expands into four real cross-correlations:
//!
//! ```text
//! out = (Xr*Wr - Xi*Wi) + j(Xr*Wi + Xi*Wr)
//! ```
//!
//! Complex batch normalization whitens the per-channel (real, imag)
//! distribution by the inverse square root of its 2x2 covariance and applies
//! a learned 2x2 affine. Every kernel carries a hand-derived backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DcucError, Result};
use crate::realconv::{
    conv2d_acc, conv2d_input_grad_acc, conv2d_weight_grad_acc, conv_transpose2d_acc,
    conv_transpose2d_input_grad_acc, conv_transpose2d_weight_grad_acc, ConvDims,
};
use crate::tensor::{ComplexTensor, Tensor};

/// Whether normalization layers use batch statistics (and report updates for
/// the running ones) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Complex convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ComplexConvParams {
    /// [out_ch, in_ch, kh, kw]
    pub w_real: Tensor,
    pub w_imag: Tensor,
    /// [out_ch]
    pub b_real: Tensor,
    pub b_imag: Tensor,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ComplexConvParams {
    pub fn zeros(
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        let wshape = [out_ch, in_ch, kernel.0, kernel.1];
        ComplexConvParams {
            w_real: Tensor::zeros(&wshape),
            w_imag: Tensor::zeros(&wshape),
            b_real: Tensor::zeros(&[out_ch]),
            b_imag: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    /// Uniform init scaled by 1/sqrt(in_ch*kh*kw), drawn independently for
    /// the real and imaginary kernels.
    pub fn init_random(
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Self::zeros(out_ch, in_ch, kernel, stride, padding);
        let bound = 1.0 / ((in_ch * kernel.0 * kernel.1) as f64).sqrt();
        for v in p.w_real.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        for v in p.w_imag.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn out_ch(&self) -> usize {
        self.w_real.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.w_real.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct ComplexConvGrads {
    pub w_real: Tensor,
    pub w_imag: Tensor,
    pub b_real: Tensor,
    pub b_imag: Tensor,
}

fn add_bias(out: &mut ComplexTensor, br: &Tensor, bi: &Tensor, d: &ConvDims) {
    for bb in 0..d.b {
        for o in 0..d.oc {
            let base = (bb * d.oc + o) * d.fo * d.to;
            let (vr, vi) = (br.data()[o], bi.data()[o]);
            for k in 0..d.fo * d.to {
                out.re.data_mut()[base + k] += vr;
                out.im.data_mut()[base + k] += vi;
            }
        }
    }
}

fn bias_grad(g: &ComplexTensor, d: &ConvDims) -> (Tensor, Tensor) {
    let mut br = Tensor::zeros(&[d.oc]);
    let mut bi = Tensor::zeros(&[d.oc]);
    for bb in 0..d.b {
        for o in 0..d.oc {
            let base = (bb * d.oc + o) * d.fo * d.to;
            let mut sr = 0.0;
            let mut si = 0.0;
            for k in 0..d.fo * d.to {
                sr += g.re.data()[base + k];
                si += g.im.data()[base + k];
            }
            br.data_mut()[o] += sr;
            bi.data_mut()[o] += si;
        }
    }
    (br, bi)
}

pub fn complex_conv2d(x: &ComplexTensor, p: &ComplexConvParams) -> Result<ComplexTensor> {
    let d = ConvDims::forward(x.shape(), p.w_real.shape(), p.stride, p.padding)?;
    let mut out = ComplexTensor::zeros(&[d.b, d.oc, d.fo, d.to]);
    conv2d_acc(out.re.data_mut(), x.re.data(), p.w_real.data(), &d, 1.0);
    conv2d_acc(out.re.data_mut(), x.im.data(), p.w_imag.data(), &d, -1.0);
    conv2d_acc(out.im.data_mut(), x.re.data(), p.w_imag.data(), &d, 1.0);
    conv2d_acc(out.im.data_mut(), x.im.data(), p.w_real.data(), &d, 1.0);
    add_bias(&mut out, &p.b_real, &p.b_imag, &d);
    Ok(out)
}

pub fn complex_conv2d_backward(
    x: &ComplexTensor,
    p: &ComplexConvParams,
    g: &ComplexTensor,
) -> Result<(ComplexTensor, ComplexConvGrads)> {
    let d = ConvDims::forward(x.shape(), p.w_real.shape(), p.stride, p.padding)?;
    if g.shape() != [d.b, d.oc, d.fo, d.to] {
        return Err(DcucError::Shape(format!(
            "conv gradient shape {:?} != output shape {:?}",
            g.shape(),
            [d.b, d.oc, d.fo, d.to]
        )));
    }

    let mut dx = ComplexTensor::zeros(x.shape());
    conv2d_input_grad_acc(dx.re.data_mut(), g.re.data(), p.w_real.data(), &d, 1.0);
    conv2d_input_grad_acc(dx.re.data_mut(), g.im.data(), p.w_imag.data(), &d, 1.0);
    conv2d_input_grad_acc(dx.im.data_mut(), g.re.data(), p.w_imag.data(), &d, -1.0);
    conv2d_input_grad_acc(dx.im.data_mut(), g.im.data(), p.w_real.data(), &d, 1.0);

    let mut dwr = Tensor::zeros(p.w_real.shape());
    let mut dwi = Tensor::zeros(p.w_imag.shape());
    conv2d_weight_grad_acc(dwr.data_mut(), x.re.data(), g.re.data(), &d, 1.0);
    conv2d_weight_grad_acc(dwr.data_mut(), x.im.data(), g.im.data(), &d, 1.0);
    conv2d_weight_grad_acc(dwi.data_mut(), x.im.data(), g.re.data(), &d, -1.0);
    conv2d_weight_grad_acc(dwi.data_mut(), x.re.data(), g.im.data(), &d, 1.0);

    let (dbr, dbi) = bias_grad(g, &d);
    Ok((
        dx,
        ComplexConvGrads {
            w_real: dwr,
            w_imag: dwi,
            b_real: dbr,
            b_imag: dbi,
        },
    ))
}

pub fn complex_conv_transpose2d(x: &ComplexTensor, p: &ComplexConvParams) -> Result<ComplexTensor> {
    let d = ConvDims::transposed(x.shape(), p.w_real.shape(), p.stride, p.padding)?;
    let mut out = ComplexTensor::zeros(&[d.b, d.oc, d.fo, d.to]);
    conv_transpose2d_acc(out.re.data_mut(), x.re.data(), p.w_real.data(), &d, 1.0);
    conv_transpose2d_acc(out.re.data_mut(), x.im.data(), p.w_imag.data(), &d, -1.0);
    conv_transpose2d_acc(out.im.data_mut(), x.re.data(), p.w_imag.data(), &d, 1.0);
    conv_transpose2d_acc(out.im.data_mut(), x.im.data(), p.w_real.data(), &d, 1.0);
    add_bias(&mut out, &p.b_real, &p.b_imag, &d);
    Ok(out)
}

pub fn complex_conv_transpose2d_backward(
    x: &ComplexTensor,
    p: &ComplexConvParams,
    g: &ComplexTensor,
) -> Result<(ComplexTensor, ComplexConvGrads)> {
    let d = ConvDims::transposed(x.shape(), p.w_real.shape(), p.stride, p.padding)?;
    if g.shape() != [d.b, d.oc, d.fo, d.to] {
        return Err(DcucError::Shape(format!(
            "conv-transpose gradient shape {:?} != output shape {:?}",
            g.shape(),
            [d.b, d.oc, d.fo, d.to]
        )));
    }

    let mut dx = ComplexTensor::zeros(x.shape());
    conv_transpose2d_input_grad_acc(dx.re.data_mut(), g.re.data(), p.w_real.data(), &d, 1.0);
    conv_transpose2d_input_grad_acc(dx.re.data_mut(), g.im.data(), p.w_imag.data(), &d, 1.0);
    conv_transpose2d_input_grad_acc(dx.im.data_mut(), g.re.data(), p.w_imag.data(), &d, -1.0);
    conv_transpose2d_input_grad_acc(dx.im.data_mut(), g.im.data(), p.w_real.data(), &d, 1.0);

    let mut dwr = Tensor::zeros(p.w_real.shape());
    let mut dwi = Tensor::zeros(p.w_imag.shape());
    conv_transpose2d_weight_grad_acc(dwr.data_mut(), x.re.data(), g.re.data(), &d, 1.0);
    conv_transpose2d_weight_grad_acc(dwr.data_mut(), x.im.data(), g.im.data(), &d, 1.0);
    conv_transpose2d_weight_grad_acc(dwi.data_mut(), x.im.data(), g.re.data(), &d, -1.0);
    conv_transpose2d_weight_grad_acc(dwi.data_mut(), x.re.data(), g.im.data(), &d, 1.0);

    let (dbr, dbi) = bias_grad(g, &d);
    Ok((
        dx,
        ComplexConvGrads {
            w_real: dwr,
            w_imag: dwi,
            b_real: dbr,
            b_imag: dbi,
        },
    ))
}

// ---------------------------------------------------------------------------
// Complex batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ComplexBatchNormParams {
    /// 2x2 symmetric affine per channel: [[gamma_rr, gamma_ri], [gamma_ri, gamma_ii]].
    pub gamma_rr: Tensor,
    pub gamma_ri: Tensor,
    pub gamma_ii: Tensor,
    pub beta_r: Tensor,
    pub beta_i: Tensor,
    pub run_mean_r: Tensor,
    pub run_mean_i: Tensor,
    pub run_vrr: Tensor,
    pub run_vri: Tensor,
    pub run_vii: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl ComplexBatchNormParams {
    pub fn new(channels: usize) -> Self {
        let half = std::f64::consts::FRAC_1_SQRT_2;
        ComplexBatchNormParams {
            gamma_rr: Tensor::full(&[channels], half),
            gamma_ri: Tensor::zeros(&[channels]),
            gamma_ii: Tensor::full(&[channels], half),
            beta_r: Tensor::zeros(&[channels]),
            beta_i: Tensor::zeros(&[channels]),
            run_mean_r: Tensor::zeros(&[channels]),
            run_mean_i: Tensor::zeros(&[channels]),
            run_vrr: Tensor::full(&[channels], half),
            run_vri: Tensor::zeros(&[channels]),
            run_vii: Tensor::full(&[channels], half),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma_rr.shape()[0]
    }
}

/// Per-channel whitening matrix W = (V + eps I)^(-1/2) via the closed form
/// for a 2x2 SPD matrix: with s = sqrt(det), t = sqrt(trace + 2s),
/// W = [[c+s, -b], [-b, a+s]] / (s*t).
#[derive(Debug, Clone, Copy)]
struct Whiten {
    a: f64,
    b: f64,
    c: f64,
    s: f64,
    t: f64,
    w11: f64,
    w12: f64,
    w22: f64,
}

fn whiten(vrr: f64, vri: f64, vii: f64, eps: f64) -> Whiten {
    let a = vrr + eps;
    let b = vri;
    let c = vii + eps;
    let s = (a * c - b * b).max(0.0).sqrt();
    let t = (a + c + 2.0 * s).sqrt();
    let q = 1.0 / (s * t);
    Whiten {
        a,
        b,
        c,
        s,
        t,
        w11: q * (c + s),
        w12: -q * b,
        w22: q * (a + s),
    }
}

/// Batch statistics update produced by a train-mode forward pass; the owner
/// of the parameters applies it explicitly (keeps forward passes pure).
#[derive(Debug, Clone)]
pub struct CbnStatsUpdate {
    pub mean_r: Vec<f64>,
    pub mean_i: Vec<f64>,
    pub vrr: Vec<f64>,
    pub vri: Vec<f64>,
    pub vii: Vec<f64>,
}

impl CbnStatsUpdate {
    pub fn apply(&self, p: &mut ComplexBatchNormParams) {
        let m = p.momentum;
        for c in 0..p.channels() {
            let blend = |run: &mut f64, batch: f64| *run = (1.0 - m) * *run + m * batch;
            blend(&mut p.run_mean_r.data_mut()[c], self.mean_r[c]);
            blend(&mut p.run_mean_i.data_mut()[c], self.mean_i[c]);
            blend(&mut p.run_vrr.data_mut()[c], self.vrr[c]);
            blend(&mut p.run_vri.data_mut()[c], self.vri[c]);
            blend(&mut p.run_vii.data_mut()[c], self.vii[c]);
        }
    }
}

pub struct CbnCache {
    centered: ComplexTensor,
    per_channel: Vec<Whiten>,
    mode: Mode,
}

pub struct CbnGrads {
    pub gamma_rr: Tensor,
    pub gamma_ri: Tensor,
    pub gamma_ii: Tensor,
    pub beta_r: Tensor,
    pub beta_i: Tensor,
}

fn bn_dims(x: &ComplexTensor, p: &ComplexBatchNormParams) -> Result<(usize, usize, usize)> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(DcucError::Shape(format!(
            "batch norm expects [B,C,F,T], got {sh:?}"
        )));
    }
    if sh[1] != p.channels() {
        return Err(DcucError::Shape(format!(
            "batch norm has {} channels, input has {}",
            p.channels(),
            sh[1]
        )));
    }
    Ok((sh[0], sh[1], sh[2] * sh[3]))
}

pub fn complex_batch_norm_fwd(
    x: &ComplexTensor,
    p: &ComplexBatchNormParams,
    mode: Mode,
) -> Result<(ComplexTensor, CbnCache, Option<CbnStatsUpdate>)> {
    let (b, ch, spatial) = bn_dims(x, p)?;
    let m = b * spatial;
    if mode == Mode::Train && m < 2 {
        return Err(DcucError::InvalidInput(format!(
            "batch norm needs at least 2 samples per channel in train mode, got {m}"
        )));
    }

    let mut centered = ComplexTensor::zeros(x.shape());
    let mut per_channel = Vec::with_capacity(ch);
    let mut update = if mode == Mode::Train {
        Some(CbnStatsUpdate {
            mean_r: vec![0.0; ch],
            mean_i: vec![0.0; ch],
            vrr: vec![0.0; ch],
            vri: vec![0.0; ch],
            vii: vec![0.0; ch],
        })
    } else {
        None
    };

    let mut out = ComplexTensor::zeros(x.shape());
    for c in 0..ch {
        let (mu_r, mu_i, vrr, vri, vii) = match mode {
            Mode::Train => {
                let mut sum_r = 0.0;
                let mut sum_i = 0.0;
                for bb in 0..b {
                    let base = (bb * ch + c) * spatial;
                    for k in 0..spatial {
                        sum_r += x.re.data()[base + k];
                        sum_i += x.im.data()[base + k];
                    }
                }
                let mu_r = sum_r / m as f64;
                let mu_i = sum_i / m as f64;
                let mut vrr = 0.0;
                let mut vri = 0.0;
                let mut vii = 0.0;
                for bb in 0..b {
                    let base = (bb * ch + c) * spatial;
                    for k in 0..spatial {
                        let cr = x.re.data()[base + k] - mu_r;
                        let ci = x.im.data()[base + k] - mu_i;
                        vrr += cr * cr;
                        vri += cr * ci;
                        vii += ci * ci;
                    }
                }
                vrr /= m as f64;
                vri /= m as f64;
                vii /= m as f64;
                if let Some(u) = update.as_mut() {
                    u.mean_r[c] = mu_r;
                    u.mean_i[c] = mu_i;
                    u.vrr[c] = vrr;
                    u.vri[c] = vri;
                    u.vii[c] = vii;
                }
                (mu_r, mu_i, vrr, vri, vii)
            }
            Mode::Eval => (
                p.run_mean_r.data()[c],
                p.run_mean_i.data()[c],
                p.run_vrr.data()[c],
                p.run_vri.data()[c],
                p.run_vii.data()[c],
            ),
        };

        let w = whiten(vrr, vri, vii, p.eps);
        let (grr, gri, gii) = (
            p.gamma_rr.data()[c],
            p.gamma_ri.data()[c],
            p.gamma_ii.data()[c],
        );
        let (br, bi) = (p.beta_r.data()[c], p.beta_i.data()[c]);
        for bb in 0..b {
            let base = (bb * ch + c) * spatial;
            for k in 0..spatial {
                let cr = x.re.data()[base + k] - mu_r;
                let ci = x.im.data()[base + k] - mu_i;
                centered.re.data_mut()[base + k] = cr;
                centered.im.data_mut()[base + k] = ci;
                let xr = w.w11 * cr + w.w12 * ci;
                let xi = w.w12 * cr + w.w22 * ci;
                out.re.data_mut()[base + k] = grr * xr + gri * xi + br;
                out.im.data_mut()[base + k] = gri * xr + gii * xi + bi;
            }
        }
        per_channel.push(w);
    }

    Ok((
        out,
        CbnCache {
            centered,
            per_channel,
            mode,
        },
        update,
    ))
}

/// Forward-only convenience form.
pub fn complex_batch_norm(
    x: &ComplexTensor,
    p: &ComplexBatchNormParams,
    mode: Mode,
) -> Result<ComplexTensor> {
    complex_batch_norm_fwd(x, p, mode).map(|(out, _, _)| out)
}

pub fn complex_batch_norm_backward(
    cache: &CbnCache,
    p: &ComplexBatchNormParams,
    g: &ComplexTensor,
) -> Result<(ComplexTensor, CbnGrads)> {
    let (b, ch, spatial) = bn_dims(&cache.centered, p)?;
    if g.shape() != cache.centered.shape() {
        return Err(DcucError::Shape(
            "batch norm gradient shape mismatch".into(),
        ));
    }
    let m = (b * spatial) as f64;

    let mut dx = ComplexTensor::zeros(cache.centered.shape());
    let mut grads = CbnGrads {
        gamma_rr: Tensor::zeros(&[ch]),
        gamma_ri: Tensor::zeros(&[ch]),
        gamma_ii: Tensor::zeros(&[ch]),
        beta_r: Tensor::zeros(&[ch]),
        beta_i: Tensor::zeros(&[ch]),
    };

    for c in 0..ch {
        let w = cache.per_channel[c];
        let (grr, gri, gii) = (
            p.gamma_rr.data()[c],
            p.gamma_ri.data()[c],
            p.gamma_ii.data()[c],
        );

        // First sweep: affine grads and the dL/dW accumulation.
        let mut d_grr = 0.0;
        let mut d_gri = 0.0;
        let mut d_gii = 0.0;
        let mut d_br = 0.0;
        let mut d_bi = 0.0;
        let mut dw11 = 0.0;
        let mut dw12 = 0.0; // accumulates both off-diagonal slots
        let mut dw22 = 0.0;
        for bb in 0..b {
            let base = (bb * ch + c) * spatial;
            for k in 0..spatial {
                let cr = cache.centered.re.data()[base + k];
                let ci = cache.centered.im.data()[base + k];
                let xr = w.w11 * cr + w.w12 * ci;
                let xi = w.w12 * cr + w.w22 * ci;
                let gr = g.re.data()[base + k];
                let gi = g.im.data()[base + k];
                d_grr += gr * xr;
                d_gii += gi * xi;
                d_gri += gr * xi + gi * xr;
                d_br += gr;
                d_bi += gi;
                // h = Gamma^T g (Gamma symmetric)
                let hr = grr * gr + gri * gi;
                let hi = gri * gr + gii * gi;
                dw11 += hr * cr;
                dw12 += hr * ci + hi * cr;
                dw22 += hi * ci;
            }
        }
        grads.gamma_rr.data_mut()[c] = d_grr;
        grads.gamma_ri.data_mut()[c] = d_gri;
        grads.gamma_ii.data_mut()[c] = d_gii;
        grads.beta_r.data_mut()[c] = d_br;
        grads.beta_i.data_mut()[c] = d_bi;

        // Scalar chain through the whitening matrix entries (train mode only;
        // in eval mode the statistics are constants).
        let (da, db, dbc) = if cache.mode == Mode::Train {
            let (a, bb_, cc, s, t) = (w.a, w.b, w.c, w.s, w.t);
            let q = 1.0 / (s * t);
            let s_a = cc / (2.0 * s);
            let s_b = -bb_ / s;
            let s_c = a / (2.0 * s);
            let t_a = (1.0 + 2.0 * s_a) / (2.0 * t);
            let t_b = s_b / t;
            let t_c = (1.0 + 2.0 * s_c) / (2.0 * t);
            let q_a = -q * (s_a / s + t_a / t);
            let q_b = -q * (s_b / s + t_b / t);
            let q_c = -q * (s_c / s + t_c / t);

            let w11_a = q_a * (cc + s) + q * s_a;
            let w11_b = q_b * (cc + s) + q * s_b;
            let w11_c = q_c * (cc + s) + q * (1.0 + s_c);
            let w22_a = q_a * (a + s) + q * (1.0 + s_a);
            let w22_b = q_b * (a + s) + q * s_b;
            let w22_c = q_c * (a + s) + q * s_c;
            let w12_a = -q_a * bb_;
            let w12_b = -q_b * bb_ - q;
            let w12_c = -q_c * bb_;

            (
                dw11 * w11_a + dw12 * w12_a + dw22 * w22_a,
                dw11 * w11_b + dw12 * w12_b + dw22 * w22_b,
                dw11 * w11_c + dw12 * w12_c + dw22 * w22_c,
            )
        } else {
            (0.0, 0.0, 0.0)
        };

        // Second sweep: per-sample gradient, then subtract the mean (adjoint
        // of centering).
        let mut mean_dr = 0.0;
        let mut mean_di = 0.0;
        for bb in 0..b {
            let base = (bb * ch + c) * spatial;
            for k in 0..spatial {
                let cr = cache.centered.re.data()[base + k];
                let ci = cache.centered.im.data()[base + k];
                let gr = g.re.data()[base + k];
                let gi = g.im.data()[base + k];
                let hr = grr * gr + gri * gi;
                let hi = gri * gr + gii * gi;
                let mut dr = w.w11 * hr + w.w12 * hi;
                let mut di = w.w12 * hr + w.w22 * hi;
                if cache.mode == Mode::Train {
                    dr += (2.0 * cr / m) * da + (ci / m) * db;
                    di += (2.0 * ci / m) * dbc + (cr / m) * db;
                }
                dx.re.data_mut()[base + k] = dr;
                dx.im.data_mut()[base + k] = di;
                mean_dr += dr;
                mean_di += di;
            }
        }
        if cache.mode == Mode::Train {
            mean_dr /= m;
            mean_di /= m;
            for bb in 0..b {
                let base = (bb * ch + c) * spatial;
                for k in 0..spatial {
                    dx.re.data_mut()[base + k] -= mean_dr;
                    dx.im.data_mut()[base + k] -= mean_di;
                }
            }
        }
    }

    Ok((dx, grads))
}

// ---------------------------------------------------------------------------
// PReLU
// ---------------------------------------------------------------------------

/// Real-valued PReLU applied elementwise and independently to the real and
/// imaginary arrays, one learned slope per channel shared by both parts.
pub fn prelu(x: &ComplexTensor, slope: &Tensor) -> Result<ComplexTensor> {
    let sh = x.shape();
    if sh.len() != 4 || slope.shape() != [sh[1]] {
        return Err(DcucError::Shape(format!(
            "prelu slope shape {:?} does not match input channels {:?}",
            slope.shape(),
            sh
        )));
    }
    let mut out = ComplexTensor::zeros(sh);
    let spatial = sh[2] * sh[3];
    for bb in 0..sh[0] {
        for c in 0..sh[1] {
            let a = slope.data()[c];
            let base = (bb * sh[1] + c) * spatial;
            for k in 0..spatial {
                let r = x.re.data()[base + k];
                let i = x.im.data()[base + k];
                out.re.data_mut()[base + k] = if r >= 0.0 { r } else { a * r };
                out.im.data_mut()[base + k] = if i >= 0.0 { i } else { a * i };
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dslope).
pub fn prelu_backward(
    x: &ComplexTensor,
    slope: &Tensor,
    g: &ComplexTensor,
) -> Result<(ComplexTensor, Tensor)> {
    let sh = x.shape();
    if g.shape() != sh {
        return Err(DcucError::Shape("prelu gradient shape mismatch".into()));
    }
    let mut dx = ComplexTensor::zeros(sh);
    let mut ds = Tensor::zeros(slope.shape());
    let spatial = sh[2] * sh[3];
    for bb in 0..sh[0] {
        for c in 0..sh[1] {
            let a = slope.data()[c];
            let base = (bb * sh[1] + c) * spatial;
            let mut acc = 0.0;
            for k in 0..spatial {
                let r = x.re.data()[base + k];
                let i = x.im.data()[base + k];
                let gr = g.re.data()[base + k];
                let gi = g.im.data()[base + k];
                if r >= 0.0 {
                    dx.re.data_mut()[base + k] = gr;
                } else {
                    dx.re.data_mut()[base + k] = a * gr;
                    acc += gr * r;
                }
                if i >= 0.0 {
                    dx.im.data_mut()[base + k] = gi;
                } else {
                    dx.im.data_mut()[base + k] = a * gi;
                    acc += gi * i;
                }
            }
            ds.data_mut()[c] += acc;
        }
    }
    Ok((dx, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_conv(wr: f64, wi: f64) -> ComplexConvParams {
        let mut p = ComplexConvParams::zeros(1, 1, (1, 1), (1, 1), (0, 0));
        p.w_real.data_mut()[0] = wr;
        p.w_imag.data_mut()[0] = wi;
        p
    }

    fn sample_input() -> ComplexTensor {
        let re = Tensor::from_vec(vec![1.0, -2.0, 0.5, 3.0], &[1, 1, 2, 2]).unwrap();
        let im = Tensor::from_vec(vec![0.25, 1.0, -1.5, 0.0], &[1, 1, 2, 2]).unwrap();
        ComplexTensor::new(re, im).unwrap()
    }

    #[test]
    fn one_by_one_real_kernel_is_identity() {
        let x = sample_input();
        let y = complex_conv2d(&x, &unit_conv(1.0, 0.0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn one_by_one_imag_kernel_multiplies_by_j() {
        let x = sample_input();
        let y = complex_conv2d(&x, &unit_conv(0.0, 1.0)).unwrap();
        for k in 0..4 {
            assert_eq!(y.re.data()[k], -x.im.data()[k]);
            assert_eq!(y.im.data()[k], x.re.data()[k]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = sample_input();
        let p = ComplexConvParams::zeros(1, 3, (1, 1), (1, 1), (0, 0));
        assert!(matches!(complex_conv2d(&x, &p), Err(DcucError::Shape(_))));
    }

    #[test]
    fn transpose_identity_and_shape_inversion() {
        let x = sample_input();
        let y = complex_conv_transpose2d(&x, &unit_conv(1.0, 0.0)).unwrap();
        assert_eq!(y, x);

        // forward (2,1)-strided conv on [1,1,9,4] gives [1,1,5,3]; the
        // transposed conv with the same geometry inverts the spatial map.
        let big = ComplexTensor::zeros(&[1, 1, 9, 4]);
        let p = ComplexConvParams::zeros(2, 1, (5, 2), (2, 1), (2, 0));
        let fwd = complex_conv2d(&big, &p).unwrap();
        assert_eq!(fwd.shape(), &[1, 2, 5, 3]);
        let pt = ComplexConvParams::zeros(1, 2, (5, 2), (2, 1), (2, 0));
        let back = complex_conv_transpose2d(&fwd, &pt).unwrap();
        assert_eq!(back.shape(), &[1, 1, 9, 4]);
    }

    #[test]
    fn batch_norm_whitens_train_mode() {
        // Deterministic anisotropic data; after BN with identity affine the
        // per-channel (re, im) covariance must be I.
        let n = 64;
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        let mut state = 7u64;
        for _ in 0..n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            re.push(3.0 * u + 1.0);
            im.push(0.5 * v + 2.0 * u - 0.7);
        }
        let x = ComplexTensor::new(
            Tensor::from_vec(re, &[1, 1, 8, 8]).unwrap(),
            Tensor::from_vec(im, &[1, 1, 8, 8]).unwrap(),
        )
        .unwrap();
        let mut p = ComplexBatchNormParams::new(1);
        p.gamma_rr.fill(1.0);
        p.gamma_ii.fill(1.0);
        p.eps = 1e-12;
        let y = complex_batch_norm(&x, &p, Mode::Train).unwrap();

        let m = n as f64;
        let mu_r: f64 = y.re.data().iter().sum::<f64>() / m;
        let mu_i: f64 = y.im.data().iter().sum::<f64>() / m;
        let mut vrr = 0.0;
        let mut vri = 0.0;
        let mut vii = 0.0;
        for k in 0..n {
            let cr = y.re.data()[k] - mu_r;
            let ci = y.im.data()[k] - mu_i;
            vrr += cr * cr / m;
            vri += cr * ci / m;
            vii += ci * ci / m;
        }
        assert!((vrr - 1.0).abs() < 1e-4, "vrr {vrr}");
        assert!((vii - 1.0).abs() < 1e-4, "vii {vii}");
        assert!(vri.abs() < 1e-4, "vri {vri}");
    }

    #[test]
    fn batch_norm_rejects_degenerate_batch() {
        let x = ComplexTensor::zeros(&[1, 2, 1, 1]);
        let p = ComplexBatchNormParams::new(2);
        assert!(matches!(
            complex_batch_norm(&x, &p, Mode::Train),
            Err(DcucError::InvalidInput(_))
        ));
    }

    #[test]
    fn prelu_matches_definition() {
        let x = ComplexTensor::new(
            Tensor::from_vec(vec![-2.0, 3.0], &[1, 1, 1, 2]).unwrap(),
            Tensor::from_vec(vec![0.0, -4.0], &[1, 1, 1, 2]).unwrap(),
        )
        .unwrap();
        let slope = Tensor::from_vec(vec![0.25], &[1]).unwrap();
        let y = prelu(&x, &slope).unwrap();
        assert_eq!(y.re.data(), &[-0.5, 3.0]);
        assert_eq!(y.im.data(), &[0.0, -1.0]);
    }

    #[test]
    fn prelu_rejects_slope_mismatch() {
        let x = ComplexTensor::zeros(&[1, 2, 1, 1]);
        let slope = Tensor::zeros(&[3]);
        assert!(matches!(prelu(&x, &slope), Err(DcucError::Shape(_))));
    }
}
