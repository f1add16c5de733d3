//! Naive reference implementations shared by the oracle tests. Everything
//! here recomputes results by the most direct route available (quadratic
//! DFTs, quadruple conv loops, explicit eigendecompositions, dense algebra)
//! and stays independent of the library's optimized paths.

#![allow(dead_code)]

use dcucnet::tensor::{ComplexTensor, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rand_complex(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexTensor {
    let n = shape.iter().product();
    ComplexTensor::new(
        Tensor::from_vec(rand_vec(n, rng), shape).unwrap(),
        Tensor::from_vec(rand_vec(n, rng), shape).unwrap(),
    )
    .unwrap()
}

pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    got.iter()
        .zip(want)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs() / scale))
}

// ---------------------------------------------------------------------------
// DFT oracle
// ---------------------------------------------------------------------------

/// One-sided DFT of a real frame by the O(N^2) definition.
pub fn naive_dft_onesided(frame: &[f64], n_fft: usize) -> Vec<(f64, f64)> {
    let bins = n_fft / 2 + 1;
    (0..bins)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &x) in frame.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            (re, im)
        })
        .collect()
}

/// Reflect index (mirror about edge samples, bouncing).
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

// ---------------------------------------------------------------------------
// Complex convolution oracles
// ---------------------------------------------------------------------------

pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Quadruple-loop complex conv: (a+jb)(c+jd) accumulated per tap.
pub fn naive_complex_conv2d(
    x: &ComplexTensor,
    wr: &Tensor,
    wi: &Tensor,
    br: &[f64],
    bi: &[f64],
    spec: &ConvSpec,
) -> ComplexTensor {
    let (b, ic, f, t) = dims4(x.shape());
    let (oc, _, kh, kw) = dims4(wr.shape());
    let (sf, st) = spec.stride;
    let (pf, pt) = spec.padding;
    let fo = (f + 2 * pf - kh) / sf + 1;
    let to = (t + 2 * pt - kw) / st + 1;
    let mut out = ComplexTensor::zeros(&[b, oc, fo, to]);
    for bb in 0..b {
        for o in 0..oc {
            for of in 0..fo {
                for ot in 0..to {
                    let mut ar = br[o];
                    let mut ai = bi[o];
                    for i in 0..ic {
                        for kf in 0..kh {
                            for kt in 0..kw {
                                let fi = (of * sf + kf) as isize - pf as isize;
                                let ti = (ot * st + kt) as isize - pt as isize;
                                if fi < 0 || fi >= f as isize || ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                let xi = ((bb * ic + i) * f + fi as usize) * t + ti as usize;
                                let widx = ((o * ic + i) * kh + kf) * kw + kt;
                                let (xr, xim) = (x.re.data()[xi], x.im.data()[xi]);
                                let (wre, wim) = (wr.data()[widx], wi.data()[widx]);
                                ar += xr * wre - xim * wim;
                                ai += xr * wim + xim * wre;
                            }
                        }
                    }
                    let oi = ((bb * oc + o) * fo + of) * to + ot;
                    out.re.data_mut()[oi] = ar;
                    out.im.data_mut()[oi] = ai;
                }
            }
        }
    }
    out
}

/// Transposed conv by the independent route: zero-stuff the input by the
/// stride, pad by (k-1-p), and run a forward conv with the spatially flipped
/// kernel (adjoint of cross-correlation).
pub fn naive_complex_conv_transpose2d(
    x: &ComplexTensor,
    wr: &Tensor,
    wi: &Tensor,
    br: &[f64],
    bi: &[f64],
    spec: &ConvSpec,
) -> ComplexTensor {
    let (b, ic, f, t) = dims4(x.shape());
    let (oc, _, kh, kw) = dims4(wr.shape());
    let (sf, st) = spec.stride;
    let (pf, pt) = spec.padding;

    // zero-stuffed input
    let zf = (f - 1) * sf + 1;
    let zt = (t - 1) * st + 1;
    let mut zre = Tensor::zeros(&[b, ic, zf, zt]);
    let mut zim = Tensor::zeros(&[b, ic, zf, zt]);
    for bb in 0..b {
        for i in 0..ic {
            for ff in 0..f {
                for tt in 0..t {
                    let src = ((bb * ic + i) * f + ff) * t + tt;
                    let dst = ((bb * ic + i) * zf + ff * sf) * zt + tt * st;
                    zre.data_mut()[dst] = x.re.data()[src];
                    zim.data_mut()[dst] = x.im.data()[src];
                }
            }
        }
    }
    let z = ComplexTensor::new(zre, zim).unwrap();

    // flipped kernel with swapped in/out channel axes
    let mut fwr = Tensor::zeros(&[oc, ic, kh, kw]);
    let mut fwi = Tensor::zeros(&[oc, ic, kh, kw]);
    for o in 0..oc {
        for i in 0..ic {
            for kf in 0..kh {
                for kt in 0..kw {
                    let src = ((o * ic + i) * kh + kf) * kw + kt;
                    let dst = ((o * ic + i) * kh + (kh - 1 - kf)) * kw + (kw - 1 - kt);
                    fwr.data_mut()[dst] = wr.data()[src];
                    fwi.data_mut()[dst] = wi.data()[src];
                }
            }
        }
    }

    naive_complex_conv2d(
        &z,
        &fwr,
        &fwi,
        br,
        bi,
        &ConvSpec {
            stride: (1, 1),
            padding: (kh - 1 - pf, kw - 1 - pt),
        },
    )
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

// ---------------------------------------------------------------------------
// Complex batch-norm oracle (eigendecomposition route)
// ---------------------------------------------------------------------------

/// Whiten per channel by explicitly eigendecomposing the 2x2 covariance and
/// applying V^(-1/2) = Q diag(1/sqrt(l)) Q^T, then the 2x2 affine.
pub fn naive_complex_batch_norm(
    x: &ComplexTensor,
    gamma: &[(f64, f64, f64)], // (rr, ri, ii) per channel
    beta: &[(f64, f64)],
    eps: f64,
) -> ComplexTensor {
    let (b, c, f, t) = dims4(x.shape());
    let spatial = f * t;
    let m = (b * spatial) as f64;
    let mut out = ComplexTensor::zeros(x.shape());
    for cc in 0..c {
        let mut mu_r = 0.0;
        let mut mu_i = 0.0;
        for bb in 0..b {
            let base = (bb * c + cc) * spatial;
            for k in 0..spatial {
                mu_r += x.re.data()[base + k];
                mu_i += x.im.data()[base + k];
            }
        }
        mu_r /= m;
        mu_i /= m;
        let mut vrr = 0.0;
        let mut vri = 0.0;
        let mut vii = 0.0;
        for bb in 0..b {
            let base = (bb * c + cc) * spatial;
            for k in 0..spatial {
                let cr = x.re.data()[base + k] - mu_r;
                let ci = x.im.data()[base + k] - mu_i;
                vrr += cr * cr / m;
                vri += cr * ci / m;
                vii += ci * ci / m;
            }
        }
        let (a, bb_, cc_) = (vrr + eps, vri, vii + eps);

        // eigendecomposition of [[a, b], [b, c]]
        let tr = a + cc_;
        let det = a * cc_ - bb_ * bb_;
        let disc = ((tr * tr / 4.0 - det).max(0.0)).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = tr / 2.0 - disc;
        // eigenvector for l1
        let (v1x, v1y) = if bb_.abs() > 1e-300 {
            (l1 - cc_, bb_)
        } else if a >= cc_ {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let n1 = (v1x * v1x + v1y * v1y).sqrt();
        let (q11, q21) = (v1x / n1, v1y / n1);
        // the second eigenvector is its perpendicular
        let (q12, q22) = (-q21, q11);
        let (s1, s2) = (1.0 / l1.sqrt(), 1.0 / l2.sqrt());
        // W = Q diag(s) Q^T
        let w11 = q11 * q11 * s1 + q12 * q12 * s2;
        let w12 = q11 * q21 * s1 + q12 * q22 * s2;
        let w22 = q21 * q21 * s1 + q22 * q22 * s2;

        let (grr, gri, gii) = gamma[cc];
        let (br, bi) = beta[cc];
        for bb2 in 0..b {
            let base = (bb2 * c + cc) * spatial;
            for k in 0..spatial {
                let cr = x.re.data()[base + k] - mu_r;
                let ci = x.im.data()[base + k] - mu_i;
                let xr = w11 * cr + w12 * ci;
                let xi = w12 * cr + w22 * ci;
                out.re.data_mut()[base + k] = grr * xr + gri * xi + br;
                out.im.data_mut()[base + k] = gri * xr + gii * xi + bi;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Dense conformer oracles
// ---------------------------------------------------------------------------

pub fn o_sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn o_layernorm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let is = 1.0 / (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(k, v)| gamma[k] * (v - mu) * is + beta[k])
        .collect()
}

pub fn o_linear(row: &[f64], weight: &Tensor, bias: &[f64]) -> Vec<f64> {
    let (o, i) = (weight.shape()[0], weight.shape()[1]);
    (0..o)
        .map(|k| {
            bias[k]
                + row
                    .iter()
                    .zip(&weight.data()[k * i..(k + 1) * i])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

/// Dense-algebra ffn_half oracle over [B,T,D] rows.
pub fn o_ffn_half(x: &Tensor, p: &dcucnet::conformer::FfnParams) -> Tensor {
    let d = p.ln.dim();
    let rows = x.numel() / d;
    let mut out = x.clone();
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let h = o_layernorm(row, p.ln.gamma.data(), p.ln.beta.data(), p.ln.eps);
        let h1: Vec<f64> = o_linear(&h, &p.w1.weight, p.w1.bias.data())
            .into_iter()
            .map(|v| v * o_sigmoid(v))
            .collect();
        let h2 = o_linear(&h1, &p.w2.weight, p.w2.bias.data());
        for k in 0..d {
            out.data_mut()[r * d + k] += 0.5 * h2[k];
        }
    }
    out
}

/// Naive per-head attention oracle.
pub fn o_mhsa(x: &Tensor, p: &dcucnet::conformer::MhsaParams) -> Tensor {
    let sh = x.shape();
    let (b, t, d) = (sh[0], sh[1], sh[2]);
    let heads = p.num_heads;
    let dh = d / heads;
    let mut out = x.clone();
    for bb in 0..b {
        // layernorm then projections, row by row
        let mut q = vec![vec![0.0; d]; t];
        let mut k = vec![vec![0.0; d]; t];
        let mut v = vec![vec![0.0; d]; t];
        for tt in 0..t {
            let row = &x.data()[(bb * t + tt) * d..(bb * t + tt + 1) * d];
            let h = o_layernorm(row, p.ln.gamma.data(), p.ln.beta.data(), p.ln.eps);
            q[tt] = o_linear(&h, &p.wq.weight, p.wq.bias.data());
            k[tt] = o_linear(&h, &p.wk.weight, p.wk.bias.data());
            v[tt] = o_linear(&h, &p.wv.weight, p.wv.bias.data());
        }
        for hh in 0..heads {
            for ti in 0..t {
                let mut scores = vec![0.0; t];
                for tj in 0..t {
                    let s: f64 = (0..dh)
                        .map(|kk| q[ti][hh * dh + kk] * k[tj][hh * dh + kk])
                        .sum();
                    scores[tj] = s / (dh as f64).sqrt();
                }
                let mx = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                let mut ctx = vec![0.0; dh];
                for tj in 0..t {
                    let a = exps[tj] / denom;
                    for kk in 0..dh {
                        ctx[kk] += a * v[tj][hh * dh + kk];
                    }
                }
                // write ctx into a scratch row before the output projection
                q[ti][hh * dh..(hh + 1) * dh].copy_from_slice(&ctx);
            }
        }
        for tt in 0..t {
            let proj = o_linear(&q[tt], &p.wo.weight, p.wo.bias.data());
            for kk in 0..d {
                out.data_mut()[(bb * t + tt) * d + kk] += proj[kk];
            }
        }
    }
    out
}

/// Direct-loop conv-module oracle (train-mode batch norm over batch x time).
pub fn o_conv_module(x: &Tensor, p: &dcucnet::conformer::ConvModuleParams) -> Tensor {
    let sh = x.shape();
    let (b, t, d) = (sh[0], sh[1], sh[2]);
    let rows = b * t;
    // layernorm -> pw1 -> glu
    let mut g = vec![vec![0.0; d]; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let h = o_layernorm(row, p.ln.gamma.data(), p.ln.beta.data(), p.ln.eps);
        let h1 = o_linear(&h, &p.pw1.weight, p.pw1.bias.data());
        for kk in 0..d {
            g[r][kk] = h1[kk] * o_sigmoid(h1[d + kk]);
        }
    }
    // depthwise along time with same padding
    let kern = p.dw.weight.shape()[1];
    let pad = (kern - 1) / 2;
    let mut dwout = vec![vec![0.0; d]; rows];
    for bb in 0..b {
        for tt in 0..t {
            for dd in 0..d {
                let mut acc = p.dw.bias.data()[dd];
                for kk in 0..kern {
                    let ti = tt as isize + kk as isize - pad as isize;
                    if ti >= 0 && ti < t as isize {
                        acc += g[bb * t + ti as usize][dd] * p.dw.weight.data()[dd * kern + kk];
                    }
                }
                dwout[bb * t + tt][dd] = acc;
            }
        }
    }
    // batch norm over rows per feature
    let m = rows as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in &dwout {
        for dd in 0..d {
            mean[dd] += row[dd] / m;
        }
    }
    for row in &dwout {
        for dd in 0..d {
            var[dd] += (row[dd] - mean[dd]) * (row[dd] - mean[dd]) / m;
        }
    }
    let mut out = x.clone();
    for r in 0..rows {
        let mut sw = vec![0.0; d];
        for dd in 0..d {
            let xh = (dwout[r][dd] - mean[dd]) / (var[dd] + p.bn.eps).sqrt();
            let bnv = p.bn.gamma.data()[dd] * xh + p.bn.beta.data()[dd];
            sw[dd] = bnv * o_sigmoid(bnv);
        }
        let h2 = o_linear(&sw, &p.pw2.weight, p.pw2.bias.data());
        for dd in 0..d {
            out.data_mut()[r * d + dd] += h2[dd];
        }
    }
    out
}

/// End-to-end conformer block oracle.
pub fn o_conformer_block(x: &Tensor, p: &dcucnet::conformer::ConformerBlockParams) -> Tensor {
    let x1 = o_ffn_half(x, &p.ffn1);
    let x2 = o_mhsa(&x1, &p.mhsa);
    let x3 = o_conv_module(&x2, &p.conv);
    let x4 = o_ffn_half(&x3, &p.ffn2);
    let d = p.final_ln.dim();
    let rows = x4.numel() / d;
    let mut out = Tensor::zeros(x4.shape());
    for r in 0..rows {
        let ln = o_layernorm(
            &x4.data()[r * d..(r + 1) * d],
            p.final_ln.gamma.data(),
            p.final_ln.beta.data(),
            p.final_ln.eps,
        );
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&ln);
    }
    out
}
