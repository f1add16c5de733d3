//! Brute-force oracles for the acceptance suite, independent of the library
//! implementation paths.

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

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Quadruple-loop complex conv, (a+jb)(c+jd) per tap.
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

/// Transposed conv by zero-stuffing + flipped-kernel forward conv.
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

/// Whitening by explicit 2x2 eigendecomposition plus the affine.
pub fn naive_complex_batch_norm(
    x: &ComplexTensor,
    gamma: &[(f64, f64, f64)],
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
        let tr = a + cc_;
        let det = a * cc_ - bb_ * bb_;
        let disc = ((tr * tr / 4.0 - det).max(0.0)).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = tr / 2.0 - disc;
        let (v1x, v1y) = if bb_.abs() > 1e-300 {
            (l1 - cc_, bb_)
        } else if a >= cc_ {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        let n1 = (v1x * v1x + v1y * v1y).sqrt();
        let (q11, q21) = (v1x / n1, v1y / n1);
        let (q12, q22) = (-q21, q11);
        let (s1, s2) = (1.0 / l1.sqrt(), 1.0 / l2.sqrt());
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
