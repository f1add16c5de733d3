//! Conformer block over real-valued frame sequences: half-step feed-forward,
//! multi-headed self-attention, a depthwise-convolution module, a second
//! half-step feed-forward, and a final layer normalization:
//!
//! ```text
//! x1 = x  + 1/2 FFN(x)
//! x2 = x1 + MHSA(x1)
//! x3 = x2 + Conv(x2)
//! y  = Layernorm(x3 + 1/2 FFN(x3))
//! ```
//!
//! Sequences are laid out [batch, time, model_dim]. Every stage keeps that
//! shape, and zeroing a stage's output projection turns it into the identity
//! on its input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::complex_nn::Mode;
use crate::error::{DcucError, Result};
use crate::tensor::Tensor;

/// Positional-information strategy. The convolution module supplies local
/// order, so no encoding is applied; the switch exists for future variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionalEncoding {
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformerConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    pub positional: PositionalEncoding,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        ConformerConfig {
            model_dim: 128,
            num_heads: 4,
            ffn_expansion: 4,
            conv_kernel: 15,
            num_blocks: 2,
            dropout: 0.0,
            positional: PositionalEncoding::None,
        }
    }
}

impl ConformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(DcucError::ConfigMismatch(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(DcucError::ConfigMismatch(format!(
                "conv_kernel {} must be odd",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DcucError::ConfigMismatch(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Real frame sequence, data shape [batch, time, model_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub data: Tensor,
}

impl FrameSequence {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(DcucError::Shape(format!(
                "frame sequence must be [B,T,D], got {:?}",
                data.shape()
            )));
        }
        Ok(FrameSequence { data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// Dropout context threaded through training-mode forwards; absent in eval
/// and in every oracle/gradient test.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

// ---------------------------------------------------------------------------
// Elementary layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

pub struct LnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub struct LnGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.shape()[0]
    }

    /// Normalize each trailing-dim row.
    pub fn forward(&self, x: &Tensor) -> (Tensor, LnCache) {
        let d = self.dim();
        let rows = x.numel() / d;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xi = &x.data()[r * d..(r + 1) * d];
            let mu = xi.iter().sum::<f64>() / d as f64;
            let var = xi.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = is;
            for k in 0..d {
                let h = (xi[k] - mu) * is;
                xhat.data_mut()[r * d + k] = h;
                out.data_mut()[r * d + k] = self.gamma.data()[k] * h + self.beta.data()[k];
            }
        }
        (out, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, g: &Tensor) -> (Tensor, LnGrads) {
        let d = self.dim();
        let rows = g.numel() / d;
        let mut dx = Tensor::zeros(g.shape());
        let mut dgamma = Tensor::zeros(&[d]);
        let mut dbeta = Tensor::zeros(&[d]);
        for r in 0..rows {
            let gr = &g.data()[r * d..(r + 1) * d];
            let xh = &cache.xhat.data()[r * d..(r + 1) * d];
            let is = cache.inv_std[r];
            let mut mean_dh = 0.0;
            let mut mean_dh_xh = 0.0;
            for k in 0..d {
                dgamma.data_mut()[k] += gr[k] * xh[k];
                dbeta.data_mut()[k] += gr[k];
                let dh = gr[k] * self.gamma.data()[k];
                mean_dh += dh;
                mean_dh_xh += dh * xh[k];
            }
            mean_dh /= d as f64;
            mean_dh_xh /= d as f64;
            for k in 0..d {
                let dh = gr[k] * self.gamma.data()[k];
                dx.data_mut()[r * d + k] = is * (dh - mean_dh - xh[k] * mean_dh_xh);
            }
        }
        (
            dx,
            LnGrads {
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// [out, in]
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn init_random(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::zeros(out_dim, in_dim);
        let bound = 1.0 / (in_dim as f64).sqrt();
        for v in l.weight.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        for v in l.bias.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        l
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Apply to every trailing-dim row: [..., in] -> [..., out].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let sh = x.shape();
        let &d_in = sh
            .last()
            .ok_or_else(|| DcucError::Shape("empty shape".into()))?;
        if d_in != i {
            return Err(DcucError::Shape(format!(
                "linear expects last dim {i}, got {d_in}"
            )));
        }
        let rows = x.numel() / i;
        let mut out_shape = sh.to_vec();
        *out_shape.last_mut().unwrap() = o;
        let mut out = Tensor::zeros(&out_shape);
        for r in 0..rows {
            let xi = &x.data()[r * i..(r + 1) * i];
            let orow = &mut out.data_mut()[r * o..(r + 1) * o];
            for (k, ov) in orow.iter_mut().enumerate() {
                let wrow = &self.weight.data()[k * i..(k + 1) * i];
                let mut acc = self.bias.data()[k];
                for (a, b) in xi.iter().zip(wrow) {
                    acc += a * b;
                }
                *ov = acc;
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, g: &Tensor) -> (Tensor, LinearGrads) {
        let (o, i) = (self.out_dim(), self.in_dim());
        let rows = x.numel() / i;
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        for r in 0..rows {
            let xi = &x.data()[r * i..(r + 1) * i];
            let gr = &g.data()[r * o..(r + 1) * o];
            let dxi = &mut dx.data_mut()[r * i..(r + 1) * i];
            for k in 0..o {
                let gv = gr[k];
                db.data_mut()[k] += gv;
                let wrow = &self.weight.data()[k * i..(k + 1) * i];
                let dwrow = &mut dw.data_mut()[k * i..(k + 1) * i];
                for idx in 0..i {
                    dxi[idx] += gv * wrow[idx];
                    dwrow[idx] += gv * xi[idx];
                }
            }
        }
        (
            dx,
            LinearGrads {
                weight: dw,
                bias: db,
            },
        )
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Swish activation x * sigmoid(x), elementwise.
pub fn swish(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v *= sigmoid(*v);
    }
    out
}

pub fn swish_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.shape());
    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
        let s = sigmoid(xv);
        *d = gv * (s + xv * s * (1.0 - s));
    }
    dx
}

/// Gated linear unit over the last dim: split [., 2d] into (a, b), return
/// a * sigmoid(b).
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let sh = x.shape();
    let two_d = *sh.last().unwrap();
    if two_d % 2 != 0 {
        return Err(DcucError::Shape(format!(
            "glu needs an even last dim, got {two_d}"
        )));
    }
    let d = two_d / 2;
    let rows = x.numel() / two_d;
    let mut out_shape = sh.to_vec();
    *out_shape.last_mut().unwrap() = d;
    let mut out = Tensor::zeros(&out_shape);
    for r in 0..rows {
        let xi = &x.data()[r * two_d..(r + 1) * two_d];
        let orow = &mut out.data_mut()[r * d..(r + 1) * d];
        for k in 0..d {
            orow[k] = xi[k] * sigmoid(xi[d + k]);
        }
    }
    Ok(out)
}

pub fn glu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let two_d = *x.shape().last().unwrap();
    let d = two_d / 2;
    let rows = x.numel() / two_d;
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..rows {
        let xi = &x.data()[r * two_d..(r + 1) * two_d];
        let gr = &g.data()[r * d..(r + 1) * d];
        let dxi = &mut dx.data_mut()[r * two_d..(r + 1) * two_d];
        for k in 0..d {
            let s = sigmoid(xi[d + k]);
            dxi[k] = gr[k] * s;
            dxi[d + k] = gr[k] * xi[k] * s * (1.0 - s);
        }
    }
    dx
}

/// Inverted dropout. Returns (out, mask); mask is None when inactive.
fn dropout_fwd(x: &Tensor, ctx: &mut Option<&mut DropoutCtx>) -> (Tensor, Option<Vec<f64>>) {
    match ctx {
        Some(c) if c.p > 0.0 => {
            let keep = 1.0 - c.p;
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| {
                    if c.rng.random_range(0.0..1.0) < c.p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect();
            let mut out = x.clone();
            for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            (out, Some(mask))
        }
        _ => (x.clone(), None),
    }
}

fn dropout_bwd(g: &Tensor, mask: &Option<Vec<f64>>) -> Tensor {
    match mask {
        Some(m) => {
            let mut dx = g.clone();
            for (v, mk) in dx.data_mut().iter_mut().zip(m) {
                *v *= mk;
            }
            dx
        }
        None => g.clone(),
    }
}

/// Per-feature batch normalization over batch x time for [B,T,D] data.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

pub struct Bn1dCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

pub struct Bn1dGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Batch statistics produced by a train-mode forward; applied explicitly by
/// the owner.
#[derive(Debug, Clone)]
pub struct Bn1dStatsUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Bn1dStatsUpdate {
    pub fn apply(&self, p: &mut BatchNorm1d) {
        let m = p.momentum;
        for k in 0..self.mean.len() {
            p.run_mean.data_mut()[k] = (1.0 - m) * p.run_mean.data()[k] + m * self.mean[k];
            p.run_var.data_mut()[k] = (1.0 - m) * p.run_var.data()[k] + m * self.var[k];
        }
    }
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            run_mean: Tensor::zeros(&[dim]),
            run_var: Tensor::full(&[dim], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Bn1dCache, Option<Bn1dStatsUpdate>)> {
        let d = self.dim();
        let rows = x.numel() / d;
        if mode == Mode::Train && rows < 2 {
            return Err(DcucError::InvalidInput(
                "batch norm needs at least 2 rows in train mode".into(),
            ));
        }
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; d];
        let mut update = None;

        let (means, vars) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; d];
                let mut var = vec![0.0; d];
                for r in 0..rows {
                    for k in 0..d {
                        mean[k] += x.data()[r * d + k];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                for r in 0..rows {
                    for k in 0..d {
                        let c = x.data()[r * d + k] - mean[k];
                        var[k] += c * c;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                update = Some(Bn1dStatsUpdate {
                    mean: mean.clone(),
                    var: var.clone(),
                });
                (mean, var)
            }
            Mode::Eval => (self.run_mean.data().to_vec(), self.run_var.data().to_vec()),
        };

        for (k, is) in inv_std.iter_mut().enumerate() {
            *is = 1.0 / (vars[k] + self.eps).sqrt();
        }
        for r in 0..rows {
            for k in 0..d {
                let h = (x.data()[r * d + k] - means[k]) * inv_std[k];
                xhat.data_mut()[r * d + k] = h;
                out.data_mut()[r * d + k] = self.gamma.data()[k] * h + self.beta.data()[k];
            }
        }
        Ok((
            out,
            Bn1dCache {
                xhat,
                inv_std,
                mode,
            },
            update,
        ))
    }

    pub fn backward(&self, cache: &Bn1dCache, g: &Tensor) -> (Tensor, Bn1dGrads) {
        let d = self.dim();
        let rows = g.numel() / d;
        let mut dx = Tensor::zeros(g.shape());
        let mut dgamma = Tensor::zeros(&[d]);
        let mut dbeta = Tensor::zeros(&[d]);

        let mut mean_g = vec![0.0; d];
        let mut mean_gx = vec![0.0; d];
        for r in 0..rows {
            for k in 0..d {
                let gv = g.data()[r * d + k];
                let xh = cache.xhat.data()[r * d + k];
                dgamma.data_mut()[k] += gv * xh;
                dbeta.data_mut()[k] += gv;
                mean_g[k] += gv;
                mean_gx[k] += gv * xh;
            }
        }
        for k in 0..d {
            mean_g[k] /= rows as f64;
            mean_gx[k] /= rows as f64;
        }
        for r in 0..rows {
            for k in 0..d {
                let gv = g.data()[r * d + k];
                let xh = cache.xhat.data()[r * d + k];
                let scale = self.gamma.data()[k] * cache.inv_std[k];
                dx.data_mut()[r * d + k] = match cache.mode {
                    Mode::Train => scale * (gv - mean_g[k] - xh * mean_gx[k]),
                    Mode::Eval => scale * gv,
                };
            }
        }
        (
            dx,
            Bn1dGrads {
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }
}

/// Depthwise 1-D convolution along time with same-padding, per feature.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    /// [dim, kernel]
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct DwGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseConv1d {
    pub fn zeros(dim: usize, kernel: usize) -> Self {
        DepthwiseConv1d {
            weight: Tensor::zeros(&[dim, kernel]),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn init_random(dim: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut l = Self::zeros(dim, kernel);
        let bound = 1.0 / (kernel as f64).sqrt();
        for v in l.weight.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        l
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[1]
    }

    /// x: [B,T,D] -> [B,T,D]
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let mut out = Tensor::zeros(x.shape());
        for bb in 0..b {
            for tt in 0..t {
                for dd in 0..d {
                    let mut acc = self.bias.data()[dd];
                    for kk in 0..k {
                        let ti = tt as isize + kk as isize - pad as isize;
                        if ti >= 0 && ti < t as isize {
                            acc += x.data()[(bb * t + ti as usize) * d + dd]
                                * self.weight.data()[dd * k + kk];
                        }
                    }
                    out.data_mut()[(bb * t + tt) * d + dd] = acc;
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Tensor, g: &Tensor) -> (Tensor, DwGrads) {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        for bb in 0..b {
            for tt in 0..t {
                for dd in 0..d {
                    let gv = g.data()[(bb * t + tt) * d + dd];
                    db.data_mut()[dd] += gv;
                    for kk in 0..k {
                        let ti = tt as isize + kk as isize - pad as isize;
                        if ti >= 0 && ti < t as isize {
                            dx.data_mut()[(bb * t + ti as usize) * d + dd] +=
                                gv * self.weight.data()[dd * k + kk];
                            dw.data_mut()[dd * k + kk] +=
                                gv * x.data()[(bb * t + ti as usize) * d + dd];
                        }
                    }
                }
            }
        }
        (
            dx,
            DwGrads {
                weight: dw,
                bias: db,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Half-step feed-forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub ln: LayerNorm,
    pub w1: Linear,
    pub w2: Linear,
}

impl FfnParams {
    pub fn init_random(cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let e = cfg.ffn_expansion * d;
        FfnParams {
            ln: LayerNorm::new(d),
            w1: Linear::init_random(e, d, rng),
            w2: Linear::init_random(d, e, rng),
        }
    }
}

pub struct FfnCache {
    ln: LnCache,
    h_ln: Tensor,
    h1: Tensor,
    h2d: Tensor,
    m1: Option<Vec<f64>>,
    m2: Option<Vec<f64>>,
}

pub struct FfnGrads {
    pub ln: LnGrads,
    pub w1: LinearGrads,
    pub w2: LinearGrads,
}

/// x + 1/2 FFN(x), FFN = layernorm -> linear -> swish -> dropout -> linear -> dropout.
pub fn ffn_half(x: &FrameSequence, p: &FfnParams) -> Result<FrameSequence> {
    ffn_half_fwd(x, p, &mut None).map(|(y, _)| y)
}

pub fn ffn_half_fwd(
    x: &FrameSequence,
    p: &FfnParams,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(FrameSequence, FfnCache)> {
    let (_, _, d) = x.dims();
    if d != p.ln.dim() {
        return Err(DcucError::Shape(format!(
            "ffn expects model_dim {}, got {d}",
            p.ln.dim()
        )));
    }
    let (h_ln, ln_cache) = p.ln.forward(&x.data);
    let h1 = p.w1.forward(&h_ln)?;
    let h2 = swish(&h1);
    let (h2d, m1) = dropout_fwd(&h2, dropout);
    let h3 = p.w2.forward(&h2d)?;
    let (h3d, m2) = dropout_fwd(&h3, dropout);
    let mut out = x.data.clone();
    for (o, v) in out.data_mut().iter_mut().zip(h3d.data()) {
        *o += 0.5 * v;
    }
    Ok((
        FrameSequence::new(out)?,
        FfnCache {
            ln: ln_cache,
            h_ln,
            h1,
            h2d,
            m1,
            m2,
        },
    ))
}

pub fn ffn_half_backward(
    cache: &FfnCache,
    p: &FfnParams,
    g: &Tensor,
) -> Result<(Tensor, FfnGrads)> {
    let mut gh3d = g.clone();
    gh3d.scale(0.5);
    let gh3 = dropout_bwd(&gh3d, &cache.m2);
    let (gh2d, w2_grads) = p.w2.backward(&cache.h2d, &gh3);
    let gh2 = dropout_bwd(&gh2d, &cache.m1);
    let gh1 = swish_backward(&cache.h1, &gh2);
    let (gln, w1_grads) = p.w1.backward(&cache.h_ln, &gh1);
    let (mut dx, ln_grads) = p.ln.backward(&cache.ln, &gln);
    dx.add_assign(g); // residual path
    Ok((
        dx,
        FfnGrads {
            ln: ln_grads,
            w1: w1_grads,
            w2: w2_grads,
        },
    ))
}

// ---------------------------------------------------------------------------
// Multi-headed self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MhsaParams {
    pub ln: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
}

impl MhsaParams {
    pub fn init_random(cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        MhsaParams {
            ln: LayerNorm::new(d),
            wq: Linear::init_random(d, d, rng),
            wk: Linear::init_random(d, d, rng),
            wv: Linear::init_random(d, d, rng),
            wo: Linear::init_random(d, d, rng),
            num_heads: cfg.num_heads,
        }
    }
}

pub struct MhsaCache {
    ln: LnCache,
    h_ln: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// [B, H, T, T] attention weights
    attn: Vec<f64>,
    ctx: Tensor,
}

impl MhsaCache {
    /// Attention weights, flattened [B, H, T, T].
    pub fn attention(&self) -> &[f64] {
        &self.attn
    }
}

pub struct MhsaGrads {
    pub ln: LnGrads,
    pub wq: LinearGrads,
    pub wk: LinearGrads,
    pub wv: LinearGrads,
    pub wo: LinearGrads,
}

/// x + MHSA(layernorm(x)); softmax(QK^T / sqrt(d_head)) V per head, heads
/// concatenated and projected.
pub fn mhsa(x: &FrameSequence, p: &MhsaParams) -> Result<FrameSequence> {
    mhsa_fwd(x, p).map(|(y, _)| y)
}

pub fn mhsa_fwd(x: &FrameSequence, p: &MhsaParams) -> Result<(FrameSequence, MhsaCache)> {
    let (b, t, d) = x.dims();
    if d != p.ln.dim() {
        return Err(DcucError::Shape(format!(
            "mhsa expects model_dim {}, got {d}",
            p.ln.dim()
        )));
    }
    let heads = p.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (h_ln, ln_cache) = p.ln.forward(&x.data);
    let q = p.wq.forward(&h_ln)?;
    let k = p.wk.forward(&h_ln)?;
    let v = p.wv.forward(&h_ln)?;

    let mut attn = vec![0.0; b * heads * t * t];
    let mut ctx = Tensor::zeros(&[b, t, d]);
    let mut row = vec![0.0; t];
    for bb in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let qoff = (bb * t + ti) * d + h * dh;
                let qrow = &q.data()[qoff..qoff + dh];
                let mut max_s = f64::NEG_INFINITY;
                for (tj, rv) in row.iter_mut().enumerate() {
                    let koff = (bb * t + tj) * d + h * dh;
                    let krow = &k.data()[koff..koff + dh];
                    let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *rv = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = 0.0;
                for rv in row.iter_mut() {
                    *rv = (*rv - max_s).exp();
                    denom += *rv;
                }
                let abase = ((bb * heads + h) * t + ti) * t;
                for (tj, rv) in row.iter().enumerate() {
                    attn[abase + tj] = rv / denom;
                }
                let coff = (bb * t + ti) * d + h * dh;
                for tj in 0..t {
                    let a = attn[abase + tj];
                    let voff = (bb * t + tj) * d + h * dh;
                    for kk in 0..dh {
                        ctx.data_mut()[coff + kk] += a * v.data()[voff + kk];
                    }
                }
            }
        }
    }

    let proj = p.wo.forward(&ctx)?;
    let mut out = x.data.clone();
    out.add_assign(&proj);
    Ok((
        FrameSequence::new(out)?,
        MhsaCache {
            ln: ln_cache,
            h_ln,
            q,
            k,
            v,
            attn,
            ctx,
        },
    ))
}

pub fn mhsa_backward(
    cache: &MhsaCache,
    p: &MhsaParams,
    g: &Tensor,
) -> Result<(Tensor, MhsaGrads)> {
    let sh = cache.ctx.shape();
    let (b, t, d) = (sh[0], sh[1], sh[2]);
    let heads = p.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (gctx, wo_grads) = p.wo.backward(&cache.ctx, g);

    let mut gq = Tensor::zeros(&[b, t, d]);
    let mut gk = Tensor::zeros(&[b, t, d]);
    let mut gv = Tensor::zeros(&[b, t, d]);
    let mut d_attn = vec![0.0; t];
    for bb in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let abase = ((bb * heads + h) * t + ti) * t;
                let coff = (bb * t + ti) * d + h * dh;
                let gc = &gctx.data()[coff..coff + dh];
                // dA = dC . V^T ; dV += A^T dC
                for (tj, da) in d_attn.iter_mut().enumerate() {
                    let voff = (bb * t + tj) * d + h * dh;
                    let vrow = &cache.v.data()[voff..voff + dh];
                    *da = gc.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    let a = cache.attn[abase + tj];
                    let gvrow = &mut gv.data_mut()[voff..voff + dh];
                    for (gvk, &gck) in gvrow.iter_mut().zip(gc) {
                        *gvk += a * gck;
                    }
                }
                // softmax backward: dS = A o (dA - <dA, A>)
                let dot: f64 = d_attn
                    .iter()
                    .enumerate()
                    .map(|(tj, da)| da * cache.attn[abase + tj])
                    .sum();
                let qoff = (bb * t + ti) * d + h * dh;
                let qrow = &cache.q.data()[qoff..qoff + dh];
                for tj in 0..t {
                    let ds = cache.attn[abase + tj] * (d_attn[tj] - dot) * scale;
                    let koff = (bb * t + tj) * d + h * dh;
                    let krow = &cache.k.data()[koff..koff + dh];
                    for kk in 0..dh {
                        gq.data_mut()[qoff + kk] += ds * krow[kk];
                        gk.data_mut()[koff + kk] += ds * qrow[kk];
                    }
                }
            }
        }
    }

    let (gh_q, wq_grads) = p.wq.backward(&cache.h_ln, &gq);
    let (gh_k, wk_grads) = p.wk.backward(&cache.h_ln, &gk);
    let (gh_v, wv_grads) = p.wv.backward(&cache.h_ln, &gv);
    let mut gh = gh_q;
    gh.add_assign(&gh_k);
    gh.add_assign(&gh_v);
    let (mut dx, ln_grads) = p.ln.backward(&cache.ln, &gh);
    dx.add_assign(g);
    Ok((
        dx,
        MhsaGrads {
            ln: ln_grads,
            wq: wq_grads,
            wk: wk_grads,
            wv: wv_grads,
            wo: wo_grads,
        },
    ))
}

// ---------------------------------------------------------------------------
// Convolution module
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvModuleParams {
    pub ln: LayerNorm,
    pub pw1: Linear,
    pub dw: DepthwiseConv1d,
    pub bn: BatchNorm1d,
    pub pw2: Linear,
}

impl ConvModuleParams {
    pub fn init_random(cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        ConvModuleParams {
            ln: LayerNorm::new(d),
            pw1: Linear::init_random(2 * d, d, rng),
            dw: DepthwiseConv1d::init_random(d, cfg.conv_kernel, rng),
            bn: BatchNorm1d::new(d),
            pw2: Linear::init_random(d, d, rng),
        }
    }
}

pub struct ConvModuleCache {
    ln: LnCache,
    h_ln: Tensor,
    h_pw1: Tensor,
    h_glu: Tensor,
    bn: Bn1dCache,
    h_bn: Tensor,
    h_sw: Tensor,
    m: Option<Vec<f64>>,
}

pub struct ConvModuleGrads {
    pub ln: LnGrads,
    pub pw1: LinearGrads,
    pub dw: DwGrads,
    pub bn: Bn1dGrads,
    pub pw2: LinearGrads,
}

/// x + (layernorm -> pointwise 2d -> GLU -> depthwise -> batchnorm -> swish
/// -> pointwise -> dropout).
pub fn conv_module(x: &FrameSequence, p: &ConvModuleParams, mode: Mode) -> Result<FrameSequence> {
    conv_module_fwd(x, p, mode, &mut None).map(|(y, _, _)| y)
}

pub fn conv_module_fwd(
    x: &FrameSequence,
    p: &ConvModuleParams,
    mode: Mode,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(FrameSequence, ConvModuleCache, Option<Bn1dStatsUpdate>)> {
    let (_, _, d) = x.dims();
    if d != p.ln.dim() {
        return Err(DcucError::Shape(format!(
            "conv module expects model_dim {}, got {d}",
            p.ln.dim()
        )));
    }
    let (h_ln, ln_cache) = p.ln.forward(&x.data);
    let h_pw1 = p.pw1.forward(&h_ln)?;
    let h_glu = glu(&h_pw1)?;
    let h_dw = p.dw.forward(&h_glu);
    let (h_bn, bn_cache, bn_update) = p.bn.forward(&h_dw, mode)?;
    let h_sw = swish(&h_bn);
    let h_pw2 = p.pw2.forward(&h_sw)?;
    let (h_drop, m) = dropout_fwd(&h_pw2, dropout);
    let mut out = x.data.clone();
    out.add_assign(&h_drop);
    Ok((
        FrameSequence::new(out)?,
        ConvModuleCache {
            ln: ln_cache,
            h_ln,
            h_pw1,
            h_glu,
            bn: bn_cache,
            h_bn,
            h_sw,
            m,
        },
        bn_update,
    ))
}

pub fn conv_module_backward(
    cache: &ConvModuleCache,
    p: &ConvModuleParams,
    g: &Tensor,
) -> Result<(Tensor, ConvModuleGrads)> {
    let gdrop = dropout_bwd(g, &cache.m);
    let (gsw, pw2_grads) = p.pw2.backward(&cache.h_sw, &gdrop);
    let gbn = swish_backward(&cache.h_bn, &gsw);
    let (gdw, bn_grads) = p.bn.backward(&cache.bn, &gbn);
    let (gglu, dw_grads) = p.dw.backward(&cache.h_glu, &gdw);
    let gpw1 = glu_backward(&cache.h_pw1, &gglu);
    let (gln, pw1_grads) = p.pw1.backward(&cache.h_ln, &gpw1);
    let (mut dx, ln_grads) = p.ln.backward(&cache.ln, &gln);
    dx.add_assign(g);
    Ok((
        dx,
        ConvModuleGrads {
            ln: ln_grads,
            pw1: pw1_grads,
            dw: dw_grads,
            bn: bn_grads,
            pw2: pw2_grads,
        },
    ))
}

// ---------------------------------------------------------------------------
// Full block and stack
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConformerBlockParams {
    pub ffn1: FfnParams,
    pub mhsa: MhsaParams,
    pub conv: ConvModuleParams,
    pub ffn2: FfnParams,
    pub final_ln: LayerNorm,
}

impl ConformerBlockParams {
    pub fn init_random(cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Self {
        ConformerBlockParams {
            ffn1: FfnParams::init_random(cfg, rng),
            mhsa: MhsaParams::init_random(cfg, rng),
            conv: ConvModuleParams::init_random(cfg, rng),
            ffn2: FfnParams::init_random(cfg, rng),
            final_ln: LayerNorm::new(cfg.model_dim),
        }
    }
}

pub struct ConformerBlockCache {
    ffn1: FfnCache,
    mhsa: MhsaCache,
    conv: ConvModuleCache,
    ffn2: FfnCache,
    final_ln: LnCache,
}

pub struct ConformerBlockGrads {
    pub ffn1: FfnGrads,
    pub mhsa: MhsaGrads,
    pub conv: ConvModuleGrads,
    pub ffn2: FfnGrads,
    pub final_ln: LnGrads,
}

pub fn conformer_block(
    x: &FrameSequence,
    p: &ConformerBlockParams,
    mode: Mode,
) -> Result<FrameSequence> {
    conformer_block_fwd(x, p, mode, &mut None).map(|(y, _, _)| y)
}

pub fn conformer_block_fwd(
    x: &FrameSequence,
    p: &ConformerBlockParams,
    mode: Mode,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(
    FrameSequence,
    ConformerBlockCache,
    Option<Bn1dStatsUpdate>,
)> {
    let (x1, ffn1_cache) = ffn_half_fwd(x, &p.ffn1, dropout)?;
    let (x2, mhsa_cache) = mhsa_fwd(&x1, &p.mhsa)?;
    let (x3, conv_cache, bn_update) = conv_module_fwd(&x2, &p.conv, mode, dropout)?;
    let (x4, ffn2_cache) = ffn_half_fwd(&x3, &p.ffn2, dropout)?;
    let (y, final_cache) = p.final_ln.forward(&x4.data);
    Ok((
        FrameSequence::new(y)?,
        ConformerBlockCache {
            ffn1: ffn1_cache,
            mhsa: mhsa_cache,
            conv: conv_cache,
            ffn2: ffn2_cache,
            final_ln: final_cache,
        },
        bn_update,
    ))
}

pub fn conformer_block_backward(
    cache: &ConformerBlockCache,
    p: &ConformerBlockParams,
    g: &Tensor,
) -> Result<(Tensor, ConformerBlockGrads)> {
    let (g4, final_grads) = p.final_ln.backward(&cache.final_ln, g);
    let (g3, ffn2_grads) = ffn_half_backward(&cache.ffn2, &p.ffn2, &g4)?;
    let (g2, conv_grads) = conv_module_backward(&cache.conv, &p.conv, &g3)?;
    let (g1, mhsa_grads) = mhsa_backward(&cache.mhsa, &p.mhsa, &g2)?;
    let (dx, ffn1_grads) = ffn_half_backward(&cache.ffn1, &p.ffn1, &g1)?;
    Ok((
        dx,
        ConformerBlockGrads {
            ffn1: ffn1_grads,
            mhsa: mhsa_grads,
            conv: conv_grads,
            ffn2: ffn2_grads,
            final_ln: final_grads,
        },
    ))
}

/// A stack of conformer blocks applied in sequence.
pub fn conformer_stack_fwd(
    x: &FrameSequence,
    blocks: &[ConformerBlockParams],
    mode: Mode,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(
    FrameSequence,
    Vec<ConformerBlockCache>,
    Vec<Option<Bn1dStatsUpdate>>,
)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    let mut updates = Vec::with_capacity(blocks.len());
    for p in blocks {
        let (next, cache, update) = conformer_block_fwd(&cur, p, mode, dropout)?;
        caches.push(cache);
        updates.push(update);
        cur = next;
    }
    Ok((cur, caches, updates))
}

pub fn conformer_stack_backward(
    caches: &[ConformerBlockCache],
    blocks: &[ConformerBlockParams],
    g: &Tensor,
) -> Result<(Tensor, Vec<ConformerBlockGrads>)> {
    let mut grads_rev = Vec::with_capacity(blocks.len());
    let mut cur = g.clone();
    for (cache, p) in caches.iter().zip(blocks).rev() {
        let (gx, grads) = conformer_block_backward(cache, p, &cur)?;
        grads_rev.push(grads);
        cur = gx;
    }
    grads_rev.reverse();
    Ok((cur, grads_rev))
}
