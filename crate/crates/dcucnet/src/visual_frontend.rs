//! Per-frame visual embedding and temporal alignment.
//!
//! Frames go through a small residual conv encoder: stem conv-BN-ReLU, a
//! residual stage at the stem width, a stride-2 residual stage at double
//! width with a projected shortcut, global average pooling, and a linear
//! head. Each frame is encoded independently, so the embedding is
//! permutation-equivariant along the frame axis. `temporal_upsample` then
//! aligns the visual frame rate to the audio frame rate.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::complex_nn::Mode;
use crate::conformer::{Linear, LinearGrads};
use crate::error::{DcucError, Result};
use crate::realconv::{conv2d_acc, conv2d_input_grad_acc, conv2d_weight_grad_acc, ConvDims};
use crate::tensor::Tensor;

/// Grayscale frame stack, row-major [num_frames, height, width].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    pub frames: Vec<u8>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

impl VideoFrames {
    pub fn new(
        frames: Vec<u8>,
        num_frames: usize,
        height: usize,
        width: usize,
        fps: f64,
    ) -> Result<Self> {
        if frames.len() != num_frames * height * width {
            return Err(DcucError::Shape(format!(
                "frame buffer holds {} bytes, expected {}x{}x{}",
                frames.len(),
                num_frames,
                height,
                width
            )));
        }
        if num_frames == 0 || fps <= 0.0 {
            return Err(DcucError::InvalidInput(
                "video needs at least one frame and a positive fps".into(),
            ));
        }
        Ok(VideoFrames {
            frames,
            num_frames,
            height,
            width,
            fps,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames as f64 / self.fps
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.frames[i * n..(i + 1) * n]
    }
}

/// Embedding rows, shape [num_frames, embed_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding {
    pub data: Tensor,
}

impl VisualEmbedding {
    pub fn num_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.data.shape()[1]
    }
}

// ---------------------------------------------------------------------------
// DVID container
// ---------------------------------------------------------------------------

const DVID_MAGIC: &[u8; 4] = b"DVID";
const DVID_VERSION: u32 = 1;

pub fn encode_dvid(v: &VideoFrames) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + v.frames.len());
    out.extend_from_slice(DVID_MAGIC);
    out.extend_from_slice(&DVID_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.num_frames as u32).to_le_bytes());
    out.extend_from_slice(&(v.height as u32).to_le_bytes());
    out.extend_from_slice(&(v.width as u32).to_le_bytes());
    out.extend_from_slice(&(v.fps as f32).to_le_bytes());
    out.extend_from_slice(&v.frames);
    out
}

pub fn decode_dvid(bytes: &[u8]) -> Result<VideoFrames> {
    if bytes.len() < 24 || &bytes[0..4] != DVID_MAGIC {
        return Err(DcucError::Format("dvid: bad magic".into()));
    }
    let rd = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = rd(4);
    if version != DVID_VERSION {
        return Err(DcucError::Format(format!(
            "dvid: unsupported version {version}"
        )));
    }
    let num_frames = rd(8) as usize;
    let height = rd(12) as usize;
    let width = rd(16) as usize;
    let fps = f32::from_le_bytes(bytes[20..24].try_into().unwrap()) as f64;
    let expected = 24usize
        .checked_add(num_frames * height * width)
        .ok_or_else(|| DcucError::Format("dvid: dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(DcucError::Format(format!(
            "dvid: payload is {} bytes, header implies {}",
            bytes.len() - 24,
            expected - 24
        )));
    }
    VideoFrames::new(bytes[24..].to_vec(), num_frames, height, width, fps)
}

pub fn read_dvid(path: &Path) -> Result<VideoFrames> {
    decode_dvid(&fs::read(path).map_err(|e| DcucError::io(path, e))?)
}

pub fn write_dvid(path: &Path, v: &VideoFrames) -> Result<()> {
    fs::write(path, encode_dvid(v)).map_err(|e| DcucError::io(path, e))
}

// ---------------------------------------------------------------------------
// Real conv / batch-norm layers for image stacks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2dReal {
    /// [out_ch, in_ch, kh, kw]
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

pub struct Conv2dRealGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2dReal {
    pub fn init_random(
        out_ch: usize,
        in_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut weight = Tensor::zeros(&[out_ch, in_ch, kernel.0, kernel.1]);
        let bound = 1.0 / ((in_ch * kernel.0 * kernel.1) as f64).sqrt();
        for v in weight.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Conv2dReal {
            weight,
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = ConvDims::forward(x.shape(), self.weight.shape(), self.stride, self.padding)?;
        let mut out = Tensor::zeros(&[d.b, d.oc, d.fo, d.to]);
        conv2d_acc(out.data_mut(), x.data(), self.weight.data(), &d, 1.0);
        for bb in 0..d.b {
            for o in 0..d.oc {
                let base = (bb * d.oc + o) * d.fo * d.to;
                let bv = self.bias.data()[o];
                for k in 0..d.fo * d.to {
                    out.data_mut()[base + k] += bv;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, g: &Tensor) -> Result<(Tensor, Conv2dRealGrads)> {
        let d = ConvDims::forward(x.shape(), self.weight.shape(), self.stride, self.padding)?;
        let mut dx = Tensor::zeros(x.shape());
        conv2d_input_grad_acc(dx.data_mut(), g.data(), self.weight.data(), &d, 1.0);
        let mut dw = Tensor::zeros(self.weight.shape());
        conv2d_weight_grad_acc(dw.data_mut(), x.data(), g.data(), &d, 1.0);
        let mut db = Tensor::zeros(self.bias.shape());
        for bb in 0..d.b {
            for o in 0..d.oc {
                let base = (bb * d.oc + o) * d.fo * d.to;
                db.data_mut()[o] += g.data()[base..base + d.fo * d.to].iter().sum::<f64>();
            }
        }
        Ok((
            dx,
            Conv2dRealGrads {
                weight: dw,
                bias: db,
            },
        ))
    }
}

/// Per-channel batch normalization over [N, C, H, W].
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

pub struct Bn2dCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

pub struct Bn2dGrads {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct Bn2dStatsUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Bn2dStatsUpdate {
    pub fn apply(&self, p: &mut BatchNorm2d) {
        let m = p.momentum;
        for k in 0..self.mean.len() {
            p.run_mean.data_mut()[k] = (1.0 - m) * p.run_mean.data()[k] + m * self.mean[k];
            p.run_var.data_mut()[k] = (1.0 - m) * p.run_var.data()[k] + m * self.var[k];
        }
    }
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            run_mean: Tensor::zeros(&[channels]),
            run_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Bn2dCache, Option<Bn2dStatsUpdate>)> {
        let sh = x.shape();
        let (n, c, spatial) = (sh[0], sh[1], sh[2] * sh[3]);
        let m = n * spatial;
        if mode == Mode::Train && m < 2 {
            return Err(DcucError::InvalidInput(
                "batch norm needs at least 2 samples per channel".into(),
            ));
        }
        let mut xhat = Tensor::zeros(sh);
        let mut out = Tensor::zeros(sh);
        let mut inv_std = vec![0.0; c];
        let mut update = None;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        match mode {
            Mode::Train => {
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * spatial;
                        means[cc] += x.data()[base..base + spatial].iter().sum::<f64>();
                    }
                }
                for v in means.iter_mut() {
                    *v /= m as f64;
                }
                for nn in 0..n {
                    for cc in 0..c {
                        let base = (nn * c + cc) * spatial;
                        let mu = means[cc];
                        vars[cc] += x.data()[base..base + spatial]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                }
                for v in vars.iter_mut() {
                    *v /= m as f64;
                }
                update = Some(Bn2dStatsUpdate {
                    mean: means.clone(),
                    var: vars.clone(),
                });
            }
            Mode::Eval => {
                means.copy_from_slice(self.run_mean.data());
                vars.copy_from_slice(self.run_var.data());
            }
        }
        for (k, is) in inv_std.iter_mut().enumerate() {
            *is = 1.0 / (vars[k] + self.eps).sqrt();
        }
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * spatial;
                for k in 0..spatial {
                    let h = (x.data()[base + k] - means[cc]) * inv_std[cc];
                    xhat.data_mut()[base + k] = h;
                    out.data_mut()[base + k] = self.gamma.data()[cc] * h + self.beta.data()[cc];
                }
            }
        }
        Ok((
            out,
            Bn2dCache {
                xhat,
                inv_std,
                mode,
            },
            update,
        ))
    }

    pub fn backward(&self, cache: &Bn2dCache, g: &Tensor) -> (Tensor, Bn2dGrads) {
        let sh = g.shape();
        let (n, c, spatial) = (sh[0], sh[1], sh[2] * sh[3]);
        let m = (n * spatial) as f64;
        let mut dx = Tensor::zeros(sh);
        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        let mut mean_g = vec![0.0; c];
        let mut mean_gx = vec![0.0; c];
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * spatial;
                for k in 0..spatial {
                    let gv = g.data()[base + k];
                    let xh = cache.xhat.data()[base + k];
                    dgamma.data_mut()[cc] += gv * xh;
                    dbeta.data_mut()[cc] += gv;
                    mean_g[cc] += gv;
                    mean_gx[cc] += gv * xh;
                }
            }
        }
        for cc in 0..c {
            mean_g[cc] /= m;
            mean_gx[cc] /= m;
        }
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * spatial;
                let scale = self.gamma.data()[cc] * cache.inv_std[cc];
                for k in 0..spatial {
                    let gv = g.data()[base + k];
                    let xh = cache.xhat.data()[base + k];
                    dx.data_mut()[base + k] = match cache.mode {
                        Mode::Train => scale * (gv - mean_g[cc] - xh * mean_gx[cc]),
                        Mode::Eval => scale * gv,
                    };
                }
            }
        }
        (
            dx,
            Bn2dGrads {
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }
}

fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn relu_backward(pre: &Tensor, g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(pre.shape());
    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(pre.data()).zip(g.data()) {
        *d = if xv > 0.0 { gv } else { 0.0 };
    }
    dx
}

// ---------------------------------------------------------------------------
// Frontend configuration and parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VisualConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub stem_channels: usize,
    /// Channel width per residual stage; stages after the first downsample by 2.
    pub stage_channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        VisualConfig {
            frame_height: 32,
            frame_width: 32,
            stem_channels: 16,
            stage_channels: vec![16, 32],
            embed_dim: 32,
        }
    }
}

impl VisualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(DcucError::ConfigMismatch(
                "visual frontend needs at least one stage".into(),
            ));
        }
        if self.stage_channels[0] != self.stem_channels {
            return Err(DcucError::ConfigMismatch(
                "first stage width must match the stem".into(),
            ));
        }
        let down = 1usize << (self.stage_channels.len() - 1);
        if self.frame_height % down != 0 || self.frame_width % down != 0 {
            return Err(DcucError::ConfigMismatch(format!(
                "frame size {}x{} not divisible by total downsampling {down}",
                self.frame_height, self.frame_width
            )));
        }
        Ok(())
    }
}

/// One residual block: conv-BN-ReLU, conv-BN, shortcut add, ReLU. Blocks that
/// change width or stride carry a 1x1 projected shortcut with its own BN.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2dReal,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2dReal,
    pub bn2: BatchNorm2d,
    pub proj: Option<(Conv2dReal, BatchNorm2d)>,
}

impl ResBlock {
    fn init_random(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = if in_ch != out_ch || stride != 1 {
            Some((
                Conv2dReal::init_random(out_ch, in_ch, (1, 1), (stride, stride), (0, 0), rng),
                BatchNorm2d::new(out_ch),
            ))
        } else {
            None
        };
        ResBlock {
            conv1: Conv2dReal::init_random(out_ch, in_ch, (3, 3), (stride, stride), (1, 1), rng),
            bn1: BatchNorm2d::new(out_ch),
            conv2: Conv2dReal::init_random(out_ch, out_ch, (3, 3), (1, 1), (1, 1), rng),
            bn2: BatchNorm2d::new(out_ch),
            proj,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VisualFrontendParams {
    pub stem: Conv2dReal,
    pub stem_bn: BatchNorm2d,
    pub blocks: Vec<ResBlock>,
    pub head: Linear,
}

impl VisualFrontendParams {
    pub fn init_random(cfg: &VisualConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = cfg.stem_channels;
        for (i, &ch) in cfg.stage_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResBlock::init_random(in_ch, ch, stride, rng));
            in_ch = ch;
        }
        VisualFrontendParams {
            stem: Conv2dReal::init_random(cfg.stem_channels, 1, (3, 3), (1, 1), (1, 1), rng),
            stem_bn: BatchNorm2d::new(cfg.stem_channels),
            blocks,
            head: Linear::init_random(cfg.embed_dim, *cfg.stage_channels.last().unwrap(), rng),
        }
    }
}

struct ResBlockCache {
    x: Tensor,
    bn1: Bn2dCache,
    pre_relu1: Tensor,
    r1: Tensor,
    bn2: Bn2dCache,
    proj_bn: Option<Bn2dCache>,
    sum: Tensor,
}

pub struct EncodeCache {
    frames01: Tensor,
    stem_bn: Bn2dCache,
    stem_pre_relu: Tensor,
    blocks: Vec<ResBlockCache>,
    pooled: Tensor,
    out_shape: Vec<usize>,
}

pub struct ResBlockGrads {
    pub conv1: Conv2dRealGrads,
    pub bn1: Bn2dGrads,
    pub conv2: Conv2dRealGrads,
    pub bn2: Bn2dGrads,
    pub proj: Option<(Conv2dRealGrads, Bn2dGrads)>,
}

pub struct EncodeGrads {
    pub stem: Conv2dRealGrads,
    pub stem_bn: Bn2dGrads,
    pub blocks: Vec<ResBlockGrads>,
    pub head: LinearGrads,
}

type BlockUpdates = (
    Option<Bn2dStatsUpdate>,
    Option<Bn2dStatsUpdate>,
    Option<Bn2dStatsUpdate>,
);

/// Batch-stat updates from a train-mode pass, in layer order.
pub struct VisualStatsUpdates {
    pub stem: Option<Bn2dStatsUpdate>,
    pub blocks: Vec<BlockUpdates>,
}

impl VisualStatsUpdates {
    pub fn apply(&self, p: &mut VisualFrontendParams) {
        if let Some(u) = &self.stem {
            u.apply(&mut p.stem_bn);
        }
        for (upd, block) in self.blocks.iter().zip(&mut p.blocks) {
            if let Some(u) = &upd.0 {
                u.apply(&mut block.bn1);
            }
            if let Some(u) = &upd.1 {
                u.apply(&mut block.bn2);
            }
            if let (Some(u), Some((_, bn))) = (&upd.2, block.proj.as_mut()) {
                u.apply(bn);
            }
        }
    }
}

fn res_block_fwd(
    x: &Tensor,
    b: &ResBlock,
    mode: Mode,
) -> Result<(Tensor, ResBlockCache, BlockUpdates)> {
    let h1 = b.conv1.forward(x)?;
    let (n1, bn1_cache, u1) = b.bn1.forward(&h1, mode)?;
    let r1 = relu(&n1);
    let h2 = b.conv2.forward(&r1)?;
    let (n2, bn2_cache, u2) = b.bn2.forward(&h2, mode)?;
    let (short, proj_bn, u3) = match &b.proj {
        Some((conv, bn)) => {
            let s = conv.forward(x)?;
            let (sn, cache, u) = bn.forward(&s, mode)?;
            (sn, Some(cache), u)
        }
        None => (x.clone(), None, None),
    };
    let mut sum = n2;
    sum.add_assign(&short);
    let out = relu(&sum);
    Ok((
        out,
        ResBlockCache {
            x: x.clone(),
            bn1: bn1_cache,
            pre_relu1: n1,
            r1,
            bn2: bn2_cache,
            proj_bn,
            sum,
        },
        (u1, u2, u3),
    ))
}

fn res_block_bwd(cache: &ResBlockCache, b: &ResBlock, g: &Tensor) -> Result<(Tensor, ResBlockGrads)> {
    let gsum = relu_backward(&cache.sum, g);
    let (gh2, bn2_grads) = b.bn2.backward(&cache.bn2, &gsum);
    let (gr1, conv2_grads) = b.conv2.backward(&cache.r1, &gh2)?;
    let gn1 = relu_backward(&cache.pre_relu1, &gr1);
    let (gh1, bn1_grads) = b.bn1.backward(&cache.bn1, &gn1);
    let (mut dx, conv1_grads) = b.conv1.backward(&cache.x, &gh1)?;
    let proj_grads = match (&b.proj, &cache.proj_bn) {
        (Some((conv, bn)), Some(proj_cache)) => {
            let (gs, proj_bn_grads) = bn.backward(proj_cache, &gsum);
            let (dxs, proj_conv_grads) = conv.backward(&cache.x, &gs)?;
            dx.add_assign(&dxs);
            Some((proj_conv_grads, proj_bn_grads))
        }
        _ => {
            dx.add_assign(&gsum);
            None
        }
    };
    Ok((
        dx,
        ResBlockGrads {
            conv1: conv1_grads,
            bn1: bn1_grads,
            conv2: conv2_grads,
            bn2: bn2_grads,
            proj: proj_grads,
        },
    ))
}

/// Map every frame to an embedding row; frames are normalized to [0, 1]
/// before the stem.
pub fn encode_frames(
    v: &VideoFrames,
    params: &VisualFrontendParams,
    cfg: &VisualConfig,
    mode: Mode,
) -> Result<VisualEmbedding> {
    encode_frames_fwd(v, params, cfg, mode).map(|(e, _, _)| e)
}

pub fn encode_frames_fwd(
    v: &VideoFrames,
    params: &VisualFrontendParams,
    cfg: &VisualConfig,
    mode: Mode,
) -> Result<(VisualEmbedding, EncodeCache, VisualStatsUpdates)> {
    cfg.validate()?;
    if v.height != cfg.frame_height || v.width != cfg.frame_width {
        return Err(DcucError::Shape(format!(
            "frames are {}x{}, config expects {}x{}",
            v.height, v.width, cfg.frame_height, cfg.frame_width
        )));
    }
    let n = v.num_frames;
    let frames01 = Tensor::from_vec(
        v.frames.iter().map(|&b| b as f64 / 255.0).collect(),
        &[n, 1, v.height, v.width],
    )?;

    let stem_out = params.stem.forward(&frames01)?;
    let (stem_n, stem_bn_cache, stem_update) = params.stem_bn.forward(&stem_out, mode)?;
    let mut cur = relu(&stem_n);

    let mut block_caches = Vec::new();
    let mut block_updates = Vec::new();
    for b in &params.blocks {
        let (next, cache, updates) = res_block_fwd(&cur, b, mode)?;
        block_caches.push(cache);
        block_updates.push(updates);
        cur = next;
    }

    let out_shape = cur.shape().to_vec();
    let (c, spatial) = (out_shape[1], out_shape[2] * out_shape[3]);
    let mut pooled = Tensor::zeros(&[n, c]);
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * spatial;
            pooled.data_mut()[nn * c + cc] =
                cur.data()[base..base + spatial].iter().sum::<f64>() / spatial as f64;
        }
    }

    let emb = params.head.forward(&pooled)?;
    Ok((
        VisualEmbedding { data: emb },
        EncodeCache {
            frames01,
            stem_bn: stem_bn_cache,
            stem_pre_relu: stem_n,
            blocks: block_caches,
            pooled,
            out_shape,
        },
        VisualStatsUpdates {
            stem: stem_update,
            blocks: block_updates,
        },
    ))
}

pub fn encode_frames_backward(
    cache: &EncodeCache,
    params: &VisualFrontendParams,
    g: &Tensor,
) -> Result<EncodeGrads> {
    let (gpool, head_grads) = params.head.backward(&cache.pooled, g);

    // un-pool: spread each pooled gradient uniformly over the spatial dims
    let (n, c) = (cache.out_shape[0], cache.out_shape[1]);
    let spatial = cache.out_shape[2] * cache.out_shape[3];
    let mut gcur = Tensor::zeros(&cache.out_shape);
    for nn in 0..n {
        for cc in 0..c {
            let gv = gpool.data()[nn * c + cc] / spatial as f64;
            let base = (nn * c + cc) * spatial;
            for k in 0..spatial {
                gcur.data_mut()[base + k] = gv;
            }
        }
    }

    let mut block_grads_rev = Vec::new();
    for (cacheb, b) in cache.blocks.iter().zip(&params.blocks).rev() {
        let (gx, grads) = res_block_bwd(cacheb, b, &gcur)?;
        block_grads_rev.push(grads);
        gcur = gx;
    }
    block_grads_rev.reverse();

    let gstem_relu = relu_backward(&cache.stem_pre_relu, &gcur);
    let (gstem, stem_bn_grads) = params.stem_bn.backward(&cache.stem_bn, &gstem_relu);
    let (_gframes, stem_grads) = params.stem.backward(&cache.frames01, &gstem)?;

    Ok(EncodeGrads {
        stem: stem_grads,
        stem_bn: stem_bn_grads,
        blocks: block_grads_rev,
        head: head_grads,
    })
}

// ---------------------------------------------------------------------------
// Temporal upsampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Linear,
}

/// Repeat or interpolate embedding rows up to `target_frames`. Nearest mode
/// uses the index map src = floor(dst * src_frames / target_frames) and
/// keeps row values bit-exact.
pub fn temporal_upsample(
    e: &VisualEmbedding,
    target_frames: usize,
    mode: UpsampleMode,
) -> Result<VisualEmbedding> {
    let src = e.num_frames();
    if target_frames < src {
        return Err(DcucError::InvalidInput(format!(
            "temporal_upsample cannot downsample ({src} -> {target_frames})"
        )));
    }
    let d = e.embed_dim();
    let mut out = Tensor::zeros(&[target_frames, d]);
    for t in 0..target_frames {
        match mode {
            UpsampleMode::Nearest => {
                let s = t * src / target_frames;
                let row = &e.data.data()[s * d..(s + 1) * d];
                out.data_mut()[t * d..(t + 1) * d].copy_from_slice(row);
            }
            UpsampleMode::Linear => {
                let (s0, s1, w1) = linear_coords(t, src, target_frames);
                let r0 = &e.data.data()[s0 * d..(s0 + 1) * d];
                let r1 = &e.data.data()[s1 * d..(s1 + 1) * d];
                let dst = &mut out.data_mut()[t * d..(t + 1) * d];
                for k in 0..d {
                    dst[k] = (1.0 - w1) * r0[k] + w1 * r1[k];
                }
            }
        }
    }
    Ok(VisualEmbedding { data: out })
}

/// Linear-mode coordinates: endpoint-aligned position between source rows.
fn linear_coords(t: usize, src: usize, target: usize) -> (usize, usize, f64) {
    if src == 1 || target == 1 {
        return (0, 0, 0.0);
    }
    let pos = t as f64 * (src - 1) as f64 / (target - 1) as f64;
    let s0 = (pos.floor() as usize).min(src - 1);
    let s1 = (s0 + 1).min(src - 1);
    (s0, s1, pos - s0 as f64)
}

/// Adjoint of `temporal_upsample`: scatter target-row gradients back onto
/// their source rows.
pub fn temporal_upsample_backward(
    src_frames: usize,
    g: &Tensor,
    mode: UpsampleMode,
) -> Result<Tensor> {
    let target = g.shape()[0];
    let d = g.shape()[1];
    let mut dx = Tensor::zeros(&[src_frames, d]);
    for t in 0..target {
        match mode {
            UpsampleMode::Nearest => {
                let s = t * src_frames / target;
                for k in 0..d {
                    dx.data_mut()[s * d + k] += g.data()[t * d + k];
                }
            }
            UpsampleMode::Linear => {
                let (s0, s1, w1) = linear_coords(t, src_frames, target);
                for k in 0..d {
                    dx.data_mut()[s0 * d + k] += (1.0 - w1) * g.data()[t * d + k];
                    dx.data_mut()[s1 * d + k] += w1 * g.data()[t * d + k];
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_video(n: usize, seed: u64) -> VideoFrames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<u8> = (0..n * 32 * 32).map(|_| rng.random_range(0..=255)).collect();
        VideoFrames::new(frames, n, 32, 32, 25.0).unwrap()
    }

    #[test]
    fn dvid_roundtrip_is_bit_exact() {
        let v = test_video(3, 1);
        let bytes = encode_dvid(&v);
        let back = decode_dvid(&bytes).unwrap();
        assert_eq!(v, back);
        assert_eq!(encode_dvid(&back), bytes);
    }

    #[test]
    fn dvid_rejects_truncation() {
        let v = test_video(2, 2);
        let mut bytes = encode_dvid(&v);
        bytes.pop();
        assert!(decode_dvid(&bytes).is_err());
    }

    #[test]
    fn identical_frames_get_identical_embeddings() {
        let one = test_video(1, 3);
        let mut frames = one.frames.clone();
        frames.extend_from_slice(&one.frames);
        let two = VideoFrames::new(frames, 2, 32, 32, 25.0).unwrap();
        let cfg = VisualConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = VisualFrontendParams::init_random(&cfg, &mut rng);
        let e = encode_frames(&two, &params, &cfg, Mode::Eval).unwrap();
        let d = e.embed_dim();
        assert_eq!(e.data.data()[..d], e.data.data()[d..2 * d]);
    }

    #[test]
    fn constant_network_ignores_input() {
        // All weights zero except the head bias: every frame maps to the bias.
        let cfg = VisualConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = VisualFrontendParams::init_random(&cfg, &mut rng);
        params.stem.weight.fill(0.0);
        for b in &mut params.blocks {
            b.conv1.weight.fill(0.0);
            b.conv2.weight.fill(0.0);
            if let Some((c, _)) = b.proj.as_mut() {
                c.weight.fill(0.0);
            }
        }
        params.head.weight.fill(0.0);
        for (k, v) in params.head.bias.data_mut().iter_mut().enumerate() {
            *v = k as f64 * 0.5;
        }
        let v = test_video(3, 6);
        let e = encode_frames(&v, &params, &cfg, Mode::Eval).unwrap();
        for f in 0..3 {
            for k in 0..e.embed_dim() {
                assert_eq!(e.data.data()[f * e.embed_dim() + k], k as f64 * 0.5);
            }
        }
    }

    #[test]
    fn frame_permutation_equivariance() {
        let v = test_video(4, 7);
        let cfg = VisualConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = VisualFrontendParams::init_random(&cfg, &mut rng);
        let e = encode_frames(&v, &params, &cfg, Mode::Eval).unwrap();

        let fs = 32 * 32;
        let mut rev = Vec::with_capacity(v.frames.len());
        for f in (0..4).rev() {
            rev.extend_from_slice(&v.frames[f * fs..(f + 1) * fs]);
        }
        let vr = VideoFrames::new(rev, 4, 32, 32, 25.0).unwrap();
        let er = encode_frames(&vr, &params, &cfg, Mode::Eval).unwrap();
        let d = e.embed_dim();
        for f in 0..4 {
            assert_eq!(
                e.data.data()[f * d..(f + 1) * d],
                er.data.data()[(3 - f) * d..(4 - f) * d]
            );
        }
    }

    #[test]
    fn rejects_wrong_frame_size() {
        let v = VideoFrames::new(vec![0; 16 * 16], 1, 16, 16, 25.0).unwrap();
        let cfg = VisualConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = VisualFrontendParams::init_random(&cfg, &mut rng);
        assert!(matches!(
            encode_frames(&v, &params, &cfg, Mode::Eval),
            Err(DcucError::Shape(_))
        ));
    }

    #[test]
    fn nearest_upsample_integer_factor() {
        let e = VisualEmbedding {
            data: Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap(),
        };
        let up = temporal_upsample(&e, 12, UpsampleMode::Nearest).unwrap();
        let want = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0];
        assert_eq!(up.data.data(), want);
    }

    #[test]
    fn nearest_upsample_3_to_7_floor_map() {
        let e = VisualEmbedding {
            data: Tensor::from_vec(vec![10.0, 20.0, 30.0], &[3, 1]).unwrap(),
        };
        let up = temporal_upsample(&e, 7, UpsampleMode::Nearest).unwrap();
        // floor(t*3/7) for t=0..6 -> 0,0,0,1,1,2,2
        let want = [10.0, 10.0, 10.0, 20.0, 20.0, 30.0, 30.0];
        assert_eq!(up.data.data(), want);
    }

    #[test]
    fn single_frame_upsamples_to_constant() {
        let e = VisualEmbedding {
            data: Tensor::from_vec(vec![5.0, -1.0], &[1, 2]).unwrap(),
        };
        for mode in [UpsampleMode::Nearest, UpsampleMode::Linear] {
            let up = temporal_upsample(&e, 5, mode).unwrap();
            for t in 0..5 {
                assert_eq!(up.data.data()[t * 2], 5.0);
                assert_eq!(up.data.data()[t * 2 + 1], -1.0);
            }
        }
    }

    #[test]
    fn upsample_rejects_downsampling() {
        let e = VisualEmbedding {
            data: Tensor::zeros(&[5, 2]),
        };
        assert!(matches!(
            temporal_upsample(&e, 3, UpsampleMode::Nearest),
            Err(DcucError::InvalidInput(_))
        ));
    }
}
