//! The full enhancement model: complex U-Net encoder/decoder with skip
//! connections, audio-visual fusion through a conformer stack, complex ratio
//! masking, and the end-to-end `enhance` pipeline.
//!
//! Data flow:
//!
//! ```text
//! noisy ── conv_stft ──> encoder (5x complex conv-BN-PReLU, freq stride 2)
//!                            │ latent real part ─ flatten ─┐
//! video ── frame encoder ── temporal upsample ── concat ───┤
//!                                                          ├─ conformer stack
//!                            latent imag part ─────────────┤   (projected in/out)
//!                                                          ▼
//!          decoder (5x skip-concat, complex transposed conv) ──> mask
//!          enhanced = istft(noisy_spectrum * bounded_mask)
//! ```
//!
//! The imaginary part of the latent bypasses the conformer and rejoins at
//! the decoder input; only the real part is fused with the visual stream.
//! Every stage has an explicit backward pass; `enhance_fwd` +
//! `enhance_backward` are what training and the full-model gradient check
//! drive.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::complex_nn::{
    complex_batch_norm_backward, complex_batch_norm_fwd, complex_conv2d, complex_conv2d_backward,
    complex_conv_transpose2d, complex_conv_transpose2d_backward, prelu, prelu_backward, CbnCache,
    CbnGrads, CbnStatsUpdate, ComplexBatchNormParams, ComplexConvGrads, ComplexConvParams, Mode,
};
use crate::conformer::{
    conformer_stack_backward, conformer_stack_fwd, Bn1dStatsUpdate, ConformerBlockCache,
    ConformerBlockGrads, ConformerBlockParams, ConformerConfig, DropoutCtx, FrameSequence, Linear,
    LinearGrads,
};
use crate::dsp_stft::{conv_istft, conv_istft_backward, conv_stft, Spectrogram, StftConfig, Waveform};
use crate::error::{DcucError, Result};
use crate::tensor::{ComplexTensor, Tensor};
use crate::visual_frontend::{
    encode_frames_backward, encode_frames_fwd, temporal_upsample, temporal_upsample_backward,
    EncodeCache, EncodeGrads, UpsampleMode, VideoFrames, VisualConfig, VisualEmbedding,
    VisualFrontendParams, VisualStatsUpdates,
};

pub mod checkpoint;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stft: StftConfig,
    pub encoder_channels: Vec<usize>,
    /// (freq, time) kernel of every encoder/decoder conv.
    pub kernel: (usize, usize),
    /// (freq, time) stride; time stride must stay 1 to keep the frame axis
    /// aligned with the visual stream.
    pub stride: (usize, usize),
    pub conformer: ConformerConfig,
    pub visual: VisualConfig,
    /// Width of the fused sequence fed to the conformer; must equal
    /// `conformer.model_dim`.
    pub fusion_proj_dim: usize,
    /// Mask magnitude bound (tanh bounding, phase preserved); None disables
    /// bounding.
    pub mask_bound: Option<f64>,
    pub upsample: UpsampleMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stft: StftConfig::default(),
            encoder_channels: vec![16, 32, 64, 64, 64],
            kernel: (5, 2),
            stride: (2, 1),
            conformer: ConformerConfig::default(),
            visual: VisualConfig::default(),
            fusion_proj_dim: ConformerConfig::default().model_dim,
            mask_bound: Some(1.0),
            upsample: UpsampleMode::Nearest,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny topology for gradient checks: 2 encoder blocks, 1 conformer
    /// block, 9 frequency bins.
    pub fn micro() -> Self {
        ModelConfig {
            stft: StftConfig {
                win_length: 16,
                hop_length: 8,
                fft_length: 16,
                ..StftConfig::default()
            },
            encoder_channels: vec![2, 3],
            kernel: (3, 2),
            stride: (2, 1),
            conformer: ConformerConfig {
                model_dim: 8,
                num_heads: 2,
                ffn_expansion: 2,
                conv_kernel: 3,
                num_blocks: 1,
                dropout: 0.0,
                ..Default::default()
            },
            visual: VisualConfig {
                frame_height: 8,
                frame_width: 8,
                stem_channels: 2,
                stage_channels: vec![2, 3],
                embed_dim: 4,
            },
            fusion_proj_dim: 8,
            mask_bound: Some(1.0),
            upsample: UpsampleMode::Nearest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.conformer.validate()?;
        self.visual.validate()?;
        if self.encoder_channels.is_empty() {
            return Err(DcucError::ConfigMismatch(
                "encoder needs at least one block".into(),
            ));
        }
        if self.kernel.0 % 2 == 0 || self.kernel.0 < 1 || self.kernel.1 < 1 {
            return Err(DcucError::ConfigMismatch(format!(
                "kernel {:?} must have an odd freq extent and positive dims",
                self.kernel
            )));
        }
        if self.stride != (2, 1) {
            return Err(DcucError::ConfigMismatch(
                "encoder stride is fixed at (2, 1)".into(),
            ));
        }
        if self.fusion_proj_dim != self.conformer.model_dim {
            return Err(DcucError::ConfigMismatch(format!(
                "fusion_proj_dim {} must equal conformer model_dim {}",
                self.fusion_proj_dim, self.conformer.model_dim
            )));
        }
        if let Some(b) = self.mask_bound {
            if b <= 0.0 {
                return Err(DcucError::ConfigMismatch(
                    "mask_bound must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Latent frequency dim after all encoder blocks (ceil division per block).
    pub fn latent_freq(&self) -> usize {
        let mut f = self.stft.freq_bins();
        for _ in 0..self.num_blocks() {
            f = f.div_ceil(2);
        }
        f
    }

    fn encoder_padding(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, self.kernel.1 - 1)
    }

    fn decoder_padding(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, 0)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub conv: ComplexConvParams,
    pub bn: ComplexBatchNormParams,
    pub slope: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub conv: ComplexConvParams,
    /// The final block has no normalization or activation.
    pub bn: Option<ComplexBatchNormParams>,
    pub slope: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub proj_in: Linear,
    pub proj_out: Linear,
}

/// All learned parameters plus running statistics, keyed by canonical dotted
/// names through the visitor methods.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderBlock>,
    pub fusion: FusionParams,
    pub conformer: Vec<ConformerBlockParams>,
    pub decoder: Vec<DecoderBlock>,
    pub visual: VisualFrontendParams,
}

impl ModelState {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.num_blocks();
        let ch = &config.encoder_channels;

        let mut encoder = Vec::with_capacity(n);
        for i in 0..n {
            let in_ch = if i == 0 { 1 } else { ch[i - 1] };
            let out_ch = ch[i];
            encoder.push(EncoderBlock {
                conv: ComplexConvParams::init_random(
                    out_ch,
                    in_ch,
                    config.kernel,
                    config.stride,
                    config.encoder_padding(),
                    &mut rng,
                ),
                bn: ComplexBatchNormParams::new(out_ch),
                slope: Tensor::full(&[out_ch], 0.25),
            });
        }

        let latent_ch = ch[n - 1];
        let flat = latent_ch * config.latent_freq();
        let mut fusion = FusionParams {
            proj_in: Linear::init_random(
                config.fusion_proj_dim,
                flat + config.visual.embed_dim,
                &mut rng,
            ),
            proj_out: Linear::init_random(flat, config.fusion_proj_dim, &mut rng),
        };
        // balance the two modalities at init: the audio block dwarfs the
        // visual embedding in width, so scale the visual columns up until
        // both contribute comparable variance to the fused projection
        let vis_scale = ((flat as f64 / config.visual.embed_dim.max(1) as f64).sqrt()).min(8.0);
        let in_w = flat + config.visual.embed_dim;
        for row in 0..config.fusion_proj_dim {
            for col in flat..in_w {
                fusion.proj_in.weight.data_mut()[row * in_w + col] *= vis_scale;
            }
        }

        let conformer = (0..config.conformer.num_blocks)
            .map(|_| ConformerBlockParams::init_random(&config.conformer, &mut rng))
            .collect();

        // Decoder block i consumes the previous output concatenated with the
        // skip from encoder block n-1-i; widths mirror the encoder reversed,
        // ending in a single mask channel.
        let mut decoder = Vec::with_capacity(n);
        let mut prev_out = latent_ch;
        for i in 0..n {
            let skip_ch = ch[n - 1 - i];
            let in_ch = prev_out + skip_ch;
            let last = i == n - 1;
            let out_ch = if last {
                1
            } else {
                // the width of the next (shallower) encoder level
                if n >= 2 {
                    ch[n - 2 - i]
                } else {
                    1
                }
            };
            decoder.push(DecoderBlock {
                conv: ComplexConvParams::init_random(
                    out_ch,
                    in_ch,
                    config.kernel,
                    config.stride,
                    config.decoder_padding(),
                    &mut rng,
                ),
                bn: if last {
                    None
                } else {
                    Some(ComplexBatchNormParams::new(out_ch))
                },
                slope: if last {
                    None
                } else {
                    Some(Tensor::full(&[out_ch], 0.25))
                },
            });
            prev_out = out_ch;
        }

        let visual = VisualFrontendParams::init_random(&config.visual, &mut rng);

        Ok(ModelState {
            config,
            encoder,
            fusion,
            conformer,
            decoder,
            visual,
        })
    }

    /// A state whose decoder emits exactly 1+0j at every bin: all weights
    /// zero, final decoder bias_real = 1, mask bounding disabled. Used as a
    /// debug checkpoint; `enhance` with it reduces to the STFT roundtrip.
    pub fn identity_mask(mut config: ModelConfig) -> Result<Self> {
        config.mask_bound = None;
        let mut state = Self::init(config)?;
        state.visit_trainable_mut(&mut |_, t| t.fill(0.0));
        let last = state.decoder.last_mut().expect("decoder has blocks");
        last.conv.b_real.fill(1.0);
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Parameter visitors
// ---------------------------------------------------------------------------

macro_rules! visit_cbn {
    ($f:expr, $prefix:expr, $bn:expr) => {
        $f(&format!("{}.gamma_rr", $prefix), &mut $bn.gamma_rr);
        $f(&format!("{}.gamma_ri", $prefix), &mut $bn.gamma_ri);
        $f(&format!("{}.gamma_ii", $prefix), &mut $bn.gamma_ii);
        $f(&format!("{}.beta_r", $prefix), &mut $bn.beta_r);
        $f(&format!("{}.beta_i", $prefix), &mut $bn.beta_i);
    };
}

macro_rules! visit_cbn_running {
    ($f:expr, $prefix:expr, $bn:expr) => {
        $f(&format!("{}.run_mean_r", $prefix), &mut $bn.run_mean_r);
        $f(&format!("{}.run_mean_i", $prefix), &mut $bn.run_mean_i);
        $f(&format!("{}.run_vrr", $prefix), &mut $bn.run_vrr);
        $f(&format!("{}.run_vri", $prefix), &mut $bn.run_vri);
        $f(&format!("{}.run_vii", $prefix), &mut $bn.run_vii);
    };
}

impl ModelState {
    /// Visit every trainable tensor in a fixed order. `ModelGrads::visit`
    /// yields gradients under identical names in identical order.
    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        // Biases on convs that feed straight into a batch norm are dead
        // parameters (the normalization cancels any constant channel shift),
        // so they are not visited as trainables and stay zero.
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            f(&format!("{p}.conv.w_real"), &mut b.conv.w_real);
            f(&format!("{p}.conv.w_imag"), &mut b.conv.w_imag);
            visit_cbn!(f, format!("{p}.bn"), b.bn);
            f(&format!("{p}.prelu.slope"), &mut b.slope);
        }
        f("fusion.proj_in.weight", &mut self.fusion.proj_in.weight);
        f("fusion.proj_in.bias", &mut self.fusion.proj_in.bias);
        f("fusion.proj_out.weight", &mut self.fusion.proj_out.weight);
        f("fusion.proj_out.bias", &mut self.fusion.proj_out.bias);
        for (i, b) in self.conformer.iter_mut().enumerate() {
            let p = format!("conformer.{i}");
            for (name, ffn) in [("ffn1", &mut b.ffn1), ("ffn2", &mut b.ffn2)] {
                f(&format!("{p}.{name}.ln.gamma"), &mut ffn.ln.gamma);
                f(&format!("{p}.{name}.ln.beta"), &mut ffn.ln.beta);
                f(&format!("{p}.{name}.w1.weight"), &mut ffn.w1.weight);
                f(&format!("{p}.{name}.w1.bias"), &mut ffn.w1.bias);
                f(&format!("{p}.{name}.w2.weight"), &mut ffn.w2.weight);
                f(&format!("{p}.{name}.w2.bias"), &mut ffn.w2.bias);
            }
            f(&format!("{p}.mhsa.ln.gamma"), &mut b.mhsa.ln.gamma);
            f(&format!("{p}.mhsa.ln.beta"), &mut b.mhsa.ln.beta);
            // the key bias shifts every attention logit in a row equally and
            // softmax cancels it, so it is dead and stays zero
            for (name, lin) in [
                ("wq", &mut b.mhsa.wq),
                ("wk", &mut b.mhsa.wk),
                ("wv", &mut b.mhsa.wv),
                ("wo", &mut b.mhsa.wo),
            ] {
                f(&format!("{p}.mhsa.{name}.weight"), &mut lin.weight);
                if name != "wk" {
                    f(&format!("{p}.mhsa.{name}.bias"), &mut lin.bias);
                }
            }
            f(&format!("{p}.conv.ln.gamma"), &mut b.conv.ln.gamma);
            f(&format!("{p}.conv.ln.beta"), &mut b.conv.ln.beta);
            f(&format!("{p}.conv.pw1.weight"), &mut b.conv.pw1.weight);
            f(&format!("{p}.conv.pw1.bias"), &mut b.conv.pw1.bias);
            f(&format!("{p}.conv.dw.weight"), &mut b.conv.dw.weight);
            f(&format!("{p}.conv.bn.gamma"), &mut b.conv.bn.gamma);
            f(&format!("{p}.conv.bn.beta"), &mut b.conv.bn.beta);
            f(&format!("{p}.conv.pw2.weight"), &mut b.conv.pw2.weight);
            f(&format!("{p}.conv.pw2.bias"), &mut b.conv.pw2.bias);
            f(&format!("{p}.final_ln.gamma"), &mut b.final_ln.gamma);
            f(&format!("{p}.final_ln.beta"), &mut b.final_ln.beta);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            f(&format!("{p}.conv.w_real"), &mut b.conv.w_real);
            f(&format!("{p}.conv.w_imag"), &mut b.conv.w_imag);
            if b.bn.is_none() {
                f(&format!("{p}.conv.b_real"), &mut b.conv.b_real);
                f(&format!("{p}.conv.b_imag"), &mut b.conv.b_imag);
            }
            if let Some(bn) = b.bn.as_mut() {
                visit_cbn!(f, format!("{p}.bn"), bn);
            }
            if let Some(slope) = b.slope.as_mut() {
                f(&format!("{p}.prelu.slope"), slope);
            }
        }
        {
            let v = &mut self.visual;
            f("visual.stem.weight", &mut v.stem.weight);
            f("visual.stem_bn.gamma", &mut v.stem_bn.gamma);
            f("visual.stem_bn.beta", &mut v.stem_bn.beta);
            for (i, blk) in v.blocks.iter_mut().enumerate() {
                let p = format!("visual.block.{i}");
                f(&format!("{p}.conv1.weight"), &mut blk.conv1.weight);
                f(&format!("{p}.bn1.gamma"), &mut blk.bn1.gamma);
                f(&format!("{p}.bn1.beta"), &mut blk.bn1.beta);
                f(&format!("{p}.conv2.weight"), &mut blk.conv2.weight);
                f(&format!("{p}.bn2.gamma"), &mut blk.bn2.gamma);
                f(&format!("{p}.bn2.beta"), &mut blk.bn2.beta);
                if let Some((conv, bn)) = blk.proj.as_mut() {
                    f(&format!("{p}.proj.weight"), &mut conv.weight);
                    f(&format!("{p}.proj_bn.gamma"), &mut bn.gamma);
                    f(&format!("{p}.proj_bn.beta"), &mut bn.beta);
                }
            }
            f("visual.head.weight", &mut v.head.weight);
            f("visual.head.bias", &mut v.head.bias);
        }
    }

    /// Visit every persistent tensor: trainables plus running statistics.
    pub fn visit_all_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_trainable_mut(f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            visit_cbn_running!(f, format!("encoder.{i}.bn"), b.bn);
        }
        for (i, b) in self.conformer.iter_mut().enumerate() {
            let p = format!("conformer.{i}.conv.bn");
            f(&format!("{p}.run_mean"), &mut b.conv.bn.run_mean);
            f(&format!("{p}.run_var"), &mut b.conv.bn.run_var);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            if let Some(bn) = b.bn.as_mut() {
                visit_cbn_running!(f, format!("decoder.{i}.bn"), bn);
            }
        }
        let v = &mut self.visual;
        f("visual.stem_bn.run_mean", &mut v.stem_bn.run_mean);
        f("visual.stem_bn.run_var", &mut v.stem_bn.run_var);
        for (i, blk) in v.blocks.iter_mut().enumerate() {
            let p = format!("visual.block.{i}");
            f(&format!("{p}.bn1.run_mean"), &mut blk.bn1.run_mean);
            f(&format!("{p}.bn1.run_var"), &mut blk.bn1.run_var);
            f(&format!("{p}.bn2.run_mean"), &mut blk.bn2.run_mean);
            f(&format!("{p}.bn2.run_var"), &mut blk.bn2.run_var);
            if let Some((_, bn)) = blk.proj.as_mut() {
                f(&format!("{p}.proj_bn.run_mean"), &mut bn.run_mean);
                f(&format!("{p}.proj_bn.run_var"), &mut bn.run_var);
            }
        }
    }

    /// Total trainable parameter count.
    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_trainable_mut(&mut |_, t| n += t.numel());
        n
    }
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

pub struct ModelGrads {
    pub encoder: Vec<(ComplexConvGrads, CbnGrads, Tensor)>,
    pub fusion_in: LinearGrads,
    pub fusion_out: LinearGrads,
    pub conformer: Vec<ConformerBlockGrads>,
    pub decoder: Vec<(ComplexConvGrads, Option<CbnGrads>, Option<Tensor>)>,
    pub visual: EncodeGrads,
}

impl ModelGrads {
    /// Visit gradients under the same names and order as
    /// `ModelState::visit_trainable_mut`.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (conv, bn, slope)) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{i}");
            f(&format!("{p}.conv.w_real"), &conv.w_real);
            f(&format!("{p}.conv.w_imag"), &conv.w_imag);
            f(&format!("{p}.bn.gamma_rr"), &bn.gamma_rr);
            f(&format!("{p}.bn.gamma_ri"), &bn.gamma_ri);
            f(&format!("{p}.bn.gamma_ii"), &bn.gamma_ii);
            f(&format!("{p}.bn.beta_r"), &bn.beta_r);
            f(&format!("{p}.bn.beta_i"), &bn.beta_i);
            f(&format!("{p}.prelu.slope"), slope);
        }
        f("fusion.proj_in.weight", &self.fusion_in.weight);
        f("fusion.proj_in.bias", &self.fusion_in.bias);
        f("fusion.proj_out.weight", &self.fusion_out.weight);
        f("fusion.proj_out.bias", &self.fusion_out.bias);
        for (i, b) in self.conformer.iter().enumerate() {
            let p = format!("conformer.{i}");
            for (name, ffn) in [("ffn1", &b.ffn1), ("ffn2", &b.ffn2)] {
                f(&format!("{p}.{name}.ln.gamma"), &ffn.ln.gamma);
                f(&format!("{p}.{name}.ln.beta"), &ffn.ln.beta);
                f(&format!("{p}.{name}.w1.weight"), &ffn.w1.weight);
                f(&format!("{p}.{name}.w1.bias"), &ffn.w1.bias);
                f(&format!("{p}.{name}.w2.weight"), &ffn.w2.weight);
                f(&format!("{p}.{name}.w2.bias"), &ffn.w2.bias);
            }
            f(&format!("{p}.mhsa.ln.gamma"), &b.mhsa.ln.gamma);
            f(&format!("{p}.mhsa.ln.beta"), &b.mhsa.ln.beta);
            for (name, lin) in [
                ("wq", &b.mhsa.wq),
                ("wk", &b.mhsa.wk),
                ("wv", &b.mhsa.wv),
                ("wo", &b.mhsa.wo),
            ] {
                f(&format!("{p}.mhsa.{name}.weight"), &lin.weight);
                if name != "wk" {
                    f(&format!("{p}.mhsa.{name}.bias"), &lin.bias);
                }
            }
            f(&format!("{p}.conv.ln.gamma"), &b.conv.ln.gamma);
            f(&format!("{p}.conv.ln.beta"), &b.conv.ln.beta);
            f(&format!("{p}.conv.pw1.weight"), &b.conv.pw1.weight);
            f(&format!("{p}.conv.pw1.bias"), &b.conv.pw1.bias);
            f(&format!("{p}.conv.dw.weight"), &b.conv.dw.weight);
            f(&format!("{p}.conv.bn.gamma"), &b.conv.bn.gamma);
            f(&format!("{p}.conv.bn.beta"), &b.conv.bn.beta);
            f(&format!("{p}.conv.pw2.weight"), &b.conv.pw2.weight);
            f(&format!("{p}.conv.pw2.bias"), &b.conv.pw2.bias);
            f(&format!("{p}.final_ln.gamma"), &b.final_ln.gamma);
            f(&format!("{p}.final_ln.beta"), &b.final_ln.beta);
        }
        for (i, (conv, bn, slope)) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            f(&format!("{p}.conv.w_real"), &conv.w_real);
            f(&format!("{p}.conv.w_imag"), &conv.w_imag);
            if bn.is_none() {
                f(&format!("{p}.conv.b_real"), &conv.b_real);
                f(&format!("{p}.conv.b_imag"), &conv.b_imag);
            }
            if let Some(bn) = bn {
                f(&format!("{p}.bn.gamma_rr"), &bn.gamma_rr);
                f(&format!("{p}.bn.gamma_ri"), &bn.gamma_ri);
                f(&format!("{p}.bn.gamma_ii"), &bn.gamma_ii);
                f(&format!("{p}.bn.beta_r"), &bn.beta_r);
                f(&format!("{p}.bn.beta_i"), &bn.beta_i);
            }
            if let Some(slope) = slope {
                f(&format!("{p}.prelu.slope"), slope);
            }
        }
        let v = &self.visual;
        f("visual.stem.weight", &v.stem.weight);
        f("visual.stem_bn.gamma", &v.stem_bn.gamma);
        f("visual.stem_bn.beta", &v.stem_bn.beta);
        for (i, blk) in v.blocks.iter().enumerate() {
            let p = format!("visual.block.{i}");
            f(&format!("{p}.conv1.weight"), &blk.conv1.weight);
            f(&format!("{p}.bn1.gamma"), &blk.bn1.gamma);
            f(&format!("{p}.bn1.beta"), &blk.bn1.beta);
            f(&format!("{p}.conv2.weight"), &blk.conv2.weight);
            f(&format!("{p}.bn2.gamma"), &blk.bn2.gamma);
            f(&format!("{p}.bn2.beta"), &blk.bn2.beta);
            if let Some((conv, bn)) = &blk.proj {
                f(&format!("{p}.proj.weight"), &conv.weight);
                f(&format!("{p}.proj_bn.gamma"), &bn.gamma);
                f(&format!("{p}.proj_bn.beta"), &bn.beta);
            }
        }
        f("visual.head.weight", &v.head.weight);
        f("visual.head.bias", &v.head.bias);
    }

    /// Global L2 norm over every gradient tensor.
    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit(&mut |_, t| sq += t.sq_norm());
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(&mut |t| t.scale(factor));
    }

    pub fn add(&mut self, other: &ModelGrads) {
        let mut flat_other = Vec::new();
        other.visit(&mut |_, t| flat_other.push(t.clone()));
        let mut k = 0;
        self.for_each_mut(&mut |t| {
            t.add_assign(&flat_other[k]);
            k += 1;
        });
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for (conv, bn, slope) in &mut self.encoder {
            f(&mut conv.w_real);
            f(&mut conv.w_imag);
            f(&mut bn.gamma_rr);
            f(&mut bn.gamma_ri);
            f(&mut bn.gamma_ii);
            f(&mut bn.beta_r);
            f(&mut bn.beta_i);
            f(slope);
        }
        f(&mut self.fusion_in.weight);
        f(&mut self.fusion_in.bias);
        f(&mut self.fusion_out.weight);
        f(&mut self.fusion_out.bias);
        for b in &mut self.conformer {
            for ffn in [&mut b.ffn1, &mut b.ffn2] {
                f(&mut ffn.ln.gamma);
                f(&mut ffn.ln.beta);
                f(&mut ffn.w1.weight);
                f(&mut ffn.w1.bias);
                f(&mut ffn.w2.weight);
                f(&mut ffn.w2.bias);
            }
            f(&mut b.mhsa.ln.gamma);
            f(&mut b.mhsa.ln.beta);
            for (skip_bias, lin) in [
                (false, &mut b.mhsa.wq),
                (true, &mut b.mhsa.wk),
                (false, &mut b.mhsa.wv),
                (false, &mut b.mhsa.wo),
            ] {
                f(&mut lin.weight);
                if !skip_bias {
                    f(&mut lin.bias);
                }
            }
            f(&mut b.conv.ln.gamma);
            f(&mut b.conv.ln.beta);
            f(&mut b.conv.pw1.weight);
            f(&mut b.conv.pw1.bias);
            f(&mut b.conv.dw.weight);
            f(&mut b.conv.bn.gamma);
            f(&mut b.conv.bn.beta);
            f(&mut b.conv.pw2.weight);
            f(&mut b.conv.pw2.bias);
            f(&mut b.final_ln.gamma);
            f(&mut b.final_ln.beta);
        }
        for (conv, bn, slope) in &mut self.decoder {
            f(&mut conv.w_real);
            f(&mut conv.w_imag);
            if bn.is_none() {
                f(&mut conv.b_real);
                f(&mut conv.b_imag);
            }
            if let Some(bn) = bn {
                f(&mut bn.gamma_rr);
                f(&mut bn.gamma_ri);
                f(&mut bn.gamma_ii);
                f(&mut bn.beta_r);
                f(&mut bn.beta_i);
            }
            if let Some(slope) = slope {
                f(slope);
            }
        }
        let v = &mut self.visual;
        f(&mut v.stem.weight);
        f(&mut v.stem_bn.gamma);
        f(&mut v.stem_bn.beta);
        for blk in &mut v.blocks {
            f(&mut blk.conv1.weight);
            f(&mut blk.bn1.gamma);
            f(&mut blk.bn1.beta);
            f(&mut blk.conv2.weight);
            f(&mut blk.bn2.gamma);
            f(&mut blk.bn2.beta);
            if let Some((conv, bn)) = blk.proj.as_mut() {
                f(&mut conv.weight);
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
        }
        f(&mut v.head.weight);
        f(&mut v.head.bias);
    }
}

/// Deferred batch-statistics updates from one training forward pass.
pub struct ModelStatsUpdates {
    pub encoder: Vec<Option<CbnStatsUpdate>>,
    pub conformer: Vec<Option<Bn1dStatsUpdate>>,
    pub decoder: Vec<Option<CbnStatsUpdate>>,
    pub visual: Option<VisualStatsUpdates>,
}

impl ModelStatsUpdates {
    pub fn apply(&self, m: &mut ModelState) {
        for (u, b) in self.encoder.iter().zip(&mut m.encoder) {
            if let Some(u) = u {
                u.apply(&mut b.bn);
            }
        }
        for (u, b) in self.conformer.iter().zip(&mut m.conformer) {
            if let Some(u) = u {
                u.apply(&mut b.conv.bn);
            }
        }
        for (u, b) in self.decoder.iter().zip(&mut m.decoder) {
            if let (Some(u), Some(bn)) = (u, b.bn.as_mut()) {
                u.apply(bn);
            }
        }
        if let Some(u) = &self.visual {
            u.apply(&mut m.visual);
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

pub struct EncoderBlockCache {
    conv_in: ComplexTensor,
    untrimmed_time: usize,
    bn: CbnCache,
    prelu_in: ComplexTensor,
}

pub struct EncodeAudioCache {
    pub blocks: Vec<EncoderBlockCache>,
    /// Frequency dim entering each block (last entry = latent freq).
    pub freqs: Vec<usize>,
}

/// Drop trailing time columns so the frame axis keeps its length across the
/// (kw-1)-overpadded convolutions.
fn trim_time(x: &ComplexTensor, keep: usize) -> ComplexTensor {
    let sh = x.shape();
    let (b, c, f, t) = (sh[0], sh[1], sh[2], sh[3]);
    debug_assert!(keep <= t);
    if keep == t {
        return x.clone();
    }
    let mut out = ComplexTensor::zeros(&[b, c, f, keep]);
    for bb in 0..b {
        for cc in 0..c {
            for ff in 0..f {
                let src = ((bb * c + cc) * f + ff) * t;
                let dst = ((bb * c + cc) * f + ff) * keep;
                out.re.data_mut()[dst..dst + keep]
                    .copy_from_slice(&x.re.data()[src..src + keep]);
                out.im.data_mut()[dst..dst + keep]
                    .copy_from_slice(&x.im.data()[src..src + keep]);
            }
        }
    }
    out
}

/// Adjoint of `trim_time`: pad trailing zero columns back.
fn untrim_time(g: &ComplexTensor, full_t: usize) -> ComplexTensor {
    let sh = g.shape();
    let (b, c, f, t) = (sh[0], sh[1], sh[2], sh[3]);
    if full_t == t {
        return g.clone();
    }
    let mut out = ComplexTensor::zeros(&[b, c, f, full_t]);
    for bb in 0..b {
        for cc in 0..c {
            for ff in 0..f {
                let src = ((bb * c + cc) * f + ff) * t;
                let dst = ((bb * c + cc) * f + ff) * full_t;
                out.re.data_mut()[dst..dst + t].copy_from_slice(&g.re.data()[src..src + t]);
                out.im.data_mut()[dst..dst + t].copy_from_slice(&g.im.data()[src..src + t]);
            }
        }
    }
    out
}

/// Crop or zero-pad the frequency axis (rows beyond `target` dropped, missing
/// rows zero-filled).
fn fit_freq(x: &ComplexTensor, target: usize) -> ComplexTensor {
    let sh = x.shape();
    let (b, c, f, t) = (sh[0], sh[1], sh[2], sh[3]);
    if f == target {
        return x.clone();
    }
    let mut out = ComplexTensor::zeros(&[b, c, target, t]);
    let copy_f = f.min(target);
    for bb in 0..b {
        for cc in 0..c {
            for ff in 0..copy_f {
                let src = ((bb * c + cc) * f + ff) * t;
                let dst = ((bb * c + cc) * target + ff) * t;
                out.re.data_mut()[dst..dst + t].copy_from_slice(&x.re.data()[src..src + t]);
                out.im.data_mut()[dst..dst + t].copy_from_slice(&x.im.data()[src..src + t]);
            }
        }
    }
    out
}

/// Spectrogram [F, T] as a [1, 1, F, T] model tensor.
fn spec_to_tensor(s: &Spectrogram) -> Result<ComplexTensor> {
    let (f, t) = (s.freq_bins(), s.frames());
    s.data.clone().reshape(&[1, 1, f, t])
}

pub fn encode_audio_fwd(
    x: &ComplexTensor,
    m: &ModelState,
    mode: Mode,
) -> Result<(Vec<ComplexTensor>, EncodeAudioCache, Vec<Option<CbnStatsUpdate>>)> {
    let mut cur = x.clone();
    let mut outs = Vec::with_capacity(m.encoder.len());
    let mut caches = Vec::with_capacity(m.encoder.len());
    let mut updates = Vec::with_capacity(m.encoder.len());
    let mut freqs = vec![x.shape()[2]];
    let t = x.shape()[3];
    for b in &m.encoder {
        let conv_in = cur.clone();
        let conv_out = complex_conv2d(&cur, &b.conv)?;
        let untrimmed_time = conv_out.shape()[3];
        let trimmed = trim_time(&conv_out, t);
        let (bn_out, bn_cache, update) = complex_batch_norm_fwd(&trimmed, &b.bn, mode)?;
        let out = prelu(&bn_out, &b.slope)?;
        freqs.push(out.shape()[2]);
        caches.push(EncoderBlockCache {
            conv_in,
            untrimmed_time,
            bn: bn_cache,
            prelu_in: bn_out,
        });
        updates.push(update);
        outs.push(out.clone());
        cur = out;
    }
    Ok((outs, EncodeAudioCache { blocks: caches, freqs }, updates))
}

/// Backward through the encoder chain. `grads_per_block[i]` is the gradient
/// arriving at encoder block i's output (skip-connection contributions plus
/// the next block's input gradient are pre-merged by the caller for the last
/// entry only; this routine folds the chain itself).
pub fn encode_audio_backward(
    cache: &EncodeAudioCache,
    m: &ModelState,
    mut grads_per_block: Vec<ComplexTensor>,
) -> Result<Vec<(ComplexConvGrads, CbnGrads, Tensor)>> {
    let n = m.encoder.len();
    let mut out = Vec::with_capacity(n);
    let mut carry: Option<ComplexTensor> = None;
    for i in (0..n).rev() {
        let mut g = grads_per_block.remove(i);
        if let Some(c) = carry {
            g.add_assign(&c);
        }
        let b = &m.encoder[i];
        let bc = &cache.blocks[i];
        let (g_bn_out, slope_grad) = prelu_backward(&bc.prelu_in, &b.slope, &g)?;
        let (g_trimmed, bn_grads) = complex_batch_norm_backward(&bc.bn, &b.bn, &g_bn_out)?;
        let g_conv = untrim_time(&g_trimmed, bc.untrimmed_time);
        let (g_in, conv_grads) = complex_conv2d_backward(&bc.conv_in, &b.conv, &g_conv)?;
        carry = Some(g_in);
        out.push((conv_grads, bn_grads, slope_grad));
    }
    out.reverse();
    Ok(out)
}

/// Encoded latent plus each block's output for the skip connections.
pub fn encode(x: &Spectrogram, m: &ModelState) -> Result<(ComplexTensor, Vec<ComplexTensor>)> {
    if x.freq_bins() != m.config.stft.freq_bins() {
        return Err(DcucError::Shape(format!(
            "spectrogram has {} bins, model expects {}",
            x.freq_bins(),
            m.config.stft.freq_bins()
        )));
    }
    let xt = spec_to_tensor(x)?;
    let (outs, _, _) = encode_audio_fwd(&xt, m, Mode::Eval)?;
    let latent = outs.last().expect("encoder has blocks").clone();
    Ok((latent, outs))
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

pub struct FuseCache {
    latent_shape: Vec<usize>,
    seq_in: Tensor,
    conformer_in: FrameSequence,
    conformer: Vec<ConformerBlockCache>,
    conformer_out: FrameSequence,
    embed_dim: usize,
}

/// Flatten the latent real part per frame into [T, C*F'].
fn flatten_real(latent: &ComplexTensor) -> Tensor {
    let sh = latent.shape();
    let (c, f, t) = (sh[1], sh[2], sh[3]);
    let mut out = Tensor::zeros(&[t, c * f]);
    for cc in 0..c {
        for ff in 0..f {
            let src = (cc * f + ff) * t;
            for tt in 0..t {
                out.data_mut()[tt * (c * f) + cc * f + ff] = latent.re.data()[src + tt];
            }
        }
    }
    out
}

fn unflatten_real(seq: &Tensor, c: usize, f: usize, t: usize) -> Tensor {
    let mut out = Tensor::zeros(&[1, c, f, t]);
    for cc in 0..c {
        for ff in 0..f {
            let dst = (cc * f + ff) * t;
            for tt in 0..t {
                out.data_mut()[dst + tt] = seq.data()[tt * (c * f) + cc * f + ff];
            }
        }
    }
    out
}

/// Fuse the latent's real part with the (already upsampled) visual rows via
/// the conformer stack; the imaginary part passes through unchanged.
pub fn fuse(latent: &ComplexTensor, visual: &VisualEmbedding, m: &ModelState) -> Result<ComplexTensor> {
    fuse_fwd(latent, visual, m, Mode::Eval, &mut None).map(|(y, _, _)| y)
}

pub fn fuse_fwd(
    latent: &ComplexTensor,
    visual: &VisualEmbedding,
    m: &ModelState,
    mode: Mode,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(ComplexTensor, FuseCache, Vec<Option<Bn1dStatsUpdate>>)> {
    let sh = latent.shape().to_vec();
    if sh.len() != 4 || sh[0] != 1 {
        return Err(DcucError::Shape(format!(
            "fusion expects a [1,C,F,T] latent, got {sh:?}"
        )));
    }
    let (c, f, t) = (sh[1], sh[2], sh[3]);
    if visual.num_frames() != t {
        return Err(DcucError::InvalidInput(format!(
            "visual stream has {} frames but the latent has {} frames; upsample first",
            visual.num_frames(),
            t
        )));
    }
    let e = visual.embed_dim();

    let flat = flatten_real(latent);
    let mut seq_in = Tensor::zeros(&[1, t, c * f + e]);
    for tt in 0..t {
        let dst = tt * (c * f + e);
        seq_in.data_mut()[dst..dst + c * f]
            .copy_from_slice(&flat.data()[tt * c * f..(tt + 1) * c * f]);
        seq_in.data_mut()[dst + c * f..dst + c * f + e]
            .copy_from_slice(&visual.data.data()[tt * e..(tt + 1) * e]);
    }

    let projected = m.fusion.proj_in.forward(&seq_in)?;
    let conformer_in = FrameSequence::new(projected)?;
    let (conformer_out, conformer_caches, updates) =
        conformer_stack_fwd(&conformer_in, &m.conformer, mode, dropout)?;
    let back = m.fusion.proj_out.forward(&conformer_out.data)?;
    let new_re = unflatten_real(&back.clone().reshape(&[t, c * f])?, c, f, t);

    let out = ComplexTensor::new(new_re, latent.im.clone())?;
    Ok((
        out,
        FuseCache {
            latent_shape: sh,
            seq_in,
            conformer_in,
            conformer: conformer_caches,
            conformer_out,
            embed_dim: e,
        },
        updates,
    ))
}

pub struct FuseGrads {
    pub proj_in: LinearGrads,
    pub proj_out: LinearGrads,
    pub conformer: Vec<ConformerBlockGrads>,
}

/// Returns (d_latent, d_visual, grads).
pub fn fuse_backward(
    cache: &FuseCache,
    m: &ModelState,
    g: &ComplexTensor,
) -> Result<(ComplexTensor, Tensor, FuseGrads)> {
    let (c, f, t) = (
        cache.latent_shape[1],
        cache.latent_shape[2],
        cache.latent_shape[3],
    );
    let e = cache.embed_dim;

    // real path back through proj_out -> conformer -> proj_in
    let g_flat = flatten_real_grad(&g.re, c, f, t);
    let g_back = g_flat.reshape(&[1, t, c * f])?;
    let (g_conf_out, proj_out_grads) = m.fusion.proj_out.backward(&cache.conformer_out.data, &g_back);
    let (g_conf_in, conformer_grads) =
        conformer_stack_backward(&cache.conformer, &m.conformer, &g_conf_out)?;
    let (g_seq, proj_in_grads) = m.fusion.proj_in.backward(&cache.seq_in, &g_conf_in);

    // split the concatenated gradient back into latent-real and visual parts
    let mut d_re = Tensor::zeros(&[1, c, f, t]);
    let mut d_visual = Tensor::zeros(&[t, e]);
    for tt in 0..t {
        let src = tt * (c * f + e);
        for cc in 0..c {
            for ff in 0..f {
                d_re.data_mut()[(cc * f + ff) * t + tt] = g_seq.data()[src + cc * f + ff];
            }
        }
        d_visual.data_mut()[tt * e..(tt + 1) * e]
            .copy_from_slice(&g_seq.data()[src + c * f..src + c * f + e]);
    }

    let d_latent = ComplexTensor::new(d_re, g.im.clone())?;
    let _ = &cache.conformer_in;
    Ok((
        d_latent,
        d_visual,
        FuseGrads {
            proj_in: proj_in_grads,
            proj_out: proj_out_grads,
            conformer: conformer_grads,
        },
    ))
}

/// [1,C,F,T] real-part gradient -> [T, C*F] sequence layout.
fn flatten_real_grad(g_re: &Tensor, c: usize, f: usize, t: usize) -> Tensor {
    let mut out = Tensor::zeros(&[t, c * f]);
    for cc in 0..c {
        for ff in 0..f {
            let src = (cc * f + ff) * t;
            for tt in 0..t {
                out.data_mut()[tt * (c * f) + cc * f + ff] = g_re.data()[src + tt];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Decoder and mask
// ---------------------------------------------------------------------------

/// Complex ratio mask over the noisy spectrogram's bins.
#[derive(Debug, Clone)]
pub struct CRMask {
    pub data: ComplexTensor,
}

pub struct DecoderBlockCache {
    conv_in: ComplexTensor,
    conv_out_shape: Vec<usize>,
    trimmed_t: usize,
    bn: Option<CbnCache>,
    prelu_in: Option<ComplexTensor>,
}

pub struct DecodeCache {
    blocks: Vec<DecoderBlockCache>,
    skip_channels: Vec<usize>,
    pre_bound: ComplexTensor,
}

fn concat_channels(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(DcucError::Shape(format!(
            "skip shape {sb:?} does not match decoder feature {sa:?}"
        )));
    }
    let (bsz, ca, cb, f, t) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let mut out = ComplexTensor::zeros(&[bsz, ca + cb, f, t]);
    let plane = f * t;
    for bb in 0..bsz {
        for c in 0..ca {
            let src = (bb * ca + c) * plane;
            let dst = (bb * (ca + cb) + c) * plane;
            out.re.data_mut()[dst..dst + plane].copy_from_slice(&a.re.data()[src..src + plane]);
            out.im.data_mut()[dst..dst + plane].copy_from_slice(&a.im.data()[src..src + plane]);
        }
        for c in 0..cb {
            let src = (bb * cb + c) * plane;
            let dst = (bb * (ca + cb) + ca + c) * plane;
            out.re.data_mut()[dst..dst + plane].copy_from_slice(&b.re.data()[src..src + plane]);
            out.im.data_mut()[dst..dst + plane].copy_from_slice(&b.im.data()[src..src + plane]);
        }
    }
    Ok(out)
}

fn split_channels(g: &ComplexTensor, ca: usize) -> (ComplexTensor, ComplexTensor) {
    let sh = g.shape();
    let (bsz, ctot, f, t) = (sh[0], sh[1], sh[2], sh[3]);
    let cb = ctot - ca;
    let plane = f * t;
    let mut ga = ComplexTensor::zeros(&[bsz, ca, f, t]);
    let mut gb = ComplexTensor::zeros(&[bsz, cb, f, t]);
    for bb in 0..bsz {
        for c in 0..ca {
            let src = (bb * ctot + c) * plane;
            let dst = (bb * ca + c) * plane;
            ga.re.data_mut()[dst..dst + plane].copy_from_slice(&g.re.data()[src..src + plane]);
            ga.im.data_mut()[dst..dst + plane].copy_from_slice(&g.im.data()[src..src + plane]);
        }
        for c in 0..cb {
            let src = (bb * ctot + ca + c) * plane;
            let dst = (bb * cb + c) * plane;
            gb.re.data_mut()[dst..dst + plane].copy_from_slice(&g.re.data()[src..src + plane]);
            gb.im.data_mut()[dst..dst + plane].copy_from_slice(&g.im.data()[src..src + plane]);
        }
    }
    (ga, gb)
}

/// Adjoint of `fit_freq` from `from_f` rows to `target` rows.
fn fit_freq_grad(g: &ComplexTensor, from_f: usize) -> ComplexTensor {
    let sh = g.shape();
    let (b, c, f, t) = (sh[0], sh[1], sh[2], sh[3]);
    if f == from_f {
        return g.clone();
    }
    let mut out = ComplexTensor::zeros(&[b, c, from_f, t]);
    let copy_f = f.min(from_f);
    for bb in 0..b {
        for cc in 0..c {
            for ff in 0..copy_f {
                let src = ((bb * c + cc) * f + ff) * t;
                let dst = ((bb * c + cc) * from_f + ff) * t;
                out.re.data_mut()[dst..dst + t].copy_from_slice(&g.re.data()[src..src + t]);
                out.im.data_mut()[dst..dst + t].copy_from_slice(&g.im.data()[src..src + t]);
            }
        }
    }
    out
}

/// Phase-preserving magnitude bounding: m -> bound * tanh(|m|) * m/|m|,
/// smooth at the origin via the series tanh(u)/u -> 1.
fn bound_mask(x: &ComplexTensor, bound: f64) -> ComplexTensor {
    let mut out = ComplexTensor::zeros(x.shape());
    for k in 0..x.numel() {
        let (r, i) = (x.re.data()[k], x.im.data()[k]);
        let u = r.hypot(i);
        let f = if u < 1e-4 { 1.0 - u * u / 3.0 } else { u.tanh() / u };
        out.re.data_mut()[k] = bound * f * r;
        out.im.data_mut()[k] = bound * f * i;
    }
    out
}

fn bound_mask_backward(x: &ComplexTensor, bound: f64, g: &ComplexTensor) -> ComplexTensor {
    let mut dx = ComplexTensor::zeros(x.shape());
    for k in 0..x.numel() {
        let (r, i) = (x.re.data()[k], x.im.data()[k]);
        let (gr, gi) = (g.re.data()[k], g.im.data()[k]);
        let u = r.hypot(i);
        // f = tanh(u)/u, q = f'(u)/u; both have finite limits at u = 0.
        let (f, q) = if u < 1e-4 {
            (1.0 - u * u / 3.0, -2.0 / 3.0 + 8.0 * u * u / 15.0)
        } else {
            let th = u.tanh();
            let sech2 = 1.0 - th * th;
            ((th / u), (sech2 * u - th) / (u * u * u))
        };
        dx.re.data_mut()[k] = bound * (gr * (f + r * r * q) + gi * (r * i * q));
        dx.im.data_mut()[k] = bound * (gr * (r * i * q) + gi * (f + i * i * q));
    }
    dx
}

pub fn decode_fwd(
    fused: &ComplexTensor,
    skips: &[ComplexTensor],
    m: &ModelState,
    mode: Mode,
) -> Result<(CRMask, DecodeCache, Vec<Option<CbnStatsUpdate>>)> {
    let n = m.decoder.len();
    if skips.len() != n {
        return Err(DcucError::Shape(format!(
            "decoder expects {n} skips, got {}",
            skips.len()
        )));
    }
    let t = fused.shape()[3];
    let bins = m.config.stft.freq_bins();

    let mut cur = fused.clone();
    let mut caches = Vec::with_capacity(n);
    let mut updates = Vec::with_capacity(n);
    let mut skip_channels = Vec::with_capacity(n);
    for i in 0..n {
        let skip = &skips[n - 1 - i];
        let prev_channels = cur.shape()[1];
        skip_channels.push(prev_channels);
        let conv_in = concat_channels(&cur, skip)?;
        let b = &m.decoder[i];
        let conv_out = complex_conv_transpose2d(&conv_in, &b.conv)?;
        let conv_out_shape = conv_out.shape().to_vec();
        let trimmed = trim_time(&conv_out, t);
        // target freq: the matching encoder level's dim (skip for the next
        // stage), or the full bin count at the top.
        let target = if i + 1 < n {
            skips[n - 2 - i].shape()[2]
        } else {
            bins
        };
        let fitted = fit_freq(&trimmed, target);
        let (out, bn_cache, prelu_in, update) = match (&b.bn, &b.slope) {
            (Some(bn), Some(slope)) => {
                let (bn_out, cache, update) = complex_batch_norm_fwd(&fitted, bn, mode)?;
                let activated = prelu(&bn_out, slope)?;
                (activated, Some(cache), Some(bn_out), update)
            }
            _ => (fitted, None, None, None),
        };
        caches.push(DecoderBlockCache {
            conv_in,
            conv_out_shape,
            trimmed_t: t,
            bn: bn_cache,
            prelu_in,
        });
        updates.push(update);
        cur = out;
    }

    let mask_raw = cur.reshape(&[bins, t])?;
    let bounded = match m.config.mask_bound {
        Some(b) => bound_mask(&mask_raw, b),
        None => mask_raw.clone(),
    };
    Ok((
        CRMask { data: bounded },
        DecodeCache {
            blocks: caches,
            skip_channels,
            pre_bound: mask_raw,
        },
        updates,
    ))
}

/// Estimate the complex ratio mask (inference form).
pub fn decode(fused: &ComplexTensor, skips: &[ComplexTensor], m: &ModelState) -> Result<CRMask> {
    decode_fwd(fused, skips, m, Mode::Eval).map(|(mask, _, _)| mask)
}

/// Returns (d_fused, d_skips ordered like `skips`, per-block grads).
pub fn decode_backward(
    cache: &DecodeCache,
    m: &ModelState,
    g_mask: &ComplexTensor,
) -> Result<(
    ComplexTensor,
    Vec<ComplexTensor>,
    Vec<(ComplexConvGrads, Option<CbnGrads>, Option<Tensor>)>,
)> {
    let n = m.decoder.len();
    let g_raw = match m.config.mask_bound {
        Some(b) => bound_mask_backward(&cache.pre_bound, b, g_mask),
        None => g_mask.clone(),
    };
    let t = cache.blocks[0].trimmed_t;
    let bins = m.config.stft.freq_bins();
    let mut cur = g_raw.reshape(&[1, 1, bins, t])?;

    let mut block_grads_rev = Vec::with_capacity(n);
    let mut skip_grads_rev = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let b = &m.decoder[i];
        let bc = &cache.blocks[i];
        let g_fitted = match (&b.bn, &b.slope, &bc.bn, &bc.prelu_in) {
            (Some(bn), Some(slope), Some(bn_cache), Some(prelu_in)) => {
                let (g_bn_out, slope_grad) = prelu_backward(prelu_in, slope, &cur)?;
                let (g_fit, bn_grads) = complex_batch_norm_backward(bn_cache, bn, &g_bn_out)?;
                block_grads_rev.push((None, Some(bn_grads), Some(slope_grad)));
                g_fit
            }
            _ => {
                block_grads_rev.push((None, None, None));
                cur.clone()
            }
        };
        let g_trimmed = fit_freq_grad(&g_fitted, bc.conv_out_shape[2]);
        let g_conv_out = untrim_time(&g_trimmed, bc.conv_out_shape[3]);
        let (g_conv_in, conv_grads) =
            complex_conv_transpose2d_backward(&bc.conv_in, &b.conv, &g_conv_out)?;
        let (g_prev, g_skip) = split_channels(&g_conv_in, cache.skip_channels[i]);
        block_grads_rev.last_mut().unwrap().0 = Some(conv_grads);
        skip_grads_rev.push(g_skip);
        cur = g_prev;
    }

    let block_grads = block_grads_rev
        .into_iter()
        .rev()
        .map(|(conv, bn, slope)| (conv.expect("conv grads set"), bn, slope))
        .collect();
    // skip_grads_rev[j] belongs to decoder stage n-1-j, which consumed
    // skips[j]; reversing the reversed walk restores skip order.
    let d_skips = {
        let mut v = skip_grads_rev;
        // stage i consumed skips[n-1-i]; we pushed stages n-1..0, so v[k]
        // holds the grad for skips[k] already.
        v.truncate(n);
        v
    };
    Ok((cur, d_skips, block_grads))
}

// ---------------------------------------------------------------------------
// Mask application and the end-to-end pipeline
// ---------------------------------------------------------------------------

/// Elementwise complex multiplication of the noisy spectrum by the mask.
pub fn apply_mask(noisy: &Spectrogram, mask: &CRMask) -> Result<Spectrogram> {
    if noisy.data.shape() != mask.data.shape() {
        return Err(DcucError::Shape(format!(
            "mask shape {:?} != spectrogram shape {:?}",
            mask.data.shape(),
            noisy.data.shape()
        )));
    }
    let mut out = ComplexTensor::zeros(noisy.data.shape());
    for k in 0..out.numel() {
        let (xr, xi) = (noisy.data.re.data()[k], noisy.data.im.data()[k]);
        let (mr, mi) = (mask.data.re.data()[k], mask.data.im.data()[k]);
        out.re.data_mut()[k] = xr * mr - xi * mi;
        out.im.data_mut()[k] = xr * mi + xi * mr;
    }
    Ok(Spectrogram {
        data: out,
        config: noisy.config.clone(),
        num_samples: noisy.num_samples,
    })
}

/// Gradient of `apply_mask` with respect to the mask (the spectrum input is
/// data, not a parameter path).
pub fn apply_mask_backward(noisy: &Spectrogram, g: &ComplexTensor) -> ComplexTensor {
    let mut dm = ComplexTensor::zeros(g.shape());
    for k in 0..g.numel() {
        let (xr, xi) = (noisy.data.re.data()[k], noisy.data.im.data()[k]);
        let (gr, gi) = (g.re.data()[k], g.im.data()[k]);
        dm.re.data_mut()[k] = gr * xr + gi * xi;
        dm.im.data_mut()[k] = -gr * xi + gi * xr;
    }
    dm
}

pub struct EnhanceCache {
    pub noisy_spec: Spectrogram,
    encode: EncodeAudioCache,
    visual_encode: Option<EncodeCache>,
    visual_src_frames: usize,
    fuse: FuseCache,
    decode: DecodeCache,
    mask: CRMask,
}

impl EnhanceCache {
    pub fn mask(&self) -> &CRMask {
        &self.mask
    }
}

pub struct EnhanceOptions {
    pub mode: Mode,
    /// Replace the visual embedding with zeros (audio-only ablation).
    pub zero_visual: bool,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        EnhanceOptions {
            mode: Mode::Eval,
            zero_visual: false,
        }
    }
}

/// Full pipeline: stft -> encode -> visual encode + upsample -> fuse ->
/// decode -> mask -> istft.
pub fn enhance(noisy: &Waveform, video: &VideoFrames, m: &ModelState) -> Result<Waveform> {
    enhance_fwd(noisy, video, m, &EnhanceOptions::default(), &mut None)
        .map(|(wave, _, _)| wave)
}

pub fn enhance_fwd(
    noisy: &Waveform,
    video: &VideoFrames,
    m: &ModelState,
    opts: &EnhanceOptions,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(Waveform, EnhanceCache, ModelStatsUpdates)> {
    let audio_dur = noisy.duration_s();
    let video_dur = video.duration_s();
    let frame_period = 1.0 / video.fps;
    if (audio_dur - video_dur).abs() > frame_period + 1e-9 {
        return Err(DcucError::InvalidInput(format!(
            "audio ({audio_dur:.3}s) and video ({video_dur:.3}s) durations differ by more than \
             one frame period"
        )));
    }

    let spec = conv_stft(noisy, &m.config.stft)?;
    let xt = spec_to_tensor(&spec)?;
    let (encoder_outs, encode_cache, encoder_updates) = encode_audio_fwd(&xt, m, opts.mode)?;
    let latent = encoder_outs.last().expect("encoder has blocks");
    let t = latent.shape()[3];

    let (visual_up, visual_cache, visual_updates) = if opts.zero_visual {
        (
            VisualEmbedding {
                data: Tensor::zeros(&[t, m.config.visual.embed_dim]),
            },
            None,
            None,
        )
    } else {
        let (emb, cache, updates) =
            encode_frames_fwd(video, &m.visual, &m.config.visual, opts.mode)?;
        let up = temporal_upsample(&emb, t, m.config.upsample)?;
        (up, Some(cache), Some(updates))
    };

    let (fused, fuse_cache, conformer_updates) =
        fuse_fwd(latent, &visual_up, m, opts.mode, dropout)?;
    let (mask, decode_cache, decoder_updates) = decode_fwd(&fused, &encoder_outs, m, opts.mode)?;
    let enhanced_spec = apply_mask(&spec, &mask)?;
    let wave = conv_istft(&enhanced_spec)?;

    Ok((
        wave,
        EnhanceCache {
            noisy_spec: spec,
            encode: encode_cache,
            visual_encode: visual_cache,
            visual_src_frames: video.num_frames,
            fuse: fuse_cache,
            decode: decode_cache,
            mask,
        },
        ModelStatsUpdates {
            encoder: encoder_updates,
            conformer: conformer_updates,
            decoder: decoder_updates,
            visual: visual_updates,
        },
    ))
}

/// Backward through the whole pipeline given dL/d(output waveform).
pub fn enhance_backward(
    cache: &EnhanceCache,
    m: &ModelState,
    g_wave: &[f64],
) -> Result<ModelGrads> {
    // istft is linear: pull the gradient back to the masked spectrum (the
    // noisy spectrogram carries the same geometry).
    let g_spec = conv_istft_backward(&cache.noisy_spec, g_wave)?;
    let g_mask = apply_mask_backward(&cache.noisy_spec, &g_spec);

    let (g_fused, mut g_skips, decoder_grads) = decode_backward(&cache.decode, m, &g_mask)?;
    let (g_latent, g_visual_rows, fuse_grads) = fuse_backward(&cache.fuse, m, &g_fused)?;

    // The latent is also skips.last(); merge both contributions there.
    let n = g_skips.len();
    g_skips[n - 1].add_assign(&g_latent);
    let encoder_grads = encode_audio_backward(&cache.encode, m, g_skips)?;

    let visual_grads = match &cache.visual_encode {
        Some(vc) => {
            let g_emb =
                temporal_upsample_backward(cache.visual_src_frames, &g_visual_rows, m.config.upsample)?;
            encode_frames_backward(vc, &m.visual, &g_emb)?
        }
        None => zero_visual_grads(&m.visual),
    };

    Ok(ModelGrads {
        encoder: encoder_grads,
        fusion_in: fuse_grads.proj_in,
        fusion_out: fuse_grads.proj_out,
        conformer: fuse_grads.conformer,
        decoder: decoder_grads,
        visual: visual_grads,
    })
}

fn zero_visual_grads(v: &VisualFrontendParams) -> EncodeGrads {
    use crate::visual_frontend::{Conv2dRealGrads, ResBlockGrads};
    let zc = |c: &crate::visual_frontend::Conv2dReal| Conv2dRealGrads {
        weight: Tensor::zeros(c.weight.shape()),
        bias: Tensor::zeros(c.bias.shape()),
    };
    let zb = |b: &crate::visual_frontend::BatchNorm2d| crate::visual_frontend::Bn2dGrads {
        gamma: Tensor::zeros(b.gamma.shape()),
        beta: Tensor::zeros(b.beta.shape()),
    };
    EncodeGrads {
        stem: zc(&v.stem),
        stem_bn: zb(&v.stem_bn),
        blocks: v
            .blocks
            .iter()
            .map(|blk| ResBlockGrads {
                conv1: zc(&blk.conv1),
                bn1: zb(&blk.bn1),
                conv2: zc(&blk.conv2),
                bn2: zb(&blk.bn2),
                proj: blk.proj.as_ref().map(|(c, b)| (zc(c), zb(b))),
            })
            .collect(),
        head: LinearGrads {
            weight: Tensor::zeros(v.head.weight.shape()),
            bias: Tensor::zeros(v.head.bias.shape()),
        },
    }
}
