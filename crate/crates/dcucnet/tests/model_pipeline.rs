//! The assembled model against composed naive oracles, plus the shape and
//! masking properties of the end-to-end pipeline.

mod common;

use common::{
    max_rel_err, naive_complex_batch_norm, naive_complex_conv2d, naive_complex_conv_transpose2d,
    o_conformer_block, o_linear, rand_complex, rand_vec, ConvSpec,
};
use dcucnet::complex_nn::Mode;
use dcucnet::dsp_stft::{conv_stft, Spectrogram, Waveform};
use dcucnet::model::{
    apply_mask, decode, decode_fwd, encode, encode_audio_fwd, enhance, fuse, fuse_fwd, CRMask,
    ModelConfig, ModelState,
};
use dcucnet::tensor::{ComplexTensor, Tensor};
use dcucnet::visual_frontend::{VideoFrames, VisualEmbedding};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_state(seed: u64) -> ModelState {
    let mut cfg = ModelConfig::micro();
    cfg.seed = seed;
    ModelState::init(cfg).unwrap()
}

/// Encoder oracle: per block, naive conv -> trim trailing time column ->
/// eigen-BN -> elementwise PReLU.
fn oracle_encode(x: &ComplexTensor, m: &ModelState) -> Vec<ComplexTensor> {
    let mut cur = x.clone();
    let mut outs = Vec::new();
    let t = x.shape()[3];
    for b in &m.encoder {
        let conv = naive_complex_conv2d(
            &cur,
            &b.conv.w_real,
            &b.conv.w_imag,
            b.conv.b_real.data(),
            b.conv.b_imag.data(),
            &ConvSpec {
                stride: b.conv.stride,
                padding: b.conv.padding,
            },
        );
        let trimmed = trim_time_oracle(&conv, t);
        let gamma: Vec<(f64, f64, f64)> = (0..b.bn.channels())
            .map(|c| {
                (
                    b.bn.gamma_rr.data()[c],
                    b.bn.gamma_ri.data()[c],
                    b.bn.gamma_ii.data()[c],
                )
            })
            .collect();
        let beta: Vec<(f64, f64)> = (0..b.bn.channels())
            .map(|c| (b.bn.beta_r.data()[c], b.bn.beta_i.data()[c]))
            .collect();
        let bn = naive_complex_batch_norm(&trimmed, &gamma, &beta, b.bn.eps);
        let out = prelu_oracle(&bn, b.slope.data());
        outs.push(out.clone());
        cur = out;
    }
    outs
}

fn trim_time_oracle(x: &ComplexTensor, keep: usize) -> ComplexTensor {
    let sh = x.shape();
    let (b, c, f, t) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = ComplexTensor::zeros(&[b, c, f, keep]);
    for bb in 0..b {
        for cc in 0..c {
            for ff in 0..f {
                for tt in 0..keep.min(t) {
                    let src = ((bb * c + cc) * f + ff) * t + tt;
                    let dst = ((bb * c + cc) * f + ff) * keep + tt;
                    out.re.data_mut()[dst] = x.re.data()[src];
                    out.im.data_mut()[dst] = x.im.data()[src];
                }
            }
        }
    }
    out
}

fn fit_freq_oracle(x: &ComplexTensor, target: usize) -> ComplexTensor {
    let sh = x.shape();
    let (b, c, f, t) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = ComplexTensor::zeros(&[b, c, target, t]);
    for bb in 0..b {
        for cc in 0..c {
            for ff in 0..f.min(target) {
                for tt in 0..t {
                    let src = ((bb * c + cc) * f + ff) * t + tt;
                    let dst = ((bb * c + cc) * target + ff) * t + tt;
                    out.re.data_mut()[dst] = x.re.data()[src];
                    out.im.data_mut()[dst] = x.im.data()[src];
                }
            }
        }
    }
    out
}

fn prelu_oracle(x: &ComplexTensor, slope: &[f64]) -> ComplexTensor {
    let sh = x.shape();
    let spatial = sh[2] * sh[3];
    let mut out = ComplexTensor::zeros(sh);
    for bb in 0..sh[0] {
        for c in 0..sh[1] {
            let a = slope[c];
            for k in 0..spatial {
                let idx = (bb * sh[1] + c) * spatial + k;
                let r = x.re.data()[idx];
                let i = x.im.data()[idx];
                out.re.data_mut()[idx] = if r >= 0.0 { r } else { a * r };
                out.im.data_mut()[idx] = if i >= 0.0 { i } else { a * i };
            }
        }
    }
    out
}

fn random_spectrogram(m: &ModelState, t: usize, seed: u64) -> Spectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Spectrogram {
        data: rand_complex(&[m.config.stft.freq_bins(), t], &mut rng),
        config: m.config.stft.clone(),
        num_samples: m.config.stft.hop_length * (t - 1),
    }
}

#[test]
fn encode_matches_composed_kernel_oracles() {
    let m = micro_state(61);
    let spec = random_spectrogram(&m, 12, 62);
    let x = spec
        .data
        .clone()
        .reshape(&[1, 1, spec.freq_bins(), spec.frames()])
        .unwrap();
    // batch-statistics path, matching the oracle's covariance route
    let (skips, _, _) = encode_audio_fwd(&x, &m, Mode::Train).unwrap();
    let latent = skips.last().unwrap().clone();
    let want = oracle_encode(&x, &m);
    assert_eq!(skips.len(), want.len());
    for (got, want) in skips.iter().zip(&want) {
        assert!(max_rel_err(got.re.data(), want.re.data()) < 1e-5);
        assert!(max_rel_err(got.im.data(), want.im.data()) < 1e-5);
    }
    let last = want.last().unwrap();
    assert!(max_rel_err(latent.re.data(), last.re.data()) < 1e-5);
}

#[test]
fn fuse_matches_composed_oracle() {
    let m = micro_state(63);
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let (c, f, t, e) = (3, 3, 6, 4);
    let latent = rand_complex(&[1, c, f, t], &mut rng);
    let visual = VisualEmbedding {
        data: Tensor::from_vec(rand_vec(t * e, &mut rng), &[t, e]).unwrap(),
    };
    let (got, _, _) = fuse_fwd(&latent, &visual, &m, Mode::Train, &mut None).unwrap();

    // oracle: flatten -> concat -> dense -> conformer oracle -> dense -> reshape
    let mut seq = Tensor::zeros(&[1, t, c * f + e]);
    for tt in 0..t {
        for cc in 0..c {
            for ff in 0..f {
                seq.data_mut()[tt * (c * f + e) + cc * f + ff] =
                    latent.re.data()[(cc * f + ff) * t + tt];
            }
        }
        for k in 0..e {
            seq.data_mut()[tt * (c * f + e) + c * f + k] = visual.data.data()[tt * e + k];
        }
    }
    let mut projected = Tensor::zeros(&[1, t, m.config.fusion_proj_dim]);
    for tt in 0..t {
        let row = o_linear(
            &seq.data()[tt * (c * f + e)..(tt + 1) * (c * f + e)],
            &m.fusion.proj_in.weight,
            m.fusion.proj_in.bias.data(),
        );
        projected.data_mut()[tt * row.len()..(tt + 1) * row.len()].copy_from_slice(&row);
    }
    let mut conf = projected;
    for block in &m.conformer {
        conf = o_conformer_block(&conf, block);
    }
    let mut want_re = Tensor::zeros(&[1, c, f, t]);
    let d = m.config.fusion_proj_dim;
    for tt in 0..t {
        let row = o_linear(
            &conf.data()[tt * d..(tt + 1) * d],
            &m.fusion.proj_out.weight,
            m.fusion.proj_out.bias.data(),
        );
        for cc in 0..c {
            for ff in 0..f {
                want_re.data_mut()[(cc * f + ff) * t + tt] = row[cc * f + ff];
            }
        }
    }
    assert!(max_rel_err(got.re.data(), want_re.data()) < 1e-5);
    assert_eq!(got.im, latent.im);
}

#[test]
fn decode_matches_composed_transposed_oracles() {
    let m = micro_state(65);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let t = 6;
    let skips = vec![
        rand_complex(&[1, 2, 5, t], &mut rng),
        rand_complex(&[1, 3, 3, t], &mut rng),
    ];
    let fused = rand_complex(&[1, 3, 3, t], &mut rng);
    let (got, _, _) = decode_fwd(&fused, &skips, &m, Mode::Train).unwrap();

    // oracle chain
    let mut cur = fused.clone();
    let bins = m.config.stft.freq_bins();
    for (i, b) in m.decoder.iter().enumerate() {
        let skip = &skips[m.decoder.len() - 1 - i];
        let conv_in = concat_ch(&cur, skip);
        let conv = naive_complex_conv_transpose2d(
            &conv_in,
            &b.conv.w_real,
            &b.conv.w_imag,
            b.conv.b_real.data(),
            b.conv.b_imag.data(),
            &ConvSpec {
                stride: b.conv.stride,
                padding: b.conv.padding,
            },
        );
        let trimmed = trim_time_oracle(&conv, t);
        let target = if i + 1 < m.decoder.len() {
            skips[m.decoder.len() - 2 - i].shape()[2]
        } else {
            bins
        };
        let fitted = fit_freq_oracle(&trimmed, target);
        cur = match (&b.bn, &b.slope) {
            (Some(bn), Some(slope)) => {
                let gamma: Vec<(f64, f64, f64)> = (0..bn.channels())
                    .map(|c| {
                        (
                            bn.gamma_rr.data()[c],
                            bn.gamma_ri.data()[c],
                            bn.gamma_ii.data()[c],
                        )
                    })
                    .collect();
                let beta: Vec<(f64, f64)> = (0..bn.channels())
                    .map(|c| (bn.beta_r.data()[c], bn.beta_i.data()[c]))
                    .collect();
                prelu_oracle(
                    &naive_complex_batch_norm(&fitted, &gamma, &beta, bn.eps),
                    slope.data(),
                )
            }
            _ => fitted,
        };
    }
    // tanh bounding on the flattened mask
    let bound = m.config.mask_bound.unwrap();
    let n = got.data.numel();
    for k in 0..n {
        let (r, i) = (cur.re.data()[k], cur.im.data()[k]);
        let u = r.hypot(i);
        let fct = if u < 1e-4 { 1.0 - u * u / 3.0 } else { u.tanh() / u };
        let want_r = bound * fct * r;
        let want_i = bound * fct * i;
        assert!((got.data.re.data()[k] - want_r).abs() < 1e-5);
        assert!((got.data.im.data()[k] - want_i).abs() < 1e-5);
    }
}

fn concat_ch(a: &ComplexTensor, b: &ComplexTensor) -> ComplexTensor {
    let (sa, sb) = (a.shape(), b.shape());
    let (bs, ca, cb, f, t) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let mut out = ComplexTensor::zeros(&[bs, ca + cb, f, t]);
    let plane = f * t;
    for bb in 0..bs {
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
    out
}

#[test]
fn apply_mask_matches_scalar_complex_multiplication() {
    let m = micro_state(67);
    let spec = random_spectrogram(&m, 9, 68);
    let mut rng = ChaCha8Rng::seed_from_u64(69);
    let mask = CRMask {
        data: rand_complex(spec.data.shape(), &mut rng),
    };
    let out = apply_mask(&spec, &mask).unwrap();
    for k in 0..out.data.numel() {
        let (xr, xi) = (spec.data.re.data()[k], spec.data.im.data()[k]);
        let (mr, mi) = (mask.data.re.data()[k], mask.data.im.data()[k]);
        assert_eq!(out.data.re.data()[k], xr * mr - xi * mi);
        assert_eq!(out.data.im.data()[k], xr * mi + xi * mr);
    }
}

#[test]
fn full_model_latent_freq_for_257_bins() {
    // 257 bins through five stride-2 blocks: 129, 65, 33, 17, 9
    let cfg = ModelConfig::default();
    let m = ModelState::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let x = Waveform::new(rand_vec(8000, &mut rng), 16_000);
    let spec = conv_stft(&x, &m.config.stft).unwrap();
    let (latent, skips) = encode(&spec, &m).unwrap();
    let freqs: Vec<usize> = skips.iter().map(|s| s.shape()[2]).collect();
    assert_eq!(freqs, vec![129, 65, 33, 17, 9]);
    assert_eq!(latent.shape(), &[1, 64, 9, spec.frames()]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// decoder output spatial dims equal the encoder input dims for all
    /// frame counts
    #[test]
    fn encode_decode_symmetry(t in 1usize..=50, seed in 0u64..500) {
        let m = micro_state(71);
        let spec = random_spectrogram(&m, t, seed);
        let (latent, skips) = encode(&spec, &m).unwrap();
        let visual = VisualEmbedding {
            data: Tensor::zeros(&[t, m.config.visual.embed_dim]),
        };
        let fused = fuse(&latent, &visual, &m).unwrap();
        let mask = decode(&fused, &skips, &m).unwrap();
        prop_assert_eq!(mask.data.shape(), spec.data.shape());
    }
}

#[test]
fn enhance_identity_mask_and_length_preservation() {
    let state = ModelState::identity_mask(ModelConfig::micro()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    for len in [240usize, 401, 1000] {
        let noisy = Waveform::new(rand_vec(len, &mut rng), 16_000);
        let frames = ((len as f64 / 16_000.0) * 100.0).round().max(1.0) as usize;
        let video = VideoFrames::new(
            (0..frames * 64).map(|_| rng.random_range(0..=255)).collect(),
            frames,
            8,
            8,
            100.0,
        )
        .unwrap();
        let out = enhance(&noisy, &video, &state).unwrap();
        assert_eq!(out.len(), len);
        let err = out
            .samples
            .iter()
            .zip(&noisy.samples)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-6, "len {len}: {err}");
    }
}

/// A config small enough that the flattened latent fits inside the conformer
/// width, so identity-padded projections exist.
fn narrow_state(seed: u64) -> ModelState {
    let mut cfg = ModelConfig::micro();
    cfg.encoder_channels = vec![2, 2];
    cfg.seed = seed;
    ModelState::init(cfg).unwrap()
}

#[test]
fn fuse_identity_path_reduces_to_layernorm_of_real_features() {
    let mut m = narrow_state(81);
    let (c, f, t, e) = (2usize, 3usize, 5usize, 4usize);
    let cf = c * f;
    let d = m.config.fusion_proj_dim;
    assert!(cf <= d);

    // identity-padded projections: audio features pass straight through
    m.fusion.proj_in.weight.fill(0.0);
    m.fusion.proj_in.bias.fill(0.0);
    for i in 0..cf {
        let idx = i * (cf + e) + i;
        m.fusion.proj_in.weight.data_mut()[idx] = 1.0;
    }
    m.fusion.proj_out.weight.fill(0.0);
    m.fusion.proj_out.bias.fill(0.0);
    for i in 0..cf {
        m.fusion.proj_out.weight.data_mut()[i * d + i] = 1.0;
    }
    // zero every conformer branch so each block is its final layernorm
    for block in &mut m.conformer {
        block.ffn1.w2.weight.fill(0.0);
        block.ffn1.w2.bias.fill(0.0);
        block.ffn2.w2.weight.fill(0.0);
        block.ffn2.w2.bias.fill(0.0);
        block.mhsa.wo.weight.fill(0.0);
        block.mhsa.wo.bias.fill(0.0);
        block.conv.pw2.weight.fill(0.0);
        block.conv.pw2.bias.fill(0.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let latent = rand_complex(&[1, c, f, t], &mut rng);
    let visual = VisualEmbedding {
        data: Tensor::zeros(&[t, e]),
    };
    let got = fuse(&latent, &visual, &m).unwrap();
    assert_eq!(got.im, latent.im, "imaginary part must pass through bit-identically");

    // expected: pad each frame's real features to width d, layernorm, truncate
    let ln = &m.conformer[0].final_ln;
    for tt in 0..t {
        let mut padded = vec![0.0; d];
        for cc in 0..c {
            for ff in 0..f {
                padded[cc * f + ff] = latent.re.data()[(cc * f + ff) * t + tt];
            }
        }
        let (normed, _) = ln.forward(&Tensor::from_vec(padded, &[1, d]).unwrap());
        for cc in 0..c {
            for ff in 0..f {
                let want = normed.data()[cc * f + ff];
                let gotv = got.re.data()[(cc * f + ff) * t + tt];
                assert!((gotv - want).abs() < 1e-9, "t={tt} c={cc} f={ff}");
            }
        }
    }
}

#[test]
fn fuse_with_zeroed_audio_columns_depends_only_on_visual() {
    let mut m = narrow_state(83);
    let (c, f, t, e) = (2usize, 3usize, 6usize, 4usize);
    let cf = c * f;
    // zero the audio columns of the input projection
    for row in 0..m.config.fusion_proj_dim {
        for col in 0..cf {
            m.fusion.proj_in.weight.data_mut()[row * (cf + e) + col] = 0.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let latent_a = rand_complex(&[1, c, f, t], &mut rng);
    let mut latent_b = latent_a.clone();
    latent_b.re.data_mut().iter_mut().for_each(|v| *v *= -2.5);

    let zeros = VisualEmbedding { data: Tensor::zeros(&[t, e]) };
    let ones = VisualEmbedding { data: Tensor::full(&[t, e], 1.0) };

    // identical visual input: the fused real part ignores the audio features
    let fa = fuse(&latent_a, &zeros, &m).unwrap();
    let fb = fuse(&latent_b, &zeros, &m).unwrap();
    assert_eq!(fa.re, fb.re);

    // projection linearity: conformer input differs exactly by W_vis * 1
    let fa1 = fuse(&latent_a, &ones, &m).unwrap();
    assert_ne!(fa.re, fa1.re, "visual columns must contribute");
}
