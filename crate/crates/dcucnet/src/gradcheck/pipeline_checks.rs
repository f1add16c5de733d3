//! Gradient checks for the visual frontend, the fusion/decode paths, the
//! mask application, the loss, the synthesis adjoint, and the fully
//! assembled micro-model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, loss_weights, random_vec, weighted_sum, CheckSettings, GradReport};
use crate::complex_nn::Mode;
use crate::dsp_stft::{conv_istft, conv_istft_backward, Spectrogram, StftConfig, Waveform};
use crate::error::Result;
use crate::model::{
    apply_mask, apply_mask_backward, decode_backward, decode_fwd, enhance_backward, enhance_fwd,
    fuse_backward, fuse_fwd, CRMask, EnhanceOptions, ModelConfig, ModelState,
};
use crate::tensor::{ComplexTensor, Tensor};
use crate::train_eval::{si_snr_loss, si_snr_loss_backward, SiSnrVariant};
use crate::visual_frontend::{
    encode_frames_backward, encode_frames_fwd, temporal_upsample, temporal_upsample_backward,
    UpsampleMode, VideoFrames, VisualEmbedding,
};

fn rand_complex(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexTensor {
    let n = shape.iter().product();
    ComplexTensor::new(
        Tensor::from_vec(random_vec(n, rng), shape).unwrap(),
        Tensor::from_vec(random_vec(n, rng), shape).unwrap(),
    )
    .unwrap()
}

fn micro_inputs(seed: u64) -> (Waveform, VideoFrames) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..240).map(|_| rng.random_range(-0.5..0.5)).collect();
    let frames: Vec<u8> = (0..2 * 8 * 8).map(|_| rng.random_range(0..=255)).collect();
    (
        Waveform::new(samples, 16_000),
        VideoFrames::new(frames, 2, 8, 8, 100.0).unwrap(),
    )
}

fn check_encode_frames(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let cfg = ModelConfig::micro();
    let mut state = ModelState::init(cfg)?;
    state.config.seed = 71;
    let (_, video) = micro_inputs(72);

    let (emb, cache, _) = encode_frames_fwd(&video, &state.visual, &state.config.visual, Mode::Train)?;
    let w = loss_weights(emb.data.numel(), 73);
    let gt = Tensor::from_vec(w.clone(), emb.data.shape()).unwrap();
    let grads = encode_frames_backward(&cache, &state.visual, &gt)?;

    let eval = |vp: &crate::visual_frontend::VisualFrontendParams| -> f64 {
        let (e, _, _) =
            encode_frames_fwd(&video, vp, &state.config.visual, Mode::Train).unwrap();
        weighted_sum(e.data.data(), &w)
    };

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients(
            "encode_frames",
            param,
            theta,
            analytic,
            settings,
            |v| {
                let mut vp = state.visual.clone();
                match which {
                    0 => vp.stem.weight.data_mut().copy_from_slice(v),
                    1 => vp.blocks[0].conv1.weight.data_mut().copy_from_slice(v),
                    2 => vp.blocks[0].bn1.gamma.data_mut().copy_from_slice(v),
                    3 => vp.blocks[1].conv1.weight.data_mut().copy_from_slice(v),
                    4 => {
                        let (conv, _) = vp.blocks[1].proj.as_mut().unwrap();
                        conv.weight.data_mut().copy_from_slice(v)
                    }
                    _ => vp.head.weight.data_mut().copy_from_slice(v),
                }
                eval(&vp)
            },
        )?);
        Ok(())
    };
    run("stem.weight", state.visual.stem.weight.data(), grads.stem.weight.data(), 0)?;
    run(
        "block0.conv1.weight",
        state.visual.blocks[0].conv1.weight.data(),
        grads.blocks[0].conv1.weight.data(),
        1,
    )?;
    run(
        "block0.bn1.gamma",
        state.visual.blocks[0].bn1.gamma.data(),
        grads.blocks[0].bn1.gamma.data(),
        2,
    )?;
    run(
        "block1.conv1.weight",
        state.visual.blocks[1].conv1.weight.data(),
        grads.blocks[1].conv1.weight.data(),
        3,
    )?;
    run(
        "block1.proj.weight",
        state.visual.blocks[1].proj.as_ref().unwrap().0.weight.data(),
        grads.blocks[1].proj.as_ref().unwrap().0.weight.data(),
        4,
    )?;
    run("head.weight", state.visual.head.weight.data(), grads.head.weight.data(), 5)?;
    Ok(reports)
}

fn check_temporal_upsample(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let src = Tensor::from_vec(random_vec(3 * 4, &mut rng), &[3, 4]).unwrap();
    let mut reports = Vec::new();
    for (mode, name) in [
        (UpsampleMode::Nearest, "nearest"),
        (UpsampleMode::Linear, "linear"),
    ] {
        let e = VisualEmbedding { data: src.clone() };
        let out = temporal_upsample(&e, 7, mode)?;
        let w = loss_weights(out.data.numel(), 76);
        let gt = Tensor::from_vec(w.clone(), out.data.shape()).unwrap();
        let dx = temporal_upsample_backward(3, &gt, mode)?;
        reports.push(check_gradients(
            "temporal_upsample",
            name,
            src.data(),
            dx.data(),
            settings,
            |v| {
                let e = VisualEmbedding {
                    data: Tensor::from_vec(v.to_vec(), &[3, 4]).unwrap(),
                };
                weighted_sum(temporal_upsample(&e, 7, mode).unwrap().data.data(), &w)
            },
        )?);
    }
    Ok(reports)
}

fn micro_spectrogram(seed: u64) -> Spectrogram {
    let cfg = StftConfig {
        win_length: 16,
        hop_length: 8,
        fft_length: 16,
        ..StftConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = cfg.num_frames(240);
    Spectrogram {
        data: rand_complex(&[cfg.freq_bins(), frames], &mut rng),
        config: cfg,
        num_samples: 240,
    }
}

fn check_apply_mask(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let spec = micro_spectrogram(81);
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let mask = rand_complex(spec.data.shape(), &mut rng);

    let out = apply_mask(&spec, &CRMask { data: mask.clone() })?;
    let wr = loss_weights(out.data.numel(), 83);
    let wi = loss_weights(out.data.numel(), 84);
    let mut g = ComplexTensor::zeros(out.data.shape());
    g.re.data_mut().copy_from_slice(&wr);
    g.im.data_mut().copy_from_slice(&wi);
    let dm = apply_mask_backward(&spec, &g);

    let eval = |m: &ComplexTensor| -> f64 {
        let out = apply_mask(&spec, &CRMask { data: m.clone() }).unwrap();
        weighted_sum(out.data.re.data(), &wr) + weighted_sum(out.data.im.data(), &wi)
    };
    let mut reports = Vec::new();
    reports.push(check_gradients(
        "apply_mask",
        "mask.re",
        mask.re.data(),
        dm.re.data(),
        settings,
        |v| {
            let mut m = mask.clone();
            m.re.data_mut().copy_from_slice(v);
            eval(&m)
        },
    )?);
    reports.push(check_gradients(
        "apply_mask",
        "mask.im",
        mask.im.data(),
        dm.im.data(),
        settings,
        |v| {
            let mut m = mask.clone();
            m.im.data_mut().copy_from_slice(v);
            eval(&m)
        },
    )?);
    Ok(reports)
}

fn check_istft(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let spec = micro_spectrogram(85);
    let out = conv_istft(&spec)?;
    let w = loss_weights(out.len(), 86);
    let g = conv_istft_backward(&spec, &w)?;

    let eval = |data: &ComplexTensor| -> f64 {
        let s = Spectrogram {
            data: data.clone(),
            config: spec.config.clone(),
            num_samples: spec.num_samples,
        };
        weighted_sum(&conv_istft(&s).unwrap().samples, &w)
    };
    let mut reports = Vec::new();
    reports.push(check_gradients(
        "conv_istft",
        "spec.re",
        spec.data.re.data(),
        g.re.data(),
        settings,
        |v| {
            let mut d = spec.data.clone();
            d.re.data_mut().copy_from_slice(v);
            eval(&d)
        },
    )?);
    reports.push(check_gradients(
        "conv_istft",
        "spec.im",
        spec.data.im.data(),
        g.im.data(),
        settings,
        |v| {
            let mut d = spec.data.clone();
            d.im.data_mut().copy_from_slice(v);
            eval(&d)
        },
    )?);
    Ok(reports)
}

fn check_si_snr_loss(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(87);
    let target: Vec<f64> = random_vec(96, &mut rng);
    let estimate: Vec<f64> = random_vec(96, &mut rng);
    let mut reports = Vec::new();
    for (variant, name) in [
        (SiSnrVariant::ScaleInvariant, "scale_invariant"),
        (SiSnrVariant::PlainSnr, "plain_snr"),
    ] {
        let (_, grads) = si_snr_loss_backward(&[&estimate], &[&target], variant)?;
        let tight = CheckSettings {
            tol: 1e-5,
            ..settings.clone()
        };
        reports.push(check_gradients(
            "si_snr_loss",
            name,
            &estimate,
            &grads[0],
            &tight,
            |v| si_snr_loss(&[v], &[&target], variant).unwrap(),
        )?);
    }
    Ok(reports)
}

/// Kernel-scope checks owned by this file (frontend, mask path, loss, istft).
pub fn run_ops(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    reports.extend(check_encode_frames(settings)?);
    reports.extend(check_temporal_upsample(settings)?);
    reports.extend(check_apply_mask(settings)?);
    reports.extend(check_istft(settings)?);
    reports.extend(check_si_snr_loss(settings)?);
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Composite model paths
// ---------------------------------------------------------------------------

fn check_fuse(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut cfg = ModelConfig::micro();
    cfg.seed = 91;
    let state = ModelState::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let latent = rand_complex(&[1, 3, 3, 6], &mut rng);
    let visual = VisualEmbedding {
        data: Tensor::from_vec(random_vec(6 * 4, &mut rng), &[6, 4]).unwrap(),
    };

    let (out, cache, _) = fuse_fwd(&latent, &visual, &state, Mode::Train, &mut None)?;
    let wr = loss_weights(out.numel(), 93);
    let wi = loss_weights(out.numel(), 94);
    let mut g = ComplexTensor::zeros(out.shape());
    g.re.data_mut().copy_from_slice(&wr);
    g.im.data_mut().copy_from_slice(&wi);
    let (dlatent, dvisual, grads) = fuse_backward(&cache, &state, &g)?;

    let eval = |lat: &ComplexTensor, vis: &VisualEmbedding, st: &ModelState| -> f64 {
        let (o, _, _) = fuse_fwd(lat, vis, st, Mode::Train, &mut None).unwrap();
        weighted_sum(o.re.data(), &wr) + weighted_sum(o.im.data(), &wi)
    };

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients("fuse", param, theta, analytic, settings, |v| {
            let mut lat = latent.clone();
            let mut vis = visual.clone();
            let mut st = state.clone();
            match which {
                0 => lat.re.data_mut().copy_from_slice(v),
                1 => lat.im.data_mut().copy_from_slice(v),
                2 => vis.data.data_mut().copy_from_slice(v),
                3 => st.fusion.proj_in.weight.data_mut().copy_from_slice(v),
                _ => st.fusion.proj_out.weight.data_mut().copy_from_slice(v),
            }
            eval(&lat, &vis, &st)
        })?);
        Ok(())
    };
    run("latent.re", latent.re.data(), dlatent.re.data(), 0)?;
    run("latent.im", latent.im.data(), dlatent.im.data(), 1)?;
    run("visual", visual.data.data(), dvisual.data(), 2)?;
    run(
        "proj_in.weight",
        state.fusion.proj_in.weight.data(),
        grads.proj_in.weight.data(),
        3,
    )?;
    run(
        "proj_out.weight",
        state.fusion.proj_out.weight.data(),
        grads.proj_out.weight.data(),
        4,
    )?;
    Ok(reports)
}

fn check_decode(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut cfg = ModelConfig::micro();
    cfg.seed = 95;
    let state = ModelState::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(96);
    let t = 6;
    let skips = vec![
        rand_complex(&[1, 2, 5, t], &mut rng),
        rand_complex(&[1, 3, 3, t], &mut rng),
    ];
    let fused = rand_complex(&[1, 3, 3, t], &mut rng);

    let (mask, cache, _) = decode_fwd(&fused, &skips, &state, Mode::Train)?;
    let wr = loss_weights(mask.data.numel(), 97);
    let wi = loss_weights(mask.data.numel(), 98);
    let mut g = ComplexTensor::zeros(mask.data.shape());
    g.re.data_mut().copy_from_slice(&wr);
    g.im.data_mut().copy_from_slice(&wi);
    let (dfused, dskips, grads) = decode_backward(&cache, &state, &g)?;

    let eval = |fu: &ComplexTensor, sk: &[ComplexTensor], st: &ModelState| -> f64 {
        let (m, _, _) = decode_fwd(fu, sk, st, Mode::Train).unwrap();
        weighted_sum(m.data.re.data(), &wr) + weighted_sum(m.data.im.data(), &wi)
    };

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients("decode", param, theta, analytic, settings, |v| {
            let mut fu = fused.clone();
            let mut sk = skips.clone();
            let mut st = state.clone();
            match which {
                0 => fu.re.data_mut().copy_from_slice(v),
                1 => sk[0].re.data_mut().copy_from_slice(v),
                2 => sk[1].im.data_mut().copy_from_slice(v),
                3 => st.decoder[0].conv.w_real.data_mut().copy_from_slice(v),
                4 => st.decoder[1].conv.w_imag.data_mut().copy_from_slice(v),
                _ => st.decoder[0]
                    .bn
                    .as_mut()
                    .unwrap()
                    .gamma_rr
                    .data_mut()
                    .copy_from_slice(v),
            }
            eval(&fu, &sk, &st)
        })?);
        Ok(())
    };
    run("fused.re", fused.re.data(), dfused.re.data(), 0)?;
    run("skip0.re", skips[0].re.data(), dskips[0].re.data(), 1)?;
    run("skip1.im", skips[1].im.data(), dskips[1].im.data(), 2)?;
    run(
        "decoder0.w_real",
        state.decoder[0].conv.w_real.data(),
        grads[0].0.w_real.data(),
        3,
    )?;
    run(
        "decoder1.w_imag",
        state.decoder[1].conv.w_imag.data(),
        grads[1].0.w_imag.data(),
        4,
    )?;
    run(
        "decoder0.bn.gamma_rr",
        state.decoder[0].bn.as_ref().unwrap().gamma_rr.data(),
        grads[0].1.as_ref().unwrap().gamma_rr.data(),
        5,
    )?;
    Ok(reports)
}

/// Composite checks through fuse and decode.
pub fn run_model(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    reports.extend(check_fuse(settings)?);
    reports.extend(check_decode(settings)?);
    Ok(reports)
}

/// Finite differences through the entire micro-model for every trainable
/// parameter tensor.
pub fn run_full_model(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut cfg = ModelConfig::micro();
    cfg.seed = 101;
    let state = ModelState::init(cfg)?;
    let (noisy, video) = micro_inputs(102);
    let opts = EnhanceOptions {
        mode: Mode::Train,
        zero_visual: false,
    };

    let (out, cache, _) = enhance_fwd(&noisy, &video, &state, &opts, &mut None)?;
    let w = loss_weights(out.len(), 103);
    let grads = enhance_backward(&cache, &state, &w)?;

    let mut param_names = Vec::new();
    let mut param_data = Vec::new();
    {
        let mut snapshot = state.clone();
        snapshot.visit_trainable_mut(&mut |name, t| {
            param_names.push(name.to_string());
            param_data.push(t.clone());
        });
    }
    let mut grad_map = std::collections::BTreeMap::new();
    grads.visit(&mut |name, t| {
        grad_map.insert(name.to_string(), t.clone());
    });

    let mut reports = Vec::with_capacity(param_names.len());
    for (name, theta) in param_names.iter().zip(&param_data) {
        let analytic = grad_map
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        reports.push(check_gradients(
            "enhance",
            name,
            theta.data(),
            analytic.data(),
            settings,
            |v| {
                let mut st = state.clone();
                st.visit_trainable_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut().copy_from_slice(v);
                    }
                });
                let (o, _, _) = enhance_fwd(&noisy, &video, &st, &opts, &mut None).unwrap();
                weighted_sum(&o.samples, &w)
            },
        )?);
    }
    Ok(reports)
}
