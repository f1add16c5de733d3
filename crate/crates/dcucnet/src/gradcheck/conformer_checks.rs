//! Gradient checks for the conformer ops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, loss_weights, random_vec, weighted_sum, CheckSettings, GradReport};
use crate::complex_nn::Mode;
use crate::conformer::{
    conformer_block_backward, conformer_block_fwd, conv_module_backward, conv_module_fwd,
    ffn_half_backward, ffn_half_fwd, mhsa_backward, mhsa_fwd, ConformerBlockParams,
    ConformerConfig, ConvModuleParams, FfnParams, FrameSequence, MhsaParams,
};
use crate::error::Result;
use crate::tensor::Tensor;

fn small_cfg() -> ConformerConfig {
    ConformerConfig {
        model_dim: 8,
        num_heads: 2,
        ffn_expansion: 2,
        conv_kernel: 3,
        num_blocks: 1,
        dropout: 0.0,
        ..Default::default()
    }
}

fn rand_seq(b: usize, t: usize, d: usize, rng: &mut ChaCha8Rng) -> FrameSequence {
    FrameSequence::new(Tensor::from_vec(random_vec(b * t * d, rng), &[b, t, d]).unwrap()).unwrap()
}

fn check_ffn_half(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let cfg = small_cfg();
    let p = FfnParams::init_random(&cfg, &mut rng);
    let x = rand_seq(1, 5, cfg.model_dim, &mut rng);

    let (out, cache) = ffn_half_fwd(&x, &p, &mut None)?;
    let w = loss_weights(out.data.numel(), 62);
    let gt = Tensor::from_vec(w.clone(), out.data.shape()).unwrap();
    let (dx, dp) = ffn_half_backward(&cache, &p, &gt)?;

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients(
            "ffn_half",
            param,
            theta,
            analytic,
            settings,
            |v| {
                let mut xx = x.clone();
                let mut pp = p.clone();
                match which {
                    0 => xx.data.data_mut().copy_from_slice(v),
                    1 => pp.ln.gamma.data_mut().copy_from_slice(v),
                    2 => pp.ln.beta.data_mut().copy_from_slice(v),
                    3 => pp.w1.weight.data_mut().copy_from_slice(v),
                    4 => pp.w1.bias.data_mut().copy_from_slice(v),
                    5 => pp.w2.weight.data_mut().copy_from_slice(v),
                    _ => pp.w2.bias.data_mut().copy_from_slice(v),
                }
                weighted_sum(ffn_half_fwd(&xx, &pp, &mut None).unwrap().0.data.data(), &w)
            },
        )?);
        Ok(())
    };
    run("x", x.data.data(), dx.data(), 0)?;
    run("ln.gamma", p.ln.gamma.data(), dp.ln.gamma.data(), 1)?;
    run("ln.beta", p.ln.beta.data(), dp.ln.beta.data(), 2)?;
    run("w1.weight", p.w1.weight.data(), dp.w1.weight.data(), 3)?;
    run("w1.bias", p.w1.bias.data(), dp.w1.bias.data(), 4)?;
    run("w2.weight", p.w2.weight.data(), dp.w2.weight.data(), 5)?;
    run("w2.bias", p.w2.bias.data(), dp.w2.bias.data(), 6)?;
    Ok(reports)
}

fn check_mhsa(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let cfg = small_cfg();
    let p = MhsaParams::init_random(&cfg, &mut rng);
    let x = rand_seq(1, 4, cfg.model_dim, &mut rng);

    let (out, cache) = mhsa_fwd(&x, &p)?;
    let w = loss_weights(out.data.numel(), 64);
    let gt = Tensor::from_vec(w.clone(), out.data.shape()).unwrap();
    let (dx, dp) = mhsa_backward(&cache, &p, &gt)?;

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients(
            "mhsa",
            param,
            theta,
            analytic,
            settings,
            |v| {
                let mut xx = x.clone();
                let mut pp = p.clone();
                match which {
                    0 => xx.data.data_mut().copy_from_slice(v),
                    1 => pp.wq.weight.data_mut().copy_from_slice(v),
                    2 => pp.wk.weight.data_mut().copy_from_slice(v),
                    3 => pp.wv.weight.data_mut().copy_from_slice(v),
                    4 => pp.wo.weight.data_mut().copy_from_slice(v),
                    5 => pp.ln.gamma.data_mut().copy_from_slice(v),
                    _ => pp.wq.bias.data_mut().copy_from_slice(v),
                }
                weighted_sum(mhsa_fwd(&xx, &pp).unwrap().0.data.data(), &w)
            },
        )?);
        Ok(())
    };
    run("x", x.data.data(), dx.data(), 0)?;
    run("wq.weight", p.wq.weight.data(), dp.wq.weight.data(), 1)?;
    run("wk.weight", p.wk.weight.data(), dp.wk.weight.data(), 2)?;
    run("wv.weight", p.wv.weight.data(), dp.wv.weight.data(), 3)?;
    run("wo.weight", p.wo.weight.data(), dp.wo.weight.data(), 4)?;
    run("ln.gamma", p.ln.gamma.data(), dp.ln.gamma.data(), 5)?;
    run("wq.bias", p.wq.bias.data(), dp.wq.bias.data(), 6)?;
    Ok(reports)
}

fn check_conv_module(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    let cfg = small_cfg();
    let p = ConvModuleParams::init_random(&cfg, &mut rng);
    let x = rand_seq(1, 6, cfg.model_dim, &mut rng);

    let (out, cache, _) = conv_module_fwd(&x, &p, Mode::Train, &mut None)?;
    let w = loss_weights(out.data.numel(), 66);
    let gt = Tensor::from_vec(w.clone(), out.data.shape()).unwrap();
    let (dx, dp) = conv_module_backward(&cache, &p, &gt)?;

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients(
            "conv_module",
            param,
            theta,
            analytic,
            settings,
            |v| {
                let mut xx = x.clone();
                let mut pp = p.clone();
                match which {
                    0 => xx.data.data_mut().copy_from_slice(v),
                    1 => pp.pw1.weight.data_mut().copy_from_slice(v),
                    2 => pp.dw.weight.data_mut().copy_from_slice(v),
                    3 => pp.pw1.bias.data_mut().copy_from_slice(v),
                    4 => pp.bn.gamma.data_mut().copy_from_slice(v),
                    5 => pp.bn.beta.data_mut().copy_from_slice(v),
                    _ => pp.pw2.weight.data_mut().copy_from_slice(v),
                }
                weighted_sum(
                    conv_module_fwd(&xx, &pp, Mode::Train, &mut None)
                        .unwrap()
                        .0
                        .data
                        .data(),
                    &w,
                )
            },
        )?);
        Ok(())
    };
    run("x", x.data.data(), dx.data(), 0)?;
    run("pw1.weight", p.pw1.weight.data(), dp.pw1.weight.data(), 1)?;
    run("dw.weight", p.dw.weight.data(), dp.dw.weight.data(), 2)?;
    run("pw1.bias", p.pw1.bias.data(), dp.pw1.bias.data(), 3)?;
    run("bn.gamma", p.bn.gamma.data(), dp.bn.gamma.data(), 4)?;
    run("bn.beta", p.bn.beta.data(), dp.bn.beta.data(), 5)?;
    run("pw2.weight", p.pw2.weight.data(), dp.pw2.weight.data(), 6)?;
    Ok(reports)
}

fn check_conformer_block(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let cfg = small_cfg();
    let p = ConformerBlockParams::init_random(&cfg, &mut rng);
    let x = rand_seq(1, 5, cfg.model_dim, &mut rng);

    let (out, cache, _) = conformer_block_fwd(&x, &p, Mode::Train, &mut None)?;
    let w = loss_weights(out.data.numel(), 68);
    let gt = Tensor::from_vec(w.clone(), out.data.shape()).unwrap();
    let (dx, dp) = conformer_block_backward(&cache, &p, &gt)?;

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients(
            "conformer_block",
            param,
            theta,
            analytic,
            settings,
            |v| {
                let mut xx = x.clone();
                let mut pp = p.clone();
                match which {
                    0 => xx.data.data_mut().copy_from_slice(v),
                    1 => pp.ffn1.w1.weight.data_mut().copy_from_slice(v),
                    2 => pp.mhsa.wq.weight.data_mut().copy_from_slice(v),
                    3 => pp.conv.dw.weight.data_mut().copy_from_slice(v),
                    4 => pp.ffn2.w2.weight.data_mut().copy_from_slice(v),
                    _ => pp.final_ln.gamma.data_mut().copy_from_slice(v),
                }
                weighted_sum(
                    conformer_block_fwd(&xx, &pp, Mode::Train, &mut None)
                        .unwrap()
                        .0
                        .data
                        .data(),
                    &w,
                )
            },
        )?);
        Ok(())
    };
    run("x", x.data.data(), dx.data(), 0)?;
    run(
        "ffn1.w1.weight",
        p.ffn1.w1.weight.data(),
        dp.ffn1.w1.weight.data(),
        1,
    )?;
    run(
        "mhsa.wq.weight",
        p.mhsa.wq.weight.data(),
        dp.mhsa.wq.weight.data(),
        2,
    )?;
    run(
        "conv.dw.weight",
        p.conv.dw.weight.data(),
        dp.conv.dw.weight.data(),
        3,
    )?;
    run(
        "ffn2.w2.weight",
        p.ffn2.w2.weight.data(),
        dp.ffn2.w2.weight.data(),
        4,
    )?;
    run(
        "final_ln.gamma",
        p.final_ln.gamma.data(),
        dp.final_ln.gamma.data(),
        5,
    )?;
    Ok(reports)
}

pub fn run(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    reports.extend(check_ffn_half(settings)?);
    reports.extend(check_mhsa(settings)?);
    reports.extend(check_conv_module(settings)?);
    reports.extend(check_conformer_block(settings)?);
    Ok(reports)
}
