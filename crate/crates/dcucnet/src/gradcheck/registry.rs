//! Registered gradient checks for every differentiable op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_gradients, loss_weights, nudge_from_kinks, random_vec, weighted_sum, CheckSettings,
    GradReport,
};
use crate::complex_nn::{
    complex_batch_norm_backward, complex_batch_norm_fwd, complex_conv2d, complex_conv2d_backward,
    complex_conv_transpose2d, complex_conv_transpose2d_backward, prelu, prelu_backward,
    ComplexBatchNormParams, ComplexConvParams, Mode,
};
use crate::error::Result;
use crate::tensor::{ComplexTensor, Tensor};

fn rand_complex(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexTensor {
    let n = shape.iter().product();
    ComplexTensor::new(
        Tensor::from_vec(random_vec(n, rng), shape).unwrap(),
        Tensor::from_vec(random_vec(n, rng), shape).unwrap(),
    )
    .unwrap()
}

/// Weighted sum of a complex tensor's entries against two weight vectors,
/// the scalar reducer shared by all complex-output checks.
fn complex_weighted(out: &ComplexTensor, wr: &[f64], wi: &[f64]) -> f64 {
    weighted_sum(out.re.data(), wr) + weighted_sum(out.im.data(), wi)
}

// ---------------------------------------------------------------------------
// complex_nn kernels
// ---------------------------------------------------------------------------

fn check_complex_conv2d(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_complex(&[1, 2, 6, 5], &mut rng);
    let mut p = ComplexConvParams::init_random(3, 2, (3, 2), (2, 1), (1, 1), &mut rng);
    for v in p.b_real.data_mut() {
        *v = 0.1;
    }
    for v in p.b_imag.data_mut() {
        *v = -0.2;
    }

    let out = complex_conv2d(&x, &p)?;
    let wr = loss_weights(out.numel(), 21);
    let wi = loss_weights(out.numel(), 22);
    let mut g = ComplexTensor::zeros(out.shape());
    g.re.data_mut().copy_from_slice(&wr);
    g.im.data_mut().copy_from_slice(&wi);
    let (dx, dp) = complex_conv2d_backward(&x, &p, &g)?;

    let mut reports = Vec::new();
    let run = |param: &str,
               theta: &[f64],
               analytic: &[f64],
               apply: &dyn Fn(&[f64], &ComplexTensor, &ComplexConvParams) -> (ComplexTensor, ComplexConvParams)|
     -> Result<GradReport> {
        check_gradients("complex_conv2d", param, theta, analytic, settings, |v| {
            let (xx, pp) = apply(v, &x, &p);
            complex_weighted(&complex_conv2d(&xx, &pp).unwrap(), &wr, &wi)
        })
    };

    reports.push(run("x.re", x.re.data(), dx.re.data(), &|v, x0, p0| {
        let mut xx = x0.clone();
        xx.re.data_mut().copy_from_slice(v);
        (xx, p0.clone())
    })?);
    reports.push(run("x.im", x.im.data(), dx.im.data(), &|v, x0, p0| {
        let mut xx = x0.clone();
        xx.im.data_mut().copy_from_slice(v);
        (xx, p0.clone())
    })?);
    reports.push(run("w_real", p.w_real.data(), dp.w_real.data(), &|v, x0, p0| {
        let mut pp = p0.clone();
        pp.w_real.data_mut().copy_from_slice(v);
        (x0.clone(), pp)
    })?);
    reports.push(run("w_imag", p.w_imag.data(), dp.w_imag.data(), &|v, x0, p0| {
        let mut pp = p0.clone();
        pp.w_imag.data_mut().copy_from_slice(v);
        (x0.clone(), pp)
    })?);
    reports.push(run("b_real", p.b_real.data(), dp.b_real.data(), &|v, x0, p0| {
        let mut pp = p0.clone();
        pp.b_real.data_mut().copy_from_slice(v);
        (x0.clone(), pp)
    })?);
    reports.push(run("b_imag", p.b_imag.data(), dp.b_imag.data(), &|v, x0, p0| {
        let mut pp = p0.clone();
        pp.b_imag.data_mut().copy_from_slice(v);
        (x0.clone(), pp)
    })?);
    Ok(reports)
}

fn check_complex_conv_transpose2d(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_complex(&[1, 3, 4, 5], &mut rng);
    let p = ComplexConvParams::init_random(2, 3, (3, 2), (2, 1), (1, 0), &mut rng);

    let out = complex_conv_transpose2d(&x, &p)?;
    let wr = loss_weights(out.numel(), 31);
    let wi = loss_weights(out.numel(), 32);
    let mut g = ComplexTensor::zeros(out.shape());
    g.re.data_mut().copy_from_slice(&wr);
    g.im.data_mut().copy_from_slice(&wi);
    let (dx, dp) = complex_conv_transpose2d_backward(&x, &p, &g)?;

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients(
            "complex_conv_transpose2d",
            param,
            theta,
            analytic,
            settings,
            |v| {
                let mut xx = x.clone();
                let mut pp = p.clone();
                match which {
                    0 => xx.re.data_mut().copy_from_slice(v),
                    1 => xx.im.data_mut().copy_from_slice(v),
                    2 => pp.w_real.data_mut().copy_from_slice(v),
                    3 => pp.w_imag.data_mut().copy_from_slice(v),
                    4 => pp.b_real.data_mut().copy_from_slice(v),
                    _ => pp.b_imag.data_mut().copy_from_slice(v),
                }
                complex_weighted(&complex_conv_transpose2d(&xx, &pp).unwrap(), &wr, &wi)
            },
        )?);
        Ok(())
    };
    run("x.re", x.re.data(), dx.re.data(), 0)?;
    run("x.im", x.im.data(), dx.im.data(), 1)?;
    run("w_real", p.w_real.data(), dp.w_real.data(), 2)?;
    run("w_imag", p.w_imag.data(), dp.w_imag.data(), 3)?;
    run("b_real", p.b_real.data(), dp.b_real.data(), 4)?;
    run("b_imag", p.b_imag.data(), dp.b_imag.data(), 5)?;
    Ok(reports)
}

fn check_complex_batch_norm(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_complex(&[2, 3, 4, 5], &mut rng);
    let mut p = ComplexBatchNormParams::new(3);
    // Non-trivial affine so the gamma paths are exercised.
    for (k, v) in p.gamma_rr.data_mut().iter_mut().enumerate() {
        *v = 0.8 + 0.1 * k as f64;
    }
    for (k, v) in p.gamma_ri.data_mut().iter_mut().enumerate() {
        *v = 0.05 * (k as f64 + 1.0);
    }
    for (k, v) in p.beta_r.data_mut().iter_mut().enumerate() {
        *v = 0.3 - 0.1 * k as f64;
    }

    let (out, cache, _) = complex_batch_norm_fwd(&x, &p, Mode::Train)?;
    let wr = loss_weights(out.numel(), 41);
    let wi = loss_weights(out.numel(), 42);
    let mut g = ComplexTensor::zeros(out.shape());
    g.re.data_mut().copy_from_slice(&wr);
    g.im.data_mut().copy_from_slice(&wi);
    let (dx, dp) = complex_batch_norm_backward(&cache, &p, &g)?;

    let mut reports = Vec::new();
    let mut run = |param: &str, theta: &[f64], analytic: &[f64], which: usize| -> Result<()> {
        reports.push(check_gradients(
            "complex_batch_norm",
            param,
            theta,
            analytic,
            settings,
            |v| {
                let mut xx = x.clone();
                let mut pp = p.clone();
                match which {
                    0 => xx.re.data_mut().copy_from_slice(v),
                    1 => xx.im.data_mut().copy_from_slice(v),
                    2 => pp.gamma_rr.data_mut().copy_from_slice(v),
                    3 => pp.gamma_ri.data_mut().copy_from_slice(v),
                    4 => pp.gamma_ii.data_mut().copy_from_slice(v),
                    5 => pp.beta_r.data_mut().copy_from_slice(v),
                    _ => pp.beta_i.data_mut().copy_from_slice(v),
                }
                let (out, _, _) = complex_batch_norm_fwd(&xx, &pp, Mode::Train).unwrap();
                complex_weighted(&out, &wr, &wi)
            },
        )?);
        Ok(())
    };
    run("x.re", x.re.data(), dx.re.data(), 0)?;
    run("x.im", x.im.data(), dx.im.data(), 1)?;
    run("gamma_rr", p.gamma_rr.data(), dp.gamma_rr.data(), 2)?;
    run("gamma_ri", p.gamma_ri.data(), dp.gamma_ri.data(), 3)?;
    run("gamma_ii", p.gamma_ii.data(), dp.gamma_ii.data(), 4)?;
    run("beta_r", p.beta_r.data(), dp.beta_r.data(), 5)?;
    run("beta_i", p.beta_i.data(), dp.beta_i.data(), 6)?;
    Ok(reports)
}

fn check_prelu(settings: &CheckSettings) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut x = rand_complex(&[2, 3, 4, 4], &mut rng);
    nudge_from_kinks(x.re.data_mut(), 10.0 * settings.eps);
    nudge_from_kinks(x.im.data_mut(), 10.0 * settings.eps);
    let slope = Tensor::from_vec(vec![0.25, 0.5, -0.1], &[3]).unwrap();

    let out = prelu(&x, &slope)?;
    let wr = loss_weights(out.numel(), 51);
    let wi = loss_weights(out.numel(), 52);
    let mut g = ComplexTensor::zeros(out.shape());
    g.re.data_mut().copy_from_slice(&wr);
    g.im.data_mut().copy_from_slice(&wi);
    let (dx, ds) = prelu_backward(&x, &slope, &g)?;

    let mut reports = Vec::new();
    reports.push(check_gradients(
        "prelu",
        "x.re",
        x.re.data(),
        dx.re.data(),
        settings,
        |v| {
            let mut xx = x.clone();
            xx.re.data_mut().copy_from_slice(v);
            complex_weighted(&prelu(&xx, &slope).unwrap(), &wr, &wi)
        },
    )?);
    reports.push(check_gradients(
        "prelu",
        "x.im",
        x.im.data(),
        dx.im.data(),
        settings,
        |v| {
            let mut xx = x.clone();
            xx.im.data_mut().copy_from_slice(v);
            complex_weighted(&prelu(&xx, &slope).unwrap(), &wr, &wi)
        },
    )?);
    reports.push(check_gradients(
        "prelu",
        "slope",
        slope.data(),
        ds.data(),
        settings,
        |v| {
            let s = Tensor::from_vec(v.to_vec(), &[3]).unwrap();
            complex_weighted(&prelu(&x, &s).unwrap(), &wr, &wi)
        },
    )?);
    Ok(reports)
}

/// Finite-difference checks for every kernel-level op.
pub fn run_kernel_checks() -> Result<Vec<GradReport>> {
    let settings = CheckSettings::default();
    let mut reports = Vec::new();
    reports.extend(check_complex_conv2d(&settings)?);
    reports.extend(check_complex_conv_transpose2d(&settings)?);
    reports.extend(check_complex_batch_norm(&settings)?);
    reports.extend(check_prelu(&settings)?);
    reports.extend(super::conformer_checks::run(&settings)?);
    reports.extend(super::pipeline_checks::run_ops(&settings)?);
    Ok(reports)
}

/// Composite checks through the assembled model paths.
pub fn run_model_checks() -> Result<Vec<GradReport>> {
    let settings = CheckSettings {
        tol: 1e-3,
        ..Default::default()
    };
    super::pipeline_checks::run_model(&settings)
}

/// Gradient check of the full micro-model, every parameter group.
pub fn run_full_model_check() -> Result<Vec<GradReport>> {
    let settings = CheckSettings {
        tol: 1e-3,
        max_coords: 24,
        ..Default::default()
    };
    super::pipeline_checks::run_full_model(&settings)
}
