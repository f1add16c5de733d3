//! SI-SNR metric and loss, optimizers, the training loop, and evaluation.
//!
//! Two SI-SNR variants exist side by side: `ScaleInvariant` zero-means both
//! signals and projects the estimate onto the target before forming the
//! error (the metric's standard definition), while `PlainSnr` subtracts the
//! target directly. The loss is the negative batch-mean SI-SNR in an
//! uncapped, eps-floored form whose gradient is derived analytically.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complex_nn::Mode;
use crate::conformer::DropoutCtx;
use crate::data::{Corpus, Split, ToyScene};
use crate::dsp_stft::Waveform;
use crate::error::{DcucError, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{enhance, enhance_backward, enhance_fwd, EnhanceOptions, ModelGrads, ModelState};
use crate::tensor::Tensor;
use crate::visual_frontend::VideoFrames;

pub const LOSS_EPS: f64 = 1e-8;
const CAP_DB: f64 = 60.0;
const LN10: f64 = std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiSnrVariant {
    ScaleInvariant,
    PlainSnr,
}

impl SiSnrVariant {
    pub fn parse(s: &str) -> Result<SiSnrVariant> {
        match s {
            "scale_invariant" => Ok(SiSnrVariant::ScaleInvariant),
            "plain_snr" => Ok(SiSnrVariant::PlainSnr),
            other => Err(DcucError::InvalidInput(format!(
                "unknown si_snr variant {other}"
            ))),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// SI-SNR in dB, capped to +/-60 dB at the degenerate extremes.
pub fn si_snr(estimate: &Waveform, target: &Waveform, variant: SiSnrVariant) -> Result<f64> {
    if estimate.len() != target.len() {
        return Err(DcucError::Shape(format!(
            "estimate has {} samples, target has {}",
            estimate.len(),
            target.len()
        )));
    }
    if target.samples.iter().all(|&v| v == 0.0) {
        return Err(DcucError::InvalidInput("target signal is zero".into()));
    }

    let (target_power, error_power) = match variant {
        SiSnrVariant::ScaleInvariant => {
            let me = mean(&estimate.samples);
            let mt = mean(&target.samples);
            let mut dot = 0.0;
            let mut t_sq = 0.0;
            for (e, t) in estimate.samples.iter().zip(&target.samples) {
                let (e0, t0) = (e - me, t - mt);
                dot += e0 * t0;
                t_sq += t0 * t0;
            }
            let alpha = dot / t_sq;
            let mut s_sq = 0.0;
            let mut r_sq = 0.0;
            for (e, t) in estimate.samples.iter().zip(&target.samples) {
                let (e0, t0) = (e - me, t - mt);
                let s = alpha * t0;
                let r = e0 - s;
                s_sq += s * s;
                r_sq += r * r;
            }
            (s_sq, r_sq)
        }
        SiSnrVariant::PlainSnr => {
            let mut t_sq = 0.0;
            let mut r_sq = 0.0;
            for (e, t) in estimate.samples.iter().zip(&target.samples) {
                t_sq += t * t;
                let r = e - t;
                r_sq += r * r;
            }
            (t_sq, r_sq)
        }
    };

    if target_power > 0.0 && error_power < 1e-12 * target_power {
        return Ok(CAP_DB);
    }
    if target_power < 1e-12 * error_power || target_power == 0.0 {
        return Ok(-CAP_DB);
    }
    Ok(10.0 * (target_power / error_power).log10())
}

/// Negative mean SI-SNR over a batch, uncapped with an eps floor in the
/// ratio so the loss stays finite and differentiable.
pub fn si_snr_loss(estimates: &[&[f64]], targets: &[&[f64]], variant: SiSnrVariant) -> Result<f64> {
    check_batch(estimates, targets)?;
    let mut total = 0.0;
    for (e, t) in estimates.iter().zip(targets) {
        total += item_loss(e, t, variant).0;
    }
    Ok(total / estimates.len() as f64)
}

/// Loss plus its gradient with respect to every estimate.
pub fn si_snr_loss_backward(
    estimates: &[&[f64]],
    targets: &[&[f64]],
    variant: SiSnrVariant,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(estimates, targets)?;
    let b = estimates.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(estimates.len());
    for (e, t) in estimates.iter().zip(targets) {
        let (loss, mut grad) = item_loss(e, t, variant);
        total += loss;
        for g in grad.iter_mut() {
            *g /= b;
        }
        grads.push(grad);
    }
    Ok((total / b, grads))
}

fn check_batch(estimates: &[&[f64]], targets: &[&[f64]]) -> Result<()> {
    if estimates.is_empty() || estimates.len() != targets.len() {
        return Err(DcucError::Shape("empty or mismatched batch".into()));
    }
    for (e, t) in estimates.iter().zip(targets) {
        if e.len() != t.len() {
            return Err(DcucError::Shape(format!(
                "estimate has {} samples, target has {}",
                e.len(),
                t.len()
            )));
        }
        if t.iter().all(|&v| v == 0.0) {
            return Err(DcucError::InvalidInput("target signal is zero".into()));
        }
    }
    Ok(())
}

/// (loss, dloss/destimate) for one pair.
fn item_loss(e: &[f64], t: &[f64], variant: SiSnrVariant) -> (f64, Vec<f64>) {
    let n = e.len();
    match variant {
        SiSnrVariant::ScaleInvariant => {
            let me = mean(e);
            let mt = mean(t);
            let mut dot = 0.0;
            let mut t_sq = 0.0;
            for k in 0..n {
                dot += (e[k] - me) * (t[k] - mt);
                t_sq += (t[k] - mt) * (t[k] - mt);
            }
            let t_sq_eps = t_sq + LOSS_EPS;
            let alpha = dot / t_sq_eps;

            let mut s_sq = 0.0;
            let mut r_sq = 0.0;
            let mut rt_dot = 0.0;
            for k in 0..n {
                let t0 = t[k] - mt;
                let s = alpha * t0;
                let r = (e[k] - me) - s;
                s_sq += s * s;
                r_sq += r * r;
                rt_dot += r * t0;
            }
            let s_sq_eps = s_sq + LOSS_EPS;
            let r_sq_eps = r_sq + LOSS_EPS;
            let loss = -(10.0 / LN10) * (s_sq_eps.ln() - r_sq_eps.ln());

            // d||s||^2/de0 = 2 alpha ||t0||^2 / (||t0||^2+eps) * t0
            // d||r||^2/de0 = 2 (r - t0 <r,t0> / (||t0||^2+eps))
            let c_s = 2.0 * alpha * t_sq / t_sq_eps;
            let c_r = 2.0 * rt_dot / t_sq_eps;
            let mut grad = vec![0.0; n];
            let mut gsum = 0.0;
            for k in 0..n {
                let t0 = t[k] - mt;
                let r = (e[k] - me) - alpha * t0;
                let ds = c_s * t0;
                let dr = 2.0 * r - c_r * t0;
                let g = -(10.0 / LN10) * (ds / s_sq_eps - dr / r_sq_eps);
                grad[k] = g;
                gsum += g;
            }
            // adjoint of zero-meaning the estimate
            let gmean = gsum / n as f64;
            for g in grad.iter_mut() {
                *g -= gmean;
            }
            (loss, grad)
        }
        SiSnrVariant::PlainSnr => {
            let mut t_sq = 0.0;
            let mut r_sq = 0.0;
            for k in 0..n {
                t_sq += t[k] * t[k];
                let r = e[k] - t[k];
                r_sq += r * r;
            }
            let t_sq_eps = t_sq + LOSS_EPS;
            let r_sq_eps = r_sq + LOSS_EPS;
            let loss = -(10.0 / LN10) * (t_sq_eps.ln() - r_sq_eps.ln());
            let grad = (0..n)
                .map(|k| (10.0 / LN10) * 2.0 * (e[k] - t[k]) / r_sq_eps)
                .collect();
            (loss, grad)
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(DcucError::InvalidInput(format!("unknown optimizer {other}"))),
        }
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    // per-parameter state in visitation order
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut ModelState, grads: &ModelGrads) {
        let mut flat: Vec<(String, Tensor)> = Vec::new();
        grads.visit(&mut |name, t| flat.push((name.to_string(), t.clone())));
        if self.m.is_empty() {
            self.m = flat.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = flat.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        self.step += 1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);

        let mut idx = 0;
        model.visit_trainable_mut(&mut |name, param| {
            let (gname, g) = &flat[idx];
            debug_assert_eq!(name, gname, "parameter/gradient order mismatch");
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let mom = &mut self.m[idx];
                    for ((p, m), gv) in param.data_mut().iter_mut().zip(mom.iter_mut()).zip(g.data())
                    {
                        *m = 0.9 * *m + gv;
                        *p -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    for (((p, m1), v1), gv) in param
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        *m1 = b1 * *m1 + (1.0 - b1) * gv;
                        *v1 = b2 * *v1 + (1.0 - b2) * gv * gv;
                        let mh = *m1 / bc1;
                        let vh = *v1 / bc2;
                        *p -= self.lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            idx += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub si_snr_variant: SiSnrVariant,
    /// Train on random aligned crops of this many video frames (None = full
    /// scenes). Evaluation always uses full scenes.
    pub crop_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            grad_clip: 5.0,
            seed: 0,
            checkpoint_dir: None,
            eval_every: 0,
            si_snr_variant: SiSnrVariant::ScaleInvariant,
            crop_frames: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(DcucError::InvalidInput("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(DcucError::InvalidInput("batch_size must be >= 1".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(DcucError::InvalidInput("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    /// Line-delimited machine-readable form. Wall time is excluded so the
    /// file is byte-identical across reruns with the same seed.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "step={} loss={} grad_norm={}\n",
                s.step, s.loss, s.grad_norm
            ));
        }
        out
    }
}

/// Crop a scene to `frames` video frames starting at video frame `f0`,
/// slicing the aligned audio range.
fn crop_scene(scene: &ToyScene, f0: usize, frames: usize) -> Result<(Waveform, Waveform, VideoFrames)> {
    let spf = scene.noisy.sample_rate as f64 / scene.video.fps; // samples per frame
    let s0 = (f0 as f64 * spf).round() as usize;
    let s1 = ((f0 + frames) as f64 * spf).round() as usize;
    let s1 = s1.min(scene.noisy.len());
    let fsz = scene.video.height * scene.video.width;
    let video = VideoFrames::new(
        scene.video.frames[f0 * fsz..(f0 + frames) * fsz].to_vec(),
        frames,
        scene.video.height,
        scene.video.width,
        scene.video.fps,
    )?;
    Ok((
        Waveform::new(scene.noisy.samples[s0..s1].to_vec(), scene.noisy.sample_rate),
        Waveform::new(scene.clean.samples[s0..s1].to_vec(), scene.clean.sample_rate),
        video,
    ))
}

/// Mini-batch gradient descent on the negative SI-SNR of enhanced speech.
/// Deterministic given the seed.
pub fn train(
    mut model: ModelState,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    let train_idx = corpus.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(DcucError::InvalidInput("training split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = TrainHistory::default();
    let mut step = 0;
    let dropout_p = model.config.conformer.dropout;

    for _epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let mut batch_grads: Option<ModelGrads> = None;
            let mut batch_updates = Vec::new();
            let mut batch_loss = 0.0;
            let inv_b = 1.0 / batch.len() as f64;

            for &scene_idx in batch {
                let scene = corpus.scene(scene_idx)?;
                let (noisy, clean, video) = match cfg.crop_frames {
                    Some(frames) if frames < scene.video.num_frames => {
                        // a crop may land entirely inside a silent gap of the
                        // target; resample a few times, then fall back to the
                        // full scene
                        let mut choice = None;
                        for _ in 0..8 {
                            let f0 = rng.random_range(0..=scene.video.num_frames - frames);
                            let c = crop_scene(&scene, f0, frames)?;
                            if c.1.samples.iter().any(|&v| v != 0.0) {
                                choice = Some(c);
                                break;
                            }
                        }
                        match choice {
                            Some(c) => c,
                            None => (
                                scene.noisy.clone(),
                                scene.clean.clone(),
                                scene.video.clone(),
                            ),
                        }
                    }
                    _ => (
                        scene.noisy.clone(),
                        scene.clean.clone(),
                        scene.video.clone(),
                    ),
                };

                let mut item_rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15) ^ scene_idx as u64,
                );
                let mut ctx = DropoutCtx {
                    rng: &mut item_rng,
                    p: dropout_p,
                };
                let mut dropout = if dropout_p > 0.0 { Some(&mut ctx) } else { None };

                let opts = EnhanceOptions {
                    mode: Mode::Train,
                    zero_visual: false,
                };
                let (est, cache, updates) =
                    enhance_fwd(&noisy, &video, &model, &opts, &mut dropout)?;

                let (loss, mut grads_wave) = si_snr_loss_backward(
                    &[&est.samples],
                    &[&clean.samples],
                    cfg.si_snr_variant,
                )?;
                batch_loss += loss * inv_b;
                // scale the item gradient by 1/B to get the batch-mean loss
                let mut g = grads_wave.remove(0);
                for v in g.iter_mut() {
                    *v *= inv_b;
                }
                let item_grads = enhance_backward(&cache, &model, &g)?;
                match batch_grads.as_mut() {
                    Some(acc) => acc.add(&item_grads),
                    None => batch_grads = Some(item_grads),
                }
                batch_updates.push(updates);
            }

            if !batch_loss.is_finite() {
                return Err(DcucError::TrainingDiverged { step });
            }

            let mut grads = batch_grads.expect("non-empty batch");
            let norm = grads.global_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            optimizer.apply(&mut model, &grads);
            for updates in &batch_updates {
                updates.apply(&mut model);
            }

            step += 1;
            history.steps.push(StepRecord {
                step,
                loss: batch_loss,
                grad_norm: norm,
                wall_ms: started.elapsed().as_millis() as u64,
            });

            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                if let Some(dir) = &cfg.checkpoint_dir {
                    std::fs::create_dir_all(dir).map_err(|e| DcucError::io(dir, e))?;
                    save_checkpoint(&model, &dir.join(format!("step_{step:06}.dcuc")))?;
                }
            }
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| DcucError::io(dir, e))?;
        save_checkpoint(&model, &dir.join("final.dcuc"))?;
    }
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub si_snr_db_mean: f64,
    pub si_snr_db_std: f64,
    pub si_snr_improvement_db: f64,
    pub num_utterances: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Zero the visual embedding (audio-only ablation).
    pub zero_visual: bool,
}

pub fn evaluate(
    model: &ModelState,
    corpus: &Corpus,
    split: Split,
    opts: EvalOptions,
) -> Result<EvalResult> {
    let indices = corpus.split_indices(split);
    evaluate_indices(model, corpus, &indices, opts)
}

/// Evaluate on an explicit scene-index list.
pub fn evaluate_indices(
    model: &ModelState,
    corpus: &Corpus,
    indices: &[usize],
    opts: EvalOptions,
) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(DcucError::InvalidInput("evaluation split is empty".into()));
    }
    let mut enhanced_scores = Vec::with_capacity(indices.len());
    let mut noisy_scores = Vec::with_capacity(indices.len());
    for &idx in indices {
        let scene = corpus.scene(idx)?;
        let est = if opts.zero_visual {
            let eopts = EnhanceOptions {
                mode: Mode::Eval,
                zero_visual: true,
            };
            enhance_fwd(&scene.noisy, &scene.video, model, &eopts, &mut None)?.0
        } else {
            enhance(&scene.noisy, &scene.video, model)?
        };
        enhanced_scores.push(si_snr(&est, &scene.clean, SiSnrVariant::ScaleInvariant)?);
        noisy_scores.push(si_snr(
            &scene.noisy,
            &scene.clean,
            SiSnrVariant::ScaleInvariant,
        )?);
    }
    let m = mean(&enhanced_scores);
    let var = enhanced_scores.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        / enhanced_scores.len() as f64;
    Ok(EvalResult {
        si_snr_db_mean: m,
        si_snr_db_std: var.sqrt(),
        si_snr_improvement_db: m - mean(&noisy_scores),
        num_utterances: indices.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000)
    }

    #[test]
    fn identical_signals_hit_the_cap() {
        let t = wave(vec![0.5, -0.25, 0.125, 0.8]);
        for variant in [SiSnrVariant::ScaleInvariant, SiSnrVariant::PlainSnr] {
            assert_eq!(si_snr(&t, &t, variant).unwrap(), 60.0);
        }
    }

    #[test]
    fn orthogonal_noise_gives_exact_power_ratio() {
        // s and n zero-mean and orthogonal with power ratio 100 -> 20 dB
        let n = 1000;
        let s: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 8.0).sin())
            .collect();
        let p_s: f64 = s.iter().map(|v| v * v).sum();
        // a +-1 alternating signal is zero mean and orthogonal to an
        // 8-periodic sine over full periods
        let mut noise: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let p_n_raw: f64 = noise.iter().map(|v| v * v).sum();
        let dot: f64 = s.iter().zip(&noise).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9, "not orthogonal: {dot}");
        let scale = (p_s / (100.0 * p_n_raw)).sqrt();
        for v in noise.iter_mut() {
            *v *= scale;
        }
        let est: Vec<f64> = s.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let got = si_snr(&wave(est), &wave(s), SiSnrVariant::ScaleInvariant).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn scale_invariance_holds_to_1e9_db() {
        let (t, _) = crate::data::synth_clean(3, 1.0, 16_000).unwrap();
        let est: Vec<f64> = t
            .samples
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.01 * ((i as f64 * 0.37).sin()))
            .collect();
        let base = si_snr(&wave(est.clone()), &t, SiSnrVariant::ScaleInvariant).unwrap();
        for alpha in [0.1, 1.0, 3.7] {
            let scaled: Vec<f64> = est.iter().map(|v| alpha * v).collect();
            let got = si_snr(&wave(scaled), &t, SiSnrVariant::ScaleInvariant).unwrap();
            assert!((got - base).abs() < 1e-9, "alpha {alpha}: {got} vs {base}");
        }
    }

    #[test]
    fn dc_offset_does_not_change_scale_invariant_value() {
        let (t, _) = crate::data::synth_clean(5, 1.0, 16_000).unwrap();
        let est: Vec<f64> = t.samples.iter().map(|v| 0.9 * v + 0.005).collect();
        let base = si_snr(&wave(est.clone()), &t, SiSnrVariant::ScaleInvariant).unwrap();
        let shifted: Vec<f64> = est.iter().map(|v| v + 0.25).collect();
        let got = si_snr(&wave(shifted), &t, SiSnrVariant::ScaleInvariant).unwrap();
        assert!((got - base).abs() < 1e-9);
    }

    #[test]
    fn plain_variant_matches_literal_formula() {
        let t = wave(vec![0.4, -0.2, 0.6, -0.5]);
        let e = wave(vec![0.3, -0.1, 0.7, -0.45]);
        let r: Vec<f64> = e.samples.iter().zip(&t.samples).map(|(a, b)| a - b).collect();
        let want = 10.0
            * (t.samples.iter().map(|v| v * v).sum::<f64>()
                / r.iter().map(|v| v * v).sum::<f64>())
            .log10();
        let got = si_snr(&e, &t, SiSnrVariant::PlainSnr).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_target_is_rejected() {
        let z = wave(vec![0.0; 8]);
        let e = wave(vec![0.1; 8]);
        assert!(matches!(
            si_snr(&e, &z, SiSnrVariant::ScaleInvariant),
            Err(DcucError::InvalidInput(_))
        ));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let t = wave(vec![0.1; 8]);
        let e = wave(vec![0.1; 9]);
        assert!(matches!(
            si_snr(&e, &t, SiSnrVariant::ScaleInvariant),
            Err(DcucError::Shape(_))
        ));
    }

    #[test]
    fn loss_on_identical_pair_is_large_negative_finite() {
        let t = vec![0.5, -0.25, 0.125, 0.8];
        let loss = si_snr_loss(&[&t], &[&t], SiSnrVariant::ScaleInvariant).unwrap();
        assert!(loss.is_finite());
        assert!(loss < -40.0, "loss {loss}");
    }

    #[test]
    fn negated_estimate_matches_scalar_oracle() {
        // estimate = -target: projection alpha = -1, s = -t0, r = 0
        let (t, _) = crate::data::synth_clean(9, 1.0, 16_000).unwrap();
        let neg: Vec<f64> = t.samples.iter().map(|v| -v).collect();
        let got = si_snr(&wave(neg), &t, SiSnrVariant::ScaleInvariant).unwrap();
        assert_eq!(got, 60.0); // zero error vector hits the cap
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let t: Vec<f64> = (0..64).map(|_| rng.random_range(-0.5..0.5)).collect();
        let e: Vec<f64> = (0..64).map(|_| rng.random_range(-0.5..0.5)).collect();
        for variant in [SiSnrVariant::ScaleInvariant, SiSnrVariant::PlainSnr] {
            let (_, grads) = si_snr_loss_backward(&[&e], &[&t], variant).unwrap();
            let eps = 1e-6;
            let mut work = e.clone();
            for k in (0..64).step_by(7) {
                let orig = work[k];
                work[k] = orig + eps;
                let plus = si_snr_loss(&[&work], &[&t], variant).unwrap();
                work[k] = orig - eps;
                let minus = si_snr_loss(&[&work], &[&t], variant).unwrap();
                work[k] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let rel = (grads[0][k] - numeric).abs()
                    / grads[0][k].abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-5, "variant {variant:?} coord {k}: rel {rel}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        use crate::data::{build_corpus, CorpusSpec};
        use crate::model::ModelConfig;
        let corpus = build_corpus(CorpusSpec {
            num_scenes: 2,
            duration_s: 1.0,
            frame_size: (8, 8),
            ..Default::default()
        })
        .unwrap();
        let mut cfg = ModelConfig::micro();
        cfg.stft = crate::dsp_stft::StftConfig::default();
        let model = ModelState::init(cfg).unwrap();
        let mut before = model.clone();
        let tcfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (after, history) = train(model, &corpus, &tcfg).unwrap();
        assert!(!history.steps.is_empty());
        // trainable parameters must be untouched (running stats may move)
        let mut after_m = after;
        let mut av = Vec::new();
        let mut bv = Vec::new();
        after_m.visit_trainable_mut(&mut |_, t| av.push(t.clone()));
        before.visit_trainable_mut(&mut |_, t| bv.push(t.clone()));
        assert_eq!(av.len(), bv.len());
        for (a, b) in av.iter().zip(&bv) {
            assert_eq!(a.data(), b.data());
        }
    }
}
