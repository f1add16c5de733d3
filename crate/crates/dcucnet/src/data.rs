//! Synthetic audio-visual toy corpus: harmonic "speech" with a smooth
//! envelope and silent gaps, three interference kinds (white, pink,
//! competing speech), SNR-controlled mixing, and a lip-like video stream
//! whose aperture tracks the clean-speech envelope.
//!
//! Everything is a pure function of (spec, seed): the same spec generates
//! bit-identical scenes on every run. Scenes can be cached to disk in the
//! WAV + DVID formats with a flat key=value metadata file per scene.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp_stft::Waveform;
use crate::error::{DcucError, Result};
use crate::visual_frontend::{read_dvid, write_dvid, VideoFrames};
use crate::wav::{read_wav, write_wav};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    CompetingSpeech,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::CompetingSpeech => "competing_speech",
        };
        f.write_str(s)
    }
}

impl NoiseKind {
    fn parse(s: &str) -> Result<NoiseKind> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "competing_speech" => Ok(NoiseKind::CompetingSpeech),
            other => Err(DcucError::Format(format!("unknown noise kind {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyScene {
    pub clean: Waveform,
    /// Interference after SNR gain and joint rescale: noisy = clean + noise.
    pub noise: Waveform,
    pub noisy: Waveform,
    pub video: VideoFrames,
    pub snr_db: f64,
    pub seed: u64,
    pub noise_kind: NoiseKind,
    pub noise_gain: f64,
    pub joint_rescale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub num_scenes: usize,
    pub duration_s: f64,
    pub snr_range_db: (f64, f64),
    pub sample_rate: u32,
    pub fps: f64,
    pub frame_size: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_scenes: 16,
            duration_s: 2.0,
            snr_range_db: (0.0, 10.0),
            sample_rate: 16_000,
            fps: 25.0,
            frame_size: (32, 32),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(DcucError::InvalidInput(format!(
                "snr range lo {} > hi {}",
                self.snr_range_db.0, self.snr_range_db.1
            )));
        }
        if self.duration_s <= 0.0 || self.sample_rate == 0 || self.fps <= 0.0 {
            return Err(DcucError::InvalidInput(
                "duration, sample rate, and fps must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero.
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Clean-speech and video synthesis
// ---------------------------------------------------------------------------

/// Toy "speech": 3-5 harmonics of a random fundamental, amplitude-modulated
/// by a smooth envelope with silent gaps. The waveform is peak-normalized to
/// exactly 0.5; the returned envelope is normalized to max 1 and drives the
/// video aperture.
pub fn synth_clean(seed: u64, duration_s: f64, sample_rate: u32) -> Result<(Waveform, Vec<f64>)> {
    synth_harmonic(seed, duration_s, sample_rate, true)
}

/// Harmonic source with an always-on envelope; used for the competing
/// talker so that target silence is audible only through the video.
fn synth_harmonic(
    seed: u64,
    duration_s: f64,
    sample_rate: u32,
    with_gaps: bool,
) -> Result<(Waveform, Vec<f64>)> {
    if duration_s < 0.5 {
        return Err(DcucError::InvalidInput(format!(
            "clean synthesis needs at least 0.5 s, got {duration_s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;

    let f0: f64 = rng.random_range(100.0..300.0);
    let harmonics: usize = rng.random_range(3..=5);
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| rng.random_range(0.5..1.0) / k as f64)
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    // slow envelope: two incommensurate modulators, then 1-2 silent gaps
    let fe1: f64 = rng.random_range(0.8..2.0);
    let fe2: f64 = rng.random_range(2.3..4.1);
    let pe1: f64 = rng.random_range(0.0..2.0 * PI);
    let pe2: f64 = rng.random_range(0.0..2.0 * PI);
    let mut env: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let a = 0.55 + 0.45 * (2.0 * PI * fe1 * t + pe1).sin();
            let b = 0.75 + 0.25 * (2.0 * PI * fe2 * t + pe2).sin();
            a * b
        })
        .collect();

    let num_gaps = if with_gaps {
        if duration_s >= 1.5 {
            rng.random_range(2..=3usize)
        } else {
            rng.random_range(1..=2usize)
        }
    } else {
        0
    };
    let edge = 0.03 * sr; // raised-cosine gap edges
    for _ in 0..num_gaps {
        let gap_len = rng.random_range(0.12..0.22) * duration_s * sr;
        let start = rng.random_range(0.05..(duration_s - 0.4).max(0.06)) * sr;
        let (g0, g1) = (start, start + gap_len);
        for (i, e) in env.iter_mut().enumerate() {
            let t = i as f64;
            let gate = if t < g0 - edge || t > g1 + edge {
                1.0
            } else if t < g0 {
                0.5 - 0.5 * ((g0 - t) / edge * PI).cos()
            } else if t > g1 {
                0.5 - 0.5 * ((t - g1) / edge * PI).cos()
            } else {
                0.0
            };
            *e *= gate;
        }
    }

    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let harm: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(k, (a, p))| a * (2.0 * PI * (k + 1) as f64 * f0 * t + p).sin())
                .sum();
            env[i] * harm
        })
        .collect();

    let peak = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak <= 0.0 {
        return Err(DcucError::InvalidInput(
            "degenerate envelope produced a silent signal".into(),
        ));
    }
    let scale = 0.5 / peak;
    for v in samples.iter_mut() {
        *v *= scale;
    }
    let env_peak = env.iter().fold(0.0_f64, |m, v| m.max(*v));
    for e in env.iter_mut() {
        *e /= env_peak;
    }

    Ok((Waveform::new(samples, sample_rate), env))
}

/// Render a centered dark ellipse whose vertical aperture follows the
/// envelope sampled at each frame midpoint, on a seed-textured background
/// shared by all frames.
pub fn synth_video(
    envelope: &[f64],
    sample_rate: u32,
    fps: f64,
    frame_size: (usize, usize),
    seed: u64,
) -> Result<VideoFrames> {
    if envelope.is_empty() || fps <= 0.0 {
        return Err(DcucError::InvalidInput(
            "video synthesis needs a non-empty envelope and positive fps".into(),
        ));
    }
    let (h, w) = frame_size;
    let sr = sample_rate as f64;
    let num_frames = ((envelope.len() as f64 / sr) * fps).round().max(1.0) as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: Vec<u8> = (0..h * w).map(|_| rng.random_range(200..=235u8)).collect();

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let semi_x = w as f64 * 0.3;
    let max_semi_y = h as f64 * 0.3;

    let mut frames = Vec::with_capacity(num_frames * h * w);
    for f in 0..num_frames {
        let mid = (((f as f64 + 0.5) / fps) * sr).floor() as usize;
        let env = envelope[mid.min(envelope.len() - 1)].clamp(0.0, 1.0);
        let semi_y = 1.0 + env * (max_semi_y - 1.0);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / semi_y;
                let dx = (x as f64 - cx) / semi_x;
                frames.push(if dy * dy + dx * dx <= 1.0 {
                    30
                } else {
                    background[y * w + x]
                });
            }
        }
    }
    VideoFrames::new(frames, num_frames, h, w, fps)
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MixInfo {
    pub noise_gain: f64,
    pub joint_rescale: f64,
}

/// clean + g*noise with g set so the clean-to-scaled-noise power ratio is
/// `snr_db`; a positive-infinity SNR means zero noise gain. If the mixture
/// peaks above 1 everything is rescaled jointly (SNR preserved) and the
/// factor reported.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, MixInfo)> {
    if clean.len() != noise.len() {
        return Err(DcucError::Shape(format!(
            "clean has {} samples, noise has {}",
            clean.len(),
            noise.len()
        )));
    }
    let p_clean: f64 = clean.samples.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    let p_noise: f64 = noise.samples.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    if p_clean <= 0.0 {
        return Err(DcucError::InvalidInput("clean signal has zero power".into()));
    }

    let gain = if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        if p_noise <= 0.0 {
            return Err(DcucError::InvalidInput("noise signal has zero power".into()));
        }
        (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
    };

    let mut mix: Vec<f64> = clean
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(c, n)| c + gain * n)
        .collect();
    let peak = mix.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let rescale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if rescale != 1.0 {
        for v in mix.iter_mut() {
            *v *= rescale;
        }
    }
    Ok((
        Waveform::new(mix, clean.sample_rate),
        MixInfo {
            noise_gain: gain,
            joint_rescale: rescale,
        },
    ))
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DcucError::InvalidInput(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
enum CorpusSource {
    Synthetic(CorpusSpec),
    Disk(PathBuf),
}

/// Scene access by index with deterministic 80/10/10 splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    source: CorpusSource,
    num_scenes: usize,
}

/// Deterministic scene list for the spec; scenes are generated on demand.
pub fn build_corpus(spec: CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    Ok(Corpus {
        num_scenes: spec.num_scenes,
        source: CorpusSource::Synthetic(spec),
    })
}

fn scene_dir(root: &Path, idx: usize) -> PathBuf {
    root.join("scenes").join(format!("{idx:04}"))
}

impl Corpus {
    /// Open a corpus directory previously written by `save`.
    pub fn open(root: &Path) -> Result<Corpus> {
        let mut n = 0;
        while scene_dir(root, n).is_dir() {
            n += 1;
        }
        if n == 0 {
            return Err(DcucError::InvalidInput(format!(
                "{} contains no scenes/<idx> directories",
                root.display()
            )));
        }
        Ok(Corpus {
            source: CorpusSource::Disk(root.to_path_buf()),
            num_scenes: n,
        })
    }

    pub fn len(&self) -> usize {
        self.num_scenes
    }

    pub fn is_empty(&self) -> bool {
        self.num_scenes == 0
    }

    pub fn scene(&self, idx: usize) -> Result<ToyScene> {
        if idx >= self.num_scenes {
            return Err(DcucError::InvalidInput(format!(
                "scene index {idx} out of range ({} scenes)",
                self.num_scenes
            )));
        }
        match &self.source {
            CorpusSource::Synthetic(spec) => generate_scene(spec, idx),
            CorpusSource::Disk(root) => load_scene(&scene_dir(root, idx)),
        }
    }

    /// 80/10/10 split by scene index.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let n = self.num_scenes;
        let train = n * 8 / 10;
        let val = n / 10;
        match split {
            Split::Train => (0..train).collect(),
            Split::Val => (train..train + val).collect(),
            Split::Test => (train + val..n).collect(),
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for idx in 0..self.num_scenes {
            let scene = self.scene(idx)?;
            let dir = scene_dir(root, idx);
            fs::create_dir_all(&dir).map_err(|e| DcucError::io(&dir, e))?;
            write_wav(&dir.join("clean.wav"), &scene.clean)?;
            write_wav(&dir.join("noise.wav"), &scene.noise)?;
            write_wav(&dir.join("noisy.wav"), &scene.noisy)?;
            write_dvid(&dir.join("video.dvid"), &scene.video)?;
            let meta = format!(
                "snr_db={}\nseed={}\nnoise_kind={}\nnoise_gain={}\njoint_rescale={}\n\
                 sample_rate={}\nfps={}\n",
                scene.snr_db,
                scene.seed,
                scene.noise_kind,
                scene.noise_gain,
                scene.joint_rescale,
                scene.clean.sample_rate,
                scene.video.fps,
            );
            let meta_path = dir.join("meta.txt");
            fs::write(&meta_path, meta).map_err(|e| DcucError::io(&meta_path, e))?;
        }
        Ok(())
    }
}

fn noise_for(kind: NoiseKind, n: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        NoiseKind::White => (0..n).map(|_| 0.1 * gaussian(&mut rng)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter over white noise.
            let mut b = [0.0_f64; 7];
            (0..n)
                .map(|_| {
                    let w = gaussian(&mut rng);
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let out = b.iter().sum::<f64>() + w * 0.5362;
                    b[6] = w * 0.115926;
                    0.02 * out
                })
                .collect()
        }
        NoiseKind::CompetingSpeech => {
            let dur = n as f64 / sample_rate as f64;
            let (w, _) = synth_harmonic(splitmix64(seed ^ 0xC0FFEE), dur, sample_rate, false)?;
            let mut s = w.samples;
            s.truncate(n);
            while s.len() < n {
                s.push(0.0);
            }
            s
        }
    };
    Ok(Waveform::new(samples, sample_rate))
}

fn generate_scene(spec: &CorpusSpec, idx: usize) -> Result<ToyScene> {
    let scene_seed = splitmix64(spec.seed ^ splitmix64(idx as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let snr_db = if spec.snr_range_db.0 == spec.snr_range_db.1 {
        spec.snr_range_db.0
    } else {
        rng.random_range(spec.snr_range_db.0..spec.snr_range_db.1)
    };
    let noise_kind = match idx % 4 {
        0 => NoiseKind::White,
        1 => NoiseKind::Pink,
        _ => NoiseKind::CompetingSpeech,
    };

    let (clean_raw, env) = synth_clean(splitmix64(scene_seed ^ 1), spec.duration_s, spec.sample_rate)?;
    let noise_raw = noise_for(
        noise_kind,
        clean_raw.len(),
        spec.sample_rate,
        splitmix64(scene_seed ^ 2),
    )?;
    let video = synth_video(
        &env,
        spec.sample_rate,
        spec.fps,
        spec.frame_size,
        splitmix64(scene_seed ^ 3),
    )?;

    let (noisy, info) = mix_at_snr(&clean_raw, &noise_raw, snr_db)?;
    // Store the components that actually sum to the mixture so the scene
    // invariant noisy = clean + noise holds exactly.
    let clean = Waveform::new(
        clean_raw.samples.iter().map(|v| v * info.joint_rescale).collect(),
        spec.sample_rate,
    );
    let noise = Waveform::new(
        noisy
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(m, c)| m - c)
            .collect(),
        spec.sample_rate,
    );

    Ok(ToyScene {
        clean,
        noise,
        noisy,
        video,
        snr_db,
        seed: scene_seed,
        noise_kind,
        noise_gain: info.noise_gain,
        joint_rescale: info.joint_rescale,
    })
}

fn parse_meta(text: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DcucError::Format(format!("meta line without '=': {line}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn load_scene(dir: &Path) -> Result<ToyScene> {
    let clean = read_wav(&dir.join("clean.wav"))?;
    let noise = read_wav(&dir.join("noise.wav"))?;
    let noisy = read_wav(&dir.join("noisy.wav"))?;
    let video = read_dvid(&dir.join("video.dvid"))?;
    let meta_path = dir.join("meta.txt");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| DcucError::io(&meta_path, e))?;
    let meta = parse_meta(&meta_text)?;
    let get = |k: &str| -> Result<&String> {
        meta.get(k)
            .ok_or_else(|| DcucError::Format(format!("{}: missing meta key {k}", dir.display())))
    };
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?
            .parse::<f64>()
            .map_err(|_| DcucError::Format(format!("meta key {k} is not a number")))
    };
    Ok(ToyScene {
        clean,
        noise,
        noisy,
        video,
        snr_db: parse_f("snr_db")?,
        seed: get("seed")?
            .parse::<u64>()
            .map_err(|_| DcucError::Format("meta key seed is not an integer".into()))?,
        noise_kind: NoiseKind::parse(get("noise_kind")?)?,
        noise_gain: parse_f("noise_gain")?,
        joint_rescale: parse_f("joint_rescale")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_clean_is_deterministic_and_normalized() {
        let (a, env_a) = synth_clean(42, 1.0, 16_000).unwrap();
        let (b, env_b) = synth_clean(42, 1.0, 16_000).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(env_a, env_b);
        let peak = a.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert_eq!(peak, 0.5);
        let (c, _) = synth_clean(43, 1.0, 16_000).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn synth_clean_rejects_short_durations() {
        assert!(synth_clean(1, 0.2, 16_000).is_err());
    }

    #[test]
    fn envelope_tracks_waveform_amplitude() {
        // windowed RMS of the waveform against the envelope, voiced windows
        let (w, env) = synth_clean(7, 2.0, 16_000).unwrap();
        let win = 160;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for start in (0..w.len() - win).step_by(win) {
            let e = env[start + win / 2];
            if e > 0.1 {
                let rms = (w.samples[start..start + win]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    / win as f64)
                    .sqrt();
                xs.push(e);
                ys.push(rms);
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let r = cov / (vx * vy).sqrt();
        assert!(r >= 0.8, "pearson r = {r}");
    }

    #[test]
    fn video_zero_envelope_gives_identical_frames() {
        let env = vec![0.0; 16_000];
        let v = synth_video(&env, 16_000, 25.0, (32, 32), 5).unwrap();
        assert_eq!(v.num_frames, 25);
        for f in 1..v.num_frames {
            assert_eq!(v.frame(0), v.frame(f));
        }
    }

    #[test]
    fn video_aperture_grows_with_envelope() {
        let n = 16_000;
        let env: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let v = synth_video(&env, 16_000, 25.0, (32, 32), 6).unwrap();
        let dark = |f: usize| v.frame(f).iter().filter(|&&p| p == 30).count();
        for f in 1..v.num_frames {
            assert!(dark(f) >= dark(f - 1), "aperture shrank at frame {f}");
        }
        assert!(dark(v.num_frames - 1) > dark(0));
    }

    #[test]
    fn video_is_bit_deterministic() {
        let env: Vec<f64> = (0..8000).map(|i| (i as f64 / 800.0).sin().abs()).collect();
        let a = synth_video(&env, 16_000, 25.0, (32, 32), 9).unwrap();
        let b = synth_video(&env, 16_000, 25.0, (32, 32), 9).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn mix_at_zero_db_equalizes_power() {
        let (clean, _) = synth_clean(11, 1.0, 16_000).unwrap();
        let noise = noise_for(NoiseKind::White, clean.len(), 16_000, 12).unwrap();
        let (_, info) = mix_at_snr(&clean, &noise, 0.0).unwrap();
        let p_c: f64 = clean.samples.iter().map(|v| v * v).sum();
        let p_n: f64 = noise
            .samples
            .iter()
            .map(|v| info.noise_gain * v * info.noise_gain * v)
            .sum();
        assert!((p_c / p_n - 1.0).abs() < 1e-9, "power ratio {}", p_c / p_n);
    }

    #[test]
    fn mix_at_infinite_snr_returns_clean() {
        let (clean, _) = synth_clean(13, 1.0, 16_000).unwrap();
        let noise = noise_for(NoiseKind::Pink, clean.len(), 16_000, 14).unwrap();
        let (mix, info) = mix_at_snr(&clean, &noise, f64::INFINITY).unwrap();
        assert_eq!(mix.samples, clean.samples);
        assert_eq!(info.noise_gain, 0.0);
    }

    #[test]
    fn mix_rejects_zero_power_inputs() {
        let zero = Waveform::new(vec![0.0; 100], 16_000);
        let (clean, _) = synth_clean(15, 1.0, 16_000).unwrap();
        let hundred = Waveform::new(clean.samples[..100].to_vec(), 16_000);
        assert!(mix_at_snr(&zero, &hundred, 5.0).is_err());
        assert!(mix_at_snr(&hundred, &zero, 5.0).is_err());
    }

    #[test]
    fn measured_snr_matches_request() {
        let spec = CorpusSpec {
            num_scenes: 6,
            ..Default::default()
        };
        let corpus = build_corpus(spec).unwrap();
        for idx in 0..corpus.len() {
            let s = corpus.scene(idx).unwrap();
            let p_c: f64 = s.clean.samples.iter().map(|v| v * v).sum();
            let p_n: f64 = s.noise.samples.iter().map(|v| v * v).sum();
            let measured = 10.0 * (p_c / p_n).log10();
            assert!(
                (measured - s.snr_db).abs() < 1e-6,
                "scene {idx}: measured {measured}, recorded {}",
                s.snr_db
            );
            // additivity is exact by construction
            for ((m, c), n) in s.noisy.samples.iter().zip(&s.clean.samples).zip(&s.noise.samples) {
                assert_eq!(*m, c + n);
            }
            assert!(s.noisy.samples.iter().all(|v| v.abs() <= 1.0));
            let audio_dur = s.clean.duration_s();
            let video_dur = s.video.duration_s();
            assert!((audio_dur - video_dur).abs() <= 1.0 / s.video.fps);
        }
    }

    #[test]
    fn split_sizes_are_80_10_10() {
        let corpus = build_corpus(CorpusSpec {
            num_scenes: 10,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(corpus.split_indices(Split::Train).len(), 8);
        assert_eq!(corpus.split_indices(Split::Val), vec![8]);
        assert_eq!(corpus.split_indices(Split::Test), vec![9]);

        let corpus64 = build_corpus(CorpusSpec {
            num_scenes: 64,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(corpus64.split_indices(Split::Train).len(), 51);
        assert_eq!(corpus64.split_indices(Split::Val).len(), 6);
        assert_eq!(corpus64.split_indices(Split::Test).len(), 7);
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let spec = CorpusSpec {
            num_scenes: 3,
            duration_s: 1.0,
            ..Default::default()
        };
        let a = build_corpus(spec.clone()).unwrap();
        let b = build_corpus(spec).unwrap();
        for idx in 0..a.len() {
            let sa = a.scene(idx).unwrap();
            let sb = b.scene(idx).unwrap();
            assert_eq!(sa.noisy.samples, sb.noisy.samples);
            assert_eq!(sa.video.frames, sb.video.frames);
        }
    }

    #[test]
    fn disk_roundtrip_preserves_scene_structure() {
        let dir = std::env::temp_dir().join(format!("dcucnet_corpus_test_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let spec = CorpusSpec {
            num_scenes: 2,
            duration_s: 1.0,
            ..Default::default()
        };
        let corpus = build_corpus(spec).unwrap();
        corpus.save(&dir).unwrap();
        let disk = Corpus::open(&dir).unwrap();
        assert_eq!(disk.len(), 2);
        let orig = corpus.scene(0).unwrap();
        let loaded = disk.scene(0).unwrap();
        assert_eq!(loaded.video.frames, orig.video.frames);
        assert_eq!(loaded.noise_kind, orig.noise_kind);
        assert!((loaded.snr_db - orig.snr_db).abs() < 1e-12);
        // WAV quantization perturbs samples by at most half an LSB
        for (a, b) in loaded.noisy.samples.iter().zip(&orig.noisy.samples) {
            assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-12);
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
