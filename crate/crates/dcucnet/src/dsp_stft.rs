//! STFT analysis and inverse-STFT synthesis.
//!
//! Analysis reflect-pads `win_length/2` samples at both ends, frames with the
//! configured hop, windows, and takes the one-sided DFT (`fft_length/2 + 1`
//! bins). Synthesis applies the same window to each inverse transform,
//! overlap-adds, divides by the window-compensation denominator, and trims
//! the padding, which makes the roundtrip exact over the full input length.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{DcucError, Result};
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    SqrtHann,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_length: usize,
    pub window_kind: WindowKind,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_length: 400,
            hop_length: 160,
            fft_length: 512,
            window_kind: WindowKind::SqrtHann,
            sample_rate: 16_000,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_length <= self.win_length && self.win_length <= self.fft_length) {
            return Err(DcucError::ConfigMismatch(format!(
                "need hop <= win <= fft, got hop={} win={} fft={}",
                self.hop_length, self.win_length, self.fft_length
            )));
        }
        if self.hop_length == 0 {
            return Err(DcucError::ConfigMismatch("hop_length must be > 0".into()));
        }
        if !self.fft_length.is_power_of_two() {
            return Err(DcucError::ConfigMismatch(format!(
                "fft_length {} is not a power of two",
                self.fft_length
            )));
        }
        if self.sample_rate == 0 {
            return Err(DcucError::ConfigMismatch("sample_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Reflect padding applied at each end before framing.
    pub fn pad(&self) -> usize {
        self.win_length / 2
    }

    /// Number of analysis frames for an input of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.win_length) / self.hop_length + 1
    }

    /// The analysis/synthesis window (periodic form).
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_length;
        (0..n)
            .map(|i| {
                let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
                match self.window_kind {
                    WindowKind::Hann => hann,
                    WindowKind::SqrtHann => hann.sqrt(),
                }
            })
            .collect()
    }
}

/// Mono audio samples (nominal range [-1, 1]) at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(DcucError::InvalidInput("sample_rate must be > 0".into()));
        }
        if !self.samples.iter().all(|s| s.is_finite()) {
            return Err(DcucError::InvalidInput(
                "waveform contains non-finite samples".into(),
            ));
        }
        Ok(())
    }
}

/// One-sided complex spectrogram, shape [freq_bins, frames].
///
/// `num_samples` records the analysis input length so synthesis can restore
/// it exactly (frame count alone only determines the length up to a hop).
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: ComplexTensor,
    pub config: StftConfig,
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.shape().len() != 2 {
            return Err(DcucError::Shape(format!(
                "spectrogram must be 2-D, got {:?}",
                self.data.shape()
            )));
        }
        if self.freq_bins() != self.config.freq_bins() {
            return Err(DcucError::Shape(format!(
                "spectrogram has {} bins, config demands {}",
                self.freq_bins(),
                self.config.freq_bins()
            )));
        }
        if !self.data.is_finite() {
            return Err(DcucError::InvalidInput(
                "spectrogram contains non-finite entries".into(),
            ));
        }
        Ok(())
    }
}

/// Index into a signal of length `len` with reflection at both boundaries
/// (mirror about the edge samples, bouncing as often as needed).
fn reflect_index(i: isize, len: usize) -> usize {
    debug_assert!(len > 0);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

fn forward_fft(cfg: &StftConfig) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(cfg.fft_length)
}

fn inverse_fft(cfg: &StftConfig) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(cfg.fft_length)
}

/// Windowed one-sided DFT of every frame of `x` under the reflect-padding
/// policy.
pub fn conv_stft(x: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    x.validate()?;
    if x.is_empty() {
        return Err(DcucError::InvalidInput("empty input waveform".into()));
    }
    if x.sample_rate != cfg.sample_rate {
        return Err(DcucError::ConfigMismatch(format!(
            "waveform sample rate {} != config sample rate {}",
            x.sample_rate, cfg.sample_rate
        )));
    }

    let len = x.len();
    let pad = cfg.pad();
    let win = cfg.window();
    let n_fft = cfg.fft_length;
    let bins = cfg.freq_bins();
    let n_frames = cfg.num_frames(len);

    let fft = forward_fft(cfg);
    let mut re = Tensor::zeros(&[bins, n_frames]);
    let mut im = Tensor::zeros(&[bins, n_frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    for f in 0..n_frames {
        let start = f as isize * cfg.hop_length as isize - pad as isize;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = if n < cfg.win_length {
                let src = reflect_index(start + n as isize, len);
                Complex::new(x.samples[src] * win[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..bins {
            re.data_mut()[k * n_frames + f] = buf[k].re;
            im.data_mut()[k * n_frames + f] = buf[k].im;
        }
    }

    Ok(Spectrogram {
        data: ComplexTensor::new(re, im)?,
        config: cfg.clone(),
        num_samples: len,
    })
}

/// Overlap-add denominator over the padded length: the product of analysis
/// and synthesis windows, shifted by hop for each frame.
fn ola_denominator(cfg: &StftConfig, n_frames: usize, padded_len: usize) -> Vec<f64> {
    let win = cfg.window();
    let mut denom = vec![0.0; padded_len];
    for f in 0..n_frames {
        let start = f * cfg.hop_length;
        for (n, &w) in win.iter().enumerate() {
            if start + n < padded_len {
                denom[start + n] += w * w;
            }
        }
    }
    denom
}

const DENOM_FLOOR: f64 = 1e-10;

/// Inverse STFT by windowed overlap-add with denominator compensation.
pub fn conv_istft(s: &Spectrogram) -> Result<Waveform> {
    s.validate()?;
    let cfg = &s.config;
    let len = s.num_samples;
    let pad = cfg.pad();
    let n_fft = cfg.fft_length;
    let bins = cfg.freq_bins();
    let n_frames = s.frames();
    let expected_frames = cfg.num_frames(len);
    if n_frames != expected_frames {
        return Err(DcucError::Shape(format!(
            "spectrogram has {} frames but {} samples imply {}",
            n_frames, len, expected_frames
        )));
    }

    let padded_len = len + 2 * pad;
    let win = cfg.window();
    let ifft = inverse_fft(cfg);
    let denom = ola_denominator(cfg, n_frames, padded_len);

    let mut acc = vec![0.0; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let re = s.data.re.data();
    let im = s.data.im.data();

    for f in 0..n_frames {
        // Rebuild the full spectrum by conjugate symmetry; DC and Nyquist
        // imaginary parts cannot influence a real signal and are dropped.
        for k in 0..bins {
            let (r, i) = (re[k * n_frames + f], im[k * n_frames + f]);
            if k == 0 || k == n_fft / 2 {
                buf[k] = Complex::new(r, 0.0);
            } else {
                buf[k] = Complex::new(r, i);
                buf[n_fft - k] = Complex::new(r, -i);
            }
        }
        ifft.process(&mut buf);
        let start = f * cfg.hop_length;
        let scale = 1.0 / n_fft as f64;
        for (n, &w) in win.iter().enumerate() {
            if start + n < padded_len {
                acc[start + n] += buf[n].re * scale * w;
            }
        }
    }

    let mut out = vec![0.0; len];
    for n in 0..len {
        let d = denom[pad + n];
        if d <= DENOM_FLOOR {
            return Err(DcucError::Synthesis(format!(
                "overlap-add denominator vanishes at sample {n}; window/hop pair \
                 does not cover the signal"
            )));
        }
        out[n] = acc[pad + n] / d;
    }

    Ok(Waveform::new(out, cfg.sample_rate))
}

/// Gradient of `conv_istft` with respect to its spectrogram input: the
/// adjoint of the linear synthesis map. `grad_out` has the synthesized
/// waveform's length; the result matches the spectrogram shape.
pub fn conv_istft_backward(s: &Spectrogram, grad_out: &[f64]) -> Result<ComplexTensor> {
    let cfg = &s.config;
    let len = s.num_samples;
    if grad_out.len() != len {
        return Err(DcucError::Shape(format!(
            "gradient length {} != waveform length {}",
            grad_out.len(),
            len
        )));
    }
    let pad = cfg.pad();
    let n_fft = cfg.fft_length;
    let bins = cfg.freq_bins();
    let n_frames = s.frames();
    let padded_len = len + 2 * pad;

    let win = cfg.window();
    let fft = forward_fft(cfg);
    let denom = ola_denominator(cfg, n_frames, padded_len);

    // Adjoint of trim + divide: embed into the padded range, scale by 1/denom.
    let mut gpad = vec![0.0; padded_len];
    for n in 0..len {
        let d = denom[pad + n];
        if d > DENOM_FLOOR {
            gpad[pad + n] = grad_out[n] / d;
        }
    }

    let mut gre = Tensor::zeros(&[bins, n_frames]);
    let mut gim = Tensor::zeros(&[bins, n_frames]);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;

    for f in 0..n_frames {
        let start = f * cfg.hop_length;
        // Adjoint of windowed overlap-add: gather the frame, window it.
        for (n, b) in buf.iter_mut().enumerate() {
            *b = if n < cfg.win_length && start + n < padded_len {
                Complex::new(gpad[start + n] * win[n] * scale, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        // Adjoint of the scaled inverse DFT is the forward DFT (times 1/N,
        // folded into `scale`); adjoint of conjugate symmetrization folds the
        // mirrored bins back.
        fft.process(&mut buf);
        for k in 0..bins {
            let g = if k == 0 || k == n_fft / 2 {
                Complex::new(buf[k].re, 0.0)
            } else {
                buf[k] + buf[n_fft - k].conj()
            };
            gre.data_mut()[k * n_frames + f] = g.re;
            gim.data_mut()[k * n_frames + f] = g.im;
        }
    }

    ComplexTensor::new(gre, gim)
}
