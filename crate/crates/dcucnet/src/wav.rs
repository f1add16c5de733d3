//! Minimal RIFF/WAVE reader and writer: PCM 16-bit little-endian, mono.
//!
//! The reader walks the chunk list, insists on PCM16 mono, and surfaces any
//! other encoding with a descriptive error. The writer clamps to [-1, 1]
//! before quantizing.

use std::fs;
use std::path::Path;

use crate::dsp_stft::Waveform;
use crate::error::{DcucError, Result};

fn rd_u16(b: &[u8], off: usize) -> Result<u16> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| DcucError::Format("wav: truncated file".into()))
}

fn rd_u32(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| DcucError::Format("wav: truncated file".into()))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| DcucError::io(path, e))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DcucError::Format("wav: not a RIFF/WAVE file".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = rd_u32(bytes, off + 4)? as usize;
        let body_off = off + 8;
        if body_off + size > bytes.len() {
            return Err(DcucError::Format("wav: chunk overruns file".into()));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(DcucError::Format("wav: fmt chunk too small".into()));
                }
                fmt = Some((
                    rd_u16(bytes, body_off)?,
                    rd_u16(bytes, body_off + 2)?,
                    rd_u32(bytes, body_off + 4)?,
                    rd_u16(bytes, body_off + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body_off..body_off + size]),
            _ => {}
        }
        // chunks are word-aligned
        off = body_off + size + (size & 1);
    }

    let (tag, channels, rate, bits) =
        fmt.ok_or_else(|| DcucError::Format("wav: missing fmt chunk".into()))?;
    if tag != 1 {
        return Err(DcucError::Format(format!(
            "wav: unsupported format tag {tag}, only PCM (1) is supported"
        )));
    }
    if bits != 16 {
        return Err(DcucError::Format(format!(
            "wav: unsupported bit depth {bits}, only 16-bit PCM is supported"
        )));
    }
    if channels != 1 {
        return Err(DcucError::Format(format!(
            "wav: {channels} channels, only mono is supported"
        )));
    }
    let data = data.ok_or_else(|| DcucError::Format("wav: missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(DcucError::Format("wav: odd data chunk size".into()));
    }

    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
        .collect();
    Ok(Waveform::new(samples, rate))
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let n = w.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    fs::write(path, encode_wav(w)).map_err(|e| DcucError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_quantized_samples() {
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.0, -1.0, 0.123], 16_000);
        let bytes = encode_wav(&w);
        let back = decode_wav(&bytes).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.len(), w.len());
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-12);
        }
    }

    #[test]
    fn writer_clamps_out_of_range() {
        let w = Waveform::new(vec![2.0, -3.0], 16_000);
        let back = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back.samples[0], 1.0);
        assert_eq!(back.samples[1], -1.0);
    }

    #[test]
    fn rejects_non_pcm() {
        let w = Waveform::new(vec![0.1; 4], 16_000);
        let mut bytes = encode_wav(&w);
        bytes[20] = 3; // IEEE float tag
        let err = decode_wav(&bytes).unwrap_err();
        assert!(err.to_string().contains("format tag"));
    }

    #[test]
    fn rejects_stereo() {
        let w = Waveform::new(vec![0.1; 4], 16_000);
        let mut bytes = encode_wav(&w);
        bytes[22] = 2;
        let err = decode_wav(&bytes).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_wav(b"not a wav").is_err());
    }
}
