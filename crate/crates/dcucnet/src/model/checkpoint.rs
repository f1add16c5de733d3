//! "DCUC" checkpoint container.
//!
//! Layout: magic `DCUC`, u32 LE version (1), u32 LE tensor count, then per
//! tensor sorted by name: u16 LE name length, UTF-8 name, u8 rank,
//! rank x u64 LE dims, row-major f32 LE payload; finally a u32 LE CRC32 of
//! every preceding byte. The model configuration rides along as `config.*`
//! tensors so a checkpoint is self-describing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::conformer::ConformerConfig;
use crate::dsp_stft::{StftConfig, WindowKind};
use crate::error::{DcucError, Result};
use crate::tensor::Tensor;
use crate::visual_frontend::{UpsampleMode, VisualConfig};

use super::{ModelConfig, ModelState};

const MAGIC: &[u8; 4] = b"DCUC";
const VERSION: u32 = 1;

fn config_tensors(cfg: &ModelConfig) -> Vec<(String, Tensor)> {
    let scalar = |v: f64| Tensor::from_vec(vec![v], &[]).unwrap();
    let vec1 = |v: Vec<f64>| {
        let n = v.len();
        Tensor::from_vec(v, &[n]).unwrap()
    };
    let seed_limbs: Vec<f64> = (0..4)
        .map(|k| ((cfg.seed >> (16 * k)) & 0xffff) as f64)
        .collect();
    vec![
        ("config.stft.win_length".into(), scalar(cfg.stft.win_length as f64)),
        ("config.stft.hop_length".into(), scalar(cfg.stft.hop_length as f64)),
        ("config.stft.fft_length".into(), scalar(cfg.stft.fft_length as f64)),
        (
            "config.stft.window_kind".into(),
            scalar(match cfg.stft.window_kind {
                WindowKind::Hann => 0.0,
                WindowKind::SqrtHann => 1.0,
            }),
        ),
        ("config.stft.sample_rate".into(), scalar(cfg.stft.sample_rate as f64)),
        (
            "config.encoder_channels".into(),
            vec1(cfg.encoder_channels.iter().map(|&c| c as f64).collect()),
        ),
        ("config.kernel".into(), vec1(vec![cfg.kernel.0 as f64, cfg.kernel.1 as f64])),
        ("config.stride".into(), vec1(vec![cfg.stride.0 as f64, cfg.stride.1 as f64])),
        (
            "config.conformer".into(),
            vec1(vec![
                cfg.conformer.model_dim as f64,
                cfg.conformer.num_heads as f64,
                cfg.conformer.ffn_expansion as f64,
                cfg.conformer.conv_kernel as f64,
                cfg.conformer.num_blocks as f64,
                cfg.conformer.dropout,
            ]),
        ),
        (
            "config.visual.frame".into(),
            vec1(vec![cfg.visual.frame_height as f64, cfg.visual.frame_width as f64]),
        ),
        ("config.visual.stem_channels".into(), scalar(cfg.visual.stem_channels as f64)),
        (
            "config.visual.stage_channels".into(),
            vec1(cfg.visual.stage_channels.iter().map(|&c| c as f64).collect()),
        ),
        ("config.visual.embed_dim".into(), scalar(cfg.visual.embed_dim as f64)),
        ("config.fusion_proj_dim".into(), scalar(cfg.fusion_proj_dim as f64)),
        (
            "config.mask_bound".into(),
            vec1(match cfg.mask_bound {
                Some(b) => vec![1.0, b],
                None => vec![0.0, 0.0],
            }),
        ),
        (
            "config.upsample".into(),
            scalar(match cfg.upsample {
                UpsampleMode::Nearest => 0.0,
                UpsampleMode::Linear => 1.0,
            }),
        ),
        ("config.seed".into(), vec1(seed_limbs)),
    ]
}

fn config_from_tensors(map: &BTreeMap<String, Tensor>) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<&Tensor> {
        map.get(name)
            .ok_or_else(|| DcucError::Checkpoint(format!("missing tensor {name}")))
    };
    let scalar = |name: &str| -> Result<f64> { Ok(get(name)?.data()[0]) };
    let us = |name: &str| -> Result<usize> { Ok(scalar(name)?.round() as usize) };

    let channels: Vec<usize> = get("config.encoder_channels")?
        .data()
        .iter()
        .map(|&v| v.round() as usize)
        .collect();
    let kernel = get("config.kernel")?.data().to_vec();
    let stride = get("config.stride")?.data().to_vec();
    let conf = get("config.conformer")?.data().to_vec();
    if conf.len() != 6 || kernel.len() != 2 || stride.len() != 2 {
        return Err(DcucError::Checkpoint("malformed config tensor".into()));
    }
    let frame = get("config.visual.frame")?.data().to_vec();
    let stage_channels: Vec<usize> = get("config.visual.stage_channels")?
        .data()
        .iter()
        .map(|&v| v.round() as usize)
        .collect();
    let mask = get("config.mask_bound")?.data().to_vec();
    let seed_limbs = get("config.seed")?.data().to_vec();
    let seed = seed_limbs
        .iter()
        .enumerate()
        .fold(0u64, |acc, (k, &v)| acc | ((v.round() as u64) << (16 * k)));

    Ok(ModelConfig {
        stft: StftConfig {
            win_length: us("config.stft.win_length")?,
            hop_length: us("config.stft.hop_length")?,
            fft_length: us("config.stft.fft_length")?,
            window_kind: if scalar("config.stft.window_kind")? < 0.5 {
                WindowKind::Hann
            } else {
                WindowKind::SqrtHann
            },
            sample_rate: us("config.stft.sample_rate")? as u32,
        },
        encoder_channels: channels,
        kernel: (kernel[0].round() as usize, kernel[1].round() as usize),
        stride: (stride[0].round() as usize, stride[1].round() as usize),
        conformer: ConformerConfig {
            model_dim: conf[0].round() as usize,
            num_heads: conf[1].round() as usize,
            ffn_expansion: conf[2].round() as usize,
            conv_kernel: conf[3].round() as usize,
            num_blocks: conf[4].round() as usize,
            dropout: conf[5],
            ..Default::default()
        },
        visual: VisualConfig {
            frame_height: frame[0].round() as usize,
            frame_width: frame[1].round() as usize,
            stem_channels: us("config.visual.stem_channels")?,
            stage_channels,
            embed_dim: us("config.visual.embed_dim")?,
        },
        fusion_proj_dim: us("config.fusion_proj_dim")?,
        mask_bound: if mask[0] > 0.5 { Some(mask[1]) } else { None },
        upsample: if scalar("config.upsample")? < 0.5 {
            UpsampleMode::Nearest
        } else {
            UpsampleMode::Linear
        },
        seed,
    })
}

/// Serialize the full state (parameters, running statistics, config).
pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut entries: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut snapshot = state.clone();
    snapshot.visit_all_mut(&mut |name, t| {
        entries.insert(name.to_string(), t.clone());
    });
    for (name, t) in config_tensors(&state.config) {
        entries.insert(name, t);
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&out);
    out.extend_from_slice(&hasher.finalize().to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < 16 {
        return Err(DcucError::Checkpoint("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(DcucError::Checkpoint(format!(
            "CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    if &body[0..4] != MAGIC {
        return Err(DcucError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DcucError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;

    let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut off = 12;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        let s = body
            .get(*off..*off + n)
            .ok_or_else(|| DcucError::Checkpoint("truncated tensor table".into()))?;
        *off += n;
        Ok(s)
    };
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| DcucError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut off, numel * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        map.insert(name, Tensor::from_vec(data, &shape)?);
    }
    if off != body.len() {
        return Err(DcucError::Checkpoint("trailing bytes after tensors".into()));
    }

    let config = config_from_tensors(&map)?;
    let mut state = ModelState::init(config)?;
    let mut missing: Vec<String> = Vec::new();
    state.visit_all_mut(&mut |name, t| match map.get(name) {
        Some(src) if src.shape() == t.shape() => {
            t.data_mut().copy_from_slice(src.data());
        }
        Some(src) => missing.push(format!(
            "{name}: shape {:?} != expected {:?}",
            src.shape(),
            t.shape()
        )),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(DcucError::Checkpoint(format!(
            "inconsistent tensors: {}",
            missing.join("; ")
        )));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)).map_err(|e| DcucError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&fs::read(path).map_err(|e| DcucError::io(path, e))?)
}
