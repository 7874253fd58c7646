//! Binary checkpoints.
//!
//! Layout: 8 magic bytes, u32 version, u64 header length, JSON header
//! (kind, config echo, block names and shapes), concatenated little-endian
//! f64 payloads in header order, trailing u64 FNV-1a checksum over
//! everything before it.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::fnv1a64;
use crate::scalar::Scalar;
use crate::tokenizer::Codebooks;

const MAGIC: &[u8; 8] = b"SEMDECKP";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    blocks: Vec<BlockMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockMeta {
    name: String,
    shape: Vec<usize>,
}

/// A loaded checkpoint, before interpretation.
#[derive(Debug)]
pub struct CheckpointData {
    pub kind: String,
    pub config: serde_json::Value,
    pub blocks: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    blocks: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        config,
        blocks: blocks
            .iter()
            .map(|(name, shape, _)| BlockMeta {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (name, shape, data) in blocks {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Schema(format!(
                "block {name}: {} values for shape {shape:?}",
                data.len()
            )));
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
        return Err(Error::Integrity("checkpoint file too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Integrity("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }

    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if header_end > payload.len() {
        return Err(Error::Integrity("header length out of bounds".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..header_end])?;

    let mut offset = header_end;
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for meta in &header.blocks {
        let count: usize = meta.shape.iter().product();
        let end = offset + count * 8;
        if end > payload.len() {
            return Err(Error::Schema(format!(
                "block {}: payload truncated",
                meta.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        blocks.push((meta.name.clone(), meta.shape.clone(), data));
        offset = end;
    }
    if offset != payload.len() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }
    Ok(CheckpointData {
        kind: header.kind,
        config: header.config,
        blocks,
    })
}

pub fn save_model<F: Scalar>(path: &Path, params: &ModelParams<F>) -> Result<()> {
    let blocks: Vec<(String, Vec<usize>, Vec<f64>)> = params
        .named_blocks()
        .into_iter()
        .map(|(name, data, shape)| {
            (
                name,
                shape,
                data.iter().map(|v| v.to_double()).collect(),
            )
        })
        .collect();
    save_checkpoint(path, "model", serde_json::to_value(&params.cfg)?, &blocks)
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<ModelParams<F>> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "model" {
        return Err(Error::Schema(format!(
            "expected a model checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let cfg: ModelConfig = serde_json::from_value(ckpt.config)?;
    let mut params = ModelParams::<F>::init(cfg)?;
    let mut loaded: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> = ckpt
        .blocks
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();
    let expect: Vec<(String, Vec<usize>)> = params
        .named_blocks()
        .into_iter()
        .map(|(n, _, s)| (n, s))
        .collect();
    for ((name, dst), (expect_name, expect_shape)) in
        params.named_blocks_mut().into_iter().zip(expect)
    {
        debug_assert_eq!(name, expect_name);
        let (shape, data) = loaded.remove(&name).ok_or_else(|| {
            Error::Schema(format!("checkpoint is missing block {name}"))
        })?;
        if shape != expect_shape {
            return Err(Error::Schema(format!(
                "block {name}: shape {shape:?} does not match config {expect_shape:?}"
            )));
        }
        for (slot, v) in dst.iter_mut().zip(data) {
            *slot = F::of(v);
        }
    }
    if let Some(name) = loaded.keys().next() {
        return Err(Error::Schema(format!("unexpected extra block {name}")));
    }
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookConfig {
    levels: usize,
    codebook_size: usize,
    dim: usize,
}

pub fn save_codebooks<F: Scalar>(path: &Path, books: &Codebooks<F>) -> Result<()> {
    let cfg = CodebookConfig {
        levels: books.levels(),
        codebook_size: books.codebook_size(),
        dim: books.dim(),
    };
    let blocks: Vec<(String, Vec<usize>, Vec<f64>)> = (0..books.levels())
        .map(|l| {
            (
                format!("level{l}"),
                vec![books.codebook_size(), books.dim()],
                books.level(l).data().iter().map(|v| v.to_double()).collect(),
            )
        })
        .collect();
    save_checkpoint(path, "codebooks", serde_json::to_value(&cfg)?, &blocks)
}

pub fn load_codebooks<F: Scalar>(path: &Path) -> Result<Codebooks<F>> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != "codebooks" {
        return Err(Error::Schema(format!(
            "expected a codebook checkpoint, found {:?}",
            ckpt.kind
        )));
    }
    let cfg: CodebookConfig = serde_json::from_value(ckpt.config)?;
    if ckpt.blocks.len() != cfg.levels {
        return Err(Error::Schema(format!(
            "{} blocks for {} levels",
            ckpt.blocks.len(),
            cfg.levels
        )));
    }
    let mut mats = Vec::with_capacity(cfg.levels);
    for (l, (name, shape, data)) in ckpt.blocks.into_iter().enumerate() {
        if name != format!("level{l}") || shape != vec![cfg.codebook_size, cfg.dim] {
            return Err(Error::Schema(format!(
                "block {name}: unexpected name or shape {shape:?}"
            )));
        }
        mats.push(Mat::from_vec(
            cfg.codebook_size,
            cfg.dim,
            data.into_iter().map(F::of).collect(),
        ));
    }
    Codebooks::new(mats)
}
