//! Versioned binary checkpoints: a config header, the pipeline settings,
//! then every parameter tensor in declaration order, double precision.
//! Loading validates the header against sane limits before allocating, so
//! the reader is safe on untrusted input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, PipelineConfig};
use crate::binio::*;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

/// Upper bound on any (rows * cols) implied by a checkpoint header.
const MAX_TENSOR: u64 = 1 << 26;

pub struct Checkpoint {
    pub model: Model,
    pub pipeline: PipelineConfig,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(ckpt, &mut w)
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, w: &mut W) -> Result<()> {
    let c = &ckpt.model.config;
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    for v in [
        c.d_model,
        c.n_heads,
        c.n_enc_layers,
        c.n_dec_layers,
        c.ffn_dim,
        c.vocab_size,
        c.max_positions,
    ] {
        write_u32(w, v as u32)?;
    }
    write_f64(w, c.dropout_rate)?;
    write_u32(w, c.fuse_every_layer as u32)?;
    let p = &ckpt.pipeline;
    for v in [p.max_history, p.max_seg_tokens, p.max_target_tokens, p.k_retrieved] {
        write_u32(w, v as u32)?;
    }
    write_u64(w, ckpt.model.params.len() as u64)?;
    for (name, tensor) in ckpt.model.params.iter() {
        write_str(w, name)?;
        write_u32(w, tensor.nrows() as u32)?;
        write_u32(w, tensor.ncols() as u32)?;
        for &v in tensor.iter() {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    expect_magic(r, MAGIC, "checkpoint")?;
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let d_model = read_u32(r)? as usize;
    let n_heads = read_u32(r)? as usize;
    let n_enc_layers = read_u32(r)? as usize;
    let n_dec_layers = read_u32(r)? as usize;
    let ffn_dim = read_u32(r)? as usize;
    let vocab_size = read_u32(r)? as usize;
    let max_positions = read_u32(r)? as usize;
    let dropout_rate = read_f64(r)?;
    let fuse_every_layer = match read_u32(r)? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad fusion flag {v}"))),
    };
    let config = ModelConfig {
        d_model,
        n_heads,
        n_enc_layers,
        n_dec_layers,
        ffn_dim,
        vocab_size,
        max_positions,
        dropout_rate,
        fuse_every_layer,
    };
    config.validate()?;
    if n_enc_layers > 64 || n_dec_layers > 64 {
        return Err(Error::Format("checkpoint layer count exceeds limit".into()));
    }
    for product in [
        vocab_size as u64 * d_model as u64,
        max_positions as u64 * d_model as u64,
        ffn_dim as u64 * d_model as u64,
    ] {
        if product > MAX_TENSOR {
            return Err(Error::Format("checkpoint dimensions exceed limits".into()));
        }
    }
    if !dropout_rate.is_finite() {
        return Err(Error::Format("non-finite dropout rate".into()));
    }

    let pipeline = PipelineConfig {
        max_history: read_u32(r)? as usize,
        max_seg_tokens: read_u32(r)? as usize,
        max_target_tokens: read_u32(r)? as usize,
        k_retrieved: read_u32(r)? as usize,
    };

    // Rebuild the expected registry from the config, then overwrite values.
    let mut model = Model::new(config, 0)?;
    let count = read_u64(r)?;
    if count != model.params.len() as u64 {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            model.params.len()
        )));
    }
    for i in 0..model.params.len() {
        let name = read_str(r)?;
        if name != model.params.name(i) {
            return Err(Error::Format(format!(
                "tensor {i} is `{name}`, expected `{}`",
                model.params.name(i)
            )));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let tensor = model.params.tensor_mut(i);
        if (rows, cols) != tensor.dim() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {rows}x{cols}, expected {:?}",
                tensor.dim()
            )));
        }
        for v in tensor.iter_mut() {
            let x = read_f64(r)?;
            if !x.is_finite() {
                return Err(Error::Format(format!("non-finite value in tensor `{name}`")));
            }
            *v = x;
        }
    }
    Ok(Checkpoint { model, pipeline })
}
