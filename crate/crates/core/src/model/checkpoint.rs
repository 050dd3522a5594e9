//! Model checkpoints: a small header with the layer configuration followed
//! by the engine parameter payload (which carries its own checksum).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Activation, Arm, DualAttentionParams, HeadParams};
use crate::engine::{self, CheckpointError};

pub const MODEL_MAGIC: &[u8; 8] = b"DUATMDL1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelCheckpointError {
    #[error("model checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported model checkpoint version {0}")]
    Version(u32),
    #[error("malformed model checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Params(#[from] CheckpointError),
}

pub fn write_model<W: Write>(
    params: &DualAttentionParams,
    arm: Arm,
    mut w: W,
) -> Result<(), ModelCheckpointError> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(params.d as u64).to_le_bytes())?;
    w.write_all(&(params.d_prime as u64).to_le_bytes())?;
    w.write_all(&(params.heads as u64).to_le_bytes())?;
    w.write_all(&(params.hops as u64).to_le_bytes())?;
    w.write_all(&(params.classes as u64).to_le_bytes())?;
    w.write_all(&(params.leaky_slope as f32).to_le_bytes())?;
    w.write_all(&[match params.activation {
        Activation::Elu => 0u8,
        Activation::LeakyRelu => 1u8,
    }])?;
    w.write_all(&[match arm {
        Arm::DualAttention => 0u8,
        Arm::PlainConvolution => 1u8,
    }])?;
    w.write_all(&params.lambda.to_le_bytes())?;
    engine::write_params(&params.store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<(DualAttentionParams, Arm), ModelCheckpointError> {
    let mut magic = [0u8; 8];
    read_or_truncated(&mut r, &mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(ModelCheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    read_or_truncated(&mut r, &mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != MODEL_VERSION {
        return Err(ModelCheckpointError::Version(version));
    }
    let mut u64buf = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<usize, ModelCheckpointError> {
        read_or_truncated(r, &mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf) as usize)
    };
    let d = next_u64(&mut r)?;
    let d_prime = next_u64(&mut r)?;
    let heads = next_u64(&mut r)?;
    let hops = next_u64(&mut r)?;
    let classes = next_u64(&mut r)?;
    let mut f32buf = [0u8; 4];
    read_or_truncated(&mut r, &mut f32buf)?;
    let leaky_slope = f32::from_le_bytes(f32buf) as f64;
    let mut byte = [0u8; 1];
    read_or_truncated(&mut r, &mut byte)?;
    let activation = match byte[0] {
        0 => Activation::Elu,
        1 => Activation::LeakyRelu,
        other => {
            return Err(ModelCheckpointError::Malformed(format!(
                "unknown activation tag {other}"
            )))
        }
    };
    read_or_truncated(&mut r, &mut byte)?;
    let arm = match byte[0] {
        0 => Arm::DualAttention,
        1 => Arm::PlainConvolution,
        other => {
            return Err(ModelCheckpointError::Malformed(format!(
                "unknown arm tag {other}"
            )))
        }
    };
    let mut f64buf = [0u8; 8];
    read_or_truncated(&mut r, &mut f64buf)?;
    let lambda = f64::from_le_bytes(f64buf);

    let store = engine::read_params(r)?;

    let mut head_params = Vec::with_capacity(heads);
    for m in 0..heads {
        let transform = store
            .find(&format!("head{m}.transform"))
            .ok_or_else(|| ModelCheckpointError::Malformed(format!("missing head{m}.transform")))?;
        let attention = store
            .find(&format!("head{m}.attention"))
            .ok_or_else(|| ModelCheckpointError::Malformed(format!("missing head{m}.attention")))?;
        if store.get(transform).shape() != [d, d_prime] {
            return Err(ModelCheckpointError::Malformed(format!(
                "head{m}.transform has shape {:?}, expected [{d}, {d_prime}]",
                store.get(transform).shape()
            )));
        }
        if store.get(attention).shape() != [2 * d_prime] {
            return Err(ModelCheckpointError::Malformed(format!(
                "head{m}.attention has shape {:?}, expected [{}]",
                store.get(attention).shape(),
                2 * d_prime
            )));
        }
        head_params.push(HeadParams {
            transform,
            attention,
        });
    }
    let classifier_weight = store
        .find("classifier.weight")
        .ok_or_else(|| ModelCheckpointError::Malformed("missing classifier.weight".into()))?;
    let classifier_bias = store
        .find("classifier.bias")
        .ok_or_else(|| ModelCheckpointError::Malformed("missing classifier.bias".into()))?;

    let params = DualAttentionParams {
        d,
        d_prime,
        heads,
        hops,
        classes,
        q: super::hop_coefficients(hops),
        leaky_slope,
        activation,
        lambda,
        store,
        head_params,
        classifier_weight,
        classifier_bias,
    };
    Ok((params, arm))
}

fn read_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelCheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ModelCheckpointError::Malformed("truncated header".into())
        } else {
            ModelCheckpointError::Io(e)
        }
    })
}

pub fn save_model(
    params: &DualAttentionParams,
    arm: Arm,
    path: &Path,
) -> Result<(), ModelCheckpointError> {
    write_model(params, arm, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<(DualAttentionParams, Arm), ModelCheckpointError> {
    read_model(BufReader::new(File::open(path)?))
}
