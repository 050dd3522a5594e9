//! Node feature sources: the implicit one-hot identity, or a dense matrix
//! loaded from a binary feature file.
//!
//! Feature file layout (little-endian): magic `DUATFTR1`, `u64` rows,
//! `u64` dim, `f32` values row-major, CRC32 trailer.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::engine::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"DUATFTR1";

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("feature file i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("truncated feature file")]
    Truncated,
    #[error("feature file checksum mismatch")]
    Checksum,
}

/// Row-indexed node features.
///
/// `OneHot` is the identity matrix over nodes (row `i` has a single 1 at
/// column `i`); it is never materialized — transforms read table rows
/// directly.
#[derive(Clone, Debug)]
pub enum Features {
    OneHot { nodes: usize },
    Dense(Tensor),
}

impl Features {
    pub fn node_count(&self) -> usize {
        match self {
            Features::OneHot { nodes } => *nodes,
            Features::Dense(t) => t.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Features::OneHot { nodes } => *nodes,
            Features::Dense(t) => t.cols(),
        }
    }
}

pub fn write_features<W: Write>(features: &Tensor, writer: W) -> Result<(), FeatureFileError> {
    let mut hasher = crc32fast::Hasher::new();
    let mut w = writer;
    let emit = |buf: &[u8], w: &mut W, hasher: &mut crc32fast::Hasher| -> io::Result<()> {
        hasher.update(buf);
        w.write_all(buf)
    };
    emit(FEATURE_MAGIC, &mut w, &mut hasher)?;
    emit(&(features.rows() as u64).to_le_bytes(), &mut w, &mut hasher)?;
    emit(&(features.cols() as u64).to_le_bytes(), &mut w, &mut hasher)?;
    for &v in features.data() {
        emit(&(v as f32).to_le_bytes(), &mut w, &mut hasher)?;
    }
    let crc = hasher.finalize();
    w.write_all(&crc.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_features<R: Read>(reader: R) -> Result<Tensor, FeatureFileError> {
    let mut hasher = crc32fast::Hasher::new();
    let mut r = reader;
    let pull = |buf: &mut [u8], r: &mut R, hasher: &mut crc32fast::Hasher| -> Result<(), FeatureFileError> {
        match r.read_exact(buf) {
            Ok(()) => {
                hasher.update(buf);
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(FeatureFileError::Truncated),
            Err(e) => Err(e.into()),
        }
    };
    let mut magic = [0u8; 8];
    pull(&mut magic, &mut r, &mut hasher)?;
    if &magic != FEATURE_MAGIC {
        return Err(FeatureFileError::BadMagic);
    }
    let mut u64buf = [0u8; 8];
    pull(&mut u64buf, &mut r, &mut hasher)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    pull(&mut u64buf, &mut r, &mut hasher)?;
    let dim = u64::from_le_bytes(u64buf) as usize;
    let mut data = Vec::with_capacity(rows * dim);
    let mut f32buf = [0u8; 4];
    for _ in 0..rows * dim {
        pull(&mut f32buf, &mut r, &mut hasher)?;
        data.push(f32::from_le_bytes(f32buf) as f64);
    }
    let computed = hasher.finalize();
    let mut trailer = [0u8; 4];
    match r.read_exact(&mut trailer) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
            return Err(FeatureFileError::Truncated)
        }
        Err(e) => return Err(e.into()),
    }
    if u32::from_le_bytes(trailer) != computed {
        return Err(FeatureFileError::Checksum);
    }
    Ok(Tensor::from_vec(&[rows, dim], data))
}

pub fn load_features(path: &Path) -> Result<Features, FeatureFileError> {
    let t = read_features(BufReader::new(File::open(path)?))?;
    Ok(Features::Dense(t))
}

pub fn save_features(features: &Tensor, path: &Path) -> Result<(), FeatureFileError> {
    write_features(features, BufWriter::new(File::create(path)?))
}
