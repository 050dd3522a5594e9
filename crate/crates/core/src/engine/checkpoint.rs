//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `u32` version, `u32` parameter count, then per
//! parameter `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f32`
//! payload; a CRC32 of everything preceding closes the file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tape::ParamStore;
use super::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

struct CrcWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> CrcWriter<W> {
    fn new(inner: W) -> Self {
        CrcWriter {
            inner,
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn write_all(&mut self, buf: &[u8]) -> io::Result<()> {
        self.hasher.update(buf);
        self.inner.write_all(buf)
    }

    fn finish(mut self) -> io::Result<()> {
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()
    }
}

struct CrcReader<R: Read> {
    inner: R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> CrcReader<R> {
    fn new(inner: R) -> Self {
        CrcReader {
            inner,
            hasher: crc32fast::Hasher::new(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.hasher.update(buf);
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(CheckpointError::Truncated),
            Err(e) => Err(e.into()),
        }
    }

    fn verify_trailer(mut self) -> Result<(), CheckpointError> {
        let computed = self.hasher.clone().finalize();
        let mut trailer = [0u8; 4];
        match self.inner.read_exact(&mut trailer) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(CheckpointError::Truncated)
            }
            Err(e) => return Err(e.into()),
        }
        let stored = u32::from_le_bytes(trailer);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        Ok(())
    }
}

pub fn write_params<W: Write>(store: &ParamStore, writer: W) -> Result<(), CheckpointError> {
    let mut w = CrcWriter::new(writer);
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for pid in store.ids() {
        let name = store.name(pid).as_bytes();
        let tensor = store.get(pid);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.finish()?;
    Ok(())
}

pub fn read_params<R: Read>(reader: R) -> Result<ParamStore, CheckpointError> {
    let mut r = CrcReader::new(reader);
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];

    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);

    let mut store = ParamStore::new();
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        if name_len > 1 << 20 {
            return Err(CheckpointError::Malformed(format!(
                "parameter name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("non-UTF-8 parameter name".into()))?;
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u32buf)?;
            data.push(f32::from_le_bytes(u32buf) as f64);
        }
        if store.find(&name).is_some() {
            return Err(CheckpointError::Malformed(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        store.add(&name, Tensor::from_vec(&shape, data));
    }
    r.verify_trailer()?;
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    write_params(store, BufWriter::new(File::create(path)?))
}

pub fn load_params(path: &Path) -> Result<ParamStore, CheckpointError> {
    read_params(BufReader::new(File::open(path)?))
}
