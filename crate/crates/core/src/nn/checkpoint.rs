//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        "WNET1" (5 bytes)
//! version      u32 (= 1)
//! in_channels  u32
//! stage count  u32
//! widths       u32 * stage count
//! lateral      u32
//! tensor count u32
//! per tensor:  name length u32, UTF-8 name, ndims u32, dims u32 * ndims,
//!              raw f32 data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{DoubleEncoderDecoder, EncoderDecoderConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"WNET1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"WNET1\", found {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("unknown tensor `{0}` in checkpoint")]
    UnknownTensor(String),
    #[error("tensor `{name}` has shape {found:?} in checkpoint but model expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("value {value} of `{name}` is not representable as f32")]
    NotF32 { name: String, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn save_checkpoint(model: &DoubleEncoderDecoder, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, VERSION);
    let cfg = model.config();
    put_u32(&mut buf, cfg.in_channels as u32);
    put_u32(&mut buf, cfg.stage_widths.len() as u32);
    for &w in &cfg.stage_widths {
        put_u32(&mut buf, w as u32);
    }
    put_u32(&mut buf, cfg.lateral_width as u32);
    put_u32(&mut buf, model.params().len() as u32);
    for p in model.params().iter() {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in p.value.data() {
            let f = v as f32;
            if f as f64 != v {
                return Err(CheckpointError::NotF32 { name: p.name.clone(), value: v });
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint and builds the model its config block describes.
pub fn load_checkpoint(path: &Path) -> Result<DoubleEncoderDecoder, CheckpointError> {
    let bytes = read_all(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let config = read_header(&mut r)?;
    let mut model = DoubleEncoderDecoder::new(config, 0)?;
    read_tensors(&mut r, &mut model)?;
    Ok(model)
}

/// Loads the checkpoint's tensors into an existing model, ignoring the
/// stored config; mismatched tensors are reported by name.
pub fn load_checkpoint_into(model: &mut DoubleEncoderDecoder, path: &Path) -> Result<(), CheckpointError> {
    let bytes = read_all(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    read_header(&mut r)?;
    read_tensors(&mut r, model)
}

fn read_all(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn read_header(r: &mut Reader<'_>) -> Result<EncoderDecoderConfig, CheckpointError> {
    let magic = r.take(5, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let in_channels = r.u32("config")? as usize;
    let stages = r.u32("config")? as usize;
    if stages > r.remaining() / 4 {
        return Err(CheckpointError::Truncated("config"));
    }
    let stage_widths = (0..stages).map(|_| r.u32("config").map(|w| w as usize)).collect::<Result<_, _>>()?;
    let lateral_width = r.u32("config")? as usize;
    Ok(EncoderDecoderConfig { in_channels, stage_widths, lateral_width })
}

fn read_tensors(r: &mut Reader<'_>, model: &mut DoubleEncoderDecoder) -> Result<(), CheckpointError> {
    let count = r.u32("tensor count")? as usize;
    let mut seen = vec![false; model.params().len()];
    for _ in 0..count {
        let name_len = r.u32("tensor name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let ndims = r.u32("tensor dims")? as usize;
        if ndims > r.remaining() / 4 {
            return Err(CheckpointError::Truncated("tensor dims"));
        }
        let dims: Vec<usize> = (0..ndims).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<_, _>>()?;
        let id = model.params().id_of(&name).ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        let param = model.params_mut().get_mut(id);
        if param.value.shape() != dims.as_slice() {
            return Err(CheckpointError::Shape { name, expected: param.value.shape().to_vec(), found: dims });
        }
        let n = param.value.len();
        let raw = r.take(n * 4, "tensor data")?;
        for (dst, chunk) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = model.params().iter().nth(missing).expect("index in range").name.clone();
        return Err(CheckpointError::MissingTensor(name));
    }
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn cfg(widths: Vec<usize>) -> EncoderDecoderConfig {
        EncoderDecoderConfig { in_channels: 3, stage_widths: widths, lateral_width: 4 }
    }

    fn img() -> Tensor {
        let mut rng = Rng::new(8);
        Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wnet");
        let model = DoubleEncoderDecoder::new(cfg(vec![4, 6]), 21).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.params().values(), model.params().values());
        assert_eq!(loaded.predict(&img()).unwrap(), model.predict(&img()).unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"WNET1");
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wnet");
        save_checkpoint(&DoubleEncoderDecoder::new(cfg(vec![4, 6]), 0).unwrap(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic(_)));
        assert!(err.to_string().starts_with("bad magic"));
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wnet");
        save_checkpoint(&DoubleEncoderDecoder::new(cfg(vec![4, 6]), 0).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), CheckpointError::Truncated("tensor data")));
        std::fs::write(&path, &bytes[..7]).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), CheckpointError::Truncated("version")));
    }

    #[test]
    fn mismatched_widths_name_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wnet");
        save_checkpoint(&DoubleEncoderDecoder::new(cfg(vec![4, 6]), 0).unwrap(), &path).unwrap();
        let mut other = DoubleEncoderDecoder::new(cfg(vec![5, 6]), 0).unwrap();
        match load_checkpoint_into(&mut other, &path).unwrap_err() {
            CheckpointError::Shape { name, expected, found } => {
                assert_eq!(name, "e1.enc.stage0.conv.weight");
                assert_eq!(expected, vec![5, 3, 3, 3]);
                assert_eq!(found, vec![4, 3, 3, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wnet");
        save_checkpoint(&DoubleEncoderDecoder::new(cfg(vec![4, 6, 8]), 0).unwrap(), &path).unwrap();
        let mut other = DoubleEncoderDecoder::new(cfg(vec![4, 6]), 0).unwrap();
        let err = load_checkpoint_into(&mut other, &path).unwrap_err();
        assert!(matches!(err, CheckpointError::UnknownTensor(ref n) if n == "e1.enc.stage2.conv.weight"), "{err}");
    }
}
