//! Flat binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "PMODCKPT"
//! version      u32       1
//! count        u32       number of tensors
//! count × {
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rows       u64
//!   cols       u64
//! }
//! payload      f64 × Σ rows·cols, tensors in header order, row-major
//! ```

use std::io::{self, Read, Write};

use super::{ModelConfig, Params};

pub const MAGIC: &[u8; 8] = b"PMODCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint tensor {index} is `{found}` {found_shape:?}, expected `{expected}` {expected_shape:?}")]
    Layout {
        index: usize,
        found: String,
        found_shape: (usize, usize),
        expected: String,
        expected_shape: (usize, usize),
    },
    #[error("checkpoint holds {found} tensors, expected {expected}")]
    Count { found: usize, expected: usize },
}

pub fn write(params: &Params, mut w: impl Write) -> Result<(), CheckpointError> {
    let named = params.named();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in &named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
    }
    for (_, t) in &named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn to_bytes(params: &Params) -> Vec<u8> {
    let mut buf = Vec::new();
    write(params, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint for a model of shape `cfg`; names and shapes must match.
pub fn read(cfg: &ModelConfig, mut r: impl Read) -> Result<Params, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = Params::zeros(cfg);
    let expected = params.named().len();
    if count != expected {
        return Err(CheckpointError::Count { found: count, expected });
    }
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        header.push((String::from_utf8_lossy(&name).into_owned(), (rows, cols)));
    }
    for (index, ((name, t), (found, shape))) in params.named_mut().into_iter().zip(header).enumerate() {
        if name != found || t.shape() != shape {
            return Err(CheckpointError::Layout {
                index,
                found,
                found_shape: shape,
                expected: name,
                expected_shape: t.shape(),
            });
        }
        let mut b = [0u8; 8];
        for v in t.data_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip(seed in 0u64..10_000, layers in 1usize..3) {
            let cfg = ModelConfig { n_layers: layers, d_model: 8, n_heads: 2, d_ff: 6, vocab_size: 5, max_seq: 8 };
            let p = Params::init(&cfg, &mut Rng::new(seed));
            let bytes = to_bytes(&p);
            prop_assert_eq!(read(&cfg, bytes.as_slice()).unwrap(), p);
        }
    }

    #[test]
    fn header_layout() {
        let cfg = ModelConfig { n_layers: 1, d_model: 2, n_heads: 1, d_ff: 2, vocab_size: 3, max_seq: 4 };
        let bytes = to_bytes(&Params::zeros(&cfg));
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 14);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5);
        assert_eq!(&bytes[20..25], b"embed");
    }

    #[test]
    fn mismatched_config_rejected() {
        let cfg = ModelConfig { n_layers: 1, d_model: 4, n_heads: 1, d_ff: 2, vocab_size: 3, max_seq: 4 };
        let other = ModelConfig { d_ff: 3, ..cfg };
        let bytes = to_bytes(&Params::zeros(&cfg));
        assert!(matches!(read(&other, bytes.as_slice()), Err(CheckpointError::Layout { .. })));
        assert!(matches!(read(&cfg, &b"NOTACKPTxxxxxxxx"[..]), Err(CheckpointError::BadMagic)));
    }
}
