//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FFBCKPT\0"
//! version  u32      1
//! dtype    u8       4 (f32) or 8 (f64)
//! meta     u32 length + UTF-8 bytes
//! count    u32
//! count x { u32 name length, name bytes, u32 rank, rank x u64 dims, payload }
//! ```
//!
//! Payload elements are little-endian IEEE floats of the header's width.

use std::io::{Read, Write};

use super::{Real, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FFBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<F>)>,
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<F: Real, W: Write>(mut w: W, ck: &Checkpoint<F>) -> Result<(), TensorError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(F::BYTES);
    buf.extend_from_slice(&(ck.metadata.len() as u32).to_le_bytes());
    buf.extend_from_slice(ck.metadata.as_bytes());
    buf.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.to_le(&mut buf);
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TensorError::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn string(&mut self) -> Result<String, TensorError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }
}

/// Reads a checkpoint, converting elements to `F` if stored at another width.
pub fn read_checkpoint<F: Real, R: Read>(mut r: R) -> Result<Checkpoint<F>, TensorError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let width = c.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(TensorError::Checkpoint(format!("unknown dtype width {width}")));
    }
    let metadata = c.string()?;
    let count = c.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(width as usize).ok_or_else(|| TensorError::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(width as usize)
            .map(|b| if width == 4 { F::of(f64::from(f32::from_le(b))) } else { F::of(f64::from_le(b)) })
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(TensorError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let ck = Checkpoint {
            metadata: "kind=test".to_string(),
            tensors: vec![
                ("a".to_string(), Tensor::<f32>::new(vec![2], vec![1.5, -0.25]).unwrap()),
                ("b.w".to_string(), Tensor::from_fn(&[2, 3], |i| i as f32)),
            ],
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert_eq!(&buf[..8], b"FFBCKPT\0");
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(buf[12], 4);
        let back: Checkpoint<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let wide: Checkpoint<f64> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(wide.tensors[0].1.data(), &[1.5, -0.25]);
        assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32, _>(bad.as_slice()).is_err());
    }
}
