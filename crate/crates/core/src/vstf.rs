//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "VSTF"
//! version u32      1
//! rank    u32
//! dims    rank x u32
//! data    prod(dims) x f32, row-major
//! ```
//!
//! Frames, feature streams, probability vectors, classifier scores and masks
//! (as 0.0 / 1.0) all use this layout.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"VSTF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_values(values: &[f64]) -> Self {
        Self {
            dims: vec![values.len()],
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            dims: vec![mask.len()],
            data: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        if self.rank() != 2 {
            return Err(Error::Format(format!(
                "expected a rank-2 tensor, got rank {}",
                self.rank()
            )));
        }
        Matrix::from_vec(
            self.dims[0],
            self.dims[1],
            self.data.into_iter().map(f64::from).collect(),
        )
    }

    /// Flattens a rank-1 tensor (or an `n x 1` / `1 x n` rank-2 tensor).
    pub fn into_values(self) -> Result<Vec<f64>> {
        let vector_like = match self.dims.as_slice() {
            [_] => true,
            [r, c] => *r == 1 || *c == 1,
            _ => false,
        };
        if !vector_like {
            return Err(Error::Format(format!(
                "expected a vector tensor, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.data.into_iter().map(f64::from).collect())
    }

    /// Reads a mask: any value >= 0.5 is selected.
    pub fn into_mask(self) -> Result<Vec<bool>> {
        Ok(self.into_values()?.into_iter().map(|v| v >= 0.5).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4).ok_or_else(|| Error::parse(origin, "truncated magic"))?;
        if magic != MAGIC {
            return Err(Error::parse(origin, "bad magic, not a VSTF file"));
        }
        let version = cursor.u32().ok_or_else(|| Error::parse(origin, "truncated version"))?;
        if version != VERSION {
            return Err(Error::parse(origin, format!("unsupported version {version}")));
        }
        let rank = cursor.u32().ok_or_else(|| Error::parse(origin, "truncated rank"))? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(cursor.u32().ok_or_else(|| Error::parse(origin, "truncated dims"))? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(origin, "dims overflow"))?;
        let payload = cursor
            .take(count.checked_mul(4).ok_or_else(|| Error::parse(origin, "dims overflow"))?)
            .ok_or_else(|| Error::parse(origin, format!("expected {count} values, payload truncated")))?;
        if cursor.pos != bytes.len() {
            return Err(Error::parse(origin, "trailing bytes after payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"VSTF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn garbled_inputs_are_parse_errors() {
        let good = Tensor::from_values(&[1.0, 2.0, 3.0]).encode();
        let p = Path::new("mem");
        assert!(Tensor::decode(&good[..good.len() - 1], p).is_err());
        assert!(Tensor::decode(b"VSTX", p).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(Tensor::decode(&extra, p).is_err());
        let mut wrong_version = good;
        wrong_version[4] = 9;
        assert!(matches!(Tensor::decode(&wrong_version, p), Err(Error::Parse { .. })));
    }

    #[test]
    fn mask_round_trip() {
        let mask = vec![true, false, false, true];
        let t = Tensor::decode(&Tensor::from_mask(&mask).encode(), Path::new("m")).unwrap();
        assert_eq!(t.data, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.into_mask().unwrap(), mask);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::decode(&t.encode(), Path::new("p")).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
