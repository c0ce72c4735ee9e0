//! Flat binary array format: the magic bytes `BLO1`, a little-endian `u32`
//! rank, `rank` little-endian `u32` extents, then the row-major `f64` payload
//! in little-endian byte order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BLO1";

#[derive(Debug, Clone, PartialEq)]
pub struct Blo1Array {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Blo1Array {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len()) {
            return Err(Error::Format(format!(
                "extents {dims:?} do not match {} values",
                data.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!("extent in {dims:?} exceeds u32")));
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("rank-1 extents always match")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn encode<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.dims.len() + 8 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io_err)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(4)? != MAGIC {
            return Err(Error::Format("missing BLO1 magic".into()));
        }
        let rank = cursor.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cursor.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("extent product overflows".into()))?;
        let remaining = bytes.len() - cursor.pos;
        if remaining != count * 8 {
            return Err(Error::Format(format!(
                "payload holds {remaining} bytes, extents {dims:?} need {}",
                count * 8
            )));
        }
        let data = cursor.bytes[cursor.pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.encode(&mut buf)?;
        fs::write(path, buf).map_err(io_err)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated BLO1 header".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        Blo1Array::new(vec![2, 1], vec![1.0, -0.5])
            .unwrap()
            .encode(&mut buf)
            .unwrap();
        assert_eq!(&buf[..4], b"BLO1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 32);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Blo1Array::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Blo1Array::from_bytes(b"BLO2\0\0\0\0").is_err());
        assert!(Blo1Array::from_bytes(b"BLO1\x01\0\0").is_err());
        let mut buf = Vec::new();
        Blo1Array::vector(vec![1.0, 2.0]).encode(&mut buf).unwrap();
        assert!(Blo1Array::from_bytes(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let a = Blo1Array::new(
            vec![3, 2],
            vec![0.1, f64::MIN_POSITIVE, -0.0, 1e300, f64::NAN, 7.0],
        )
        .unwrap();
        a.write_file(&path).unwrap();
        let b = Blo1Array::read_file(&path).unwrap();
        assert_eq!(a.dims(), b.dims());
        let bits = |x: &Blo1Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(data in proptest::collection::vec(any::<f64>(), 0..64)) {
            let a = Blo1Array::vector(data);
            let mut buf = Vec::new();
            a.encode(&mut buf).unwrap();
            let b = Blo1Array::decode(buf.as_slice()).unwrap();
            prop_assert_eq!(a.dims(), b.dims());
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
    }
}
