//! Dense row-major tensors and the XTSR on-disk format.
//!
//! The scalar type is `f64` by default so gradient checks run at tight
//! tolerances; enable the `f32` feature for single-precision training
//! builds. On disk the payload is always little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

const XTSR_MAGIC: &[u8; 4] = b"XTSR";

/// Dense n-dimensional array of `Real` in row-major order.
///
/// A rank-0 tensor (empty shape, one element) is the canonical scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> Real {
        self.data[self.linear_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: Real) {
        let i = self.linear_index(index);
        self.data[i] = value;
    }

    fn linear_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut linear = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            linear = linear * self.shape[i] + ix;
        }
        linear
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn abs_sum(&self) -> Real {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sq_l2_norm(&self) -> Real {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite value after {context}")))
        }
    }

    /// Writes the XTSR encoding: magic `XTSR`, u32 rank, u32 extents, raw
    /// little-endian f32 payload.
    pub fn write_xtsr<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(XTSR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_xtsr<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("truncated XTSR header"))?;
        if &magic != XTSR_MAGIC {
            return Err(Error::format(format!("bad XTSR magic {magic:?}")));
        }
        let rank = read_u32_le(r)? as usize;
        if rank > 8 {
            return Err(Error::format(format!("implausible XTSR rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32_le(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::format("truncated XTSR payload"))?;
        let data: Vec<Real> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as Real)
            .collect();
        let t = Tensor { shape, data };
        t.check_finite("XTSR load")?;
        Ok(t)
    }

    pub fn save_xtsr(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_xtsr(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_xtsr(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let t = Tensor::read_xtsr(&mut f)?;
        // trailing bytes are a sign of a corrupt shard
        let mut probe = [0u8; 1];
        if f.read(&mut probe)? != 0 {
            return Err(Error::format("trailing bytes after XTSR payload"));
        }
        Ok(t)
    }
}

fn read_u32_le<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("truncated XTSR header"))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, Real::NAN]),
            Err(Error::NumericFault(_))
        ));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as Real).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn xtsr_header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_xtsr(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"XTSR");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(
            f32::from_le_bytes(buf[16..20].try_into().unwrap()),
            1.0f32
        );
        assert_eq!(
            f32::from_le_bytes(buf[20..24].try_into().unwrap()),
            -2.0f32
        );
    }

    #[test]
    fn xtsr_rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        Tensor::new(vec![3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .write_xtsr(&mut buf)
            .unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Y';
        assert!(matches!(
            Tensor::read_xtsr(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let truncated = &buf[..buf.len() - 2];
        assert!(matches!(
            Tensor::read_xtsr(&mut &truncated[..]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        // f32 payloads round-trip bit-exactly through write/read.
        #[test]
        fn xtsr_roundtrip(values in proptest::collection::vec(-1e6f32..1e6f32, 1..64)) {
            let shape = vec![values.len()];
            let data: Vec<Real> = values.iter().map(|&v| v as Real).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            t.write_xtsr(&mut buf).unwrap();
            let back = Tensor::read_xtsr(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(&t, &back);
            let mut buf2 = Vec::new();
            back.write_xtsr(&mut buf2).unwrap();
            prop_assert_eq!(buf, buf2);
        }
    }
}
