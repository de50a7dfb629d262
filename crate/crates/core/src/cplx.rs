//! `CPLX1` tensor files.
//!
//! Layout (all little-endian): magic `CPLX1\0`, `u32` rank, `rank` x `u32`
//! dims, then `prod(dims)` complex samples as interleaved `f64` (re, im).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::complex::{CoilStack, ComplexImage, RealImage, SamplingMask, SensitivityMaps, C64};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"CPLX1\0";

/// A tensor of any rank as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<C64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} hold {n} samples, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::BadDims(format!("dim {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::BadFile("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::BadFile("missing CPLX1 magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| Error::BadFile("truncated rank".into()))?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > 8 {
            return Err(Error::BadFile(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)
                .map_err(|_| Error::BadFile("truncated dims".into()))?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = dims.iter().product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 16 {
            return Err(Error::BadFile(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                bytes.len(),
                n * 16
            )));
        }
        let data = bytes
            .chunks_exact(16)
            .map(|b| {
                let re = f64::from_le_bytes(b[..8].try_into().unwrap());
                let im = f64::from_le_bytes(b[8..].try_into().unwrap());
                C64::new(re, im)
            })
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::BadFile(format!("expected rank 2, got {:?}", self.dims))),
        }
    }

    pub fn into_image(self) -> Result<ComplexImage> {
        let (h, w) = self.dims2()?;
        ComplexImage::new(h, w, self.data)
    }

    pub fn into_stack(self) -> Result<CoilStack> {
        match self.dims[..] {
            [c, h, w] => CoilStack::new(c, h, w, self.data),
            _ => Err(Error::BadFile(format!("expected rank 3, got {:?}", self.dims))),
        }
    }

    /// Rank 2 loads as a single-coil stack.
    pub fn into_stack_or_image(self) -> Result<CoilStack> {
        if self.dims.len() == 2 {
            let img = self.into_image()?;
            CoilStack::from_images(&[img])
        } else {
            self.into_stack()
        }
    }

    /// Binary mask stored as 0/1 real samples.
    pub fn to_bits(&self) -> Result<(usize, usize, Vec<bool>)> {
        let (h, w) = self.dims2()?;
        let bits = self
            .data
            .iter()
            .map(|v| match (v.re, v.im) {
                (x, y) if x == 1.0 && y == 0.0 => Ok(true),
                (x, y) if x == 0.0 && y == 0.0 => Ok(false),
                _ => Err(Error::BadFile("mask entries must be 0 or 1".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((h, w, bits))
    }
}

impl From<&ComplexImage> for Tensor {
    fn from(img: &ComplexImage) -> Self {
        Self {
            dims: vec![img.height(), img.width()],
            data: img.data().to_vec(),
        }
    }
}

impl From<&RealImage> for Tensor {
    fn from(img: &RealImage) -> Self {
        Self::from(&img.to_complex())
    }
}

impl From<&CoilStack> for Tensor {
    fn from(stack: &CoilStack) -> Self {
        Self {
            dims: vec![stack.coils(), stack.height(), stack.width()],
            data: stack.data().to_vec(),
        }
    }
}

impl From<&SensitivityMaps> for Tensor {
    fn from(maps: &SensitivityMaps) -> Self {
        Self::from(maps.stack())
    }
}

impl From<&SamplingMask> for Tensor {
    fn from(mask: &SamplingMask) -> Self {
        Self {
            dims: vec![mask.height(), mask.width()],
            data: mask
                .bits()
                .iter()
                .map(|&b| C64::new(if b { 1.0 } else { 0.0 }, 0.0))
                .collect(),
        }
    }
}

/// Loads a mask file and checks it against the declared geometry.
pub fn load_mask(path: impl AsRef<Path>, accel: usize, acs_h: usize, acs_w: usize) -> Result<SamplingMask> {
    let (h, w, bits) = Tensor::load(path)?.to_bits()?;
    let mask = SamplingMask::new(h, w, accel, acs_h, acs_w)?;
    if mask.bits() != bits.as_slice() {
        return Err(Error::BadFile(
            "mask bits disagree with declared acceleration/ACS".into(),
        ));
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![C64::new(1.5, -2.0), C64::new(0.0, 3.0)]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"CPLX1\0");
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(&buf[14..18], &2u32.to_le_bytes());
        assert_eq!(&buf[18..26], &1.5f64.to_le_bytes());
        assert_eq!(&buf[26..34], &(-2.0f64).to_le_bytes());
        assert_eq!(buf.len(), 18 + 32);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Tensor::read_from(&b"CPLX2\0"[..]), Err(Error::BadFile(_))));
        let t = Tensor::new(vec![2, 2], vec![C64::new(0.0, 0.0); 4]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(Tensor::read_from(&buf[..]), Err(Error::BadFile(_))));
        assert!(Tensor::new(vec![3], vec![C64::new(0.0, 0.0); 2]).is_err());
    }

    #[test]
    fn mask_round_trip_checks_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.cplx");
        let mask = SamplingMask::new(12, 16, 4, 4, 4).unwrap();
        Tensor::from(&mask).save(&path).unwrap();
        assert_eq!(load_mask(&path, 4, 4, 4).unwrap(), mask);
        assert!(load_mask(&path, 2, 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|i| C64::new(i as f64 * 0.5 - seed as f64, (seed % 97) as f64 / 7.0)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
        }
    }
}
