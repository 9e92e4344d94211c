//! Dense row-major `f32` tensors, the SplitMix64 input generator and the
//! `FKTENSR0` binary file format.
//!
//! 4-D image tensors use NHWC order (batch, height, width, channels).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Floor for the denominator of [`max_relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-6;

const MAGIC: &[u8; 8] = b"FKTENSR0";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be >= 1".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize".into(),
        })
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if data.len() != n {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data length {} does not match element count {n}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Builds a tensor by evaluating `f` at every flat offset.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    pub fn random_uniform(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidRange { lo, hi });
        }
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.uniform_f32(lo, hi)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat offset of a multi-index, or `None` if it is out of bounds.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for ((&i, &d), s) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= d {
                return None;
            }
            off += i * s;
        }
        Some(off)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Option<Vec<usize>> {
        if offset >= self.data.len() {
            return None;
        }
        let mut index = vec![0; self.shape.len()];
        for (slot, s) in index.iter_mut().zip(self.strides()) {
            *slot = offset / s;
            offset %= s;
        }
        Some(index)
    }

    pub fn get(&self, index: &[usize]) -> Option<f32> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape_mismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Returns the first non-finite element's offset as an error.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NumericInput { op, index }),
            None => Ok(()),
        }
    }

    /// Writes the `FKTENSR0` encoding: magic, u32 rank, u32 dims, then the
    /// little-endian f32 payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n = check_shape(&shape)?;
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let file = std::fs::File::open(path)?;
        Tensor::read_from(std::io::BufReader::new(file))
    }
}

/// Tensor of zeros; see [`Tensor::zeros`].
pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Tensor::zeros(shape)
}

/// Uniform samples in `[lo, hi)`; see [`Tensor::random_uniform`].
pub fn random_uniform(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Result<Tensor> {
    Tensor::random_uniform(shape, rng, lo, hi)
}

/// `max_i |a_i - b_i| / max(|b_i|, 1e-6)`, with `b` as the reference.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::shape_mismatch(format!(
            "max_relative_error: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(max_relative_error_slices(&a.data, &b.data))
}

pub(crate) fn max_relative_error_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / y.abs().max(REL_ERROR_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Counter-based SplitMix64 generator.
///
/// Output `i` (starting at 1) is `mix(seed + i * 0x9E3779B97F4A7C15)`
/// with the standard SplitMix64 finalizer, so any language can replay the
/// stream from the seed alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let mut z = self.seed.wrapping_add(self.counter.wrapping_mul(Self::GAMMA));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)` from the top 24 bits of one draw.
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let u = (self.next_u64() >> 40) as f64 * (1.0 / (1u64 << 24) as f64);
        let v = (lo as f64 + u * (hi as f64 - lo as f64)) as f32;
        if v >= hi {
            hi.next_down()
        } else {
            v.max(lo)
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty range");
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as usize
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.range(0, items.len() - 1)]
    }
}
