use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Declared storage width of a tensor, used only for memory accounting.
///
/// Arithmetic is always carried out in `f64`; the width records how many
/// bits per element a real kernel would keep in activation memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(try_from = "u32", into = "u32")]
pub enum StorageBits {
    B16,
    B32,
    B64,
}

impl StorageBits {
    pub fn bits(self) -> u32 {
        match self {
            Self::B16 => 16,
            Self::B32 => 32,
            Self::B64 => 64,
        }
    }
}

impl TryFrom<u32> for StorageBits {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(Self::B16),
            32 => Ok(Self::B32),
            64 => Ok(Self::B64),
            other => Err(Error::Config(format!("storage bits must be 16, 32 or 64, got {other}"))),
        }
    }
}

impl From<StorageBits> for u32 {
    fn from(b: StorageBits) -> u32 {
        b.bits()
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    storage: StorageBits,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Self { shape, data, storage: StorageBits::B64 })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n], storage: StorageBits::B64 }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_storage(mut self, storage: StorageBits) -> Self {
        self.storage = storage;
        self
    }

    pub fn storage(&self) -> StorageBits {
        self.storage
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor; a 1-D tensor is one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => shape_err(format!("expected a 2-D tensor, got shape {s:?}")),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data.chunks(cols.max(1))
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("cannot add {:?} and {:?}", self.shape, other.shape));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bytes this tensor would occupy at its declared storage width.
    pub fn storage_bytes(&self) -> u64 {
        (self.len() as u64 * u64::from(self.storage.bits())).div_ceil(8)
    }
}

/// `x · wᵀ` for `x: [n, k]`, `w: [m, k]` giving `[n, m]`.
pub fn matmul_nt(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    let (m, k2) = w.dims2()?;
    if k != k2 {
        return shape_err(format!("matmul_nt inner dims {k} vs {k2}"));
    }
    let mut out = vec![0.0; n * m];
    for (xi, orow) in x.data.chunks(k).zip(out.chunks_mut(m)) {
        for (wj, o) in w.data.chunks(k).zip(orow.iter_mut()) {
            *o = xi.iter().zip(wj).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::matrix(n, m, out)
}

/// `g · w` for `g: [n, m]`, `w: [m, k]` giving `[n, k]`.
pub fn matmul_nn(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, m) = g.dims2()?;
    let (m2, k) = w.dims2()?;
    if m != m2 {
        return shape_err(format!("matmul_nn inner dims {m} vs {m2}"));
    }
    let mut out = vec![0.0; n * k];
    for (gi, orow) in g.data.chunks(m).zip(out.chunks_mut(k)) {
        for (gij, wrow) in gi.iter().zip(w.data.chunks(k)) {
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += gij * wv;
            }
        }
    }
    Tensor::matrix(n, k, out)
}

/// `gᵀ · x` for `g: [n, m]`, `x: [n, k]` giving `[m, k]`.
pub fn matmul_tn(g: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, m) = g.dims2()?;
    let (n2, k) = x.dims2()?;
    if n != n2 {
        return shape_err(format!("matmul_tn row counts {n} vs {n2}"));
    }
    let mut out = vec![0.0; m * k];
    for (gi, xi) in g.data.chunks(m).zip(x.data.chunks(k)) {
        for (gij, orow) in gi.iter().zip(out.chunks_mut(k)) {
            for (o, xv) in orow.iter_mut().zip(xi) {
                *o += gij * xv;
            }
        }
    }
    Tensor::matrix(m, k, out)
}

/// Column sums of a 2-D tensor.
pub fn sum_rows(g: &Tensor) -> Result<Vec<f64>> {
    let (_, m) = g.dims2()?;
    let mut out = vec![0.0; m];
    for row in g.data.chunks(m) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}
