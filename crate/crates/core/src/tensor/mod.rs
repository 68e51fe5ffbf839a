//! Dense row-major tensors and the numeric primitives the layers are built from.
//!
//! Every reduction in this module runs in a fixed order (row-major,
//! left-to-right), so calling a primitive twice on the same inputs yields
//! bit-identical results. The engines rely on this to demand exact gradient
//! equality between schedules.

mod ops;
mod prim;
mod rng;

use std::fmt;

use num_traits::Float;

use crate::error::{shape_err, Result};

pub use ops::{
    gelu, gelu_scalar, gelu_slope_scalar, gelu_vjp, layer_norm, layer_norm_vjp, matmul,
    matmul_vjp, row_softmax, row_softmax_vjp, LayerNormCache, GELU_COEFF, GELU_SCALE,
};
pub use prim::{forward_cached, vjp, PrimitiveCache, PrimitiveId, LN_EPS};
pub use rng::Rng;
pub(crate) use rng::stream_id;

pub(crate) use ops::{linear, linear_vjp, mm, mm_nt, mm_tn, softmax_in_place, softmax_vjp_row};

/// Element type of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Real scalar usable as a tensor element.
pub trait Scalar: Float + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const DTYPE: DType;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense real array with row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(shape_err(format!(
                "dims {dims:?} need {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        check_dims(dims).expect("tensor dims must be positive");
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_dims(dims).expect("tensor dims must be positive");
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from f64 literals, converting to `T`.
    pub fn from_f64(dims: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::lit(v)).collect())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * T::DTYPE.size_of()) as u64
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensor has at least one dim")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank mismatch");
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            acc * d + i
        })
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn expect_shape(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(shape_err(format!(
                "{what}: expected dims {dims:?}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    fn zip_check(&self, other: &Self, op: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err(format!(
                "{op}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "mul")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.zip_check(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Sum of elementwise products, accumulated left to right in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.zip_check(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a.as_f64() * b.as_f64()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    /// `max|self - other| / max(max|other|, floor)`; the norm-wise relative
    /// error used by every tolerance check in this crate.
    pub fn rel_err(&self, other: &Self) -> Result<f64> {
        self.zip_check(other, "rel_err")?;
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a.as_f64() - b.as_f64()).abs()));
        Ok(diff / other.max_abs().max(f64::MIN_POSITIVE))
    }

    /// Converts element type (rounding when narrowing).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(shape_err(format!("dims must be non-empty and positive, got {dims:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.rows(), 6);
        assert_eq!(t.bytes(), 24 * 8);
    }

    #[test]
    fn rel_err_is_normwise() {
        let a = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 4.4]).unwrap();
        assert!((a.rel_err(&b).unwrap() - 0.4 / 4.4).abs() < 1e-15);
    }

    #[test]
    fn dtype_parses() {
        assert_eq!("f32".parse::<DType>().unwrap(), DType::F32);
        assert!("f16".parse::<DType>().is_err());
    }
}
