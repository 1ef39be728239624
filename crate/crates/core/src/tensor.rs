//! Dense row-major tensor, generic over the evaluation precision.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Floating point element type. `f32` is the forward/IO precision, `f64` is
/// used for gradient checks.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn abs(self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} hold {n} elements but data has {}", data.len()),
            ));
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::ZERO)
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("invalid dims")
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Self::new(dims, (0..n).map(&mut f).collect()).expect("invalid dims")
    }

    /// Row-major 2-D convenience constructor.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            acc * d + i
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest elementwise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Rank(format!("rank {} outside 1..={MAX_RANK}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
    }
    Ok(())
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
