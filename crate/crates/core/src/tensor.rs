//! Dense row-major tensors and the scalar abstraction shared by the tape.
//!
//! Images and feature maps use NCHW ordering. Training runs in `f32`; the
//! same code paths are instantiated at `f64` for gradient verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `c = a · b` (or `c += a · b` when `accumulate`), with `a` an m×k and `b`
    /// a k×n matrix, each optionally stored transposed. All matrices are
    /// contiguous row-major in their stored orientation.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // logical rows×cols; stored either as rows×cols or cols×rows
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(a_trans, m, k);
                let (rsb, csb) = strides(b_trans, k, n);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice lengths are checked above and the strides
                // describe contiguous matrices of the asserted extents.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Dense tensor value. `data.len()` always equals the product of `shape`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Extents of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    /// Mean absolute difference between two equally shaped tensors.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Sample `n` of a rank-4 batch as a `1×C×H×W` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if n >= b {
            return Err(Error::Index(format!("sample {n} of batch {b}")));
        }
        let per = c * h * w;
        Ok(Tensor { shape: vec![1, c, h, w], data: self.data[n * per..(n + 1) * per].to_vec() })
    }

    /// Concatenate rank-4 tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("empty stack"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            let (b, c2, h2, w2) = t.dims4()?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(Error::shape(format!("stack {:?} with {:?}", first.shape, t.shape)));
            }
            n += b;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: vec![n, c, h, w], data })
    }
}

impl Tensor<f32> {
    /// Bit pattern view, for exact comparisons and hashing.
    pub fn to_bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}
