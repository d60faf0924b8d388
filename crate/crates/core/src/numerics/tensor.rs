use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use super::NumericsError;

/// Floating-point element type of a [`Tensor`].
///
/// Training runs in `f32`; the gradient-check suite instantiates the same
/// kernels in `f64`.
pub trait Real: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and
    /// `op(b)` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows×cols); storage is cols×rows when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn of_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.iter_mut().for_each(|v| *v = *v * beta);
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: the asserts above guarantee every index reachable
                // through these strides lies inside the three slices.
                unsafe {
                    $kernel(
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

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![T::zero(); len] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    /// 2-D tensor from a list of equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape { op: "from_rows", detail: "ragged rows".into() });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
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

    /// Leading dimension (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Row ranges of variable-length sequences packed into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    bounds: Vec<usize>,
    owner: Vec<u32>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self, NumericsError> {
        if lengths.is_empty() {
            return Err(NumericsError::Invalid { op: "segments", detail: "no segments".into() });
        }
        let mut bounds = Vec::with_capacity(lengths.len() + 1);
        let mut owner = Vec::new();
        bounds.push(0);
        for (i, &len) in lengths.iter().enumerate() {
            if len == 0 {
                return Err(NumericsError::Invalid {
                    op: "segments",
                    detail: format!("segment {i} is empty"),
                });
            }
            bounds.push(bounds[i] + len);
            owner.extend(std::iter::repeat_n(i as u32, len));
        }
        Ok(Self { bounds, owner })
    }

    /// A single sequence of `len` frames.
    pub fn single(len: usize) -> Result<Self, NumericsError> {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.bounds[i]..self.bounds[i + 1]
    }

    pub fn len_of(&self, i: usize) -> usize {
        self.bounds[i + 1] - self.bounds[i]
    }

    /// Segment index of every packed row.
    pub fn owners(&self) -> &[u32] {
        &self.owner
    }

    /// Row `t + offset` clamped to the segment containing `t`.
    #[inline]
    pub fn clamped(&self, t: usize, offset: i32) -> usize {
        let seg = self.owner[t] as usize;
        let lo = self.bounds[seg] as i64;
        let hi = self.bounds[seg + 1] as i64 - 1;
        (t as i64 + offset as i64).clamp(lo, hi) as usize
    }
}
