use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumCast};

/// Element type of the autodiff engine. Training runs in `f32`; gradient
/// checks run the same code in `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// `C = alpha·A·B + beta·C` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`)
    /// matrices of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("finite scalar")
    }

    fn from_f32(v: f32) -> Self {
        <Self as NumCast>::from(v).expect("representable constant")
    }

    fn as_f32(self) -> f32 {
        <f32 as NumCast>::from(self).expect("finite scalar")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
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

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial element count of an `[N, C, D, H, W]` tensor.
    pub fn spatial(&self) -> usize {
        self.shape[2..].iter().product()
    }
}

impl Tensor<f32> {
    pub fn from_volume(v: &crate::data::Volume) -> Self {
        let [d, h, w] = v.dims();
        Tensor::new(vec![1, v.channels(), d, h, w], v.data().to_vec())
    }

    /// Stacks same-shaped volumes into a batch `[N, C, D, H, W]`.
    pub fn stack(volumes: &[&crate::data::Volume]) -> Self {
        let first = volumes[0];
        let [d, h, w] = first.dims();
        let mut data = Vec::with_capacity(volumes.len() * first.data().len());
        for v in volumes {
            assert_eq!(v.dims(), first.dims());
            assert_eq!(v.channels(), first.channels());
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![volumes.len(), first.channels(), d, h, w], data)
    }
}
