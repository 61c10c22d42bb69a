//! Complex image types shared by every stage of the pipeline.
//!
//! Samples are stored row-major as interleaved `(re, im)` pairs: row index is
//! the phase-encode coordinate, column index the readout coordinate. All
//! reductions run serially left to right with an `f64` accumulator, so results
//! do not depend on thread count.

use std::fmt;
use std::iter::Sum;
use std::sync::{Mutex, OnceLock};

use num_complex::Complex;
use num_traits::{Float, FloatConst, NumAssign};
use rustfft::{FftNum, FftPlanner};

use crate::error::{Error, Result};

/// Floating point precision of a pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

/// Scalar type the numerical code is generic over (`f32` or `f64`).
pub trait Real: FftNum + Float + FloatConst + NumAssign + Default + Sum + fmt::Display {
    const PRECISION: Precision;

    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    #[doc(hidden)]
    fn planner() -> &'static Mutex<FftPlanner<Self>>;
}

macro_rules! impl_real {
    ($t:ty, $p:expr) => {
        impl Real for $t {
            const PRECISION: Precision = $p;

            #[inline(always)]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn f64(self) -> f64 {
                self as f64
            }

            fn planner() -> &'static Mutex<FftPlanner<Self>> {
                static PLANNER: OnceLock<Mutex<FftPlanner<$t>>> = OnceLock::new();
                PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
            }
        }
    };
}

impl_real!(f32, Precision::F32);
impl_real!(f64, Precision::F64);

#[inline(always)]
pub(crate) fn c64<T: Real>(z: Complex<T>) -> Complex<f64> {
    Complex::new(z.re.f64(), z.im.f64())
}

#[inline(always)]
pub(crate) fn from_c64<T: Real>(z: Complex<f64>) -> Complex<T> {
    Complex::new(T::of(z.re), T::of(z.im))
}

/// A 2D complex image of `n_pe` rows by `n_ro` columns.
#[derive(Clone, PartialEq)]
pub struct ComplexImage<T: Real = f32> {
    data: Vec<Complex<T>>,
    n_pe: usize,
    n_ro: usize,
}

impl<T: Real> fmt::Debug for ComplexImage<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComplexImage")
            .field("n_pe", &self.n_pe)
            .field("n_ro", &self.n_ro)
            .field("precision", &T::PRECISION)
            .finish()
    }
}

impl<T: Real> ComplexImage<T> {
    pub fn new(n_pe: usize, n_ro: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != n_pe * n_ro {
            return Err(Error::dims(format!(
                "image data has {} samples, expected {n_pe}x{n_ro}",
                data.len()
            )));
        }
        Ok(Self { data, n_pe, n_ro })
    }

    pub fn zeros(n_pe: usize, n_ro: usize) -> Self {
        Self {
            data: vec![Complex::new(T::zero(), T::zero()); n_pe * n_ro],
            n_pe,
            n_ro,
        }
    }

    pub fn from_fn(n_pe: usize, n_ro: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(n_pe * n_ro);
        for i in 0..n_pe {
            for j in 0..n_ro {
                data.push(f(i, j));
            }
        }
        Self { data, n_pe, n_ro }
    }

    /// Builds a real-valued image from row-major samples.
    pub fn from_real(n_pe: usize, n_ro: usize, values: &[T]) -> Result<Self> {
        let data = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        Self::new(n_pe, n_ro, data)
    }

    #[inline]
    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    #[inline]
    pub fn n_ro(&self) -> usize {
        self.n_ro
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.n_pe, self.n_ro)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Complex<T> {
        self.data[row * self.n_ro + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: Complex<T>) {
        self.data[row * self.n_ro + col] = v;
    }

    pub fn row(&self, row: usize) -> &[Complex<T>] {
        &self.data[row * self.n_ro..(row + 1) * self.n_ro]
    }

    pub fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(format!(
                "{}x{} vs {}x{}",
                self.n_pe, self.n_ro, other.n_pe, other.n_ro
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ComplexImage<U> {
        ComplexImage {
            data: self
                .data
                .iter()
                .map(|z| Complex::new(U::of(z.re.f64()), U::of(z.im.f64())))
                .collect(),
            n_pe: self.n_pe,
            n_ro: self.n_ro,
        }
    }

    pub fn map(&self, mut f: impl FnMut(Complex<T>) -> Complex<T>) -> Self {
        Self {
            data: self.data.iter().map(|&z| f(z)).collect(),
            n_pe: self.n_pe,
            n_ro: self.n_ro,
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|z| z * alpha)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: Complex<T>, other: &Self) -> Result<()> {
        self.ensure_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(Complex::new(T::one(), T::zero()), other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(Complex::new(-T::one(), T::zero()), other)?;
        Ok(out)
    }

    /// Pixelwise product `self ⊙ other`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
            n_pe: self.n_pe,
            n_ro: self.n_ro,
        })
    }

    pub fn magnitude(&self) -> Vec<T> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// A stack of same-sized images, one per receiver coil.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilImage<T: Real = f32> {
    coils: Vec<ComplexImage<T>>,
}

impl<T: Real> MultiCoilImage<T> {
    pub fn new(coils: Vec<ComplexImage<T>>) -> Result<Self> {
        let first = coils
            .first()
            .ok_or_else(|| Error::invalid("a coil stack needs at least one coil"))?;
        for c in &coils[1..] {
            first.ensure_same_dims(c)?;
        }
        Ok(Self { coils })
    }

    #[inline]
    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        self.coils[0].dims()
    }

    #[inline]
    pub fn coils(&self) -> &[ComplexImage<T>] {
        &self.coils
    }

    #[inline]
    pub fn coil(&self, k: usize) -> &ComplexImage<T> {
        &self.coils[k]
    }

    pub fn into_coils(self) -> Vec<ComplexImage<T>> {
        self.coils
    }

    pub fn cast<U: Real>(&self) -> MultiCoilImage<U> {
        MultiCoilImage {
            coils: self.coils.iter().map(ComplexImage::cast).collect(),
        }
    }
}

/// Serial left-to-right `Σ conj(a_i)·b_i` over raw sample slices.
pub(crate) fn dot_slices<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<f64> {
    let mut acc = Complex::new(0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        acc += c64(*x).conj() * c64(*y);
    }
    acc
}

/// `Σ conj(a_i)·b_i`, summed serially in index order with an `f64` accumulator.
pub fn hermitian_inner_product<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>) -> Result<Complex<T>> {
    a.ensure_same_dims(b)?;
    Ok(from_c64(dot_slices(a.data(), b.data())))
}

pub fn norm2<T: Real>(a: &ComplexImage<T>) -> T {
    T::of(norm2_slice(a.data()))
}

pub(crate) fn norm2_slice<T: Real>(a: &[Complex<T>]) -> f64 {
    let mut acc = 0.0f64;
    for z in a {
        acc += c64(*z).norm_sqr();
    }
    acc.sqrt()
}
