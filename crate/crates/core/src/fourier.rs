//! Orthonormal discrete Fourier transforms along image axes.
//!
//! Forward: `X[q] = N^{-1/2} Σ_n x[n] e^{-i2πqn/N}`; the inverse flips the sign
//! of the exponent and uses the same scale. Indices are standard (non-centered)
//! everywhere. Transforms of any length are supported; the planner picks a
//! mixed-radix decomposition and falls back to Bluestein/Rader for large primes.
//!
//! Every 1D transform applied is recorded in a [`TransformCounter`]. A 2D
//! transform of an `n_pe × n_ro` image is `n_pe` row transforms plus `n_ro`
//! column transforms.

use std::f64::consts::PI;
use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftDirection};

use crate::tensor::{ComplexImage, Real};

/// Running count of transforms performed during a run.
#[derive(Debug, Default)]
pub struct TransformCounter {
    fft: AtomicU64,
    ifft: AtomicU64,
    fft2d: AtomicU64,
    ifft2d: AtomicU64,
}

/// Point-in-time copy of a [`TransformCounter`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformCounts {
    /// 1D forward transforms.
    pub fft: u64,
    /// 1D inverse transforms.
    pub ifft: u64,
    /// 2D forward transforms (each also contributes to `fft`).
    pub fft2d: u64,
    /// 2D inverse transforms (each also contributes to `ifft`).
    pub ifft2d: u64,
}

impl Sub for TransformCounts {
    type Output = TransformCounts;

    fn sub(self, rhs: Self) -> Self {
        TransformCounts {
            fft: self.fft - rhs.fft,
            ifft: self.ifft - rhs.ifft,
            fft2d: self.fft2d - rhs.fft2d,
            ifft2d: self.ifft2d - rhs.ifft2d,
        }
    }
}

impl Add for TransformCounts {
    type Output = TransformCounts;

    fn add(self, rhs: Self) -> Self {
        TransformCounts {
            fft: self.fft + rhs.fft,
            ifft: self.ifft + rhs.ifft,
            fft2d: self.fft2d + rhs.fft2d,
            ifft2d: self.ifft2d + rhs.ifft2d,
        }
    }
}

impl TransformCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fft_count(&self) -> u64 {
        self.fft.load(Ordering::Relaxed)
    }

    pub fn ifft_count(&self) -> u64 {
        self.ifft.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> TransformCounts {
        TransformCounts {
            fft: self.fft.load(Ordering::Relaxed),
            ifft: self.ifft.load(Ordering::Relaxed),
            fft2d: self.fft2d.load(Ordering::Relaxed),
            ifft2d: self.ifft2d.load(Ordering::Relaxed),
        }
    }

    fn record_1d(&self, inverse: bool, n: u64) {
        if inverse {
            self.ifft.fetch_add(n, Ordering::Relaxed);
        } else {
            self.fft.fetch_add(n, Ordering::Relaxed);
        }
    }

    fn record_2d(&self, inverse: bool) {
        if inverse {
            self.ifft2d.fetch_add(1, Ordering::Relaxed);
        } else {
            self.fft2d.fetch_add(1, Ordering::Relaxed);
        }
    }
}

fn plan<T: Real>(len: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    let direction = if inverse { FftDirection::Inverse } else { FftDirection::Forward };
    // A poisoned planner only means another thread panicked mid-plan; the cache is still usable.
    let mut planner = T::planner().lock().unwrap_or_else(|e| e.into_inner());
    planner.plan_fft(len, direction)
}

/// Transforms every contiguous `len`-chunk of `buf` in place and applies the
/// orthonormal scale. Returns the number of transforms performed.
fn transform_chunks<T: Real>(buf: &mut [Complex<T>], len: usize, inverse: bool) -> u64 {
    if buf.is_empty() {
        return 0;
    }
    let fft = plan::<T>(len, inverse);
    fft.process(buf);
    let scale = T::of(1.0 / (len as f64).sqrt());
    for z in buf.iter_mut() {
        *z = *z * scale;
    }
    (buf.len() / len) as u64
}

/// Orthonormal 1D DFT of `v` (`inverse` selects the `+i` exponent).
pub fn fft1d<T: Real>(v: &[Complex<T>], inverse: bool, counter: &TransformCounter) -> Vec<Complex<T>> {
    assert!(!v.is_empty(), "fft1d needs at least one sample");
    let mut out = v.to_vec();
    let n = transform_chunks(&mut out, v.len(), inverse);
    counter.record_1d(inverse, n);
    out
}

/// In-place orthonormal 2D DFT of a row-major `n_pe × n_ro` buffer.
pub(crate) fn fft2d_in_place<T: Real>(
    data: &mut [Complex<T>],
    n_pe: usize,
    n_ro: usize,
    inverse: bool,
    counter: &TransformCounter,
) {
    debug_assert_eq!(data.len(), n_pe * n_ro);
    // rows (readout axis)
    let rows = transform_chunks(data, n_ro, inverse);

    // columns (phase-encode axis) through a transposed scratch buffer
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); data.len()];
    for i in 0..n_pe {
        for j in 0..n_ro {
            scratch[j * n_pe + i] = data[i * n_ro + j];
        }
    }
    let cols = transform_chunks(&mut scratch, n_pe, inverse);
    for j in 0..n_ro {
        for i in 0..n_pe {
            data[i * n_ro + j] = scratch[j * n_pe + i];
        }
    }
    counter.record_1d(inverse, rows + cols);
    counter.record_2d(inverse);
}

/// Separable orthonormal 2D DFT: rows first, then columns.
pub fn fft2d<T: Real>(img: &ComplexImage<T>, inverse: bool, counter: &TransformCounter) -> ComplexImage<T> {
    let (n_pe, n_ro) = img.dims();
    let mut out = img.clone();
    fft2d_in_place(out.data_mut(), n_pe, n_ro, inverse, counter);
    out
}

/// Direct `O(N²)` orthonormal DFT in `f64`. Test oracle only; not counted.
pub fn dft_naive(v: &[Complex<f64>], inverse: bool) -> Vec<Complex<f64>> {
    let n = v.len();
    assert!(n > 0, "dft_naive needs at least one sample");
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|q| {
            let mut acc = Complex::new(0.0, 0.0);
            for (t, &x) in v.iter().enumerate() {
                // reduce the phase index first to keep the twiddle argument small
                let k = (q * t) % n;
                let theta = sign * 2.0 * PI * k as f64 / n as f64;
                acc += x * Complex::new(theta.cos(), theta.sin());
            }
            acc * scale
        })
        .collect()
}
