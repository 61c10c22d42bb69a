//! Image-domain encoding for equispaced sampling, with no Fourier transforms.
//!
//! Sampling every `R`-th phase-encode line at offset `δ` and transforming the
//! `M = N/R` kept lines back with an `M`-point inverse DFT yields an `R`-fold
//! aliased image. The same map can be written directly in image space as a
//! phase-weighted decimated sum (the fold operator):
//!
//! ```text
//! fold(x)[m] = R^{-1/2} Σ_{r<R} e^{-i2πδ(m+rM)/N} x[m + rM]
//! ```
//!
//! With that scaling `‖y − E x‖ = ‖s − B x‖` holds exactly, where `s` is the
//! once-per-slice preprocessed data and `B` concatenates `fold ∘ C^k` over
//! coils. The normal operator `BᴴB` is block diagonal over aliasing sets
//! (the `R` rows `m, m+M, …` in one column), so the data-fidelity system can
//! be solved group by group.

use std::f64::consts::PI;

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fourier::{fft2d_in_place, TransformCounter};
use crate::sim::{sum_coils, CoilMaps, MultiCoilKSpace};
use crate::tensor::{c64, from_c64, ComplexImage, Real};

/// Preprocessed measurements `s^k = F_M⁻¹ y^k`, one `M × n_ro` image per coil.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedMeasurements<T: Real = f32> {
    coils: Vec<ComplexImage<T>>,
    rate: usize,
    offset: usize,
    n_pe: usize,
}

impl<T: Real> FoldedMeasurements<T> {
    pub fn new(coils: Vec<ComplexImage<T>>, rate: usize, offset: usize, n_pe: usize) -> Result<Self> {
        if rate == 0 || n_pe % rate != 0 {
            return Err(Error::invalid(format!("rate {rate} does not divide {n_pe}")));
        }
        let first = coils
            .first()
            .ok_or_else(|| Error::invalid("folded measurements need at least one coil"))?;
        if first.n_pe() != n_pe / rate {
            return Err(Error::dims(format!(
                "folded image has {} rows, expected {}",
                first.n_pe(),
                n_pe / rate
            )));
        }
        for c in &coils[1..] {
            first.ensure_same_dims(c)?;
        }
        Ok(Self {
            coils,
            rate,
            offset,
            n_pe,
        })
    }

    pub fn coils(&self) -> &[ComplexImage<T>] {
        &self.coils
    }

    pub fn rate(&self) -> usize {
        self.rate
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn n_ro(&self) -> usize {
        self.coils[0].n_ro()
    }

    /// Squared distance `Σ_k ‖s^k − t^k‖²` in `f64`.
    pub fn distance_sq(&self, other: &Self) -> Result<f64> {
        if self.coils.len() != other.coils.len() {
            return Err(Error::dims("coil count differs"));
        }
        let mut acc = 0.0;
        for (a, b) in self.coils.iter().zip(&other.coils) {
            a.ensure_same_dims(b)?;
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += (c64(*x) - c64(*y)).norm_sqr();
            }
        }
        Ok(acc)
    }
}

/// One-time conversion of k-space to image-domain folded measurements: a 2D
/// orthonormal inverse DFT of each coil's `M × n_ro` samples. This is the only
/// transform the FFT-free pipeline performs.
pub fn preprocess_to_image_domain<T: Real>(
    y: &MultiCoilKSpace<T>,
    counter: &TransformCounter,
) -> Result<FoldedMeasurements<T>> {
    let mask = y.mask();
    let coils = y
        .coils()
        .par_iter()
        .map(|yk| {
            let (m, n_ro) = yk.dims();
            let mut buf = yk.data().to_vec();
            fft2d_in_place(&mut buf, m, n_ro, true, counter);
            ComplexImage::new(m, n_ro, buf).expect("sized")
        })
        .collect();
    FoldedMeasurements::new(coils, mask.rate(), mask.offset(), mask.n_pe())
}

/// `R^{-1/2} e^{-i2πδn/N}` for every row `n`, computed in `f64`.
pub(crate) fn fold_weights(n_pe: usize, rate: usize, offset: usize) -> Vec<Complex<f64>> {
    let s = 1.0 / (rate as f64).sqrt();
    (0..n_pe)
        .map(|n| {
            // reduce δn mod N so the angle stays small
            let k = (offset * n) % n_pe;
            let theta = -2.0 * PI * k as f64 / n_pe as f64;
            Complex::from_polar(s, theta)
        })
        .collect()
}

fn check_rate(n: usize, rate: usize, offset: usize) -> Result<()> {
    if rate == 0 || n % rate != 0 {
        return Err(Error::invalid(format!("rate {rate} does not divide {n}")));
    }
    if offset >= rate {
        return Err(Error::invalid(format!("offset {offset} must lie in [0, {rate})")));
    }
    Ok(())
}

/// Folds a length-`N` column into `M = N/R` samples.
pub fn fold<T: Real>(col: &[Complex<T>], rate: usize, offset: usize) -> Result<Vec<Complex<T>>> {
    let n = col.len();
    check_rate(n, rate, offset)?;
    let m = n / rate;
    let w = fold_weights(n, rate, offset);
    Ok((0..m)
        .map(|i| {
            let mut acc = Complex::new(0.0, 0.0);
            for r in 0..rate {
                let p = i + r * m;
                acc += w[p] * c64(col[p]);
            }
            from_c64(acc)
        })
        .collect())
}

/// Adjoint of [`fold`]: `out[m + rM] = R^{-1/2} e^{+i2πδ(m+rM)/N} s[m]`.
pub fn unfold_adjoint<T: Real>(s: &[Complex<T>], rate: usize, offset: usize, n: usize) -> Result<Vec<Complex<T>>> {
    check_rate(n, rate, offset)?;
    let m = n / rate;
    if s.len() != m {
        return Err(Error::dims(format!("folded column has {} samples, expected {m}", s.len())));
    }
    let w = fold_weights(n, rate, offset);
    Ok((0..n).map(|p| from_c64(w[p].conj() * c64(s[p % m]))).collect())
}

fn check_maps_folded<T: Real>(maps: &CoilMaps<T>, rate: usize, offset: usize) -> Result<()> {
    let (n_pe, _) = maps.dims();
    check_rate(n_pe, rate, offset).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::DimensionMismatch(m),
        other => other,
    })
}

/// Folds a whole image along the phase-encode axis, optionally weighting by a
/// coil map first.
fn fold_image<T: Real>(x: &ComplexImage<T>, coil: &ComplexImage<T>, w: &[Complex<f64>], rate: usize) -> ComplexImage<T> {
    let (n_pe, n_ro) = x.dims();
    let m = n_pe / rate;
    let mut out = vec![Complex::new(0.0f64, 0.0); m * n_ro];
    for r in 0..rate {
        for i in 0..m {
            let p = i + r * m;
            let (xr, cr) = (x.row(p), coil.row(p));
            let dst = &mut out[i * n_ro..(i + 1) * n_ro];
            for j in 0..n_ro {
                dst[j] += w[p] * c64(cr[j] * xr[j]);
            }
        }
    }
    ComplexImage::new(m, n_ro, out.into_iter().map(from_c64).collect()).expect("sized")
}

/// `B x`: per coil, `fold(C^k ⊙ x)` down every column. No transforms.
pub fn apply_b<T: Real>(x: &ComplexImage<T>, maps: &CoilMaps<T>, rate: usize, offset: usize) -> Result<FoldedMeasurements<T>> {
    if x.dims() != maps.dims() {
        return Err(Error::dims(format!("image {:?} vs maps {:?}", x.dims(), maps.dims())));
    }
    check_maps_folded(maps, rate, offset)?;
    let n_pe = x.n_pe();
    let w = fold_weights(n_pe, rate, offset);
    let coils = (0..maps.n_coils())
        .into_par_iter()
        .map(|k| fold_image(x, maps.coil(k), &w, rate))
        .collect();
    FoldedMeasurements::new(coils, rate, offset, n_pe)
}

/// `Bᴴ s = Σ_k conj(C^k) ⊙ unfold_adjoint(s^k)`. No transforms.
pub fn apply_bh<T: Real>(s: &FoldedMeasurements<T>, maps: &CoilMaps<T>) -> Result<ComplexImage<T>> {
    let (n_pe, n_ro) = maps.dims();
    if s.n_pe() != n_pe || s.n_ro() != n_ro || s.coils().len() != maps.n_coils() {
        return Err(Error::dims(format!(
            "folded data ({} coils, {} rows, {} columns) vs maps ({} coils, {n_pe}x{n_ro})",
            s.coils().len(),
            s.n_pe(),
            s.n_ro(),
            maps.n_coils()
        )));
    }
    let rate = s.rate();
    let m = n_pe / rate;
    let w = fold_weights(n_pe, rate, s.offset());
    let per_coil: Vec<Vec<Complex<T>>> = s
        .coils()
        .par_iter()
        .enumerate()
        .map(|(k, sk)| {
            let coil = maps.coil(k);
            let mut out = Vec::with_capacity(n_pe * n_ro);
            for p in 0..n_pe {
                let wc = w[p].conj();
                let (src, cr) = (sk.row(p % m), coil.row(p));
                for j in 0..n_ro {
                    out.push(from_c64(c64(cr[j]).conj() * wc * c64(src[j])));
                }
            }
            out
        })
        .collect();
    Ok(sum_coils(per_coil, n_pe, n_ro))
}

/// The `R × R` block of `BᴴB + μI` for one aliasing set.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasingSystem {
    /// Image rows `{m, m+M, …, m+(R−1)M}` of the set.
    pub rows: Vec<usize>,
    /// Readout column shared by the set.
    pub col: usize,
    /// Row-major Hermitian matrix `Σ_k c_k c_kᴴ + μI`, accumulated in `f64`.
    pub matrix: Vec<Complex<f64>>,
}

impl AliasingSystem {
    pub fn rate(&self) -> usize {
        self.rows.len()
    }

    pub fn entry(&self, r: usize, c: usize) -> Complex<f64> {
        self.matrix[r * self.rows.len() + c]
    }
}

/// All aliasing systems of a slice, ordered by `(m, col)`.
#[derive(Debug, Clone)]
pub struct AliasingSystems {
    systems: Vec<AliasingSystem>,
    rate: usize,
    offset: usize,
    n_pe: usize,
    n_ro: usize,
    mu: f64,
}

pub fn assemble_aliasing_systems<T: Real>(maps: &CoilMaps<T>, rate: usize, offset: usize, mu: f64) -> Result<AliasingSystems> {
    check_maps_folded(maps, rate, offset)?;
    if !(mu >= 0.0) {
        return Err(Error::invalid(format!("mu must be >= 0, got {mu}")));
    }
    let (n_pe, n_ro) = maps.dims();
    let m = n_pe / rate;
    let w = fold_weights(n_pe, rate, offset);
    let systems = (0..m * n_ro)
        .into_par_iter()
        .map(|g| {
            let (i, col) = (g / n_ro, g % n_ro);
            let rows: Vec<usize> = (0..rate).map(|r| i + r * m).collect();
            let mut matrix = vec![Complex::new(0.0, 0.0); rate * rate];
            let mut a = vec![Complex::new(0.0, 0.0); rate];
            for k in 0..maps.n_coils() {
                let coil = maps.coil(k);
                // a_r = w(p) C^k[p, col]; row of B restricted to this set
                for (r, &p) in rows.iter().enumerate() {
                    a[r] = w[p] * c64(coil.at(p, col));
                }
                for r in 0..rate {
                    for c in 0..rate {
                        matrix[r * rate + c] += a[r].conj() * a[c];
                    }
                }
            }
            for r in 0..rate {
                matrix[r * rate + r] += mu;
            }
            AliasingSystem { rows, col, matrix }
        })
        .collect();
    Ok(AliasingSystems {
        systems,
        rate,
        offset,
        n_pe,
        n_ro,
        mu,
    })
}

impl AliasingSystems {
    pub fn systems(&self) -> &[AliasingSystem] {
        &self.systems
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn rate(&self) -> usize {
        self.rate
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_pe, self.n_ro)
    }

    fn check_image<T: Real>(&self, x: &ComplexImage<T>) -> Result<()> {
        if x.dims() != (self.n_pe, self.n_ro) {
            return Err(Error::dims(format!(
                "image {:?} vs aliasing systems over {}x{}",
                x.dims(),
                self.n_pe,
                self.n_ro
            )));
        }
        Ok(())
    }

    /// `(BᴴB + μI) x` evaluated block by block.
    pub fn apply<T: Real>(&self, x: &ComplexImage<T>) -> Result<ComplexImage<T>> {
        self.check_image(x)?;
        let mut out = ComplexImage::zeros(self.n_pe, self.n_ro);
        let rate = self.rate;
        for sys in &self.systems {
            for r in 0..rate {
                let mut acc = Complex::new(0.0, 0.0);
                for c in 0..rate {
                    acc += sys.matrix[r * rate + c] * c64(x.at(sys.rows[c], sys.col));
                }
                out.set(sys.rows[r], sys.col, from_c64(acc));
            }
        }
        Ok(out)
    }

    /// Solves `(BᴴB + μI) x = rhs` exactly, one Hermitian Cholesky per set.
    pub fn solve<T: Real>(&self, rhs: &ComplexImage<T>) -> Result<ComplexImage<T>> {
        self.solve_with_mu(rhs, self.mu)
    }

    /// Like [`solve`](Self::solve) but with the diagonal shift replaced by `mu`.
    pub fn solve_with_mu<T: Real>(&self, rhs: &ComplexImage<T>, mu: f64) -> Result<ComplexImage<T>> {
        self.check_image(rhs)?;
        let shift = mu - self.mu;
        let rate = self.rate;
        let m = self.n_pe / rate;
        let solved: Vec<Vec<Complex<f64>>> = self
            .systems
            .par_iter()
            .map(|sys| {
                let mut a = sys.matrix.clone();
                for r in 0..rate {
                    a[r * rate + r] += shift;
                }
                let b: Vec<Complex<f64>> = sys.rows.iter().map(|&p| c64(rhs.at(p, sys.col))).collect();
                cholesky_solve(&mut a, b, rate).ok_or_else(|| {
                    Error::numerical(format!(
                        "aliasing system for row {} column {} is singular (mu = {mu})",
                        sys.rows[0] % m,
                        sys.col
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let mut out = ComplexImage::zeros(self.n_pe, self.n_ro);
        for (sys, x) in self.systems.iter().zip(solved) {
            for (r, v) in x.into_iter().enumerate() {
                out.set(sys.rows[r], sys.col, from_c64(v));
            }
        }
        Ok(out)
    }
}

/// In-place `A = L Lᴴ` followed by forward/back substitution. Returns `None`
/// when a pivot is not safely positive.
pub(crate) fn cholesky_solve(a: &mut [Complex<f64>], mut b: Vec<Complex<f64>>, n: usize) -> Option<Vec<Complex<f64>>> {
    let scale = (0..n).map(|i| a[i * n + i].re.abs()).fold(0.0, f64::max);
    let floor = 1e-12 * scale.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = Complex::new(d, 0.0);
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = v / d;
        }
    }
    // L z = b
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i].re;
    }
    // Lᴴ x = z
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k * n + i].conj() * b[k];
        }
        b[i] = v / a[i * n + i].re;
    }
    Some(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{dft_naive, fft1d};
    use crate::sim::{adjoint_eh, forward_e, make_equispaced_mask, simulate_coil_maps};
    use crate::tensor::{hermitian_inner_product, norm2, MultiCoilImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cv(v: &[f64]) -> Vec<Complex<f64>> {
        v.iter().map(|&x| Complex::new(x, 0.0)).collect()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex<f64>> {
        (0..n)
            .map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn random_image<T: Real>(rng: &mut ChaCha8Rng, n_pe: usize, n_ro: usize) -> ComplexImage<T> {
        ComplexImage::from_fn(n_pe, n_ro, |_, _| {
            Complex::new(T::of(rng.gen_range(-1.0..1.0)), T::of(rng.gen_range(-1.0..1.0)))
        })
    }

    /// `F_M⁻¹ P_Ω F_N x` through naive DFTs.
    fn fold_oracle(x: &[Complex<f64>], rate: usize, offset: usize) -> Vec<Complex<f64>> {
        let k = dft_naive(x, false);
        let kept: Vec<_> = (0..x.len() / rate).map(|j| k[offset + j * rate]).collect();
        dft_naive(&kept, true)
    }

    #[test]
    fn fold_matches_fft_oracle_examples() {
        let x = cv(&[1.0, 2.0, 3.0, 4.0]);
        let out = fold(&x, 2, 0).unwrap();
        let expect = fold_oracle(&x, 2, 0);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!((out[0].re - 4.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((out[1].re - 6.0 / 2f64.sqrt()).abs() < 1e-12);

        let ones = cv(&[1.0; 4]);
        let out = fold(&ones, 2, 1).unwrap();
        assert!(out.iter().all(|z| z.norm() < 1e-12));
        assert!(fold_oracle(&ones, 2, 1).iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn fold_of_delta() {
        for rate in [1, 2, 4, 8] {
            let mut x = cv(&[0.0; 16]);
            x[0] = Complex::new(1.0, 0.0);
            let out = fold(&x, rate, 0).unwrap();
            assert!((out[0].re - 1.0 / (rate as f64).sqrt()).abs() < 1e-12);
            assert!(out[1..].iter().all(|z| z.norm() == 0.0));
        }
        assert!(fold(&cv(&[0.0; 6]), 4, 0).is_err());
    }

    #[test]
    fn fold_matches_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(n, rate) in &[(8, 2), (16, 4), (24, 8), (12, 3)] {
            for offset in 0..rate {
                let x = random_vec(&mut rng, n);
                let out = fold(&x, rate, offset).unwrap();
                for (a, b) in out.iter().zip(fold_oracle(&x, rate, offset)) {
                    assert!((a - b).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unfold_is_adjoint_and_right_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for rate in [1, 2, 4, 8] {
            for offset in 0..rate {
                let x = random_vec(&mut rng, 32);
                let s = random_vec(&mut rng, 32 / rate);
                let fx = fold(&x, rate, offset).unwrap();
                let us = unfold_adjoint(&s, rate, offset, 32).unwrap();
                let lhs: Complex<f64> = fx.iter().zip(&s).map(|(a, b)| a.conj() * b).sum();
                let rhs: Complex<f64> = x.iter().zip(&us).map(|(a, b)| a.conj() * b).sum();
                assert!((lhs - rhs).norm() < 1e-6);
                let back = fold(&us, rate, offset).unwrap();
                for (a, b) in back.iter().zip(&s) {
                    assert!((a - b).norm() < 1e-12);
                }
                if rate == 1 {
                    assert_eq!(us, s);
                }
            }
        }
        assert!(unfold_adjoint(&cv(&[1.0; 3]), 2, 0, 8).is_err());
    }

    #[test]
    fn preprocess_delta_and_counts() {
        let mask = make_equispaced_mask(8, 2, 0).unwrap();
        let mut coil = ComplexImage::<f64>::zeros(4, 6);
        coil.set(0, 0, Complex::new(1.0, 0.0));
        let y = MultiCoilKSpace::new(vec![coil], mask).unwrap();
        let c = TransformCounter::new();
        let s = preprocess_to_image_domain(&y, &c).unwrap();
        let expect = 1.0 / ((4 * 6) as f64).sqrt();
        assert!(s.coils()[0].data().iter().all(|z| (z.re - expect).abs() < 1e-12 && z.im.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = make_equispaced_mask(16, 4, 0).unwrap();
        let coils: Vec<_> = (0..16).map(|_| random_image::<f32>(&mut rng, 4, 8)).collect();
        let y = MultiCoilKSpace::new(coils, mask).unwrap();
        let c = TransformCounter::new();
        let s = preprocess_to_image_domain(&y, &c).unwrap();
        let snap = c.snapshot();
        assert_eq!((snap.fft2d, snap.ifft2d), (0, 16));
        assert_eq!((snap.fft, snap.ifft), (0, 16 * (4 + 8)));
        for (a, b) in s.coils().iter().zip(y.coils()) {
            assert!((norm2(a) - norm2(b)).abs() <= 1e-6 * norm2(b));
        }
    }

    #[test]
    fn apply_b_matches_fft_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = simulate_coil_maps::<f32>(4, 8, 8, 1).unwrap();
        for offset in 0..4 {
            let mask = make_equispaced_mask(8, 4, offset).unwrap();
            let x = random_image::<f32>(&mut rng, 8, 8);
            let c = TransformCounter::new();
            let oracle = preprocess_to_image_domain(&forward_e(&x, &maps, &mask, &c).unwrap(), &c).unwrap();
            let before = c.snapshot();
            let bx = apply_b(&x, &maps, 4, offset).unwrap();
            assert_eq!(c.snapshot(), before);
            let num = bx.distance_sq(&oracle).unwrap().sqrt();
            let den: f64 = oracle.coils().iter().map(|s| (norm2(s) as f64).powi(2)).sum::<f64>().sqrt();
            assert!(num <= 1e-5 * den, "offset {offset}: {num} vs {den}");
        }
    }

    #[test]
    fn apply_bh_matches_fft_path_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps = simulate_coil_maps::<f32>(3, 16, 8, 2).unwrap();
        let mask = make_equispaced_mask(16, 4, 3).unwrap();
        let coils: Vec<_> = (0..3).map(|_| random_image::<f32>(&mut rng, 4, 8)).collect();
        let y = MultiCoilKSpace::new(coils, mask).unwrap();
        let c = TransformCounter::new();
        let s = preprocess_to_image_domain(&y, &c).unwrap();
        let oracle = adjoint_eh(&y, &maps, &c).unwrap();
        let fast = apply_bh(&s, &maps).unwrap();
        assert!(norm2(&fast.sub(&oracle).unwrap()) <= 1e-5 * norm2(&oracle));

        let x = random_image::<f32>(&mut rng, 16, 8);
        let bx = apply_b(&x, &maps, 4, 3).unwrap();
        let lhs: Complex<f64> = bx
            .coils()
            .iter()
            .zip(s.coils())
            .map(|(a, b)| c64(hermitian_inner_product(a, b).unwrap()))
            .sum();
        let rhs = c64(hermitian_inner_product(&x, &fast).unwrap());
        assert!((lhs - rhs).norm() <= 1e-5 * (norm2(&x) * norm2(&fast)) as f64);
    }

    #[test]
    fn unit_coil_full_sampling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image::<f32>(&mut rng, 6, 5);
        let maps = CoilMaps::unit(6, 5);
        let bx = apply_b(&x, &maps, 1, 0).unwrap();
        assert_eq!(bx.coils()[0], x);
        assert_eq!(apply_bh(&bx, &maps).unwrap(), x);
    }

    #[test]
    fn aliasing_system_examples() {
        let maps = CoilMaps::<f64>::unit(4, 1);
        let sys = assemble_aliasing_systems(&maps, 2, 0, 0.0).unwrap();
        assert_eq!(sys.systems().len(), 2);
        for s in sys.systems() {
            for r in 0..2 {
                for c in 0..2 {
                    assert!((s.entry(r, c) - Complex::new(0.5, 0.0)).norm() < 1e-12);
                }
            }
        }
        let shifted = assemble_aliasing_systems(&maps, 2, 0, 1.0).unwrap();
        for (a, b) in sys.systems().iter().zip(shifted.systems()) {
            for r in 0..2 {
                for c in 0..2 {
                    let d = if r == c { 1.0 } else { 0.0 };
                    assert!((b.entry(r, c) - a.entry(r, c) - Complex::new(d, 0.0)).norm() < 1e-12);
                }
            }
        }

        // coil 1 only sees set member 0 (rows 0, 1), coil 2 only member 1 (rows 2, 3)
        let one = |rows: [usize; 2]| {
            ComplexImage::<f64>::from_fn(4, 1, |i, _| {
                if rows.contains(&i) {
                    Complex::new(1.0, 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                }
            })
        };
        let maps = CoilMaps::new(MultiCoilImage::new(vec![one([0, 1]), one([2, 3])]).unwrap());
        let sys = assemble_aliasing_systems(&maps, 2, 0, 0.0).unwrap();
        for s in sys.systems() {
            assert!((s.entry(0, 0).re - 0.5).abs() < 1e-12 && (s.entry(1, 1).re - 0.5).abs() < 1e-12);
            assert!(s.entry(0, 1).norm() < 1e-12 && s.entry(1, 0).norm() < 1e-12);
        }
    }

    /// Dense `EᴴE` on a single-column image via naive DFTs, block read out.
    #[test]
    fn aliasing_block_matches_dense_normal_operator() {
        let n = 4;
        let mut ehe = vec![vec![Complex::new(0.0, 0.0); n]; n];
        for col in 0..n {
            let mut x = vec![Complex::new(0.0, 0.0); n];
            x[col] = Complex::new(1.0, 0.0);
            let k = dft_naive(&x, false);
            let mut filled = vec![Complex::new(0.0, 0.0); n];
            for r in (0..n).step_by(2) {
                filled[r] = k[r];
            }
            for (row, v) in dft_naive(&filled, true).into_iter().enumerate() {
                ehe[row][col] = v;
            }
        }
        let sys = assemble_aliasing_systems(&CoilMaps::<f64>::unit(4, 1), 2, 0, 0.0).unwrap();
        for s in sys.systems() {
            for r in 0..2 {
                for c in 0..2 {
                    assert!((s.entry(r, c) - ehe[s.rows[r]][s.rows[c]]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn aliasing_sets_partition_pixels() {
        let maps = simulate_coil_maps::<f32>(2, 16, 5, 0).unwrap();
        for rate in [1, 2, 4, 8] {
            let sys = assemble_aliasing_systems(&maps, rate, rate - 1, 0.1).unwrap();
            assert_eq!(sys.systems().len(), 16 / rate * 5);
            let mut hits = vec![0u8; 16 * 5];
            for s in sys.systems() {
                for &r in &s.rows {
                    hits[r * 5 + s.col] += 1;
                }
                for r in 0..rate {
                    for c in 0..rate {
                        assert!((s.entry(r, c) - s.entry(c, r).conj()).norm() < 1e-12);
                    }
                }
            }
            assert!(hits.iter().all(|&h| h == 1));
        }
    }

    #[test]
    fn block_normal_operator_matches_fft_normal_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps = simulate_coil_maps::<f32>(4, 16, 8, 3).unwrap();
        for offset in [0, 1, 3] {
            let mask = make_equispaced_mask(16, 4, offset).unwrap();
            let x = random_image::<f32>(&mut rng, 16, 8);
            let c = TransformCounter::new();
            let oracle = adjoint_eh(&forward_e(&x, &maps, &mask, &c).unwrap(), &maps, &c).unwrap();
            let before = c.snapshot();
            let sys = assemble_aliasing_systems(&maps, 4, offset, 0.0).unwrap();
            let fast = sys.apply(&x).unwrap();
            assert_eq!(c.snapshot(), before);
            assert!(norm2(&fast.sub(&oracle).unwrap()) <= 1e-5 * norm2(&oracle));
        }
    }

    #[test]
    fn block_solve_inverts_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps = simulate_coil_maps::<f32>(4, 16, 8, 4).unwrap();
        let sys = assemble_aliasing_systems(&maps, 4, 1, 0.05).unwrap();
        let x = random_image::<f32>(&mut rng, 16, 8);
        let b = sys.apply(&x).unwrap();
        let back = sys.solve(&b).unwrap();
        assert!(norm2(&back.sub(&x).unwrap()) <= 1e-5 * norm2(&x));
        let residual = sys.apply(&back).unwrap().sub(&b).unwrap();
        assert!(norm2(&residual) <= 1e-5 * norm2(&b));
    }

    #[test]
    fn singular_block_is_reported() {
        let sys = assemble_aliasing_systems(&CoilMaps::<f32>::unit(8, 2), 2, 0, 0.0).unwrap();
        let rhs = ComplexImage::<f32>::from_fn(8, 2, |_, _| Complex::new(1.0, 0.0));
        match sys.solve(&rhs) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("row 0 column 0"), "{msg}"),
            other => panic!("expected singular failure, got {other:?}"),
        }
        assert!(sys.solve_with_mu(&rhs, 1.0).is_ok());
    }

    #[test]
    fn fold_uses_no_transforms() {
        let c = TransformCounter::new();
        let v = vec![Complex::new(1.0f32, 0.0); 8];
        fft1d(&v, false, &c);
        let before = c.snapshot();
        let f = fold(&v, 2, 1).unwrap();
        unfold_adjoint(&f, 2, 1, 8).unwrap();
        assert_eq!(c.snapshot(), before);
    }
}
