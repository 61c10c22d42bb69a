//! Solvers for the data-fidelity sub-problem
//! `x = argmin ‖y − E x‖² + μ‖x − z‖²`, i.e. `(EᴴE + μI) x = Eᴴy + μz`,
//! and the unregularized CG-SENSE baseline.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fftfree::{apply_b, apply_bh, assemble_aliasing_systems, AliasingSystems};
use crate::fourier::TransformCounter;
use crate::sim::{adjoint_eh, forward_e, CoilMaps, MultiCoilKSpace, SamplingMask};
use crate::tensor::{hermitian_inner_product, norm2_slice, ComplexImage, Real};

/// How the data-fidelity system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DfBackend {
    /// CG with `EᴴE` applied through FFTs.
    FftCg,
    /// CG with `BᴴB` applied through the fold operator (no FFTs).
    FftFreeCg,
    /// Exact per-aliasing-set Cholesky solves (no FFTs).
    FftFreeDirect,
}

impl DfBackend {
    pub fn is_fft_free(self) -> bool {
        !matches!(self, DfBackend::FftCg)
    }

    pub fn name(self) -> &'static str {
        match self {
            DfBackend::FftCg => "fft-cg",
            DfBackend::FftFreeCg => "fftfree-cg",
            DfBackend::FftFreeDirect => "fftfree-direct",
        }
    }
}

pub const DEFAULT_MU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct DfConfig {
    /// Penalty weight per unroll. A single entry is shared by all unrolls.
    pub mu: Vec<f64>,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub backend: DfBackend,
}

impl Default for DfConfig {
    fn default() -> Self {
        Self {
            mu: vec![DEFAULT_MU],
            cg_iters: 10,
            cg_tol: 1e-10,
            backend: DfBackend::FftFreeDirect,
        }
    }
}

impl DfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cg_iters == 0 {
            return Err(Error::invalid("cg_iters must be >= 1"));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::invalid("cg_tol must be > 0"));
        }
        if self.mu.is_empty() || self.mu.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("mu must be a non-empty list of finite values >= 0"));
        }
        Ok(())
    }

    /// Penalty for unroll `i` (0-based); a shared value applies to all unrolls.
    pub fn mu_at(&self, i: usize) -> f64 {
        if self.mu.len() == 1 {
            self.mu[0]
        } else {
            self.mu[i.min(self.mu.len() - 1)]
        }
    }
}

/// Solution of a CG run and the relative residual after every iteration.
#[derive(Debug, Clone)]
pub struct CgOutcome<T: Real> {
    pub x: ComplexImage<T>,
    pub residual_history: Vec<f64>,
}

fn real_dot<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>) -> Result<f64> {
    Ok(hermitian_inner_product(a, b)?.re.f64())
}

fn cg_core<T: Real>(
    mut apply_a: impl FnMut(&ComplexImage<T>) -> Result<ComplexImage<T>>,
    b: &ComplexImage<T>,
    iters: usize,
    tol: f64,
    divergence_window: Option<usize>,
) -> Result<CgOutcome<T>> {
    if iters == 0 {
        return Err(Error::invalid("CG needs at least one iteration"));
    }
    if !b.is_finite() {
        return Err(Error::numerical("CG right-hand side is not finite"));
    }
    let (n_pe, n_ro) = b.dims();
    let b_norm = norm2_slice(b.data());
    let mut x = ComplexImage::zeros(n_pe, n_ro);
    let mut history = Vec::with_capacity(iters);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            residual_history: history,
        });
    }
    let mut r = b.clone();
    let mut p = b.clone();
    let mut rs = b_norm * b_norm;
    let mut growth = 0usize;

    for it in 0..iters {
        let ap = apply_a(&p)?;
        ap.ensure_same_dims(&p)?;
        let p_ap = real_dot(&p, &ap)?;
        let alpha = rs / p_ap;
        if !alpha.is_finite() {
            return Err(Error::numerical(format!("CG step size is not finite at iteration {it}")));
        }
        let a = Complex::new(T::of(alpha), T::zero());
        x.axpy(a, &p)?;
        r.axpy(-a, &ap)?;
        let rs_new = norm2_slice(r.data()).powi(2);
        if !rs_new.is_finite() {
            return Err(Error::numerical(format!("CG residual is NaN at iteration {it}")));
        }
        let rel = rs_new.sqrt() / b_norm;
        // CG residuals oscillate on ill-conditioned systems, so growth only
        // counts while the residual sits above its starting value.
        if let (Some(window), Some(&prev)) = (divergence_window, history.last()) {
            growth = if rel > prev && rel > 1.0 { growth + 1 } else { 0 };
            if growth >= window {
                return Err(Error::numerical(format!(
                    "CG diverged: residual grew for {window} consecutive iterations (iteration {it})"
                )));
            }
        }
        history.push(rel);
        if rel <= tol {
            break;
        }
        let beta = Complex::new(T::of(rs_new / rs), T::zero());
        rs = rs_new;
        // p = r + beta p
        for (pi, ri) in p.data_mut().iter_mut().zip(r.data()) {
            *pi = *ri + beta * *pi;
        }
    }
    Ok(CgOutcome {
        x,
        residual_history: history,
    })
}

/// Conjugate gradient for a Hermitian positive (semi)definite operator,
/// started from zero. Stops after `iters` iterations or once the relative
/// residual `‖b − A x‖/‖b‖` reaches `tol`.
pub fn cg_solve<T: Real>(
    apply_a: impl FnMut(&ComplexImage<T>) -> Result<ComplexImage<T>>,
    b: &ComplexImage<T>,
    iters: usize,
    tol: f64,
) -> Result<CgOutcome<T>> {
    cg_core(apply_a, b, iters, tol, None)
}

/// The encoding operators a data-fidelity update may use.
pub enum DfOperators<'a, T: Real> {
    /// `E` through FFTs.
    Fft {
        maps: &'a CoilMaps<T>,
        mask: &'a SamplingMask,
        counter: &'a TransformCounter,
    },
    /// `B` through the fold operator. `systems` is required by the direct
    /// backend and assembled on the fly when absent.
    FftFree {
        maps: &'a CoilMaps<T>,
        rate: usize,
        offset: usize,
        systems: Option<&'a AliasingSystems>,
    },
}

/// `(EᴴE + μI)⁻¹ (rhs_data_term + μz)` with the configured backend, where
/// `rhs_data_term` is the precomputed `Eᴴy` (or `Bᴴs`).
pub fn df_update<T: Real>(
    z: &ComplexImage<T>,
    rhs_data_term: &ComplexImage<T>,
    mu: f64,
    cfg: &DfConfig,
    ops: &DfOperators<'_, T>,
) -> Result<ComplexImage<T>> {
    cfg.validate()?;
    if !(mu >= 0.0) {
        return Err(Error::invalid(format!("mu must be >= 0, got {mu}")));
    }
    z.ensure_same_dims(rhs_data_term)?;
    let mut rhs = rhs_data_term.clone();
    rhs.axpy(Complex::new(T::of(mu), T::zero()), z)?;
    let mu_t = Complex::new(T::of(mu), T::zero());

    match (cfg.backend, ops) {
        (DfBackend::FftCg, DfOperators::Fft { maps, mask, counter }) => {
            let apply = |p: &ComplexImage<T>| {
                let mut out = adjoint_eh(&forward_e(p, maps, mask, counter)?, maps, counter)?;
                out.axpy(mu_t, p)?;
                Ok(out)
            };
            Ok(cg_solve(apply, &rhs, cfg.cg_iters, cfg.cg_tol)?.x)
        }
        (DfBackend::FftFreeCg, DfOperators::FftFree { maps, rate, offset, .. }) => {
            let apply = |p: &ComplexImage<T>| {
                let mut out = apply_bh(&apply_b(p, maps, *rate, *offset)?, maps)?;
                out.axpy(mu_t, p)?;
                Ok(out)
            };
            Ok(cg_solve(apply, &rhs, cfg.cg_iters, cfg.cg_tol)?.x)
        }
        (DfBackend::FftFreeDirect, DfOperators::FftFree { maps, rate, offset, systems }) => match systems {
            Some(sys) => sys.solve_with_mu(&rhs, mu),
            None => assemble_aliasing_systems(maps, *rate, *offset, mu)?.solve(&rhs),
        },
        (backend, _) => Err(Error::invalid(format!(
            "backend {} does not match the supplied operators",
            backend.name()
        ))),
    }
}

/// Clinical CG-SENSE: CG on `EᴴE x = Eᴴy` with no regularizer. Fails if the
/// residual grows three iterations in a row while above `‖Eᴴy‖`.
pub fn cg_sense<T: Real>(
    y: &MultiCoilKSpace<T>,
    maps: &CoilMaps<T>,
    mask: &SamplingMask,
    iters: usize,
    tol: f64,
    counter: &TransformCounter,
) -> Result<ComplexImage<T>> {
    if y.mask() != mask {
        return Err(Error::dims("k-space was not acquired with the given mask"));
    }
    let rhs = adjoint_eh(y, maps, counter)?;
    let apply = |p: &ComplexImage<T>| adjoint_eh(&forward_e(p, maps, mask, counter)?, maps, counter);
    Ok(cg_core(apply, &rhs, iters, tol, Some(3))?.x)
}

/// Coil-combined zero-filled reconstruction `Eᴴy`.
pub fn zero_filled<T: Real>(y: &MultiCoilKSpace<T>, maps: &CoilMaps<T>, counter: &TransformCounter) -> Result<ComplexImage<T>> {
    adjoint_eh(y, maps, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fftfree::preprocess_to_image_domain;
    use crate::sim::{make_equispaced_mask, simulate_coil_maps};
    use crate::tensor::norm2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image<T: Real>(rng: &mut ChaCha8Rng, n_pe: usize, n_ro: usize) -> ComplexImage<T> {
        ComplexImage::from_fn(n_pe, n_ro, |_, _| {
            Complex::new(T::of(rng.gen_range(-1.0..1.0)), T::of(rng.gen_range(-1.0..1.0)))
        })
    }

    type Dense = Vec<Vec<Complex<f64>>>;

    fn matvec(a: &Dense, x: &[Complex<f64>]) -> Vec<Complex<f64>> {
        a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
    }

    /// Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Dense, mut b: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
        let n = b.len();
        for c in 0..n {
            let piv = (c..n).max_by(|&i, &j| a[i][c].norm().total_cmp(&a[j][c].norm())).unwrap();
            a.swap(c, piv);
            b.swap(c, piv);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    let v = a[c][k];
                    a[r][k] -= f * v;
                }
                let v = b[c];
                b[r] -= f * v;
            }
        }
        let mut x = vec![Complex::new(0.0, 0.0); n];
        for r in (0..n).rev() {
            let mut v = b[r];
            for k in r + 1..n {
                v -= a[r][k] * x[k];
            }
            x[r] = v / a[r][r];
        }
        x
    }

    fn rel(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn cg_identity_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_image::<f32>(&mut rng, 3, 4);
        let out = cg_solve(|p| Ok(p.clone()), &b, 5, 1e-6).unwrap();
        assert_eq!(out.residual_history.len(), 1);
        assert!(out.residual_history[0] < 1e-7);
        assert!(norm2(&out.x.sub(&b).unwrap()) < 1e-6);
    }

    #[test]
    fn cg_diagonal() {
        let b = ComplexImage::<f64>::from_real(1, 2, &[1.0, 2.0]).unwrap();
        let d = [1.0, 2.0];
        let out = cg_solve(
            |p| {
                Ok(ComplexImage::new(1, 2, p.data().iter().zip(d).map(|(z, s)| z * s).collect())?)
            },
            &b,
            10,
            1e-12,
        )
        .unwrap();
        assert!((out.x.at(0, 0) - Complex::new(1.0, 0.0)).norm() < 1e-12);
        assert!((out.x.at(0, 1) - Complex::new(1.0, 0.0)).norm() < 1e-12);
    }

    fn random_hpd(rng: &mut ChaCha8Rng, n: usize) -> Dense {
        let g: Dense = (0..n)
            .map(|_| (0..n).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
            .collect();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let s: Complex<f64> = (0..n).map(|k| g[k][i].conj() * g[k][j]).sum();
                        if i == j {
                            s + 1.0
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn cg_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_hpd(&mut rng, 8);
        let b = random_image::<f64>(&mut rng, 2, 4);
        let oracle = dense_solve(a.clone(), b.data().to_vec());
        let out = cg_solve(|p| ComplexImage::new(2, 4, matvec(&a, p.data())), &b, 8, 1e-14).unwrap();
        assert!(out.residual_history.len() <= 8);
        assert!(rel(out.x.data(), &oracle) < 1e-6);
    }

    #[test]
    fn cg_reports_nan() {
        let b = ComplexImage::<f64>::from_real(1, 2, &[1.0, 1.0]).unwrap();
        let err = cg_solve(|p| Ok(p.map(|_| Complex::new(f64::NAN, 0.0))), &b, 3, 1e-9).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("iteration 0")), "{err}");
    }

    #[test]
    fn cg_zero_rhs() {
        let b = ComplexImage::<f64>::zeros(2, 2);
        let out = cg_solve(|p| Ok(p.clone()), &b, 3, 1e-9).unwrap();
        assert_eq!(out.x, b);
    }

    #[test]
    fn cg_sense_flags_divergence() {
        // an indefinite, shrinking operator (as from an unstable upstream
        // stage) drives the residual up without bound
        let b = ComplexImage::<f64>::from_fn(4, 4, |i, j| Complex::new((i * 4 + j) as f64 - 7.5, 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut calls = 0;
        let unstable = |p: &ComplexImage<f64>| {
            calls += 1;
            let shrink = 0.5f64.powi(calls);
            Ok(p.map(|z| z * rng.gen_range(-1.0..1.0) * shrink))
        };
        match cg_core(unstable, &b, 50, 1e-12, Some(3)) {
            Err(Error::Numerical(m)) => assert!(m.contains("diverged"), "{m}"),
            Ok(out) => panic!("expected divergence, history {:?}", out.residual_history),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn cg_error_energy_norm_decreases_on_ill_conditioned_sense() {
        // the residual itself oscillates here; the A-norm of the error is the
        // quantity CG minimizes and must not increase
        let maps = simulate_coil_maps::<f64>(8, 32, 32, 1).unwrap();
        let mask = make_equispaced_mask(32, 4, 0).unwrap();
        let c = TransformCounter::new();
        let gt = crate::sim::shepp_logan::<f64>(32, 32).unwrap();
        let y = forward_e(&gt, &maps, &mask, &c).unwrap();
        let b = adjoint_eh(&y, &maps, &c).unwrap();
        let apply = |p: &ComplexImage<f64>| adjoint_eh(&forward_e(p, &maps, &mask, &c)?, &maps, &c);
        let mut last = f64::INFINITY;
        for iters in 1..25 {
            let x = cg_solve(apply, &b, iters, 1e-300).unwrap().x;
            let e = x.sub(&gt).unwrap();
            let energy = real_dot(&e, &apply(&e).unwrap()).unwrap();
            assert!(energy <= last * (1.0 + 1e-9), "iteration {iters}: {energy} > {last}");
            last = energy;
        }
    }

    #[test]
    fn cg_residual_is_nonincreasing_on_sense_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let maps = simulate_coil_maps::<f64>(4, 16, 8, seed).unwrap();
            let mask = make_equispaced_mask(16, 2, 0).unwrap();
            let c = TransformCounter::new();
            let b = random_image::<f64>(&mut rng, 16, 8);
            let out = cg_solve(
                |p| {
                    let mut o = adjoint_eh(&forward_e(p, &maps, &mask, &c)?, &maps, &c)?;
                    o.axpy(Complex::new(0.05, 0.0), p)?;
                    Ok(o)
                },
                &b,
                30,
                1e-12,
            )
            .unwrap();
            for w in out.residual_history.windows(2) {
                assert!(w[1] <= w[0], "{:?}", out.residual_history);
            }
        }
    }

    fn dense_normal(maps: &CoilMaps<f64>, mask: &SamplingMask, mu: f64) -> Dense {
        let (n_pe, n_ro) = maps.dims();
        let n = n_pe * n_ro;
        let c = TransformCounter::new();
        let mut a = vec![vec![Complex::new(0.0, 0.0); n]; n];
        for col in 0..n {
            let mut e = ComplexImage::<f64>::zeros(n_pe, n_ro);
            e.data_mut()[col] = Complex::new(1.0, 0.0);
            let v = adjoint_eh(&forward_e(&e, maps, mask, &c).unwrap(), maps, &c).unwrap();
            for row in 0..n {
                a[row][col] = v.data()[row] + if row == col { mu } else { 0.0 };
            }
        }
        a
    }

    #[test]
    fn all_backends_match_dense_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n_pe, n_ro, mu) = (8, 8, 0.05);
        let maps = simulate_coil_maps::<f64>(4, n_pe, n_ro, 7).unwrap();
        let mask = make_equispaced_mask(n_pe, 2, 1).unwrap();
        let c = TransformCounter::new();
        let x_true = random_image::<f64>(&mut rng, n_pe, n_ro);
        let y = forward_e(&x_true, &maps, &mask, &c).unwrap();
        let z = random_image::<f64>(&mut rng, n_pe, n_ro);
        let ehy = adjoint_eh(&y, &maps, &c).unwrap();

        let mut rhs = ehy.clone();
        rhs.axpy(Complex::new(mu, 0.0), &z).unwrap();
        let oracle = dense_solve(dense_normal(&maps, &mask, mu), rhs.data().to_vec());

        let s = preprocess_to_image_domain(&y, &c).unwrap();
        let bhs = apply_bh(&s, &maps).unwrap();
        let mut outs = Vec::new();
        for backend in [DfBackend::FftCg, DfBackend::FftFreeCg, DfBackend::FftFreeDirect] {
            let cfg = DfConfig {
                mu: vec![mu],
                cg_iters: 50,
                cg_tol: 1e-12,
                backend,
            };
            let out = if backend.is_fft_free() {
                let ops = DfOperators::FftFree {
                    maps: &maps,
                    rate: 2,
                    offset: 1,
                    systems: None,
                };
                df_update(&z, &bhs, mu, &cfg, &ops).unwrap()
            } else {
                let ops = DfOperators::Fft {
                    maps: &maps,
                    mask: &mask,
                    counter: &c,
                };
                df_update(&z, &ehy, mu, &cfg, &ops).unwrap()
            };
            assert!(rel(out.data(), &oracle) < 1e-5, "{backend:?}");
            outs.push(out);
        }
        for o in &outs[1..] {
            assert!(rel(o.data(), outs[0].data()) < 1e-5);
        }
    }

    #[test]
    fn large_mu_returns_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps = simulate_coil_maps::<f32>(4, 16, 8, 1).unwrap();
        let mask = make_equispaced_mask(16, 4, 0).unwrap();
        let c = TransformCounter::new();
        let z = random_image::<f32>(&mut rng, 16, 8);
        let y = forward_e(&random_image(&mut rng, 16, 8), &maps, &mask, &c).unwrap();
        let ehy = adjoint_eh(&y, &maps, &c).unwrap();
        let cfg = DfConfig {
            mu: vec![1e6],
            ..DfConfig::default()
        };
        let ops = DfOperators::FftFree {
            maps: &maps,
            rate: 4,
            offset: 0,
            systems: None,
        };
        let out = df_update(&z, &ehy, 1e6, &cfg, &ops).unwrap();
        assert!(norm2(&out.sub(&z).unwrap()) <= 1e-4 * norm2(&z));
    }

    #[test]
    fn zero_mu_unit_coil_full_sampling_returns_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let maps = CoilMaps::<f32>::unit(8, 8);
        let mask = make_equispaced_mask(8, 1, 0).unwrap();
        let c = TransformCounter::new();
        let gt = random_image::<f32>(&mut rng, 8, 8);
        let y = forward_e(&gt, &maps, &mask, &c).unwrap();
        let ehy = adjoint_eh(&y, &maps, &c).unwrap();
        let z = random_image::<f32>(&mut rng, 8, 8);
        for backend in [DfBackend::FftCg, DfBackend::FftFreeDirect] {
            let cfg = DfConfig {
                mu: vec![0.0],
                backend,
                ..DfConfig::default()
            };
            let ops = if backend.is_fft_free() {
                DfOperators::FftFree {
                    maps: &maps,
                    rate: 1,
                    offset: 0,
                    systems: None,
                }
            } else {
                DfOperators::Fft {
                    maps: &maps,
                    mask: &mask,
                    counter: &c,
                }
            };
            let out = df_update(&z, &ehy, 0.0, &cfg, &ops).unwrap();
            assert!(norm2(&out.sub(&gt).unwrap()) <= 1e-5 * norm2(&gt));
        }
    }

    #[test]
    fn zero_mu_singular_group_is_named() {
        let maps = CoilMaps::<f32>::unit(8, 4);
        let rhs = ComplexImage::<f32>::from_fn(8, 4, |_, _| Complex::new(1.0, 0.0));
        let cfg = DfConfig {
            mu: vec![0.0],
            ..DfConfig::default()
        };
        let ops = DfOperators::FftFree {
            maps: &maps,
            rate: 2,
            offset: 0,
            systems: None,
        };
        let err = df_update(&rhs, &rhs, 0.0, &cfg, &ops).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("row 0 column 0")), "{err}");
    }

    #[test]
    fn fft_free_backends_use_no_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps = simulate_coil_maps::<f32>(4, 16, 8, 2).unwrap();
        let c = TransformCounter::new();
        let z = random_image::<f32>(&mut rng, 16, 8);
        for backend in [DfBackend::FftFreeCg, DfBackend::FftFreeDirect] {
            let cfg = DfConfig {
                backend,
                ..DfConfig::default()
            };
            let ops = DfOperators::FftFree {
                maps: &maps,
                rate: 4,
                offset: 2,
                systems: None,
            };
            df_update(&z, &z, 0.05, &cfg, &ops).unwrap();
        }
        assert_eq!(c.snapshot(), Default::default());
    }

    #[test]
    fn mismatched_backend_is_rejected() {
        let maps = CoilMaps::<f32>::unit(4, 4);
        let z = ComplexImage::<f32>::zeros(4, 4);
        let cfg = DfConfig {
            backend: DfBackend::FftCg,
            ..DfConfig::default()
        };
        let ops = DfOperators::FftFree {
            maps: &maps,
            rate: 1,
            offset: 0,
            systems: None,
        };
        assert!(matches!(df_update(&z, &z, 0.1, &cfg, &ops), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cg_sense_recovers_noiseless_phantom() {
        let maps = simulate_coil_maps::<f32>(8, 64, 64, 3).unwrap();
        let mask = make_equispaced_mask(64, 4, 0).unwrap();
        let gt = crate::sim::shepp_logan::<f32>(64, 64).unwrap();
        let c = TransformCounter::new();
        let y = forward_e(&gt, &maps, &mask, &c).unwrap();
        let x = cg_sense(&y, &maps, &mask, 200, 1e-6, &c).unwrap();
        let err = norm2(&x.sub(&gt).unwrap()) / norm2(&gt);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn cg_sense_full_sampling_single_coil() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps = CoilMaps::<f32>::unit(8, 8);
        let mask = make_equispaced_mask(8, 1, 0).unwrap();
        let c = TransformCounter::new();
        let gt = random_image::<f32>(&mut rng, 8, 8);
        let y = forward_e(&gt, &maps, &mask, &c).unwrap();
        let x = cg_sense(&y, &maps, &mask, 1, 1e-9, &c).unwrap();
        let ehy = zero_filled(&y, &maps, &c).unwrap();
        assert!(norm2(&x.sub(&ehy).unwrap()) <= 1e-6 * norm2(&ehy));
    }

    #[test]
    fn zero_filled_matches_fft_free_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps = simulate_coil_maps::<f32>(4, 16, 8, 2).unwrap();
        let mask = make_equispaced_mask(16, 4, 1).unwrap();
        let c = TransformCounter::new();
        let y = forward_e(&random_image(&mut rng, 16, 8), &maps, &mask, &c).unwrap();
        let zf = zero_filled(&y, &maps, &c).unwrap();
        let alt = apply_bh(&preprocess_to_image_domain(&y, &c).unwrap(), &maps).unwrap();
        assert!(norm2(&zf.sub(&alt).unwrap()) <= 1e-5 * norm2(&zf));
    }

    #[test]
    fn zero_filled_shows_foldover() {
        // correlation with the ground truth shifted by M rows should clearly
        // exceed the correlation with an unrelated noise image
        let n = 64;
        let gt = crate::sim::shepp_logan::<f32>(n, n).unwrap();
        let maps = CoilMaps::<f32>::unit(n, n);
        let mask = make_equispaced_mask(n, 4, 0).unwrap();
        let c = TransformCounter::new();
        let zf = zero_filled(&forward_e(&gt, &maps, &mask, &c).unwrap(), &maps, &c).unwrap();
        let m = n / 4;
        let shifted = ComplexImage::from_fn(n, n, |i, j| gt.at((i + n - m) % n, j));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = random_image::<f32>(&mut rng, n, n);
        let corr = |a: &ComplexImage<f32>, b: &ComplexImage<f32>| {
            hermitian_inner_product(a, b).unwrap().norm() / (norm2(a) * norm2(b))
        };
        let alias = corr(&zf, &shifted);
        let floor = corr(&zf, &noise);
        assert!(alias > 5.0 * floor, "alias {alias} vs floor {floor}");
    }
}
