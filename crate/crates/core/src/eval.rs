//! Image quality metrics, transform-count reporting and the variant
//! benchmark.
//!
//! Metrics are computed on magnitude images with the reference maximum as
//! the dynamic range.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fourier::TransformCounter;
use crate::nn::WeightStore;
use crate::quant::QuantizedWeightStore;
use crate::recon::{reconstruct_baselines, unrolled_vsqp, Regularizer, RegularizerKind, UnrollConfig};
use crate::sim::SimulatedSlice;
use crate::solve::{cg_sense, zero_filled};
use crate::tensor::{ComplexImage, Real};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const CSV_HEADER: &str = "variant,psnr_db,ssim,wall_time_s,fft_count,ifft_count,fingerprint";

fn magnitudes<T: Real>(a: &ComplexImage<T>, b: &ComplexImage<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    a.ensure_same_dims(b)?;
    Ok((
        a.data().iter().map(|z| z.norm().f64()).collect(),
        b.data().iter().map(|z| z.norm().f64()).collect(),
    ))
}

/// `20·log10(max|ref| / RMSE)`; identical images give `f64::INFINITY`.
pub fn psnr<T: Real>(reference: &ComplexImage<T>, est: &ComplexImage<T>) -> Result<f64> {
    let (r, e) = magnitudes(reference, est)?;
    let peak = r.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::invalid("PSNR reference is identically zero"));
    }
    let mse = r.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-region filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows.
pub fn ssim<T: Real>(reference: &ComplexImage<T>, est: &ComplexImage<T>) -> Result<f64> {
    let (r, e) = magnitudes(reference, est)?;
    let (h, w) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dims(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let l = r.iter().cloned().fold(0.0, f64::max);
    if !(l > 0.0) {
        return Err(Error::invalid("SSIM reference is identically zero"));
    }
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let g = gaussian_taps();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_r = filter_valid(&r, h, w, &g);
    let mu_e = filter_valid(&e, h, w, &g);
    let rr = filter_valid(&prod(&r, &r), h, w, &g);
    let ee = filter_valid(&prod(&e, &e), h, w, &g);
    let re = filter_valid(&prod(&r, &e), h, w, &g);
    let mut total = 0.0;
    for i in 0..mu_r.len() {
        let (mr, me) = (mu_r[i], mu_e[i]);
        let vr = rr[i] - mr * mr;
        let ve = ee[i] - me * me;
        let cov = re[i] - mr * me;
        total += ((2.0 * mr * me + c1) * (2.0 * cov + c2)) / ((mr * mr + me * me + c1) * (vr + ve + c2));
    }
    Ok(total / mu_r.len() as f64)
}

/// `(fft_count, ifft_count)` at 1D-transform granularity: one 2D transform
/// on `n_pe × n_ro` contributes `n_pe + n_ro`.
pub fn report_counts(counter: &TransformCounter) -> (u64, u64) {
    let s = counter.snapshot();
    (s.fft, s.ifft)
}

/// Hex SHA-256 of a canonical configuration string.
pub fn fingerprint(canonical: &str) -> String {
    fingerprint_bytes(canonical.as_bytes())
}

/// Truncated hex SHA-256 of arbitrary bytes, e.g. a weight file.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub wall_time_s: f64,
    pub fft_count: u64,
    pub ifft_count: u64,
    pub fingerprint: String,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{}",
            self.variant,
            fmt_db(self.psnr_db),
            self.ssim,
            self.wall_time_s,
            self.fft_count,
            self.ifft_count,
            self.fingerprint
        )
    }
}

/// Writes the header and one LF-terminated row per report.
pub fn write_csv<W: Write>(out: &mut W, rows: &[MetricsReport], header: bool) -> Result<()> {
    if header {
        out.write_all(CSV_HEADER.as_bytes())?;
        out.write_all(b"\n")?;
    }
    for r in rows {
        out.write_all(r.csv_row().as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    ZeroFilled,
    CgSense { iters: usize },
    Unrolled(UnrollConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchVariant {
    pub name: String,
    pub method: Method,
}

/// Regularizer weights available to benchmark variants.
#[derive(Debug, Clone, Copy, Default)]
pub struct BenchWeights<'a> {
    pub float: Option<&'a WeightStore<f32>>,
    pub int8: Option<&'a QuantizedWeightStore>,
}

impl<'a> BenchWeights<'a> {
    pub fn regularizer(&self, kind: RegularizerKind) -> Result<Regularizer<'a>> {
        match kind {
            RegularizerKind::Identity => Ok(Regularizer::Identity),
            RegularizerKind::Float32 => self
                .float
                .map(Regularizer::Float32)
                .ok_or_else(|| Error::invalid("variant needs float weights")),
            RegularizerKind::Int8 => self
                .int8
                .map(Regularizer::Int8)
                .ok_or_else(|| Error::invalid("variant needs quantized weights")),
        }
    }
}

/// Runs one method on a slice.
pub fn run_method(
    slice: &SimulatedSlice<f32>,
    method: &Method,
    weights: &BenchWeights<'_>,
    counter: &TransformCounter,
) -> Result<ComplexImage<f32>> {
    match method {
        Method::ZeroFilled => zero_filled(&slice.kspace, &slice.maps, counter),
        Method::CgSense { iters } => cg_sense(
            &slice.kspace,
            &slice.maps,
            &slice.mask,
            *iters,
            crate::recon::BASELINE_CG_TOL,
            counter,
        ),
        Method::Unrolled(cfg) => unrolled_vsqp(&slice.kspace, &slice.maps, &weights.regularizer(cfg.regularizer)?, cfg, counter),
    }
}

/// Canonical description of everything that determines a variant's output.
pub fn canonical_config(slice: &SimulatedSlice<f32>, variant: &BenchVariant, threads: usize) -> String {
    let (n_pe, n_ro) = slice.ground_truth.dims();
    format!(
        "n_pe={n_pe};n_ro={n_ro};n_c={};rate={};offset={};sigma={};seed={};threads={threads};variant={};method={:?}",
        slice.maps.n_coils(),
        slice.mask.rate(),
        slice.mask.offset(),
        slice.sigma,
        slice.seed,
        variant.name,
        variant.method
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times every variant: one warm-up run (excluded), then `repeats` timed
/// runs; reports the median time, metrics against ground truth and the
/// transform counts of a single run.
pub fn benchmark(
    slice: &SimulatedSlice<f32>,
    variants: &[BenchVariant],
    weights: &BenchWeights<'_>,
    repeats: usize,
) -> Result<Vec<MetricsReport>> {
    if repeats < 3 {
        return Err(Error::invalid(format!("benchmark needs at least 3 repeats, got {repeats}")));
    }
    let threads = rayon::current_num_threads();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let counter = TransformCounter::new();
        let image = run_method(slice, &v.method, weights, &counter)?;
        let (fft_count, ifft_count) = report_counts(&counter);
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let c = TransformCounter::new();
            let t0 = Instant::now();
            let out = run_method(slice, &v.method, weights, &c)?;
            times.push(t0.elapsed().as_secs_f64());
            if out != image {
                return Err(Error::numerical(format!("variant {} is not deterministic", v.name)));
            }
        }
        rows.push(MetricsReport {
            variant: v.name.clone(),
            psnr_db: psnr(&slice.ground_truth, &image)?,
            ssim: ssim(&slice.ground_truth, &image)?,
            wall_time_s: median(times),
            fft_count,
            ifft_count,
            fingerprint: fingerprint(&canonical_config(slice, v, threads)),
        });
    }
    Ok(rows)
}

/// Baseline metrics helper used by reports: `(zero-filled, CG-SENSE)` PSNR.
pub fn baseline_psnr(slice: &SimulatedSlice<f32>, cg_iters: usize) -> Result<(f64, f64)> {
    let b = reconstruct_baselines(&slice.kspace, &slice.maps, cg_iters, &TransformCounter::new())?;
    Ok((psnr(&slice.ground_truth, &b.zero_filled)?, psnr(&slice.ground_truth, &b.cg_sense)?))
}
