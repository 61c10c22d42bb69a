//! Unrolled variable-splitting reconstruction: alternate a regularizer step
//! and a data-fidelity solve for a fixed number of unrolls.

use crate::error::{Error, Result};
use crate::fftfree::{apply_bh, assemble_aliasing_systems, preprocess_to_image_domain};
use crate::fourier::{TransformCounter, TransformCounts};
use crate::nn::{resnet_forward, WeightStore};
use crate::quant::{resnet_forward_int8, QuantizedWeightStore};
use crate::sim::{CoilMaps, MultiCoilKSpace, SimulatedSlice};
use crate::solve::{cg_sense, df_update, zero_filled, DfBackend, DfConfig, DfOperators};
use crate::tensor::{ComplexImage, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    Float32,
    Int8,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineBackend {
    Fft,
    FftFree,
}

impl PipelineBackend {
    pub fn of(df: DfBackend) -> Self {
        if df.is_fft_free() {
            Self::FftFree
        } else {
            Self::Fft
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrollConfig {
    pub n_unrolls: usize,
    pub df: DfConfig,
    pub regularizer: RegularizerKind,
    pub backend: PipelineBackend,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        let df = DfConfig::default();
        Self {
            n_unrolls: 10,
            backend: PipelineBackend::of(df.backend),
            df,
            regularizer: RegularizerKind::Float32,
        }
    }
}

impl UnrollConfig {
    /// Config whose pipeline backend follows the data-fidelity backend.
    pub fn new(n_unrolls: usize, df: DfConfig, regularizer: RegularizerKind) -> Self {
        Self {
            n_unrolls,
            backend: PipelineBackend::of(df.backend),
            df,
            regularizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_unrolls == 0 {
            return Err(Error::invalid("n_unrolls must be >= 1"));
        }
        if PipelineBackend::of(self.df.backend) != self.backend {
            return Err(Error::invalid(format!(
                "data-fidelity backend {} does not belong to the {:?} pipeline",
                self.df.backend.name(),
                self.backend
            )));
        }
        self.df.validate()
    }
}

/// Regularizer weights for one reconstruction; shared across unrolls.
#[derive(Debug, Clone, Copy)]
pub enum Regularizer<'a> {
    Float32(&'a WeightStore<f32>),
    Int8(&'a QuantizedWeightStore),
    Identity,
}

impl Regularizer<'_> {
    pub fn kind(&self) -> RegularizerKind {
        match self {
            Regularizer::Float32(_) => RegularizerKind::Float32,
            Regularizer::Int8(_) => RegularizerKind::Int8,
            Regularizer::Identity => RegularizerKind::Identity,
        }
    }

    pub fn apply<T: Real>(&self, x: &ComplexImage<T>) -> Result<ComplexImage<T>> {
        match self {
            Regularizer::Float32(w) => Ok(resnet_forward(&x.cast::<f32>(), w)?.cast()),
            Regularizer::Int8(w) => Ok(resnet_forward_int8(&x.cast::<f32>(), w)?.cast()),
            Regularizer::Identity => Ok(x.clone()),
        }
    }
}

/// Reconstruction plus the transform counts of its two stages.
#[derive(Debug, Clone)]
pub struct ReconOutput<T: Real> {
    pub image: ComplexImage<T>,
    /// Pre-processing and initialization.
    pub init_counts: TransformCounts,
    /// All data-fidelity solves.
    pub df_counts: TransformCounts,
    /// Regularizer input at each unroll, `x⁽⁰⁾ … x⁽ⁿ⁻¹⁾`.
    pub iterates: Vec<ComplexImage<T>>,
}

/// Runs the unrolled pipeline and reports per-stage transform counts.
pub fn unrolled_vsqp_report<T: Real>(
    y: &MultiCoilKSpace<T>,
    maps: &CoilMaps<T>,
    regularizer: &Regularizer<'_>,
    cfg: &UnrollConfig,
    counter: &TransformCounter,
) -> Result<ReconOutput<T>> {
    cfg.validate()?;
    if regularizer.kind() != cfg.regularizer {
        return Err(Error::invalid(format!(
            "config expects a {:?} regularizer, got {:?}",
            cfg.regularizer,
            regularizer.kind()
        )));
    }
    let mask = y.mask();
    if maps.dims() != (mask.n_pe(), y.n_ro()) {
        return Err(Error::dims(format!(
            "coil maps are {:?}, k-space implies {}x{}",
            maps.dims(),
            mask.n_pe(),
            y.n_ro()
        )));
    }
    let start = counter.snapshot();
    let mut systems = None;
    let x0 = match cfg.backend {
        PipelineBackend::Fft => zero_filled(y, maps, counter)?,
        PipelineBackend::FftFree => {
            // the only transforms of this pipeline
            let s = preprocess_to_image_domain(y, counter)?;
            if cfg.df.backend == DfBackend::FftFreeDirect {
                systems = Some(assemble_aliasing_systems(maps, mask.rate(), mask.offset(), cfg.df.mu_at(0))?);
            }
            apply_bh(&s, maps)?
        }
    };
    let init_counts = counter.snapshot() - start;
    let ops = match cfg.backend {
        PipelineBackend::Fft => DfOperators::Fft { maps, mask, counter },
        PipelineBackend::FftFree => DfOperators::FftFree {
            maps,
            rate: mask.rate(),
            offset: mask.offset(),
            systems: systems.as_ref(),
        },
    };
    let mut df_counts = TransformCounts::default();
    let mut x = x0.clone();
    let mut iterates = Vec::with_capacity(cfg.n_unrolls);
    for i in 0..cfg.n_unrolls {
        let z = regularizer.apply(&x)?;
        iterates.push(x);
        let before = counter.snapshot();
        x = df_update(&z, &x0, cfg.df.mu_at(i), &cfg.df, &ops)?;
        df_counts = df_counts + (counter.snapshot() - before);
    }
    Ok(ReconOutput {
        image: x,
        init_counts,
        df_counts,
        iterates,
    })
}

/// Unrolled reconstruction `x⁽ⁱ⁾ = DF(R(x⁽ⁱ⁻¹⁾))` from the zero-filled image.
pub fn unrolled_vsqp<T: Real>(
    y: &MultiCoilKSpace<T>,
    maps: &CoilMaps<T>,
    regularizer: &Regularizer<'_>,
    cfg: &UnrollConfig,
    counter: &TransformCounter,
) -> Result<ComplexImage<T>> {
    Ok(unrolled_vsqp_report(y, maps, regularizer, cfg, counter)?.image)
}

/// Regularizer inputs `x⁽⁰⁾..x⁽ⁿ⁻¹⁾` of the pipeline over several slices,
/// in slice order. Used as calibration data for quantization.
pub fn regularizer_inputs(
    slices: &[SimulatedSlice<f32>],
    reg: &Regularizer<'_>,
    cfg: &UnrollConfig,
) -> Result<Vec<ComplexImage<f32>>> {
    let counter = TransformCounter::new();
    let mut out = Vec::new();
    for s in slices {
        out.extend(unrolled_vsqp_report(&s.kspace, &s.maps, reg, cfg, &counter)?.iterates);
    }
    Ok(out)
}

/// CG iterations for the clinical baseline. Early stopping acts as the
/// regularizer; at R = 4 more iterations amplify noise.
pub const BASELINE_CG_ITERS: usize = 3;
pub const BASELINE_CG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Baselines<T: Real> {
    pub zero_filled: ComplexImage<T>,
    pub cg_sense: ComplexImage<T>,
}

/// Zero-filled and CG-SENSE reconstructions from the same inputs.
pub fn reconstruct_baselines<T: Real>(
    y: &MultiCoilKSpace<T>,
    maps: &CoilMaps<T>,
    cg_iters: usize,
    counter: &TransformCounter,
) -> Result<Baselines<T>> {
    Ok(Baselines {
        zero_filled: zero_filled(y, maps, counter)?,
        cg_sense: cg_sense(y, maps, y.mask(), cg_iters, BASELINE_CG_TOL, counter)?,
    })
}
