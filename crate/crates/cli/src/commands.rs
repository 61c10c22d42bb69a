use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use pdmr_core::eval::{
    benchmark, canonical_config, fingerprint, fingerprint_bytes, psnr, report_counts, ssim, write_csv, BenchVariant,
    BenchWeights, Method, MetricsReport,
};
use pdmr_core::format::{
    decode_dataset, decode_image, decode_weights, encode_weights, save_dataset, save_image, save_weights,
    WeightFile, DATASET_MAGIC,
};
use pdmr_core::nn::{NetworkSpec, WeightStore};
use pdmr_core::quant::quantize_weights;
use pdmr_core::recon::{
    regularizer_inputs, unrolled_vsqp, Regularizer, RegularizerKind, UnrollConfig, BASELINE_CG_ITERS, BASELINE_CG_TOL,
};
use pdmr_core::sim::{simulate_slice, PhantomKind, SimParams, SimulatedSlice};
use pdmr_core::solve::{cg_sense, zero_filled, DfBackend, DfConfig, DEFAULT_MU};
use pdmr_core::train::{gradient_check, train_on_pipeline_iterates, IterateTrainConfig, TrainConfig};
use pdmr_core::{Complex, ComplexImage, TransformCounter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::*;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(pdmr_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use pdmr_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidArgument(_)) => 1,
            CliError::Core(E::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<pdmr_core::Error> for CliError {
    fn from(e: pdmr_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Simulate(a) => simulate(&a, seed),
        Command::Recon(a) => recon(&a),
        Command::Train(a) => train(&a, seed),
        Command::Quantize(a) => quantize(&a, seed),
        Command::Gradcheck(a) => gradcheck(&a, seed),
        Command::Bench(a) => bench(&a, seed),
        Command::Eval(a) => eval(&a),
    }
}

fn sim_params(a: &SliceArgs, seed: u64) -> SimParams {
    SimParams {
        n_pe: a.npe,
        n_ro: a.nro,
        n_coils: a.coils,
        rate: a.accel,
        offset: a.offset,
        sigma: a.sigma,
        seed,
        phantom: match a.phantom {
            PhantomArg::SheppLogan => PhantomKind::SheppLogan,
            PhantomArg::Random => PhantomKind::Random,
        },
    }
}

/// Dataset files when given, otherwise `n_slices` simulated slices with
/// seeds `seed, seed + 1, ...`.
fn load_suite(a: &SuiteArgs, seed: u64) -> Result<Vec<SimulatedSlice<f32>>> {
    if !a.data.is_empty() {
        return a.data.iter().map(|p| load_dataset(p)).collect();
    }
    if a.n_slices == 0 {
        return Err(usage("--n-slices must be at least 1"));
    }
    (0..a.n_slices as u64)
        .map(|i| Ok(simulate_slice(&sim_params(&a.slice, seed.wrapping_add(i)))?))
        .collect()
}

/// Reads a file, naming it in the error.
fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn load_dataset(path: &Path) -> Result<SimulatedSlice<f32>> {
    Ok(decode_dataset(&read_file(path)?)?)
}

fn load_float_weights(path: &Path) -> Result<WeightStore<f32>> {
    match decode_weights(&read_file(path)?)? {
        WeightFile::Float(w) => Ok(w),
        WeightFile::Quantized(_) => Err(usage(format!("{} holds quantized weights; float weights expected", path.display()))),
    }
}

fn mu_or_default(mu: &[f64]) -> Vec<f64> {
    if mu.is_empty() {
        vec![DEFAULT_MU]
    } else {
        mu.to_vec()
    }
}

fn append_metrics(path: &Path, row: &MetricsReport) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    write_csv(&mut f, std::slice::from_ref(row), fresh)?;
    Ok(())
}

fn simulate(a: &SimulateArgs, seed: u64) -> Result<()> {
    let s: SimulatedSlice<f32> = simulate_slice(&sim_params(&a.slice, seed))?;
    save_dataset(&a.out, &s)?;
    println!(
        "wrote {}: {}x{}, {} coils, R={} offset {}, {} sampled rows, sigma {}, seed {}",
        a.out.display(),
        a.slice.npe,
        a.slice.nro,
        a.slice.coils,
        a.slice.accel,
        a.slice.offset,
        s.mask.n_sampled(),
        a.slice.sigma,
        seed
    );
    Ok(())
}

fn recon(a: &ReconArgs) -> Result<()> {
    let slice = load_dataset(&a.data)?;
    let counter = TransformCounter::new();
    let threads = rayon::current_num_threads();
    let t0 = Instant::now();
    let (name, image, canonical) = match a.method {
        MethodArg::Zerofill => {
            let img = zero_filled(&slice.kspace, &slice.maps, &counter)?;
            let v = BenchVariant {
                name: "zerofill".into(),
                method: Method::ZeroFilled,
            };
            (v.name.clone(), img, canonical_config(&slice, &v, threads))
        }
        MethodArg::Cgsense => {
            let iters = a.cg_iters.unwrap_or(BASELINE_CG_ITERS);
            let tol = a.cg_tol.unwrap_or(BASELINE_CG_TOL);
            let img = cg_sense(&slice.kspace, &slice.maps, &slice.mask, iters, tol, &counter)?;
            let v = BenchVariant {
                name: "cgsense".into(),
                method: Method::CgSense { iters },
            };
            let canonical = format!("{};cg_tol={tol}", canonical_config(&slice, &v, threads));
            (v.name.clone(), img, canonical)
        }
        MethodArg::PdaiFft | MethodArg::PdaiFftfree => {
            let path = a.weights.as_ref().ok_or_else(|| usage("--weights is required for the pdai methods"))?;
            let bytes = read_file(path)?;
            let file = decode_weights(&bytes)?;
            let defaults = DfConfig::default();
            let backend = match (a.method, a.df) {
                (MethodArg::PdaiFft, _) => DfBackend::FftCg,
                (_, DfArg::Cg) => DfBackend::FftFreeCg,
                (_, DfArg::Direct) => DfBackend::FftFreeDirect,
            };
            let df = DfConfig {
                mu: a.mu.map(|m| vec![m]).unwrap_or_else(|| mu_or_default(file.mu())),
                cg_iters: a.cg_iters.unwrap_or(defaults.cg_iters),
                cg_tol: a.cg_tol.unwrap_or(defaults.cg_tol),
                backend,
            };
            let (reg, kind) = match (&file, a.quant) {
                (WeightFile::Float(w), QuantArg::Fp32) => (Regularizer::Float32(w), RegularizerKind::Float32),
                (WeightFile::Quantized(q), QuantArg::Int8) => (Regularizer::Int8(q), RegularizerKind::Int8),
                (WeightFile::Float(_), QuantArg::Int8) => {
                    return Err(usage("--quant int8 needs quantized weights (see `pdmr quantize`)"))
                }
                (WeightFile::Quantized(_), QuantArg::Fp32) => return Err(usage("--quant fp32 needs float weights")),
            };
            let cfg = UnrollConfig::new(a.unrolls, df, kind);
            let img = unrolled_vsqp(&slice.kspace, &slice.maps, &reg, &cfg, &counter)?;
            let stem = if a.method == MethodArg::PdaiFft { "pdai-fft" } else { "pdai-fftfree" };
            let quant = if a.quant == QuantArg::Int8 { "int8" } else { "fp32" };
            let v = BenchVariant {
                name: format!("{stem}-{quant}"),
                method: Method::Unrolled(cfg),
            };
            let canonical = format!("{};weights={}", canonical_config(&slice, &v, threads), fingerprint_bytes(&bytes));
            (v.name.clone(), img, canonical)
        }
    };
    let wall_time_s = t0.elapsed().as_secs_f64();
    let (fft_count, ifft_count) = report_counts(&counter);
    let row = MetricsReport {
        variant: name,
        psnr_db: psnr(&slice.ground_truth, &image)?,
        ssim: ssim(&slice.ground_truth, &image)?,
        wall_time_s,
        fft_count,
        ifft_count,
        fingerprint: fingerprint(&canonical),
    };
    println!(
        "{}: psnr {:.4} dB, ssim {:.4}, {:.3} s",
        row.variant, row.psnr_db, row.ssim, row.wall_time_s
    );
    if a.count_ops {
        let c = counter.snapshot();
        println!(
            "transforms: 1D fft {} ifft {}; 2D fft {} ifft {}",
            c.fft, c.ifft, c.fft2d, c.ifft2d
        );
    }
    if let Some(out) = &a.out {
        save_image(out, &image)?;
    }
    if let Some(m) = &a.metrics {
        append_metrics(m, &row)?;
    }
    Ok(())
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let slices = load_suite(&a.suite, seed)?;
    let cfg = IterateTrainConfig {
        train: TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch,
            learning_rate: a.lr,
            seed,
            net: NetworkSpec::toy(a.blocks, a.channels),
            ..TrainConfig::default()
        },
        rounds: a.rounds,
        unroll: UnrollConfig::new(
            a.unrolls,
            DfConfig {
                mu: vec![a.mu],
                ..DfConfig::default()
            },
            RegularizerKind::Float32,
        ),
        stride: a.stride,
    };
    let out = train_on_pipeline_iterates(&slices, &cfg)?;
    save_weights(&a.out, &WeightFile::Float(out.weights))?;
    if let Some(path) = &a.loss_log {
        let mut f = fs::File::create(path)?;
        writeln!(f, "round,epoch,loss")?;
        for (r, log) in out.round_logs.iter().enumerate() {
            for (e, l) in log.iter().enumerate() {
                writeln!(f, "{r},{e},{l:.8}")?;
            }
        }
    }
    for (r, log) in out.round_logs.iter().enumerate() {
        println!(
            "round {r}: loss {:.4} -> {:.4}",
            log[0],
            log.last().copied().unwrap_or(f64::NAN)
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn quantize(a: &QuantizeArgs, seed: u64) -> Result<()> {
    let w = load_float_weights(&a.weights)?;
    let slices = load_suite(&a.suite, seed)?;
    let cfg = UnrollConfig::new(
        a.unrolls,
        DfConfig {
            mu: mu_or_default(&w.mu),
            ..DfConfig::default()
        },
        RegularizerKind::Float32,
    );
    let calib = regularizer_inputs(&slices, &Regularizer::Float32(&w), &cfg)?;
    let (q, report) = quantize_weights(&w, &calib)?;
    let float_size = encode_weights(&WeightFile::Float(w))?.len();
    let file = WeightFile::Quantized(q);
    let q_size = encode_weights(&file)?.len();
    save_weights(&a.out, &file)?;
    for name in &report.degenerate {
        eprintln!("warning: degenerate range for {name}");
    }
    println!(
        "calibrated on {} images; wrote {} ({} bytes, {:.1}% of float)",
        calib.len(),
        a.out.display(),
        q_size,
        100.0 * q_size as f64 / float_size as f64
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let spec = NetworkSpec::toy(a.blocks, a.channels);
    spec.validate()?;
    let w = WeightStore::<f32>::init_uniform(spec, seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |n| ComplexImage::from_fn(n, n, |_, _| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let x = random(a.size);
    let r = random(a.size);
    let g = gradient_check(&x, &r, &w, a.step, 1e-4)?;
    let ok = g.max_rel_err < a.tol;
    println!(
        "params {} loss {:.6} max rel err {:.3e} (tol {:.1e}): {}",
        g.n_params,
        g.loss,
        g.max_rel_err,
        a.tol,
        if ok { "ok" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(pdmr_core::Error::Numerical(format!("gradient check failed: {:.3e}", g.max_rel_err)).into())
    }
}

fn parse_variant(name: &str, unrolls: usize) -> Result<BenchVariant> {
    let method = match name {
        "zerofill" => Method::ZeroFilled,
        "cgsense" => Method::CgSense {
            iters: BASELINE_CG_ITERS,
        },
        _ => {
            let rest = name
                .strip_prefix("pdai-")
                .ok_or_else(|| usage(format!("unknown variant `{name}`")))?;
            let (stem, quant) = rest
                .rsplit_once('-')
                .ok_or_else(|| usage(format!("unknown variant `{name}`")))?;
            let backend = match stem {
                "fft" => DfBackend::FftCg,
                "fftfree" => DfBackend::FftFreeDirect,
                "fftfree-cg" => DfBackend::FftFreeCg,
                _ => return Err(usage(format!("unknown variant `{name}`"))),
            };
            let kind = match quant {
                "fp32" => RegularizerKind::Float32,
                "int8" => RegularizerKind::Int8,
                _ => return Err(usage(format!("unknown variant `{name}`"))),
            };
            Method::Unrolled(UnrollConfig::new(
                unrolls,
                DfConfig {
                    backend,
                    ..DfConfig::default()
                },
                kind,
            ))
        }
    };
    Ok(BenchVariant {
        name: name.to_string(),
        method,
    })
}

fn bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let slice = match &a.data {
        Some(p) => load_dataset(p)?,
        None => simulate_slice(&sim_params(&a.slice, seed))?,
    };
    let float = match &a.weights {
        Some(p) => load_float_weights(p)?,
        None => {
            let spec = NetworkSpec::toy(a.blocks, a.channels);
            spec.validate()?;
            eprintln!("no --weights given; using an untrained {}x{} network", a.blocks, a.channels);
            WeightStore::init_uniform(spec, seed)
        }
    };
    let mu = mu_or_default(&float.mu);
    let mut variants = a
        .variants
        .iter()
        .map(|v| parse_variant(v, a.unrolls))
        .collect::<Result<Vec<_>>>()?;
    for v in &mut variants {
        if let Method::Unrolled(cfg) = &mut v.method {
            cfg.df.mu = mu.clone();
        }
    }
    let needs_int8 = variants
        .iter()
        .any(|v| matches!(&v.method, Method::Unrolled(c) if c.regularizer == RegularizerKind::Int8));
    let int8 = if needs_int8 {
        let cfg = UnrollConfig::new(
            a.unrolls,
            DfConfig {
                mu: mu.clone(),
                ..DfConfig::default()
            },
            RegularizerKind::Float32,
        );
        let calib = regularizer_inputs(std::slice::from_ref(&slice), &Regularizer::Float32(&float), &cfg)?;
        Some(quantize_weights(&float, &calib)?.0)
    } else {
        None
    };
    let weights = BenchWeights {
        float: Some(&float),
        int8: int8.as_ref(),
    };
    let rows = benchmark(&slice, &variants, &weights, a.repeats)?;
    match &a.out {
        Some(p) => write_csv(&mut fs::File::create(p)?, &rows, true)?,
        None => write_csv(&mut std::io::stdout().lock(), &rows, true)?,
    }
    Ok(())
}

fn load_reference(path: &Path) -> Result<ComplexImage<f32>> {
    let bytes = read_file(path)?;
    if bytes.starts_with(DATASET_MAGIC) {
        Ok(decode_dataset(&bytes)?.ground_truth)
    } else {
        Ok(decode_image(&bytes)?)
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let reference = load_reference(&a.reference)?;
    let estimate = decode_image(&read_file(&a.estimate)?)?;
    let p = psnr(&reference, &estimate)?;
    let s = ssim(&reference, &estimate)?;
    let p = if p.is_infinite() { "inf".to_string() } else { format!("{p:.4}") };
    println!("psnr_db,ssim");
    println!("{p},{s:.4}");
    Ok(())
}
