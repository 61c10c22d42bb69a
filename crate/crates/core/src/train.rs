//! Supervised training of the regularizer as a standalone artifact-removal
//! network with the normalized ℓ1-ℓ2 loss.
//!
//! Gradients are computed by reverse mode in `f64`. The ℓ1 subgradient at a
//! zero residual is taken as 0.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fourier::TransformCounter;
use crate::nn::{
    conv2d, correlate_plane, image_to_channels, simd, FeatureMap, NetworkSpec, Tensor, WeightStore,
};
use crate::recon::{unrolled_vsqp_report, Regularizer, RegularizerKind, UnrollConfig};
use crate::sim::SimulatedSlice;
use crate::solve::DfConfig;
use crate::tensor::{ComplexImage, Real};
use num_complex::Complex;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub net: NetworkSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            net: NetworkSpec::toy(3, 16),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.net.validate()
    }
}

fn ref_norms<T: Real>(reference: &ComplexImage<T>) -> Result<(f64, f64)> {
    let l2 = reference.data().iter().map(|z| z.norm_sqr().f64()).sum::<f64>().sqrt();
    let l1 = reference.data().iter().map(|z| z.norm().f64()).sum::<f64>();
    if !(l2 > 0.0) || !(l1 > 0.0) {
        return Err(Error::invalid("loss reference is zero; normalization undefined"));
    }
    Ok((l2, l1))
}

/// `‖ref−est‖₂/‖ref‖₂ + ‖ref−est‖₁/‖ref‖₁` with the modulus as ℓ1 element norm.
pub fn loss_normalized_l1l2<T: Real>(reference: &ComplexImage<T>, est: &ComplexImage<T>) -> Result<f64> {
    reference.ensure_same_dims(est)?;
    let (n2, n1) = ref_norms(reference)?;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (r, e) in reference.data().iter().zip(est.data()) {
        let d = Complex::new(r.re.f64() - e.re.f64(), r.im.f64() - e.im.f64());
        sq += d.norm_sqr();
        abs += d.norm();
    }
    Ok(sq.sqrt() / n2 + abs / n1)
}

/// Gradient of the loss with respect to `est`, packed as `∂/∂re + i·∂/∂im`.
pub fn loss_gradient<T: Real>(reference: &ComplexImage<T>, est: &ComplexImage<T>) -> Result<ComplexImage<f64>> {
    reference.ensure_same_dims(est)?;
    let (n2, n1) = ref_norms(reference)?;
    let diff: Vec<Complex<f64>> = reference
        .data()
        .iter()
        .zip(est.data())
        .map(|(r, e)| Complex::new(e.re.f64() - r.re.f64(), e.im.f64() - r.im.f64()))
        .collect();
    let dn = diff.iter().map(|d| d.norm_sqr()).sum::<f64>().sqrt();
    let c2 = if dn > 0.0 { 1.0 / (dn * n2) } else { 0.0 };
    let data = diff
        .iter()
        .map(|&d| {
            let m = d.norm();
            let l1 = if m > 0.0 { d / (m * n1) } else { Complex::new(0.0, 0.0) };
            d * c2 + l1
        })
        .collect();
    ComplexImage::new(est.n_pe(), est.n_ro(), data)
}

/// Activations kept for the backward pass.
struct Trace {
    input: FeatureMap<f64>,
    /// Residual stream entering each block, then the tail input.
    h: Vec<FeatureMap<f64>>,
    /// Pre-activation of conv1 per block.
    a: Vec<FeatureMap<f64>>,
    /// Post-ReLU conv1 output per block.
    t: Vec<FeatureMap<f64>>,
    out: ComplexImage<f64>,
}

fn conv_layer(f: &FeatureMap<f64>, w: &WeightStore<f64>, name: &str) -> Result<FeatureMap<f64>> {
    conv2d(f, w.get(&format!("{name}.weight"))?, w.get(&format!("{name}.bias"))?)
}

fn forward_trace(x: &ComplexImage<f64>, w: &WeightStore<f64>) -> Result<Trace> {
    w.validate()?;
    let s = w.spec.residual_scale;
    let input = image_to_channels(x);
    let mut h = vec![conv_layer(&input, w, "head")?];
    let mut a = Vec::new();
    let mut t = Vec::new();
    for b in 0..w.spec.n_blocks {
        let pre = conv_layer(&h[b], w, &format!("blocks.{b}.conv1"))?;
        let mut post = pre.clone();
        post.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let u = conv_layer(&post, w, &format!("blocks.{b}.conv2"))?;
        let mut next = h[b].clone();
        for (n, &v) in next.data.iter_mut().zip(&u.data) {
            *n += s * v;
        }
        a.push(pre);
        t.push(post);
        h.push(next);
    }
    let o = conv_layer(&h[w.spec.n_blocks], w, "tail")?;
    let hw = x.len();
    let out = ComplexImage::from_fn(x.n_pe(), x.n_ro(), |i, j| {
        let p = i * x.n_ro() + j;
        Complex::new(o.data[p] + input.data[p], o.data[hw + p] + input.data[hw + p])
    });
    Ok(Trace { input, h, a, t, out })
}

/// Sum over the overlap of `g` and `src` shifted by `(dy, dx)`.
fn shifted_dot(g: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let base = sy as usize * w;
        let gs = &g[y * w + x0..y * w + x1];
        let ss = &src[(base as isize + x0 as isize + dx) as usize..(base as isize + x1 as isize + dx) as usize];
        acc += gs.iter().zip(ss).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Backward pass of one convolution. Returns `(dW, dB, dInput)`; the input
/// gradient is skipped when `need_input` is false.
fn conv_backward(
    input: &FeatureMap<f64>,
    weight: &Tensor<f64>,
    g_out: &FeatureMap<f64>,
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Option<FeatureMap<f64>>) {
    let (c_out, c_in, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    let p = (k / 2) as isize;
    let db: Vec<f64> = (0..c_out).map(|co| g_out.plane(co).iter().sum()).collect();
    let mut dw = vec![0.0; weight.data.len()];
    dw.par_chunks_mut(c_in * k * k).enumerate().for_each(|(co, chunk)| {
        let g = g_out.plane(co);
        for ci in 0..c_in {
            let src = input.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    chunk[(ci * k + ky) * k + kx] = shifted_dot(g, src, h, w, ky as isize - p, kx as isize - p);
                }
            }
        }
    });
    let g_in = need_input.then(|| {
        let mut data = vec![0.0; c_in * hw];
        data.par_chunks_mut(hw).enumerate().for_each(|(ci, dst)| {
            // correlation with the transposed, flipped kernel
            let mut taps = Vec::with_capacity(c_out * k * k);
            for co in 0..c_out {
                for ky in (0..k).rev() {
                    for kx in (0..k).rev() {
                        taps.push(weight.data[((co * c_in + ci) * k + ky) * k + kx]);
                    }
                }
            }
            simd(|| correlate_plane(dst, &g_out.data, h, w, k, &taps, |a, b, wv| *a += wv * b));
        });
        FeatureMap {
            channels: c_in,
            height: h,
            width: w,
            data,
        }
    });
    (dw, db, g_in)
}

/// Loss of `resnet_forward(x, w)` against `reference` and its gradient with
/// respect to every tensor of `w`.
pub fn backprop_resnet(
    x: &ComplexImage<f64>,
    reference: &ComplexImage<f64>,
    w: &WeightStore<f64>,
) -> Result<(f64, WeightStore<f64>)> {
    x.ensure_same_dims(reference)?;
    let tr = forward_trace(x, w)?;
    let loss = loss_normalized_l1l2(reference, &tr.out)?;
    let g = loss_gradient(reference, &tr.out)?;
    let mut grads = WeightStore::<f64>::zeros(w.spec);
    grads.mu = w.mu.clone();
    grads.shared_mu = w.shared_mu;
    let mut put = |name: &str, dw: Vec<f64>, db: Vec<f64>| {
        grads.tensors.get_mut(&format!("{name}.weight")).expect("layer").data = dw;
        grads.tensors.get_mut(&format!("{name}.bias")).expect("layer").data = db;
    };

    let g_out = image_to_channels(&g);
    let nb = w.spec.n_blocks;
    let s = w.spec.residual_scale;
    let (dw, db, gh) = conv_backward(&tr.h[nb], w.get("tail.weight")?, &g_out, true);
    put("tail", dw, db);
    let mut gh = gh.expect("input gradient");
    for b in (0..nb).rev() {
        let mut gu = gh.clone();
        gu.data.iter_mut().for_each(|v| *v *= s);
        let c2 = format!("blocks.{b}.conv2");
        let (dw, db, gt) = conv_backward(&tr.t[b], w.get(&format!("{c2}.weight"))?, &gu, true);
        put(&c2, dw, db);
        let mut ga = gt.expect("input gradient");
        for (gv, &av) in ga.data.iter_mut().zip(&tr.a[b].data) {
            if av <= 0.0 {
                *gv = 0.0;
            }
        }
        let c1 = format!("blocks.{b}.conv1");
        let (dw, db, gin) = conv_backward(&tr.h[b], w.get(&format!("{c1}.weight"))?, &ga, true);
        put(&c1, dw, db);
        for (a, v) in gh.data.iter_mut().zip(gin.expect("input gradient").data) {
            *a += v;
        }
    }
    let (dw, db, _) = conv_backward(&tr.input, w.get("head.weight")?, &gh, false);
    put("head", dw, db);
    Ok((loss, grads))
}

/// Loss of the network output, used by finite-difference checks.
pub fn network_loss(x: &ComplexImage<f64>, reference: &ComplexImage<f64>, w: &WeightStore<f64>) -> Result<f64> {
    let out = crate::nn::resnet_forward(x, w)?;
    loss_normalized_l1l2(reference, &out)
}

/// Result of comparing backprop against central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub loss: f64,
    pub n_params: usize,
    /// Largest `|fd − an| / max(|fd|, |an|, floor)` over all parameters.
    pub max_rel_err: f64,
}

/// Checks every parameter gradient of [`backprop_resnet`] against
/// `(L(θ+h) − L(θ−h)) / 2h`. Relative errors use `floor` as the smallest
/// denominator.
pub fn gradient_check(
    x: &ComplexImage<f64>,
    reference: &ComplexImage<f64>,
    w: &WeightStore<f64>,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    if !(h > 0.0) || !(floor > 0.0) {
        return Err(Error::invalid("step and floor must be positive"));
    }
    let (loss, grads) = backprop_resnet(x, reference, w)?;
    let index: Vec<(&String, usize)> = w.tensors.iter().flat_map(|(n, t)| (0..t.data.len()).map(move |i| (n, i))).collect();
    let errs = index
        .par_iter()
        .map(|&(name, i)| {
            let shifted = |d: f64| {
                let mut wp = w.clone();
                wp.tensors.get_mut(name).expect("name from store").data[i] += d;
                network_loss(x, reference, &wp)
            };
            let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            let an = grads.tensors[name].data[i];
            Ok((fd - an).abs() / an.abs().max(fd.abs()).max(floor))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GradCheck {
        loss,
        n_params: errs.len(),
        max_rel_err: errs.into_iter().fold(0.0, f64::max),
    })
}

/// Adam state over every tensor of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(w: &WeightStore<f64>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = w.tensors.values().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            lr: cfg.learning_rate,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, w: &mut WeightStore<f64>, g: &WeightStore<f64>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((t, gt), m), v) in w.tensors.values_mut().zip(g.tensors.values()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..t.data.len() {
                let gi = gt.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                t.data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: WeightStore<f32>,
    /// Entry 0 is the mean loss of the initialized network over the dataset;
    /// entry `e` is the mean batch loss seen during epoch `e`.
    pub loss_log: Vec<f64>,
}

/// Adam training of a fresh network mapping `corrupted → clean`.
pub fn train_denoiser(dataset: &[(ComplexImage<f32>, ComplexImage<f32>)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_denoiser_from(dataset, cfg, None)
}

/// [`train_denoiser`] continuing from `init` instead of a seeded
/// initialization. Optimizer state starts fresh.
pub fn train_denoiser_from(
    dataset: &[(ComplexImage<f32>, ComplexImage<f32>)],
    cfg: &TrainConfig,
    init: Option<&WeightStore<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let data: Vec<(ComplexImage<f64>, ComplexImage<f64>)> =
        dataset.iter().map(|(x, r)| (x.cast(), r.cast())).collect();
    let mut w = match init {
        Some(w0) => {
            if w0.spec != cfg.net {
                return Err(Error::invalid("initial weights do not match the configured network"));
            }
            w0.validate()?;
            w0.cast()
        }
        None => WeightStore::<f64>::init_uniform(cfg.net, cfg.seed),
    };
    let mut adam = Adam::new(&w, cfg);

    let initial: Vec<f64> = data
        .par_iter()
        .map(|(x, r)| network_loss(x, r, &w))
        .collect::<Result<_>>()?;
    let mut log = vec![initial.iter().sum::<f64>() / data.len() as f64];
    if !log[0].is_finite() {
        return Err(Error::numerical("non-finite loss at initialization"));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, WeightStore<f64>)> = batch
                .par_iter()
                .map(|&i| backprop_resnet(&data[i].0, &data[i].1, &w))
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut grad = WeightStore::<f64>::zeros(cfg.net);
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::numerical(format!("non-finite loss at epoch {epoch}, batch {bi}")));
                }
                total += loss;
                for (acc, t) in grad.tensors.values_mut().zip(g.tensors.values()) {
                    for (a, v) in acc.data.iter_mut().zip(&t.data) {
                        *a += inv * v;
                    }
                }
            }
            adam.step(&mut w, &grad);
        }
        log.push(total / data.len() as f64);
    }
    Ok(TrainOutcome {
        weights: w.cast(),
        loss_log: log,
    })
}

/// Settings for training the regularizer on the inputs it meets inside the
/// unrolled pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateTrainConfig {
    pub train: TrainConfig,
    /// Data-generation rounds; round 0 uses an identity regularizer.
    pub rounds: usize,
    /// Pipeline that produces the regularizer inputs.
    pub unroll: UnrollConfig,
    /// Keep one iterate in `stride` (offset rotates with slice and round).
    pub stride: usize,
}

impl Default for IterateTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            rounds: 3,
            unroll: UnrollConfig::new(10, DfConfig::default(), RegularizerKind::Float32),
            stride: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateTrainOutcome {
    pub weights: WeightStore<f32>,
    /// Loss log of every round, as in [`TrainOutcome::loss_log`].
    pub round_logs: Vec<Vec<f64>>,
}

/// Trains the regularizer as a standalone denoiser whose inputs are the
/// pipeline iterates `x⁽ⁱ⁾` of the training slices and whose targets are the
/// ground truths. Each round regenerates the iterates with the current
/// weights and continues training from them.
pub fn train_on_pipeline_iterates(slices: &[SimulatedSlice<f32>], cfg: &IterateTrainConfig) -> Result<IterateTrainOutcome> {
    if slices.is_empty() {
        return Err(Error::invalid("no training slices"));
    }
    if cfg.rounds == 0 || cfg.stride == 0 {
        return Err(Error::invalid("rounds and stride must be at least 1"));
    }
    let counter = TransformCounter::new();
    let mut weights: Option<WeightStore<f32>> = None;
    let mut round_logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut pairs = Vec::new();
        for (k, s) in slices.iter().enumerate() {
            let (reg, kind) = match &weights {
                Some(w) => (Regularizer::Float32(w), RegularizerKind::Float32),
                None => (Regularizer::Identity, RegularizerKind::Identity),
            };
            let ucfg = UnrollConfig {
                regularizer: kind,
                ..cfg.unroll.clone()
            };
            let out = unrolled_vsqp_report(&s.kspace, &s.maps, &reg, &ucfg, &counter)?;
            for (i, x) in out.iterates.into_iter().enumerate() {
                if (i + k + round) % cfg.stride == 0 {
                    pairs.push((x, s.ground_truth.clone()));
                }
            }
        }
        let out = train_denoiser_from(&pairs, &cfg.train, weights.as_ref())?;
        let mut w = out.weights;
        w.mu = cfg.unroll.df.mu.clone();
        w.shared_mu = cfg.unroll.df.mu.len() == 1;
        weights = Some(w);
        round_logs.push(out.loss_log);
    }
    Ok(IterateTrainOutcome {
        weights: weights.expect("at least one round"),
        round_logs,
    })
}
