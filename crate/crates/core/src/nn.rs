//! Float inference for the CNN regularizer: a residual network over the
//! two-channel (real, imaginary) representation of a complex image.
//!
//! Topology: head conv (2 → C), `n_blocks` residual blocks
//! `h ← h + s·conv2(relu(conv1(h)))`, tail conv (C → 2), and a global skip
//! adding the input back. All convolutions are zero-padded "same" convolutions.

use std::collections::BTreeMap;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ComplexImage, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkSpec {
    pub n_blocks: usize,
    pub channels: usize,
    /// Odd spatial kernel size.
    pub kernel: usize,
    /// Multiplier on each block's branch before the skip add.
    pub residual_scale: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            n_blocks: 15,
            channels: 64,
            kernel: 3,
            residual_scale: 0.1,
        }
    }
}

impl NetworkSpec {
    pub fn toy(n_blocks: usize, channels: usize) -> Self {
        Self {
            n_blocks,
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.channels == 0 {
            return Err(Error::invalid("network needs at least one block and one channel"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Conv layers in evaluation order with `(c_out, c_in)`.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let c = self.channels;
        let mut out = vec![("head".to_string(), c, 2)];
        for b in 0..self.n_blocks {
            out.push((format!("blocks.{b}.conv1"), c, c));
            out.push((format!("blocks.{b}.conv2"), c, c));
        }
        out.push(("tail".to_string(), 2, c));
        out
    }

    pub fn n_params(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.layers().iter().map(|(_, co, ci)| co * ci * k2 + co).sum()
    }
}

/// A dense tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }
}

/// Named float tensors of the regularizer plus the data-fidelity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T: Real = f32> {
    pub spec: NetworkSpec,
    pub tensors: BTreeMap<String, Tensor<T>>,
    /// Data-fidelity penalty per unroll (a single value when shared).
    pub mu: Vec<f64>,
    pub shared_mu: bool,
}

impl<T: Real> WeightStore<T> {
    pub fn zeros(spec: NetworkSpec) -> Self {
        let k = spec.kernel;
        let mut tensors = BTreeMap::new();
        for (name, co, ci) in spec.layers() {
            tensors.insert(format!("{name}.weight"), Tensor::filled(vec![co, ci, k, k], T::zero()));
            tensors.insert(format!("{name}.bias"), Tensor::filled(vec![co], T::zero()));
        }
        Self {
            spec,
            tensors,
            mu: vec![crate::solve::DEFAULT_MU],
            shared_mu: true,
        }
    }

    /// Seeded scaled-uniform initialization: weights `U(−a, a)` with
    /// `a = gain·√(3/fan_in)`, biases zero. The tail layer gets a small gain so
    /// a fresh network starts close to the identity map.
    pub fn init_uniform(spec: NetworkSpec, seed: u64) -> Self {
        let mut store = Self::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = spec.kernel * spec.kernel;
        for (name, _, ci) in spec.layers() {
            let gain = if name == "tail" { 0.1 } else { 2f64.sqrt() };
            let bound = gain * (3.0 / (ci * k2) as f64).sqrt();
            let w = store.tensors.get_mut(&format!("{name}.weight")).expect("layer");
            for v in w.data.iter_mut() {
                *v = T::of(rng.gen_range(-bound..bound));
            }
        }
        store
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Every layer tensor exists with the shape the spec requires.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let k = self.spec.kernel;
        for (name, co, ci) in self.spec.layers() {
            let w = self.get(&format!("{name}.weight"))?;
            if w.shape != [co, ci, k, k] {
                return Err(Error::dims(format!("{name}.weight has shape {:?}, expected {:?}", w.shape, [co, ci, k, k])));
            }
            let b = self.get(&format!("{name}.bias"))?;
            if b.shape != [co] {
                return Err(Error::dims(format!("{name}.bias has shape {:?}, expected [{co}]", b.shape)));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore {
            spec: self.spec,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        Tensor {
                            shape: t.shape.clone(),
                            data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                        },
                    )
                })
                .collect(),
            mu: self.mu.clone(),
            shared_mu: self.shared_mu,
        }
    }
}

/// `C × H × W` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Real part in channel 0, imaginary part in channel 1.
pub fn image_to_channels<T: Real>(x: &ComplexImage<T>) -> FeatureMap<T> {
    let (h, w) = x.dims();
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(x.data().iter().map(|z| z.re));
    data.extend(x.data().iter().map(|z| z.im));
    FeatureMap {
        channels: 2,
        height: h,
        width: w,
        data,
    }
}

pub fn channels_to_image<T: Real>(f: &FeatureMap<T>) -> Result<ComplexImage<T>> {
    if f.channels != 2 {
        return Err(Error::dims(format!("expected 2 channels, got {}", f.channels)));
    }
    let data = f.plane(0).iter().zip(f.plane(1)).map(|(&re, &im)| Complex::new(re, im)).collect();
    ComplexImage::new(f.height, f.width, data)
}

pub fn relu_in_place<T: Real>(f: &mut FeatureMap<T>) {
    for v in f.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub(crate) fn check_conv_shapes(c_in: usize, weight: &[usize], bias: &[usize]) -> Result<(usize, usize)> {
    if weight.len() != 4 || weight[2] != weight[3] {
        return Err(Error::dims(format!("conv weight shape {weight:?} is not C_out×C_in×k×k")));
    }
    let (c_out, k) = (weight[0], weight[2]);
    if weight[1] != c_in {
        return Err(Error::dims(format!("conv expects {} input channels, got {c_in}", weight[1])));
    }
    if k % 2 == 0 {
        return Err(Error::dims(format!("conv kernel {k} must be odd")));
    }
    if bias != [c_out] {
        return Err(Error::dims(format!("bias shape {bias:?}, expected [{c_out}]")));
    }
    Ok((c_out, k))
}

/// One output plane of a same-size correlation over `c_in` stacked source
/// planes, filled row by row. Each pixel receives `tap(acc, src, weight)` for
/// every channel, then kernel row, then kernel column.
#[inline]
pub(crate) fn correlate_plane<D: Copy, S: Copy, W: Copy>(
    dst: &mut [D],
    src: &[S],
    h: usize,
    w: usize,
    k: usize,
    weights: &[W],
    mut tap: impl FnMut(&mut D, S, W),
) {
    let pad = k / 2;
    let hw = h * w;
    for (y, row) in dst.chunks_exact_mut(w).enumerate() {
        for (ci, plane) in src.chunks_exact(hw).enumerate() {
            for ky in 0..k {
                let sy = (y + ky).wrapping_sub(pad);
                if sy >= h {
                    continue;
                }
                let line = &plane[sy * w..(sy + 1) * w];
                let taps = &weights[(ci * k + ky) * k..(ci * k + ky + 1) * k];
                if k == 3 {
                    correlate_row::<D, S, W, 3>(row, line, taps.try_into().unwrap(), &mut tap);
                } else {
                    correlate_row_dyn(row, line, taps, &mut tap);
                }
            }
        }
    }
}

#[inline(always)]
fn correlate_row<D: Copy, S: Copy, W: Copy, const K: usize>(
    row: &mut [D],
    line: &[S],
    taps: &[W; K],
    tap: &mut impl FnMut(&mut D, S, W),
) {
    let pad = K / 2;
    let w = row.len();
    if w < K {
        return correlate_row_dyn(row, line, taps, tap);
    }
    edge_pixels(row, line, taps, tap, 0..pad);
    let n = w + 1 - K;
    let inner = &mut row[pad..pad + n];
    let shifted: [&[S]; K] = std::array::from_fn(|kx| &line[kx..kx + n]);
    for (i, a) in inner.iter_mut().enumerate() {
        let mut acc = *a;
        for kx in 0..K {
            tap(&mut acc, shifted[kx][i], taps[kx]);
        }
        *a = acc;
    }
    edge_pixels(row, line, taps, tap, w - pad..w);
}

fn correlate_row_dyn<D: Copy, S: Copy, W: Copy>(
    row: &mut [D],
    line: &[S],
    taps: &[W],
    tap: &mut impl FnMut(&mut D, S, W),
) {
    edge_pixels(row, line, taps, tap, 0..row.len());
}

#[inline(always)]
fn edge_pixels<D: Copy, S: Copy, W: Copy>(
    row: &mut [D],
    line: &[S],
    taps: &[W],
    tap: &mut impl FnMut(&mut D, S, W),
    xs: std::ops::Range<usize>,
) {
    let pad = taps.len() / 2;
    for x in xs {
        let mut acc = row[x];
        for (kx, &wv) in taps.iter().enumerate() {
            let sx = (x + kx).wrapping_sub(pad);
            if sx < line.len() {
                tap(&mut acc, line[sx], wv);
            }
        }
        row[x] = acc;
    }
}

/// Calls `f`, compiled for AVX2 when the running CPU has it. Only instruction
/// selection changes; every value is computed in the same order.
#[inline]
pub(crate) fn simd<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just detected.
            return unsafe { with_avx2(f) };
        }
    }
    f()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn with_avx2<R>(f: impl FnOnce() -> R) -> R {
    f()
}

/// Same-size cross-correlation with zero padding `(k−1)/2`. Each output pixel
/// is `bias + Σ_{ci, ky, kx}` accumulated in that order.
pub fn conv2d<T: Real>(input: &FeatureMap<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<FeatureMap<T>> {
    let (c_out, k) = check_conv_shapes(input.channels, &weight.shape, &bias.shape)?;
    let (h, w, c_in) = (input.height, input.width, input.channels);
    let hw = h * w;
    let mut data = vec![T::zero(); c_out * hw];
    data.par_chunks_mut(hw).enumerate().for_each(|(co, out)| {
        out.fill(bias.data[co]);
        let taps = &weight.data[co * c_in * k * k..(co + 1) * c_in * k * k];
        simd(|| correlate_plane(out, &input.data, h, w, k, taps, |a, b, wv| *a += wv * b));
    });
    Ok(FeatureMap {
        channels: c_out,
        height: h,
        width: w,
        data,
    })
}

fn conv_layer<T: Real>(f: &FeatureMap<T>, w: &WeightStore<T>, layer: &str) -> Result<FeatureMap<T>> {
    conv2d(f, w.get(&format!("{layer}.weight"))?, w.get(&format!("{layer}.bias"))?)
}

/// Applies the regularizer network to one image.
pub fn resnet_forward<T: Real>(x: &ComplexImage<T>, w: &WeightStore<T>) -> Result<ComplexImage<T>> {
    w.spec.validate()?;
    let input = image_to_channels(x);
    let mut h = conv_layer(&input, w, "head")?;
    let scale = T::of(w.spec.residual_scale);
    for b in 0..w.spec.n_blocks {
        let mut t = conv_layer(&h, w, &format!("blocks.{b}.conv1"))?;
        relu_in_place(&mut t);
        let u = conv_layer(&t, w, &format!("blocks.{b}.conv2"))?;
        if u.channels != h.channels {
            return Err(Error::dims(format!("block {b} changes the channel count")));
        }
        for (a, &v) in h.data.iter_mut().zip(&u.data) {
            *a += scale * v;
        }
    }
    let mut out = conv_layer(&h, w, "tail")?;
    if out.channels != 2 {
        return Err(Error::dims(format!("tail produces {} channels, expected 2", out.channels)));
    }
    for (a, &v) in out.data.iter_mut().zip(&input.data) {
        *a += v;
    }
    channels_to_image(&out)
}
