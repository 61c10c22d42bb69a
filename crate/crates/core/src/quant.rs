//! Post-training 8-bit quantization of the regularizer and its integer
//! inference path.
//!
//! Weights are symmetric per tensor (`scale = max|w|/127`, zero point 0).
//! Activations are affine per tensor, calibrated statically from float
//! inference over a sample of images; real and imaginary channels share one
//! set of parameters. Rounding is half away from zero everywhere. Integer
//! convolutions accumulate in `i32`. Block skip additions rescale both
//! operands into the output representation in `i32`; the global skip is
//! formed in `i32` at the input scale and dequantized at exit.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    channels_to_image, check_conv_shapes, conv2d, image_to_channels, relu_in_place, correlate_plane, simd, FeatureMap,
    NetworkSpec, Tensor, WeightStore,
};
use crate::tensor::ComplexImage;

/// Floor applied to degenerate (zero-width) ranges.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QScheme {
    Symmetric,
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QParams {
    pub scale: f64,
    pub zero_point: i32,
    pub scheme: QScheme,
}

impl QParams {
    pub fn symmetric(scale: f64) -> Result<Self> {
        let qp = Self {
            scale,
            zero_point: 0,
            scheme: QScheme::Symmetric,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn affine(scale: f64, zero_point: i32) -> Result<Self> {
        let qp = Self {
            scale,
            zero_point,
            scheme: QScheme::Affine,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!("quantization scale {} must be positive", self.scale)));
        }
        if !(-128..=127).contains(&self.zero_point) {
            return Err(Error::invalid(format!("zero point {} outside int8 range", self.zero_point)));
        }
        if self.scheme == QScheme::Symmetric && self.zero_point != 0 {
            return Err(Error::invalid("symmetric quantization requires zero point 0"));
        }
        Ok(())
    }

    /// Symmetric weight parameters; returns `true` alongside when the tensor
    /// is all zero and the scale was floored.
    pub fn for_weights(max_abs: f64) -> (Self, bool) {
        let degenerate = !(max_abs > 0.0);
        let scale = if degenerate { MIN_SCALE } else { (max_abs / 127.0).max(MIN_SCALE) };
        (
            Self {
                scale,
                zero_point: 0,
                scheme: QScheme::Symmetric,
            },
            degenerate,
        )
    }

    /// Affine activation parameters for an observed `[min, max]`, widened to
    /// contain zero so that zero padding and ReLU stay exact.
    pub fn for_activations(min: f64, max: f64) -> (Self, bool) {
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        if !(hi > lo) {
            return (
                Self {
                    scale: MIN_SCALE,
                    zero_point: 0,
                    scheme: QScheme::Affine,
                },
                true,
            );
        }
        let scale = ((hi - lo) / 255.0).max(MIN_SCALE);
        let zero_point = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
        (
            Self {
                scale,
                zero_point,
                scheme: QScheme::Affine,
            },
            false,
        )
    }
}

#[inline]
pub fn quantize_value(x: f64, qp: &QParams) -> i8 {
    // f64::round rounds half away from zero
    (round_half_away(x / qp.scale) + qp.zero_point as f64).clamp(-128.0, 127.0) as i8
}

pub fn quantize_tensor(x: &[f32], qp: &QParams) -> Vec<i8> {
    x.iter().map(|&v| quantize_value(v as f64, qp)).collect()
}

pub fn dequantize(q: &[i8], qp: &QParams) -> Vec<f32> {
    q.iter().map(|&v| (qp.scale * (v as i32 - qp.zero_point) as f64) as f32).collect()
}

/// `x.round()` (half away from zero) from truncating conversions only, which
/// baseline x86-64 executes without a library call. Exact for `|x| < 2^52`.
#[inline]
fn round_half_away(x: f64) -> f64 {
    let t = x as i64 as f64;
    let f = x - t;
    if f >= 0.5 {
        t + 1.0
    } else if f <= -0.5 {
        t - 1.0
    } else {
        t
    }
}

#[inline]
fn requantize(acc: f64, multiplier: f64, zero_point: i32, lower: i32) -> i8 {
    (round_half_away(acc * multiplier) + zero_point as f64).clamp(lower as f64, 127.0) as i8
}

#[derive(Debug, Clone, PartialEq)]
pub enum QData {
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl QData {
    pub fn len(&self) -> usize {
        match self {
            QData::I8(v) => v.len(),
            QData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub data: QData,
    pub qp: QParams,
}

impl QTensor {
    pub fn dequantize(&self) -> Tensor<f32> {
        let data = match &self.data {
            QData::I8(v) => dequantize(v, &self.qp),
            QData::I32(v) => v.iter().map(|&q| (self.qp.scale * (q - self.qp.zero_point) as f64) as f32).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// Observed ranges and degenerate-range flags from calibration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationReport {
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub degenerate: Vec<String>,
}

/// Activation boundaries in evaluation order. `blocks.{b}.conv1` is recorded
/// after the ReLU, which the integer path fuses into requantization.
pub fn activation_names(spec: &NetworkSpec) -> Vec<String> {
    let mut names = vec!["input".to_string(), "head".to_string()];
    for b in 0..spec.n_blocks {
        names.push(format!("blocks.{b}.conv1"));
        names.push(format!("blocks.{b}.conv2"));
        names.push(format!("blocks.{b}.out"));
    }
    names.push("tail".to_string());
    names
}

fn observe(ranges: &mut BTreeMap<String, (f64, f64)>, name: &str, data: &[f32]) {
    let e = ranges.entry(name.to_string()).or_insert((f64::INFINITY, f64::NEG_INFINITY));
    for &v in data {
        e.0 = e.0.min(v as f64);
        e.1 = e.1.max(v as f64);
    }
}

fn layer<'a>(w: &'a WeightStore<f32>, name: &str) -> Result<(&'a Tensor<f32>, &'a Tensor<f32>)> {
    Ok((w.get(&format!("{name}.weight"))?, w.get(&format!("{name}.bias"))?))
}

/// Runs float inference over `calib_images` and derives affine activation
/// parameters at every layer boundary.
pub fn calibrate(
    net: &WeightStore<f32>,
    calib_images: &[ComplexImage<f32>],
) -> Result<(BTreeMap<String, QParams>, CalibrationReport)> {
    if calib_images.is_empty() {
        return Err(Error::invalid("calibration needs at least one image"));
    }
    net.validate()?;
    let spec = net.spec;
    let scale = spec.residual_scale as f32;
    let mut ranges = BTreeMap::new();
    for x in calib_images {
        let input = image_to_channels(x);
        observe(&mut ranges, "input", &input.data);
        let (w, b) = layer(net, "head")?;
        let mut h = conv2d(&input, w, b)?;
        observe(&mut ranges, "head", &h.data);
        for blk in 0..spec.n_blocks {
            let (w, b) = layer(net, &format!("blocks.{blk}.conv1"))?;
            let mut t = conv2d(&h, w, b)?;
            relu_in_place(&mut t);
            observe(&mut ranges, &format!("blocks.{blk}.conv1"), &t.data);
            let (w, b) = layer(net, &format!("blocks.{blk}.conv2"))?;
            let u = conv2d(&t, w, b)?;
            observe(&mut ranges, &format!("blocks.{blk}.conv2"), &u.data);
            for (a, &v) in h.data.iter_mut().zip(&u.data) {
                *a += scale * v;
            }
            observe(&mut ranges, &format!("blocks.{blk}.out"), &h.data);
        }
        let (w, b) = layer(net, "tail")?;
        let out = conv2d(&h, w, b)?;
        observe(&mut ranges, "tail", &out.data);
    }
    let mut report = CalibrationReport::default();
    let mut qps = BTreeMap::new();
    for name in activation_names(&spec) {
        let (lo, hi) = ranges[&name];
        let (qp, degenerate) = QParams::for_activations(lo, hi);
        if degenerate {
            report.degenerate.push(name.clone());
        }
        report.ranges.insert(name.clone(), (lo, hi));
        qps.insert(name, qp);
    }
    Ok((qps, report))
}

/// Integer weights, `i32` biases and activation parameters of a calibrated
/// network.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeightStore {
    pub spec: NetworkSpec,
    pub tensors: BTreeMap<String, QTensor>,
    pub activations: BTreeMap<String, QParams>,
    pub mu: Vec<f64>,
    pub shared_mu: bool,
}

/// Name of the activation feeding a conv layer.
fn input_activation(layer: &str) -> String {
    if layer == "head" {
        return "input".into();
    }
    if layer == "tail" {
        return "__last_block__".into();
    }
    // blocks.{b}.conv1 reads the previous block output, conv2 reads conv1
    let parts: Vec<&str> = layer.split('.').collect();
    let b: usize = parts[1].parse().expect("block index");
    if parts[2] == "conv2" {
        format!("blocks.{b}.conv1")
    } else if b == 0 {
        "head".into()
    } else {
        format!("blocks.{}.out", b - 1)
    }
}

fn resolve_input_activation(spec: &NetworkSpec, layer: &str) -> String {
    let name = input_activation(layer);
    if name == "__last_block__" {
        format!("blocks.{}.out", spec.n_blocks - 1)
    } else {
        name
    }
}

/// Quantizes every tensor of `net` against calibrated activation parameters.
pub fn quantize_weights(
    net: &WeightStore<f32>,
    calib_images: &[ComplexImage<f32>],
) -> Result<(QuantizedWeightStore, CalibrationReport)> {
    let (activations, mut report) = calibrate(net, calib_images)?;
    let mut tensors = BTreeMap::new();
    for (name, _, _) in net.spec.layers() {
        let (w, b) = layer(net, &name)?;
        let max_abs = w.data.iter().fold(0f64, |m, &v| m.max((v as f64).abs()));
        let (wqp, degenerate) = QParams::for_weights(max_abs);
        if degenerate {
            report.degenerate.push(format!("{name}.weight"));
        }
        let in_qp = activations[&resolve_input_activation(&net.spec, &name)];
        let bias_scale = in_qp.scale * wqp.scale;
        let mut qb = Vec::with_capacity(b.data.len());
        for &v in &b.data {
            let q = (v as f64 / bias_scale).round();
            if q.abs() > i32::MAX as f64 / 2.0 {
                return Err(Error::numerical(format!("{name}.bias does not fit the int32 accumulator")));
            }
            qb.push(q as i32);
        }
        tensors.insert(
            format!("{name}.weight"),
            QTensor {
                shape: w.shape.clone(),
                data: QData::I8(quantize_tensor(&w.data, &wqp)),
                qp: wqp,
            },
        );
        tensors.insert(
            format!("{name}.bias"),
            QTensor {
                shape: b.shape.clone(),
                data: QData::I32(qb),
                qp: QParams {
                    scale: bias_scale,
                    zero_point: 0,
                    scheme: QScheme::Symmetric,
                },
            },
        );
    }
    Ok((
        QuantizedWeightStore {
            spec: net.spec,
            tensors,
            activations,
            mu: net.mu.clone(),
            shared_mu: net.shared_mu,
        },
        report,
    ))
}

impl QuantizedWeightStore {
    pub fn get(&self, name: &str) -> Result<&QTensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn activation(&self, name: &str) -> Result<QParams> {
        self.activations
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(format!("act.{name}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let k = self.spec.kernel;
        for (name, co, ci) in self.spec.layers() {
            let w = self.get(&format!("{name}.weight"))?;
            if w.shape != [co, ci, k, k] || !matches!(w.data, QData::I8(_)) || w.data.len() != co * ci * k * k {
                return Err(Error::dims(format!("{name}.weight is not an int8 tensor of shape {:?}", [co, ci, k, k])));
            }
            let b = self.get(&format!("{name}.bias"))?;
            if b.shape != [co] || !matches!(b.data, QData::I32(_)) || b.data.len() != co {
                return Err(Error::dims(format!("{name}.bias is not an int32 tensor of shape [{co}]")));
            }
            w.qp.validate()?;
            b.qp.validate()?;
        }
        for name in activation_names(&self.spec) {
            self.activation(&name)?.validate()?;
        }
        Ok(())
    }

    /// Float store holding the dequantized weights and biases.
    pub fn dequantize(&self) -> WeightStore<f32> {
        WeightStore {
            spec: self.spec,
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.dequantize())).collect(),
            mu: self.mu.clone(),
            shared_mu: self.shared_mu,
        }
    }
}

/// Integer feature map with its affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QFeatureMap {
    pub map: FeatureMap<i8>,
    pub qp: QParams,
}

impl QFeatureMap {
    pub fn quantize(f: &FeatureMap<f32>, qp: QParams) -> Self {
        Self {
            map: FeatureMap {
                channels: f.channels,
                height: f.height,
                width: f.width,
                data: quantize_tensor(&f.data, &qp),
            },
            qp,
        }
    }

    pub fn dequantize(&self) -> FeatureMap<f32> {
        FeatureMap {
            channels: self.map.channels,
            height: self.map.height,
            width: self.map.width,
            data: dequantize(&self.map.data, &self.qp),
        }
    }
}

/// Integer same-size cross-correlation. The input is zero-point corrected,
/// products and the bias accumulate in `i32`, and the accumulator is
/// requantized with the real multiplier `in_scale·w_scale/out_scale`. With
/// `fuse_relu` the output is clamped below at the output zero point.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_int8(
    input: &FeatureMap<i8>,
    weights: &Tensor<i8>,
    bias: &[i32],
    in_qp: &QParams,
    w_qp: &QParams,
    out_qp: &QParams,
    fuse_relu: bool,
) -> Result<FeatureMap<i8>> {
    conv2d_int8_raw(input, &weights.shape, &weights.data, bias, in_qp, w_qp, out_qp, fuse_relu)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_int8_raw(
    input: &FeatureMap<i8>,
    w_shape: &[usize],
    w_data: &[i8],
    bias: &[i32],
    in_qp: &QParams,
    w_qp: &QParams,
    out_qp: &QParams,
    fuse_relu: bool,
) -> Result<FeatureMap<i8>> {
    let (c_out, k) = check_conv_shapes(input.channels, w_shape, &[bias.len()])?;
    if w_qp.zero_point != 0 {
        return Err(Error::invalid("integer convolution expects symmetric weights"));
    }
    let (h, w, c_in) = (input.height, input.width, input.channels);
    let max_in = (0..=255).map(|q| (q - 128 - in_qp.zero_point).abs() as i64).max().unwrap_or(0);
    let max_w = w_data.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0);
    let max_b = bias.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0);
    let bound = max_in * max_w * (c_in * k * k) as i64 + max_b;
    if bound > i32::MAX as i64 {
        return Err(Error::numerical(format!("int32 accumulator may overflow (bound {bound})")));
    }
    let hw = h * w;
    // |q − zp| ≤ 255 and |w| ≤ 128, so each product fits i16, and the bound
    // above rules out i32 overflow; wrapping ops keep checked builds vectorized.
    let centered: Vec<i16> = input.data.iter().map(|&q| (q as i32 - in_qp.zero_point) as i16).collect();
    let w16: Vec<i16> = w_data.iter().map(|&v| v as i16).collect();
    let multiplier = in_qp.scale * w_qp.scale / out_qp.scale;
    let lower = if fuse_relu { out_qp.zero_point } else { -128 };
    let mut data = vec![0i8; c_out * hw];
    data.par_chunks_mut(hw).enumerate().for_each(|(co, out)| {
        let mut acc = vec![bias[co]; hw];
        let taps = &w16[co * c_in * k * k..(co + 1) * c_in * k * k];
        simd(|| {
            correlate_plane(&mut acc, &centered, h, w, k, taps, |a, b, wv| *a = a.wrapping_add(wv.wrapping_mul(b) as i32));
            for (o, &a) in out.iter_mut().zip(&acc) {
                *o = requantize(a as f64, multiplier, out_qp.zero_point, lower);
            }
        });
    });
    Ok(FeatureMap {
        channels: c_out,
        height: h,
        width: w,
        data,
    })
}

fn qconv(x: &FeatureMap<i8>, qw: &QuantizedWeightStore, layer: &str, in_qp: &QParams, out: &str, relu: bool) -> Result<FeatureMap<i8>> {
    let w = qw.get(&format!("{layer}.weight"))?;
    let b = qw.get(&format!("{layer}.bias"))?;
    let (QData::I8(wd), QData::I32(bd)) = (&w.data, &b.data) else {
        return Err(Error::Format(format!("{layer} has wrong tensor dtypes")));
    };
    conv2d_int8_raw(x, &w.shape, wd, bd, in_qp, &w.qp, &qw.activation(out)?, relu)
}

/// Integer inference: quantize at entry, int8 layers, dequantize at exit.
pub fn resnet_forward_int8(x: &ComplexImage<f32>, qw: &QuantizedWeightStore) -> Result<ComplexImage<f32>> {
    qw.spec.validate()?;
    let spec = qw.spec;
    let in_qp = qw.activation("input")?;
    let input = QFeatureMap::quantize(&image_to_channels(x), in_qp);
    let mut h_qp = qw.activation("head")?;
    let mut h = qconv(&input.map, qw, "head", &in_qp, "head", false)?;
    for b in 0..spec.n_blocks {
        let c1 = format!("blocks.{b}.conv1");
        let c2 = format!("blocks.{b}.conv2");
        let out_name = format!("blocks.{b}.out");
        let t_qp = qw.activation(&c1)?;
        let t = qconv(&h, qw, &c1, &h_qp, &c1, true)?;
        let u_qp = qw.activation(&c2)?;
        let u = qconv(&t, qw, &c2, &t_qp, &c2, false)?;
        let o_qp = qw.activation(&out_name)?;
        let mh = h_qp.scale / o_qp.scale;
        let mu = spec.residual_scale * u_qp.scale / o_qp.scale;
        for (a, &v) in h.data.iter_mut().zip(&u.data) {
            let hs = round_half_away((*a as i32 - h_qp.zero_point) as f64 * mh) as i32;
            let us = round_half_away((v as i32 - u_qp.zero_point) as f64 * mu) as i32;
            *a = (hs + us + o_qp.zero_point).clamp(-128, 127) as i8;
        }
        h_qp = o_qp;
    }
    let tail_qp = qw.activation("tail")?;
    let out = qconv(&h, qw, "tail", &h_qp, "tail", false)?;
    let m = tail_qp.scale / in_qp.scale;
    let data = out
        .data
        .iter()
        .zip(&input.map.data)
        .map(|(&o, &i)| {
            let acc = (i as i32 - in_qp.zero_point) + round_half_away((o as i32 - tail_qp.zero_point) as f64 * m) as i32;
            (acc as f64 * in_qp.scale) as f32
        })
        .collect();
    channels_to_image(&FeatureMap {
        channels: 2,
        height: out.height,
        width: out.width,
        data,
    })
}
