//! Little-endian binary containers for datasets, images and weights.
//!
//! Complex values are stored as two `f32` (re, im). Every reader checks the
//! magic, all declared section lengths and that no bytes trail the payload.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, Tensor, WeightStore};
use crate::quant::{QData, QParams, QTensor, QuantizedWeightStore};
use crate::sim::{CoilMaps, MultiCoilKSpace, SamplingMask, SimulatedSlice};
use crate::tensor::{ComplexImage, MultiCoilImage};

pub const DATASET_MAGIC: &[u8; 8] = b"PDMR0001";
pub const IMAGE_MAGIC: &[u8; 8] = b"PDMI0001";
pub const WEIGHT_MAGIC: &[u8; 8] = b"PDMW0001";

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;
const DTYPE_I32: u8 = 2;
const ACT_PREFIX: &str = "act.";

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes());
        Ok(())
    }
    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn complex(&mut self, data: &[Complex<f32>]) {
        self.0.reserve(data.len() * 8);
        for z in data {
            self.bytes(&z.re.to_le_bytes());
            self.bytes(&z.im.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(Self { buf, pos: 8 })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn count(&self, n: usize, elem: usize, what: &str) -> Result<usize> {
        n.checked_mul(elem)
            .filter(|&b| b <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Format(format!("{what} declares {n} elements, more than the file holds")))
    }

    fn complex(&mut self, n: usize, what: &str) -> Result<Vec<Complex<f32>>> {
        let bytes = self.take(self.count(n, 8, what)?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| {
                Complex::new(
                    f32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                    f32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
                )
            })
            .collect())
    }

    fn image(&mut self, n_pe: usize, n_ro: usize, what: &str) -> Result<ComplexImage<f32>> {
        let n = n_pe
            .checked_mul(n_ro)
            .ok_or_else(|| Error::Format(format!("{what} dimensions overflow")))?;
        ComplexImage::new(n_pe, n_ro, self.complex(n, what)?)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

/// Serializes a simulated slice.
pub fn encode_dataset(s: &SimulatedSlice<f32>) -> Result<Vec<u8>> {
    let (n_pe, n_ro) = s.ground_truth.dims();
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(n_pe)?;
    w.u32(n_ro)?;
    w.u32(s.maps.n_coils())?;
    w.u32(s.mask.rate())?;
    w.u32(s.mask.offset())?;
    w.f64(s.sigma);
    w.u64(s.seed);
    w.complex(s.ground_truth.data());
    for c in s.maps.maps().coils() {
        w.complex(c.data());
    }
    w.u32(s.mask.n_sampled())?;
    for &r in s.mask.sampled_rows() {
        w.u32(r)?;
    }
    for c in s.kspace.coils() {
        w.complex(c.data());
    }
    Ok(w.0)
}

pub fn decode_dataset(buf: &[u8]) -> Result<SimulatedSlice<f32>> {
    let mut r = Reader::new(buf, DATASET_MAGIC)?;
    let n_pe = r.u32("header")?;
    let n_ro = r.u32("header")?;
    let n_c = r.u32("header")?;
    let rate = r.u32("header")?;
    let offset = r.u32("header")?;
    let sigma = r.f64("header")?;
    let seed = r.u64("header")?;
    if n_c == 0 || n_pe == 0 || n_ro == 0 {
        return Err(Error::Format("dataset header has a zero dimension".into()));
    }
    let ground_truth = r.image(n_pe, n_ro, "ground truth")?;
    let coils = (0..n_c)
        .map(|_| r.image(n_pe, n_ro, "coil maps"))
        .collect::<Result<Vec<_>>>()?;
    let maps = CoilMaps::new(MultiCoilImage::new(coils)?);
    let n_rows = r.u32("mask")?;
    r.count(n_rows, 4, "mask")?;
    let rows = (0..n_rows).map(|_| r.u32("mask")).collect::<Result<Vec<_>>>()?;
    let mask = SamplingMask::from_rows(n_pe, rate, offset, &rows).map_err(|e| Error::Format(format!("mask: {e}")))?;
    let kcoils = (0..n_c)
        .map(|_| r.image(n_rows, n_ro, "k-space"))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(SimulatedSlice {
        ground_truth,
        maps,
        kspace: MultiCoilKSpace::new(kcoils, mask.clone())?,
        mask,
        sigma,
        seed,
    })
}

pub fn encode_image(img: &ComplexImage<f32>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(IMAGE_MAGIC);
    w.u32(img.n_pe())?;
    w.u32(img.n_ro())?;
    w.complex(img.data());
    Ok(w.0)
}

pub fn decode_image(buf: &[u8]) -> Result<ComplexImage<f32>> {
    let mut r = Reader::new(buf, IMAGE_MAGIC)?;
    let n_pe = r.u32("header")?;
    let n_ro = r.u32("header")?;
    let img = r.image(n_pe, n_ro, "image")?;
    r.finish()?;
    Ok(img)
}

/// Float or quantized regularizer weights with their metadata.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightFile {
    Float(WeightStore<f32>),
    Quantized(QuantizedWeightStore),
}

impl WeightFile {
    pub fn spec(&self) -> NetworkSpec {
        match self {
            WeightFile::Float(w) => w.spec,
            WeightFile::Quantized(q) => q.spec,
        }
    }

    pub fn mu(&self) -> &[f64] {
        match self {
            WeightFile::Float(w) => &w.mu,
            WeightFile::Quantized(q) => &q.mu,
        }
    }
}

fn write_header(w: &mut Writer, spec: &NetworkSpec, mu: &[f64], shared: bool, quantized: bool, n: usize) -> Result<()> {
    w.bytes(WEIGHT_MAGIC);
    w.u32(spec.n_blocks)?;
    w.u32(spec.channels)?;
    w.u32(spec.kernel)?;
    w.f64(spec.residual_scale);
    w.u32(mu.len())?;
    for &m in mu {
        w.f64(m);
    }
    w.u8(shared as u8);
    w.u8(quantized as u8);
    w.u32(n)
}

fn write_record_head(w: &mut Writer, name: &str, dtype: u8, shape: &[usize]) -> Result<()> {
    w.u32(name.len())?;
    w.bytes(name.as_bytes());
    w.u8(dtype);
    w.u32(shape.len())?;
    for &d in shape {
        w.u32(d)?;
    }
    Ok(())
}

pub fn encode_weights(file: &WeightFile) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    match file {
        WeightFile::Float(store) => {
            write_header(&mut w, &store.spec, &store.mu, store.shared_mu, false, store.tensors.len())?;
            for (name, t) in &store.tensors {
                write_record_head(&mut w, name, DTYPE_F32, &t.shape)?;
                for v in &t.data {
                    w.bytes(&v.to_le_bytes());
                }
            }
        }
        WeightFile::Quantized(q) => {
            let n = q.tensors.len() + q.activations.len();
            write_header(&mut w, &q.spec, &q.mu, q.shared_mu, true, n)?;
            for (name, t) in &q.tensors {
                match &t.data {
                    QData::I8(d) => {
                        write_record_head(&mut w, name, DTYPE_I8, &t.shape)?;
                        w.bytes(&d.iter().map(|&v| v as u8).collect::<Vec<u8>>());
                    }
                    QData::I32(d) => {
                        write_record_head(&mut w, name, DTYPE_I32, &t.shape)?;
                        for v in d {
                            w.bytes(&v.to_le_bytes());
                        }
                    }
                }
                w.f64(t.qp.scale);
                w.i32(t.qp.zero_point);
            }
            for (name, qp) in &q.activations {
                write_record_head(&mut w, &format!("{ACT_PREFIX}{name}"), DTYPE_I8, &[0])?;
                w.f64(qp.scale);
                w.i32(qp.zero_point);
            }
        }
    }
    Ok(w.0)
}

pub fn decode_weights(buf: &[u8]) -> Result<WeightFile> {
    let mut r = Reader::new(buf, WEIGHT_MAGIC)?;
    let spec = NetworkSpec {
        n_blocks: r.u32("metadata")?,
        channels: r.u32("metadata")?,
        kernel: r.u32("metadata")?,
        residual_scale: r.f64("metadata")?,
    };
    spec.validate().map_err(|e| Error::Format(format!("network metadata: {e}")))?;
    let n_mu = r.u32("metadata")?;
    r.count(n_mu, 8, "mu list")?;
    let mu = (0..n_mu).map(|_| r.f64("mu list")).collect::<Result<Vec<_>>>()?;
    let shared_mu = r.u8("metadata")? != 0;
    let quantized = r.u8("metadata")? != 0;
    let n = r.u32("metadata")?;

    let mut floats = BTreeMap::new();
    let mut qtensors = BTreeMap::new();
    let mut acts = BTreeMap::new();
    for _ in 0..n {
        let len = r.u32("tensor name")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("tensor dtype")?;
        let ndim = r.u32("tensor shape")?;
        r.count(ndim, 4, "tensor shape")?;
        let shape = (0..ndim).map(|_| r.u32("tensor shape")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
        let duplicate = floats.contains_key(&name) || qtensors.contains_key(&name) || acts.contains_key(&name);
        if duplicate {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        match (quantized, dtype) {
            (false, DTYPE_F32) => {
                let bytes = r.take(r.count(numel, 4, &name)?, &name)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                floats.insert(name, Tensor { shape, data });
            }
            (true, DTYPE_I8) | (true, DTYPE_I32) => {
                let data = if dtype == DTYPE_I8 {
                    QData::I8(r.take(r.count(numel, 1, &name)?, &name)?.iter().map(|&b| b as i8).collect())
                } else {
                    let bytes = r.take(r.count(numel, 4, &name)?, &name)?;
                    QData::I32(
                        bytes
                            .chunks_exact(4)
                            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                };
                let scale = r.f64(&name)?;
                let zero_point = r.i32(&name)?;
                if let Some(act) = name.strip_prefix(ACT_PREFIX) {
                    let qp = QParams::affine(scale, zero_point).map_err(|e| Error::Format(format!("{name}: {e}")))?;
                    acts.insert(act.to_string(), qp);
                } else {
                    let qp = QParams::symmetric(scale).map_err(|e| Error::Format(format!("{name}: {e}")))?;
                    if zero_point != 0 {
                        return Err(Error::Format(format!("{name}: weight zero point must be 0")));
                    }
                    qtensors.insert(name, QTensor { shape, data, qp });
                }
            }
            _ => return Err(Error::Format(format!("{name}: dtype {dtype} not allowed here"))),
        }
    }
    r.finish()?;
    if quantized {
        let store = QuantizedWeightStore {
            spec,
            tensors: qtensors,
            activations: acts,
            mu,
            shared_mu,
        };
        store.validate()?;
        Ok(WeightFile::Quantized(store))
    } else {
        let store = WeightStore {
            spec,
            tensors: floats,
            mu,
            shared_mu,
        };
        store.validate()?;
        Ok(WeightFile::Float(store))
    }
}

pub fn save_dataset(path: impl AsRef<Path>, s: &SimulatedSlice<f32>) -> Result<()> {
    Ok(std::fs::write(path, encode_dataset(s)?)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SimulatedSlice<f32>> {
    decode_dataset(&read_file(path.as_ref())?)
}

pub fn save_image(path: impl AsRef<Path>, img: &ComplexImage<f32>) -> Result<()> {
    Ok(std::fs::write(path, encode_image(img)?)?)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ComplexImage<f32>> {
    decode_image(&read_file(path.as_ref())?)
}

pub fn save_weights(path: impl AsRef<Path>, w: &WeightFile) -> Result<()> {
    Ok(std::fs::write(path, encode_weights(w)?)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightFile> {
    decode_weights(&read_file(path.as_ref())?)
}
