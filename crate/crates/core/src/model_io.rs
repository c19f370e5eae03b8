//! Binary checkpoints, 2-bit packed ternary models and compression reports.
//!
//! Both formats are little-endian and end with a CRC-32 (IEEE) of every
//! preceding byte.
//!
//! Checkpoint (`TNCK`):
//!
//! ```text
//! magic "TNCK" | u16 version
//! u32 len + descriptor | u32 len + layer list
//! u32 n_meta, n_meta × (u16 len + key, u32 len + value)
//! u32 n_layers, per layer:
//!   u16 len + name | u8 rank, rank × u32 extent | f32 × Π extents weights
//!   u32 bias len + f32 biases | u8 quantized [+ f64 delta, mu, sigma]
//! u32 crc
//! ```
//!
//! Packed model (`TERN`):
//!
//! ```text
//! magic "TERN" | u16 version
//! u32 len + descriptor | u32 len + layer list
//! u32 n_layers, per layer:
//!   u16 len + name | u8 rank, rank × u32 extent
//!   u8 kind: 1 → f32 scale + ⌈n/4⌉ code bytes, 0 → f32 × n weights
//!   u32 bias len + f32 biases
//! u32 crc
//! ```
//!
//! Codes are packed four per byte, first code in bits 1:0, with
//! `00 → 0`, `01 → +1`, `10 → −1`; `11` is invalid.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::network::{apply_linear, run_layers, Architecture, Model, ParamLayer};
use crate::tensor::Tensor;
use crate::ternarizer::{sparsity, QuantizerState, TernaryCodes};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TNCK";
pub const PACKED_MAGIC: [u8; 4] = *b"TERN";
pub const FORMAT_VERSION: u16 = 1;

const KIND_FLOAT: u8 = 0;
const KIND_TERNARY: u8 = 1;

/// Bytes per layer spent on the stored scale.
const SCALE_BYTES: usize = 4;

/// Packs codes in `{−1, 0, +1}` four per byte.
pub fn pack_codes(codes: &[i8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (i, &c) in codes.iter().enumerate() {
        let bits = match c {
            0 => 0b00,
            1 => 0b01,
            -1 => 0b10,
            other => return Err(Error::InvalidCode(other)),
        };
        out[i / 4] |= bits << (2 * (i % 4));
    }
    Ok(out)
}

/// Inverse of [`pack_codes`] for `n` codes.
pub fn unpack_codes(bytes: &[u8], n: usize) -> Result<Vec<i8>> {
    if bytes.len() != n.div_ceil(4) {
        return Err(Error::Format(format!("{} code bytes cannot hold exactly {n} codes", bytes.len())));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(match (bytes[i / 4] >> (2 * (i % 4))) & 0b11 {
            0b00 => 0,
            0b01 => 1,
            0b10 => -1,
            _ => return Err(Error::ReservedCode(i)),
        });
    }
    if n % 4 != 0 && bytes[n / 4] >> (2 * (n % 4)) != 0 {
        return Err(Error::Format("nonzero padding after the last code".into()));
    }
    Ok(out)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.bytes(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("name too long: {} bytes", s.len())))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }
    fn str32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        shape.iter().for_each(|&d| self.u32(d as u32));
    }
    fn f32s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f32(x));
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
    fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        self.string(n)
    }
    fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.string(n)
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload length overflows".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// Checks magic, CRC and version; returns the body after the version field.
fn open_container<'a>(bytes: &'a [u8], magic: [u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("file of {} bytes is too short", bytes.len())));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < 4 + 2 + 4 {
        return Err(Error::Format(format!("file of {} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(r)
}

fn read_arch(r: &mut Reader) -> Result<Architecture> {
    let descriptor = r.str32()?;
    let list = r.str32()?;
    Architecture::from_layer_list(&descriptor, &list)
}

fn write_arch(w: &mut Writer, arch: &Architecture) {
    w.str32(arch.descriptor());
    w.str32(&arch.layer_list());
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("extents {shape:?} overflow")))
}

/// A model plus free-form `key=value` metadata (for example recorded accuracies).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, metadata: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u16(FORMAT_VERSION);
    write_arch(&mut w, ckpt.model.arch());
    w.u32(ckpt.metadata.len() as u32);
    for (k, v) in &ckpt.metadata {
        w.str16(k)?;
        w.str32(v);
    }
    let params = ckpt.model.params();
    w.u32(params.len() as u32);
    for p in params {
        w.str16(&p.name)?;
        w.shape(p.weight.shape());
        w.f32s(p.weight.data());
        w.u32(p.bias.len() as u32);
        w.f32s(p.bias.data());
        match &p.quant {
            Some(q) => {
                w.u8(1);
                w.f64(q.delta());
                w.f64(q.mu());
                w.f64(q.sigma());
            }
            None => w.u8(0),
        }
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = open_container(bytes, CHECKPOINT_MAGIC)?;
    let arch = read_arch(&mut r)?;
    let n_meta = r.u32()?;
    let mut metadata = BTreeMap::new();
    for _ in 0..n_meta {
        let k = r.str16()?;
        metadata.insert(k, r.str32()?);
    }
    let n_layers = r.u32()? as usize;
    let mut params = Vec::new();
    for _ in 0..n_layers {
        let name = r.str16()?;
        let shape = r.shape()?;
        let n = checked_len(&shape)?;
        let weight = Tensor::new(shape, r.f32s(n)?)?;
        let n_bias = r.u32()? as usize;
        let bias = Tensor::new(vec![n_bias], r.f32s(n_bias)?)?;
        let quant = match r.u8()? {
            0 => None,
            1 => {
                let (delta, mu, sigma) = (r.f64()?, r.f64()?, r.f64()?);
                let state = QuantizerState::new(delta);
                // A state that was never refreshed is stored with σ = 0.
                Some(if sigma == 0.0 && mu == 0.0 { state } else { state.with_stats(mu, sigma, n)? })
            }
            other => return Err(Error::Format(format!("bad quantizer flag {other}"))),
        };
        params.push(ParamLayer { name, weight, bias, quant });
    }
    r.done()?;
    Ok(Checkpoint { model: Model::from_parts(arch, params)?, metadata })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// A stored layer of a packed model.
#[derive(Debug, Clone, PartialEq)]
pub enum PackedWeights {
    Ternary(TernaryCodes),
    Float(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub name: String,
    pub weights: PackedWeights,
    pub bias: Tensor,
}

/// Inference-only model holding codes and scales (no float weight base).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub arch: Architecture,
    pub layers: Vec<PackedLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub quantized: bool,
    /// Weight count (biases are stored as float and not counted).
    pub params: usize,
    pub sparsity: Option<f64>,
    pub bytes_packed: usize,
    pub bytes_float32: usize,
    /// `4·params / (bytes_packed + 4)`; `None` for full-precision layers.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExportReport {
    pub layers: Vec<LayerReport>,
    /// Totals over quantized layers only.
    pub quantized_params: usize,
    pub quantized_bytes_packed: usize,
    pub quantized_bytes_float32: usize,
    pub ratio: Option<f64>,
    /// Layers kept in full precision.
    pub float_layers: Vec<String>,
    pub file_bytes: usize,
}

/// Compression ratio of one ternary layer of `params` weights.
pub fn compression_ratio(params: usize) -> f64 {
    (4 * params) as f64 / (params.div_ceil(4) + SCALE_BYTES) as f64
}

impl PackedModel {
    /// Snapshot of `model` in packed form. Quantized layers must be fresh.
    pub fn from_model(model: &Model) -> Result<Self> {
        let layers = model
            .params()
            .iter()
            .map(|p| {
                let weights = match &p.quant {
                    Some(q) if q.is_fresh(p.weight.data()) => PackedWeights::Ternary(q.codes(&p.weight)),
                    Some(_) => return Err(Error::StaleQuantizer(p.name.clone())),
                    None => PackedWeights::Float(p.weight.clone()),
                };
                Ok(PackedLayer { name: p.name.clone(), weights, bias: p.bias.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(Self { arch: model.arch().clone(), layers })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(&PACKED_MAGIC);
        w.u16(FORMAT_VERSION);
        write_arch(&mut w, &self.arch);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.str16(&l.name)?;
            match &l.weights {
                PackedWeights::Ternary(c) => {
                    w.shape(c.shape());
                    w.u8(KIND_TERNARY);
                    w.f32(c.scale());
                    w.bytes(&pack_codes(c.codes())?);
                }
                PackedWeights::Float(t) => {
                    w.shape(t.shape());
                    w.u8(KIND_FLOAT);
                    w.f32s(t.data());
                }
            }
            w.u32(l.bias.len() as u32);
            w.f32s(l.bias.data());
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = open_container(bytes, PACKED_MAGIC)?;
        let arch = read_arch(&mut r)?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let name = r.str16()?;
            let shape = r.shape()?;
            let n = checked_len(&shape)?;
            let weights = match r.u8()? {
                KIND_TERNARY => {
                    let scale = r.f32()?;
                    let codes = unpack_codes(r.take(n.div_ceil(4))?, n)?;
                    PackedWeights::Ternary(TernaryCodes::new(shape, codes, scale)?)
                }
                KIND_FLOAT => PackedWeights::Float(Tensor::new(shape, r.f32s(n)?)?),
                other => return Err(Error::Format(format!("bad layer kind {other}"))),
            };
            let n_bias = r.u32()? as usize;
            let bias = Tensor::new(vec![n_bias], r.f32s(n_bias)?)?;
            layers.push(PackedLayer { name, weights, bias });
        }
        r.done()?;
        let packed = Self { arch, layers };
        packed.check_against_arch()?;
        Ok(packed)
    }

    fn check_against_arch(&self) -> Result<()> {
        let specs: Vec<_> = self.arch.parametric().collect();
        if specs.len() != self.layers.len() {
            return Err(Error::Format(format!("{} layers for {} parametric specs", self.layers.len(), specs.len())));
        }
        for (spec, l) in specs.iter().zip(&self.layers) {
            let shape = match &l.weights {
                PackedWeights::Ternary(c) => c.shape(),
                PackedWeights::Float(t) => t.shape(),
            };
            let kind_ok = spec.is_quantized() == matches!(l.weights, PackedWeights::Ternary(_));
            if Some(shape.to_vec()) != spec.weight_shape() || Some(l.bias.len()) != spec.bias_len() || !kind_ok {
                return Err(Error::Format(format!("layer `{}` does not match the architecture", l.name)));
            }
        }
        Ok(())
    }

    /// Forward pass using `S·(x ⊛ codes) + b` for ternary layers.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let expected = self.arch.input_shape().iter().product::<usize>();
        if x.rank() < 2 || x.shape()[1..].iter().product::<usize>() != expected {
            return Err(Error::ShapeMismatch { op: "infer", detail: format!("input {:?} vs per-sample {:?}", x.shape(), self.arch.input_shape()) });
        }
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let out = run_layers(&self.arch, &mut tape, vx, |tape, idx, spec, input| {
            let l = &self.layers[idx];
            let out = match &l.weights {
                PackedWeights::Ternary(c) => {
                    let codes = tape.constant(c.to_tensor());
                    let acc = apply_linear(tape, spec, input, codes)?;
                    tape.scale_by(acc, c.scale())
                }
                PackedWeights::Float(w) => {
                    let w = tape.constant(w.clone());
                    apply_linear(tape, spec, input, w)?
                }
            };
            let bias = tape.constant(l.bias.clone());
            tape.add_bias(out, bias)
        })?;
        Ok(tape.value(out).clone())
    }

    /// Per-layer sizes and compression ratios; `file_bytes` is the encoded size.
    pub fn report(&self, file_bytes: usize) -> Result<ExportReport> {
        let mut layers = Vec::new();
        let mut float_layers = Vec::new();
        for l in &self.layers {
            layers.push(match &l.weights {
                PackedWeights::Ternary(c) => LayerReport {
                    name: l.name.clone(),
                    quantized: true,
                    params: c.len(),
                    sparsity: Some(sparsity(c)?),
                    bytes_packed: c.len().div_ceil(4),
                    bytes_float32: 4 * c.len(),
                    ratio: Some(compression_ratio(c.len())),
                },
                PackedWeights::Float(t) => {
                    float_layers.push(l.name.clone());
                    LayerReport {
                        name: l.name.clone(),
                        quantized: false,
                        params: t.len(),
                        sparsity: None,
                        bytes_packed: 4 * t.len(),
                        bytes_float32: 4 * t.len(),
                        ratio: None,
                    }
                }
            });
        }
        let q: Vec<&LayerReport> = layers.iter().filter(|l| l.quantized).collect();
        let quantized_params = q.iter().map(|l| l.params).sum();
        let quantized_bytes_packed = q.iter().map(|l| l.bytes_packed).sum::<usize>();
        let quantized_bytes_float32 = q.iter().map(|l| l.bytes_float32).sum();
        let ratio = (!q.is_empty())
            .then(|| quantized_bytes_float32 as f64 / (quantized_bytes_packed + SCALE_BYTES * q.len()) as f64);
        Ok(ExportReport {
            layers,
            quantized_params,
            quantized_bytes_packed,
            quantized_bytes_float32,
            ratio,
            float_layers,
            file_bytes,
        })
    }
}

/// Writes the packed model and returns its report.
pub fn export_packed(model: &Model, path: impl AsRef<Path>) -> Result<ExportReport> {
    let packed = PackedModel::from_model(model)?;
    let bytes = packed.encode()?;
    fs::write(path, &bytes)?;
    packed.report(bytes.len())
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<PackedModel> {
    PackedModel::decode(&fs::read(path)?)
}

pub fn load_packed_and_infer(path: impl AsRef<Path>, x: &Tensor) -> Result<Tensor> {
    load_packed(path)?.infer(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ForwardMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ternary_model(desc: &str, seed: u64) -> Model {
        let mut m = Model::build_from_config(desc, seed).unwrap();
        m.init_thresholds(0.1).unwrap();
        m
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_codes(&[1, 0, -1, 1]).unwrap(), vec![0b01_10_00_01]);
        assert_eq!(pack_codes(&[1, 0, -1, 1]).unwrap(), vec![0x61]);
        assert_eq!(pack_codes(&[0]).unwrap(), vec![0x00]);
        assert_eq!(unpack_codes(&[0x00], 1).unwrap(), vec![0]);
        assert_eq!(pack_codes(&[-1, 1, 1, 1, -1]).unwrap(), vec![0b01_01_01_10, 0b10]);
        assert!(matches!(pack_codes(&[2]), Err(Error::InvalidCode(2))));
        assert!(matches!(unpack_codes(&[0b0011_0000], 4), Err(Error::ReservedCode(2))));
        assert!(unpack_codes(&[0x00, 0x00], 4).is_err());
        assert!(unpack_codes(&[0b0100], 1).is_err());
    }

    #[test]
    fn pack_round_trip_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let codes: Vec<i8> = (0..100_000).map(|_| rng.gen_range(-1..=1)).collect();
        let bytes = pack_codes(&codes).unwrap();
        assert_eq!(bytes.len(), 25_000);
        assert_eq!(unpack_codes(&bytes, codes.len()).unwrap(), codes);
        assert!(bytes.iter().all(|b| (0..4).all(|k| (b >> (2 * k)) & 0b11 != 0b11)));
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(codes in proptest::collection::vec(-1i8..=1, 0..300)) {
            let bytes = pack_codes(&codes).unwrap();
            prop_assert_eq!(bytes.len(), codes.len().div_ceil(4));
            prop_assert_eq!(unpack_codes(&bytes, codes.len()).unwrap(), codes);
        }
    }

    #[test]
    fn ratios() {
        assert!((compression_ratio(1_000_000) - 4_000_000.0 / 250_004.0).abs() < 1e-12);
        assert!((compression_ratio(1_000_000) - 16.0).abs() < 1e-3);
        assert!((compression_ratio(4) - 3.2).abs() < 1e-12);
        assert!(compression_ratio(100_000) >= 15.5);
    }

    #[test]
    fn checkpoint_round_trip_bit_identical() {
        let mut m = ternary_model("mlp-20-16-3", 4);
        m.params_mut()[1].bias.data_mut()[2] = 0.125;
        let ckpt = Checkpoint::new(m).with_meta("train_accuracy", 0.5).with_meta("note", "x=y");
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.model.params().iter().zip(ckpt.model.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.weight), bits(&b.weight));
            assert_eq!(a.quant.unwrap().delta().to_bits(), b.quant.unwrap().delta().to_bits());
        }
        assert!(back.model.quantizers_fresh());
        // Unrefreshed states and conv models survive as well.
        let ckpt = Checkpoint::new(Model::build_from_config("lenet-small", 1).unwrap());
        assert_eq!(decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap(), ckpt);
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let ckpt = Checkpoint::new(ternary_model("mlp-8-4-2", 0));
        let bytes = encode_checkpoint(&ckpt).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 8, 3] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::CrcMismatch { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic { .. })));
        assert!(matches!(PackedModel::decode(&bytes), Err(Error::BadMagic { .. })));

        let mut w = Writer::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u16(7);
        assert!(matches!(decode_checkpoint(&w.finish()), Err(Error::UnsupportedVersion(7))));
    }

    #[test]
    fn checkpoint_file_io() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::new(ternary_model("mlp-6-3", 2));
        let path = dir.path().join("m.tnck");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn export_infer_matches_ternary_forward() {
        let dir = tempfile::tempdir().unwrap();
        for desc in ["mlp-30-20-5", "in:1x8x8,conv:4:3:1:1,relu,flatten,dense:6:fp"] {
            let mut m = ternary_model(desc, 8);
            for p in m.params_mut() {
                p.bias.data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * i as f64);
            }
            m.refresh_quantizers().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let n: usize = m.arch().input_shape().iter().product();
            let mut shape = vec![3];
            shape.extend_from_slice(m.arch().input_shape());
            let x = Tensor::new(shape, (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let path = dir.path().join("m.tern");
            let report = export_packed(&m, &path).unwrap();
            assert_eq!(report.file_bytes, std::fs::metadata(&path).unwrap().len() as usize);
            let got = load_packed_and_infer(&path, &x).unwrap();
            let want = m.logits(&x, ForwardMode::TERNARY).unwrap();
            let scale = want.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() <= 1e-6 * scale, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn report_flags_float_layers() {
        let m = ternary_model("in:1x8x8,conv:4:3:1:1,relu,flatten,dense:6:fp", 2);
        let r = PackedModel::from_model(&m).unwrap().report(0).unwrap();
        assert_eq!(r.float_layers, vec!["fc1".to_string()]);
        assert_eq!(r.quantized_params, 36);
        assert_eq!(r.layers[0].bytes_packed, 9);
        assert_eq!(r.ratio, Some(144.0 / 13.0));
        assert_eq!(r.layers[1].ratio, None);
    }

    #[test]
    fn stale_state_rejected_on_export() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ternary_model("mlp-6-3", 2);
        m.params_mut()[0].weight.data_mut()[0] += 0.5;
        assert!(matches!(export_packed(&m, dir.path().join("x")), Err(Error::StaleQuantizer(name)) if name == "fc1"));
    }

    #[test]
    fn tampered_scale_detected() {
        let m = ternary_model("mlp-6-3", 2);
        let mut bytes = PackedModel::from_model(&m).unwrap().encode().unwrap();
        // Scale follows magic, version, two strings, layer count, name and shape.
        let desc = m.arch().descriptor().len();
        let list = m.arch().layer_list().len();
        let at = 4 + 2 + 4 + desc + 4 + list + 4 + 2 + 3 + 1 + 8 + 1;
        let before = PackedModel::decode(&bytes).unwrap();
        bytes[at] ^= 0x01;
        assert!(matches!(PackedModel::decode(&bytes), Err(Error::CrcMismatch { .. })));
        // With a recomputed CRC the change is visible in the outputs.
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        let after = PackedModel::decode(&bytes).unwrap();
        let x = Tensor::ones(&[1, 6]);
        assert_ne!(before.infer(&x).unwrap(), after.infer(&x).unwrap());
    }

    #[test]
    fn all_zero_codes_give_bias_logits() {
        let m = ternary_model("mlp-4-3", 1);
        let mut packed = PackedModel::from_model(&m).unwrap();
        let l = &mut packed.layers[0];
        let PackedWeights::Ternary(c) = &l.weights else { unreachable!() };
        l.weights = PackedWeights::Ternary(TernaryCodes::new(c.shape().to_vec(), vec![0; c.len()], c.scale()).unwrap());
        l.bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let back = PackedModel::decode(&packed.encode().unwrap()).unwrap();
        let out = back.infer(&Tensor::filled(&[2, 4], 3.0)).unwrap();
        assert_eq!(out.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }
}
