//! Encoder-decoder 3D segmentation network.
//!
//! A small U-Net-style net: `depth` encoder stages (two 3x3x3 convolutions +
//! ReLU each, 2x max-pool between stages), a bottleneck stage whose
//! post-activation output is the latent code, and a mirrored decoder
//! (nearest-neighbor upsample, skip concatenation, two convolutions), followed
//! by a 1x1x1 classification head. Dropout sits after every encoder stage and
//! after the bottleneck (stochastic mode only; the latent code is taken before
//! bottleneck dropout).
//!
//! All math is in `f64`. Parameters live in a flat, ordered entry list so that
//! aggregation, EMA and SGD are plain vector algebra.

mod kernels;
mod net;

pub use net::{
    forward, loss_and_gradients, ForwardMode, ObjectiveSpec, TeacherSignal, UnlabeledTerm,
};

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};
use rand::Rng;

pub const CHECKPOINT_FORMAT: &str = "fedfskd-ckpt-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Static description of the network. Hashable; the hash ties checkpoints and
/// gradients to the architecture that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 4,
            base_width: 8,
            depth: 3,
            dropout_rate: 0.1,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 1 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Channel width of encoder stage `s` (1-based).
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << (s - 1)
    }

    /// Channel width of the bottleneck stage.
    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.depth
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// One named tensor. `values` is flat in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamEntry {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }
}

/// Ordered, named collection of the trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
    config_hash: String,
}

/// Gradients share the exact layout of the parameters they belong to.
pub type GradientVector = ModelParams;

/// A conv layer position in the entry list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvSlot {
    pub weight: usize,
    pub bias: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub ksize: usize,
}

/// The full layer schedule derived from a config: entry names, shapes and the
/// conv slots the forward pass walks. Order is fixed and documented in
/// `docs/architecture.md`.
#[derive(Debug, Clone)]
pub(crate) struct LayerSchedule {
    pub enc: Vec<[ConvSlot; 2]>,
    pub bottleneck: [ConvSlot; 2],
    pub dec: Vec<[ConvSlot; 2]>,
    pub head: ConvSlot,
    pub names: Vec<(String, Vec<usize>)>,
}

pub(crate) fn layer_schedule(cfg: &ModelConfig) -> LayerSchedule {
    let mut names: Vec<(String, Vec<usize>)> = Vec::new();
    let mut slots: Vec<ConvSlot> = Vec::new();
    let mut push_conv = |names: &mut Vec<(String, Vec<usize>)>, prefix: &str, in_c: usize, out_c: usize, k: usize| {
        let widx = names.len();
        names.push((format!("{prefix}.weight"), vec![out_c, in_c, k, k, k]));
        names.push((format!("{prefix}.bias"), vec![out_c]));
        slots.push(ConvSlot {
            weight: widx,
            bias: widx + 1,
            in_c,
            out_c,
            ksize: k,
        });
    };

    for s in 1..=cfg.depth {
        let w = cfg.stage_width(s);
        let in_c = if s == 1 { cfg.in_channels } else { cfg.stage_width(s - 1) };
        push_conv(&mut names, &format!("enc{s}.conv1"), in_c, w, 3);
        push_conv(&mut names, &format!("enc{s}.conv2"), w, w, 3);
    }
    let wb = cfg.bottleneck_width();
    push_conv(&mut names, "bottleneck.conv1", cfg.stage_width(cfg.depth), wb, 3);
    push_conv(&mut names, "bottleneck.conv2", wb, wb, 3);
    for s in (1..=cfg.depth).rev() {
        let w = cfg.stage_width(s);
        let deep = if s == cfg.depth { wb } else { cfg.stage_width(s + 1) };
        push_conv(&mut names, &format!("dec{s}.conv1"), deep + w, w, 3);
        push_conv(&mut names, &format!("dec{s}.conv2"), w, w, 3);
    }
    push_conv(&mut names, "head", cfg.base_width, cfg.num_classes, 1);

    let mut it = slots.into_iter();
    let mut enc = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        enc.push([it.next().unwrap(), it.next().unwrap()]);
    }
    let bottleneck = [it.next().unwrap(), it.next().unwrap()];
    let mut dec = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        dec.push([it.next().unwrap(), it.next().unwrap()]);
    }
    let head = it.next().unwrap();
    LayerSchedule {
        enc,
        bottleneck,
        dec,
        head,
        names,
    }
}

/// Initialize parameters deterministically from `config.seed`: weights from a
/// fan-in-scaled uniform distribution, biases zero.
///
/// Panics on an invalid config; validity is enforced where configs are built.
pub fn init_params(cfg: &ModelConfig) -> ModelParams {
    cfg.validate().expect("init_params requires a valid ModelConfig");
    let schedule = layer_schedule(cfg);
    let hash = cfg.digest();
    let mut entries = Vec::with_capacity(schedule.names.len());
    for (idx, (name, shape)) in schedule.names.iter().enumerate() {
        let mut entry = ParamEntry::zeros(name, shape);
        // biases stay zero
        if name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = derive_rng(cfg.seed, &[tag::PARAM_INIT, idx as u64]);
            for v in entry.values.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        entries.push(entry);
    }
    ModelParams {
        config: cfg.clone(),
        entries,
        config_hash: hash,
    }
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// A same-shape set with every value zero (gradient accumulator).
    pub fn zeros_like(&self) -> ModelParams {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: vec![0.0; e.values.len()],
            })
            .collect();
        ModelParams {
            config: self.config.clone(),
            entries,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn compatible_with(&self, other: &ModelParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.values.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Mutable access for tests and in-place perturbation (finite differences).
    pub fn value_mut(&mut self, entry: usize, offset: usize) -> &mut f64 {
        &mut self.entries[entry].values[offset]
    }
}

fn check_compatible(x: &ModelParams, y: &ModelParams, op: &str) -> Result<()> {
    if !x.compatible_with(y) {
        return Err(Error::IncompatibleParams(format!(
            "{op}: entry names/order/shapes differ"
        )));
    }
    Ok(())
}

/// Entrywise `a * x + y`.
pub fn param_axpy(a: f64, x: &ModelParams, y: &ModelParams) -> Result<ModelParams> {
    check_compatible(x, y, "param_axpy")?;
    let mut out = y.clone();
    for (oe, xe) in out.entries.iter_mut().zip(&x.entries) {
        for (o, xv) in oe.values.iter_mut().zip(&xe.values) {
            *o += a * xv;
        }
    }
    Ok(out)
}

/// Entrywise `a * x + y` updating `y` in place (hot path of the SGD loop).
pub fn param_axpy_inplace(a: f64, x: &ModelParams, y: &mut ModelParams) -> Result<()> {
    check_compatible(x, y, "param_axpy")?;
    for (ye, xe) in y.entries.iter_mut().zip(&x.entries) {
        for (yv, xv) in ye.values.iter_mut().zip(&xe.values) {
            *yv += a * xv;
        }
    }
    Ok(())
}

/// Write a checkpoint: `u64` LE header length, UTF-8 JSON header, then the
/// entry value arrays as little-endian IEEE-754 doubles in entry order.
/// Byte layout documented in `docs/formats.md`.
pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        format: &'static str,
        config: &'a ModelConfig,
        config_hash: &'a str,
        entries: Vec<HeaderEntry<'a>>,
    }
    #[derive(Serialize)]
    struct HeaderEntry<'a> {
        name: &'a str,
        shape: &'a [usize],
    }
    let header = Header {
        format: CHECKPOINT_FORMAT,
        config: cfg,
        config_hash: &params.config_hash,
        entries: params
            .entries
            .iter()
            .map(|e| HeaderEntry {
                name: &e.name,
                shape: &e.shape,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for e in &params.entries {
        for v in &e.values {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        config: ModelConfig,
        config_hash: String,
        entries: Vec<HeaderEntry>,
    }
    #[derive(Deserialize)]
    struct HeaderEntry {
        name: String,
        shape: Vec<usize>,
    }
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format {:?}",
            header.format
        )));
    }
    let mut entries = Vec::with_capacity(header.entries.len());
    for he in &header.entries {
        let len: usize = he.shape.iter().product();
        let mut values = vec![0.0f64; len];
        let mut buf = vec![0u8; len * 8];
        file.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            values[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        entries.push(ParamEntry {
            name: he.name.clone(),
            shape: he.shape.clone(),
            values,
        });
    }
    let params = ModelParams {
        config: header.config.clone(),
        entries,
        config_hash: header.config_hash,
    };
    if params.config_hash != header.config.digest() {
        return Err(Error::CheckpointFormat(
            "config hash does not match embedded config".into(),
        ));
    }
    Ok((params, header.config))
}

/// Encoder bottleneck feature map: channels x d x h x w.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Array4<f64>,
}

impl LatentCode {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn spatial_dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }
}

/// Raw class scores: C x d x h x w.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Array4<f64>,
}

/// Per-voxel class distribution: C x d x h x w, channel vectors sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub values: Array4<f64>,
}

impl SoftLabel {
    pub fn num_classes(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn spatial_dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }
}

/// Numerically stabilized channel-wise softmax per voxel.
pub fn softmax_probs(logits: &Logits) -> SoftLabel {
    let shape = logits.values.raw_dim();
    let c = shape[0];
    let vox: usize = shape[1] * shape[2] * shape[3];
    let src = logits.values.as_slice().expect("logits contiguous");
    let mut out = vec![0.0f64; c * vox];
    for v in 0..vox {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(src[ch * vox + v]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (src[ch * vox + v] - max).exp();
            out[ch * vox + v] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for ch in 0..c {
            out[ch * vox + v] *= inv;
        }
    }
    SoftLabel {
        values: Array4::from_shape_vec(shape, out).unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            base_width: 8,
            depth: 3,
            num_classes: 4,
            seed: 42,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn layer_schedule_matches_documented_table() {
        // Hand-enumerated from the architecture table for
        // base_width=8, depth=3, C=4, in_channels=1.
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("enc1.conv1.weight", vec![8, 1, 3, 3, 3]),
            ("enc1.conv1.bias", vec![8]),
            ("enc1.conv2.weight", vec![8, 8, 3, 3, 3]),
            ("enc1.conv2.bias", vec![8]),
            ("enc2.conv1.weight", vec![16, 8, 3, 3, 3]),
            ("enc2.conv1.bias", vec![16]),
            ("enc2.conv2.weight", vec![16, 16, 3, 3, 3]),
            ("enc2.conv2.bias", vec![16]),
            ("enc3.conv1.weight", vec![32, 16, 3, 3, 3]),
            ("enc3.conv1.bias", vec![32]),
            ("enc3.conv2.weight", vec![32, 32, 3, 3, 3]),
            ("enc3.conv2.bias", vec![32]),
            ("bottleneck.conv1.weight", vec![64, 32, 3, 3, 3]),
            ("bottleneck.conv1.bias", vec![64]),
            ("bottleneck.conv2.weight", vec![64, 64, 3, 3, 3]),
            ("bottleneck.conv2.bias", vec![64]),
            ("dec3.conv1.weight", vec![32, 96, 3, 3, 3]),
            ("dec3.conv1.bias", vec![32]),
            ("dec3.conv2.weight", vec![32, 32, 3, 3, 3]),
            ("dec3.conv2.bias", vec![32]),
            ("dec2.conv1.weight", vec![16, 48, 3, 3, 3]),
            ("dec2.conv1.bias", vec![16]),
            ("dec2.conv2.weight", vec![16, 16, 3, 3, 3]),
            ("dec2.conv2.bias", vec![16]),
            ("dec1.conv1.weight", vec![8, 24, 3, 3, 3]),
            ("dec1.conv1.bias", vec![8]),
            ("dec1.conv2.weight", vec![8, 8, 3, 3, 3]),
            ("dec1.conv2.bias", vec![8]),
            ("head.weight", vec![4, 8, 1, 1, 1]),
            ("head.bias", vec![4]),
        ];
        let params = init_params(&small_cfg());
        assert_eq!(params.num_entries(), expected.len());
        for (e, (name, shape)) in params.entries().iter().zip(&expected) {
            assert_eq!(&e.name, name);
            assert_eq!(&e.shape, shape);
        }
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        let a = init_params(&small_cfg());
        let b = init_params(&small_cfg());
        assert_eq!(a, b);
        let c = init_params(&ModelConfig {
            seed: 43,
            ..small_cfg()
        });
        assert!(a
            .entries()
            .iter()
            .zip(c.entries())
            .any(|(x, y)| x.values != y.values));
        assert!(a.all_finite());
    }

    #[test]
    fn biases_zero_weights_bounded() {
        let p = init_params(&small_cfg());
        for e in p.entries() {
            if e.name.ends_with(".bias") {
                assert!(e.values.iter().all(|v| *v == 0.0));
            } else {
                let fan_in: usize = e.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                assert!(e.values.iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn axpy_basics() {
        let p = init_params(&small_cfg());
        let y = param_axpy(0.0, &p, &p).unwrap();
        assert_eq!(y, p);
        let double = param_axpy(1.0, &p, &p).unwrap();
        for (d, o) in double.entries().iter().zip(p.entries()) {
            for (dv, ov) in d.values.iter().zip(&o.values) {
                assert_eq!(*dv, 2.0 * ov);
            }
        }
    }

    #[test]
    fn axpy_linearity_to_fp_tolerance() {
        let p = init_params(&small_cfg());
        let x = init_params(&ModelConfig {
            seed: 99,
            ..small_cfg()
        });
        let (a, b) = (0.3, -0.7);
        let lhs = param_axpy(a, &x, &param_axpy(b, &x, &p).unwrap()).unwrap();
        let rhs = param_axpy(a + b, &x, &p).unwrap();
        for (l, r) in lhs.entries().iter().zip(rhs.entries()) {
            for (lv, rv) in l.values.iter().zip(&r.values) {
                assert!((lv - rv).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn axpy_rejects_incompatible() {
        let p = init_params(&small_cfg());
        let q = init_params(&ModelConfig {
            base_width: 4,
            ..small_cfg()
        });
        assert!(param_axpy(1.0, &p, &q).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let cfg = small_cfg();
        let p = init_params(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, &cfg, &path).unwrap();
        let (q, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(cfg, cfg2);
        // Bitwise stability of the file itself.
        let bytes1 = std::fs::read(&path).unwrap();
        save_checkpoint(&p, &cfg, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let logits = Logits {
            values: Array4::zeros((4, 2, 2, 2)),
        };
        let sl = softmax_probs(&logits);
        for v in sl.values.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }

        let mut big = Array4::zeros((4, 1, 1, 1));
        big[[0, 0, 0, 0]] = 1000.0;
        let sl = softmax_probs(&Logits { values: big });
        assert!(sl.values[[0, 0, 0, 0]] > 1.0 - 1e-9);
        assert!(sl.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_closed_form() {
        let mut l = Array4::zeros((4, 1, 1, 1));
        l[[0, 0, 0, 0]] = (2.0f64).ln();
        let sl = softmax_probs(&Logits { values: l });
        assert!((sl.values[[0, 0, 0, 0]] - 0.4).abs() < 1e-12);
    }
}
