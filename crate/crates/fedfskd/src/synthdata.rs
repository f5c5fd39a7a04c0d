//! Synthetic "cartilage-like" 3D segmentation phantoms at heterogeneous
//! resolutions, the repository / federated-client corpora built from them,
//! and supervised teacher pretraining on the repository.
//!
//! Geometry: three thin curved sheets rendered as level sets over the first
//! axis — two large paraboloid caps (FC, TC) and a small ellipsoid-shell
//! dome (PC) — with per-class intensity plateaus, a smooth background ramp,
//! edge fade and Gaussian noise. Everything is a pure function of
//! `(seed, index)`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics;
use crate::rng::{derive_rng, derive_seed, tag};
use crate::segnet::{
    init_params, loss_and_gradients, param_axpy_inplace, ForwardMode, ModelConfig, ModelParams,
    ObjectiveSpec,
};

pub const VOLUME_FORMAT: &str = "fedfskd-vol-1";

/// 3D intensity grid with physical voxel spacing (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub values: Array3<f64>,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn dims(&self) -> [usize; 3] {
        let (a, b, c) = self.values.dim();
        [a, b, c]
    }
}

/// Per-voxel class labels: 0 background, 1 FC, 2 TC, 3 PC.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub values: Array3<u8>,
}

impl LabelMask {
    pub fn dims(&self) -> [usize; 3] {
        let (a, b, c) = self.values.dim();
        [a, b, c]
    }

    pub fn class_voxels(&self, class: u8) -> usize {
        self.values.iter().filter(|&&v| v == class).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub grid: [usize; 3],
    pub spacing: [f64; 3],
    /// Sheet thickness range per class (FC, TC, PC), in voxels along axis 0.
    pub thickness: [[f64; 2]; 3],
    /// Paraboloid rise at the footprint edge, normalized units.
    pub curvature: [f64; 2],
    /// Intensity plateau per class (FC, TC, PC).
    pub contrast: [f64; 3],
    /// Per-phantom uniform wobble applied to each class plateau.
    pub contrast_wobble: f64,
    /// Radial intensity fade toward the footprint edge (0 disables).
    pub class_fade: f64,
    /// Additive offset on all plateaus (per-client Non-IID jitter).
    pub contrast_jitter: f64,
    pub noise_std: f64,
    pub bg_level: f64,
    pub bg_gradient: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    /// Client-resolution (coarse) phantom defaults.
    fn default() -> Self {
        PhantomParams {
            grid: [48, 48, 8],
            spacing: [0.3, 0.3, 3.5],
            thickness: [[1.6, 2.8], [1.6, 2.8], [1.4, 2.4]],
            curvature: [0.06, 0.16],
            contrast: [0.52, 0.68, 0.84],
            contrast_wobble: 0.03,
            class_fade: 0.25,
            contrast_jitter: 0.0,
            noise_std: 0.10,
            bg_level: 0.22,
            bg_gradient: 0.15,
            seed: 0,
        }
    }
}

impl PhantomParams {
    /// Repository-resolution (fine) phantom defaults.
    pub fn hi_res_default() -> Self {
        PhantomParams {
            grid: [64, 64, 16],
            spacing: [0.4, 0.4, 0.8],
            noise_std: 0.05,
            ..PhantomParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.iter().any(|&g| g == 0) {
            return Err(Error::Config("phantom grid dims must be positive".into()));
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("phantom spacing must be positive".into()));
        }
        for t in &self.thickness {
            if t[0] < 1.0 || t[1] < t[0] {
                return Err(Error::Config(
                    "thickness ranges must satisfy 1 <= min <= max".into(),
                ));
            }
        }
        if self.noise_std < 0.0 || !(0.0..=1.0).contains(&self.class_fade) {
            return Err(Error::Config("bad noise/fade parameters".into()));
        }
        Ok(())
    }
}

/// One client's private data.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub labeled: Vec<(Volume, LabelMask)>,
    pub unlabeled: Vec<Volume>,
    pub val: Vec<(Volume, LabelMask)>,
    pub test: Vec<(Volume, LabelMask)>,
}

impl ClientDataset {
    pub fn sample_count(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// A sheet surface rendered as a level set over axis 0.
struct Sheet {
    class: u8,
    center: [f64; 2],
    radii: [f64; 2],
    thickness_vox: f64,
    kind: SheetKind,
}

enum SheetKind {
    /// `u0 = level + rise * rho^2` inside `rho <= 1`.
    Paraboloid { level: f64, rise: f64 },
    /// `u0 = pole + r0 * (1 - sqrt(1 - rho^2))` inside `rho <= cap`.
    Dome { pole: f64, r0: f64, cap: f64 },
}

impl Sheet {
    /// Surface level (normalized u0) and footprint coordinate rho at (u1, u2),
    /// or None outside the footprint.
    fn level_at(&self, u1: f64, u2: f64) -> Option<(f64, f64)> {
        let d1 = (u1 - self.center[0]) / self.radii[0];
        let d2 = (u2 - self.center[1]) / self.radii[1];
        let rho2 = d1 * d1 + d2 * d2;
        match self.kind {
            SheetKind::Paraboloid { level, rise } => {
                if rho2 <= 1.0 {
                    Some((level + rise * rho2, rho2.sqrt()))
                } else {
                    None
                }
            }
            SheetKind::Dome { pole, r0, cap } => {
                if rho2 <= cap * cap {
                    Some((pole + r0 * (1.0 - (1.0 - rho2).sqrt()), rho2.sqrt() / cap))
                } else {
                    None
                }
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn sample_sheets(p: &PhantomParams, rng: &mut impl Rng) -> [Sheet; 3] {
    let fc_center = [uniform(rng, 0.44, 0.56), uniform(rng, 0.44, 0.56)];
    let fc = Sheet {
        class: 1,
        center: fc_center,
        radii: [uniform(rng, 0.28, 0.38), uniform(rng, 0.28, 0.38)],
        thickness_vox: uniform(rng, p.thickness[0][0], p.thickness[0][1]),
        kind: SheetKind::Paraboloid {
            level: uniform(rng, 0.22, 0.34),
            rise: uniform(rng, p.curvature[0], p.curvature[1]),
        },
    };
    let tc = Sheet {
        class: 2,
        center: [
            fc_center[0] + uniform(rng, -0.05, 0.05),
            fc_center[1] + uniform(rng, -0.05, 0.05),
        ],
        radii: [uniform(rng, 0.26, 0.34), uniform(rng, 0.26, 0.34)],
        thickness_vox: uniform(rng, p.thickness[1][0], p.thickness[1][1]),
        kind: SheetKind::Paraboloid {
            level: uniform(rng, 0.56, 0.70),
            rise: 0.6 * uniform(rng, p.curvature[0], p.curvature[1]),
        },
    };
    let side = if rng.random::<f64>() < 0.5 { 0.28 } else { 0.60 };
    let pc = Sheet {
        class: 3,
        center: [uniform(rng, side, side + 0.12), uniform(rng, 0.38, 0.62)],
        radii: [uniform(rng, 0.09, 0.13), uniform(rng, 0.22, 0.30)],
        thickness_vox: uniform(rng, p.thickness[2][0], p.thickness[2][1]),
        kind: SheetKind::Dome {
            pole: uniform(rng, 0.06, 0.14),
            r0: uniform(rng, 0.05, 0.09),
            cap: 0.8,
        },
    };
    [fc, pc, tc]
}

const PLACEMENT_ATTEMPTS: usize = 100;
const MIN_VOXELS: [usize; 3] = [16, 16, 6]; // FC, TC, PC

/// Render one phantom. Deterministic in `(p.seed, index)`.
pub fn generate_phantom(p: &PhantomParams, index: u64) -> Result<(Volume, LabelMask)> {
    p.validate()?;
    let [d, h, w] = p.grid;
    let mut rng = derive_rng(p.seed, &[tag::PHANTOM, index]);

    let mut mask = Array3::<u8>::zeros((d, h, w));
    let mut fade = Array3::<f64>::ones((d, h, w));
    let mut placed = false;
    for attempt in 0..PLACEMENT_ATTEMPTS {
        let sheets = sample_sheets(p, &mut rng);
        // per-column intervals, checked for containment and pairwise gaps
        let mut columns: Vec<(usize, usize, u8, i64, i64, f64)> = Vec::new();
        let mut ok = true;
        let mut counts = [0usize; 4];
        'cols: for i1 in 0..h {
            for i2 in 0..w {
                let u1 = (i1 as f64 + 0.5) / h as f64;
                let u2 = (i2 as f64 + 0.5) / w as f64;
                let mut intervals: Vec<(i64, i64, u8, f64)> = Vec::new();
                for s in &sheets {
                    if let Some((level, rho)) = s.level_at(u1, u2) {
                        let center = level * d as f64;
                        let lo = (center - s.thickness_vox / 2.0 - 0.5).ceil() as i64;
                        let hi = (center + s.thickness_vox / 2.0 - 0.5).floor() as i64;
                        if lo < 0 || hi >= d as i64 {
                            ok = false;
                            break 'cols;
                        }
                        intervals.push((lo, hi, s.class, rho));
                    }
                }
                intervals.sort_by_key(|iv| iv.0);
                for pair in intervals.windows(2) {
                    if pair[1].0 <= pair[0].1 + 1 {
                        ok = false;
                        break 'cols;
                    }
                }
                for (lo, hi, class, rho) in intervals {
                    counts[class as usize] += (hi - lo + 1) as usize;
                    columns.push((i1, i2, class, lo, hi, rho));
                }
            }
        }
        if ok
            && counts[1] >= MIN_VOXELS[0]
            && counts[2] >= MIN_VOXELS[1]
            && counts[3] >= MIN_VOXELS[2]
        {
            for (i1, i2, class, lo, hi, rho) in columns {
                for i0 in lo..=hi {
                    mask[[i0 as usize, i1, i2]] = class;
                    fade[[i0 as usize, i1, i2]] = 1.0 - p.class_fade * rho * rho;
                }
            }
            placed = true;
            break;
        }
        if attempt + 1 == PLACEMENT_ATTEMPTS {
            return Err(Error::DegenerateGeometry {
                index,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    debug_assert!(placed);

    // intensities: background ramp, class plateaus with fade, noise, clip
    let gdir = {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        [v[0] / norm, v[1] / norm, v[2] / norm]
    };
    let wobble: [f64; 3] = std::array::from_fn(|_| {
        rng.random_range(-p.contrast_wobble..=p.contrast_wobble)
    });
    let noise = Normal::new(0.0, p.noise_std.max(1e-300)).expect("valid noise std");
    let mut values = Array3::<f64>::zeros((d, h, w));
    for i0 in 0..d {
        let u0 = (i0 as f64 + 0.5) / d as f64;
        for i1 in 0..h {
            let u1 = (i1 as f64 + 0.5) / h as f64;
            for i2 in 0..w {
                let u2 = (i2 as f64 + 0.5) / w as f64;
                let class = mask[[i0, i1, i2]];
                let mut v = if class == 0 {
                    p.bg_level
                        + p.bg_gradient
                            * (gdir[0] * (u0 - 0.5) + gdir[1] * (u1 - 0.5) + gdir[2] * (u2 - 0.5))
                } else {
                    let plateau = p.contrast[class as usize - 1]
                        + wobble[class as usize - 1]
                        + p.contrast_jitter;
                    plateau * fade[[i0, i1, i2]]
                };
                if p.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                values[[i0, i1, i2]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        Volume {
            values,
            spacing: p.spacing,
        },
        LabelMask { values: mask },
    ))
}

/// The labeled high-resolution repository (teacher pretraining corpus).
pub fn make_repository(seed: u64, n: usize, hi_res: &PhantomParams) -> Result<Vec<(Volume, LabelMask)>> {
    let p = PhantomParams { seed, ..hi_res.clone() };
    (0..n as u64).map(|i| generate_phantom(&p, i)).collect()
}

/// Counts and Non-IID jitter amplitudes for the federated corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationDataSpec {
    pub n_clients: usize,
    pub labeled_per_client: usize,
    pub unlabeled_per_client: usize,
    pub val_per_client: usize,
    pub test_per_client: usize,
    /// Per-client plateau offset drawn from U(-amp, amp).
    pub contrast_jitter_amp: f64,
    /// Per-client extra noise drawn from U(0, amp).
    pub noise_jitter_amp: f64,
}

impl Default for FederationDataSpec {
    fn default() -> Self {
        FederationDataSpec {
            n_clients: 4,
            labeled_per_client: 4,
            unlabeled_per_client: 40,
            val_per_client: 2,
            test_per_client: 2,
            contrast_jitter_amp: 0.06,
            noise_jitter_amp: 0.05,
        }
    }
}

impl FederationDataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0
            || self.labeled_per_client == 0
            || self.unlabeled_per_client == 0
            || self.val_per_client == 0
            || self.test_per_client == 0
        {
            return Err(Error::Config("federation data counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-client coarse-resolution corpora with per-client contrast/noise jitter
/// (the Non-IID mechanism). Splits are disjoint by generation index.
pub fn make_federation(
    seed: u64,
    spec: &FederationDataSpec,
    lo_res: &PhantomParams,
) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let mut clients = Vec::with_capacity(spec.n_clients);
    for c in 0..spec.n_clients {
        let mut jrng = derive_rng(seed, &[tag::CLIENT_JITTER, c as u64]);
        let contrast_jitter =
            jrng.random_range(-spec.contrast_jitter_amp..=spec.contrast_jitter_amp);
        let noise_extra = jrng.random_range(0.0..=spec.noise_jitter_amp);
        let bg_shift = jrng.random_range(-0.04..=0.04);
        let p = PhantomParams {
            seed: derive_seed(seed, &[tag::PHANTOM, c as u64]),
            contrast_jitter,
            noise_std: lo_res.noise_std + noise_extra,
            bg_level: lo_res.bg_level + bg_shift,
            ..lo_res.clone()
        };
        let total = spec.labeled_per_client
            + spec.unlabeled_per_client
            + spec.val_per_client
            + spec.test_per_client;
        let mut pairs = Vec::with_capacity(total);
        for i in 0..total as u64 {
            pairs.push(generate_phantom(&p, i)?);
        }
        let mut it = pairs.into_iter();
        let labeled: Vec<_> = (&mut it).take(spec.labeled_per_client).collect();
        let unlabeled: Vec<_> = (&mut it)
            .take(spec.unlabeled_per_client)
            .map(|(v, _)| v)
            .collect();
        let val: Vec<_> = (&mut it).take(spec.val_per_client).collect();
        let test: Vec<_> = it.take(spec.test_per_client).collect();
        clients.push(ClientDataset {
            labeled,
            unlabeled,
            val,
            test,
        });
    }
    Ok(clients)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Held out from the tail of the repository for the gate check.
    pub val_count: usize,
    /// Required validation macro DSC; 0 disables the gate.
    pub gate_dsc: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 500,
            learning_rate: 0.05,
            batch_size: 2,
            val_count: 6,
            gate_dsc: 0.80,
            seed: 0,
        }
    }
}

/// Supervised-only SGD on the repository at its native resolution; returns
/// the teacher and its achieved validation macro DSC, enforcing the gate.
pub fn pretrain_teacher(
    repo: &[(Volume, LabelMask)],
    model_cfg: &ModelConfig,
    train_cfg: &PretrainConfig,
) -> Result<(ModelParams, f64)> {
    if repo.len() <= train_cfg.val_count {
        return Err(Error::EmptyDataset(format!(
            "repository has {} phantoms but val_count is {}",
            repo.len(),
            train_cfg.val_count
        )));
    }
    let split = repo.len() - train_cfg.val_count;
    let (train, val) = repo.split_at(split);

    let mut params = init_params(model_cfg);
    let weights = LossWeights::default();
    for it in 0..train_cfg.iterations {
        let mut rng = derive_rng(train_cfg.seed, &[tag::PRETRAIN, it as u64]);
        let batch: Vec<_> = (0..train_cfg.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..train.len());
                (&train[idx].0, &train[idx].1)
            })
            .collect();
        let objective = ObjectiveSpec {
            labeled: batch,
            unlabeled: vec![],
            weights: weights.clone(),
            lambda: 0.0,
            student_mode: ForwardMode::Stochastic {
                seed: derive_seed(train_cfg.seed, &[tag::PRETRAIN, it as u64, 1]),
                noise_std: 0.0,
            },
        };
        let (breakdown, grads) = loss_and_gradients(&params, &objective).map_err(|e| match e {
            Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                round: 0,
                iteration: it,
                detail,
            },
            other => other,
        })?;
        debug_assert!(breakdown.total.is_finite());
        param_axpy_inplace(-train_cfg.learning_rate, &grads, &mut params)?;
    }

    let rows = metrics::evaluate(&params, val)?;
    let achieved = metrics::macro_dsc(&rows);
    if achieved < train_cfg.gate_dsc {
        return Err(Error::GateFailure {
            achieved,
            required: train_cfg.gate_dsc,
        });
    }
    Ok((params, achieved))
}

// ---------------------------------------------------------------------------
// Volume / mask container files: u64 LE header length, UTF-8 JSON header,
// little-endian payload (f64 for volumes, u8 for masks). Documented in
// docs/formats.md.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VolHeader {
    format: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

fn write_container(path: &Path, header: &VolHeader, payload: &[u8]) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(payload)?;
    file.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(VolHeader, Vec<u8>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: VolHeader = serde_json::from_slice(&header_bytes)?;
    if header.format != VOLUME_FORMAT {
        return Err(Error::CheckpointFormat(format!(
            "unsupported volume format {:?}",
            header.format
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    Ok((header, payload))
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    let header = VolHeader {
        format: VOLUME_FORMAT.into(),
        dims: vol.dims(),
        spacing: vol.spacing,
        dtype: "f64".into(),
    };
    let mut payload = Vec::with_capacity(vol.values.len() * 8);
    for v in vol.values.as_slice().unwrap() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_container(path, &header, &payload)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = read_container(path)?;
    let n: usize = header.dims.iter().product();
    if header.dtype != "f64" || payload.len() != n * 8 {
        return Err(Error::CheckpointFormat("bad volume payload".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume {
        values: Array3::from_shape_vec((header.dims[0], header.dims[1], header.dims[2]), values)
            .unwrap(),
        spacing: header.spacing,
    })
}

pub fn save_mask(mask: &LabelMask, spacing: [f64; 3], path: &Path) -> Result<()> {
    let header = VolHeader {
        format: VOLUME_FORMAT.into(),
        dims: mask.dims(),
        spacing,
        dtype: "u8".into(),
    };
    write_container(path, &header, mask.values.as_slice().unwrap())
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let (header, payload) = read_container(path)?;
    let n: usize = header.dims.iter().product();
    if header.dtype != "u8" || payload.len() != n {
        return Err(Error::CheckpointFormat("bad mask payload".into()));
    }
    Ok(LabelMask {
        values: Array3::from_shape_vec((header.dims[0], header.dims[1], header.dims[2]), payload)
            .unwrap(),
    })
}
