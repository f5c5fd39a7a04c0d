//! Teacher-side uncertainty: Monte-Carlo dropout passes, predictive entropy
//! and entropy-threshold confidence masking. The mean soft label plus mask is
//! the response-based knowledge the student distills from.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};
use crate::segnet::{forward, softmax_probs, ForwardMode, ModelParams, SoftLabel};
use crate::synthdata::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    /// Number of stochastic passes K.
    pub num_passes: usize,
    /// Std of the Gaussian input noise added per pass (intensity units).
    pub noise_std: f64,
    /// Base entropy threshold as a fraction of ln C.
    pub threshold_base: f64,
    /// Additional fraction ramped in linearly over `total_rounds`.
    pub threshold_ramp: f64,
    /// Normalizer for the threshold ramp.
    pub total_rounds: usize,
    pub seed: u64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            num_passes: 8,
            noise_std: 0.05,
            threshold_base: 0.75,
            threshold_ramp: 0.25,
            total_rounds: 20,
            seed: 0,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_passes < 2 {
            return Err(Error::Config("num_passes must be >= 2".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if !(self.threshold_base > 0.0
            && self.threshold_base + self.threshold_ramp <= 1.0 + 1e-12)
        {
            return Err(Error::Config(
                "need 0 < threshold_base <= threshold_base + threshold_ramp <= 1".into(),
            ));
        }
        if self.total_rounds == 0 {
            return Err(Error::Config("total_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-voxel predictive entropy, each value in `[0, ln C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub values: Array3<f64>,
}

/// Binary mask of voxels whose entropy is below the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    pub values: Array3<u8>,
    pub confident_fraction: f64,
}

impl ConfidenceMask {
    pub fn from_values(values: Array3<u8>) -> Self {
        let ones = values.iter().filter(|&&v| v != 0).count();
        let total = values.len();
        ConfidenceMask {
            confident_fraction: ones as f64 / total as f64,
            values,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let (a, b, c) = self.values.dim();
        [a, b, c]
    }
}

/// K stochastic forward passes with derived per-pass seeds; returns the mean
/// soft label and its predictive entropy map. Deterministic given
/// `(teacher, volume, cfg.seed)`.
pub fn mc_teacher_pass(
    teacher: &ModelParams,
    volume: &Volume,
    cfg: &UncertaintyConfig,
) -> Result<(SoftLabel, UncertaintyMap)> {
    cfg.validate()?;
    let k = cfg.num_passes;
    let mut mean: Option<SoftLabel> = None;
    for pass in 0..k {
        let mode = ForwardMode::Stochastic {
            seed: derive_seed(cfg.seed, &[tag::MC_PASS, pass as u64]),
            noise_std: cfg.noise_std,
        };
        let (logits, _) = forward(teacher, volume, mode)?;
        let probs = softmax_probs(&logits);
        match &mut mean {
            None => mean = Some(probs),
            Some(m) => {
                for (a, b) in m
                    .values
                    .as_slice_mut()
                    .unwrap()
                    .iter_mut()
                    .zip(probs.values.as_slice().unwrap())
                {
                    *a += b;
                }
            }
        }
    }
    let mut mean = mean.expect("K >= 2");
    let inv_k = 1.0 / k as f64;
    for v in mean.values.as_slice_mut().unwrap().iter_mut() {
        *v *= inv_k;
    }
    let entropy = predictive_entropy(&mean);
    Ok((mean, entropy))
}

/// `H(j) = -sum_c mu_c(j) ln mu_c(j)` with `0 ln 0 := 0`.
pub fn predictive_entropy(mean: &SoftLabel) -> UncertaintyMap {
    let c = mean.num_classes();
    let dims = mean.spatial_dims();
    let vox: usize = dims.iter().product();
    let p = mean.values.as_slice().unwrap();
    let mut h = vec![0.0f64; vox];
    for (j, hv) in h.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ch in 0..c {
            let v = p[ch * vox + j];
            if v > 0.0 {
                acc -= v * v.ln();
            }
        }
        *hv = acc.max(0.0);
    }
    UncertaintyMap {
        values: Array3::from_shape_vec((dims[0], dims[1], dims[2]), h).unwrap(),
    }
}

/// Entropy threshold at round `t`:
/// `(base + ramp * min(t, total) / total) * ln C`, nondecreasing in `t`.
pub fn entropy_threshold(t: usize, cfg: &UncertaintyConfig, num_classes: usize) -> f64 {
    debug_assert!(t >= 1);
    let frac = (t.min(cfg.total_rounds)) as f64 / cfg.total_rounds as f64;
    (cfg.threshold_base + cfg.threshold_ramp * frac) * (num_classes as f64).ln()
}

/// Voxels with entropy strictly below the threshold are confident.
pub fn confidence_mask(umap: &UncertaintyMap, threshold: f64) -> ConfidenceMask {
    let values = umap.values.mapv(|h| u8::from(h < threshold));
    ConfidenceMask::from_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{init_params, Activation, ModelConfig};
    use ndarray::{Array3, Array4};
    use rand::Rng;

    fn teacher_and_volume(dropout: f64) -> (ModelParams, Volume) {
        let cfg = ModelConfig {
            in_channels: 1,
            num_classes: 3,
            base_width: 2,
            depth: 2,
            dropout_rate: dropout,
            activation: Activation::Relu,
            seed: 21,
        };
        let mut rng = crate::rng::derive_rng(8, &[0x31]);
        let vol = Volume {
            values: Array3::from_shape_fn((8, 8, 4), |_| rng.random_range(0.0..1.0)),
            spacing: [1.0; 3],
        };
        (init_params(&cfg), vol)
    }

    #[test]
    fn degenerate_stochasticity_matches_deterministic() {
        let (teacher, vol) = teacher_and_volume(0.0);
        let cfg = UncertaintyConfig {
            noise_std: 0.0,
            ..UncertaintyConfig::default()
        };
        let (mean, umap) = mc_teacher_pass(&teacher, &vol, &cfg).unwrap();
        let (logits, _) = forward(&teacher, &vol, ForwardMode::Deterministic).unwrap();
        let det = crate::segnet::softmax_probs(&logits);
        for (a, b) in mean.values.iter().zip(det.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let want = predictive_entropy(&det);
        for (a, b) in umap.values.iter().zip(want.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_pass_deterministic_in_seed() {
        let (teacher, vol) = teacher_and_volume(0.2);
        let cfg = UncertaintyConfig::default();
        let (m1, u1) = mc_teacher_pass(&teacher, &vol, &cfg).unwrap();
        let (m2, u2) = mc_teacher_pass(&teacher, &vol, &cfg).unwrap();
        assert_eq!(m1.values, m2.values);
        assert_eq!(u1.values, u2.values);
        let other = UncertaintyConfig {
            seed: 99,
            ..UncertaintyConfig::default()
        };
        let (m3, _) = mc_teacher_pass(&teacher, &vol, &other).unwrap();
        assert_ne!(m1.values, m3.values);
    }

    #[test]
    fn entropy_analytic_extremes() {
        let uniform = SoftLabel {
            values: Array4::from_elem((4, 1, 1, 1), 0.25),
        };
        let h = predictive_entropy(&uniform);
        assert!((h.values[[0, 0, 0]] - 4.0f64.ln()).abs() < 1e-12);

        let mut onehot = Array4::zeros((4, 1, 1, 1));
        onehot[[2, 0, 0, 0]] = 1.0;
        let h = predictive_entropy(&SoftLabel { values: onehot });
        assert_eq!(h.values[[0, 0, 0]], 0.0);
    }

    #[test]
    fn entropy_bounds_random_softlabels() {
        let mut rng = crate::rng::derive_rng(4, &[0x32]);
        let c = 4;
        let ln_c = (c as f64).ln();
        for _ in 0..10_000 {
            let mut v = vec![0.0f64; c];
            let mut s = 0.0;
            for x in v.iter_mut() {
                *x = rng.random_range(0.0f64..1.0).max(1e-16);
                s += *x;
            }
            for x in v.iter_mut() {
                *x /= s;
            }
            let sl = SoftLabel {
                values: Array4::from_shape_vec((c, 1, 1, 1), v).unwrap(),
            };
            let h = predictive_entropy(&sl).values[[0, 0, 0]];
            assert!((0.0..=ln_c + 1e-9).contains(&h), "H = {h}");
        }
    }

    #[test]
    fn threshold_ramp_and_extremes() {
        let cfg = UncertaintyConfig::default();
        let thr_final = entropy_threshold(cfg.total_rounds, &cfg, 4);
        assert!((thr_final - 4.0f64.ln()).abs() < 1e-12);
        let mut prev = 0.0;
        for t in 1..=cfg.total_rounds {
            let thr = entropy_threshold(t, &cfg, 4);
            assert!(thr >= prev);
            prev = thr;
        }
        let no_ramp = UncertaintyConfig {
            threshold_ramp: 0.0,
            ..UncertaintyConfig::default()
        };
        assert!((entropy_threshold(1, &no_ramp, 4) - 0.75 * 4.0f64.ln()).abs() < 1e-12);
        assert!((entropy_threshold(17, &no_ramp, 4) - 0.75 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_threshold_extremes_and_monotonicity() {
        let mut rng = crate::rng::derive_rng(6, &[0x33]);
        let umap = UncertaintyMap {
            values: Array3::from_shape_fn((4, 4, 2), |_| rng.random_range(0.0..4.0f64.ln())),
        };
        let zero = confidence_mask(&umap, 0.0);
        assert_eq!(zero.confident_fraction, 0.0);
        let all = confidence_mask(&umap, 4.0f64.ln() + 1.0);
        assert_eq!(all.confident_fraction, 1.0);
        let mut prev = 0usize;
        for i in 0..=10 {
            let thr = 4.0f64.ln() * i as f64 / 10.0 + 1e-9;
            let m = confidence_mask(&umap, thr);
            let ones = m.values.iter().filter(|&&v| v != 0).count();
            assert!(ones >= prev);
            prev = ones;
        }
    }

    #[test]
    fn mc_mean_stabilizes_with_more_passes() {
        let (teacher, vol) = teacher_and_volume(0.2);
        let k64 = UncertaintyConfig {
            num_passes: 64,
            ..UncertaintyConfig::default()
        };
        let k128 = UncertaintyConfig {
            num_passes: 128,
            ..UncertaintyConfig::default()
        };
        let (m64, _) = mc_teacher_pass(&teacher, &vol, &k64).unwrap();
        let (m128, _) = mc_teacher_pass(&teacher, &vol, &k128).unwrap();
        let max_delta = m64
            .values
            .iter()
            .zip(m128.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta < 0.05, "max |delta mu| = {max_delta}");
    }

    #[test]
    fn k_must_be_at_least_two() {
        let (teacher, vol) = teacher_and_volume(0.1);
        let cfg = UncertaintyConfig {
            num_passes: 1,
            ..UncertaintyConfig::default()
        };
        assert!(mc_teacher_pass(&teacher, &vol, &cfg).is_err());
    }
}
