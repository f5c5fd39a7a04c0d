//! Forward/backward passes over the encoder-decoder and the assembly of the
//! training objective into a loss value plus parameter gradients.
//!
//! Feature maps are kept internally in a permuted spatial layout `(w, d, h)`
//! so the longest axis is contiguous for the conv kernels; everything
//! crossing the public API boundary is in `(d, h, w)` order.

use ndarray::{Array3, Array4};
use rand_distr::{Distribution, Normal};

use super::kernels::*;
use super::{
    layer_schedule, softmax_probs, ConvSlot, GradientVector, LatentCode, Logits, ModelParams,
    SoftLabel,
};
use crate::error::{Error, Result};
use crate::losses::{self, combined_loss, KdTerms, LossBreakdown, LossWeights};
use crate::rng::{derive_rng, derive_seed, tag};
use crate::synthdata::{LabelMask, Volume};
use crate::uncertainty::ConfidenceMask;

/// How a forward pass treats dropout and input noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    /// No dropout, no noise; a pure function of (params, volume).
    Deterministic,
    /// Seeded dropout at the configured rate plus zero-mean Gaussian input
    /// noise; a pure function of (params, volume, seed).
    Stochastic { seed: u64, noise_std: f64 },
}

fn permute_in(vol: &Array3<f64>) -> Array4<f64> {
    let (d, h, w) = vol.dim();
    let mut out = Array4::zeros((1, w, d, h));
    for ((i, j, k), &v) in vol.indexed_iter() {
        out[[0, k, i, j]] = v;
    }
    out
}

// internal [C, w, d, h] -> public [C, d, h, w]
fn permute_out(x: &Array4<f64>) -> Array4<f64> {
    let sh = x.shape();
    let (c, w, d, h) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = Array4::zeros((c, d, h, w));
    for ((ch, k, i, j), &v) in x.indexed_iter() {
        out[[ch, i, j, k]] = v;
    }
    out
}

// public [C, d, h, w] -> internal [C, w, d, h]
fn permute_grad_in(x: &Array4<f64>) -> Array4<f64> {
    let sh = x.shape();
    let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let mut out = Array4::zeros((c, w, d, h));
    for ((ch, i, j, k), &v) in x.indexed_iter() {
        out[[ch, k, i, j]] = v;
    }
    out
}

struct EncCache {
    input: Array4<f64>,
    a1: Array4<f64>,
    /// Stage output after dropout (what pool and skip consume).
    out: Array4<f64>,
    /// Pre-dropout activation (ReLU gate reference).
    a2: Array4<f64>,
    mask: Option<Vec<f64>>,
    pool_arg: Vec<u32>,
}

struct DecCache {
    concat: Array4<f64>,
    d1: Array4<f64>,
    d2: Array4<f64>,
    deep_channels: usize,
}

pub(crate) struct FullCache {
    enc: Vec<EncCache>,
    bott_input: Array4<f64>,
    b1: Array4<f64>,
    b2: Array4<f64>,
    bott_mask: Option<Vec<f64>>,
    dec: Vec<DecCache>, // forward order: stage depth .. 1
}

fn check_dims(params: &ModelParams, vol: &Volume) -> Result<()> {
    let cfg = params.config();
    let div = 1usize << cfg.depth;
    let (d, h, w) = vol.values.dim();
    if d % div != 0 || h % div != 0 || w % div != 0 || d == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "volume dims ({d}, {h}, {w}) not divisible by 2^depth = {div}"
        )));
    }
    let expected = layer_schedule(cfg).names;
    if params.entries().len() != expected.len()
        || params
            .entries()
            .iter()
            .zip(&expected)
            .any(|(e, (n, s))| &e.name != n || &e.shape != s)
    {
        return Err(Error::IncompatibleParams(
            "params do not match the config's layer schedule".into(),
        ));
    }
    Ok(())
}

fn conv_of<'a>(params: &'a ModelParams, slot: &ConvSlot) -> (&'a [f64], &'a [f64]) {
    (
        &params.entry(slot.weight).values,
        &params.entry(slot.bias).values,
    )
}

fn forward_internal(
    params: &ModelParams,
    volume: &Volume,
    mode: ForwardMode,
) -> Result<(Logits, LatentCode, FullCache)> {
    check_dims(params, volume)?;
    let cfg = params.config();
    let schedule = layer_schedule(cfg);
    let mut scratch = ConvScratch::default();

    let mut x = permute_in(&volume.values);
    let (dropout_rate, pass_seed) = match mode {
        ForwardMode::Deterministic => (0.0, 0),
        ForwardMode::Stochastic { seed, noise_std } => {
            if noise_std > 0.0 {
                let mut rng = derive_rng(seed, &[tag::INPUT_NOISE]);
                let normal = Normal::new(0.0, noise_std).expect("valid noise std");
                for v in x.as_slice_mut().unwrap().iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            (cfg.dropout_rate, seed)
        }
    };

    let mut enc_caches: Vec<EncCache> = Vec::with_capacity(cfg.depth);
    for (s, convs) in schedule.enc.iter().enumerate() {
        let dims = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (w1, b1v) = conv_of(params, &convs[0]);
        let mut a1 = Array4::zeros((convs[0].out_c, dims.0, dims.1, dims.2));
        conv3(&x, w1, b1v, &mut a1, true, &mut scratch);
        let (w2, b2v) = conv_of(params, &convs[1]);
        let mut a2 = Array4::zeros((convs[1].out_c, dims.0, dims.1, dims.2));
        conv3(&a1, w2, b2v, &mut a2, true, &mut scratch);

        let mask = if dropout_rate > 0.0 {
            let mut rng = derive_rng(pass_seed, &[tag::DROPOUT, s as u64]);
            Some(dropout_mask(a2.len(), dropout_rate, &mut rng))
        } else {
            None
        };
        let mut out = a2.clone();
        if let Some(m) = &mask {
            apply_mask(&mut out, m);
        }
        let (pooled, arg) = maxpool2(&out);
        enc_caches.push(EncCache {
            input: x,
            a1,
            out,
            a2,
            mask,
            pool_arg: arg,
        });
        x = pooled;
    }

    // bottleneck; its post-activation output is the latent code
    let bott_input = x;
    let dims = (
        bott_input.shape()[1],
        bott_input.shape()[2],
        bott_input.shape()[3],
    );
    let (w1, b1v) = conv_of(params, &schedule.bottleneck[0]);
    let mut b1 = Array4::zeros((schedule.bottleneck[0].out_c, dims.0, dims.1, dims.2));
    conv3(&bott_input, w1, b1v, &mut b1, true, &mut scratch);
    let (w2, b2v) = conv_of(params, &schedule.bottleneck[1]);
    let mut b2 = Array4::zeros((schedule.bottleneck[1].out_c, dims.0, dims.1, dims.2));
    conv3(&b1, w2, b2v, &mut b2, true, &mut scratch);

    let latent = LatentCode {
        values: permute_out(&b2),
    };

    let bott_mask = if dropout_rate > 0.0 {
        let mut rng = derive_rng(pass_seed, &[tag::DROPOUT, cfg.depth as u64]);
        Some(dropout_mask(b2.len(), dropout_rate, &mut rng))
    } else {
        None
    };
    let mut y = b2.clone();
    if let Some(m) = &bott_mask {
        apply_mask(&mut y, m);
    }

    // decoder: stages depth .. 1
    let mut dec_caches: Vec<DecCache> = Vec::with_capacity(cfg.depth);
    for (i, convs) in schedule.dec.iter().enumerate() {
        let stage = cfg.depth - i; // 1-based
        let up = upsample2(&y);
        let deep_channels = up.shape()[0];
        let concat = concat_channels(&up, &enc_caches[stage - 1].out);
        let dims = (concat.shape()[1], concat.shape()[2], concat.shape()[3]);
        let (w1, b1v) = conv_of(params, &convs[0]);
        let mut d1 = Array4::zeros((convs[0].out_c, dims.0, dims.1, dims.2));
        conv3(&concat, w1, b1v, &mut d1, true, &mut scratch);
        let (w2, b2v) = conv_of(params, &convs[1]);
        let mut d2 = Array4::zeros((convs[1].out_c, dims.0, dims.1, dims.2));
        conv3(&d1, w2, b2v, &mut d2, true, &mut scratch);
        y = d2.clone();
        dec_caches.push(DecCache {
            concat,
            d1,
            d2,
            deep_channels,
        });
    }

    let (wh, bh) = conv_of(params, &schedule.head);
    let mut logits_internal =
        Array4::zeros((schedule.head.out_c, y.shape()[1], y.shape()[2], y.shape()[3]));
    conv1(&y, wh, bh, &mut logits_internal);

    let logits = Logits {
        values: permute_out(&logits_internal),
    };
    Ok((
        logits,
        latent,
        FullCache {
            enc: enc_caches,
            bott_input,
            b1,
            b2,
            bott_mask,
            dec: dec_caches,
        },
    ))
}

/// Run the network. Deterministic mode is a pure function of
/// `(params, volume)`; stochastic mode of `(params, volume, seed)`.
pub fn forward(
    params: &ModelParams,
    volume: &Volume,
    mode: ForwardMode,
) -> Result<(Logits, LatentCode)> {
    let (logits, latent, _) = forward_internal(params, volume, mode)?;
    Ok((logits, latent))
}

/// Backpropagate `grad_logits` (and optionally a gradient injected at the
/// latent code) through the cached forward pass, accumulating into `grads`.
fn backward(
    params: &ModelParams,
    cache: &FullCache,
    grad_logits: &Array4<f64>,
    grad_latent: Option<&Array4<f64>>,
    grads: &mut GradientVector,
) {
    let cfg = params.config();
    let schedule = layer_schedule(cfg);
    let mut scratch = ConvScratch::default();

    let glog = permute_grad_in(grad_logits);

    // head
    let head_in = &cache.dec[cfg.depth - 1].d2;
    let mut dy = Array4::zeros(head_in.raw_dim());
    {
        let (wh, _) = conv_of(params, &schedule.head);
        let (gw, gb) = grads.slot_mut(&schedule.head);
        conv1_backward(head_in, wh, &glog, &mut dy, gw, gb);
    }

    // decoder stages in reverse forward order (stage 1 .. depth)
    let mut skip_grads: Vec<Option<Array4<f64>>> = (0..cfg.depth).map(|_| None).collect();
    for i in (0..cfg.depth).rev() {
        let stage = cfg.depth - i; // 1-based stage of this decoder block
        let dc = &cache.dec[i];
        let convs = &schedule.dec[i];

        relu_backward_inplace(&mut dy, &dc.d2);
        let mut dd1 = Array4::zeros(dc.d1.raw_dim());
        {
            let (w2, _) = conv_of(params, &convs[1]);
            let (gw, gb) = grads.slot_mut(&convs[1]);
            conv3_backward(&dc.d1, w2, &dy, Some(&mut dd1), gw, gb, &mut scratch);
        }
        relu_backward_inplace(&mut dd1, &dc.d1);
        let mut dz = Array4::zeros(dc.concat.raw_dim());
        {
            let (w1, _) = conv_of(params, &convs[0]);
            let (gw, gb) = grads.slot_mut(&convs[0]);
            conv3_backward(&dc.concat, w1, &dd1, Some(&mut dz), gw, gb, &mut scratch);
        }
        let (du, dskip) = split_channels(&dz, dc.deep_channels);
        skip_grads[stage - 1] = Some(dskip);
        let up_in_shape = if i == 0 {
            cache.b2.raw_dim()
        } else {
            cache.dec[i - 1].d2.raw_dim()
        };
        let mut dprev = Array4::zeros(up_in_shape);
        upsample2_backward(&du, &mut dprev);
        dy = dprev;
    }

    // bottleneck: dy holds the gradient at the (post-dropout) bottleneck output
    if let Some(m) = &cache.bott_mask {
        apply_mask(&mut dy, m);
    }
    if let Some(gl) = grad_latent {
        let gl_int = permute_grad_in(gl);
        for (a, b) in dy
            .as_slice_mut()
            .unwrap()
            .iter_mut()
            .zip(gl_int.as_slice().unwrap())
        {
            *a += b;
        }
    }
    relu_backward_inplace(&mut dy, &cache.b2);
    let mut db1 = Array4::zeros(cache.b1.raw_dim());
    {
        let (w2, _) = conv_of(params, &schedule.bottleneck[1]);
        let (gw, gb) = grads.slot_mut(&schedule.bottleneck[1]);
        conv3_backward(&cache.b1, w2, &dy, Some(&mut db1), gw, gb, &mut scratch);
    }
    relu_backward_inplace(&mut db1, &cache.b1);
    let mut dpool = Array4::zeros(cache.bott_input.raw_dim());
    {
        let (w1, _) = conv_of(params, &schedule.bottleneck[0]);
        let (gw, gb) = grads.slot_mut(&schedule.bottleneck[0]);
        conv3_backward(
            &cache.bott_input,
            w1,
            &db1,
            Some(&mut dpool),
            gw,
            gb,
            &mut scratch,
        );
    }

    // encoder stages depth .. 1
    for s in (0..cfg.depth).rev() {
        let ec = &cache.enc[s];
        let convs = &schedule.enc[s];
        let mut dout = Array4::zeros(ec.out.raw_dim());
        maxpool2_backward(&dpool, &ec.pool_arg, &mut dout);
        if let Some(dskip) = &skip_grads[s] {
            for (a, b) in dout
                .as_slice_mut()
                .unwrap()
                .iter_mut()
                .zip(dskip.as_slice().unwrap())
            {
                *a += b;
            }
        }
        if let Some(m) = &ec.mask {
            apply_mask(&mut dout, m);
        }
        relu_backward_inplace(&mut dout, &ec.a2);
        let mut da1 = Array4::zeros(ec.a1.raw_dim());
        {
            let (w2, _) = conv_of(params, &convs[1]);
            let (gw, gb) = grads.slot_mut(&convs[1]);
            conv3_backward(&ec.a1, w2, &dout, Some(&mut da1), gw, gb, &mut scratch);
        }
        relu_backward_inplace(&mut da1, &ec.a1);
        let (w1, _) = conv_of(params, &convs[0]);
        let (gw, gb) = grads.slot_mut(&convs[0]);
        if s == 0 {
            // input gradient not needed
            conv3_backward(&ec.input, w1, &da1, None, gw, gb, &mut scratch);
        } else {
            let mut dinp = Array4::zeros(ec.input.raw_dim());
            conv3_backward(&ec.input, w1, &da1, Some(&mut dinp), gw, gb, &mut scratch);
            dpool = dinp;
        }
    }
}

impl GradientVector {
    /// Mutable (weight, bias) slices for one conv slot.
    fn slot_mut(&mut self, slot: &ConvSlot) -> (&mut [f64], &mut [f64]) {
        debug_assert_eq!(slot.bias, slot.weight + 1);
        let (a, b) = self.entries_mut().split_at_mut(slot.bias);
        (&mut a[slot.weight].values, &mut b[0].values)
    }
}

/// What the teacher contributes for one unlabeled volume: the MC-mean soft
/// label, the confidence mask derived from its predictive entropy, and (for
/// dual distillation) its bottleneck latent code.
#[derive(Debug, Clone)]
pub struct TeacherSignal {
    pub mean_probs: SoftLabel,
    pub mask: ConfidenceMask,
    pub latent: Option<LatentCode>,
}

/// One unlabeled batch member paired with its teacher signal.
#[derive(Debug)]
pub struct UnlabeledTerm<'a> {
    pub volume: &'a Volume,
    pub teacher: &'a TeacherSignal,
}

/// A fully specified training objective for one SGD step.
#[derive(Debug)]
pub struct ObjectiveSpec<'a> {
    pub labeled: Vec<(&'a Volume, &'a LabelMask)>,
    pub unlabeled: Vec<UnlabeledTerm<'a>>,
    pub weights: LossWeights,
    /// Distillation weight for this round (0 when no teacher is attached).
    pub lambda: f64,
    pub student_mode: ForwardMode,
}

fn per_sample_mode(base: ForwardMode, kind: u64, index: usize) -> ForwardMode {
    match base {
        ForwardMode::Deterministic => ForwardMode::Deterministic,
        ForwardMode::Stochastic { seed, noise_std } => ForwardMode::Stochastic {
            seed: derive_seed(seed, &[kind, index as u64]),
            noise_std,
        },
    }
}

/// Evaluate the combined objective and its gradients for every parameter.
///
/// The supervised term is the mean over labeled batch members; the KD terms
/// are means over unlabeled members. Gradients are exact for the implemented
/// formulas (epsilon smoothing and clamps included).
pub fn loss_and_gradients(
    params: &ModelParams,
    objective: &ObjectiveSpec,
) -> Result<(LossBreakdown, GradientVector)> {
    let mut grads = params.zeros_like();
    let n_lab = objective.labeled.len();
    let n_unl = objective.unlabeled.len();

    let mut supervised = 0.0;
    for (i, (vol, mask)) in objective.labeled.iter().enumerate() {
        let mode = per_sample_mode(objective.student_mode, 0, i);
        let (logits, _latent, cache) = forward_internal(params, vol, mode)?;
        let probs = softmax_probs(&logits);
        supervised += losses::supervised_loss(&probs, mask)?;
        let mut glog = losses::supervised_grad_wrt_logits(&probs, mask)?;
        let scale = 1.0 / n_lab as f64;
        for v in glog.iter_mut() {
            *v *= scale;
        }
        backward(params, &cache, &glog, None, &mut grads);
    }
    if n_lab > 0 {
        supervised /= n_lab as f64;
    }

    let mut kd: Option<KdTerms> = None;
    if n_unl > 0 {
        let mut response = 0.0;
        let mut feature = 0.0;
        let mut any_latent = false;
        let mut conf = 0.0;
        for (i, term) in objective.unlabeled.iter().enumerate() {
            let mode = per_sample_mode(objective.student_mode, 1, i);
            let (logits, latent_s, cache) = forward_internal(params, term.volume, mode)?;
            let probs = softmax_probs(&logits);
            let t = term.teacher;
            response += losses::response_kd_loss(&probs, &t.mean_probs, &t.mask)?;
            conf += t.mask.confident_fraction;

            let mut glog = losses::response_grad_wrt_logits(&probs, &t.mean_probs, &t.mask)?;
            let gscale = objective.lambda * objective.weights.response_weight / n_unl as f64;
            for v in glog.iter_mut() {
                *v *= gscale;
            }

            let glat = if let Some(latent_t) = &t.latent {
                any_latent = true;
                feature +=
                    losses::feature_kd_loss(latent_t, &latent_s, objective.weights.kd_temperature)?;
                let mut g = losses::feature_grad_wrt_latent(
                    latent_t,
                    &latent_s,
                    objective.weights.kd_temperature,
                )?;
                let fscale = objective.lambda * objective.weights.feature_weight / n_unl as f64;
                for v in g.iter_mut() {
                    *v *= fscale;
                }
                Some(g)
            } else {
                None
            };
            backward(params, &cache, &glog, glat.as_ref(), &mut grads);
        }
        kd = Some(KdTerms {
            response_kd: response / n_unl as f64,
            feature_kd: if any_latent {
                Some(feature / n_unl as f64)
            } else {
                None
            },
            confident_fraction: conf / n_unl as f64,
        });
    }

    let breakdown = combined_loss(supervised, kd.as_ref(), objective.lambda, &objective.weights);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            round: 0,
            iteration: 0,
            detail: format!(
                "supervised={} response={} feature={}",
                breakdown.supervised, breakdown.response_kd, breakdown.feature_kd
            ),
        });
    }
    Ok((breakdown, grads))
}
