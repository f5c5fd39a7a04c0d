//! Segmentation metrics: per-class DSC, VOE (percent) and ASSD (mm, physical
//! spacing), plus whole-split model evaluation.
//!
//! ASSD extracts 6-connectivity surfaces (the volume border counts as
//! outside) and measures exact Euclidean distances through a separable
//! anisotropic distance transform; the test suite checks it against a naive
//! pairwise oracle.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::segnet::{forward, ForwardMode, ModelParams};
use crate::synthdata::{LabelMask, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// "all", "fc"/"tc"/"pc" for the canonical 4-class setup, or "classN".
    pub class_label: String,
    pub dsc: f64,
    pub voe: f64,
    /// Mean over cases where both surfaces exist; `None` if no case had one.
    pub assd: Option<f64>,
    pub n_cases: usize,
    pub n_assd_undefined: usize,
}

pub fn class_label(class: usize, num_classes: usize) -> String {
    if num_classes == 4 {
        match class {
            1 => "fc".into(),
            2 => "tc".into(),
            3 => "pc".into(),
            c => format!("class{c}"),
        }
    } else {
        format!("class{class}")
    }
}

fn check_dims(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mask dims {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

fn overlap_counts(pred: &LabelMask, gt: &LabelMask, class: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut a = 0;
    let mut b = 0;
    for (p, g) in pred.values.iter().zip(gt.values.iter()) {
        let pa = *p == class;
        let gb = *g == class;
        a += usize::from(pa);
        b += usize::from(gb);
        inter += usize::from(pa && gb);
    }
    (inter, a, b)
}

/// Dice similarity coefficient on the binary masks of `class`.
/// Both empty -> 1, exactly one empty -> 0.
pub fn dsc(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    check_dims(pred, gt)?;
    let (inter, a, b) = overlap_counts(pred, gt, class);
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Volumetric overlap error in percent: `100 * (1 - |A and B| / |A or B|)`.
/// Both empty -> 0.
pub fn voe(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<f64> {
    check_dims(pred, gt)?;
    let (inter, a, b) = overlap_counts(pred, gt, class);
    let union = a + b - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 - inter as f64 / union as f64))
}

/// Surface voxels of `class`: 6-connectivity, the volume border counts as
/// outside the class.
fn surface_voxels(mask: &LabelMask, class: u8) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.values.dim();
    let m = &mask.values;
    let mut out = Vec::new();
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if m[[i, j, k]] != class {
                    continue;
                }
                let boundary = i == 0
                    || i == d - 1
                    || j == 0
                    || j == h - 1
                    || k == 0
                    || k == w - 1
                    || m[[i - 1, j, k]] != class
                    || m[[i + 1, j, k]] != class
                    || m[[i, j - 1, k]] != class
                    || m[[i, j + 1, k]] != class
                    || m[[i, j, k - 1]] != class
                    || m[[i, j, k + 1]] != class;
                if boundary {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// 1-D lower-envelope squared distance transform at physical coordinates
/// `x_i = i * spacing`.
fn dt1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let x = |i: usize| i as f64 * spacing;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        while let Some(&p) = v.last() {
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            let p = *v.last().unwrap();
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            v.push(q);
            z.push(s);
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let xi = x(i);
        while k + 1 < v.len() && z[k + 1] < xi {
            k += 1;
        }
        let dx = xi - x(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// Exact anisotropic squared Euclidean distance transform to the seed set.
fn squared_edt(seeds: &[[usize; 3]], dims: (usize, usize, usize), spacing: [f64; 3]) -> Array3<f64> {
    let (d, h, w) = dims;
    let mut dist = Array3::from_elem((d, h, w), f64::INFINITY);
    for s in seeds {
        dist[[s[0], s[1], s[2]]] = 0.0;
    }
    let mut v = Vec::new();
    let mut z = Vec::new();
    let mut line: Vec<f64> = Vec::new();
    let mut out_line: Vec<f64> = Vec::new();

    // axis 2 (contiguous)
    for i in 0..d {
        for j in 0..h {
            line.clear();
            line.extend((0..w).map(|k| dist[[i, j, k]]));
            out_line.resize(w, 0.0);
            dt1d(&line, spacing[2], &mut out_line, &mut v, &mut z);
            for k in 0..w {
                dist[[i, j, k]] = out_line[k];
            }
        }
    }
    // axis 1
    for i in 0..d {
        for k in 0..w {
            line.clear();
            line.extend((0..h).map(|j| dist[[i, j, k]]));
            out_line.resize(h, 0.0);
            dt1d(&line, spacing[1], &mut out_line, &mut v, &mut z);
            for j in 0..h {
                dist[[i, j, k]] = out_line[j];
            }
        }
    }
    // axis 0
    for j in 0..h {
        for k in 0..w {
            line.clear();
            line.extend((0..d).map(|i| dist[[i, j, k]]));
            out_line.resize(d, 0.0);
            dt1d(&line, spacing[0], &mut out_line, &mut v, &mut z);
            for i in 0..d {
                dist[[i, j, k]] = out_line[i];
            }
        }
    }
    dist
}

/// Average symmetric surface distance in mm. `None` when either mask has no
/// surface for `class` (recorded as "undefined" upstream).
pub fn assd(pred: &LabelMask, gt: &LabelMask, class: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    let sa = surface_voxels(pred, class);
    let sb = surface_voxels(gt, class);
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let dims = pred.values.dim();
    let db = squared_edt(&sb, dims, spacing);
    let da = squared_edt(&sa, dims, spacing);
    let mut total = 0.0;
    for a in &sa {
        total += db[[a[0], a[1], a[2]]].sqrt();
    }
    for b in &sb {
        total += da[[b[0], b[1], b[2]]].sqrt();
    }
    Ok(Some(total / (sa.len() + sb.len()) as f64))
}

/// Deterministic forward pass, channel argmax (ties resolve to the lowest
/// class index).
pub fn predict_mask(model: &ModelParams, volume: &Volume) -> Result<LabelMask> {
    let (logits, _) = forward(model, volume, ForwardMode::Deterministic)?;
    let sh = logits.values.shape();
    let (c, d, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let vox = d * h * w;
    let flat = logits.values.as_slice().unwrap();
    let mut out = vec![0u8; vox];
    for (j, o) in out.iter_mut().enumerate() {
        let mut best = flat[j];
        let mut arg = 0u8;
        for ch in 1..c {
            let val = flat[ch * vox + j];
            if val > best {
                best = val;
                arg = ch as u8;
            }
        }
        *o = arg;
    }
    Ok(LabelMask {
        values: Array3::from_shape_vec((d, h, w), out).unwrap(),
    })
}

/// Evaluate a model over a labeled split: per-class rows averaged over cases
/// plus an "all" row macro-averaged over the foreground classes.
pub fn evaluate(model: &ModelParams, split: &[(Volume, LabelMask)]) -> Result<Vec<MetricsRow>> {
    if split.is_empty() {
        return Err(Error::EmptyDataset("evaluate: empty split".into()));
    }
    let c = model.config().num_classes;
    let n = split.len();
    let mut dsc_sum = vec![0.0f64; c];
    let mut voe_sum = vec![0.0f64; c];
    let mut assd_sum = vec![0.0f64; c];
    let mut assd_n = vec![0usize; c];
    for (vol, gt) in split {
        let pred = predict_mask(model, vol)?;
        for class in 1..c {
            dsc_sum[class] += dsc(&pred, gt, class as u8)?;
            voe_sum[class] += voe(&pred, gt, class as u8)?;
            if let Some(a) = assd(&pred, gt, class as u8, vol.spacing)? {
                assd_sum[class] += a;
                assd_n[class] += 1;
            }
        }
    }
    let mut rows = Vec::with_capacity(c);
    let mut macro_dsc = 0.0;
    let mut macro_voe = 0.0;
    let mut macro_assd = 0.0;
    let mut macro_assd_classes = 0usize;
    let mut total_undefined = 0usize;
    for class in 1..c {
        let mean_assd = if assd_n[class] > 0 {
            Some(assd_sum[class] / assd_n[class] as f64)
        } else {
            None
        };
        let undefined = n - assd_n[class];
        total_undefined += undefined;
        let row = MetricsRow {
            class_label: class_label(class, c),
            dsc: dsc_sum[class] / n as f64,
            voe: voe_sum[class] / n as f64,
            assd: mean_assd,
            n_cases: n,
            n_assd_undefined: undefined,
        };
        macro_dsc += row.dsc;
        macro_voe += row.voe;
        if let Some(a) = row.assd {
            macro_assd += a;
            macro_assd_classes += 1;
        }
        rows.push(row);
    }
    let fg = (c - 1) as f64;
    rows.insert(
        0,
        MetricsRow {
            class_label: "all".into(),
            dsc: macro_dsc / fg,
            voe: macro_voe / fg,
            assd: if macro_assd_classes > 0 {
                Some(macro_assd / macro_assd_classes as f64)
            } else {
                None
            },
            n_cases: n,
            n_assd_undefined: total_undefined,
        },
    );
    Ok(rows)
}

/// The macro ("all"-row) DSC of an [`evaluate`] result.
pub fn macro_dsc(rows: &[MetricsRow]) -> f64 {
    rows.iter()
        .find(|r| r.class_label == "all")
        .map(|r| r.dsc)
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask_from(vals: Vec<u8>, dims: (usize, usize, usize)) -> LabelMask {
        LabelMask {
            values: Array3::from_shape_vec(dims, vals).unwrap(),
        }
    }

    #[test]
    fn dsc_voe_hand_counts() {
        // |A| = 2, |B| = 4, |A ∩ B| = 2 -> dsc = 2/3
        let pred = mask_from(vec![1, 1, 0, 0, 0, 0, 0, 0], (2, 2, 2));
        let gt = mask_from(vec![1, 1, 1, 1, 0, 0, 0, 0], (2, 2, 2));
        assert!((dsc(&pred, &gt, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // |A ∩ B| = 2, |A ∪ B| = 4 -> voe = 50
        assert!((voe(&pred, &gt, 1).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn dsc_voe_degenerate_conventions() {
        let empty = mask_from(vec![0; 8], (2, 2, 2));
        let some = mask_from(vec![1, 0, 0, 0, 0, 0, 0, 0], (2, 2, 2));
        assert_eq!(dsc(&empty, &empty, 1).unwrap(), 1.0);
        assert_eq!(voe(&empty, &empty, 1).unwrap(), 0.0);
        assert_eq!(dsc(&some, &empty, 1).unwrap(), 0.0);
        assert_eq!(voe(&some, &empty, 1).unwrap(), 100.0);
        // disjoint non-empty
        let other = mask_from(vec![0, 1, 0, 0, 0, 0, 0, 0], (2, 2, 2));
        assert_eq!(dsc(&some, &other, 1).unwrap(), 0.0);
        assert_eq!(voe(&some, &other, 1).unwrap(), 100.0);
    }

    #[test]
    fn assd_identical_and_two_point() {
        let a = mask_from(vec![0, 1, 0, 0, 0, 0, 0, 0], (2, 2, 2));
        assert_eq!(assd(&a, &a, 1, [1.0; 3]).unwrap(), Some(0.0));
        // single voxels offset by one step along the last axis
        let b = mask_from(vec![1, 0, 0, 0, 0, 0, 0, 0], (2, 2, 2));
        let d = assd(&a, &b, 1, [1.0, 1.0, 1.0]).unwrap().unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // spacing scales the distance
        let d = assd(&a, &b, 1, [1.0, 1.0, 0.3]).unwrap().unwrap();
        assert!((d - 0.3).abs() < 1e-12);
    }

    #[test]
    fn assd_undefined_when_surface_missing() {
        let empty = mask_from(vec![0; 8], (2, 2, 2));
        let some = mask_from(vec![1, 0, 0, 0, 0, 0, 0, 0], (2, 2, 2));
        assert_eq!(assd(&empty, &some, 1, [1.0; 3]).unwrap(), None);
        assert_eq!(assd(&some, &empty, 1, [1.0; 3]).unwrap(), None);
    }

    /// Naive oracle: pairwise min distances between surface sets.
    fn assd_oracle(pred: &LabelMask, gt: &LabelMask, class: u8, sp: [f64; 3]) -> Option<f64> {
        let sa = surface_voxels(pred, class);
        let sb = surface_voxels(gt, class);
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let dist = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
            let dx = (a[0] as f64 - b[0] as f64) * sp[0];
            let dy = (a[1] as f64 - b[1] as f64) * sp[1];
            let dz = (a[2] as f64 - b[2] as f64) * sp[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        };
        let mut total = 0.0;
        for a in &sa {
            total += sb.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min);
        }
        for b in &sb {
            total += sa.iter().map(|a| dist(a, b)).fold(f64::INFINITY, f64::min);
        }
        Some(total / (sa.len() + sb.len()) as f64)
    }

    #[test]
    fn assd_matches_pairwise_oracle_on_random_masks() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(12, &[0x41]);
        for trial in 0..50 {
            let dims = (4usize, 5usize, 3usize);
            let n = dims.0 * dims.1 * dims.2;
            let pred = mask_from(
                (0..n).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect(),
                dims,
            );
            let gt = mask_from(
                (0..n).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect(),
                dims,
            );
            let sp = [0.5 + rng.random::<f64>(), 1.0, 2.0 * rng.random::<f64>() + 0.1];
            let got = assd(&pred, &gt, 1, sp).unwrap();
            let want = assd_oracle(&pred, &gt, 1, sp);
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => {
                    assert!((g - w).abs() < 1e-12, "trial {trial}: {g} vs {w}")
                }
                other => panic!("trial {trial}: mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn assd_spacing_linearity_power_of_two() {
        let pred = mask_from(vec![1, 0, 0, 0, 1, 0, 0, 1], (2, 2, 2));
        let gt = mask_from(vec![0, 1, 0, 1, 0, 0, 1, 0], (2, 2, 2));
        let base = assd(&pred, &gt, 1, [1.0, 0.5, 2.0]).unwrap().unwrap();
        let scaled = assd(&pred, &gt, 1, [2.0, 1.0, 4.0]).unwrap().unwrap();
        assert_eq!(scaled, 2.0 * base);
    }

    #[test]
    fn dsc_voe_jaccard_identity() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(13, &[0x42]);
        for _ in 0..200 {
            let dims = (4usize, 4usize, 4usize);
            let n = 64;
            let pred = mask_from(
                (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect(),
                dims,
            );
            let gt = mask_from(
                (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect(),
                dims,
            );
            let d = dsc(&pred, &gt, 1).unwrap();
            let v = voe(&pred, &gt, 1).unwrap();
            let want = 100.0 * (1.0 - d / (2.0 - d));
            assert!((v - want).abs() < 1e-12);
        }
    }
}
