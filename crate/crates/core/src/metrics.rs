//! Segmentation quality metrics and sliding-window inference.
//!
//! Conventions (pinned, and mirrored by the independent oracles in the
//! acceptance suite):
//! - Overlap (Dice, Jaccard): both masks empty scores 1.0; exactly one
//!   empty scores 0.0.
//! - Surfaces use 6-connectivity; a foreground voxel on the volume border
//!   counts as surface (its out-of-bounds neighbour is background).
//! - Distances are Euclidean between voxel centres, weighted by physical
//!   spacing.
//! - The average surface distance is the mean of the pooled symmetric
//!   distances; the 95th-percentile Hausdorff distance is the linearly
//!   interpolated 95th percentile of the same pool.
//! - When exactly one mask is empty the surface metrics degrade to the
//!   physical diagonal of the volume (the largest possible distance);
//!   when both are empty they are 0.

use alloc::vec::Vec;

use crate::err::{CoreError, CoreResult};
use crate::tensor::{Dims3, Scalar, Tensor};
use crate::volume::{LabelMask, Volume};

/// Per-class segmentation scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: f64,
    pub hd95: f64,
}

/// Dice overlap of two binary masks.
pub fn dice_binary(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut inter = 0usize;
    let mut pa = 0usize;
    let mut ta = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        inter += usize::from(p && t);
        pa += usize::from(p);
        ta += usize::from(t);
    }
    if pa + ta == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (pa + ta) as f64
}

/// Jaccard overlap (intersection over union) of two binary masks.
pub fn jaccard_binary(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Linear indices of the 6-connectivity surface of a mask: foreground
/// voxels with at least one face neighbour that is background or outside
/// the volume.
pub fn surface_voxels(mask: &[bool], dims: Dims3) -> Vec<usize> {
    assert_eq!(mask.len(), dims.count());
    let (d0, d1, d2) = (dims.0 as isize, dims.1 as isize, dims.2 as isize);
    let mut out = Vec::new();
    let mut i = 0usize;
    for z in 0..d0 {
        for y in 0..d1 {
            for x in 0..d2 {
                if mask[i] {
                    let mut boundary = false;
                    for (dz, dy, dx) in
                        [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    {
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        if nz < 0 || nz >= d0 || ny < 0 || ny >= d1 || nx < 0 || nx >= d2 {
                            boundary = true;
                            break;
                        }
                        let ni = ((nz * d1 + ny) * d2 + nx) as usize;
                        if !mask[ni] {
                            boundary = true;
                            break;
                        }
                    }
                    if boundary {
                        out.push(i);
                    }
                }
                i += 1;
            }
        }
    }
    out
}

fn coords(i: usize, dims: Dims3) -> [usize; 3] {
    let x = i % dims.2;
    let y = (i / dims.2) % dims.1;
    let z = i / (dims.2 * dims.1);
    [z, y, x]
}

/// For each voxel index in `from`, the minimum spacing-weighted Euclidean
/// distance to any voxel index in `to`.
pub fn min_distances(from: &[usize], to: &[usize], dims: Dims3, spacing: [f64; 3]) -> Vec<f64> {
    let to_pts: Vec<[f64; 3]> = to
        .iter()
        .map(|&i| {
            let c = coords(i, dims);
            [c[0] as f64 * spacing[0], c[1] as f64 * spacing[1], c[2] as f64 * spacing[2]]
        })
        .collect();
    from.iter()
        .map(|&i| {
            let c = coords(i, dims);
            let p = [c[0] as f64 * spacing[0], c[1] as f64 * spacing[1], c[2] as f64 * spacing[2]];
            let mut best = f64::INFINITY;
            for q in &to_pts {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Linearly interpolated percentile of unsorted data, `q` in [0, 1].
fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let w = rank - lo as f64;
    values[lo] + w * (values[hi] - values[lo])
}

fn physical_diagonal(dims: Dims3, spacing: [f64; 3]) -> f64 {
    let d = dims.to_array();
    let mut s = 0.0;
    for a in 0..3 {
        s += ((d[a].saturating_sub(1)) as f64 * spacing[a]).powi(2);
    }
    s.sqrt()
}

/// Average surface distance and 95th-percentile Hausdorff distance
/// following the conventions documented at module level.
pub fn surface_metrics(
    pred: &[bool],
    truth: &[bool],
    dims: Dims3,
    spacing: [f64; 3],
) -> (f64, f64) {
    let pe = pred.iter().all(|&b| !b);
    let te = truth.iter().all(|&b| !b);
    if pe && te {
        return (0.0, 0.0);
    }
    if pe || te {
        let d = physical_diagonal(dims, spacing);
        return (d, d);
    }
    let sp = surface_voxels(pred, dims);
    let st = surface_voxels(truth, dims);
    let mut pooled = min_distances(&sp, &st, dims, spacing);
    pooled.extend(min_distances(&st, &sp, dims, spacing));
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let hd = percentile(&mut pooled, 0.95);
    (asd, hd)
}

/// All four metrics for one binary mask pair.
pub fn evaluate_binary(
    pred: &[bool],
    truth: &[bool],
    dims: Dims3,
    spacing: [f64; 3],
) -> SegmentationMetrics {
    let (asd, hd95) = surface_metrics(pred, truth, dims, spacing);
    SegmentationMetrics {
        dice: dice_binary(pred, truth),
        jaccard: jaccard_binary(pred, truth),
        asd,
        hd95,
    }
}

/// Per-foreground-class metrics (classes `1..num_classes`).
pub fn evaluate_case(
    pred_classes: &[u8],
    truth: &LabelMask,
    spacing: [f64; 3],
) -> CoreResult<Vec<SegmentationMetrics>> {
    if pred_classes.len() != truth.dims().count() {
        return Err(CoreError::Data("prediction/mask size mismatch".into()));
    }
    let dims = truth.dims();
    Ok((1..truth.num_classes() as u8)
        .map(|c| {
            let p: Vec<bool> = pred_classes.iter().map(|&v| v == c).collect();
            let t = truth.class_mask(c);
            evaluate_binary(&p, &t, dims, spacing)
        })
        .collect())
}

/// Hard class decisions from `[C, d0, d1, d2]` probabilities; the lowest
/// class index wins ties.
pub fn argmax_classes<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let s = probs.shape();
    assert_eq!(s.len(), 4, "expected [C, z, y, x]");
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let d = probs.data();
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut bv = d[i];
            for k in 1..c {
                let v = d[k * n + i];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Full-volume prediction by tiling overlapping windows and averaging
/// their class probabilities. The model closure maps a `[1, wz, wy, wx]`
/// input to `[C, wz, wy, wx]` probabilities. Window origins advance by
/// `stride` and the last origin per axis is clamped so the volume is
/// fully covered.
pub fn sliding_window_predict<T: Scalar, F>(
    volume: &Volume,
    num_classes: usize,
    window: [usize; 3],
    stride: [usize; 3],
    mut predict: F,
) -> CoreResult<Tensor<T>>
where
    F: FnMut(&Tensor<T>) -> CoreResult<Tensor<T>>,
{
    let dims = volume.dims();
    let d = dims.to_array();
    for a in 0..3 {
        if window[a] == 0 || window[a] > d[a] {
            return Err(CoreError::Config(format!(
                "window {window:?} does not fit volume dims {d:?}"
            )));
        }
        if stride[a] == 0 {
            return Err(CoreError::Config("stride must be positive".into()));
        }
    }
    let origins = |a: usize| -> Vec<usize> {
        let mut o = Vec::new();
        let last = d[a] - window[a];
        let mut p = 0;
        loop {
            o.push(p.min(last));
            if p >= last {
                break;
            }
            p += stride[a];
        }
        o.dedup();
        o
    };
    let (oz, oy, ox) = (origins(0), origins(1), origins(2));
    let n = dims.count();
    let mut sums = alloc::vec![0.0f64; num_classes * n];
    let mut counts = alloc::vec![0u32; n];
    let wn = window[0] * window[1] * window[2];
    for &z0 in &oz {
        for &y0 in &oy {
            for &x0 in &ox {
                let mut patch = Vec::with_capacity(wn);
                for z in 0..window[0] {
                    for y in 0..window[1] {
                        for x in 0..window[2] {
                            patch.push(T::from_f64c(volume.voxel(z0 + z, y0 + y, x0 + x) as f64));
                        }
                    }
                }
                let input = Tensor::from_vec(&[1, window[0], window[1], window[2]], patch)?;
                let probs = predict(&input)?;
                if probs.shape() != [num_classes, window[0], window[1], window[2]] {
                    return Err(CoreError::Data(format!(
                        "model returned shape {:?}",
                        probs.shape()
                    )));
                }
                let pd = probs.data();
                let mut wi = 0usize;
                for z in 0..window[0] {
                    for y in 0..window[1] {
                        for x in 0..window[2] {
                            let gi = dims.offset(z0 + z, y0 + y, x0 + x);
                            for c in 0..num_classes {
                                sums[c * n + gi] += pd[c * wn + wi].to_f64c();
                            }
                            counts[gi] += 1;
                            wi += 1;
                        }
                    }
                }
            }
        }
    }
    debug_assert!(counts.iter().all(|&c| c > 0));
    let mut out = alloc::vec![T::zero(); num_classes * n];
    for c in 0..num_classes {
        for i in 0..n {
            out[c * n + i] = T::from_f64c(sums[c * n + i] / counts[i] as f64);
        }
    }
    Tensor::from_vec(&[num_classes, d[0], d[1], d[2]], out)
}

use alloc::format;
