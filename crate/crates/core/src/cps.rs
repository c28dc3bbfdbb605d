//! Contrastive supervision of uncertain voxel representations.
//!
//! Voxels whose class probability is uncertain become *anchors*; confidently
//! different voxels become *negatives*; a per-class *positive centre* blends
//! the batch-mean representation of the class with the projected mean of its
//! prototypes. An InfoNCE loss over cosine similarities pulls anchors toward
//! their centre and away from negatives. The centre is a constant inside the
//! loss: anchors move toward centres, never the other way around.
//!
//! Representations come from a dedicated projection head on the
//! full-resolution features: a 3x3x3 convolution followed by a pointwise
//! one. Prototypes live in the bottleneck width and cross into the
//! projection width through a linear bridge.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::err::{CoreError, CoreResult};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Contrastive-supervision hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CpsConfig {
    pub num_classes: usize,
    /// Channels of the full-resolution feature tap.
    pub feat_in: usize,
    /// Channels of the projected representation field.
    pub feat_proj: usize,
    /// Width of the prototype vectors (bridged into `feat_proj`).
    pub proto_dim: usize,
    /// Anchor uncertainty threshold.
    pub tau: f64,
    /// Weak confidence threshold for pseudo-label gating; must be < `tau`.
    pub tau_w: f64,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Prototype blend weight in the positive centre.
    pub xi: f64,
    /// Draw `xi` uniformly from (0, 1] each step instead of the fixed value.
    pub stochastic_xi: bool,
    pub max_anchors: usize,
    pub max_negatives: usize,
}

impl Default for CpsConfig {
    fn default() -> Self {
        CpsConfig {
            num_classes: 2,
            feat_in: 8,
            feat_proj: 8,
            proto_dim: 32,
            tau: 0.9,
            tau_w: 0.7,
            temperature: 0.5,
            xi: 0.6,
            stochastic_xi: false,
            max_anchors: 256,
            max_negatives: 512,
        }
    }
}

impl CpsConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.num_classes < 2 {
            return Err(CoreError::Config(format!("num_classes {}", self.num_classes)));
        }
        if self.feat_in == 0 || self.feat_proj == 0 || self.proto_dim == 0 {
            return Err(CoreError::Config("feature widths must be positive".into()));
        }
        if !(self.tau_w < self.tau) {
            return Err(CoreError::Config(format!(
                "tau_w {} must be below tau {}",
                self.tau_w, self.tau
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(CoreError::Config(format!("temperature {}", self.temperature)));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(CoreError::Config(format!("xi {} outside (0, 1]", self.xi)));
        }
        if self.max_anchors == 0 || self.max_negatives == 0 {
            return Err(CoreError::Config("sample caps must be positive".into()));
        }
        Ok(())
    }
}

// ---- voxel predicates -------------------------------------------------
//
// Probability fields are `[C, ...]` tensors; `labels` are voxel class ids.
// All predicates return sorted voxel indices.

fn max_and_argmax<T: Scalar>(data: &[T], c: usize, n: usize, i: usize) -> (T, usize) {
    let mut best = data[i];
    let mut arg = 0usize;
    for ch in 1..c {
        let v = data[ch * n + i];
        if v > best {
            best = v;
            arg = ch;
        }
    }
    (best, arg)
}

/// Labelled anchors for class `c`: ground truth says `c` but the student
/// is not yet confident about it.
pub fn anchor_indices_labelled<T: Scalar>(
    labels: &[u8],
    student: &Tensor<T>,
    class: usize,
    tau: f64,
) -> Vec<usize> {
    let s = student.shape();
    let n: usize = s[1..].iter().product();
    assert_eq!(labels.len(), n, "label count");
    let t = T::from_f64c(tau);
    let d = student.data();
    (0..n)
        .filter(|&i| labels[i] as usize == class && d[class * n + i] < t)
        .collect()
}

/// Unlabelled anchors for class `c`: the student is uncertain while the
/// rectified teacher confidently says `c`.
pub fn anchor_indices_unlabelled<T: Scalar>(
    student: &Tensor<T>,
    rectified: &Tensor<T>,
    class: usize,
    tau: f64,
    tau_w: f64,
) -> Vec<usize> {
    assert_eq!(student.shape(), rectified.shape(), "field shapes");
    let s = student.shape();
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let t = T::from_f64c(tau);
    let tw = T::from_f64c(tau_w);
    let sd = student.data();
    let rd = rectified.data();
    (0..n)
        .filter(|&i| {
            if sd[class * n + i] >= t {
                return false;
            }
            let (m, arg) = max_and_argmax(rd, c, n, i);
            m > tw && arg == class
        })
        .collect()
}

/// Labelled negatives for class `c`: every voxel of a different class.
pub fn negative_indices_labelled(labels: &[u8], class: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] as usize != class).collect()
}

/// Unlabelled negatives for class `c`: the rectified teacher is confident
/// about some other class.
pub fn negative_indices_unlabelled<T: Scalar>(
    rectified: &Tensor<T>,
    class: usize,
    tau_w: f64,
) -> Vec<usize> {
    let s = rectified.shape();
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let tw = T::from_f64c(tau_w);
    let rd = rectified.data();
    (0..n)
        .filter(|&i| {
            let (m, arg) = max_and_argmax(rd, c, n, i);
            m > tw && arg != class
        })
        .collect()
}

/// Confident support of class `c` on unlabelled data (used for the batch
/// mean representation): the rectified teacher confidently says `c`.
pub fn support_indices_unlabelled<T: Scalar>(
    rectified: &Tensor<T>,
    class: usize,
    tau_w: f64,
) -> Vec<usize> {
    let s = rectified.shape();
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let tw = T::from_f64c(tau_w);
    let rd = rectified.data();
    (0..n)
        .filter(|&i| {
            let (m, arg) = max_and_argmax(rd, c, n, i);
            m > tw && arg == class
        })
        .collect()
}

/// Keeps a uniform sample of at most `k` entries, without replacement,
/// preserving determinism through the caller's stream. Order follows the
/// partial Fisher–Yates shuffle.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, mut idx: Vec<usize>, k: usize) -> Vec<usize> {
    if idx.len() <= k {
        return idx;
    }
    for i in 0..k {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Running mean of representation rows, accumulated across crops.
#[derive(Debug, Clone)]
pub struct MeanAccumulator {
    sum: Vec<f64>,
    count: usize,
}

impl MeanAccumulator {
    pub fn new(dim: usize) -> Self {
        MeanAccumulator { sum: alloc::vec![0.0; dim], count: 0 }
    }

    /// Adds the rows of `field` (`[F', ...]`) selected by voxel indices.
    pub fn add_rows<T: Scalar>(&mut self, field: &Tensor<T>, indices: &[usize]) {
        let s = field.shape();
        let f = s[0];
        assert_eq!(f, self.sum.len(), "feature width");
        let n: usize = s[1..].iter().product();
        let d = field.data();
        for &i in indices {
            for ch in 0..f {
                self.sum[ch] += d[ch * n + i].to_f64c();
            }
        }
        self.count += indices.len();
    }

    /// Adds selected rows of a row-major `[N, F']` matrix.
    pub fn add_row_major<T: Scalar>(&mut self, rows: &Tensor<T>, indices: &[usize]) {
        let s = rows.shape();
        assert_eq!(s.len(), 2, "expected [N, F] rows");
        let f = s[1];
        assert_eq!(f, self.sum.len(), "feature width");
        let d = rows.data();
        for &i in indices {
            for ch in 0..f {
                self.sum[ch] += d[i * f + ch].to_f64c();
            }
        }
        self.count += indices.len();
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<Vec<f64>> {
        if self.count == 0 {
            return None;
        }
        Some(self.sum.iter().map(|&s| s / self.count as f64).collect())
    }
}

/// Blend of the batch mean representation and the projected prototype
/// mean: `(r_m + xi * p) / (1 + xi)`.
pub fn positive_centre(r_m: &[f64], proto: &[f64], xi: f64) -> Vec<f64> {
    assert_eq!(r_m.len(), proto.len(), "centre dims");
    let inv = 1.0 / (1.0 + xi);
    r_m.iter().zip(proto).map(|(&r, &p)| (r + xi * p) * inv).collect()
}

/// Projection head and prototype bridge.
#[derive(Debug, Clone)]
pub struct Cps {
    cfg: CpsConfig,
    conv_w: ParamId,
    conv_b: ParamId,
    point_w: ParamId,
    point_b: ParamId,
    bridge_w: ParamId,
    bridge_b: ParamId,
}

impl Cps {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: CpsConfig,
    ) -> CoreResult<Cps> {
        cfg.validate()?;
        let n = |s: &str| -> String { format!("{prefix}.{s}") };
        Ok(Cps {
            conv_w: store.add_conv(rng, n("proj.conv.w"), &[cfg.feat_proj, cfg.feat_in, 3, 3, 3]),
            conv_b: store.add_zeros(n("proj.conv.b"), &[cfg.feat_proj]),
            point_w: store.add_conv(rng, n("proj.point.w"), &[cfg.feat_proj, cfg.feat_proj]),
            point_b: store.add_zeros(n("proj.point.b"), &[cfg.feat_proj]),
            bridge_w: store.add_conv(rng, n("bridge.w"), &[cfg.feat_proj, cfg.proto_dim]),
            bridge_b: store.add_zeros(n("bridge.b"), &[cfg.feat_proj]),
            cfg,
        })
    }

    pub fn config(&self) -> &CpsConfig {
        &self.cfg
    }

    /// Representation field `[F', z, y, x]` from full-resolution features.
    pub fn project_field<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], f4: Var) -> Var {
        assert_eq!(tape.value(f4).shape()[0], self.cfg.feat_in, "feature channels");
        let c = tape.conv3d(f4, vars[self.conv_w.0], vars[self.conv_b.0], 1);
        tape.pointwise_conv(c, vars[self.point_w.0], vars[self.point_b.0])
    }

    /// Mean prototype of one class pushed through the linear bridge,
    /// computed on plain values (the centre carries no gradient).
    pub fn bridged_prototype_mean<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        bank: &Tensor<T>,
        prototypes_per_class: usize,
        class: usize,
    ) -> Vec<f64> {
        let f = self.cfg.proto_dim;
        assert_eq!(bank.shape()[1], f, "prototype width");
        let rows = bank.data();
        let mut mean = alloc::vec![0.0f64; f];
        for r in 0..prototypes_per_class {
            let row = (class * prototypes_per_class + r) * f;
            for j in 0..f {
                mean[j] += rows[row + j].to_f64c();
            }
        }
        for m in mean.iter_mut() {
            *m /= prototypes_per_class as f64;
        }
        let w = store.value(self.bridge_w).data();
        let b = store.value(self.bridge_b).data();
        (0..self.cfg.feat_proj)
            .map(|o| {
                let mut s = b[o].to_f64c();
                for (j, &mj) in mean.iter().enumerate() {
                    s += w[o * f + j].to_f64c() * mj;
                }
                s
            })
            .collect()
    }

    /// InfoNCE over cosine similarities for one class:
    /// `sum_i -log( e^{cos(a_i, p)/t} / (e^{cos(a_i, p)/t} + sum_k e^{cos(a_i, n_k)/t}) )`.
    ///
    /// `anchors [A, F']` and `negatives [K, F']` participate in gradients;
    /// `centre` must be a constant row `[1, F']`. A and K must be >= 1 —
    /// empty classes are skipped by the caller (their contribution is zero).
    pub fn cps_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        anchors: Var,
        centre: Var,
        negatives: Var,
    ) -> Var {
        let a = tape.value(anchors).shape()[0];
        let k = tape.value(negatives).shape()[0];
        assert!(a >= 1 && k >= 1, "need at least one anchor and one negative");
        assert_eq!(tape.value(centre).shape()[0], 1, "centre is a single row");
        assert!(!tape.needs_grad(centre), "centre must be detached");
        let inv_t = T::from_f64c(1.0 / self.cfg.temperature);
        let cos_pos = tape.cosine_rows(anchors, centre); // [A, 1]
        let cos_neg = tape.cosine_rows(anchors, negatives); // [A, K]
        let all = tape.concat_cols(cos_pos, cos_neg); // [A, 1+K]
        let scaled = tape.scale(all, inv_t);
        let lse = tape.logsumexp_rows(scaled); // [A]
        let pos_scaled = tape.scale(cos_pos, inv_t); // [A, 1]
        let pos_flat = tape.reshape(pos_scaled, &[a]);
        let per_anchor = tape.sub(lse, pos_flat);
        tape.sum_all(per_anchor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::{init_rng, stream_rng};
    use rand::Rng;

    fn prob_field(c: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = init_rng(seed);
        let mut data = alloc::vec![0.0f64; c * n];
        for i in 0..n {
            let mut z = 0.0;
            for ch in 0..c {
                let e = rng.gen_range(0.0f64..3.0).exp();
                data[ch * n + i] = e;
                z += e;
            }
            for ch in 0..c {
                data[ch * n + i] /= z;
            }
        }
        Tensor::from_vec(&[c, 2, 2, n / 4], data).unwrap()
    }

    #[test]
    fn config_guards() {
        let mut c = CpsConfig::default();
        assert!(c.validate().is_ok());
        c.tau_w = 0.95;
        assert!(c.validate().is_err(), "tau_w above tau must fail");
        c.tau_w = 0.7;
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c.temperature = 0.5;
        c.xi = 0.0;
        assert!(c.validate().is_err());
        c.xi = 1.0;
        assert!(c.validate().is_ok());
    }

    /// Exhaustive re-evaluation of every predicate on random small fields.
    #[test]
    fn predicates_match_brute_force() {
        let mut rng = init_rng(40);
        for trial in 0..200 {
            let c = 2 + (trial % 2);
            let n = 8;
            let student = prob_field(c, n, 100 + trial as u64);
            let rect = prob_field(c, n, 300 + trial as u64);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c as u8)).collect();
            let (tau, tau_w) = (0.9, 0.7);
            for class in 0..c {
                let sd = student.data();
                let rd = rect.data();
                let mut al = Vec::new();
                let mut au = Vec::new();
                let mut nl = Vec::new();
                let mut nu = Vec::new();
                for i in 0..n {
                    // independent literal predicate evaluation
                    let mut rmax = f64::NEG_INFINITY;
                    let mut rarg = 0;
                    for ch in 0..c {
                        if rd[ch * n + i] > rmax {
                            rmax = rd[ch * n + i];
                            rarg = ch;
                        }
                    }
                    if labels[i] as usize == class && sd[class * n + i] < tau {
                        al.push(i);
                    }
                    if sd[class * n + i] < tau && rmax > tau_w && rarg == class {
                        au.push(i);
                    }
                    if labels[i] as usize != class {
                        nl.push(i);
                    }
                    if rmax > tau_w && rarg != class {
                        nu.push(i);
                    }
                }
                let mut su = Vec::new();
                for i in 0..n {
                    let mut rmax = f64::NEG_INFINITY;
                    let mut rarg = 0;
                    for ch in 0..c {
                        if rd[ch * n + i] > rmax {
                            rmax = rd[ch * n + i];
                            rarg = ch;
                        }
                    }
                    if rmax > tau_w && rarg == class {
                        su.push(i);
                    }
                }
                assert_eq!(anchor_indices_labelled(&labels, &student, class, tau), al);
                assert_eq!(
                    anchor_indices_unlabelled(&student, &rect, class, tau, tau_w),
                    au
                );
                assert_eq!(negative_indices_labelled(&labels, class), nl);
                assert_eq!(negative_indices_unlabelled(&rect, class, tau_w), nu);
                assert_eq!(support_indices_unlabelled(&rect, class, tau_w), su);
            }
        }
    }

    #[test]
    fn fully_confident_student_yields_no_anchors() {
        let n = 8;
        let mut data = alloc::vec![0.0f64; 2 * n];
        for i in 0..n {
            data[i] = 1.0;
        }
        let student = Tensor::from_vec(&[2, 2, 2, 2], data).unwrap();
        let labels = alloc::vec![0u8; n];
        assert!(anchor_indices_labelled(&labels, &student, 0, 0.9).is_empty());
    }

    #[test]
    fn sampling_without_replacement_is_capped_and_unique() {
        let mut rng = stream_rng(7, 3);
        let idx: Vec<usize> = (0..100).collect();
        let s = sample_without_replacement(&mut rng, idx.clone(), 16);
        assert_eq!(s.len(), 16);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16, "duplicates drawn");
        assert!(sorted.iter().all(|&i| i < 100));
        let small = sample_without_replacement(&mut rng, alloc::vec![4, 7], 16);
        assert_eq!(small, alloc::vec![4, 7]);
        let mut rng2 = stream_rng(7, 3);
        assert_eq!(sample_without_replacement(&mut rng2, idx, 16), s, "determinism");
    }

    #[test]
    fn positive_centre_hand_cases() {
        let c = positive_centre(&[1.0, 0.0], &[0.0, 1.0], 0.6);
        assert!((c[0] - 0.625).abs() < 1e-12);
        assert!((c[1] - 0.375).abs() < 1e-12);
        let tiny = positive_centre(&[1.0, 0.0], &[0.0, 1.0], 1e-12);
        assert!((tiny[0] - 1.0).abs() < 1e-9 && tiny[1].abs() < 1e-9);
        let fixed = positive_centre(&[0.3, -0.4], &[0.3, -0.4], 0.77);
        assert!((fixed[0] - 0.3).abs() < 1e-12 && (fixed[1] + 0.4).abs() < 1e-12);
    }

    fn build_cps(seed: u64) -> (ParamStore<f64>, Cps) {
        let mut store = ParamStore::new();
        let mut rng = init_rng(seed);
        let cfg = CpsConfig {
            feat_in: 2,
            feat_proj: 2,
            proto_dim: 3,
            ..CpsConfig::default()
        };
        let cps = Cps::new(&mut store, &mut rng, "cps", cfg).unwrap();
        (store, cps)
    }

    #[test]
    fn loss_spot_values() {
        let (_, cps) = build_cps(1);
        let mut tape = Tape::new();
        // cos(anchor, centre) = 1, cos(anchor, negative) = 0, t = 0.5
        let a = tape.leaf(Tensor::from_vec(&[1, 2], alloc::vec![1.0, 0.0]).unwrap());
        let p = tape.constant(Tensor::from_vec(&[1, 2], alloc::vec![1.0, 0.0]).unwrap());
        let n = tape.constant(Tensor::from_vec(&[1, 2], alloc::vec![0.0, 1.0]).unwrap());
        let l = cps.cps_loss(&mut tape, a, p, n);
        let expect = (1.0 + (-2.0f64).exp()).ln(); // -log(e^2/(e^2+1))
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        assert!((expect - 0.12693).abs() < 1e-5);

        let mut tape = Tape::new();
        // anchor orthogonal to centre, identical to the single negative
        let a = tape.leaf(Tensor::from_vec(&[1, 2], alloc::vec![1.0, 0.0]).unwrap());
        let p = tape.constant(Tensor::from_vec(&[1, 2], alloc::vec![0.0, 1.0]).unwrap());
        let n = tape.constant(Tensor::from_vec(&[1, 2], alloc::vec![1.0, 0.0]).unwrap());
        let l = cps.cps_loss(&mut tape, a, p, n);
        let expect = (1.0 + (2.0f64).exp()).ln(); // -log(1/(1+e^2))
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        assert!((expect - 2.12693).abs() < 1e-5);
    }

    #[test]
    fn loss_matches_direct_formula_on_random_batches() {
        let mut rng = init_rng(50);
        let mut store = ParamStore::<f64>::new();
        let mut r2 = init_rng(99);
        let cfg = CpsConfig { feat_in: 2, feat_proj: 3, proto_dim: 3, ..CpsConfig::default() };
        let cps = Cps::new(&mut store, &mut r2, "c3", cfg).unwrap();
        for _ in 0..25 {
            let a_n = rng.gen_range(1..=4);
            let k_n = rng.gen_range(1..=4);
            let f = 3;
            let rand_rows = |rng: &mut ChaCha8Rng, rows: usize| -> Tensor<f64> {
                Tensor::from_vec(
                    &[rows, f],
                    (0..rows * f).map(|_| rng.gen_range(-2.0f64..2.0)).collect(),
                )
                .unwrap()
            };
            let at = rand_rows(&mut rng, a_n);
            let pt = rand_rows(&mut rng, 1);
            let nt = rand_rows(&mut rng, k_n);

            let mut tape = Tape::new();
            let a = tape.leaf(at.clone());
            let p = tape.constant(pt.clone());
            let ng = tape.constant(nt.clone());
            let loss = cps.cps_loss(&mut tape, a, p, ng);
            let got = tape.value(loss).item();

            // independent direct evaluation
            let cos = |x: &[f64], y: &[f64]| -> f64 {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                dot / (nx * ny)
            };
            let t = 0.5;
            let mut expect = 0.0;
            for i in 0..a_n {
                let ar = &at.data()[i * f..(i + 1) * f];
                let cp = (cos(ar, pt.data()) / t).exp();
                let mut den = cp;
                for k in 0..k_n {
                    den += (cos(ar, &nt.data()[k * f..(k + 1) * f]) / t).exp();
                }
                expect += -(cp / den).ln();
            }
            assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
            assert!(got >= 0.0, "InfoNCE must be nonnegative");
        }
    }

    #[test]
    fn anchor_and_negative_gradients_match_finite_differences() {
        let mut rng = init_rng(60);
        let f = 3;
        let at = Tensor::from_vec(&[3, f], (0..9).map(|_| rng.gen_range(-1.0f64..1.0)).collect())
            .unwrap();
        let nt = Tensor::from_vec(&[2, f], (0..6).map(|_| rng.gen_range(-1.0f64..1.0)).collect())
            .unwrap();
        let pt = Tensor::from_vec(&[1, f], (0..3).map(|_| rng.gen_range(-1.0f64..1.0)).collect())
            .unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut r2 = init_rng(99);
        let cfg = CpsConfig { feat_in: 2, feat_proj: 3, proto_dim: 3, ..CpsConfig::default() };
        let c3 = Cps::new(&mut store, &mut r2, "c3", cfg).unwrap();
        let report = check_gradients(
            |tape, inputs| {
                let p = tape.constant(pt.clone());
                c3.cps_loss(tape, inputs[0], p, inputs[1])
            },
            &[at, nt],
            1e-6,
            1e-12,
        );
        assert!(report.within(1e-4), "{report:?}");
    }

    #[test]
    fn projection_field_shape_and_gradient() {
        let (store, cps) = build_cps(4);
        let mut rng = init_rng(70);
        let f4 = Tensor::from_vec(
            &[2, 4, 4, 4],
            (0..128).map(|_| rng.gen_range(-1.0f64..1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let vars = store.register_frozen(&mut tape);
        let x = tape.constant(f4.clone());
        let r = cps.project_field(&mut tape, &vars, x);
        assert_eq!(tape.value(r).shape(), &[2, 4, 4, 4]);

        let weight = Tensor::from_vec(
            &[2, 4, 4, 4],
            (0..128).map(|_| rng.gen_range(-1.0f64..1.0)).collect(),
        )
        .unwrap();
        let report = check_gradients(
            |tape, inputs| {
                let vars = store.register_frozen(tape);
                let r = cps.project_field(tape, &vars, inputs[0]);
                let w = tape.constant(weight.clone());
                let p = tape.mul(r, w);
                tape.mean_all(p)
            },
            &[f4],
            1e-5,
            1e-10,
        );
        assert!(report.within(1e-5), "{report:?}");
    }

    #[test]
    fn bridged_prototype_mean_matches_manual_math() {
        let (mut store, cps) = build_cps(5);
        // bank [C*R, F] with C=2, R=2, F=3
        let bank = Tensor::from_vec(
            &[4, 3],
            alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 2.0, 2.0, 4.0, 0.0, -2.0],
        )
        .unwrap();
        // identity-ish bridge: w [2, 3]
        let w = Tensor::from_vec(&[2, 3], alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        *store.value_mut(cps.bridge_w) = w;
        *store.value_mut(cps.bridge_b) = Tensor::zeros(&[2]);
        let m1 = cps.bridged_prototype_mean(&store, &bank, 2, 1);
        // class 1 rows: (2,2,2) and (4,0,-2) → mean (3,1,0) → bridge → (3,1)
        assert!((m1[0] - 3.0).abs() < 1e-12);
        assert!((m1[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_accumulator_pools_across_crops() {
        let mut acc = MeanAccumulator::new(2);
        assert!(acc.mean().is_none());
        let field =
            Tensor::from_vec(&[2, 1, 1, 4], alloc::vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0])
                .unwrap();
        acc.add_rows(&field, &[0, 2]);
        let field2 =
            Tensor::from_vec(&[2, 1, 1, 2], alloc::vec![5.0, 7.0, 50.0, 70.0]).unwrap();
        acc.add_rows(&field2, &[1]);
        let m = acc.mean().unwrap();
        assert_eq!(acc.count(), 3);
        assert!((m[0] - (1.0 + 3.0 + 7.0) / 3.0).abs() < 1e-12);
        assert!((m[1] - (10.0 + 30.0 + 70.0) / 3.0).abs() < 1e-12);
    }
}
