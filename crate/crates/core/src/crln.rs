//! Pseudo-label rectification with a learnable correction coefficient.
//!
//! After a warm-up stage, teacher probabilities on unlabelled data are
//! corrected with the prototype relationship map, supplied as a per-voxel
//! class-probability field: evidence `s = pred + (1 - mu) * (map - 1/C)`
//! is clamped to a small floor and renormalised per voxel. Centring the
//! map on the uniform distribution pins its per-voxel level (softmax
//! training only constrains differences between class scores), so an
//! uncertain map leaves calibrated predictions untouched, an agreeing map
//! sharpens them, and only a confidently disagreeing map can flip a
//! voxel. The strength coefficient `mu = sigmoid(raw)` is the only
//! parameter trained by the dedicated rectification loss, on labelled
//! data, in a step of its own.
//!
//! Two alternative rectification rules are kept for ablations: a fixed
//! replacement rule (low-confidence voxels take the map's distribution
//! when it is more confident) and a learned fusion (channel-concatenate
//! prediction and map, 3x3x3 convolution back to `C` channels, softmax).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::err::{CoreError, CoreResult};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Probability floor applied before renormalisation.
pub const RECTIFY_EPS: f64 = 1e-6;

/// When rectification switches on: strictly after `rectify_after`
/// completed training iterations (iterations are counted from 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSchedule {
    pub rectify_after: u64,
}

impl StageSchedule {
    pub fn new(rectify_after: u64) -> Self {
        StageSchedule { rectify_after }
    }

    /// Whether pseudo-labels are rectified at this iteration.
    pub fn active(&self, iteration: u64) -> bool {
        iteration > self.rectify_after
    }
}

/// Rectification rule. All three take the relationship map as a
/// per-voxel class-probability field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectifyVariant {
    /// Fixed rule: replace low-confidence voxels by the map where the map
    /// is more confident.
    Replace,
    /// Learned fusion: concat + 3x3x3 convolution + softmax.
    Concat,
    /// Uniform-centred additive correction scaled by `1 - mu` (the
    /// default).
    Additive,
}

/// Additive correction of a prediction by a probability map: clamp
/// `pred + (1 - mu) * (map - 1/C)` to [`RECTIFY_EPS`], then renormalise
/// each voxel's class column. The map is centred on the uniform
/// distribution, so a uniform map column is an exact identity (as is
/// `mu == 1`).
pub fn rectify_scores<T: Scalar>(
    pred: &Tensor<T>,
    map: &Tensor<T>,
    mu: T,
) -> CoreResult<Tensor<T>> {
    if pred.shape() != map.shape() {
        return Err(CoreError::Data(format!(
            "rectify shapes {:?} vs {:?}",
            pred.shape(),
            map.shape()
        )));
    }
    let om = T::one() - mu;
    if om == T::zero() {
        return Ok(pred.clone());
    }
    let s = pred.shape();
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let eps = T::from_f64c(RECTIFY_EPS);
    let invc = T::one() / T::from_f64c(c as f64);
    let pd = pred.data();
    let md = map.data();
    let mut out = alloc::vec![T::zero(); c * n];
    for i in 0..n {
        let mut sum = T::zero();
        for ch in 0..c {
            let v = pd[ch * n + i] + (md[ch * n + i] + (T::zero() - invc)) * om;
            let v = if v < eps { eps } else { v };
            out[ch * n + i] = v;
            sum = sum + v;
        }
        // multiply by the reciprocal, matching the tape renormalisation
        let inv = T::one() / sum;
        for ch in 0..c {
            out[ch * n + i] = out[ch * n + i] * inv;
        }
    }
    Tensor::from_vec(s, out)
}

/// Fixed replacement rule: where the prediction's confidence is below
/// `tau` *and* below the probability map's confidence, the voxel takes
/// the map's distribution; elsewhere the prediction passes through
/// bit-exact.
pub fn rectify_replace<T: Scalar>(
    pred: &Tensor<T>,
    map: &Tensor<T>,
    tau: f64,
) -> CoreResult<Tensor<T>> {
    if pred.shape() != map.shape() {
        return Err(CoreError::Data(format!(
            "rectify shapes {:?} vs {:?}",
            pred.shape(),
            map.shape()
        )));
    }
    let s = pred.shape();
    let c = s[0];
    let n: usize = s[1..].iter().product();
    let t = T::from_f64c(tau);
    let mut out = pred.clone();
    let (pd, sd) = (pred.data(), map.data());
    for i in 0..n {
        let mut pm = pd[i];
        let mut sm = sd[i];
        for ch in 1..c {
            if pd[ch * n + i] > pm {
                pm = pd[ch * n + i];
            }
            if sd[ch * n + i] > sm {
                sm = sd[ch * n + i];
            }
        }
        if pm < t && pm < sm {
            for ch in 0..c {
                out.data_mut()[ch * n + i] = sd[ch * n + i];
            }
        }
    }
    Ok(out)
}

/// Rectification component: the correction coefficient, the variant in
/// effect, and the fusion convolution used by the concat variant (always
/// allocated so checkpoints have one layout regardless of variant).
#[derive(Debug, Clone)]
pub struct Crln {
    variant: RectifyVariant,
    num_classes: usize,
    mu_raw: ParamId,
    concat_w: ParamId,
    concat_b: ParamId,
}

impl Crln {
    /// Registers parameters under `prefix`; `mu` starts at sigmoid(0) = 0.5.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        num_classes: usize,
        variant: RectifyVariant,
    ) -> CoreResult<Crln> {
        if num_classes < 2 {
            return Err(CoreError::Config(format!("num_classes {num_classes}")));
        }
        let n = |s: &str| -> String { format!("{prefix}.{s}") };
        Ok(Crln {
            variant,
            num_classes,
            mu_raw: store.add(n("mu_raw"), Tensor::scalar(T::zero())),
            concat_w: store.add_conv(rng, n("fuse.w"), &[num_classes, 2 * num_classes, 3, 3, 3]),
            concat_b: store.add_zeros(n("fuse.b"), &[num_classes]),
        })
    }

    pub fn variant(&self) -> RectifyVariant {
        self.variant
    }

    pub fn mu_raw_id(&self) -> ParamId {
        self.mu_raw
    }

    /// Current coefficient value `sigmoid(raw)`.
    pub fn mu_value<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        let raw = store.value(self.mu_raw).item().to_f64c();
        1.0 / (1.0 + (-raw).exp())
    }

    /// Parameters the dedicated rectification-learning step trains:
    /// the coefficient for the additive rule, the fusion convolution for
    /// the concat rule, nothing for the fixed rule.
    pub fn learnable_params(&self) -> Vec<ParamId> {
        match self.variant {
            RectifyVariant::Additive => alloc::vec![self.mu_raw],
            RectifyVariant::Concat => alloc::vec![self.concat_w, self.concat_b],
            RectifyVariant::Replace => Vec::new(),
        }
    }

    /// Differentiable rectification on a tape. `vars` is the full store
    /// registration and `map` is a per-voxel class-probability field. The
    /// fixed replacement rule is non-differentiable and produced as a
    /// constant node.
    pub fn rectify_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        pred: Var,
        map: Var,
        tau: f64,
    ) -> Var {
        assert_eq!(
            tape.value(pred).shape(),
            tape.value(map).shape(),
            "rectify shapes"
        );
        assert_eq!(tape.value(pred).shape()[0], self.num_classes, "class count");
        match self.variant {
            RectifyVariant::Additive => {
                let mu = tape.sigmoid(vars[self.mu_raw.0]);
                if tape.value(mu).item() == T::one() && !tape.needs_grad(mu) {
                    return pred;
                }
                let neg = tape.neg(mu);
                let om = tape.add_const(neg, T::one()); // 1 - mu
                let invc = T::one() / T::from_f64c(self.num_classes as f64);
                let centred = tape.add_const(map, T::zero() - invc);
                let scaled = tape.scalar_mul(om, centred);
                let s = tape.add(pred, scaled);
                let c = tape.clamp_min(s, T::from_f64c(RECTIFY_EPS));
                tape.normalize_axis0(c)
            }
            RectifyVariant::Concat => {
                let cat = tape.concat_rows(&[pred, map]);
                let z = tape.conv3d(cat, vars[self.concat_w.0], vars[self.concat_b.0], 1);
                tape.softmax_axis0(z)
            }
            RectifyVariant::Replace => {
                let out = rectify_replace(tape.value(pred), tape.value(map), tau).unwrap();
                tape.constant(out)
            }
        }
    }

    /// Tensor-side rectification used on (gradient-free) teacher outputs.
    /// Agrees bit-exactly with [`Crln::rectify_tape`] on the same values.
    pub fn rectify_tensor<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pred: &Tensor<T>,
        map: &Tensor<T>,
        tau: f64,
    ) -> CoreResult<Tensor<T>> {
        if pred.shape() != map.shape() {
            return Err(CoreError::Data(format!(
                "rectify shapes {:?} vs {:?}",
                pred.shape(),
                map.shape()
            )));
        }
        match self.variant {
            RectifyVariant::Additive => {
                let raw = store.value(self.mu_raw).item();
                let mu = T::one() / (T::one() + (-raw).exp());
                rectify_scores(pred, map, mu)
            }
            RectifyVariant::Replace => rectify_replace(pred, map, tau),
            RectifyVariant::Concat => {
                let mut tape: Tape<T> = Tape::new();
                let p = tape.constant(pred.clone());
                let m = tape.constant(map.clone());
                let w = tape.constant(store.value(self.concat_w).clone());
                let b = tape.constant(store.value(self.concat_b).clone());
                let cat = tape.concat_rows(&[p, m]);
                let z = tape.conv3d(cat, w, b, 1);
                let out = tape.softmax_axis0(z);
                Ok(tape.value(out).clone())
            }
        }
    }

    /// Rectification loss: the supervised loss of the rectified labelled
    /// prediction. The caller arranges that gradients reach only the
    /// rectification parameters (prediction and map enter as constants).
    pub fn mu_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        rectified: Var,
        target_onehot: Var,
        smooth: T,
    ) -> Var {
        tape.dice_ce(rectified, target_onehot, smooth)
    }
}
