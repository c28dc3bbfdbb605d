//! Class prototypes and their interaction with the feature pyramid.
//!
//! A bank of `R` learnable prototype vectors per class (stored class-major
//! as a `[C*R, F]` matrix) is refreshed against the bottleneck features and
//! then compared against mid-level features to produce one full-resolution
//! relationship map per class:
//!
//! 1. **Refresh** — scaled dot-product cross-attention with the prototypes
//!    as queries and the flattened bottleneck features as keys and values
//!    (`scores / sqrt(F)`, row softmax), yielding updated prototypes.
//! 2. **Proximity** — the updated prototypes are projected and scored
//!    against the mid-level features (`scores / sqrt(F3)`, no softmax),
//!    giving one score field per prototype on the half-resolution grid.
//! 3. **Aggregation** — the per-prototype fields are fused to a single
//!    channel by a 3x3x3 convolution over prototype channels, ELU, and a
//!    pointwise projection (weights shared across classes), then upsampled
//!    trilinearly to full resolution. A fixed unweighted sum over
//!    prototypes replaces the learned fusion when `learned_aggregation`
//!    is off.
//!
//! Projection weights are shared across classes; only the prototypes
//! themselves are class-specific.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::err::{CoreError, CoreResult};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Prototype-interaction hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimConfig {
    pub num_classes: usize,
    /// Prototypes per class (`R`).
    pub prototypes_per_class: usize,
    /// Bottleneck feature width (`F`).
    pub feat_bottleneck: usize,
    /// Mid-level feature width (`F3`).
    pub feat_mid: usize,
    /// Learned convolutional fusion over prototype channels; plain sum
    /// when off.
    pub learned_aggregation: bool,
}

impl DimConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.num_classes < 2 {
            return Err(CoreError::Config(format!("num_classes {}", self.num_classes)));
        }
        if self.prototypes_per_class == 0 {
            return Err(CoreError::Config("prototypes_per_class must be positive".into()));
        }
        if self.feat_bottleneck == 0 || self.feat_mid == 0 {
            return Err(CoreError::Config("feature widths must be positive".into()));
        }
        Ok(())
    }
}

/// Prototype bank plus interaction/aggregation parameters.
#[derive(Debug, Clone)]
pub struct Dim {
    cfg: DimConfig,
    prototypes: ParamId,
    q1_w: ParamId,
    q1_b: ParamId,
    k1_w: ParamId,
    k1_b: ParamId,
    v1_w: ParamId,
    v1_b: ParamId,
    q2_w: ParamId,
    q2_b: ParamId,
    k2_w: ParamId,
    k2_b: ParamId,
    agg_w: ParamId,
    agg_b: ParamId,
    point_w: ParamId,
    point_b: ParamId,
}

impl Dim {
    /// Registers all parameters under `prefix`. Prototypes start from
    /// N(0, 1/sqrt(F)); projections use fan-in scaled Gaussians.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: DimConfig,
    ) -> CoreResult<Dim> {
        cfg.validate()?;
        let (c, r, f, f3) =
            (cfg.num_classes, cfg.prototypes_per_class, cfg.feat_bottleneck, cfg.feat_mid);
        let n = |s: &str| -> String { format!("{prefix}.{s}") };
        let proto_std = 1.0 / (f as f64).sqrt();
        Ok(Dim {
            cfg,
            prototypes: store.add_normal(rng, n("prototypes"), &[c * r, f], proto_std),
            q1_w: store.add_conv(rng, n("refresh.q.w"), &[f, f]),
            q1_b: store.add_zeros(n("refresh.q.b"), &[f]),
            k1_w: store.add_conv(rng, n("refresh.k.w"), &[f, f]),
            k1_b: store.add_zeros(n("refresh.k.b"), &[f]),
            v1_w: store.add_conv(rng, n("refresh.v.w"), &[f, f]),
            v1_b: store.add_zeros(n("refresh.v.b"), &[f]),
            q2_w: store.add_conv(rng, n("proximity.q.w"), &[f3, f]),
            q2_b: store.add_zeros(n("proximity.q.b"), &[f3]),
            k2_w: store.add_conv(rng, n("proximity.k.w"), &[f3, f3]),
            k2_b: store.add_zeros(n("proximity.k.b"), &[f3]),
            agg_w: store.add_conv(rng, n("agg.conv.w"), &[r, r, 3, 3, 3]),
            agg_b: store.add_zeros(n("agg.conv.b"), &[r]),
            point_w: store.add_conv(rng, n("agg.point.w"), &[1, r]),
            point_b: store.add_zeros(n("agg.point.b"), &[1]),
        })
    }

    pub fn config(&self) -> DimConfig {
        self.cfg
    }

    /// Store id of the `[C*R, F]` prototype bank.
    pub fn prototypes_id(&self) -> ParamId {
        self.prototypes
    }

    /// Rows of the bank belonging to one class.
    pub fn class_rows(&self, class: usize) -> Vec<usize> {
        let r = self.cfg.prototypes_per_class;
        (class * r..(class + 1) * r).collect()
    }

    /// Block 1: cross-attention refresh of one class's prototypes against
    /// the bottleneck features `f2` (`[F, z, y, x]`). Returns `[R, F]`.
    pub fn refresh_prototypes<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        f2: Var,
        class: usize,
    ) -> Var {
        let f = self.cfg.feat_bottleneck;
        assert_eq!(tape.value(f2).shape()[0], f, "bottleneck channel mismatch");
        let p = tape.gather_rows(vars[self.prototypes.0], &self.class_rows(class));
        let r2 = tape.transpose(f2); // [N2, F]
        let q = tape.linear(p, vars[self.q1_w.0], vars[self.q1_b.0]); // [R, F]
        let k = tape.linear(r2, vars[self.k1_w.0], vars[self.k1_b.0]); // [N2, F]
        let v = tape.linear(r2, vars[self.v1_w.0], vars[self.v1_b.0]); // [N2, F]
        let scores = tape.matmul_nt(q, k); // [R, N2]
        let scaled = tape.scale(scores, T::from_f64c(1.0 / (f as f64).sqrt()));
        let attn = tape.softmax_rows(scaled);
        tape.matmul(attn, v) // [R, F]
    }

    /// Block 2: proximity scores of refreshed prototypes (`[R, F]`) against
    /// the mid-level features `f3` (`[F3, z, y, x]`). Returns `[R, N3]`.
    pub fn proximity_scores<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        refreshed: Var,
        f3: Var,
    ) -> Var {
        let fm = self.cfg.feat_mid;
        assert_eq!(tape.value(f3).shape()[0], fm, "mid channel mismatch");
        let r3 = tape.transpose(f3); // [N3, F3]
        let q = tape.linear(refreshed, vars[self.q2_w.0], vars[self.q2_b.0]); // [R, F3]
        let k = tape.linear(r3, vars[self.k2_w.0], vars[self.k2_b.0]); // [N3, F3]
        let scores = tape.matmul_nt(q, k); // [R, N3]
        tape.scale(scores, T::from_f64c(1.0 / (fm as f64).sqrt()))
    }

    /// Fuses per-prototype score fields (`[R, z, y, x]` on the
    /// half-resolution grid) into a single channel.
    fn aggregate<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], fields: Var) -> Var {
        if self.cfg.learned_aggregation {
            let c = tape.conv3d(fields, vars[self.agg_w.0], vars[self.agg_b.0], 1);
            let e = tape.elu(c);
            tape.pointwise_conv(e, vars[self.point_w.0], vars[self.point_b.0])
        } else {
            let r = self.cfg.prototypes_per_class;
            let ones = tape.constant(Tensor::full(&[1, r], T::one()));
            let zero = tape.constant(Tensor::zeros(&[1]));
            tape.pointwise_conv(fields, ones, zero)
        }
    }

    /// Full interaction: one relationship map per class at full resolution,
    /// `[C, 2*z3, 2*y3, 2*x3]` given `f3` of spatial shape `[z3, y3, x3]`.
    /// The map is unnormalised (softmax is applied by consumers).
    pub fn relationship_map<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        f2: Var,
        f3: Var,
    ) -> Var {
        let s3 = tape.value(f3).shape().to_vec();
        assert_eq!(s3.len(), 4, "expected [F3, z, y, x] mid features");
        let r = self.cfg.prototypes_per_class;
        let per_class: Vec<Var> = (0..self.cfg.num_classes)
            .map(|class| {
                let refreshed = self.refresh_prototypes(tape, vars, f2, class);
                let scores = self.proximity_scores(tape, vars, refreshed, f3);
                let fields = tape.reshape(scores, &[r, s3[1], s3[2], s3[3]]);
                self.aggregate(tape, vars, fields) // [1, z3, y3, x3]
            })
            .collect();
        let stacked = tape.concat_rows(&per_class); // [C, z3, y3, x3]
        tape.upsample2x(stacked)
    }
}
