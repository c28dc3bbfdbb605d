//! Three-level encoder–decoder segmentation backbone.
//!
//! The encoder downsamples twice with strided 3x3x3 convolutions; the
//! decoder upsamples with 2x2x2 transposed convolutions and concatenates
//! the encoder skip features. Every convolution is followed by instance
//! normalisation and ELU. Three feature taps are exposed alongside the
//! per-class logits:
//!
//! - `f2`: bottleneck, `2*base` channels at 1/4 resolution,
//! - `f3`: mid decoder, `base` channels at 1/2 resolution,
//! - `f4`: last decoder features, `base/2` channels at full resolution.
//!
//! With `base = 16` and a 32-cubed input that is 32ch @ 8³, 16ch @ 16³,
//! and 8ch @ 32³. Channel counts strictly decrease towards the output tap.

use alloc::format;
use alloc::string::String;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::err::{CoreError, CoreResult};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Backbone hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Width scale; channel counts are `2*base` / `base` / `base/2`.
    pub base: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 1, num_classes: 2, base: 16 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.in_channels == 0 {
            return Err(CoreError::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(CoreError::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.base < 2 || self.base % 2 != 0 {
            return Err(CoreError::Config(format!("base {} must be even and >= 2", self.base)));
        }
        Ok(())
    }

    /// Bottleneck channel count (`f2`).
    pub fn bottleneck_channels(&self) -> usize {
        2 * self.base
    }

    /// Mid-decoder channel count (`f3`).
    pub fn mid_channels(&self) -> usize {
        self.base
    }

    /// Full-resolution tap channel count (`f4`).
    pub fn out_channels(&self) -> usize {
        self.base / 2
    }
}

/// conv3 + instance norm + ELU.
#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
    ) -> ConvBlock {
        ConvBlock {
            w: store.add_conv(rng, format!("{name}.w"), &[co, ci, 3, 3, 3]),
            b: store.add_zeros(format!("{name}.b"), &[co]),
            gamma: store.add_full(format!("{name}.gamma"), &[co], T::one()),
            beta: store.add_zeros(format!("{name}.beta"), &[co]),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, stride: usize) -> Var {
        let c = tape.conv3d(x, vars[self.w.0], vars[self.b.0], stride);
        let n = tape.instance_norm(c, vars[self.gamma.0], vars[self.beta.0], Backbone::NORM_EPS());
        tape.elu(n)
    }
}

/// Feature taps and logits of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    /// Bottleneck features `[2*base, d/4, ...]`.
    pub f2: Var,
    /// Mid-decoder features `[base, d/2, ...]`.
    pub f3: Var,
    /// Full-resolution features `[base/2, d, ...]`.
    pub f4: Var,
    /// Per-class logits `[num_classes, d, ...]`.
    pub logits: Var,
}

/// The segmentation network; parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    enc0: ConvBlock,
    down1: ConvBlock,
    enc1: ConvBlock,
    down2: ConvBlock,
    up1_w: ParamId,
    up1_b: ParamId,
    dec1: ConvBlock,
    up2_w: ParamId,
    up2_b: ParamId,
    dec2: ConvBlock,
    head_w: ParamId,
    head_b: ParamId,
}

impl Backbone {
    #[allow(non_snake_case)]
    fn NORM_EPS<T: Scalar>() -> T {
        T::from_f64c(1e-5)
    }

    /// Registers all parameters under `prefix` and returns the layout.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: BackboneConfig,
    ) -> CoreResult<Backbone> {
        cfg.validate()?;
        let (f, f3, f4) = (cfg.bottleneck_channels(), cfg.mid_channels(), cfg.out_channels());
        let n = |s: &str| -> String { format!("{prefix}.{s}") };
        let enc0 = ConvBlock::new(store, rng, &n("enc0"), cfg.in_channels, f3);
        let down1 = ConvBlock::new(store, rng, &n("down1"), f3, f);
        let enc1 = ConvBlock::new(store, rng, &n("enc1"), f, f);
        let down2 = ConvBlock::new(store, rng, &n("down2"), f, f);
        let up1_w = store.add_conv(rng, n("up1.w"), &[f, f3, 2, 2, 2]);
        let up1_b = store.add_zeros(n("up1.b"), &[f3]);
        let dec1 = ConvBlock::new(store, rng, &n("dec1"), f3 + f, f3);
        let up2_w = store.add_conv(rng, n("up2.w"), &[f3, f4, 2, 2, 2]);
        let up2_b = store.add_zeros(n("up2.b"), &[f4]);
        let dec2 = ConvBlock::new(store, rng, &n("dec2"), f4 + f3, f4);
        let head_w = store.add_conv(rng, n("head.w"), &[cfg.num_classes, f4]);
        let head_b = store.add_zeros(n("head.b"), &[cfg.num_classes]);
        Ok(Backbone {
            cfg,
            enc0,
            down1,
            enc1,
            down2,
            up1_w,
            up1_b,
            dec1,
            up2_w,
            up2_b,
            dec2,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> BackboneConfig {
        self.cfg
    }

    /// Forward pass over `[in_channels, d0, d1, d2]` input; extents must be
    /// divisible by 4.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> FeaturePyramid {
        let s = tape.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "expected [c, z, y, x] input");
        assert_eq!(s[0], self.cfg.in_channels, "input channels");
        assert!(
            s[1..].iter().all(|&d| d % 4 == 0 && d >= 8),
            "input extents {:?} must be >= 8 and divisible by 4",
            &s[1..]
        );

        let e0 = self.enc0.apply(tape, vars, x, 1); // [f3, d]
        let d1 = self.down1.apply(tape, vars, e0, 2); // [f, d/2]
        let e1 = self.enc1.apply(tape, vars, d1, 1); // [f, d/2]
        let f2 = self.down2.apply(tape, vars, e1, 2); // [f, d/4]

        let u1 = tape.conv3d_transpose2(f2, vars[self.up1_w.0], vars[self.up1_b.0]); // [f3, d/2]
        let c1 = tape.concat_rows(&[u1, e1]); // [f3+f, d/2]
        let f3 = self.dec1.apply(tape, vars, c1, 1); // [f3, d/2]

        let u2 = tape.conv3d_transpose2(f3, vars[self.up2_w.0], vars[self.up2_b.0]); // [f4, d]
        let c2 = tape.concat_rows(&[u2, e0]); // [f4+f3, d]
        let f4 = self.dec2.apply(tape, vars, c2, 1); // [f4, d]

        let logits = tape.pointwise_conv(f4, vars[self.head_w.0], vars[self.head_b.0]);
        FeaturePyramid { f2, f3, f4, logits }
    }

    /// Softmax over the class axis of the logits.
    pub fn probabilities<T: Scalar>(&self, tape: &mut Tape<T>, pyramid: &FeaturePyramid) -> Var {
        tape.softmax_axis0(pyramid.logits)
    }

    /// Store ids of the classification head (used to probe or freeze it).
    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head_w, self.head_b]
    }

    /// Store id of the first encoder bias (used by gradient tests).
    pub fn probe_ids(&self) -> [ParamId; 2] {
        [self.enc0.b, self.head_w]
    }
}
