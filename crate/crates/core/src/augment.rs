//! Paired weak/strong augmentation with a shared geometric view.
//!
//! The weak view of a volume is a random crop plus axis flips. The strong
//! view reuses the *same* geometry and adds intensity corruption (contrast,
//! brightness, noise) and optionally a box-mix with another crop in the
//! batch. Because geometry is shared, a prediction made on the weak view is
//! voxel-aligned with the strong view everywhere except inside the mixed
//! box, where it must be taken from the box donor instead —
//! [`align_teacher_prediction`] performs exactly that substitution.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::err::{CoreError, CoreResult};
use crate::tensor::{Dims3, Scalar, Tensor};

/// Augmentation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Crop extents; each must be >= 8, divisible by 4, and fit the volume.
    pub crop: [usize; 3],
    pub flip_prob: f64,
    /// Strong-view multiplicative contrast range.
    pub contrast_range: [f32; 2],
    /// Strong-view additive brightness range (symmetric around zero).
    pub brightness: f32,
    /// Strong-view additive Gaussian noise level.
    pub noise_sigma: f32,
    /// Probability that a strong view receives a mixed box.
    pub cutmix_prob: f64,
    /// Box edge length as a fraction of the crop edge (per-axis draw).
    pub cutmix_frac: [f64; 2],
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop: [8, 8, 8],
            flip_prob: 0.5,
            contrast_range: [0.8, 1.2],
            brightness: 0.1,
            noise_sigma: 0.1,
            cutmix_prob: 0.5,
            cutmix_frac: [0.25, 0.5],
        }
    }
}

impl AugConfig {
    pub fn validate(&self, dims: Dims3) -> CoreResult<()> {
        let d = dims.to_array();
        for (i, &c) in self.crop.iter().enumerate() {
            if c < 8 || c % 4 != 0 {
                return Err(CoreError::Config(format!(
                    "crop {:?}: extents must be >= 8 and divisible by 4",
                    self.crop
                )));
            }
            if c > d[i] {
                return Err(CoreError::Config(format!(
                    "crop {:?} exceeds volume dims {d:?}",
                    self.crop
                )));
            }
        }
        if self.contrast_range[0] <= 0.0 || self.contrast_range[0] > self.contrast_range[1] {
            return Err(CoreError::Config(format!("contrast_range {:?}", self.contrast_range)));
        }
        if !(0.0..=1.0).contains(&self.cutmix_prob) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CoreError::Config("probabilities must be in [0, 1]".into()));
        }
        if self.cutmix_frac[0] <= 0.0
            || self.cutmix_frac[0] > self.cutmix_frac[1]
            || self.cutmix_frac[1] > 1.0
        {
            return Err(CoreError::Config(format!("cutmix_frac {:?}", self.cutmix_frac)));
        }
        Ok(())
    }

    pub fn crop_dims(&self) -> Dims3 {
        Dims3(self.crop[0], self.crop[1], self.crop[2])
    }
}

/// Shared geometric transform: crop origin plus per-axis flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeomView {
    pub origin: [usize; 3],
    pub flip: [bool; 3],
}

/// Intensity corruption of the strong view. `noise_seed` lets the exact
/// noise field be replayed later from the record alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongParams {
    pub contrast: f32,
    pub brightness: f32,
    pub noise_seed: u64,
}

/// Box pasted from a donor crop of the same batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub donor: usize,
}

/// Everything needed to rebuild one strong view and align predictions to it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugRecord {
    pub geom: GeomView,
    pub strong: StrongParams,
    pub mix: Option<MixBox>,
}

/// Draws a crop origin and flips.
pub fn sample_geom(rng: &mut ChaCha8Rng, dims: Dims3, cfg: &AugConfig) -> GeomView {
    let d = dims.to_array();
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.gen_range(0..=d[a] - cfg.crop[a]);
    }
    let mut flip = [false; 3];
    for f in flip.iter_mut() {
        *f = rng.gen_bool(cfg.flip_prob);
    }
    GeomView { origin, flip }
}

fn geom_source(geom: &GeomView, crop: [usize; 3], out: [usize; 3]) -> [usize; 3] {
    let mut src = [0usize; 3];
    for a in 0..3 {
        let o = if geom.flip[a] { crop[a] - 1 - out[a] } else { out[a] };
        src[a] = geom.origin[a] + o;
    }
    src
}

/// Extracts the weak view of scalar data: crop, then flips.
pub fn extract_weak(data: &[f32], dims: Dims3, geom: &GeomView, crop: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(crop[0] * crop[1] * crop[2]);
    for z in 0..crop[0] {
        for y in 0..crop[1] {
            for x in 0..crop[2] {
                let s = geom_source(geom, crop, [z, y, x]);
                out.push(data[dims.offset(s[0], s[1], s[2])]);
            }
        }
    }
    out
}

/// Extracts the weak view of class labels with the same geometry.
pub fn extract_weak_mask(classes: &[u8], dims: Dims3, geom: &GeomView, crop: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(crop[0] * crop[1] * crop[2]);
    for z in 0..crop[0] {
        for y in 0..crop[1] {
            for x in 0..crop[2] {
                let s = geom_source(geom, crop, [z, y, x]);
                out.push(classes[dims.offset(s[0], s[1], s[2])]);
            }
        }
    }
    out
}

/// Draws the strong-view intensity parameters, including the replay seed.
pub fn sample_strong_params(rng: &mut ChaCha8Rng, cfg: &AugConfig) -> StrongParams {
    StrongParams {
        contrast: rng.gen_range(cfg.contrast_range[0]..=cfg.contrast_range[1]),
        brightness: rng.gen_range(-cfg.brightness..=cfg.brightness),
        noise_seed: rng.gen::<u64>(),
    }
}

/// Applies intensity corruption to a weak view. Fully determined by
/// `params`, so a recorded strong view can be reproduced bit-exactly.
pub fn apply_strong_intensity(weak: &[f32], params: &StrongParams, sigma: f32) -> Vec<f32> {
    let mut noise = ChaCha8Rng::seed_from_u64(params.noise_seed);
    weak.iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(&mut noise);
            params.contrast * v + params.brightness + (n * sigma as f64) as f32
        })
        .collect()
}

/// Draws an axis-aligned box inside the crop with per-axis edge fractions
/// from `cfg.cutmix_frac`.
pub fn sample_mix_box(rng: &mut ChaCha8Rng, cfg: &AugConfig, donor: usize) -> MixBox {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let frac = rng.gen_range(cfg.cutmix_frac[0]..=cfg.cutmix_frac[1]);
        let edge = ((cfg.crop[a] as f64 * frac).round() as usize).clamp(1, cfg.crop[a]);
        let start = rng.gen_range(0..=cfg.crop[a] - edge);
        lo[a] = start;
        hi[a] = start + edge;
    }
    MixBox { lo, hi, donor }
}

/// Overwrites the box region of `dst` with the same region of `src`
/// (scalar crops of identical extents).
pub fn paste_box(dst: &mut [f32], src: &[f32], crop: [usize; 3], mix: &MixBox) {
    let cd = Dims3(crop[0], crop[1], crop[2]);
    for z in mix.lo[0]..mix.hi[0] {
        for y in mix.lo[1]..mix.hi[1] {
            for x in mix.lo[2]..mix.hi[2] {
                let i = cd.offset(z, y, x);
                dst[i] = src[i];
            }
        }
    }
}

/// Moves a teacher prediction on weak views into the coordinates of the
/// strong view: outside the mixed box the geometry is shared so the
/// prediction passes through unchanged; inside the box it is replaced by
/// the donor's prediction at the same position. Both tensors are
/// `[C, cz, cy, cx]`.
pub fn align_teacher_prediction<T: Scalar>(
    own: &Tensor<T>,
    donor: Option<(&Tensor<T>, &MixBox)>,
) -> Tensor<T> {
    let mut out = own.clone();
    if let Some((donor_pred, mix)) = donor {
        assert_eq!(own.shape(), donor_pred.shape(), "prediction shapes must match");
        let s = own.shape();
        assert_eq!(s.len(), 4, "expected [C, z, y, x]");
        let cd = Dims3(s[1], s[2], s[3]);
        let n = cd.count();
        let dst = out.data_mut();
        let src = donor_pred.data();
        for c in 0..s[0] {
            for z in mix.lo[0]..mix.hi[0] {
                for y in mix.lo[1]..mix.hi[1] {
                    for x in mix.lo[2]..mix.hi[2] {
                        let i = c * n + cd.offset(z, y, x);
                        dst[i] = src[i];
                    }
                }
            }
        }
    }
    out
}
