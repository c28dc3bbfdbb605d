//! Volumetric data types and the synthetic dataset generator.
//!
//! Volumes are scalar 3D images with physical voxel spacing. The generator
//! produces ellipsoid and tube phantoms over a smooth intensity ramp with
//! additive noise and a deliberately low-contrast boundary band, so that
//! voxels near object boundaries stay genuinely ambiguous.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::err::{CoreError, CoreResult};
use crate::rng::stream_rng;
use crate::tensor::{Dims3, Scalar, Tensor};

/// A scalar 3D image with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    dims: Dims3,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    /// Validates extents (each at least 8 and divisible by 4), spacing
    /// positivity, and finiteness of every voxel.
    pub fn new(id: String, dims: Dims3, spacing: [f64; 3], data: Vec<f32>) -> CoreResult<Self> {
        for d in dims.to_array() {
            if d < 8 || d % 4 != 0 {
                return Err(CoreError::Data(format!(
                    "volume {id}: extent {d} must be >= 8 and divisible by 4"
                )));
            }
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::Data(format!("volume {id}: spacing must be positive")));
        }
        if data.len() != dims.count() {
            return Err(CoreError::Data(format!(
                "volume {id}: {} voxels for dims {:?}",
                data.len(),
                dims.to_array()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Numeric(format!("volume {id}: non-finite voxel")));
        }
        Ok(Volume { id, dims, spacing, data })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.offset(z, y, x)]
    }

    /// Copy normalised to zero mean and unit standard deviation.
    pub fn normalized(&self) -> Volume {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let istd = 1.0 / var.sqrt().max(1e-12);
        let data = self.data.iter().map(|&v| ((v as f64 - mean) * istd) as f32).collect();
        Volume { id: self.id.clone(), dims: self.dims, spacing: self.spacing, data }
    }

    /// View as a `[1, d0, d1, d2]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let [d0, d1, d2] = self.dims.to_array();
        let data = self.data.iter().map(|&v| T::from_f64c(v as f64)).collect();
        Tensor::from_vec(&[1, d0, d1, d2], data).unwrap()
    }
}

/// Integer class labels over a voxel lattice, with an on-demand one-hot view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims3,
    num_classes: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims3, num_classes: usize, classes: Vec<u8>) -> CoreResult<Self> {
        if !(2..=255).contains(&num_classes) {
            return Err(CoreError::Config(format!("num_classes {num_classes} out of [2, 255]")));
        }
        if classes.len() != dims.count() {
            return Err(CoreError::Data(format!(
                "mask has {} entries for dims {:?}",
                classes.len(),
                dims.to_array()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(CoreError::Data(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(LabelMask { dims, num_classes, classes })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn class_at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.classes[self.dims.offset(z, y, x)]
    }

    /// One-hot view `[num_classes, d0, d1, d2]`; exactly one 1 per voxel.
    pub fn onehot<T: Scalar>(&self) -> Tensor<T> {
        let [d0, d1, d2] = self.dims.to_array();
        let n = self.dims.count();
        let mut data = vec![T::zero(); self.num_classes * n];
        for (i, &c) in self.classes.iter().enumerate() {
            data[c as usize * n + i] = T::one();
        }
        Tensor::from_vec(&[self.num_classes, d0, d1, d2], data).unwrap()
    }

    /// Fraction of voxels with a non-background class.
    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.classes.iter().filter(|&&c| c > 0).count();
        fg as f64 / self.classes.len() as f64
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.classes.iter().map(|&c| c == class).collect()
    }
}

/// A volume with its reference segmentation.
#[derive(Debug, Clone)]
pub struct LabelledCase {
    pub volume: Volume,
    pub mask: LabelMask,
}

/// Train/validation partition with scarce labels.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labelled: Vec<LabelledCase>,
    pub unlabelled: Vec<Volume>,
    pub val: Vec<LabelledCase>,
}

impl DatasetSplit {
    /// Checks id uniqueness across all three parts and the convention that
    /// unlabelled cases are at least as numerous as labelled ones.
    pub fn validate(&self) -> CoreResult<()> {
        if self.unlabelled.len() < self.labelled.len() {
            return Err(CoreError::Data(format!(
                "{} unlabelled < {} labelled",
                self.unlabelled.len(),
                self.labelled.len()
            )));
        }
        let mut ids: Vec<&str> = self
            .labelled
            .iter()
            .map(|c| c.volume.id.as_str())
            .chain(self.unlabelled.iter().map(|v| v.id.as_str()))
            .chain(self.val.iter().map(|c| c.volume.id.as_str()))
            .collect();
        ids.sort_unstable();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                return Err(CoreError::Data(format!("duplicate case id {}", w[0])));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic phantom generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_labelled: usize,
    pub num_unlabelled: usize,
    pub num_val: usize,
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub spacing: [f64; 3],
    /// Inclusive range for the number of shapes per volume.
    pub shapes_per_volume: [usize; 2],
    /// Probability that a shape is a tube rather than an ellipsoid.
    pub tube_prob: f64,
    /// Additive Gaussian observation noise.
    pub noise_sigma: f32,
    /// Amplitude of the smooth background intensity ramp.
    pub gradient_amplitude: f32,
    /// Per-shape intensity contrast range (uniform draw).
    pub contrast_range: [f32; 2],
    /// Outer radial fraction of each shape rendered with weak contrast.
    pub boundary_band: f32,
    /// Contrast multiplier inside the boundary band.
    pub boundary_contrast: f32,
    /// Accepted foreground fraction per case; cases are redrawn until inside.
    pub fg_fraction_range: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_labelled: 8,
            num_unlabelled: 72,
            num_val: 8,
            dims: [32, 32, 32],
            num_classes: 2,
            spacing: [1.0, 1.0, 1.0],
            shapes_per_volume: [1, 3],
            tube_prob: 0.35,
            noise_sigma: 0.2,
            gradient_amplitude: 0.3,
            contrast_range: [0.35, 0.9],
            boundary_band: 0.12,
            boundary_contrast: 0.1,
            fg_fraction_range: [0.02, 0.4],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> CoreResult<()> {
        for d in self.dims {
            if d < 8 || d % 4 != 0 {
                return Err(CoreError::Config(format!(
                    "dims {:?}: extents must be >= 8 and divisible by 4",
                    self.dims
                )));
            }
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(CoreError::Config(format!("num_classes {}", self.num_classes)));
        }
        if self.shapes_per_volume[0] < 1 || self.shapes_per_volume[0] > self.shapes_per_volume[1] {
            return Err(CoreError::Config(format!(
                "shapes_per_volume {:?}",
                self.shapes_per_volume
            )));
        }
        if self.num_labelled == 0 || self.num_unlabelled < self.num_labelled {
            return Err(CoreError::Config(format!(
                "need at least as many unlabelled ({}) as labelled ({})",
                self.num_unlabelled, self.num_labelled
            )));
        }
        if !(0.0..1.0).contains(&(self.fg_fraction_range[0]))
            || self.fg_fraction_range[0] >= self.fg_fraction_range[1]
        {
            return Err(CoreError::Config(format!(
                "fg_fraction_range {:?}",
                self.fg_fraction_range
            )));
        }
        Ok(())
    }
}

/// Geometric primitive of the phantom generator.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthShape {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        /// Row-major rotation matrix.
        rot: [[f64; 3]; 3],
        class: u8,
        contrast: f32,
    },
    Tube {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
        class: u8,
        contrast: f32,
    },
}

impl SynthShape {
    /// Normalised radial coordinate of a point: <= 1 inside the shape.
    pub fn radial(&self, p: [f64; 3]) -> f64 {
        match self {
            SynthShape::Ellipsoid { center, radii, rot, .. } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let mut q = 0.0;
                for (row, &r) in rot.iter().zip(radii.iter()) {
                    let v = (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / r;
                    q += v * v;
                }
                q.sqrt()
            }
            SynthShape::Tube { a, b, radius, .. } => {
                let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
                let t = if len2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let c = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
                let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() / radius
            }
        }
    }

    pub fn class(&self) -> u8 {
        match self {
            SynthShape::Ellipsoid { class, .. } | SynthShape::Tube { class, .. } => *class,
        }
    }

    pub fn contrast(&self) -> f32 {
        match self {
            SynthShape::Ellipsoid { contrast, .. } | SynthShape::Tube { contrast, .. } => *contrast,
        }
    }
}

/// Which part of the split a generated case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Labelled,
    Unlabelled,
    Val,
}

impl SplitKind {
    fn stream_base(self) -> u64 {
        match self {
            SplitKind::Labelled => 1_000_000,
            SplitKind::Unlabelled => 2_000_000,
            SplitKind::Val => 3_000_000,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            SplitKind::Labelled => "lab",
            SplitKind::Unlabelled => "unl",
            SplitKind::Val => "val",
        }
    }
}

fn unit_quaternion_matrix(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        let mut n = 0.0;
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
            n += *v * *v;
        }
        if n > 1e-12 {
            let inv = 1.0 / n.sqrt();
            for v in q.iter_mut() {
                *v *= inv;
            }
            break;
        }
    }
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Draws one candidate set of shapes; a single attempt with no acceptance.
pub fn draw_shapes(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<SynthShape> {
    let count = rng.gen_range(cfg.shapes_per_volume[0]..=cfg.shapes_per_volume[1]);
    let dmin = cfg.dims.iter().copied().min().unwrap() as f64;
    let fg_classes = (cfg.num_classes - 1) as u8;
    (0..count)
        .map(|_| {
            let class = 1 + rng.gen_range(0..fg_classes.max(1));
            let contrast = rng.gen_range(cfg.contrast_range[0]..=cfg.contrast_range[1]);
            let interior = |rng: &mut ChaCha8Rng, d: usize| -> f64 {
                rng.gen_range(0.25 * d as f64..=0.75 * d as f64)
            };
            if rng.gen_bool(cfg.tube_prob) {
                let a = [
                    interior(rng, cfg.dims[0]),
                    interior(rng, cfg.dims[1]),
                    interior(rng, cfg.dims[2]),
                ];
                let b = [
                    interior(rng, cfg.dims[0]),
                    interior(rng, cfg.dims[1]),
                    interior(rng, cfg.dims[2]),
                ];
                let radius = rng.gen_range(0.09 * dmin..=0.16 * dmin);
                SynthShape::Tube { a, b, radius, class, contrast }
            } else {
                let center = [
                    interior(rng, cfg.dims[0]),
                    interior(rng, cfg.dims[1]),
                    interior(rng, cfg.dims[2]),
                ];
                let radii = [
                    rng.gen_range(0.14 * dmin..=0.28 * dmin),
                    rng.gen_range(0.14 * dmin..=0.28 * dmin),
                    rng.gen_range(0.14 * dmin..=0.28 * dmin),
                ];
                let rot = unit_quaternion_matrix(rng);
                SynthShape::Ellipsoid { center, radii, rot, class, contrast }
            }
        })
        .collect()
}

/// Rasterises shapes to voxel class labels; later shapes overwrite earlier.
/// Membership is evaluated at voxel centres (integer coordinates).
pub fn rasterize(dims: Dims3, shapes: &[SynthShape]) -> Vec<u8> {
    let mut classes = vec![0u8; dims.count()];
    for shape in shapes {
        let c = shape.class();
        let mut i = 0;
        for z in 0..dims.0 {
            for y in 0..dims.1 {
                for x in 0..dims.2 {
                    if shape.radial([z as f64, y as f64, x as f64]) <= 1.0 {
                        classes[i] = c;
                    }
                    i += 1;
                }
            }
        }
    }
    classes
}

/// Generates one case along with the shapes that produced it.
pub fn generate_case_with_shapes(
    cfg: &SynthConfig,
    split: SplitKind,
    index: usize,
) -> CoreResult<(Volume, LabelMask, Vec<SynthShape>)> {
    cfg.validate()?;
    let dims = Dims3(cfg.dims[0], cfg.dims[1], cfg.dims[2]);
    let mut rng = stream_rng(cfg.seed, split.stream_base() + index as u64);
    let mut accepted: Option<(Vec<u8>, Vec<SynthShape>)> = None;
    for _ in 0..64 {
        let shapes = draw_shapes(&mut rng, cfg);
        let classes = rasterize(dims, &shapes);
        let fg = classes.iter().filter(|&&c| c > 0).count() as f64 / classes.len() as f64;
        if fg >= cfg.fg_fraction_range[0] && fg <= cfg.fg_fraction_range[1] {
            accepted = Some((classes, shapes));
            break;
        }
    }
    let (classes, shapes) = accepted.ok_or_else(|| {
        CoreError::Data(format!(
            "no acceptable foreground fraction in 64 draws for {} {index}",
            split.tag()
        ))
    })?;

    // intensity: smooth ramp + per-shape contrast (attenuated in the outer
    // band) + observation noise, in that order
    let mut dir = [0.0f64; 3];
    loop {
        let mut n = 0.0;
        for v in dir.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
            n += *v * *v;
        }
        if n > 1e-12 {
            let inv = 1.0 / n.sqrt();
            for v in dir.iter_mut() {
                *v *= inv;
            }
            break;
        }
    }
    let dmax = cfg.dims.iter().copied().max().unwrap() as f64;
    let centre = [cfg.dims[0] as f64 / 2.0, cfg.dims[1] as f64 / 2.0, cfg.dims[2] as f64 / 2.0];
    let mut data = vec![0.0f32; dims.count()];
    let mut i = 0;
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                let p = [z as f64, y as f64, x as f64];
                let proj = (dir[0] * (p[0] - centre[0])
                    + dir[1] * (p[1] - centre[1])
                    + dir[2] * (p[2] - centre[2]))
                    / dmax;
                let mut v = cfg.gradient_amplitude * proj as f32;
                for shape in &shapes {
                    let q = shape.radial(p);
                    if q <= 1.0 {
                        let band = q > 1.0 - cfg.boundary_band as f64;
                        let k = if band { cfg.boundary_contrast } else { 1.0 };
                        v += shape.contrast() * k;
                    }
                }
                data[i] = v;
                i += 1;
            }
        }
    }
    let sigma = cfg.noise_sigma as f64;
    for v in data.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += (n * sigma) as f32;
    }

    let id = format!("{}_{index:03}", split.tag());
    let volume = Volume::new(id, dims, cfg.spacing, data)?;
    let mask = LabelMask::new(dims, cfg.num_classes, classes)?;
    Ok((volume, mask, shapes))
}

/// Generates one case of the split.
pub fn generate_case(
    cfg: &SynthConfig,
    split: SplitKind,
    index: usize,
) -> CoreResult<(Volume, LabelMask)> {
    generate_case_with_shapes(cfg, split, index).map(|(v, m, _)| (v, m))
}

/// Full split plus the hidden reference masks of the unlabelled cases
/// (used only for diagnostics, never for training).
pub fn generate_synthetic_dataset_with_truth(
    cfg: &SynthConfig,
) -> CoreResult<(DatasetSplit, Vec<LabelMask>)> {
    cfg.validate()?;
    let mut labelled = Vec::with_capacity(cfg.num_labelled);
    for i in 0..cfg.num_labelled {
        let (volume, mask) = generate_case(cfg, SplitKind::Labelled, i)?;
        labelled.push(LabelledCase { volume, mask });
    }
    let mut unlabelled = Vec::with_capacity(cfg.num_unlabelled);
    let mut truth = Vec::with_capacity(cfg.num_unlabelled);
    for i in 0..cfg.num_unlabelled {
        let (volume, mask) = generate_case(cfg, SplitKind::Unlabelled, i)?;
        unlabelled.push(volume);
        truth.push(mask);
    }
    let mut val = Vec::with_capacity(cfg.num_val);
    for i in 0..cfg.num_val {
        let (volume, mask) = generate_case(cfg, SplitKind::Val, i)?;
        val.push(LabelledCase { volume, mask });
    }
    let split = DatasetSplit { labelled, unlabelled, val };
    split.validate()?;
    Ok((split, truth))
}

/// Deterministic synthetic dataset for a config.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> CoreResult<DatasetSplit> {
    generate_synthetic_dataset_with_truth(cfg).map(|(s, _)| s)
}
