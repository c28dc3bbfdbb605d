//! Run configuration: a four-section TOML file ([dataset], [train],
//! [augment], [eval]), every key overridable through the environment with
//! the `PROTOSEG_` prefix (`PROTOSEG_TRAIN_MAX_ITERS=500`), and a handful
//! of command-line overrides on top. Precedence: file < environment < CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use protoseg_core::augment::AugConfig;
use protoseg_core::crln::RectifyVariant;
use protoseg_core::trainer::TrainConfig;
use protoseg_core::volume::SynthConfig;

use crate::{content_hash, CliError, CliResult};

/// Where training and evaluation cases come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic" generates phantoms on the fly; "disk" loads a directory
    /// previously written by `dataset-gen` (or shaped the same way).
    pub source: String,
    /// Dataset directory when `source = "disk"`.
    pub dir: String,
    pub seed: u64,
    pub num_labelled: usize,
    pub num_unlabelled: usize,
    pub num_val: usize,
    pub dims: [usize; 3],
    pub num_classes: usize,
    pub spacing: [f64; 3],
    /// Inclusive range for the number of phantom shapes per volume.
    pub shapes_per_volume: [usize; 2],
    /// Probability that a shape is a tube rather than an ellipsoid.
    pub tube_prob: f64,
    /// Additive Gaussian observation noise in the generated images.
    pub noise_sigma: f32,
    /// Amplitude of the smooth background intensity ramp.
    pub gradient_amplitude: f32,
    /// Per-shape intensity contrast range (uniform draw).
    pub contrast_range: [f32; 2],
    /// Outer radial fraction of each shape rendered with weak contrast.
    pub boundary_band: f32,
    /// Contrast multiplier inside the boundary band.
    pub boundary_contrast: f32,
    /// Accepted foreground fraction per case; redrawn until inside.
    pub fg_fraction_range: [f64; 2],
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        DatasetSection {
            source: "synthetic".into(),
            dir: String::new(),
            seed: s.seed,
            num_labelled: s.num_labelled,
            num_unlabelled: s.num_unlabelled,
            num_val: s.num_val,
            dims: s.dims,
            num_classes: s.num_classes,
            spacing: s.spacing,
            shapes_per_volume: s.shapes_per_volume,
            tube_prob: s.tube_prob,
            noise_sigma: s.noise_sigma,
            gradient_amplitude: s.gradient_amplitude,
            contrast_range: s.contrast_range,
            boundary_band: s.boundary_band,
            boundary_contrast: s.boundary_contrast,
            fg_fraction_range: s.fg_fraction_range,
        }
    }
}

/// Optimisation and semi-supervision settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub base_channels: usize,
    pub max_iters: usize,
    pub labelled_per_batch: usize,
    pub unlabelled_per_batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub ema_decay: f64,
    pub rectify_after: u64,
    /// "additive" (learned gate), "replace", or "concat".
    pub rectify_variant: String,
    pub prototypes_per_class: usize,
    pub learned_aggregation: bool,
    pub tau: f64,
    pub tau_w: f64,
    pub temperature: f64,
    pub xi: f64,
    pub stochastic_xi: bool,
    pub max_anchors: usize,
    pub max_negatives: usize,
    pub use_crln: bool,
    pub use_cps: bool,
    pub use_strong_aug: bool,
    /// Checkpoint (and rectification-quality report) cadence in iterations.
    pub checkpoint_interval: u64,
    /// How many unlabelled cases the checkpoint-time rectification-quality
    /// report averages over.
    pub rectify_report_cases: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            seed: t.seed,
            base_channels: t.base_channels,
            max_iters: t.max_iters,
            labelled_per_batch: t.labelled_per_batch,
            unlabelled_per_batch: t.unlabelled_per_batch,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            poly_power: t.poly_power,
            ema_decay: t.ema_decay,
            rectify_after: t.rectify_after,
            rectify_variant: "additive".into(),
            prototypes_per_class: t.prototypes_per_class,
            learned_aggregation: t.learned_aggregation,
            tau: t.tau,
            tau_w: t.tau_w,
            temperature: t.temperature,
            xi: t.xi,
            stochastic_xi: t.stochastic_xi,
            max_anchors: t.max_anchors,
            max_negatives: t.max_negatives,
            use_crln: t.use_crln,
            use_cps: t.use_cps,
            use_strong_aug: t.use_strong_aug,
            checkpoint_interval: 250,
            rectify_report_cases: 12,
        }
    }
}

/// Crop and perturbation settings for the weak/strong view pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub crop: [usize; 3],
    pub flip_prob: f64,
    pub contrast_range: [f32; 2],
    pub brightness: f32,
    pub noise_sigma: f32,
    pub cutmix_prob: f64,
    pub cutmix_frac: [f64; 2],
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugConfig::default();
        AugmentSection {
            crop: a.crop,
            flip_prob: a.flip_prob,
            contrast_range: a.contrast_range,
            brightness: a.brightness,
            noise_sigma: a.noise_sigma,
            cutmix_prob: a.cutmix_prob,
            cutmix_frac: a.cutmix_frac,
        }
    }
}

/// Whole-volume inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    /// Report surface distances in physical (spacing-weighted) units
    /// instead of voxel units.
    pub physical_spacing: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { window: [16, 16, 16], stride: [8, 8, 8], physical_spacing: false }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(flatten(&e.to_string())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Canonical serialisation (fixed key order); input to the config hash.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        content_hash(self.canonical_toml().as_bytes())
    }

    pub fn rectify_variant(&self) -> CliResult<RectifyVariant> {
        match self.train.rectify_variant.as_str() {
            "additive" => Ok(RectifyVariant::Additive),
            "replace" => Ok(RectifyVariant::Replace),
            "concat" => Ok(RectifyVariant::Concat),
            other => Err(CliError::Config(format!(
                "unknown rectify_variant '{other}' (expected additive|replace|concat)"
            ))),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.dataset.seed,
            num_labelled: self.dataset.num_labelled,
            num_unlabelled: self.dataset.num_unlabelled,
            num_val: self.dataset.num_val,
            dims: self.dataset.dims,
            num_classes: self.dataset.num_classes,
            spacing: self.dataset.spacing,
            shapes_per_volume: self.dataset.shapes_per_volume,
            tube_prob: self.dataset.tube_prob,
            noise_sigma: self.dataset.noise_sigma,
            gradient_amplitude: self.dataset.gradient_amplitude,
            contrast_range: self.dataset.contrast_range,
            boundary_band: self.dataset.boundary_band,
            boundary_contrast: self.dataset.boundary_contrast,
            fg_fraction_range: self.dataset.fg_fraction_range,
        }
    }

    pub fn aug_config(&self) -> AugConfig {
        AugConfig {
            crop: self.augment.crop,
            flip_prob: self.augment.flip_prob,
            contrast_range: self.augment.contrast_range,
            brightness: self.augment.brightness,
            noise_sigma: self.augment.noise_sigma,
            cutmix_prob: self.augment.cutmix_prob,
            cutmix_frac: self.augment.cutmix_frac,
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            seed: self.train.seed,
            num_classes: self.dataset.num_classes,
            base_channels: self.train.base_channels,
            max_iters: self.train.max_iters,
            labelled_per_batch: self.train.labelled_per_batch,
            unlabelled_per_batch: self.train.unlabelled_per_batch,
            lr0: self.train.lr0,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            poly_power: self.train.poly_power,
            ema_decay: self.train.ema_decay,
            rectify_after: self.train.rectify_after,
            rectify_variant: self.rectify_variant()?,
            prototypes_per_class: self.train.prototypes_per_class,
            learned_aggregation: self.train.learned_aggregation,
            tau: self.train.tau,
            tau_w: self.train.tau_w,
            temperature: self.train.temperature,
            xi: self.train.xi,
            stochastic_xi: self.train.stochastic_xi,
            max_anchors: self.train.max_anchors,
            max_negatives: self.train.max_negatives,
            use_crln: self.train.use_crln,
            use_cps: self.train.use_cps,
            use_strong_aug: self.train.use_strong_aug,
            aug: self.aug_config(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validates the pieces a training run needs before any work starts.
    pub fn validate_for_training(&self) -> CliResult<()> {
        let core = self.train_config()?;
        if self.dataset.source != "synthetic" && self.dataset.source != "disk" {
            return Err(CliError::Config(format!(
                "unknown dataset source '{}' (expected synthetic|disk)",
                self.dataset.source
            )));
        }
        if self.dataset.source == "disk" && self.dataset.dir.is_empty() {
            return Err(CliError::Config("dataset.dir required when source = \"disk\"".into()));
        }
        if self.dataset.source == "synthetic" {
            self.synth_config().validate()?;
            let dims = protoseg_core::tensor::Dims3(
                self.dataset.dims[0],
                self.dataset.dims[1],
                self.dataset.dims[2],
            );
            core.aug.validate(dims)?;
        }
        if self.train.checkpoint_interval == 0 {
            return Err(CliError::Config("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }
}

fn flatten(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Applies `PROTOSEG_<SECTION>_<KEY>` environment overrides for every
/// config key. Returns the list of applied variable names. Values use the
/// key's own type: booleans as true/false, arrays as comma-separated
/// entries (brackets optional).
pub fn apply_env_overrides(
    cfg: &mut RunConfig,
    get: impl Fn(&str) -> Option<String>,
) -> CliResult<Vec<String>> {
    let mut value = toml::Value::try_from(&*cfg)
        .map_err(|e| CliError::Config(format!("config serialise: {e}")))?;
    let mut applied = Vec::new();
    let sections: Vec<String> = value
        .as_table()
        .expect("config root is a table")
        .keys()
        .cloned()
        .collect();
    for section in sections {
        let table = value
            .get_mut(&section)
            .and_then(|v| v.as_table_mut())
            .expect("config sections are tables");
        let keys: Vec<String> = table.keys().cloned().collect();
        for key in keys {
            let env_name =
                format!("PROTOSEG_{}_{}", section.to_uppercase(), key.to_uppercase());
            let Some(raw) = get(&env_name) else { continue };
            let parsed = parse_like(&table[&key], &raw).map_err(|e| {
                CliError::Config(format!("{env_name}={raw}: {e}"))
            })?;
            table.insert(key, parsed);
            applied.push(env_name);
        }
    }
    *cfg = value
        .try_into()
        .map_err(|e| CliError::Config(format!("after env overrides: {e}")))?;
    Ok(applied)
}

/// Parses `raw` into the same TOML type as `like`.
fn parse_like(like: &toml::Value, raw: &str) -> Result<toml::Value, String> {
    use toml::Value::*;
    match like {
        String(_) => Ok(String(raw.to_string())),
        Integer(_) => raw
            .trim()
            .parse::<i64>()
            .map(Integer)
            .map_err(|_| "expected an integer".to_string()),
        Float(_) => raw
            .trim()
            .parse::<f64>()
            .map(Float)
            .map_err(|_| "expected a number".to_string()),
        Boolean(_) => match raw.trim() {
            "true" | "1" => Ok(Boolean(true)),
            "false" | "0" => Ok(Boolean(false)),
            _ => Err("expected true|false".to_string()),
        },
        Array(a) => {
            let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
            let parts: Vec<&str> =
                inner.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if parts.len() != a.len() {
                return Err(format!("expected {} comma-separated entries", a.len()));
            }
            let template = a.first().ok_or("cannot override an empty array")?;
            parts
                .iter()
                .map(|p| parse_like(template, p))
                .collect::<Result<Vec<_>, _>>()
                .map(Array)
        }
        _ => Err("unsupported config value type".to_string()),
    }
}
