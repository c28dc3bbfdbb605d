//! Checkpoint persistence.
//!
//! A checkpoint is one file: an 8-byte magic (`PSCKPT01`), a little-endian
//! u64 manifest length, a TOML manifest, then the concatenated
//! little-endian float32 array payload in manifest order. The manifest
//! records the iteration, class/prototype/feature counts, the config hash
//! and full config snapshot, the code fingerprint, and one entry per named
//! array (student and teacher parameters, optimizer velocity, contrastive
//! centre fallbacks). Loading then saving reproduces the file byte for
//! byte; resuming training from a checkpoint reproduces the next loss to
//! float32 accumulation accuracy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use protoseg_core::params::ParamId;
use protoseg_core::tensor::Tensor;
use protoseg_core::trainer::Trainer;

use crate::config::RunConfig;
use crate::{code_hash, CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"PSCKPT01";

/// One float32 array with its name and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    pub feat_bottleneck: usize,
    pub config_hash: String,
    pub code_hash: String,
    /// Canonical TOML snapshot of the full run configuration.
    pub config_toml: String,
    pub arrays: Vec<NamedArray>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    iteration: u64,
    num_classes: usize,
    prototypes_per_class: usize,
    feat_bottleneck: usize,
    config_hash: String,
    code_hash: String,
    config: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    meta: Meta,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for a in &self.arrays {
            let count: usize = a.shape.iter().product();
            if count != a.data.len() {
                return Err(CliError::Data(format!(
                    "array {}: {} values for shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
            entries.push(ArrayEntry { name: a.name.clone(), shape: a.shape.clone(), offset });
            offset += a.data.len() as u64;
        }
        let doc = ManifestDoc {
            meta: Meta {
                iteration: self.iteration,
                num_classes: self.num_classes,
                prototypes_per_class: self.prototypes_per_class,
                feat_bottleneck: self.feat_bottleneck,
                config_hash: self.config_hash.clone(),
                code_hash: self.code_hash.clone(),
                config: self.config_toml.clone(),
            },
            arrays: entries,
        };
        let manifest = toml::to_string(&doc).expect("manifest serialises");
        let mut bytes =
            Vec::with_capacity(16 + manifest.len() + offset as usize * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(manifest.as_bytes());
        for a in &self.arrays {
            for &v in &a.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Checkpoint> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let corrupt = |why: &str| {
            CliError::Data(format!("corrupt checkpoint {}: {why}", path.display()))
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(corrupt("truncated manifest"));
        }
        let manifest = std::str::from_utf8(&bytes[16..16 + mlen])
            .map_err(|_| corrupt("manifest is not UTF-8"))?;
        let doc: ManifestDoc =
            toml::from_str(manifest).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        let payload = &bytes[16 + mlen..];
        let total: u64 = doc
            .arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>() as u64)
            .sum();
        if payload.len() as u64 != total * 4 {
            return Err(corrupt(&format!(
                "payload is {} bytes, manifest promises {}",
                payload.len(),
                total * 4
            )));
        }
        let mut names: Vec<&str> = doc.arrays.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(corrupt("duplicate array name"));
        }
        let mut arrays = Vec::with_capacity(doc.arrays.len());
        let mut expect_offset = 0u64;
        for e in doc.arrays {
            if e.offset != expect_offset {
                return Err(corrupt(&format!("array {} at unexpected offset", e.name)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize * 4;
            let data: Vec<f32> = payload[start..start + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push(NamedArray { name: e.name, shape: e.shape, data });
            expect_offset += count as u64;
        }
        Ok(Checkpoint {
            iteration: doc.meta.iteration,
            num_classes: doc.meta.num_classes,
            prototypes_per_class: doc.meta.prototypes_per_class,
            feat_bottleneck: doc.meta.feat_bottleneck,
            config_hash: doc.meta.config_hash,
            code_hash: doc.meta.code_hash,
            config_toml: doc.meta.config,
            arrays,
        })
    }

    /// The run configuration this checkpoint was trained with.
    pub fn run_config(&self) -> CliResult<RunConfig> {
        RunConfig::from_toml_str(&self.config_toml)
    }

    /// Snapshots a trainer. Arrays are written in a fixed order: student
    /// parameters, teacher parameters, optimizer velocity, then any
    /// contrastive centre fallbacks.
    pub fn from_trainer(trainer: &Trainer<f64>, run_cfg: &RunConfig) -> Checkpoint {
        let core = trainer.config();
        let store = &trainer.student().store;
        let mut arrays = Vec::with_capacity(3 * store.len() + core.num_classes);
        let to_f32 = |t: &Tensor<f64>| NamedArrayData {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        };
        for i in 0..store.len() {
            let id = ParamId(i);
            let a = to_f32(store.value(id));
            arrays.push(NamedArray {
                name: format!("student.{}", store.name(id)),
                shape: a.shape,
                data: a.data,
            });
        }
        let tstore = &trainer.teacher().store;
        for i in 0..tstore.len() {
            let id = ParamId(i);
            let a = to_f32(tstore.value(id));
            arrays.push(NamedArray {
                name: format!("teacher.{}", tstore.name(id)),
                shape: a.shape,
                data: a.data,
            });
        }
        for (i, v) in trainer.optimizer().state().iter().enumerate() {
            let a = to_f32(v);
            arrays.push(NamedArray {
                name: format!("velocity.{}", store.name(ParamId(i))),
                shape: a.shape,
                data: a.data,
            });
        }
        for (class, centre) in trainer.centre_fallbacks().iter().enumerate() {
            if let Some(c) = centre {
                arrays.push(NamedArray {
                    name: format!("centre.{class}"),
                    shape: vec![c.len()],
                    data: c.iter().map(|&v| v as f32).collect(),
                });
            }
        }
        Checkpoint {
            iteration: trainer.iteration(),
            num_classes: core.num_classes,
            prototypes_per_class: core.prototypes_per_class,
            feat_bottleneck: core.backbone_config().bottleneck_channels(),
            config_hash: run_cfg.hash(),
            code_hash: code_hash().to_string(),
            config_toml: run_cfg.canonical_toml(),
            arrays,
        }
    }

    fn get(&self, name: &str) -> CliResult<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CliError::Data(format!("checkpoint is missing array {name}")))
    }

    /// Rebuilds a trainer from the embedded config and restores all state.
    pub fn into_trainer(&self) -> CliResult<Trainer<f64>> {
        let run_cfg = self.run_config()?;
        let core = run_cfg.train_config()?;
        let mut trainer: Trainer<f64> = Trainer::new(core.clone())?;
        let mut student = trainer.student().store.clone();
        let mut teacher = trainer.teacher().store.clone();
        let mut velocity = Vec::with_capacity(student.len());
        for i in 0..student.len() {
            let id = ParamId(i);
            let name = student.name(id).to_string();
            for (prefix, dst) in [("student", &mut student), ("teacher", &mut teacher)] {
                let a = self.get(&format!("{prefix}.{name}"))?;
                let t = dst.value_mut(id);
                if a.shape != t.shape() {
                    return Err(CliError::Data(format!(
                        "checkpoint array {prefix}.{name} has shape {:?}, model expects {:?}",
                        a.shape,
                        t.shape()
                    )));
                }
                for (x, &v) in t.data_mut().iter_mut().zip(&a.data) {
                    *x = v as f64;
                }
            }
            let a = self.get(&format!("velocity.{name}"))?;
            let expect = student.value(id).shape();
            if a.shape != expect {
                return Err(CliError::Data(format!(
                    "checkpoint array velocity.{name} has shape {:?}, model expects {:?}",
                    a.shape, expect
                )));
            }
            velocity.push(
                Tensor::from_vec(&a.shape, a.data.iter().map(|&v| v as f64).collect())
                    .map_err(CliError::from)?,
            );
        }
        let mut centres = vec![None; core.num_classes];
        for (class, slot) in centres.iter_mut().enumerate() {
            if let Ok(a) = self.get(&format!("centre.{class}")) {
                *slot = Some(a.data.iter().map(|&v| v as f64).collect::<Vec<f64>>());
            }
        }
        trainer.restore(&student, &teacher, velocity, centres, self.iteration);
        Ok(trainer)
    }
}

struct NamedArrayData {
    shape: Vec<usize>,
    data: Vec<f32>,
}
