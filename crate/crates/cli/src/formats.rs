//! On-disk formats: raw little-endian voxel buffers with structured-text
//! sidecar manifests, and a dataset directory layout built from them.
//!
//! A volume is `<name>.f32raw` (row-major little-endian float32) next to
//! `<name>.manifest` (TOML: id, dims, spacing, dtype, order). A label mask
//! is `<name>.u8raw` + `<name>.manifest` (id, dims, num_classes, dtype,
//! order). Buffer length must match the manifest exactly; anything else is
//! reported as a corrupt file.
//!
//! A dataset directory is:
//!
//! ```text
//! <dir>/split.toml          case lists + class count
//! <dir>/volumes/<id>.*      every case's volume
//! <dir>/masks/<id>.*        labelled + validation masks, and optionally
//!                           reference masks for unlabelled cases (used by
//!                           rectification-quality reports)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use protoseg_core::tensor::Dims3;
use protoseg_core::volume::{DatasetSplit, LabelMask, LabelledCase, Volume};

use crate::{CliError, CliResult};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeManifest {
    id: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    order: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskManifest {
    id: String,
    dims: [usize; 3],
    num_classes: usize,
    dtype: String,
    order: String,
}

fn read_manifest<M: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<M> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Data(format!("corrupt manifest {}: {e}", path.display())))
}

/// Writes `<base>.f32raw` and `<base>.manifest`.
pub fn save_volume(v: &Volume, base: &Path) -> CliResult<()> {
    let manifest = VolumeManifest {
        id: v.id.clone(),
        dims: v.dims().to_array(),
        spacing: v.spacing(),
        dtype: "float32".into(),
        order: "row-major".into(),
    };
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(base.with_extension("f32raw"), bytes)?;
    fs::write(
        base.with_extension("manifest"),
        toml::to_string(&manifest).expect("manifest serialises"),
    )?;
    Ok(())
}

/// Loads a volume saved by [`save_volume`]; `base` has no extension.
pub fn load_volume(base: &Path) -> CliResult<Volume> {
    let m: VolumeManifest = read_manifest(&base.with_extension("manifest"))?;
    if m.dtype != "float32" || m.order != "row-major" {
        return Err(CliError::Data(format!(
            "corrupt volume {}: unsupported dtype/order {}/{}",
            base.display(),
            m.dtype,
            m.order
        )));
    }
    let raw_path = base.with_extension("f32raw");
    let bytes = fs::read(&raw_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", raw_path.display())))?;
    let expect = m.dims.iter().product::<usize>() * 4;
    if bytes.len() != expect {
        return Err(CliError::Data(format!(
            "corrupt volume {}: {} bytes for dims {:?} (expected {expect})",
            raw_path.display(),
            bytes.len(),
            m.dims
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume::new(m.id, Dims3(m.dims[0], m.dims[1], m.dims[2]), m.spacing, data)?)
}

/// Writes `<base>.u8raw` and `<base>.manifest`.
pub fn save_mask(mask: &LabelMask, id: &str, base: &Path) -> CliResult<()> {
    let manifest = MaskManifest {
        id: id.to_string(),
        dims: mask.dims().to_array(),
        num_classes: mask.num_classes(),
        dtype: "uint8".into(),
        order: "row-major".into(),
    };
    fs::write(base.with_extension("u8raw"), mask.classes())?;
    fs::write(
        base.with_extension("manifest"),
        toml::to_string(&manifest).expect("manifest serialises"),
    )?;
    Ok(())
}

/// Loads a mask saved by [`save_mask`].
pub fn load_mask(base: &Path) -> CliResult<LabelMask> {
    let m: MaskManifest = read_manifest(&base.with_extension("manifest"))?;
    if m.dtype != "uint8" || m.order != "row-major" {
        return Err(CliError::Data(format!(
            "corrupt mask {}: unsupported dtype/order {}/{}",
            base.display(),
            m.dtype,
            m.order
        )));
    }
    let raw_path = base.with_extension("u8raw");
    let bytes = fs::read(&raw_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", raw_path.display())))?;
    let expect: usize = m.dims.iter().product();
    if bytes.len() != expect {
        return Err(CliError::Data(format!(
            "corrupt mask {}: {} bytes for dims {:?}",
            raw_path.display(),
            bytes.len(),
            m.dims
        )));
    }
    Ok(LabelMask::new(Dims3(m.dims[0], m.dims[1], m.dims[2]), m.num_classes, bytes)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    num_classes: usize,
    labelled: Vec<String>,
    unlabelled: Vec<String>,
    val: Vec<String>,
    unlabelled_truth: bool,
}

/// Writes a whole dataset (and optional reference masks for the unlabelled
/// cases) under `dir`.
pub fn save_dataset(
    dir: &Path,
    split: &DatasetSplit,
    unlabelled_truth: Option<&[LabelMask]>,
) -> CliResult<()> {
    split.validate()?;
    if let Some(t) = unlabelled_truth {
        if t.len() != split.unlabelled.len() {
            return Err(CliError::Data("reference mask count != unlabelled count".into()));
        }
    }
    let volumes = dir.join("volumes");
    let masks = dir.join("masks");
    fs::create_dir_all(&volumes)?;
    fs::create_dir_all(&masks)?;
    let manifest = SplitManifest {
        num_classes: split
            .labelled
            .first()
            .map(|c| c.mask.num_classes())
            .ok_or_else(|| CliError::Data("dataset has no labelled cases".into()))?,
        labelled: split.labelled.iter().map(|c| c.volume.id.clone()).collect(),
        unlabelled: split.unlabelled.iter().map(|v| v.id.clone()).collect(),
        val: split.val.iter().map(|c| c.volume.id.clone()).collect(),
        unlabelled_truth: unlabelled_truth.is_some(),
    };
    for case in split.labelled.iter().chain(&split.val) {
        save_volume(&case.volume, &volumes.join(&case.volume.id))?;
        save_mask(&case.mask, &case.volume.id, &masks.join(&case.volume.id))?;
    }
    for (i, vol) in split.unlabelled.iter().enumerate() {
        save_volume(vol, &volumes.join(&vol.id))?;
        if let Some(truth) = unlabelled_truth {
            save_mask(&truth[i], &vol.id, &masks.join(&vol.id))?;
        }
    }
    fs::write(
        dir.join("split.toml"),
        toml::to_string(&manifest).expect("manifest serialises"),
    )?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> CliResult<(DatasetSplit, Option<Vec<LabelMask>>)> {
    let manifest: SplitManifest = read_manifest(&dir.join("split").with_extension("toml"))?;
    let volumes = dir.join("volumes");
    let masks = dir.join("masks");
    let load_case = |id: &String| -> CliResult<LabelledCase> {
        Ok(LabelledCase {
            volume: load_volume(&volumes.join(id))?,
            mask: load_mask(&masks.join(id))?,
        })
    };
    let labelled: Vec<LabelledCase> =
        manifest.labelled.iter().map(load_case).collect::<CliResult<_>>()?;
    let val: Vec<LabelledCase> = manifest.val.iter().map(load_case).collect::<CliResult<_>>()?;
    let unlabelled: Vec<Volume> = manifest
        .unlabelled
        .iter()
        .map(|id| load_volume(&volumes.join(id)))
        .collect::<CliResult<_>>()?;
    let truth = if manifest.unlabelled_truth {
        Some(
            manifest
                .unlabelled
                .iter()
                .map(|id| load_mask(&masks.join(id)))
                .collect::<CliResult<Vec<_>>>()?,
        )
    } else {
        None
    };
    let split = DatasetSplit { labelled, unlabelled, val };
    split.validate()?;
    for case in split.labelled.iter().chain(&split.val) {
        if case.volume.dims() != case.mask.dims() {
            return Err(CliError::Data(format!(
                "case {}: volume/mask dims differ",
                case.volume.id
            )));
        }
        if case.mask.num_classes() != manifest.num_classes {
            return Err(CliError::Data(format!(
                "case {}: num_classes differs from split manifest",
                case.volume.id
            )));
        }
    }
    Ok((split, truth))
}

/// An exclusive marker file making a run directory single-owner; dropped
/// (and the file removed) when the run finishes.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> CliResult<RunLock> {
        let path = run_dir.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Config(format!(
                    "run directory {} is locked by another run (delete {} if it is stale)",
                    run_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Data(format!(
                "cannot create lock in {}: {e}",
                run_dir.display()
            ))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use protoseg_core::volume::{generate_synthetic_dataset_with_truth, SynthConfig};

    fn random_volume(seed: u64, dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|i| ((i as f64 * 0.7391 + seed as f64 * 1.31).sin() * 1.7) as f32)
            .collect();
        Volume::new(format!("case-{seed}"), Dims3(dims[0], dims[1], dims[2]), spacing, data)
            .unwrap()
    }

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(3, [16, 16, 16], [0.625, 0.625, 0.625]);
        let base = dir.path().join("v");
        save_volume(&v, &base).unwrap();
        let back = load_volume(&base).unwrap();
        assert_eq!(v.id, back.id);
        assert_eq!(v.dims(), back.dims());
        assert_eq!(v.spacing(), back.spacing(), "exact spacing survives");
        assert_eq!(v.data(), back.data(), "voxels are bit-identical");
    }

    #[test]
    fn truncated_volume_buffer_is_a_corrupt_file_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(4, [8, 8, 8], [1.0, 1.0, 1.0]);
        let base = dir.path().join("v");
        save_volume(&v, &base).unwrap();
        let raw = base.with_extension("f32raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_volume(&base).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("corrupt"), "{err}");
    }

    #[test]
    fn mask_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let classes: Vec<u8> = (0..512).map(|i| ((i * 7 + 3) % 3) as u8).collect();
        let mask = LabelMask::new(Dims3(8, 8, 8), 3, classes).unwrap();
        let base = dir.path().join("m");
        save_mask(&mask, "m", &base).unwrap();
        let back = load_mask(&base).unwrap();
        assert_eq!(mask, back);
        fs::write(base.with_extension("u8raw"), b"short").unwrap();
        assert_eq!(load_mask(&base).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn dataset_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            num_labelled: 2,
            num_unlabelled: 3,
            num_val: 1,
            dims: [16, 16, 16],
            ..SynthConfig::default()
        };
        let (split, truth) = generate_synthetic_dataset_with_truth(&synth).unwrap();
        save_dataset(dir.path(), &split, Some(&truth)).unwrap();
        let (back, back_truth) = load_dataset(dir.path()).unwrap();
        assert_eq!(split.labelled.len(), back.labelled.len());
        assert_eq!(split.unlabelled.len(), back.unlabelled.len());
        assert_eq!(split.val.len(), back.val.len());
        for (a, b) in split.labelled.iter().zip(&back.labelled) {
            assert_eq!(a.volume.data(), b.volume.data());
            assert_eq!(a.mask, b.mask);
        }
        for (a, b) in split.unlabelled.iter().zip(&back.unlabelled) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(truth, back_truth.unwrap());
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        let second = RunLock::acquire(dir.path()).unwrap_err();
        assert_eq!(second.exit_code(), 2);
        drop(lock);
        let _third = RunLock::acquire(dir.path()).unwrap();
    }
}
