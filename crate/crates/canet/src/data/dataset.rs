//! On-disk dataset layout: `images/NNNNN.ppm`, `labels/NNNNN.pgm` and a
//! `manifest.txt` with one id per line.

use std::fs;
use std::path::{Path, PathBuf};

use super::{generate_scene, pnm, Sample, SceneSpec};
use crate::error::{Error, Result};

pub struct Dataset {
    root: PathBuf,
    ids: Vec<String>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = root.join("manifest.txt");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let ids = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
        Ok(Dataset { root: root.to_path_buf(), ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join("images").join(format!("{}.ppm", self.ids[index]))
    }

    pub fn label_path(&self, index: usize) -> PathBuf {
        self.root.join("labels").join(format!("{}.pgm", self.ids[index]))
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let image = pnm::read_ppm(&self.image_path(index))?;
        let label = pnm::read_pgm(&self.label_path(index))?;
        Ok(Sample::new(image, label))
    }
}

/// Generates `count` samples of `spec` into `dir`. Rerunning with the same
/// spec produces identical files.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: u64) -> Result<()> {
    spec.validate()?;
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let id = format!("{i:05}");
        let sample = generate_scene(spec, i)?;
        pnm::write_ppm(&images.join(format!("{id}.ppm")), &sample.image)?;
        pnm::write_pgm(&labels.join(format!("{id}.pgm")), &sample.label)?;
        manifest.push_str(&id);
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_open_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { canvas: 24, ..SceneSpec::default() };
        write_dataset(dir.path(), &spec, 4).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 4);
        let sample = ds.load(2).unwrap();
        let direct = generate_scene(&spec, 2).unwrap();
        assert_eq!(sample.label.data(), direct.label.data());
        // Images round-trip through 8-bit quantization.
        for (a, b) in sample.image.data().iter().zip(direct.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn zero_count_writes_manifest_only() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &SceneSpec::default(), 0).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn rerun_produces_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = SceneSpec { canvas: 16, ..SceneSpec::default() };
        write_dataset(d1.path(), &spec, 3).unwrap();
        write_dataset(d2.path(), &spec, 3).unwrap();
        for name in ["manifest.txt", "images/00001.ppm", "labels/00001.pgm"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }
}
