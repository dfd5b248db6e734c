//! Teachers and pseudo-label generation.
//!
//! A teacher yields an instance map per image id; its binarization (any
//! nonzero label is foreground) becomes the student's target.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_instance_map, load_label, load_prob_map, save_mask, BinaryMask, DatasetManifest, InstanceMap, LabelKind,
    Split,
};
use crate::error::{Error, Result};

pub const PSEUDO_DIR: &str = "labels_pseudo";
const RASTER_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherAdapter {
    /// Precomputed teacher output, one raster per image id in `dir`.
    FileBased {
        dir: PathBuf,
        /// Read outputs as probability maps and keep pixels `>= threshold`.
        #[serde(default)]
        prob_threshold: Option<f64>,
    },
    /// Ground-truth instance maps from `source_dir` with a seeded fraction of
    /// instances removed.
    SyntheticCorruptor {
        source_dir: PathBuf,
        drop_fraction: f64,
        seed: u64,
    },
}

fn find_raster(dir: &Path, id: &str) -> Option<PathBuf> {
    RASTER_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// FNV-1a, used to give every image its own corruption stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl TeacherAdapter {
    pub fn validate(&self) -> Result<()> {
        match self {
            TeacherAdapter::FileBased { dir, prob_threshold } => {
                if !dir.is_dir() {
                    return Err(Error::Config(format!("teacher directory {} does not exist", dir.display())));
                }
                if let Some(t) = prob_threshold {
                    if !(0.0..=1.0).contains(t) {
                        return Err(Error::Config("teacher prob_threshold must lie in [0, 1]".into()));
                    }
                }
            }
            TeacherAdapter::SyntheticCorruptor {
                source_dir,
                drop_fraction,
                ..
            } => {
                if !source_dir.is_dir() {
                    return Err(Error::Config(format!(
                        "teacher source directory {} does not exist",
                        source_dir.display()
                    )));
                }
                if !(0.0..=1.0).contains(drop_fraction) {
                    return Err(Error::Config("drop_fraction must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Teacher output for `id`.
    pub fn instance_map(&self, id: &str) -> Result<InstanceMap> {
        let (dir, missing) = match self {
            TeacherAdapter::FileBased { dir, .. } => (dir, "teacher output"),
            TeacherAdapter::SyntheticCorruptor { source_dir, .. } => (source_dir, "source instance map"),
        };
        let path = find_raster(dir, id)
            .ok_or_else(|| Error::Distill(format!("no {missing} for image {id} in {}", dir.display())))?;
        let mut map = match self {
            TeacherAdapter::FileBased {
                prob_threshold: Some(t),
                ..
            } => {
                let mask = load_prob_map(&path)?.threshold(*t);
                InstanceMap::new(id, mask.pixels.mapv(u32::from))
            }
            TeacherAdapter::FileBased { .. } => match load_label(&path, None)? {
                crate::data::LoadedMask::Instance(m) => m,
                crate::data::LoadedMask::Binary(m) => InstanceMap::new(id, m.pixels.mapv(u32::from)),
            },
            TeacherAdapter::SyntheticCorruptor {
                drop_fraction, seed, ..
            } => corrupt_instances(&load_instance_map(&path)?, *drop_fraction, seed ^ fnv1a(id)),
        };
        map.id = id.to_string();
        Ok(map)
    }

    pub fn pseudo_label(&self, id: &str) -> Result<BinaryMask> {
        Ok(self.instance_map(id)?.to_binary())
    }
}

/// Removes `round(p * K)` of the `K` instances, chosen uniformly with `seed`.
/// Surviving labels keep their pixels and values.
pub fn corrupt_instances(truth: &InstanceMap, p: f64, seed: u64) -> InstanceMap {
    let p = p.clamp(0.0, 1.0);
    let mut labels = truth.labels();
    let drop = (p * labels.len() as f64).round() as usize;
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dropped = labels[..drop].to_vec();
    dropped.sort_unstable();
    let pixels = truth
        .pixels
        .mapv(|v| if dropped.binary_search(&v).is_ok() { 0 } else { v });
    InstanceMap::new(truth.id.clone(), pixels)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PseudoLabelCounts {
    pub train: usize,
    pub val: usize,
}

/// Writes `out_root/labels_pseudo/<id>.png` for every train/val record not
/// labeled with ground truth and returns the updated manifest (same root as
/// the input). Re-running with the same teacher rewrites identical files.
pub fn generate_pseudo_labels(
    teacher: &TeacherAdapter,
    manifest: &DatasetManifest,
    out_root: &Path,
) -> Result<(DatasetManifest, PseudoLabelCounts)> {
    teacher.validate()?;
    let out_dir = out_root.join(PSEUDO_DIR);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let todo: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r.split, Split::Train | Split::Val) && r.label_kind != LabelKind::GroundTruth)
        .map(|(i, _)| i)
        .collect();
    let written: Vec<(usize, PathBuf)> = todo
        .par_iter()
        .map(|&i| {
            let record = &manifest.records[i];
            let id = record.id();
            let mask = teacher.pseudo_label(&id)?;
            let image_path = manifest.resolve(&record.image_path);
            let (w, h) = image::image_dimensions(&image_path)
                .map_err(|e| Error::format(&image_path, e.to_string()))?;
            if mask.shape() != (h as usize, w as usize) {
                return Err(Error::Distill(format!(
                    "teacher output for {id} is {:?} but the image is {:?}",
                    mask.shape(),
                    (h, w)
                )));
            }
            let path = out_dir.join(format!("{id}.png"));
            save_mask(&mask, &path)?;
            Ok((i, path))
        })
        .collect::<Result<_>>()?;

    let root_abs = std::path::absolute(&manifest.root).map_err(|e| Error::io(&manifest.root, e))?;
    let mut updated = manifest.clone();
    let mut counts = PseudoLabelCounts::default();
    for (i, path) in written {
        let abs = std::path::absolute(&path).map_err(|e| Error::io(&path, e))?;
        let stored = abs.strip_prefix(&root_abs).map(Path::to_path_buf).unwrap_or(abs);
        let r = &mut updated.records[i];
        r.label_path = Some(stored);
        r.label_kind = LabelKind::PseudoLabel;
        match r.split {
            Split::Train => counts.train += 1,
            _ => counts.val += 1,
        }
    }
    Ok((updated, counts))
}
