//! Synthetic nuclei patches: non-overlapping ellipses with Gaussian texture
//! on a noisy background, paired with 16-bit instance maps.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_manifest, save_instance_map, save_patch, DatasetManifest, ImagePatch, InstanceMap, Split, SplitSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    /// Side length of the square patches.
    pub size: usize,
    pub nuclei_min: usize,
    pub nuclei_max: usize,
    /// Range of ellipse semi-axes, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub split: SplitSpec,
    /// Drop train/val labels from the manifest so they must come from a teacher.
    pub strip_train_labels: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 12,
            size: 64,
            nuclei_min: 5,
            nuclei_max: 10,
            radius_min: 3.0,
            radius_max: 6.0,
            channels: 3,
            noise_std: 0.05,
            seed: 0,
            split: SplitSpec::Fractions {
                train: 0.72,
                val: 0.08,
                test: 0.20,
            },
            strip_train_labels: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config("synth: size must be at least 8".into()));
        }
        if self.nuclei_min > self.nuclei_max {
            return Err(Error::Config("synth: nuclei_min exceeds nuclei_max".into()));
        }
        if !(self.radius_min >= 1.0 && self.radius_min <= self.radius_max) {
            return Err(Error::Config("synth: need 1 <= radius_min <= radius_max".into()));
        }
        if 2.0 * self.radius_max + 2.0 > self.size as f64 {
            return Err(Error::Config("synth: radius_max too large for the patch size".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("synth: channels must be 1 or 3".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("synth: noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

const BACKGROUND_RGB: [f32; 3] = [0.92, 0.78, 0.86];
const NUCLEUS_RGB: [f32; 3] = [0.36, 0.22, 0.52];
const BACKGROUND_GRAY: f32 = 0.85;
const NUCLEUS_GRAY: f32 = 0.30;

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }

    fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let r = self.a.max(self.b).ceil() as isize + 1;
        let (cy, cx) = (self.cy.round() as isize, self.cx.round() as isize);
        let mut out = Vec::new();
        for y in (cy - r).max(0)..=(cy + r).min(size as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(size as isize - 1) {
                if self.contains(y as f64, x as f64) {
                    out.push((y as usize, x as usize));
                }
            }
        }
        out
    }
}

/// True when `(y, x)` or any 8-neighbour already carries a label.
fn touches(labels: &Array2<u32>, y: usize, x: usize) -> bool {
    let (h, w) = labels.dim();
    (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| labels[[yy, xx]] != 0))
}

/// Generates one patch and its instance map from `seed`.
pub fn generate_sample(cfg: &SynthConfig, id: &str, seed: u64) -> Result<(ImagePatch, InstanceMap)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    let target = rng.random_range(cfg.nuclei_min..=cfg.nuclei_max);
    let mut labels = Array2::<u32>::zeros((n, n));
    let mut placed = 0u32;
    let mut attempts = 0;
    while (placed as usize) < target {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS * target.max(1) {
            return Err(Error::Config(format!(
                "synth: could not place {target} non-overlapping nuclei in a {n}x{n} patch"
            )));
        }
        let a = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let b = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a.max(b);
        let e = Ellipse {
            cy: rng.random_range(margin..n as f64 - margin),
            cx: rng.random_range(margin..n as f64 - margin),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let px = e.pixels(n);
        if px.is_empty() || px.iter().any(|&(y, x)| touches(&labels, y, x)) {
            continue;
        }
        placed += 1;
        for (y, x) in px {
            labels[[y, x]] = placed;
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    // per-nucleus stain strength
    let strength: Vec<f32> = (0..=placed).map(|_| rng.random_range(0.85..1.15)).collect();
    let mut pixels = Array3::<f32>::zeros((cfg.channels, n, n));
    for y in 0..n {
        for x in 0..n {
            let l = labels[[y, x]] as usize;
            for c in 0..cfg.channels {
                let (bg, fg) = if cfg.channels == 1 {
                    (BACKGROUND_GRAY, NUCLEUS_GRAY)
                } else {
                    (BACKGROUND_RGB[c], NUCLEUS_RGB[c])
                };
                let base = if l == 0 { bg } else { fg * strength[l] };
                let jitter = if cfg.noise_std > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                pixels[[c, y, x]] = (base + jitter).clamp(0.0, 1.0);
            }
        }
    }
    Ok((ImagePatch::new(id, pixels)?, InstanceMap::new(id, labels)))
}

pub fn sample_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Per-sample seeds derived from the run seed.
fn sample_seeds(cfg: &SynthConfig) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count).map(|_| rng.random()).collect()
}

/// In-memory dataset, in index order.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<(ImagePatch, InstanceMap)>> {
    cfg.validate()?;
    sample_seeds(cfg)
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| generate_sample(cfg, &sample_id(i), s))
        .collect()
}

/// Writes `root/images/<id>.png`, `root/labels/<id>.png` (16-bit instance
/// maps) and `root/manifest.csv`.
pub fn write_dataset(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    let samples = generate(cfg)?;
    samples.par_iter().try_for_each(|(img, map)| {
        save_patch(img, &root.join("images").join(format!("{}.png", img.id)))?;
        save_instance_map(map, &root.join("labels").join(format!("{}.png", map.id)))
    })?;
    let mut manifest = build_manifest(root, &cfg.split, cfg.seed, true)?;
    if cfg.strip_train_labels {
        manifest.strip_labels(&[Split::Train, Split::Val]);
    }
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}
