//! Dataset manifests, raster I/O and split construction.
//!
//! Image tensors are stored channel-first, `(channels, height, width)`, which
//! is the layout the convolution kernels consume. Masks and probability maps
//! are `(height, width)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported patch side: four 2x downsampling steps after padding.
pub const MIN_PATCH_SIDE: usize = 8;

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub id: String,
    /// `(channels, height, width)`, values in `[0, 1]`.
    pub pixels: Array3<f32>,
}

impl ImagePatch {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!("image must have 1 or 3 channels, got {c}")));
        }
        if h < MIN_PATCH_SIDE || w < MIN_PATCH_SIDE {
            return Err(Error::Dimension(format!(
                "image is {h}x{w}, both sides must be at least {MIN_PATCH_SIDE}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImagePatch {
            id: id.into(),
            pixels,
        })
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub id: String,
    /// Values in `{0, 1}`.
    pub pixels: Array2<u8>,
}

impl BinaryMask {
    pub fn new(id: impl Into<String>, pixels: Array2<u8>) -> Result<Self> {
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::Dimension("binary mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            id: id.into(),
            pixels,
        })
    }

    /// Nonzero pixels become foreground.
    pub fn from_nonzero<T: PartialEq + Default + Copy>(id: impl Into<String>, raw: &Array2<T>) -> Self {
        let zero = T::default();
        BinaryMask {
            id: id.into(),
            pixels: raw.mapv(|v| u8::from(v != zero)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub id: String,
    /// 0 is background, any other value is an instance id.
    pub pixels: Array2<u32>,
    instance_count: usize,
}

impl InstanceMap {
    pub fn new(id: impl Into<String>, pixels: Array2<u32>) -> Self {
        let instance_count = pixels.iter().filter(|&&v| v != 0).collect::<HashSet<_>>().len();
        InstanceMap {
            id: id.into(),
            pixels,
            instance_count,
        }
    }

    pub fn instance_count(&self) -> usize {
        self.instance_count
    }

    /// Distinct nonzero labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        self.pixels
            .iter()
            .filter(|&&v| v != 0)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn to_binary(&self) -> BinaryMask {
        BinaryMask::from_nonzero(self.id.clone(), &self.pixels)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Per-pixel foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub id: String,
    pub pixels: Array2<f64>,
}

impl ProbMap {
    pub fn new(id: impl Into<String>, pixels: Array2<f64>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbMap {
            id: id.into(),
            pixels,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Foreground where `p >= threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            id: self.id.clone(),
            pixels: self.pixels.mapv(|p| u8::from(p >= threshold)),
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        ProbMap {
            id: mask.id.clone(),
            pixels: mask.pixels.mapv(f64::from),
        }
    }
}

/// Identifier of a raster: the file stem.
pub fn id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Loads an 8- or 16-bit grayscale or RGB raster, rescaled to `[0, 1]` by the
/// format's maximum value. An alpha channel, when present, is discarded.
pub fn load_patch(path: &Path) -> Result<ImagePatch> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let id = id_from_path(path);
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[0]) / 255.0
        }),
        DynamicImage::ImageLumaA8(buf) => Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[0]) / 255.0
        }),
        DynamicImage::ImageLuma16(buf) => Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[0]) / 65535.0
        }),
        DynamicImage::ImageLumaA16(buf) => Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[0]) / 65535.0
        }),
        DynamicImage::ImageRgb8(buf) => Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[c]) / 255.0
        }),
        DynamicImage::ImageRgba8(buf) => Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[c]) / 255.0
        }),
        DynamicImage::ImageRgb16(buf) => Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[c]) / 65535.0
        }),
        DynamicImage::ImageRgba16(buf) => Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32)[c]) / 65535.0
        }),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported pixel format {:?}", other.color()),
            ))
        }
    };
    ImagePatch::new(id, pixels).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Binary,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadedMask {
    Binary(BinaryMask),
    Instance(InstanceMap),
}

impl LoadedMask {
    pub fn to_binary(&self) -> BinaryMask {
        match self {
            LoadedMask::Binary(m) => m.clone(),
            LoadedMask::Instance(m) => m.to_binary(),
        }
    }
}

enum RawMask {
    Eight(Array2<u8>),
    Sixteen(Array2<u16>),
}

fn load_raw_mask(path: &Path) -> Result<RawMask> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Ok(RawMask::Eight(Array2::from_shape_fn((h, w), |(y, x)| {
            buf.get_pixel(x as u32, y as u32)[0]
        }))),
        DynamicImage::ImageLuma16(buf) => {
            Ok(RawMask::Sixteen(Array2::from_shape_fn((h, w), |(y, x)| {
                buf.get_pixel(x as u32, y as u32)[0]
            })))
        }
        other => Err(Error::format(
            path,
            format!("mask must be single-channel 8/16-bit, got {:?}", other.color()),
        )),
    }
}

/// Loads a single-channel mask. `Binary` maps any nonzero pixel to 1;
/// `Instance` preserves raw integer labels.
pub fn load_mask(path: &Path, kind: MaskKind) -> Result<LoadedMask> {
    let id = id_from_path(path);
    let raw = load_raw_mask(path)?;
    Ok(match (kind, raw) {
        (MaskKind::Binary, RawMask::Eight(a)) => LoadedMask::Binary(BinaryMask::from_nonzero(id, &a)),
        (MaskKind::Binary, RawMask::Sixteen(a)) => LoadedMask::Binary(BinaryMask::from_nonzero(id, &a)),
        (MaskKind::Instance, RawMask::Eight(a)) => {
            LoadedMask::Instance(InstanceMap::new(id, a.mapv(u32::from)))
        }
        (MaskKind::Instance, RawMask::Sixteen(a)) => {
            LoadedMask::Instance(InstanceMap::new(id, a.mapv(u32::from)))
        }
    })
}

/// Loads a label file, inferring its kind from the bit depth (16-bit is an
/// instance map, 8-bit is binary) unless `kind` overrides it.
pub fn load_label(path: &Path, kind: Option<MaskKind>) -> Result<LoadedMask> {
    match kind {
        Some(k) => load_mask(path, k),
        None => {
            let id = id_from_path(path);
            Ok(match load_raw_mask(path)? {
                RawMask::Eight(a) => LoadedMask::Binary(BinaryMask::from_nonzero(id, &a)),
                RawMask::Sixteen(a) => LoadedMask::Instance(InstanceMap::new(id, a.mapv(u32::from))),
            })
        }
    }
}

pub fn load_instance_map(path: &Path) -> Result<InstanceMap> {
    match load_mask(path, MaskKind::Instance)? {
        LoadedMask::Instance(m) => Ok(m),
        LoadedMask::Binary(_) => unreachable!(),
    }
}

pub fn load_binary_mask(path: &Path) -> Result<BinaryMask> {
    Ok(load_label(path, None)?.to_binary())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn save_buffer<P>(path: &Path, buf: ImageBuffer<P, Vec<P::Subpixel>>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    ensure_parent(path)?;
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Writes a binary mask as an 8-bit raster with values `{0, 255}`.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    let buf = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([mask.pixels[[y as usize, x as usize]] * 255])
    });
    save_buffer(path, buf)
}

/// Writes an instance map as a 16-bit raster.
pub fn save_instance_map(map: &InstanceMap, path: &Path) -> Result<()> {
    if let Some(&too_big) = map.pixels.iter().find(|&&v| v > u32::from(u16::MAX)) {
        return Err(Error::format(path, format!("label {too_big} does not fit in 16 bits")));
    }
    let (h, w) = map.shape();
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([map.pixels[[y as usize, x as usize]] as u16])
    });
    save_buffer(path, buf)
}

/// Writes a probability map as a 16-bit raster (`round(p * 65535)`).
pub fn save_prob_map(map: &ProbMap, path: &Path) -> Result<()> {
    let (h, w) = map.shape();
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let p = map.pixels[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(p * 65535.0).round() as u16])
    });
    save_buffer(path, buf)
}

/// Reads a single-channel raster as probabilities, dividing by the format maximum.
pub fn load_prob_map(path: &Path) -> Result<ProbMap> {
    let id = id_from_path(path);
    let pixels = match load_raw_mask(path)? {
        RawMask::Eight(a) => a.mapv(|v| f64::from(v) / 255.0),
        RawMask::Sixteen(a) => a.mapv(|v| f64::from(v) / 65535.0),
    };
    ProbMap::new(id, pixels)
}

/// Writes an RGB or grayscale patch as an 8-bit raster.
pub fn save_patch(patch: &ImagePatch, path: &Path) -> Result<()> {
    let (c, h, w) = patch.pixels.dim();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        let buf = ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([q(patch.pixels[[0, y as usize, x as usize]])])
        });
        save_buffer(path, buf)
    } else {
        let buf = ImageBuffer::<image::Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                q(patch.pixels[[0, y, x]]),
                q(patch.pixels[[1, y, x]]),
                q(patch.pixels[[2, y, x]]),
            ])
        });
        save_buffer(path, buf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    GroundTruth,
    PseudoLabel,
    None,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::GroundTruth => "ground_truth",
            LabelKind::PseudoLabel => "pseudo_label",
            LabelKind::None => "none",
        }
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(LabelKind::GroundTruth),
            "pseudo_label" => Ok(LabelKind::PseudoLabel),
            "none" => Ok(LabelKind::None),
            other => Err(Error::Manifest(format!("unknown label kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the manifest root unless absolute.
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub label_kind: LabelKind,
    pub split: Split,
}

impl ManifestRecord {
    pub fn id(&self) -> String {
        id_from_path(&self.image_path)
    }

    pub fn is_labeled(&self) -> bool {
        self.label_kind != LabelKind::None && self.label_path.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    image_path: String,
    label_path: String,
    label_kind: String,
    split: String,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_sizes(&self) -> BTreeMap<Split, usize> {
        let mut sizes: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for r in &self.records {
            *sizes.entry(r.split).or_default() += 1;
        }
        sizes
    }

    pub fn find(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id() == id)
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<ImagePatch> {
        load_patch(&self.resolve(&record.image_path))
    }

    /// Loads the record's label as a binary target.
    pub fn load_target(&self, record: &ManifestRecord) -> Result<BinaryMask> {
        let path = record
            .label_path
            .as_ref()
            .filter(|_| record.label_kind != LabelKind::None)
            .ok_or_else(|| Error::Manifest(format!("record {} has no label", record.id())))?;
        let mut mask = load_binary_mask(&self.resolve(path))?;
        mask.id = record.id();
        Ok(mask)
    }

    /// Checks that referenced files exist and that no image appears twice.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut missing = Vec::new();
        for r in &self.records {
            if !seen.insert(r.id()) {
                return Err(Error::Manifest(format!("record {} appears more than once", r.id())));
            }
            let img = self.resolve(&r.image_path);
            if !img.is_file() {
                missing.push(img.display().to_string());
            }
            if let Some(label) = &r.label_path {
                let label = self.resolve(label);
                if !label.is_file() {
                    missing.push(label.display().to_string());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(format!("missing files: {}", missing.join(", "))))
        }
    }

    /// Writes the manifest as CSV with columns
    /// `image_path,label_path,label_kind,split`.
    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            writer
                .serialize(CsvRecord {
                    image_path: path_to_string(&r.image_path),
                    label_path: r.label_path.as_deref().map(path_to_string).unwrap_or_default(),
                    label_kind: r.label_kind.as_str().to_string(),
                    split: r.split.as_str().to_string(),
                })
                .map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest CSV; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut records = Vec::new();
        for row in reader.deserialize::<CsvRecord>() {
            let row = row.map_err(|e| csv_error(path, e))?;
            records.push(ManifestRecord {
                image_path: PathBuf::from(row.image_path),
                label_path: (!row.label_path.is_empty()).then(|| PathBuf::from(row.label_path)),
                label_kind: row.label_kind.parse()?,
                split: row.split.parse()?,
            });
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let manifest = DatasetManifest { root, records };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Re-expresses every path relative to `new_root`; paths outside it
    /// become absolute.
    pub fn rebase(&self, new_root: &Path) -> Result<DatasetManifest> {
        let new_root_abs = std::path::absolute(new_root).map_err(|e| Error::io(new_root, e))?;
        let move_path = |p: &Path| -> Result<PathBuf> {
            let full = std::path::absolute(self.resolve(p)).map_err(|e| Error::io(p, e))?;
            Ok(match full.strip_prefix(&new_root_abs) {
                Ok(rel) => rel.to_path_buf(),
                Err(_) => full,
            })
        };
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(ManifestRecord {
                    image_path: move_path(&r.image_path)?,
                    label_path: r.label_path.as_deref().map(move_path).transpose()?,
                    label_kind: r.label_kind,
                    split: r.split,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest {
            root: new_root.to_path_buf(),
            records,
        })
    }

    /// Clears labels of every record in the given splits.
    pub fn strip_labels(&mut self, splits: &[Split]) {
        for r in self.records.iter_mut().filter(|r| splits.contains(&r.split)) {
            r.label_path = None;
            r.label_kind = LabelKind::None;
        }
    }
}

fn path_to_string(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Manifest(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    /// Fractions of the whole dataset.
    Fractions { train: f64, val: f64, test: f64 },
    /// A fixed test list; `train` and `val` are fractions of the remaining pool.
    TestList {
        train: f64,
        val: f64,
        test_ids: Vec<String>,
    },
}

const FLOOR_SLACK: f64 = 1e-9;

fn floor_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction + FLOOR_SLACK).floor() as usize
}

fn check_fractions(fracs: &[f64]) -> Result<()> {
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f) || f.is_nan()) {
        return Err(Error::Config(format!("split fractions must lie in [0, 1], got {fracs:?}")));
    }
    if fracs.iter().sum::<f64>() > 1.0 + FLOOR_SLACK {
        return Err(Error::Config(format!("split fractions sum above 1: {fracs:?}")));
    }
    Ok(())
}

/// Split sizes for `n` items. Each split gets `floor(n * fraction)`; when the
/// fractions sum to 1 the leftover items go to train, otherwise they are
/// left unassigned.
pub fn split_sizes(n: usize, train: f64, val: f64, test: f64) -> Result<(usize, usize, usize)> {
    check_fractions(&[train, val, test])?;
    let v = floor_count(n, val);
    let t = floor_count(n, test);
    let tr = if (train + val + test - 1.0).abs() <= FLOOR_SLACK {
        n - v - t
    } else {
        floor_count(n, train)
    };
    Ok((tr, v, t))
}

/// Scans `root/images` and `root/labels` (matched by file stem) and assigns a
/// seeded split. With `require_labels`, images lacking a label are an error.
pub fn build_manifest(
    root: &Path,
    split_spec: &SplitSpec,
    seed: u64,
    require_labels: bool,
) -> Result<DatasetManifest> {
    let images = list_rasters(&root.join("images"))?;
    let labels_dir = root.join("labels");
    let labels: BTreeMap<String, PathBuf> = if labels_dir.is_dir() {
        list_rasters(&labels_dir)?
            .into_iter()
            .map(|p| (id_from_path(&p), p))
            .collect()
    } else {
        BTreeMap::new()
    };

    let unmatched: Vec<String> = images
        .iter()
        .map(|p| id_from_path(p))
        .filter(|id| !labels.contains_key(id))
        .collect();
    if require_labels && !unmatched.is_empty() {
        return Err(Error::Manifest(format!(
            "images without matching label: {}",
            unmatched.join(", ")
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: Vec<(PathBuf, Split)> = Vec::with_capacity(images.len());
    match split_spec {
        SplitSpec::Fractions { train, val, test } => {
            let mut pool = images.clone();
            pool.shuffle(&mut rng);
            let (tr, v, t) = split_sizes(pool.len(), *train, *val, *test)?;
            let mut it = pool.into_iter();
            assigned.extend(it.by_ref().take(tr).map(|p| (p, Split::Train)));
            assigned.extend(it.by_ref().take(v).map(|p| (p, Split::Val)));
            assigned.extend(it.take(t).map(|p| (p, Split::Test)));
        }
        SplitSpec::TestList { train, val, test_ids } => {
            check_fractions(&[*train, *val])?;
            let wanted: HashSet<&str> = test_ids.iter().map(String::as_str).collect();
            let present: HashSet<String> = images.iter().map(|p| id_from_path(p)).collect();
            let absent: Vec<&str> = test_ids
                .iter()
                .map(String::as_str)
                .filter(|id| !present.contains(*id))
                .collect();
            if !absent.is_empty() {
                return Err(Error::Manifest(format!("test ids not found: {}", absent.join(", "))));
            }
            let (test, mut pool): (Vec<PathBuf>, Vec<PathBuf>) = images
                .iter()
                .cloned()
                .partition(|p| wanted.contains(id_from_path(p).as_str()));
            pool.shuffle(&mut rng);
            let (tr, v, _) = split_sizes(pool.len(), *train, *val, 1.0 - train - val)?;
            let mut it = pool.into_iter();
            assigned.extend(it.by_ref().take(tr).map(|p| (p, Split::Train)));
            assigned.extend(it.take(v).map(|p| (p, Split::Val)));
            assigned.extend(test.into_iter().map(|p| (p, Split::Test)));
        }
    }

    let records = assigned
        .into_iter()
        .map(|(image, split)| {
            let id = id_from_path(&image);
            let label = labels.get(&id);
            ManifestRecord {
                image_path: image.strip_prefix(root).map(Path::to_path_buf).unwrap_or(image),
                label_path: label.map(|l| l.strip_prefix(root).map(Path::to_path_buf).unwrap_or(l.clone())),
                label_kind: if label.is_some() {
                    LabelKind::GroundTruth
                } else {
                    LabelKind::None
                },
                split,
            }
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        records,
    })
}

/// Raster files in `dir`, sorted by name.
fn list_rasters(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    fn write_gray16(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u16) {
        ImageBuffer::<Luma<u16>, _>::from_fn(w, h, |x, y| Luma([f(x, y)]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn rgb8_patch_shape() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.png");
        ImageBuffer::<image::Rgb<u8>, _>::from_fn(256, 256, |x, y| image::Rgb([x as u8, y as u8, 7]))
            .save(&path)
            .unwrap();
        let p = load_patch(&path).unwrap();
        assert_eq!((p.height(), p.width(), p.channels()), (256, 256, 3));
        assert_eq!(p.id, "a");
        assert_eq!(p.pixels[[0, 0, 255]], 1.0);
    }

    #[test]
    fn zero_image_loads_as_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("z.png");
        ImageBuffer::<Luma<u8>, _>::new(16, 16).save(&path).unwrap();
        let p = load_patch(&path).unwrap();
        assert!(p.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_bit_max_is_one() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.tif");
        write_gray16(&path, 8, 8, |x, y| if (x, y) == (3, 2) { 65535 } else { 1000 });
        let p = load_patch(&path).unwrap();
        assert_eq!(p.pixels[[0, 2, 3]], 1.0);
        assert!((p.pixels[[0, 0, 0]] - 1000.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_patch(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn tiny_image_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.png");
        ImageBuffer::<Luma<u8>, _>::new(4, 4).save(&path).unwrap();
        assert!(matches!(load_patch(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn two_level_mask_binarizes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.png");
        ImageBuffer::<Luma<u8>, _>::from_fn(8, 8, |x, _| Luma([if x < 4 { 0 } else { 255 }]))
            .save(&path)
            .unwrap();
        let m = load_mask(&path, MaskKind::Binary).unwrap().to_binary();
        assert_eq!(m.foreground_count(), 32);
        assert!(m.pixels.iter().all(|&v| v <= 1));
    }

    #[test]
    fn instance_labels_counted() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("i.png");
        write_gray16(&path, 8, 8, |x, _| match x {
            0..=2 => 0,
            3..=5 => 3,
            _ => 7,
        });
        match load_mask(&path, MaskKind::Instance).unwrap() {
            LoadedMask::Instance(m) => {
                assert_eq!(m.instance_count(), 2);
                assert_eq!(m.labels(), vec![3, 7]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_masks() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.png");
        write_gray16(&path, 8, 8, |_, _| 0);
        assert!(load_mask(&path, MaskKind::Binary).unwrap().to_binary().is_empty());
        match load_mask(&path, MaskKind::Instance).unwrap() {
            LoadedMask::Instance(m) => assert_eq!(m.instance_count(), 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multichannel_mask_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        ImageBuffer::<image::Rgb<u8>, _>::new(8, 8).save(&path).unwrap();
        assert!(matches!(load_mask(&path, MaskKind::Binary), Err(Error::Format { .. })));
    }

    #[test]
    fn label_kind_inferred_from_depth() {
        let dir = tempdir().unwrap();
        let p16 = dir.path().join("a.png");
        write_gray16(&p16, 8, 8, |x, _| x as u16);
        assert!(matches!(load_label(&p16, None).unwrap(), LoadedMask::Instance(_)));
        assert!(matches!(
            load_label(&p16, Some(MaskKind::Binary)).unwrap(),
            LoadedMask::Binary(_)
        ));
        let p8 = dir.path().join("b.png");
        ImageBuffer::<Luma<u8>, _>::new(8, 8).save(&p8).unwrap();
        assert!(matches!(load_label(&p8, None).unwrap(), LoadedMask::Binary(_)));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempdir().unwrap();
        let m = BinaryMask::new("r", array![[0u8, 1, 1], [1, 0, 0], [0, 0, 1]]).unwrap();
        let path = dir.path().join("r.png");
        save_mask(&m, &path).unwrap();
        let back = load_mask(&path, MaskKind::Binary).unwrap().to_binary();
        assert_eq!(back, m);
        let again = dir.path().join("r2.png");
        save_mask(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

        let inst = InstanceMap::new("i", array![[0u32, 500, 500], [9, 0, 0]]);
        let ipath = dir.path().join("i.png");
        save_instance_map(&inst, &ipath).unwrap();
        assert_eq!(load_instance_map(&ipath).unwrap(), inst);
    }

    #[test]
    fn large_dataset_split_arithmetic() {
        // floor(0.08 * 621) = 49, floor(0.2 * 621) = 124, train takes the rest
        assert_eq!(split_sizes(621, 0.72, 0.08, 0.20).unwrap(), (448, 49, 124));
        assert_eq!(split_sizes(10, 1.0, 0.0, 0.0).unwrap(), (10, 0, 0));
        assert_eq!(split_sizes(8000, 0.875, 0.125, 0.0).unwrap(), (7000, 1000, 0));
        assert!(split_sizes(10, 0.8, 0.3, 0.0).is_err());
    }

    #[test]
    fn split_sizes_sum_to_n() {
        for n in 0..200 {
            for (a, b) in [(0.7, 0.1), (0.33, 0.33), (0.5, 0.25), (0.9, 0.05)] {
                let (tr, v, t) = split_sizes(n, a, b, 1.0 - a - b).unwrap();
                assert_eq!(tr + v + t, n);
            }
        }
    }

    fn toy_root(n: usize, with_labels: usize) -> tempfile::TempDir {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("labels")).unwrap();
        for i in 0..n {
            let name = format!("img_{i:03}.png");
            ImageBuffer::<Luma<u8>, _>::new(8, 8)
                .save(dir.path().join("images").join(&name))
                .unwrap();
            if i < with_labels {
                ImageBuffer::<Luma<u8>, _>::new(8, 8)
                    .save(dir.path().join("labels").join(&name))
                    .unwrap();
            }
        }
        dir
    }

    #[test]
    fn identity_split_and_determinism() {
        let root = toy_root(10, 10);
        let spec = SplitSpec::Fractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let a = build_manifest(root.path(), &spec, 3, true).unwrap();
        assert_eq!(a.split_sizes()[&Split::Train], 10);
        let b = build_manifest(root.path(), &spec, 3, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_permute_with_same_sizes() {
        let root = toy_root(40, 40);
        let spec = SplitSpec::Fractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        let a = build_manifest(root.path(), &spec, 1, true).unwrap();
        let b = build_manifest(root.path(), &spec, 2, true).unwrap();
        assert_eq!(a.split_sizes(), b.split_sizes());
        assert_ne!(a, b);
        let ids: HashSet<String> = a.records.iter().map(|r| r.id()).collect();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn missing_labels_reported() {
        let root = toy_root(5, 3);
        let spec = SplitSpec::Fractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        match build_manifest(root.path(), &spec, 0, true) {
            Err(Error::Manifest(msg)) => {
                assert!(msg.contains("img_003") && msg.contains("img_004"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = build_manifest(root.path(), &spec, 0, false).unwrap();
        assert_eq!(m.records.iter().filter(|r| !r.is_labeled()).count(), 2);
    }

    #[test]
    fn explicit_test_list() {
        let root = toy_root(20, 20);
        let spec = SplitSpec::TestList {
            train: 0.75,
            val: 0.25,
            test_ids: vec!["img_000".into(), "img_019".into()],
        };
        let m = build_manifest(root.path(), &spec, 9, true).unwrap();
        let test: Vec<String> = m.split(Split::Test).map(|r| r.id()).collect();
        assert_eq!(test, vec!["img_000", "img_019"]);
        assert_eq!(m.split_sizes()[&Split::Val], 4);
        assert_eq!(m.split_sizes()[&Split::Train], 14);
    }

    #[test]
    fn manifest_csv_round_trip() {
        let root = toy_root(6, 6);
        let spec = SplitSpec::Fractions {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let mut m = build_manifest(root.path(), &spec, 4, true).unwrap();
        m.strip_labels(&[Split::Train]);
        let path = root.path().join("manifest.csv");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn manifest_with_missing_file_fails_validation() {
        let root = toy_root(2, 2);
        let path = root.path().join("manifest.csv");
        let m = DatasetManifest {
            root: root.path().to_path_buf(),
            records: vec![ManifestRecord {
                image_path: "images/ghost.png".into(),
                label_path: None,
                label_kind: LabelKind::None,
                split: Split::Train,
            }],
        };
        m.save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest(_))));
    }
}
