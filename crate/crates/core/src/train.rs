//! Student training loop.
//!
//! Each optimizer step draws `batch_size` samples from a seeded shuffle,
//! applies a random split-and-flip to image and target, and minimizes the
//! compound loss. With `lambda_consistency > 0` a second, always
//! non-identity split-flip `t` is drawn per sample and the squared
//! difference between `f(t(x))` and `t(f(x))` is added.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, apply_maybe, sample_transform, SplitFlipTransform};
use crate::checkpoint::Checkpoint;
use crate::data::{save_prob_map, BinaryMask, DatasetManifest, ImagePatch, ProbMap, Split};
use crate::error::{Error, Result};
use crate::eval::{confusion, dice};
use crate::losses::{compound_loss, compound_loss_grad, consistency_loss_grad, LossConfig};
use crate::model::{Gradients, StudentModel};
use crate::optim::{OptimizerConfig, RmsProp};

/// Threshold used for validation Dice and model selection.
pub const SELECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: Vec<SplitFlipTransform>,
    pub p_identity: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: SplitFlipTransform::ALL.to_vec(),
            p_identity: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Replace `steps_per_epoch` by `ceil(n_train / batch_size)`.
    pub full_pass: bool,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub validation_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            steps_per_epoch: 4,
            full_pass: false,
            batch_size: 8,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            validation_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train: epochs must be at least 1".into()));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("train: steps_per_epoch must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be at least 1".into()));
        }
        if self.validation_interval == 0 {
            return Err(Error::Config("train: validation_interval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.augmentation.p_identity) {
            return Err(Error::Config("train: augmentation.p_identity must lie in [0, 1]".into()));
        }
        if self.loss.lambda_consistency > 0.0 && self.augmentation.enabled.is_empty() {
            return Err(Error::Config(
                "train: consistency regularization needs at least one enabled transform".into(),
            ));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }

    pub fn steps_for(&self, n_train: usize) -> usize {
        if self.full_pass {
            n_train.div_ceil(self.batch_size).max(1)
        } else {
            self.steps_per_epoch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean objective over the steps of each epoch.
    pub train_loss: Vec<f64>,
    /// `None` for epochs without validation.
    pub val_loss: Vec<Option<f64>>,
    pub val_dice: Vec<Option<f64>>,
    /// 0-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub epoch_seconds: Vec<f64>,
    /// Objective of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub optimizer_steps: usize,
}

impl TrainReport {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.val_dice == other.val_dice
            && self.best_epoch == other.best_epoch
            && self.step_losses == other.step_losses
            && self.optimizer_steps == other.optimizer_steps
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub report: TrainReport,
    /// Parameters at the best validation Dice (the last epoch when no
    /// validation data exists).
    pub best: Checkpoint,
}

/// Indexed access to `(image, target)` pairs.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<(ImagePatch, BinaryMask)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    pub samples: Vec<(ImagePatch, BinaryMask)>,
}

impl InMemorySource {
    pub fn new(samples: Vec<(ImagePatch, BinaryMask)>) -> Self {
        InMemorySource { samples }
    }

    /// Loads every record of `split`; each must carry a label.
    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let records: Vec<_> = manifest.split(split).collect();
        let samples = records
            .par_iter()
            .map(|r| {
                let image = manifest.load_image(r)?;
                let target = manifest.load_target(r)?;
                if image.shape() != target.shape() {
                    return Err(Error::Dimension(format!(
                        "{}: image {:?} vs label {:?}",
                        r.id(),
                        image.shape(),
                        target.shape()
                    )));
                }
                Ok((image, target))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InMemorySource { samples })
    }
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<(ImagePatch, BinaryMask)> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Training(format!("sample index {index} out of range")))
    }
}

/// Wraps a source and records every id handed out.
pub struct AuditedSource<S> {
    pub inner: S,
    pub accessed: Mutex<Vec<String>>,
}

impl<S: SampleSource> AuditedSource<S> {
    pub fn new(inner: S) -> Self {
        AuditedSource {
            inner,
            accessed: Mutex::new(Vec::new()),
        }
    }

    pub fn accessed_ids(&self) -> Vec<String> {
        self.accessed.lock().expect("audit lock").clone()
    }
}

impl<S: SampleSource> SampleSource for AuditedSource<S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn get(&self, index: usize) -> Result<(ImagePatch, BinaryMask)> {
        let sample = self.inner.get(index)?;
        self.accessed.lock().expect("audit lock").push(sample.0.id.clone());
        Ok(sample)
    }
}

/// Random choices for one sample of one step, drawn on the trainer thread.
#[derive(Debug, Clone, Copy)]
pub struct SampleDraw {
    pub augment: Option<SplitFlipTransform>,
    pub consistency: Option<SplitFlipTransform>,
    pub dropout_seeds: [u64; 2],
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub supervised: f64,
    pub consistency: f64,
    pub grads: Gradients,
}

impl SampleResult {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.supervised + lambda * self.consistency
    }
}

fn to_prob(id: &str, p: &Array2<f32>) -> ProbMap {
    ProbMap {
        id: id.to_string(),
        pixels: p.mapv(f64::from),
    }
}

/// Loss and parameter gradients for one sample. Dropout follows the model's
/// training flag.
pub fn sample_gradients(
    model: &StudentModel,
    image: &ImagePatch,
    target: &BinaryMask,
    draw: &SampleDraw,
    loss: &LossConfig,
) -> Result<SampleResult> {
    let seed = |i: usize| model.is_training().then_some(draw.dropout_seeds[i]);
    let x = apply_maybe(draw.augment, image)?;
    let y = apply_maybe(draw.augment, target)?;
    let (p, cache) = model.forward_sample(&x.pixels, seed(0))?;
    let pm = to_prob(&x.id, &p);
    let sup = compound_loss_grad(&y, &pm, loss)?;
    let mut grad_p = sup.grad;
    let lambda = loss.lambda_consistency;
    let mut consistency = 0.0;
    let mut grads = match draw.consistency.filter(|_| lambda > 0.0) {
        Some(t) => {
            let xt = apply(t, &x)?;
            let (q, cache_q) = model.forward_sample(&xt.pixels, seed(1))?;
            let (value, grad_q, grad_tp) = consistency_loss_grad(&to_prob(&x.id, &q), &apply(t, &pm)?)?;
            consistency = value;
            // t is its own inverse, so it also maps gradients back
            grad_p.scaled_add(lambda, &apply(t, &grad_tp)?);
            let mut g = model.backward(&cache_q, &grad_q.mapv(|v| (lambda * v) as f32))?;
            g.add_assign(&model.backward(&cache, &grad_p.mapv(|v| v as f32))?);
            g
        }
        None => model.backward(&cache, &grad_p.mapv(|v| v as f32))?,
    };
    if !(sup.value.is_finite() && consistency.is_finite()) {
        grads.scale(f32::NAN);
    }
    Ok(SampleResult {
        supervised: sup.value,
        consistency,
        grads,
    })
}

/// Mean compound loss and mean Dice at [`SELECTION_THRESHOLD`], dropout off.
pub fn validate(model: &StudentModel, source: &dyn SampleSource, loss: &LossConfig) -> Result<(f64, f64)> {
    let n = source.len();
    if n == 0 {
        return Err(Error::Training("validation set is empty".into()));
    }
    let per: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = source.get(i)?;
            let (p, _) = model.forward_sample(&x.pixels, None)?;
            let pm = to_prob(&x.id, &p);
            let l = compound_loss(&y, &pm, loss)?;
            let d = dice(&confusion(&pm.threshold(SELECTION_THRESHOLD), &y)?);
            Ok((l, d))
        })
        .collect::<Result<_>>()?;
    let nf = n as f64;
    Ok((
        per.iter().map(|v| v.0).sum::<f64>() / nf,
        per.iter().map(|v| v.1).sum::<f64>() / nf,
    ))
}

/// Endless seeded shuffle over `0..n`, reshuffled after every pass.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, rng: &mut ChaCha8Rng, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn save_checkpoint(dir: Option<&Path>, name: &str, ck: &Checkpoint) -> Result<()> {
    match dir {
        Some(dir) => ck.save(&dir.join(name)),
        None => Ok(()),
    }
}

/// Trains `model` in place. On return the model holds the final parameters;
/// the selected snapshot is in [`FitOutcome::best`] and, with a
/// `checkpoint_dir`, in `best.ckpt` (plus `last.ckpt`).
pub fn fit(
    model: &mut StudentModel,
    train: &dyn SampleSource,
    val: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let ckdir = cfg.checkpoint_dir.as_deref();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(train.len());
    let mut opt = RmsProp::new(cfg.optimizer, model.parameters().iter().map(|p| p.1.len()));
    let steps = cfg.steps_for(train.len());
    let lambda = cfg.loss.lambda_consistency;

    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_dice: Vec::new(),
        best_epoch: 0,
        epoch_seconds: Vec::new(),
        step_losses: Vec::new(),
        optimizer_steps: 0,
    };
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.optimizer.learning_rate_at(epoch);
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let batch = sampler.next_batch(&mut rng, cfg.batch_size);
            let draws: Vec<SampleDraw> = batch
                .iter()
                .map(|_| SampleDraw {
                    augment: sample_transform(&mut rng, cfg.augmentation.p_identity, &cfg.augmentation.enabled),
                    consistency: sample_transform(&mut rng, 0.0, &cfg.augmentation.enabled),
                    dropout_seeds: [rng.random(), rng.random()],
                })
                .collect();
            model.set_training(true);
            let frozen = &*model;
            let results: Vec<SampleResult> = batch
                .par_iter()
                .zip(&draws)
                .map(|(&i, draw)| {
                    let (x, y) = train.get(i)?;
                    sample_gradients(frozen, &x, &y, draw, &cfg.loss)
                })
                .collect::<Result<_>>()?;
            model.set_training(false);

            let bs = results.len() as f64;
            let loss = results.iter().map(|r| r.objective(lambda)).sum::<f64>() / bs;
            if !loss.is_finite() {
                let last_good = Checkpoint::capture(model, epoch, Some(&opt));
                save_checkpoint(ckdir, "last_good.ckpt", &last_good)?;
                return Err(Error::Training(format!(
                    "non-finite loss at optimizer step {} (epoch {epoch})",
                    opt.steps + 1
                )));
            }
            let mut total = Gradients::zeros_like(model);
            for r in &results {
                total.add_assign(&r.grads);
            }
            total.scale((1.0 / bs) as f32);
            let grads = total.slices();
            opt.step(model.parameters_mut(), &grads, lr)?;
            report.step_losses.push(loss);
            epoch_loss += loss;
        }
        report.train_loss.push(epoch_loss / steps as f64);

        let is_last = epoch + 1 == cfg.epochs;
        let due = (epoch + 1) % cfg.validation_interval == 0 || is_last;
        let (vl, vd) = if due && !val.is_empty() {
            let (l, d) = validate(model, val, &cfg.loss)?;
            (Some(l), Some(d))
        } else {
            (None, None)
        };
        report.val_loss.push(vl);
        report.val_dice.push(vd);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());

        let improved = match (vd, &best) {
            (Some(d), Some((b, _))) => d > *b,
            (Some(_), None) => true,
            (None, _) => val.is_empty() && is_last,
        };
        if improved {
            let ck = Checkpoint::capture(model, epoch + 1, Some(&opt));
            save_checkpoint(ckdir, "best.ckpt", &ck)?;
            report.best_epoch = epoch;
            best = Some((vd.unwrap_or(f64::NEG_INFINITY), ck));
        }
    }
    report.optimizer_steps = opt.steps;
    save_checkpoint(ckdir, "last.ckpt", &Checkpoint::capture(model, cfg.epochs, Some(&opt)))?;
    let best = match best {
        Some((_, ck)) => ck,
        None => Checkpoint::capture(model, cfg.epochs, Some(&opt)),
    };
    Ok(FitOutcome { report, best })
}

/// Loads the labeled train and val splits of `manifest` and runs [`fit`].
/// Test records are never read.
pub fn fit_manifest(model: &mut StudentModel, manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if let Some(r) = manifest
        .records
        .iter()
        .find(|r| matches!(r.split, Split::Train | Split::Val) && !r.is_labeled())
    {
        return Err(Error::Manifest(format!(
            "{} record {} has no label; generate pseudo-labels first",
            r.split,
            r.id()
        )));
    }
    let train = InMemorySource::from_manifest(manifest, Split::Train)?;
    let val = InMemorySource::from_manifest(manifest, Split::Val)?;
    fit(model, &train, &val, cfg)
}

/// Writes one 16-bit probability map `<id>.png` per record of `split`.
pub fn predict_split(model: &StudentModel, manifest: &DatasetManifest, split: Split, out_dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records: Vec<_> = manifest.split(split).collect();
    records.par_iter().try_for_each(|r| {
        let mut patch = manifest.load_image(r)?;
        patch.id = r.id();
        let prob = model.predict(&patch)?;
        save_prob_map(&prob, &out_dir.join(format!("{}.png", r.id())))
    })?;
    Ok(records.len())
}
