//! U-Net student.
//!
//! Layout for depth `d` and base width `b`:
//!
//! * encoder level `i` (`0..d`): conv3x3 -> ReLU -> conv3x3 -> ReLU -> dropout,
//!   output kept as skip, then 2x2 max pool (stride 2); width `b * 2^i`
//! * bottleneck: conv3x3 -> ReLU -> conv3x3 -> ReLU -> dropout; width `b * 2^d`
//! * decoder level `i` (`d-1..=0`): 2x nearest upsample, concat skip `i`,
//!   conv3x3 -> ReLU -> conv3x3 -> ReLU -> dropout; width `b * 2^i`
//! * head: conv1x1 -> sigmoid
//!
//! Inputs are zero-padded (bottom/right) to a multiple of `2^d` and the
//! output is cropped back to the input size.

pub mod layers;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use layers::{Conv2d, ConvGrad};

use crate::data::{ImagePatch, ProbMap};
use crate::error::{Error, Result};

pub const CONV_KERNEL: usize = 3;
pub const POOL_KERNEL: usize = 2;
const MAX_SCHEDULED_RATE: f64 = 0.9;

/// Layerwise dropout rates: `0.1, 0.2, ...` down the encoder, `0.1 * (depth + 1)`
/// at the bottleneck, mirrored back up the decoder.
pub fn dropout_schedule(depth: usize) -> Result<Vec<f64>> {
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    let peak = 0.1 * (depth + 1) as f64;
    if peak > MAX_SCHEDULED_RATE + 1e-12 {
        return Err(Error::Config(format!(
            "dropout schedule for depth {depth} peaks at {peak:.1} > {MAX_SCHEDULED_RATE}; \
             set dropout_rates explicitly"
        )));
    }
    // integer tenths avoid accumulating 0.1 steps
    let rate = |k: usize| k as f64 / 10.0;
    let mut rates: Vec<f64> = (1..=depth + 1).map(rate).collect();
    rates.extend((1..=depth).rev().map(rate));
    Ok(rates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Overrides the derived schedule; must have `2 * depth + 1` entries.
    pub dropout_rates: Option<Vec<f64>>,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            depth: 4,
            base_channels: 16,
            in_channels: 3,
            out_channels: 1,
            dropout_rates: None,
        }
    }
}

/// One entry of the flattened block list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Conv { in_ch: usize, out_ch: usize, kernel: usize },
    Relu,
    Dropout(f64),
    MaxPool { kernel: usize, stride: usize },
    Upsample { factor: usize },
    ConcatSkip { level: usize },
    Sigmoid,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config("in_channels must be 1 or 3".into()));
        }
        if self.out_channels != 1 {
            return Err(Error::Config("only a single output channel is supported".into()));
        }
        self.rates().map(|_| ())
    }

    pub fn rates(&self) -> Result<Vec<f64>> {
        match &self.dropout_rates {
            None => dropout_schedule(self.depth),
            Some(r) => {
                if r.len() != 2 * self.depth + 1 {
                    return Err(Error::Config(format!(
                        "dropout_rates needs {} entries, got {}",
                        2 * self.depth + 1,
                        r.len()
                    )));
                }
                if r.iter().any(|p| !(0.0..1.0).contains(p)) {
                    return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
                }
                Ok(r.clone())
            }
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial multiple the padded input must satisfy.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Walks the block structure in forward order.
    pub fn architecture(&self) -> Result<Vec<Layer>> {
        let rates = self.rates()?;
        let d = self.depth;
        let mut out = Vec::new();
        let conv_pair = |out: &mut Vec<Layer>, cin: usize, cout: usize, rate: f64| {
            out.push(Layer::Conv { in_ch: cin, out_ch: cout, kernel: CONV_KERNEL });
            out.push(Layer::Relu);
            out.push(Layer::Conv { in_ch: cout, out_ch: cout, kernel: CONV_KERNEL });
            out.push(Layer::Relu);
            out.push(Layer::Dropout(rate));
        };
        let mut cin = self.in_channels;
        for level in 0..d {
            conv_pair(&mut out, cin, self.width(level), rates[level]);
            out.push(Layer::MaxPool { kernel: POOL_KERNEL, stride: POOL_KERNEL });
            cin = self.width(level);
        }
        conv_pair(&mut out, cin, self.width(d), rates[d]);
        for (k, level) in (0..d).rev().enumerate() {
            out.push(Layer::Upsample { factor: 2 });
            out.push(Layer::ConcatSkip { level });
            conv_pair(&mut out, self.width(level + 1) + self.width(level), self.width(level), rates[d + 1 + k]);
        }
        out.push(Layer::Conv { in_ch: self.width(0), out_ch: self.out_channels, kernel: 1 });
        out.push(Layer::Sigmoid);
        Ok(out)
    }

    pub fn conv_count(&self, kernel: usize) -> Result<usize> {
        Ok(self
            .architecture()?
            .iter()
            .filter(|l| matches!(l, Layer::Conv { kernel: k, .. } if *k == kernel))
            .count())
    }
}

/// Trainable parameter gradients, in the same order as the model's convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<ConvGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &StudentModel) -> Self {
        Gradients {
            convs: model.convs.iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.convs {
            g.weight *= factor;
            g.bias *= factor;
        }
    }

    /// Flat gradient slices named like [`StudentModel::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f32]> {
        self.convs
            .iter()
            .flat_map(|g| {
                [
                    g.weight.as_slice().expect("contiguous"),
                    g.bias.as_slice().expect("contiguous"),
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array3<f32>,
    act1: Array3<f32>,
    act2: Array3<f32>,
    mask: Option<Array3<f32>>,
}

/// Intermediate state recorded by [`StudentModel::forward_sample`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: Vec<BlockCache>,
    pool_args: Vec<Array3<u8>>,
    bottleneck: BlockCache,
    decoder: Vec<BlockCache>,
    head_input: Array3<f32>,
    probs_padded: Array2<f32>,
    out_shape: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct StudentModel {
    spec: UNetSpec,
    rates: Vec<f64>,
    /// encoder pairs, bottleneck pair, decoder pairs (deepest first), head
    convs: Vec<Conv2d>,
    training: bool,
    dropout_rng: ChaCha8Rng,
}

impl StudentModel {
    /// He-normal weights drawn from `seed`; zero biases.
    pub fn build(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let rates = spec.rates()?;
        let convs: Vec<Conv2d> = spec
            .architecture()?
            .into_iter()
            .filter_map(|l| match l {
                Layer::Conv { in_ch, out_ch, kernel } => Some(Conv2d::new(in_ch, out_ch, kernel)),
                _ => None,
            })
            .collect();
        let mut model = StudentModel {
            spec,
            rates,
            convs,
            training: false,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut model.convs {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            conv.weight.mapv_inplace(|_| normal.sample(&mut rng) as f32);
            conv.bias.fill(0.0);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn num_parameters(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    fn param_names(&self) -> Vec<String> {
        let d = self.spec.depth;
        let mut block_names = Vec::new();
        for level in 0..d {
            block_names.push(format!("enc{level}"));
        }
        block_names.push("bottleneck".to_string());
        for level in (0..d).rev() {
            block_names.push(format!("dec{level}"));
        }
        let mut names = Vec::new();
        for b in &block_names {
            for conv in ["conv1", "conv2"] {
                names.push(format!("{b}.{conv}.weight"));
                names.push(format!("{b}.{conv}.bias"));
            }
        }
        names.push("head.weight".to_string());
        names.push("head.bias".to_string());
        names
    }

    /// Named flat views of every parameter tensor.
    pub fn parameters(&self) -> Vec<(String, &[f32])> {
        self.param_names()
            .into_iter()
            .zip(self.convs.iter().flat_map(|c| {
                [
                    c.weight.as_slice().expect("contiguous"),
                    c.bias.as_slice().expect("contiguous"),
                ]
            }))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let names = self.param_names();
        names
            .into_iter()
            .zip(self.convs.iter_mut().flat_map(|c| {
                [
                    c.weight.as_slice_mut().expect("contiguous"),
                    c.bias.as_slice_mut().expect("contiguous"),
                ]
            }))
            .collect()
    }

    fn check_input(&self, x: &Array3<f32>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.spec.in_channels {
            return Err(Error::Dimension(format!(
                "model expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension("empty input".into()));
        }
        Ok(())
    }

    fn pad(&self, x: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        let m = self.spec.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            return x.as_standard_layout().into_owned();
        }
        let mut out = Array3::zeros((c, ph, pw));
        out.slice_mut(s![.., ..h, ..w]).assign(x);
        out
    }

    fn run_block(
        &self,
        block: usize,
        input: Array3<f32>,
        rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array3<f32>, BlockCache) {
        let (c1, c2) = (&self.convs[2 * block], &self.convs[2 * block + 1]);
        let mut act1 = c1.forward(&input);
        layers::relu_inplace(&mut act1);
        let mut act2 = c2.forward(&act1);
        layers::relu_inplace(&mut act2);
        let mask = match rng {
            Some(rng) if rate > 0.0 => Some(layers::dropout_mask(rng, act2.dim(), rate)),
            _ => None,
        };
        let out = match &mask {
            Some(m) => &act2 * m,
            None => act2.clone(),
        };
        (
            out,
            BlockCache {
                input,
                act1,
                act2,
                mask,
            },
        )
    }

    fn backward_block(&self, block: usize, cache: &BlockCache, mut grad: Array3<f32>, grads: &mut Gradients) -> Array3<f32> {
        if let Some(m) = &cache.mask {
            grad *= m;
        }
        layers::relu_backward_inplace(&mut grad, &cache.act2);
        let mut g1 = self.convs[2 * block + 1].backward(&cache.act1, &grad, &mut grads.convs[2 * block + 1]);
        layers::relu_backward_inplace(&mut g1, &cache.act1);
        self.convs[2 * block].backward(&cache.input, &g1, &mut grads.convs[2 * block])
    }

    /// Forward pass on one `(channels, height, width)` input. Dropout is
    /// applied iff `dropout_seed` is given. Returns probabilities cropped to
    /// the input size and the cache needed by [`StudentModel::backward`].
    pub fn forward_sample(&self, x: &Array3<f32>, dropout_seed: Option<u64>) -> Result<(Array2<f32>, ForwardCache)> {
        self.check_input(x)?;
        let (_, h, w) = x.dim();
        let d = self.spec.depth;
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);

        let mut current = self.pad(x);
        let mut encoder = Vec::with_capacity(d);
        let mut pool_args = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        for level in 0..d {
            let (out, cache) = self.run_block(level, current, self.rates[level], rng.as_mut());
            let (pooled, arg) = layers::max_pool2(&out);
            skips.push(out);
            encoder.push(cache);
            pool_args.push(arg);
            current = pooled;
        }
        let (mut current, bottleneck) = self.run_block(d, current, self.rates[d], rng.as_mut());
        let mut decoder = Vec::with_capacity(d);
        for (k, level) in (0..d).rev().enumerate() {
            let up = layers::upsample2(&current);
            let cat = layers::concat_channels(&up, &skips[level]);
            let (out, cache) = self.run_block(d + 1 + k, cat, self.rates[d + 1 + k], rng.as_mut());
            decoder.push(cache);
            current = out;
        }
        let head = self.convs.last().expect("head conv");
        let logits = head.forward(&current);
        let probs_padded = logits.index_axis(ndarray::Axis(0), 0).mapv(layers::sigmoid);
        let probs = probs_padded.slice(s![..h, ..w]).to_owned();
        Ok((
            probs,
            ForwardCache {
                encoder,
                pool_args,
                bottleneck,
                decoder,
                head_input: current,
                probs_padded,
                out_shape: (h, w),
            },
        ))
    }

    /// Backpropagates `grad_probs` (gradient of the loss w.r.t. the cropped
    /// output probabilities) and returns parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_probs: &Array2<f32>) -> Result<Gradients> {
        if grad_probs.dim() != cache.out_shape {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match output {:?}",
                grad_probs.dim(),
                cache.out_shape
            )));
        }
        let d = self.spec.depth;
        let mut grads = Gradients::zeros_like(self);
        let (ph, pw) = cache.probs_padded.dim();
        let (h, w) = cache.out_shape;
        let mut g_logits = Array3::<f32>::zeros((1, ph, pw));
        {
            let mut view = g_logits.slice_mut(s![0, ..h, ..w]);
            ndarray::Zip::from(&mut view)
                .and(grad_probs)
                .and(cache.probs_padded.slice(s![..h, ..w]))
                .for_each(|gz, &gp, &p| *gz = gp * p * (1.0 - p));
        }
        let head_idx = self.convs.len() - 1;
        let mut grad = self.convs[head_idx].backward(&cache.head_input, &g_logits, &mut grads.convs[head_idx]);

        let mut skip_grads: Vec<Option<Array3<f32>>> = vec![None; d];
        for (k, level) in (0..d).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            let g_cat = self.backward_block(d + 1 + k, &cache.decoder[k], grad, &mut grads);
            let up_ch = self.spec.width(level + 1);
            let (g_up, g_skip) = layers::split_channels(&g_cat, up_ch);
            skip_grads[level] = Some(g_skip);
            grad = layers::upsample2_backward(&g_up);
        }
        grad = self.backward_block(d, &cache.bottleneck, grad, &mut grads);
        for level in (0..d).rev() {
            let skip_dim = cache.encoder[level].act2.dim();
            let mut g_out = layers::max_pool2_backward(&grad, &cache.pool_args[level], skip_dim);
            if let Some(gs) = skip_grads[level].take() {
                g_out += &gs;
            }
            grad = self.backward_block(level, &cache.encoder[level], g_out, &mut grads);
        }
        Ok(grads)
    }

    /// Replaces every parameter tensor; names and lengths must match.
    pub fn load_parameters(&mut self, params: &[(String, Vec<f32>)]) -> Result<()> {
        let mut slots = self.parameters_mut();
        if slots.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                params.len()
            )));
        }
        for ((name, slot), (src_name, values)) in slots.iter_mut().zip(params) {
            if name != src_name || slot.len() != values.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {src_name} ({} values) does not fit slot {name} ({} values)",
                    values.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(values);
        }
        Ok(())
    }

    /// Eval-mode prediction for one patch; safe to call concurrently.
    pub fn predict(&self, patch: &ImagePatch) -> Result<ProbMap> {
        let (probs, _) = self.forward_sample(&patch.pixels, None)?;
        Ok(ProbMap {
            id: patch.id.clone(),
            pixels: probs.mapv(f64::from),
        })
    }

    /// Batched forward. Dropout is active only in training mode, where each
    /// call draws fresh masks.
    pub fn forward(&mut self, batch: &[ImagePatch]) -> Result<Vec<ProbMap>> {
        if let Some(first) = batch.first() {
            let shape = first.pixels.dim();
            if let Some(bad) = batch.iter().find(|p| p.pixels.dim() != shape) {
                return Err(Error::Dimension(format!(
                    "batch mixes shapes {:?} and {:?}",
                    shape,
                    bad.pixels.dim()
                )));
            }
        }
        let seeds: Vec<Option<u64>> = batch
            .iter()
            .map(|_| self.training.then(|| self.dropout_rng.random()))
            .collect();
        let this = &*self;
        batch
            .par_iter()
            .zip(seeds)
            .map(|(patch, seed)| {
                let (probs, _) = this.forward_sample(&patch.pixels, seed)?;
                Ok(ProbMap {
                    id: patch.id.clone(),
                    pixels: probs.mapv(f64::from),
                })
            })
            .collect()
    }
}
