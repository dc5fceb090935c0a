//! Frozen encoder stand-ins behind small trait interfaces.
//!
//! All three encoders are seeded random projections over structured inputs.
//! Real backbones can implement the same traits and be registered by name.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::math;
use crate::nn::Adapter;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::{normal_vec, seeded, Rng};
use crate::synthdata::AudioSignature;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub audio: String,
    pub visual: String,
    pub text: String,
    pub d_a: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub seed: u64,
    /// Std of per-clip Gaussian noise added to audio features.
    pub clip_noise: f64,
    /// Norm of the reserved silence embedding relative to a category
    /// embedding; 0 makes silence the zero vector.
    pub silence_scale: f64,
    pub patch: usize,
    pub levels: usize,
    /// Adapter bottleneck is `dim / adapter_ratio`.
    pub adapter_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            audio: "toy".into(),
            visual: "toy".into(),
            text: "toy".into(),
            d_a: 128,
            d_v: 64,
            d_t: 64,
            seed: 0x5eed_a0d1,
            clip_noise: 0.15,
            silence_scale: 0.0,
            patch: 4,
            levels: 3,
            adapter_ratio: 4,
        }
    }
}

// ---------------------------------------------------------------------------
// Audio

/// One row per one-second clip, `[T, d_A]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioFeature {
    pub values: Tensor,
}

impl AudioFeature {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }
}

pub trait AudioEncoder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn silence(&self) -> &[f64];
    /// Mean per-element power of the category embeddings.
    fn signal_power(&self) -> f64;
    fn encode(&self, signature: &AudioSignature, frames: usize) -> Result<AudioFeature>;
}

/// Sums fixed random category embeddings weighted by the signature counts.
#[derive(Clone, Debug)]
pub struct ToyAudioEncoder {
    dim: usize,
    categories: Tensor,
    silence: Vec<f64>,
    clip_noise: f64,
}

impl ToyAudioEncoder {
    pub fn new(categories: usize, config: &EncoderConfig) -> Self {
        let d = config.d_a;
        let mut rng = seeded(derive_seed(config.seed, "audio", 0));
        let table = Tensor::from_vec(&[categories, d], normal_vec(&mut rng, categories * d, 1.0));
        let silence = if config.silence_scale == 0.0 {
            vec![0.0; d]
        } else {
            normal_vec(&mut rng, d, config.silence_scale)
        };
        Self { dim: d, categories: table, silence, clip_noise: config.clip_noise }
    }

    pub fn category_embedding(&self, index: usize) -> &[f64] {
        self.categories.row(index)
    }

    pub fn categories(&self) -> usize {
        self.categories.rows()
    }

    fn frame_row(&self, sig: &AudioSignature, t: usize) -> Vec<f64> {
        if let Some(snr_db) = sig.wgn_snr_db {
            let std = math::sqrt(wgn_variance(self.signal_power(), snr_db));
            let seed = derive_seed(sig.noise_seed.unwrap_or(0), "wgn", t as u64);
            let noise = normal_vec(&mut seeded(seed), self.dim, std);
            return self.silence.iter().zip(noise).map(|(s, n)| s + n).collect();
        }
        let mut row = if sig.is_silent() {
            self.silence.clone()
        } else {
            let mut acc = vec![0.0; self.dim];
            for (c, &k) in sig.counts.iter().enumerate() {
                for (a, e) in acc.iter_mut().zip(self.categories.row(c)) {
                    *a += f64::from(k) * e;
                }
            }
            acc
        };
        if let (Some(seed), true) = (sig.noise_seed, self.clip_noise > 0.0) {
            let noise = normal_vec(&mut seeded(derive_seed(seed, "clip", t as u64)), self.dim, self.clip_noise);
            row.iter_mut().zip(noise).for_each(|(r, n)| *r += n);
        }
        row
    }
}

/// Noise variance that puts `signal_power` at `snr_db` decibels above it.
pub fn wgn_variance(signal_power: f64, snr_db: f64) -> f64 {
    signal_power / libm::pow(10.0, snr_db / 10.0)
}

impl AudioEncoder for ToyAudioEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn silence(&self) -> &[f64] {
        &self.silence
    }

    fn signal_power(&self) -> f64 {
        let d = self.categories.data();
        d.iter().map(|x| x * x).sum::<f64>() / d.len().max(1) as f64
    }

    fn encode(&self, signature: &AudioSignature, frames: usize) -> Result<AudioFeature> {
        if frames < 1 {
            return Err(Error::Input("audio needs at least one frame".into()));
        }
        if signature.counts.len() != self.categories() {
            return Err(Error::Input(format!(
                "signature has {} categories, encoder expects {}",
                signature.counts.len(),
                self.categories()
            )));
        }
        let mut data = Vec::with_capacity(frames * self.dim);
        for t in 0..frames {
            data.extend(self.frame_row(signature, t));
        }
        Ok(AudioFeature { values: Tensor::from_vec(&[frames, self.dim], data) })
    }
}

// ---------------------------------------------------------------------------
// Visual

/// Multi-scale feature map; each level is `[d_V, H_l, W_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap {
    pub levels: Vec<Tensor>,
    pub source_size: (usize, usize),
}

/// Frozen patch-embedding backbone: level 0 embeds `patch x patch` patches,
/// every further level average-pools the previous one 2x2 and re-projects.
#[derive(Clone, Debug)]
pub struct ToyVisualBackbone {
    pub dim: usize,
    pub patch: usize,
    pub image_size: (usize, usize),
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl ToyVisualBackbone {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, image_size: (usize, usize)) -> Result<Self> {
        let (h, w) = image_size;
        let p = config.patch;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("patch {p} does not tile {h}x{w}")));
        }
        if config.levels == 0 || (h / p) >> (config.levels - 1) == 0 || (w / p) >> (config.levels - 1) == 0 {
            return Err(Error::Config("too many pyramid levels for the image size".into()));
        }
        let mut rng = seeded(derive_seed(config.seed, "visual", 0));
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..config.levels {
            let fan_in = if l == 0 { 3 * p * p } else { config.d_v };
            let std = 2.0 / math::sqrt(fan_in as f64);
            let wt = Tensor::from_vec(&[fan_in, config.d_v], normal_vec(&mut rng, fan_in * config.d_v, std));
            weights.push(store.add(format!("backbone.level{l}.weight"), ParamGroup::Frozen, wt));
            let b = Tensor::from_vec(&[config.d_v], normal_vec(&mut rng, config.d_v, 0.1));
            biases.push(store.add(format!("backbone.level{l}.bias"), ParamGroup::Frozen, b));
        }
        Ok(Self { dim: config.d_v, patch: p, image_size, weights, biases })
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    /// Grid size `(H_l, W_l)` of each level.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let (h, w) = self.image_size;
        ((h / self.patch) >> level, (w / self.patch) >> level)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w) = self.image_size;
        if image.shape() != [3, h, w] {
            return Err(Error::Shape(format!("expected image [3, {h}, {w}], got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Token-major backbone output on the tape: level `l` is
    /// `[H_l * W_l, d_V]`, rows in raster order.
    pub fn forward(&self, t: &mut Tape, image: &Tensor) -> Result<Vec<Var>> {
        self.check_image(image)?;
        let patches = t.constant(patchify(image, self.patch));
        let mut out = Vec::with_capacity(self.levels());
        let mut x = patches;
        for l in 0..self.levels() {
            if l > 0 {
                let (gh, gw) = self.grid(l - 1);
                let pool = t.constant(pool_matrix(gh, gw));
                x = t.matmul(pool, x);
            }
            let w = t.param(self.weights[l]);
            let b = t.param(self.biases[l]);
            let y = t.matmul(x, w);
            let y = t.add_row(y, b);
            x = t.tanh(y);
            out.push(x);
        }
        Ok(out)
    }

    /// Token-major features outside any training graph, for caching.
    pub fn features(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut t = Tape::new(store);
        let vars = self.forward(&mut t, image)?;
        Ok(vars.into_iter().map(|v| t.value(v).clone()).collect())
    }
}

/// `[3, H, W]` image to `[(H/p)*(W/p), 3*p*p]` centered patch rows.
pub fn patchify(image: &Tensor, p: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (gh, gw) = (h / p, w / p);
    let cols = 3 * p * p;
    let mut data = vec![0.0; gh * gw * cols];
    let src = image.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut data[(gy * gw + gx) * cols..(gy * gw + gx + 1) * cols];
            let mut k = 0;
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        row[k] = src[c * h * w + (gy * p + dy) * w + gx * p + dx] - 0.5;
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, cols], data)
}

/// 2x2 average pooling of a raster-ordered `gh x gw` token grid as a dense
/// `[(gh/2)*(gw/2), gh*gw]` matrix.
pub fn pool_matrix(gh: usize, gw: usize) -> Tensor {
    let (oh, ow) = (gh / 2, gw / 2);
    let mut m = Tensor::zeros(&[oh * ow, gh * gw]);
    for y in 0..oh {
        for x in 0..ow {
            let r = m.row_mut(y * ow + x);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                r[(2 * y + dy) * gw + 2 * x + dx] = 0.25;
            }
        }
    }
    m
}

/// Adapters at the visual-attention output site, one per pyramid level.
#[derive(Clone, Debug)]
pub struct VisualAdapters {
    pub levels: Vec<Adapter>,
}

impl VisualAdapters {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, levels: usize, dim: usize, ratio: usize) -> Self {
        let levels = (0..levels)
            .map(|l| Adapter::new(store, rng, &format!("adapters.visual_attention_out.{l}"), ParamGroup::Adapter, dim, ratio))
            .collect();
        Self { levels }
    }

    /// Applies the adapters to token-major backbone features.
    pub fn forward(&self, t: &mut Tape, levels: &[Var]) -> Vec<Var> {
        levels.iter().zip(&self.levels).map(|(&x, a)| a.forward(t, x)).collect()
    }
}

/// Adapted visual features in `[d_V, H_l, W_l]` layout.
pub fn encode_visual(
    store: &ParamStore,
    backbone: &ToyVisualBackbone,
    adapters: &VisualAdapters,
    image: &Tensor,
) -> Result<VisualFeatureMap> {
    let mut t = Tape::new(store);
    let raw = backbone.forward(&mut t, image)?;
    let adapted = adapters.forward(&mut t, &raw);
    let levels = adapted
        .iter()
        .enumerate()
        .map(|(l, &v)| {
            let (gh, gw) = backbone.grid(l);
            t.value(v).transpose2().reshaped(&[backbone.dim, gh, gw])
        })
        .collect();
    Ok(VisualFeatureMap { levels, source_size: backbone.image_size })
}

// ---------------------------------------------------------------------------
// Text

/// `N_T` cue embeddings; invalid rows are zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextFeature {
    pub values: Tensor,
    pub valid: Vec<bool>,
    pub sentences: Vec<String>,
}

impl TextFeature {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// The sentence a cue is embedded as.
pub fn cue_sentence(cue: &str) -> String {
    format!("This is a {cue}.")
}

pub trait TextEncoder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, sentence: &str) -> Vec<f64>;
}

/// Bag of hashed word vectors, L2-normalized.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(config: &EncoderConfig) -> Self {
        Self { dim: config.d_t, seed: derive_seed(config.seed, "text", 0) }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, sentence: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for word in sentence.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let lower = word.to_lowercase();
            let v = normal_vec(&mut seeded(derive_seed(self.seed, &lower, 0)), self.dim, 1.0);
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
        let n = math::sqrt(acc.iter().map(|x| x * x).sum::<f64>());
        if n > 0.0 {
            acc.iter_mut().for_each(|x| *x /= n);
        }
        acc
    }
}

/// Wraps each cue in the sentence template, embeds it, and pads with zero rows
/// or truncates to `n_t`.
pub fn encode_text_cues(encoder: &dyn TextEncoder, cues: &[String], n_t: usize) -> TextFeature {
    let d = encoder.dim();
    let mut values = Tensor::zeros(&[n_t, d]);
    let mut valid = vec![false; n_t];
    let mut sentences = Vec::new();
    for (i, cue) in cues.iter().take(n_t).enumerate() {
        let s = cue_sentence(cue);
        values.row_mut(i).copy_from_slice(&encoder.embed(&s));
        valid[i] = true;
        sentences.push(s);
    }
    TextFeature { values, valid, sentences }
}

// ---------------------------------------------------------------------------
// Registry

pub fn audio_encoder(config: &EncoderConfig, categories: usize) -> Result<Box<dyn AudioEncoder>> {
    match config.audio.as_str() {
        "toy" => Ok(Box::new(ToyAudioEncoder::new(categories, config))),
        other => Err(Error::Config(format!("unknown audio encoder {other:?}"))),
    }
}

pub fn text_encoder(config: &EncoderConfig) -> Result<Box<dyn TextEncoder>> {
    match config.text.as_str() {
        "toy" => Ok(Box::new(ToyTextEncoder::new(config))),
        other => Err(Error::Config(format!("unknown text encoder {other:?}"))),
    }
}

pub fn visual_backbone(store: &mut ParamStore, config: &EncoderConfig, image_size: (usize, usize)) -> Result<ToyVisualBackbone> {
    match config.visual.as_str() {
        "toy" => ToyVisualBackbone::new(store, config, image_size),
        other => Err(Error::Config(format!("unknown visual encoder {other:?}"))),
    }
}

pub const ENCODER_NAMES: &[&str] = &["toy"];

pub fn known_encoder(name: &str) -> bool {
    ENCODER_NAMES.contains(&name)
}
