//! Procedural miniature audio-visual benchmark.
//!
//! Every sample is one frame holding a few flat-colored objects. An object is
//! *audible* when its category can make sound and *sounding* when it is making
//! sound in this frame; the ground-truth mask covers sounding objects only.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub audible: bool,
    pub color: [u8; 3],
    pub shape: Shape,
}

impl CategorySpec {
    fn new(name: &str, audible: bool, color: [u8; 3], shape: Shape) -> Self {
        Self { name: name.to_string(), audible, color, shape }
    }
}

/// Ordered category list; class id of entry `i` is `i + 1` (0 is background).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub categories: Vec<CategorySpec>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        use Shape::*;
        Self {
            categories: vec![
                CategorySpec::new("man", true, [230, 180, 140], Circle),
                CategorySpec::new("guitar", true, [200, 90, 20], Triangle),
                CategorySpec::new("dog", true, [140, 90, 50], Rectangle),
                CategorySpec::new("car", true, [220, 30, 40], Rectangle),
                CategorySpec::new("piano", true, [245, 245, 245], Rectangle),
                CategorySpec::new("bird", true, [40, 160, 230], Triangle),
                CategorySpec::new("chair", false, [60, 170, 70], Triangle),
                CategorySpec::new("lamp", false, [240, 220, 40], Circle),
            ],
        }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn class_id(&self, name: &str) -> Option<u8> {
        self.index_of(name).map(|i| (i + 1) as u8)
    }

    pub fn get(&self, name: &str) -> Option<&CategorySpec> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn is_audible(&self, name: &str) -> bool {
        self.get(name).is_some_and(|c| c.audible)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: String,
    pub shape: Shape,
    /// Top-left corner of the bounding square, in pixels.
    pub x: usize,
    pub y: usize,
    /// Side of the bounding square, in pixels.
    pub size: usize,
    pub is_audible: bool,
    pub is_sounding: bool,
}

impl ObjectSpec {
    /// Whether pixel `(px, py)` lies in this object's footprint (pixel-center
    /// sampling).
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        let (x0, y0, s) = (self.x as f64, self.y as f64, self.size as f64);
        if cx < x0 || cy < y0 || cx > x0 + s || cy > y0 + s {
            return false;
        }
        match self.shape {
            Shape::Rectangle => true,
            Shape::Circle => {
                let r = s / 2.0;
                let (dx, dy) = (cx - (x0 + r), cy - (y0 + r));
                dx * dx + dy * dy <= r * r
            }
            Shape::Triangle => {
                // apex at top-center, base along the bottom edge
                let t = (cy - y0) / s;
                let half = t * s / 2.0;
                let mid = x0 + s / 2.0;
                (cx - mid).abs() <= half
            }
        }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.size > 0 && self.x + self.size <= width && self.y + self.size <= height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.size as f64 / 2.0, self.y as f64 + self.size as f64 / 2.0)
    }
}

/// Feature-level stand-in for a 1-second audio clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioSignature {
    /// How many sounding objects of each vocabulary category are heard.
    pub counts: Vec<u32>,
    /// Per-clip noise stream; `None` disables clip noise.
    pub noise_seed: Option<u64>,
    /// Replaces the content with white Gaussian noise at this SNR (dB).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wgn_snr_db: Option<f64>,
}

impl AudioSignature {
    pub fn silence(categories: usize) -> Self {
        Self { counts: vec![0; categories], noise_seed: None, wgn_snr_db: None }
    }

    pub fn is_silent(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn from_objects(vocab: &Vocabulary, objects: &[ObjectSpec], noise_seed: Option<u64>) -> Self {
        let mut counts = vec![0u32; vocab.len()];
        for o in objects.iter().filter(|o| o.is_sounding) {
            if let Some(i) = vocab.index_of(&o.category) {
                counts[i] += 1;
            }
        }
        Self { counts, noise_seed, wgn_snr_db: None }
    }
}

/// RGB image stored row-major, interleaved (`[H, W, 3]` bytes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&color);
        }
        Self { height, width, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Channel-first `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = f64::from(self.pixels[p * 3 + c]) / 255.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data)
    }
}

pub const BACKGROUND: [u8; 3] = [48, 48, 56];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub id: String,
    pub image: Image,
    pub objects: Vec<ObjectSpec>,
    pub audio_signature: AudioSignature,
    /// Class index per pixel, row-major `[H, W]`; 0 is background.
    pub gt_mask: Vec<u8>,
    /// Seconds offset of this frame within its clip.
    pub frame_index: usize,
    /// Seed for caption phrasing.
    pub caption_seed: u64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn sounding_categories(&self) -> Vec<String> {
        self.objects.iter().filter(|o| o.is_sounding).map(|o| o.category.clone()).collect()
    }

    pub fn has_silent_audible(&self) -> bool {
        self.objects.iter().any(|o| o.is_audible && !o.is_sounding)
    }

    pub fn is_fully_silent(&self) -> bool {
        self.gt_mask.iter().all(|&c| c == 0)
    }

    pub fn binary_gt(&self) -> Vec<bool> {
        self.gt_mask.iter().map(|&c| c != 0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub vocabulary: Vocabulary,
    /// Probability that an audible object is silent in its frame.
    pub silent_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Probability that a sample is fully silent. Other samples are drawn
    /// conditioned on holding at least one sounding object whenever
    /// `silent_fraction < 1`.
    pub fully_silent_fraction: f64,
    /// Clip length in seconds; frames are sampled once per second.
    pub clip_seconds: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            train: 200,
            val: 40,
            test: 60,
            height: 64,
            width: 64,
            vocabulary: Vocabulary::default(),
            silent_fraction: 0.4,
            min_objects: 1,
            max_objects: 3,
            min_size: 16,
            max_size: 26,
            fully_silent_fraction: 0.1,
            clip_seconds: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        for (name, v) in [("silent_fraction", self.silent_fraction), ("fully_silent_fraction", self.fully_silent_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.min_objects > self.max_objects || self.max_objects > self.vocabulary.len() {
            return Err(Error::Config("object count range is invalid for this vocabulary".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return Err(Error::Config("object size range does not fit the image".into()));
        }
        if self.clip_seconds == 0 {
            return Err(Error::Config("clip_seconds must be at least 1".into()));
        }
        let mut names = self.vocabulary.names();
        names.sort();
        names.dedup();
        if names.len() != self.vocabulary.len() {
            return Err(Error::Config("vocabulary has duplicate names".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitData {
    pub split: Split,
    pub samples: Vec<SceneSample>,
}

/// Index of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub generation_seed: u64,
    pub vocabulary: Vec<String>,
    pub splits: Vec<(Split, Vec<String>)>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// A fully materialized benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: GenerationConfig,
    pub seed: u64,
    pub splits: Vec<SplitData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneSample] {
        self.splits.iter().find(|s| s.split == split).map(|s| s.samples.as_slice()).unwrap_or(&[])
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            generation_seed: self.seed,
            vocabulary: self.config.vocabulary.names(),
            splits: self
                .splits
                .iter()
                .map(|s| (s.split, s.samples.iter().map(|x| x.id.clone()).collect()))
                .collect(),
        }
    }
}

/// Which special composition a sample must have.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Forced {
    None,
    FullySilent,
    SilentAudible,
}

pub fn generate_dataset(config: &GenerationConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let n = config.count(split);
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let forced = match i {
                0 => Forced::FullySilent,
                1 if config.silent_fraction > 0.0 => Forced::SilentAudible,
                _ => Forced::None,
            };
            samples.push(generate_sample(config, seed, split, i, forced)?);
        }
        splits.push(SplitData { split, samples });
    }
    Ok(Dataset { config: config.clone(), seed, splits })
}

fn generate_sample(config: &GenerationConfig, seed: u64, split: Split, index: usize, forced: Forced) -> Result<SceneSample> {
    let sample_seed = derive_seed(seed, split.name(), index as u64);
    let mut rng = seeded(sample_seed);
    let vocab = &config.vocabulary;
    let silent_sample = match forced {
        Forced::FullySilent => true,
        Forced::SilentAudible => false,
        Forced::None => rng.random_bool(config.fully_silent_fraction),
    };
    let can_sound = !silent_sample && config.silent_fraction < 1.0 && vocab.categories.iter().any(|c| c.audible);
    let mut n_obj = rng.random_range(config.min_objects..=config.max_objects);
    if forced == Forced::SilentAudible {
        n_obj = n_obj.max(2.min(config.max_objects));
    }
    let audible_needed = match forced {
        Forced::SilentAudible => n_obj.min(2),
        _ => usize::from(can_sound),
    };
    let audible_total = vocab.categories.iter().filter(|c| c.audible).count();
    let mut cats: Vec<usize> = (0..vocab.len()).collect();
    loop {
        shuffle(&mut cats, &mut rng);
        let audible = cats[..n_obj].iter().filter(|&&c| vocab.categories[c].audible).count();
        if audible >= audible_needed.min(audible_total) {
            break;
        }
    }
    cats.truncate(n_obj);

    let mut objects: Vec<ObjectSpec> = Vec::new();
    for &c in &cats {
        let spec = &vocab.categories[c];
        let Some((x, y, size)) = place(config, &objects, &mut rng) else { continue };
        objects.push(ObjectSpec {
            category: spec.name.clone(),
            shape: spec.shape,
            x,
            y,
            size,
            is_audible: spec.audible,
            is_sounding: false,
        });
    }
    if !silent_sample {
        // rejection-sample sounding states until the condition holds
        loop {
            for o in objects.iter_mut() {
                o.is_sounding = o.is_audible && !rng.random_bool(config.silent_fraction);
            }
            if forced == Forced::SilentAudible {
                if let Some(o) = objects.iter_mut().find(|o| o.is_audible) {
                    o.is_sounding = false;
                }
            }
            let sounding = objects.iter().any(|o| o.is_sounding);
            let possible = objects.iter().filter(|o| o.is_audible).count() > usize::from(forced == Forced::SilentAudible);
            if sounding || !can_sound || !possible {
                break;
            }
        }
    }

    let image = render_scene_with(&objects, config.height, config.width, vocab)?;
    let gt_mask = sounding_mask(vocab, &objects, config.height, config.width);
    let noise_seed = derive_seed(sample_seed, "audio", 0);
    Ok(SceneSample {
        id: format!("{}-{:05}", split.name(), index),
        image,
        audio_signature: AudioSignature::from_objects(vocab, &objects, Some(noise_seed)),
        gt_mask,
        objects,
        frame_index: index % config.clip_seconds,
        caption_seed: derive_seed(sample_seed, "caption", 0),
    })
}

fn shuffle<T>(xs: &mut [T], rng: &mut Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

/// Rejection-samples a position whose bounding square (plus a 1px gap) does
/// not touch any placed object.
fn place(config: &GenerationConfig, placed: &[ObjectSpec], rng: &mut Rng) -> Option<(usize, usize, usize)> {
    for _ in 0..200 {
        let size = rng.random_range(config.min_size..=config.max_size);
        let x = rng.random_range(0..=config.width - size);
        let y = rng.random_range(0..=config.height - size);
        let clear = placed.iter().all(|o| {
            x + size < o.x || o.x + o.size < x || y + size < o.y || o.y + o.size < y
        });
        if clear {
            return Some((x, y, size));
        }
    }
    None
}

/// Paints objects in order over a uniform background; later objects cover
/// earlier ones.
pub fn render_scene(objects: &[ObjectSpec], height: usize, width: usize) -> Result<Image> {
    render_scene_with(objects, height, width, &Vocabulary::default())
}

pub fn render_scene_with(objects: &[ObjectSpec], height: usize, width: usize, vocab: &Vocabulary) -> Result<Image> {
    let mut img = Image::filled(height, width, BACKGROUND);
    for o in objects {
        if !o.in_bounds(height, width) {
            return Err(Error::Generation(format!(
                "object {} at ({}, {}) size {} exceeds {}x{}",
                o.category, o.x, o.y, o.size, width, height
            )));
        }
        let color = vocab.get(&o.category).map(|c| c.color).unwrap_or_else(|| fallback_color(&o.category));
        for py in o.y..o.y + o.size {
            for px in o.x..o.x + o.size {
                if o.covers(px, py) {
                    img.set(px, py, color);
                }
            }
        }
    }
    Ok(img)
}

fn fallback_color(name: &str) -> [u8; 3] {
    let h = crate::hash::hash_str(name);
    [(h & 0xff) as u8 | 0x40, ((h >> 8) & 0xff) as u8 | 0x40, ((h >> 16) & 0xff) as u8 | 0x40]
}

/// Class-index mask of the sounding objects.
pub fn sounding_mask(vocab: &Vocabulary, objects: &[ObjectSpec], height: usize, width: usize) -> Vec<u8> {
    let mut mask = vec![0u8; height * width];
    for o in objects.iter().filter(|o| o.is_sounding) {
        let id = vocab.class_id(&o.category).unwrap_or(0);
        for py in o.y..(o.y + o.size).min(height) {
            for px in o.x..(o.x + o.size).min(width) {
                if o.covers(px, py) {
                    mask[py * width + px] = id;
                }
            }
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Captions

struct PhrasePools {
    sounding: &'static [&'static str],
    silent: &'static [&'static str],
}

/// Phrases that say nothing about sound; `{}` is replaced by the category.
const NEUTRAL_PHRASES: &[&str] = &["there is a {} in the frame", "a {} is visible near the middle", "a {} can be seen"];

/// Probability that an object is described with a neutral phrase.
pub const NEUTRAL_PHRASE_PROB: f64 = 0.15;

fn pools(category: &str) -> PhrasePools {
    match category {
        "man" => PhrasePools {
            sounding: &["a man is singing", "a man is talking to someone", "a man shouts across the room"],
            silent: &["a man sleeps on a couch", "a man sits with his arms crossed", "a man rests quietly"],
        },
        "guitar" => PhrasePools {
            sounding: &["a guitar is being strummed", "someone plays a guitar", "a guitar is played with a pick"],
            silent: &["a guitar leans on the sofa, untouched", "a guitar hangs on a stand", "a guitar lies in its open case"],
        },
        "dog" => PhrasePools {
            sounding: &["a dog is barking", "a dog growls at the door", "a dog barks loudly"],
            silent: &["a dog sleeps on the rug", "a dog lies by the door", "a dog rests with its eyes closed"],
        },
        "car" => PhrasePools {
            sounding: &["a car honks its horn", "a car revs its engine", "a car roars down the street"],
            silent: &["a car is parked by the curb", "a car sits idle in the driveway", "a car is parked with its engine off"],
        },
        "piano" => PhrasePools {
            sounding: &["a piano is being played", "someone plays a melody on a piano", "a piano is played softly"],
            silent: &["a piano stands closed in the corner", "a piano sits untouched", "a piano is covered with a cloth"],
        },
        "bird" => PhrasePools {
            sounding: &["a bird chirps on a branch", "a bird is singing", "a bird tweets at the window"],
            silent: &["a bird perches still on a branch", "a bird sleeps in its nest", "a bird sits on the fence"],
        },
        "chair" => PhrasePools { sounding: &["a chair stands by the table"], silent: &["a chair stands by the table", "a chair sits in the corner"] },
        "lamp" => PhrasePools { sounding: &["a lamp is on the desk"], silent: &["a lamp stands on the desk", "a lamp hangs from the ceiling"] },
        _ => PhrasePools { sounding: &["is making a sound"], silent: &["rests in place"] },
    }
}

/// Words that state silence outright rather than implying it.
pub const EXPLICIT_SILENCE_WORDS: &[&str] = &["silent", "silently", "quiet", "quietly", "muted", "mute", "no sound"];

/// The phrase pool used for an object in a given state. Unknown categories get
/// a generic `"a {name} ..."` phrase.
pub fn phrase_pool(category: &str, sounding: bool) -> Vec<String> {
    let p = pools(category);
    let src = if sounding { p.sounding } else { p.silent };
    let known = ["man", "guitar", "dog", "car", "piano", "bird", "chair", "lamp"].contains(&category);
    src.iter()
        .map(|s| if known { (*s).to_string() } else { format!("a {category} {s}") })
        .collect()
}

pub fn neutral_pool(category: &str) -> Vec<String> {
    NEUTRAL_PHRASES.iter().map(|p| p.replace("{}", category)).collect()
}

pub const EMPTY_SCENE_CAPTION: &str = "an empty room";

/// Template-based dense caption naming every object with a phrase that
/// reflects whether it is sounding.
pub fn scene_description(sample: &SceneSample) -> String {
    if sample.objects.is_empty() {
        return EMPTY_SCENE_CAPTION.to_string();
    }
    let mut rng = seeded(sample.caption_seed);
    let mut clauses: Vec<String> = Vec::new();
    for o in &sample.objects {
        let neutral = o.is_audible && rng.random_bool(NEUTRAL_PHRASE_PROB);
        let pool = if neutral { neutral_pool(&o.category) } else { phrase_pool(&o.category, o.is_sounding) };
        let idx = rng.random_range(0..pool.len());
        clauses.push(pool[idx].clone());
    }
    let mut out = String::from("In this scene, ");
    for (i, c) in clauses.iter().enumerate() {
        if i > 0 {
            let joiner = if i + 1 == clauses.len() {
                if rng.random_bool(0.5) { " while " } else { " and " }
            } else {
                ", "
            };
            out.push_str(joiner);
        }
        out.push_str(c);
    }
    out.push('.');
    out
}
