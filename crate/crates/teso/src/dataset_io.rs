//! On-disk benchmark format.
//!
//! ```text
//! data/manifest.json        version, seed, vocabulary, generation config, ids per split
//! data/<split>/<id>.png       RGB frame
//! data/<split>/<id>_mask.png  8-bit class-index mask (0 = background)
//! data/<split>/records.jsonl  one SampleRecord per line
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teso_core::synthdata::{
    scene_description, AudioSignature, Dataset, GenerationConfig, Image, ObjectSpec, SceneSample, Split, SplitData,
    MANIFEST_VERSION,
};

use crate::error::{CliError, Result};
use crate::fsutil::{read_json, to_json_pretty, write_if_changed};
use crate::layout::Layout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub version: u32,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub generation: GenerationConfig,
    pub splits: BTreeMap<String, Vec<String>>,
}

/// Everything about a sample except its rasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub objects: Vec<ObjectSpec>,
    pub audio_signature: AudioSignature,
    pub frame_index: usize,
    pub caption_seed: u64,
    pub caption: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteSummary {
    pub written: usize,
    pub unchanged: usize,
}

impl WriteSummary {
    fn add(&mut self, wrote: bool) {
        if wrote {
            self.written += 1;
        } else {
            self.unchanged += 1;
        }
    }
}

pub fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        w.write_image_data(data).expect("in-memory png data");
    }
    out
}

/// Decodes an 8-bit PNG, returning (width, height, color, bytes).
pub fn decode_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let bad = |message: String| CliError::Image { path: path.to_path_buf(), message };
    let file = fs::File::open(path).map_err(CliError::io(path))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit depth, found {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

fn record(sample: &SceneSample) -> SampleRecord {
    SampleRecord {
        id: sample.id.clone(),
        image: format!("{}.png", sample.id),
        mask: format!("{}_mask.png", sample.id),
        objects: sample.objects.clone(),
        audio_signature: sample.audio_signature.clone(),
        frame_index: sample.frame_index,
        caption_seed: sample.caption_seed,
        caption: scene_description(sample),
    }
}

/// Writes the dataset, touching only files whose bytes differ.
pub fn write_dataset(layout: &Layout, ds: &Dataset) -> Result<WriteSummary> {
    let mut summary = WriteSummary::default();
    for sd in &ds.splits {
        let dir = layout.split_dir(sd.split);
        let mut lines = Vec::new();
        for s in &sd.samples {
            let r = record(s);
            let rgb = encode_png(s.width(), s.height(), png::ColorType::Rgb, &s.image.pixels);
            summary.add(write_if_changed(&dir.join(&r.image), &rgb)?);
            let mask = encode_png(s.width(), s.height(), png::ColorType::Grayscale, &s.gt_mask);
            summary.add(write_if_changed(&dir.join(&r.mask), &mask)?);
            lines.extend(serde_json::to_vec(&r).expect("serializable record"));
            lines.push(b'\n');
        }
        summary.add(write_if_changed(&dir.join("records.jsonl"), &lines)?);
    }
    let m = ds.manifest();
    let manifest = ManifestFile {
        version: m.version,
        seed: m.generation_seed,
        vocabulary: m.vocabulary,
        generation: ds.config.clone(),
        splits: m.splits.into_iter().map(|(s, ids)| (s.name().to_string(), ids)).collect(),
    };
    summary.add(write_if_changed(&layout.manifest(), &to_json_pretty(&manifest))?);
    Ok(summary)
}

fn data_error(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Core(teso_core::Error::Input(format!("{}: {}", path.display(), msg.into())))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(layout: &Layout) -> Result<Dataset> {
    let manifest: ManifestFile = read_json(&layout.manifest())?;
    if manifest.version != MANIFEST_VERSION {
        return Err(data_error(&layout.manifest(), format!("unsupported manifest version {}", manifest.version)));
    }
    let cfg = manifest.generation.clone();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let dir = layout.split_dir(split);
        let ids = manifest.splits.get(split.name()).cloned().unwrap_or_default();
        let records_path = dir.join("records.jsonl");
        let text = if ids.is_empty() && !records_path.exists() {
            String::new()
        } else {
            fs::read_to_string(&records_path).map_err(CliError::io(&records_path))?
        };
        let mut samples = Vec::with_capacity(ids.len());
        for (line_no, line) in text.lines().enumerate() {
            let r: SampleRecord = serde_json::from_str(line)
                .map_err(|e| data_error(&records_path, format!("line {}: {e}", line_no + 1)))?;
            samples.push(load_sample(&dir, &r, &cfg)?);
        }
        let got: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        if got != ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(data_error(&records_path, "records do not match the manifest ids"));
        }
        splits.push(SplitData { split, samples });
    }
    Ok(Dataset { config: cfg, seed: manifest.seed, splits })
}

fn load_sample(dir: &Path, r: &SampleRecord, cfg: &GenerationConfig) -> Result<SceneSample> {
    let img_path: PathBuf = dir.join(&r.image);
    let (w, h, color, pixels) = decode_png(&img_path)?;
    if color != png::ColorType::Rgb || (h, w) != (cfg.height, cfg.width) {
        return Err(data_error(&img_path, format!("expected {}x{} RGB, found {w}x{h} {color:?}", cfg.width, cfg.height)));
    }
    let mask_path = dir.join(&r.mask);
    let (mw, mh, mcolor, gt_mask) = decode_png(&mask_path)?;
    if mcolor != png::ColorType::Grayscale || (mh, mw) != (h, w) {
        return Err(data_error(&mask_path, "mask must be single-channel and match the frame size"));
    }
    if gt_mask.iter().any(|&c| usize::from(c) > cfg.vocabulary.len()) {
        return Err(data_error(&mask_path, "mask holds a class index outside the vocabulary"));
    }
    Ok(SceneSample {
        id: r.id.clone(),
        image: Image { height: h, width: w, pixels },
        objects: r.objects.clone(),
        audio_signature: r.audio_signature.clone(),
        gt_mask,
        frame_index: r.frame_index,
        caption_seed: r.caption_seed,
    })
}
