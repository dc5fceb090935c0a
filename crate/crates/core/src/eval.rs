//! Segmentation metrics, audio substitution and the audio-control sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{derive_seed, hash_str};
use crate::synthdata::{AudioSignature, SceneSample};
use crate::textcues::{score_recognition, CueExtraction};
use crate::train::{Pipeline, Prepared};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Mute,
    Wgn10,
    Wgn40,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Normal, Condition::Mute, Condition::Wgn10, Condition::Wgn40];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Mute => "mute",
            Condition::Wgn10 => "wgn10",
            Condition::Wgn40 => "wgn40",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Input(format!("unknown audio condition {name:?}")))
    }

    pub fn snr_db(self) -> Option<f64> {
        match self {
            Condition::Wgn10 => Some(10.0),
            Condition::Wgn40 => Some(40.0),
            _ => None,
        }
    }
}

/// Replaces the audio of `sample` according to `condition`; the image and
/// ground truth are untouched.
pub fn substitute_audio(sample: &SceneSample, condition: Condition) -> SceneSample {
    let mut out = sample.clone();
    let n = sample.audio_signature.counts.len();
    out.audio_signature = match condition {
        Condition::Normal => sample.audio_signature.clone(),
        Condition::Mute => AudioSignature::silence(n),
        Condition::Wgn10 | Condition::Wgn40 => {
            let mut s = AudioSignature::silence(n);
            s.noise_seed = Some(derive_seed(hash_str(&sample.id), condition.name(), 0));
            s.wgn_snr_db = condition.snr_db();
            s
        }
    };
    out
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} pixels, ground truth {b}")));
    }
    Ok(())
}

/// IoU of two binary masks; both empty counts as 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean over classes present in either mask of the per-class IoU, with
/// background excluded; both masks all-background counts as 1.
pub fn semantic_iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let mut inter = [0usize; 256];
    let mut union = [0usize; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let scores: Vec<f64> = (1..256).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok(if scores.is_empty() { 1.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 })
}

/// `(1 + b) P R / (b P + R)` with `b = beta_sq`; both empty counts as 1.
pub fn fscore(pred: &[bool], gt: &[bool], beta_sq: f64) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let tp = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count() as f64;
    let np = pred.iter().filter(|&&p| p).count() as f64;
    let ng = gt.iter().filter(|&&g| g).count() as f64;
    if np == 0.0 && ng == 0.0 {
        return Ok(1.0);
    }
    let precision = if np > 0.0 { tp / np } else { 0.0 };
    let recall = if ng > 0.0 { tp / ng } else { 0.0 };
    let denom = beta_sq * precision + recall;
    Ok(if denom == 0.0 { 0.0 } else { (1.0 + beta_sq) * precision * recall / denom })
}

/// Mean per-sample IoU.
pub fn miou(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<f64> {
    mean_of(preds, gts, iou)
}

pub fn mean_fscore(preds: &[Vec<bool>], gts: &[Vec<bool>], beta_sq: f64) -> Result<f64> {
    mean_of(preds, gts, |p, g| fscore(p, g, beta_sq))
}

fn mean_of<T>(preds: &[Vec<T>], gts: &[Vec<T>], f: impl Fn(&[T], &[T]) -> Result<f64>) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        s += f(p, g)?;
    }
    Ok(s / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub iou: f64,
    pub f: f64,
    pub semantic_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub miou: f64,
    pub fscore: f64,
    /// Semantic-setting mIoU (per-pixel class argmax).
    pub semantic_miou: f64,
    pub per_sample: Vec<SampleScore>,
}

impl EvalReport {
    pub fn from_scores(condition: Condition, per_sample: Vec<SampleScore>) -> Self {
        let n = per_sample.len().max(1) as f64;
        let miou = per_sample.iter().map(|s| s.iou).sum::<f64>() / n;
        let fscore = per_sample.iter().map(|s| s.f).sum::<f64>() / n;
        let semantic_miou = per_sample.iter().map(|s| s.semantic_iou).sum::<f64>() / n;
        Self { condition, miou, fscore, semantic_miou, per_sample }
    }
}

/// Percentage drop from `normal` to `other`; 0 when `normal` is 0.
pub fn delta_percent(normal: f64, other: f64) -> f64 {
    if normal == 0.0 {
        0.0
    } else {
        100.0 * (normal - other) / normal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    /// Scores against the original ground truth.
    pub report: EvalReport,
    /// Scores against all-background ground truth.
    pub blank: EvalReport,
    pub delta_m: f64,
    pub delta_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline: EvalReport,
    pub conditions: Vec<ConditionResult>,
}

impl SensitivityReport {
    pub fn get(&self, condition: Condition) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.condition == condition)
    }
}

/// Per-sample predictions and scores. With `blank_gt` every sample is
/// scored against an all-background mask.
pub fn evaluate(pipe: &Pipeline, samples: &[Prepared], condition: Condition, blank_gt: bool) -> Result<EvalReport> {
    let beta_sq = pipe.config.eval.beta_sq;
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let out = pipe.predict(s)?;
        let pred = out.binary();
        let sem = out.semantic();
        let (gt_b, gt_s): (Vec<bool>, Vec<u8>) = if blank_gt {
            (alloc::vec![false; s.gt.len()], alloc::vec![0; s.gt.len()])
        } else {
            (s.gt.iter().map(|&c| c != 0).collect(), s.gt.clone())
        };
        scores.push(SampleScore {
            id: s.id.clone(),
            iou: iou(&pred, &gt_b)?,
            f: fscore(&pred, &gt_b, beta_sq)?,
            semantic_iou: semantic_iou(&sem, &gt_s)?,
        });
    }
    Ok(EvalReport::from_scores(condition, scores))
}

/// Evaluates every configured condition on `samples` (prepared under normal
/// audio) and reports the attenuation relative to the normal condition.
pub fn sensitivity_sweep(pipe: &Pipeline, samples: &[SceneSample], prepared: &[Prepared]) -> Result<SensitivityReport> {
    let baseline = evaluate(pipe, prepared, Condition::Normal, false)?;
    let mut conditions = Vec::new();
    for &c in &pipe.config.eval.conditions {
        if c == Condition::Normal {
            continue;
        }
        let swapped: Vec<Prepared> = samples
            .iter()
            .zip(prepared)
            .map(|(s, p)| pipe.with_audio(p, &substitute_audio(s, c)))
            .collect::<Result<_>>()?;
        let report = evaluate(pipe, &swapped, c, false)?;
        let blank = evaluate(pipe, &swapped, c, true)?;
        conditions.push(ConditionResult {
            condition: c,
            delta_m: delta_percent(baseline.miou, report.miou),
            delta_f: delta_percent(baseline.fscore, report.fscore),
            report,
            blank,
        });
    }
    Ok(SensitivityReport { baseline, conditions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecReport {
    pub stage1_ap: f64,
    pub stage2_ap: f64,
    pub stage1_cues: usize,
    pub stage2_cues: usize,
}

/// Recognition precision of collected cues and of the cues that survive the
/// model's dynamic mask.
pub fn recognition_stages(pipe: &Pipeline, samples: &[SceneSample], prepared: &[Prepared]) -> Result<RecReport> {
    let mut stage1: Vec<CueExtraction> = Vec::new();
    let mut stage2: Vec<CueExtraction> = Vec::new();
    let mut gt = Vec::new();
    for (s, p) in samples.iter().zip(prepared) {
        let out = pipe.predict(p)?;
        stage2.push(p.cues.filtered(&out.cue_mask));
        stage1.push(p.cues.clone());
        gt.push(s.sounding_categories());
    }
    Ok(RecReport {
        stage1_ap: score_recognition(&stage1, &gt)?,
        stage2_ap: score_recognition(&stage2, &gt)?,
        stage1_cues: stage1.iter().map(|e| e.cues.len()).sum(),
        stage2_cues: stage2.iter().map(|e| e.cues.len()).sum(),
    })
}
