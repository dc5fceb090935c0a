//! Sample preparation, cue extraction and the training loop.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::{CueSource, ExperimentConfig, TextCueConfig};
use crate::encoders::{audio_encoder, encode_text_cues, text_encoder, AudioEncoder, TextEncoder, TextFeature};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Condition, EvalReport};
use crate::hash::derive_seed;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::rng::seeded;
use crate::segmodel::loss::total_loss;
use crate::segmodel::{FrameInputs, LossBreakdown, ModelSwitches, SegmentationOutput, Target, TesoModel};
use crate::synthdata::{scene_description, AudioSignature, SceneSample, Vocabulary};
use crate::tensor::Tensor;
use crate::textcues::{build_prompt, parse_nouns, reason_cues, CueExtraction, LlmClient, PromptTemplate};

/// Runs the configured cue source on the sample's scene description.
pub fn extract_cues(
    config: &TextCueConfig,
    template: &PromptTemplate,
    client: &dyn LlmClient,
    vocabulary: &Vocabulary,
    sample: &SceneSample,
) -> Result<CueExtraction> {
    let caption = scene_description(sample);
    match config.source {
        CueSource::NounParser => Ok(parse_nouns(&caption, vocabulary)),
        CueSource::Reasoner => reason_cues(client, &build_prompt(template, &caption)),
    }
}

/// Everything the model consumes for one frame, with frozen features cached.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub levels: Rc<Vec<Tensor>>,
    pub audio: Vec<f64>,
    pub text: TextFeature,
    pub cues: CueExtraction,
    pub targets: Vec<Target>,
    /// Class index per pixel.
    pub gt: Vec<u8>,
}

/// One target per class present in a class-index mask.
pub fn targets_from_mask(gt: &[u8]) -> Vec<Target> {
    let mut classes: Vec<u8> = gt.iter().copied().filter(|&c| c != 0).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| Target { class: c as usize, mask: Rc::new(gt.iter().map(|&g| f64::from(u8::from(g == c))).collect()) })
        .collect()
}

/// A model with its parameters and frozen encoders.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub model: TesoModel,
    pub audio: Box<dyn AudioEncoder>,
    pub text: Box<dyn TextEncoder>,
}

/// Serializable training state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: u64,
    pub epoch: usize,
    pub params: ParamStore,
}

impl Pipeline {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let config = config.resolved()?;
        let mut store = ParamStore::new();
        let model = TesoModel::new(&mut store, &config.model_spec()?)?;
        let audio = audio_encoder(&config.encoders, config.data.vocabulary.len())?;
        let text = text_encoder(&config.encoders)?;
        Ok(Self { config, store, model, audio, text })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut p = Self::new(&ck.config)?;
        let loaded = p.store.load_from(&ck.params);
        if loaded != p.store.len() || ck.params.len() != p.store.len() {
            return Err(Error::Parse(format!("checkpoint matches {loaded} of {} parameters", p.store.len())));
        }
        Ok(p)
    }

    pub fn checkpoint(&self, step: u64, epoch: usize) -> Checkpoint {
        Checkpoint { config: self.config.clone(), step, epoch, params: self.store.clone() }
    }

    pub fn switches(&self) -> ModelSwitches {
        self.config.mechanisms.switches()
    }

    /// The audio row for the sample's frame, or silence when audio is
    /// switched off.
    pub fn audio_row(&self, signature: &AudioSignature, frame_index: usize) -> Result<Vec<f64>> {
        if !self.config.mechanisms.audio {
            return Ok(self.audio.silence().to_vec());
        }
        let f = self.audio.encode(signature, frame_index + 1)?;
        Ok(f.row(frame_index).to_vec())
    }

    pub fn prepare(&self, sample: &SceneSample, cues: CueExtraction) -> Result<Prepared> {
        let levels = self.model.backbone_features(&self.store, &sample.image.to_tensor())?;
        let audio = self.audio_row(&sample.audio_signature, sample.frame_index)?;
        let text = encode_text_cues(self.text.as_ref(), &cues.cues, self.config.textcues.n_t);
        Ok(Prepared {
            id: sample.id.clone(),
            levels: Rc::new(levels),
            audio,
            text,
            cues,
            targets: targets_from_mask(&sample.gt_mask),
            gt: sample.gt_mask.clone(),
        })
    }

    /// Same frame with the audio of `sample` re-encoded.
    pub fn with_audio(&self, prepared: &Prepared, sample: &SceneSample) -> Result<Prepared> {
        let mut p = prepared.clone();
        p.audio = self.audio_row(&sample.audio_signature, sample.frame_index)?;
        Ok(p)
    }

    pub fn inputs<'a>(&self, p: &'a Prepared) -> FrameInputs<'a> {
        FrameInputs { levels: &p.levels, audio_row: &p.audio, text: &p.text }
    }

    pub fn predict(&self, p: &Prepared) -> Result<SegmentationOutput> {
        self.model.predict(&self.store, &self.inputs(p), self.switches())
    }

    /// Loss and parameter gradients for one prepared sample.
    pub fn loss_and_grads(&self, p: &Prepared, acc: &mut [Tensor]) -> Result<LossBreakdown> {
        let mut t = Tape::new(&self.store);
        let out = self.model.forward(&mut t, &self.inputs(p), self.switches())?;
        let bank = if self.config.loss.info_nce != 0.0 { Some(out.sof.bank) } else { None };
        let loss = total_loss(&mut t, out.mask_logits, out.class_logits, &p.targets, bank, &self.config.loss, self.config.sedam.eps)?;
        let g = t.backward(loss.total);
        t.accumulate_param_grads(&g, acc);
        Ok(loss.breakdown)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub loss: LossBreakdown,
    pub val_miou: Option<f64>,
    pub val_fscore: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainEvent {
    Step { epoch: usize, step: u64, loss: f64 },
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Overrides the configured epoch count.
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_miou: Option<f64>,
    /// Mean total loss of the last epoch run.
    pub final_loss: f64,
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(|g| g.all_finite())
}

/// AdamW with per-sample gradient accumulation over `batch_size`, early
/// stopping on validation mIoU and restoration of the best parameters.
/// A non-finite loss or gradient aborts with [`Error::NonFinite`].
pub fn train(
    pipe: &mut Pipeline,
    train_set: &[Prepared],
    val_set: &[Prepared],
    options: &TrainOptions,
    observe: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let oc = pipe.config.optim.clone();
    let epochs = options.epochs.unwrap_or(oc.epochs);
    let mut opt = AdamW::new(oc.clone(), &pipe.store);
    let mut rng = seeded(derive_seed(pipe.config.seed, "shuffle", 0));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut final_loss = 0.0;
    let mut since_best = 0usize;

    'epochs: for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut acc = pipe.store.zeros_like();
        let mut in_batch = 0usize;
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        let mut stop = false;
        for (k, &i) in order.iter().enumerate() {
            let p = &train_set[i];
            let bd = pipe.loss_and_grads(p, &mut acc).map_err(|e| with_context(e, epoch, &p.id))?;
            sum.bce += bd.bce;
            sum.dice += bd.dice;
            sum.mask += bd.mask;
            sum.cls += bd.cls;
            sum.info_nce += bd.info_nce;
            sum.total += bd.total;
            seen += 1;
            in_batch += 1;
            if in_batch == oc.batch_size || k + 1 == order.len() {
                if !all_finite(&acc) {
                    return Err(Error::NonFinite(format!("non-finite gradient at epoch {epoch}, step {}", opt.steps())));
                }
                opt.step(&mut pipe.store, &acc, 1.0 / in_batch as f64);
                acc.iter_mut().for_each(|g| g.data_mut().fill(0.0));
                in_batch = 0;
                observe(&TrainEvent::Step { epoch, step: opt.steps(), loss: bd.total });
                if options.max_steps.is_some_and(|m| opt.steps() >= m) {
                    stop = true;
                    break;
                }
            }
        }
        let n = seen.max(1) as f64;
        let mean = LossBreakdown {
            bce: sum.bce / n,
            dice: sum.dice / n,
            mask: sum.mask / n,
            cls: sum.cls / n,
            info_nce: sum.info_nce / n,
            total: sum.total / n,
        };
        final_loss = mean.total;
        let val: Option<EvalReport> = if val_set.is_empty() { None } else { Some(evaluate(pipe, val_set, Condition::Normal, false)?) };
        let rec = EpochRecord {
            epoch,
            steps: opt.steps(),
            loss: mean,
            val_miou: val.as_ref().map(|r| r.miou),
            val_fscore: val.as_ref().map(|r| r.fscore),
        };
        observe(&TrainEvent::Epoch(rec.clone()));
        history.push(rec);
        match &val {
            Some(r) => {
                if best.as_ref().is_none_or(|b| r.miou > b.0) {
                    best = Some((r.miou, epoch, pipe.store.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                }
            }
            None => best = Some((0.0, epoch, ParamStore::new())),
        }
        if stop || (oc.patience > 0 && since_best >= oc.patience) {
            break 'epochs;
        }
    }
    let (best_val_miou, best_epoch) = match best {
        Some((m, e, store)) if !val_set.is_empty() => {
            pipe.store.load_from(&store);
            (Some(m), e)
        }
        Some((_, e, _)) => (None, e),
        None => (None, 0),
    };
    Ok(TrainOutcome { history, steps: opt.steps(), best_epoch, best_val_miou, final_loss })
}

fn with_context(e: Error, epoch: usize, id: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, sample {id}: {m}")),
        other => other,
    }
}
