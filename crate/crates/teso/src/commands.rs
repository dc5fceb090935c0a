//! The operations behind each subcommand.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teso_core::config::{ExperimentConfig, Variant};
use teso_core::eval::{evaluate, recognition_stages, sensitivity_sweep, substitute_audio, Condition, EvalReport, RecReport, SensitivityReport};
use teso_core::synthdata::{generate_dataset, Dataset, SceneSample, Split};
use teso_core::train::{train, Checkpoint, Pipeline, Prepared, TrainEvent, TrainOptions, TrainOutcome};

use crate::config_io::{config_hash, config_snapshot};
use crate::cues::{cache_name, extract_all, load_template, make_client, write_builtin_templates, CueCache, ExtractSummary};
use crate::dataset_io::{read_dataset, write_dataset, WriteSummary};
use crate::error::{CliError, Result};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::layout::{checkpoint_path, Layout};
use crate::plot::{bar_chart_svg, grid_png, BarGroup, Tile};

/// Artifact root plus the resolved config.
#[derive(Clone, Debug)]
pub struct Context {
    pub layout: Layout,
    pub config: ExperimentConfig,
}

impl Context {
    pub fn new(layout: Layout, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self { layout, config: config.resolved()? })
    }
}

pub fn gen_data(ctx: &Context) -> Result<WriteSummary> {
    let ds = generate_dataset(&ctx.config.data, ctx.config.seed)?;
    let s = write_dataset(&ctx.layout, &ds)?;
    log::info!("dataset: {} files written, {} unchanged", s.written, s.unchanged);
    Ok(s)
}

/// Reads the on-disk dataset and checks it was generated from `config`.
pub fn load_dataset(layout: &Layout, config: &ExperimentConfig) -> Result<Dataset> {
    let ds = read_dataset(layout)?;
    if ds.config != config.data || ds.seed != config.seed {
        return Err(teso_core::Error::Config(format!(
            "dataset under {} was generated with another data block or seed; rerun gen-data",
            layout.data_dir().display()
        ))
        .into());
    }
    Ok(ds)
}

/// Extracts (or reuses) cues for every sample under `config.textcues`.
pub fn cues_for(layout: &Layout, config: &ExperimentConfig, ds: &Dataset) -> Result<(CueCache, ExtractSummary)> {
    write_builtin_templates(&layout.templates_dir())?;
    let tc = &config.textcues;
    let template = load_template(&layout.templates_dir(), tc.template)?;
    let vocab = &config.data.vocabulary;
    let client = make_client(tc, vocab);
    let samples: Vec<&SceneSample> = ds.splits.iter().flat_map(|s| s.samples.iter()).collect();
    let mut lane_cfg = tc.clone();
    if lane_cfg.client.kind == teso_core::config::ClientKind::Mock {
        lane_cfg.client.max_in_flight = config.workers;
    }
    let (cache, s) = extract_all(&layout.cues_dir().join(cache_name(tc)), &lane_cfg, &template, client.as_ref(), vocab, &samples)?;
    log::info!("cues: {} extracted, {} reused, {} warnings", s.extracted, s.reused, s.warnings);
    Ok((cache, s))
}

pub fn extract_cues(ctx: &Context) -> Result<ExtractSummary> {
    let ds = load_dataset(&ctx.layout, &ctx.config)?;
    Ok(cues_for(&ctx.layout, &ctx.config, &ds)?.1)
}

/// Prepared model inputs for one split.
pub fn prepare_split(pipe: &Pipeline, ds: &Dataset, cues: &CueCache, split: Split) -> Result<Vec<Prepared>> {
    ds.split(split)
        .iter()
        .map(|s| {
            let c = cues.get(&s.id).cloned().ok_or_else(|| CliError::Missing(PathBuf::from(format!("cues for {}", s.id))))?;
            Ok(pipe.prepare(s, c)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stamp {
    config_hash: String,
    max_steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub outcome: TrainOutcome,
    /// True when an up-to-date run was found and nothing was trained.
    pub reused: bool,
}

/// Trains into `runs/<name>`. A run whose stamp matches the config is
/// reused as is.
pub fn train_run(ctx: &Context, name: &str, options: &TrainOptions) -> Result<TrainReport> {
    train_config(&ctx.layout, &ctx.config, name, options)
}

pub fn train_config(layout: &Layout, config: &ExperimentConfig, name: &str, options: &TrainOptions) -> Result<TrainReport> {
    let mut config = config.resolved()?;
    if let Some(e) = options.epochs {
        config.optim.epochs = e;
    }
    let dir = layout.run_dir(name);
    let ck_path = checkpoint_path(&dir);
    let stamp = Stamp { config_hash: config_hash(&config), max_steps: options.max_steps };
    if ck_path.exists() && read_json::<Stamp>(&dir.join("stamp.json")).is_ok_and(|s| s == stamp) {
        if let Ok(outcome) = read_json::<TrainOutcome>(&dir.join("outcome.json")) {
            log::info!("run {name} is up to date; skipping training");
            return Ok(TrainReport { run_dir: dir, checkpoint: ck_path, outcome, reused: true });
        }
    }
    let snapshot = config_snapshot(&config);
    log::info!("resolved config for run {name}:\n{snapshot}");
    write_atomic(&dir.join("config.toml"), snapshot.as_bytes())?;
    let _ = fs::remove_file(dir.join("stamp.json"));

    let ds = load_dataset(layout, &config)?;
    let (cues, _) = cues_for(layout, &config, &ds)?;
    let mut pipe = Pipeline::new(&config)?;
    let tr = prepare_split(&pipe, &ds, &cues, Split::Train)?;
    let va = prepare_split(&pipe, &ds, &cues, Split::Val)?;

    let log_path = dir.join("train_log.jsonl");
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(CliError::io(&log_path))?);
    let mut io_err = None;
    let result = train(&mut pipe, &tr, &va, options, &mut |ev| {
        if let TrainEvent::Epoch(r) = ev {
            log::info!("{name} epoch {} loss {:.4} val mIoU {:?}", r.epoch, r.loss.total, r.val_miou);
        }
        let line = serde_json::to_string(ev).expect("event serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_err.get_or_insert(e);
        }
    });
    log_file.flush().map_err(CliError::io(&log_path))?;
    if let Some(e) = io_err {
        return Err(CliError::Io { path: log_path, source: e });
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e @ teso_core::Error::NonFinite(_)) => {
            let snap = dir.join("nan_snapshot.json");
            write_json(&snap, &serde_json::json!({ "error": e.to_string(), "state": pipe.checkpoint(0, 0) }))?;
            log::error!("training diverged; parameters saved to {}", snap.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let epoch = outcome.best_epoch;
    write_json(&ck_path, &pipe.checkpoint(outcome.steps, epoch))?;
    write_json(&dir.join("outcome.json"), &outcome)?;
    write_json(&dir.join("stamp.json"), &stamp)?;
    Ok(TrainReport { run_dir: dir, checkpoint: ck_path, outcome, reused: false })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path)
}

/// Pipeline with `config` and the parameters of `ck`.
pub fn pipeline_from(config: &ExperimentConfig, ck: &Checkpoint) -> Result<Pipeline> {
    Ok(Pipeline::from_checkpoint(&Checkpoint { config: config.clone(), ..ck.clone() })?)
}

fn output_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn eval_checkpoint(layout: &Layout, checkpoint: &Path, split: Split) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let pipe = Pipeline::from_checkpoint(&ck)?;
    let ds = load_dataset(layout, &pipe.config)?;
    let (cues, _) = cues_for(layout, &pipe.config, &ds)?;
    let prepared = prepare_split(&pipe, &ds, &cues, split)?;
    let report = evaluate(&pipe, &prepared, Condition::Normal, false)?;
    write_json(&output_dir(checkpoint).join(format!("eval_{}.json", split.name())), &report)?;
    log::info!("{} mIoU {:.4} F {:.4}", split.name(), report.miou, report.fscore);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioControlReport {
    pub split: Split,
    pub sensitivity: SensitivityReport,
    pub recognition: RecReport,
}

/// Sensitivity sweep over the configured conditions plus REC staging;
/// writes the JSON report, a bar chart and a mask grid.
pub fn audio_control(layout: &Layout, checkpoint: &Path, split: Split) -> Result<AudioControlReport> {
    let ck = load_checkpoint(checkpoint)?;
    let pipe = Pipeline::from_checkpoint(&ck)?;
    let ds = load_dataset(layout, &pipe.config)?;
    let (cues, _) = cues_for(layout, &pipe.config, &ds)?;
    let samples = ds.split(split);
    let prepared = prepare_split(&pipe, &ds, &cues, split)?;
    let sensitivity = sensitivity_sweep(&pipe, samples, &prepared)?;
    let recognition = recognition_stages(&pipe, samples, &prepared)?;
    let out = output_dir(checkpoint);
    let report = AudioControlReport { split, sensitivity, recognition };
    write_json(&out.join(format!("audio_control_{}.json", split.name())), &report)?;

    let groups: Vec<BarGroup> = report
        .sensitivity
        .conditions
        .iter()
        .map(|c| BarGroup { label: c.condition.name().into(), values: vec![c.delta_m, c.delta_f] })
        .collect();
    let svg = bar_chart_svg("Audio-control sensitivity", "change vs normal audio (%)", &["delta mIoU", "delta F"], &groups);
    write_atomic(&out.join(format!("audio_control_{}.svg", split.name())), svg.as_bytes())?;
    write_atomic(&out.join(format!("masks_{}.png", split.name())), &mask_grid(&pipe, samples, &prepared, 6)?)?;
    for c in &report.sensitivity.conditions {
        log::info!("{}: mIoU {:.4} delta_m {:.1}% delta_f {:.1}%", c.condition.name(), c.report.miou, c.delta_m, c.delta_f);
    }
    Ok(report)
}

/// One row per sample: frame, ground truth, then the prediction under
/// each condition.
fn mask_grid(pipe: &Pipeline, samples: &[SceneSample], prepared: &[Prepared], n: usize) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (s, p) in samples.iter().zip(prepared).take(n) {
        let (h, w) = (s.height(), s.width());
        let mut row = vec![
            Tile { height: h, width: w, rgb: s.image.pixels.clone() },
            Tile::binary(h, w, &s.binary_gt()),
        ];
        for c in Condition::ALL {
            let q = pipe.with_audio(p, &substitute_audio(s, c))?;
            let pred = pipe.predict(&q)?.binary();
            row.push(Tile::overlay(h, w, &s.image.pixels, &pred, [255, 40, 40]));
        }
        rows.push(row);
    }
    Ok(grid_png(&rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub miou: f64,
    pub fscore: f64,
    pub semantic_miou: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | mIoU | F-score | semantic mIoU |\n|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!("| {} | {:.4} | {:.4} | {:.4} |\n", r.variant, r.miou, r.fscore, r.semantic_miou));
    }
    s
}

/// Evaluates the baseline and each run of `variant` on `split`. With
/// `retrain`, every configuration is trained from scratch; otherwise the
/// variant settings are applied to the baseline checkpoint at inference.
pub fn ablate(ctx: &Context, variant: Variant, retrain: bool, baseline: Option<&Path>, split: Split) -> Result<Vec<AblationRow>> {
    let mut runs = vec![Variant::Full];
    runs.extend(variant.expand().into_iter().filter(|v| *v != Variant::Full));
    let baseline_ck = if retrain {
        None
    } else {
        let p = baseline.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(&ctx.layout.run_dir("full")));
        Some(load_checkpoint(&p)?)
    };
    let ds = load_dataset(&ctx.layout, &ctx.config)?;
    let mut rows = Vec::new();
    for v in runs {
        let pipe = match &baseline_ck {
            Some(ck) => pipeline_from(&v.apply(&ck.config)?, ck)?,
            None => {
                let cfg = v.apply(&ctx.config)?;
                let rep = train_config(&ctx.layout, &cfg, &format!("ablate-{}", v.name()), &TrainOptions::default())?;
                Pipeline::from_checkpoint(&load_checkpoint(&rep.checkpoint)?)?
            }
        };
        let (cues, _) = cues_for(&ctx.layout, &pipe.config, &ds)?;
        let prepared = prepare_split(&pipe, &ds, &cues, split)?;
        let r = evaluate(&pipe, &prepared, Condition::Normal, false)?;
        log::info!("{}: mIoU {:.4} F {:.4}", v.name(), r.miou, r.fscore);
        rows.push(AblationRow { variant: v.name(), miou: r.miou, fscore: r.fscore, semantic_miou: r.semantic_miou });
    }
    let dir = ctx.layout.runs_dir().join("ablations");
    let stem = format!("{}-{}-{}", variant.name(), if retrain { "retrained" } else { "inference" }, split.name());
    write_json(&dir.join(format!("{stem}.json")), &rows)?;
    write_atomic(&dir.join(format!("{stem}.md")), ablation_table(&rows).as_bytes())?;
    Ok(rows)
}
