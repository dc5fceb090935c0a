//! Training runs shared by the experimental criteria.

use std::collections::BTreeMap;
use std::time::Instant;

use teso_core::config::{ExperimentConfig, Variant};
use teso_core::eval::{evaluate, recognition_stages, sensitivity_sweep, Condition, RecReport, SensitivityReport};
use teso_core::synthdata::{generate_dataset, Split};
use teso_core::textcues::{MockReasoner, PromptTemplate};
use teso_core::train::{extract_cues, train, Pipeline, Prepared, TrainOptions};

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub val_miou: f64,
    pub sweep: SensitivityReport,
    pub rec: RecReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub seconds: f64,
}

impl RunSummary {
    pub fn test_miou(&self) -> f64 {
        self.sweep.baseline.miou
    }

    pub fn mute_delta_m(&self) -> f64 {
        self.sweep.get(Condition::Mute).map_or(f64::NAN, |c| c.delta_m)
    }
}

/// Trains `config` from scratch on its own benchmark and scores it.
pub fn run(config: &ExperimentConfig) -> RunSummary {
    let start = Instant::now();
    let ds = generate_dataset(&config.data, config.seed).expect("dataset");
    let mut pipe = Pipeline::new(config).expect("pipeline");
    let template = PromptTemplate::row(config.textcues.template).expect("template");
    let client = MockReasoner::new(config.data.vocabulary.clone());
    let prep = |pipe: &Pipeline, split: Split| -> Vec<Prepared> {
        ds.split(split)
            .iter()
            .map(|s| {
                let cues = extract_cues(&pipe.config.textcues, &template, &client, &config.data.vocabulary, s).expect("cues");
                pipe.prepare(s, cues).expect("prepare")
            })
            .collect()
    };
    let (tr, va, te) = (prep(&pipe, Split::Train), prep(&pipe, Split::Val), prep(&pipe, Split::Test));
    let outcome = train(&mut pipe, &tr, &va, &TrainOptions::default(), &mut |_| {}).expect("training");
    let val = evaluate(&pipe, &va, Condition::Normal, false).expect("val");
    let sweep = sensitivity_sweep(&pipe, ds.split(Split::Test), &te).expect("sweep");
    let rec = recognition_stages(&pipe, ds.split(Split::Test), &te).expect("rec");
    RunSummary {
        val_miou: val.miou,
        sweep,
        rec,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Memoized runs keyed by variant and seed.
#[derive(Default)]
pub struct Runs {
    done: BTreeMap<(String, u64), RunSummary>,
}

impl Runs {
    pub fn get(&mut self, variant: Variant, seed: u64) -> RunSummary {
        let key = (variant.name(), seed);
        if let Some(r) = self.done.get(&key) {
            return r.clone();
        }
        let base = ExperimentConfig { seed, ..ExperimentConfig::default() };
        let cfg = variant.apply(&base).expect("variant");
        let r = run(&cfg);
        eprintln!(
            "  run {:<16} seed {seed}: val mIoU {:.4}, test mIoU {:.4}, mute delta_m {:.1}%, best epoch {}/{}, {:.0}s",
            key.0,
            r.val_miou,
            r.test_miou(),
            r.mute_delta_m(),
            r.best_epoch,
            r.epochs_run,
            r.seconds
        );
        self.done.insert(key, r.clone());
        r
    }
}
