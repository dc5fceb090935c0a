//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Property criteria (1-4, 8) fail the process when they fail. The trained
//! experiments (5-7) report FAIL without failing the process unless
//! `TESO_STRICT_ACCEPTANCE=1` is set. `TESO_ACCEPTANCE_ONLY=1,3` runs a
//! subset.

mod experiments;
mod props;

use std::time::Instant;

use teso_core::config::{ExperimentConfig, Variant};
use teso_core::synthdata::{generate_dataset, Split};
use teso_core::textcues::{MockReasoner, PromptTemplate};
use teso_core::train::{extract_cues, train, Pipeline, Prepared, TrainOptions};

use experiments::Runs;

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

const SEEDS: [u64; 3] = [7, 8, 9];

/// Criterion 5.
fn preference(runs: &mut Runs) -> Verdict {
    let full = runs.get(Variant::Full, 7);
    let no_text = runs.get(Variant::NoText, 7);
    let (dm_full, dm_abl) = (full.mute_delta_m(), no_text.mute_delta_m());
    let secs = full.seconds + no_text.seconds;
    let pass = full.test_miou() >= 0.70
        && no_text.test_miou() >= 0.70
        && dm_full >= 1.5 * dm_abl
        && dm_full >= 25.0
        && secs <= 900.0;
    Verdict::new(
        pass,
        format!(
            "normal mIoU full {:.4} / no_text {:.4}; mute delta_m full {dm_full:.1}% vs no_text {dm_abl:.1}% (need >= 1.5x and >= 25%); {secs:.0}s for both runs",
            full.test_miou(),
            no_text.test_miou()
        ),
    )
}

/// Criterion 6.
fn ordering(runs: &mut Runs) -> Verdict {
    let full = runs.get(Variant::Full, 7).val_miou;
    let ablations = [
        Variant::NoText,
        Variant::NoAudio,
        Variant::NoTextAudio,
        Variant::NoInfonce,
        Variant::NoDynamicMask,
        Variant::NoPmqs,
        Variant::NoSedam,
    ];
    let mut beaten = Vec::new();
    let mut parts = vec![format!("full {full:.4}")];
    for v in ablations {
        let m = runs.get(v, 7).val_miou;
        parts.push(format!("{} {m:.4}", v.name()));
        if m > full {
            beaten.push(v.name());
        }
    }
    // One misleading row per seed so every misleading template is used once.
    let misleading_rows = [7u8, 8, 9];
    let (mut ins, mut mis, mut irr) = (0.0, 0.0, 0.0);
    for (k, &seed) in SEEDS.iter().enumerate() {
        ins += runs.get(Variant::PromptRow(1), seed).val_miou / 3.0;
        mis += runs.get(Variant::PromptRow(misleading_rows[k]), seed).val_miou / 3.0;
        irr += runs.get(Variant::PromptRow(10), seed).val_miou / 3.0;
    }
    let pass = beaten.is_empty() && ins >= mis && mis >= irr;
    Verdict::new(
        pass,
        format!(
            "val mIoU [{}]; ablations above full: {:?}; templates over seeds {SEEDS:?}: instructive {ins:.4}, misleading {mis:.4}, irrelevant {irr:.4}",
            parts.join(", "),
            beaten
        ),
    )
}

/// Criterion 7.
fn recognition(runs: &mut Runs) -> Verdict {
    let r = runs.get(Variant::Full, 7).rec;
    let pass = r.stage1_ap >= 0.9 && r.stage2_ap >= r.stage1_ap - 0.05 && r.stage2_cues <= r.stage1_cues;
    Verdict::new(
        pass,
        format!("AP stage 1 {:.3} ({} cues), stage 2 {:.3} ({} cues)", r.stage1_ap, r.stage1_cues, r.stage2_ap, r.stage2_cues),
    )
}

fn short_run(cfg: &ExperimentConfig, steps: u64) -> (f64, u64) {
    let ds = generate_dataset(&cfg.data, cfg.seed).unwrap();
    let mut pipe = Pipeline::new(cfg).unwrap();
    let template = PromptTemplate::row(cfg.textcues.template).unwrap();
    let client = MockReasoner::new(cfg.data.vocabulary.clone());
    let prep = |split: Split| -> Vec<Prepared> {
        ds.split(split)
            .iter()
            .map(|s| pipe.prepare(s, extract_cues(&cfg.textcues, &template, &client, &cfg.data.vocabulary, s).unwrap()).unwrap())
            .collect()
    };
    let (tr, va) = (prep(Split::Train), prep(Split::Val));
    let out = train(&mut pipe, &tr, &va, &TrainOptions { max_steps: Some(steps), epochs: None }, &mut |_| {}).unwrap();
    (out.final_loss, pipe.store.fingerprint())
}

/// Criterion 8.
fn determinism() -> Verdict {
    use teso::dataset_io::write_dataset;
    use teso::layout::Layout;

    let cfg = ExperimentConfig::default().resolved().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        write_dataset(&Layout::new(dir.path()), &generate_dataset(&cfg.data, cfg.seed).unwrap()).unwrap();
    }
    let files = |root: &std::path::Path| -> Vec<(std::path::PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    let (fa, fb) = (files(a.path()), files(b.path()));
    let data_same = !fa.is_empty() && fa == fb;

    let small = ExperimentConfig {
        data: teso_core::synthdata::GenerationConfig { train: 24, val: 8, test: 0, ..Default::default() },
        ..ExperimentConfig::default()
    };
    let (l1, f1) = short_run(&small, 12);
    let (l2, f2) = short_run(&small, 12);
    let losses_same = l1 == l2 && f1 == f2 && l1.is_finite();

    let snap = toml::to_string(&cfg).unwrap();
    let back: ExperimentConfig = toml::from_str(&snap).unwrap();
    let c = &back;
    let defaults = (c.loss.bce, c.loss.dice, c.loss.cls, c.loss.info_nce) == (5.0, 5.0, 2.0, 1.0)
        && c.sedam.layers == 4
        && (c.optim.lr_adapters, c.optim.lr_other) == (1e-4, 1e-3)
        && back == cfg;
    Verdict::new(
        data_same && losses_same && defaults,
        format!(
            "{} dataset files byte-identical: {data_same}; rerun final loss {l1:.12} vs {l2:.12} and parameter fingerprints equal: {losses_same}; snapshot defaults (weights 5,5,2,1; 4 layers; lr 1e-4/1e-3): {defaults}",
            fa.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<u8>> = std::env::var("TESO_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("TESO_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut runs = Runs::default();
    type Check<'a> = (u8, &'a str, bool, Box<dyn FnOnce(&mut Runs) -> Verdict>);
    let checks: Vec<Check> = vec![
        (1, "mask semantics", true, Box::new(|_| props::mask_semantics())),
        (2, "gradient checks", true, Box::new(|_| props::gradients())),
        (3, "oracle equivalences", true, Box::new(|_| props::oracles())),
        (4, "closed-form losses", true, Box::new(|_| props::closed_forms())),
        (8, "determinism and config fidelity", true, Box::new(|_| determinism())),
        (5, "segmentation preference under mute", false, Box::new(preference)),
        (7, "cue recognition staging", false, Box::new(recognition)),
        (6, "ablation ordering", false, Box::new(ordering)),
    ];
    let mut hard_failures = 0;
    let mut lines = Vec::new();
    for (id, name, property, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = check(&mut runs);
        let line = format!(
            "{} criterion {id} ({name}): {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push(line);
        if !v.pass && (property || strict) {
            hard_failures += 1;
        }
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("  {}", l.split(':').next().unwrap_or(l));
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
