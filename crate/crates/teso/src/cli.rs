//! Command-line interface.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use teso_core::config::Variant;
use teso_core::synthdata::Split;
use teso_core::train::TrainOptions;

use crate::commands::{self, ablation_table, Context};
use crate::config_io::{config_snapshot, load_config};
use crate::error::{CliError, Result};
use crate::layout::{checkpoint_path, Layout, ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "teso", version, about = "Text-guided sounding object segmentation experiments")]
pub struct Cli {
    /// TOML config file; defaults apply to every key it omits.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Artifact root.
    #[arg(long, env = ROOT_ENV, default_value = crate::layout::DEFAULT_ROOT, global = true)]
    pub root: PathBuf,
    /// More log output; repeat for trace.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved config.
    Config,
    /// Generate the synthetic benchmark.
    GenData,
    /// Run cue extraction for every sample and cache the result.
    ExtractCues,
    /// Train a model.
    Train {
        /// Run directory name under `runs/`.
        #[arg(long, default_value = "full")]
        name: String,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Overrides `optim.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint under normal audio.
    Eval {
        /// Defaults to the `full` run's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Mute and white-noise audio substitution sweep with plots.
    AudioControl {
        /// Defaults to the `full` run's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Compare an ablation variant against the full model.
    Ablate {
        /// no_text, no_audio, no_text_audio, no_infonce, no_dynamic_mask, no_pmqs,
        /// no_sedam, noun_parser, one_shot, prompt_rows_1_to_10 or prompt_row_N.
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        /// Train every configuration instead of reusing the baseline checkpoint.
        #[arg(long)]
        retrain: bool,
        /// Defaults to the `full` run's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: Split,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown split {s:?}; use train, val or test"))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match Variant::parse(s) {
        Ok(Variant::Full) => Err("full is the baseline; pick an ablation variant".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

impl Cli {
    pub fn log_level(&self) -> log::LevelFilter {
        match self.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    }
}

/// Runs one parsed command and returns what to print on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let config = load_config(cli.config.as_deref(), &cli.overrides)?;
    let ctx = Context::new(Layout::new(&cli.root), &config)?;
    let default_ck = || checkpoint_path(&ctx.layout.run_dir("full"));
    Ok(match &cli.command {
        Command::Config => config_snapshot(&ctx.config),
        Command::GenData => {
            let s = commands::gen_data(&ctx)?;
            format!("{} files written, {} unchanged under {}", s.written, s.unchanged, ctx.layout.data_dir().display())
        }
        Command::ExtractCues => {
            let s = commands::extract_cues(&ctx)?;
            format!("{} extracted, {} reused, {} warnings", s.extracted, s.reused, s.warnings)
        }
        Command::Train { name, max_steps, epochs } => {
            let r = commands::train_run(&ctx, name, &TrainOptions { max_steps: *max_steps, epochs: *epochs })?;
            json(&r)
        }
        Command::Eval { checkpoint, split } => {
            json(&commands::eval_checkpoint(&ctx.layout, checkpoint.clone().unwrap_or_else(default_ck).as_path(), *split)?)
        }
        Command::AudioControl { checkpoint, split } => {
            let ck = checkpoint.clone().unwrap_or_else(default_ck);
            let r = commands::audio_control(&ctx.layout, &ck, *split)?;
            let mut s = format!("normal: mIoU {:.4} F {:.4}\n", r.sensitivity.baseline.miou, r.sensitivity.baseline.fscore);
            for c in &r.sensitivity.conditions {
                s += &format!(
                    "{}: mIoU {:.4} F {:.4} delta_m {:.1}% delta_f {:.1}%\n",
                    c.condition.name(),
                    c.report.miou,
                    c.report.fscore,
                    c.delta_m,
                    c.delta_f
                );
            }
            let rec = &r.recognition;
            s += &format!(
                "REC AP stage 1 {:.3} ({} cues), stage 2 {:.3} ({} cues)",
                rec.stage1_ap, rec.stage1_cues, rec.stage2_ap, rec.stage2_cues
            );
            s
        }
        Command::Ablate { variant, retrain, checkpoint, split } => {
            let rows = commands::ablate(&ctx, *variant, *retrain, checkpoint.as_deref(), *split)?;
            ablation_table(&rows)
        }
    })
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

/// Parses `args`, runs, prints and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { crate::error::exit::CONFIG } else { crate::error::exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let log_file = Layout::new(&cli.root).log_file();
    if let Err(e) = crate::logging::init(cli.log_level(), Some(&log_file)) {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            crate::error::exit::OK
        }
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> i32 {
    log::error!("{e}");
    eprintln!("error: {e}");
    e.exit_code()
}
