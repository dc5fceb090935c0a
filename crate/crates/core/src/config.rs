//! Experiment configuration and ablation variants.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{known_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::Condition;
use crate::optim::OptimizerConfig;
use crate::pmqs::PmqsConfig;
use crate::sedam::{SedamConfig, SedamSwitches};
use crate::segmodel::{DecoderConfig, LossWeights, ModelSpec, ModelSwitches};
use crate::synthdata::GenerationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ModelConfig {
    /// Classes including no-object; 0 means vocabulary size + 1.
    pub n_c: usize,
    pub decoder: DecoderConfig,
}


#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueSource {
    /// Prompt template plus language-model client.
    Reasoner,
    NounParser,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub kind: ClientKind,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retries: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            kind: ClientKind::Mock,
            endpoint: "http://127.0.0.1:8080/v1/completions".into(),
            model: "local".into(),
            timeout_secs: 60,
            max_in_flight: 4,
            retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextCueConfig {
    pub source: CueSource,
    /// Prompt template row, 1 to 10.
    pub template: u8,
    pub client: ClientConfig,
    /// Number of cue slots.
    pub n_t: usize,
}

impl Default for TextCueConfig {
    fn default() -> Self {
        Self { source: CueSource::Reasoner, template: 1, client: ClientConfig::default(), n_t: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beta_sq: f64,
    pub conditions: Vec<Condition>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { beta_sq: 0.3, conditions: vec![Condition::Normal, Condition::Mute, Condition::Wgn10, Condition::Wgn40] }
    }
}

/// Which mechanisms are active; ablations switch exactly one off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mechanisms {
    pub text: bool,
    /// When off, the silence embedding replaces every audio feature.
    pub audio: bool,
    pub dynamic_mask: bool,
    pub pmqs: bool,
    pub sedam: bool,
}

impl Default for Mechanisms {
    fn default() -> Self {
        Self { text: true, audio: true, dynamic_mask: true, pmqs: true, sedam: true }
    }
}

impl Mechanisms {
    pub fn switches(&self) -> ModelSwitches {
        ModelSwitches {
            sedam: SedamSwitches { text: self.text, dynamic_mask: self.dynamic_mask, sedam: self.sedam },
            pmqs: self.pmqs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GenerationConfig,
    pub encoders: EncoderConfig,
    pub sedam: SedamConfig,
    pub pmqs: PmqsConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimizerConfig,
    pub textcues: TextCueConfig,
    pub eval: EvalConfig,
    pub mechanisms: Mechanisms,
    /// Upper bound on worker threads for per-sample work.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: GenerationConfig::default(),
            encoders: EncoderConfig::default(),
            sedam: SedamConfig::default(),
            pmqs: PmqsConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimizerConfig::default(),
            textcues: TextCueConfig::default(),
            eval: EvalConfig::default(),
            mechanisms: Mechanisms::default(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    /// Fills derived values (currently `n_c`) and validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.model.n_c == 0 {
            c.model.n_c = c.data.vocabulary.len() + 1;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        for name in [&self.encoders.audio, &self.encoders.visual, &self.encoders.text] {
            if !known_encoder(name) {
                return Err(Error::Config(format!("unknown encoder {name:?}")));
            }
        }
        if self.model.n_c != 0 && self.model.n_c != self.data.vocabulary.len() + 1 {
            return Err(Error::Config(format!(
                "n_c = {} but the vocabulary has {} categories plus no-object",
                self.model.n_c,
                self.data.vocabulary.len()
            )));
        }
        if !(1..=10).contains(&self.textcues.template) {
            return Err(Error::Config(format!("template row {} outside 1..=10", self.textcues.template)));
        }
        if self.textcues.n_t == 0 {
            return Err(Error::Config("n_t must be positive".into()));
        }
        let o = &self.optim;
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(o.lr_adapters >= 0.0 && o.lr_other >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(self.eval.beta_sq > 0.0) {
            return Err(Error::Config("beta_sq must be positive".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let c = self.resolved()?;
        Ok(ModelSpec {
            image_size: (c.data.height, c.data.width),
            n_c: c.model.n_c,
            encoders: c.encoders,
            sedam: c.sedam,
            pmqs: c.pmqs,
            decoder: c.model.decoder,
            seed: c.seed,
        })
    }
}

/// Named ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoText,
    NoAudio,
    NoTextAudio,
    NoInfonce,
    NoDynamicMask,
    NoPmqs,
    NoSedam,
    NounParser,
    OneShot,
    /// Expands to one run per template row.
    PromptRows1To10,
    PromptRow(u8),
}

impl Variant {
    pub const NAMED: [Variant; 11] = [
        Variant::Full,
        Variant::NoText,
        Variant::NoAudio,
        Variant::NoTextAudio,
        Variant::NoInfonce,
        Variant::NoDynamicMask,
        Variant::NoPmqs,
        Variant::NoSedam,
        Variant::NounParser,
        Variant::OneShot,
        Variant::PromptRows1To10,
    ];

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoText => "no_text".into(),
            Variant::NoAudio => "no_audio".into(),
            Variant::NoTextAudio => "no_text_audio".into(),
            Variant::NoInfonce => "no_infonce".into(),
            Variant::NoDynamicMask => "no_dynamic_mask".into(),
            Variant::NoPmqs => "no_pmqs".into(),
            Variant::NoSedam => "no_sedam".into(),
            Variant::NounParser => "noun_parser".into(),
            Variant::OneShot => "one_shot".into(),
            Variant::PromptRows1To10 => "prompt_rows_1_to_10".into(),
            Variant::PromptRow(n) => format!("prompt_row_{n}"),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        if let Some(n) = name.strip_prefix("prompt_row_") {
            let n: u8 = n.parse().map_err(|_| Error::Input(format!("bad template row in {name:?}")))?;
            if !(1..=10).contains(&n) {
                return Err(Error::Input(format!("template row {n} outside 1..=10")));
            }
            return Ok(Variant::PromptRow(n));
        }
        Self::NAMED
            .iter()
            .find(|v| v.name() == name)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown variant {name:?}")))
    }

    /// The single runs this variant stands for.
    pub fn expand(&self) -> Vec<Variant> {
        match self {
            Variant::PromptRows1To10 => (1..=10).map(Variant::PromptRow).collect(),
            v => vec![*v],
        }
    }

    /// The base configuration with this variant's one change applied.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let m = &mut c.mechanisms;
        match self {
            Variant::Full => {}
            Variant::NoText => m.text = false,
            Variant::NoAudio => m.audio = false,
            Variant::NoTextAudio => {
                m.text = false;
                m.audio = false;
            }
            Variant::NoInfonce => c.loss.info_nce = 0.0,
            Variant::NoDynamicMask => m.dynamic_mask = false,
            Variant::NoPmqs => m.pmqs = false,
            Variant::NoSedam => m.sedam = false,
            Variant::NounParser => c.textcues.source = CueSource::NounParser,
            Variant::OneShot => c.textcues.template = 2,
            Variant::PromptRow(n) => c.textcues.template = *n,
            Variant::PromptRows1To10 => {
                return Err(Error::Input("prompt_rows_1_to_10 expands to several runs; apply each row".to_string()));
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = ExperimentConfig::default().resolved().unwrap();
        assert_eq!(c.model.n_c, 9);
        assert_eq!(c.sedam.layers, 4);
        assert_eq!((c.loss.bce, c.loss.dice, c.loss.cls, c.loss.info_nce), (5.0, 5.0, 2.0, 1.0));
        assert_eq!((c.optim.lr_adapters, c.optim.lr_other), (1e-4, 1e-3));
    }

    #[test]
    fn variants_round_trip_and_toggle_one_thing() {
        let base = ExperimentConfig::default();
        for v in Variant::NAMED {
            assert_eq!(Variant::parse(&v.name()).unwrap(), v);
            for single in v.expand() {
                let c = single.apply(&base).unwrap();
                if single != Variant::Full && single != Variant::PromptRow(1) {
                    assert_ne!(c, base, "{}", single.name());
                }
            }
        }
        assert_eq!(Variant::PromptRows1To10.expand().len(), 10);
        assert!(Variant::parse("no_such").is_err());
        let c = Variant::NoTextAudio.apply(&base).unwrap();
        assert!(!c.mechanisms.text && !c.mechanisms.audio && c.mechanisms.pmqs);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut c = ExperimentConfig::default();
        c.textcues.template = 11;
        assert!(matches!(c.resolved(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.model.n_c = 3;
        assert!(matches!(c.resolved(), Err(Error::Config(_))));
    }
}
