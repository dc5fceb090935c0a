//! Prompt template files and the per-configuration cue cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teso_core::config::{ClientKind, CueSource, TextCueConfig};
use teso_core::synthdata::{scene_description, SceneSample, Vocabulary};
use teso_core::textcues::{builtin_templates, build_prompt, parse_nouns, reason_cues, CueExtraction, LlmClient, MockReasoner, PromptTemplate};

use crate::error::{CliError, Result};
use crate::fsutil::{read_json, sha256_hex, write_if_changed, write_json};
use crate::llm::{map_bounded, HttpClient};

pub fn template_path(dir: &Path, row: u8) -> PathBuf {
    dir.join(format!("row{row:02}.toml"))
}

/// Writes the built-in rows that do not exist yet; edited files are kept.
pub fn write_builtin_templates(dir: &Path) -> Result<usize> {
    let mut n = 0;
    for t in builtin_templates() {
        let p = template_path(dir, t.number);
        if !p.exists() {
            write_if_changed(&p, toml::to_string(&t).expect("template serializes").as_bytes())?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn load_template(dir: &Path, row: u8) -> Result<PromptTemplate> {
    let p = template_path(dir, row);
    if !p.exists() {
        return Ok(PromptTemplate::row(row)?);
    }
    let text = fs::read_to_string(&p).map_err(CliError::io(&p))?;
    let t: PromptTemplate = toml::from_str(&text).map_err(|source| CliError::Toml { path: p.clone(), source })?;
    if t.number != row {
        return Err(teso_core::Error::Config(format!("{} declares row {}", p.display(), t.number)).into());
    }
    t.validate()?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedCue {
    /// Hash of the caption the cues were extracted from.
    pub caption_sha: String,
    pub extraction: CueExtraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueCache {
    pub source: CueSource,
    pub template: u8,
    /// Hash of the template content, or empty for the noun parser.
    pub template_sha: String,
    pub client: ClientKind,
    pub model: String,
    pub entries: BTreeMap<String, CachedCue>,
}

impl CueCache {
    pub fn get(&self, id: &str) -> Option<&CueExtraction> {
        self.entries.get(id).map(|c| &c.extraction)
    }
}

/// File name of the cache for one cue configuration.
pub fn cache_name(cfg: &TextCueConfig) -> String {
    match cfg.source {
        CueSource::NounParser => "noun_parser.json".into(),
        CueSource::Reasoner => {
            let client = match cfg.client.kind {
                ClientKind::Mock => "mock".to_string(),
                ClientKind::Http => format!("http-{}", cfg.client.model.replace(|c: char| !c.is_ascii_alphanumeric(), "_")),
            };
            format!("reasoner-row{:02}-{client}.json", cfg.template)
        }
    }
}

/// Client selected by the config.
pub fn make_client(cfg: &TextCueConfig, vocabulary: &Vocabulary) -> Box<dyn LlmClient + Sync> {
    match cfg.client.kind {
        ClientKind::Mock => Box::new(MockReasoner::new(vocabulary.clone())),
        ClientKind::Http => Box::new(HttpClient::new(&cfg.client)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExtractSummary {
    pub reused: usize,
    pub extracted: usize,
    pub warnings: usize,
}

/// Fills the cache at `path` for `samples`, reusing entries whose caption is
/// unchanged. Cache writes happen only when something new was extracted.
pub fn extract_all(
    path: &Path,
    cfg: &TextCueConfig,
    template: &PromptTemplate,
    client: &(dyn LlmClient + Sync),
    vocabulary: &Vocabulary,
    samples: &[&SceneSample],
) -> Result<(CueCache, ExtractSummary)> {
    let template_sha = match cfg.source {
        CueSource::NounParser => String::new(),
        CueSource::Reasoner => sha256_hex(&serde_json::to_vec(template).expect("template serializes")),
    };
    let fresh = CueCache {
        source: cfg.source,
        template: cfg.template,
        template_sha,
        client: cfg.client.kind,
        model: cfg.client.model.clone(),
        entries: BTreeMap::new(),
    };
    let mut cache = match read_json::<CueCache>(path) {
        Ok(c) if CueCache { entries: BTreeMap::new(), ..c.clone() } == fresh => c,
        Ok(_) => {
            log::info!("cue cache {} was built with other settings; rebuilding", path.display());
            fresh
        }
        Err(CliError::Missing(_)) => fresh,
        Err(e) => return Err(e),
    };
    let captions: Vec<(String, String)> = samples.iter().map(|s| (s.id.clone(), scene_description(s))).collect();
    let todo: Vec<&(String, String)> = captions
        .iter()
        .filter(|(id, cap)| cache.entries.get(id).is_none_or(|c| c.caption_sha != sha256_hex(cap.as_bytes())))
        .collect();
    let mut summary = ExtractSummary { reused: captions.len() - todo.len(), ..ExtractSummary::default() };
    let results = match cfg.source {
        CueSource::NounParser => todo.iter().map(|(_, cap)| Ok(parse_nouns(cap, vocabulary))).collect(),
        CueSource::Reasoner => {
            let lanes = if cfg.client.kind == ClientKind::Http { cfg.client.max_in_flight } else { 1 };
            map_bounded(&todo, lanes, |(_, cap)| reason_cues(client, &build_prompt(template, cap)))
        }
    };
    for ((id, cap), r) in todo.iter().zip(results) {
        let extraction: CueExtraction = r?;
        if let Some(w) = &extraction.warning {
            log::warn!("sample {id}: {w}");
            summary.warnings += 1;
        }
        cache.entries.insert(id.clone(), CachedCue { caption_sha: sha256_hex(cap.as_bytes()), extraction });
        summary.extracted += 1;
    }
    if summary.extracted > 0 || !path.exists() {
        write_json(path, &cache)?;
    }
    Ok((cache, summary))
}
