//! Caption-to-cue extraction: prompt templates, an LLM client interface, a
//! deterministic rule-based reasoner, a noun-parser baseline, and
//! recognition scoring.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::hash_str;
use crate::synthdata::{Vocabulary, EXPLICIT_SILENCE_WORDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateCategory {
    Instructive,
    Misleading,
    Irrelevant,
}

/// What the reasoner is being asked for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerMode {
    Instructive,
    MostPossible,
    AnyObjects,
    Background,
    Irrelevant,
}

impl ReasonerMode {
    pub fn category(self) -> TemplateCategory {
        match self {
            ReasonerMode::Instructive => TemplateCategory::Instructive,
            ReasonerMode::Irrelevant => TemplateCategory::Irrelevant,
            _ => TemplateCategory::Misleading,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub caption: String,
    pub reasoning: String,
    pub answer: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Row number, 1 to 10.
    pub number: u8,
    pub category: TemplateCategory,
    pub mode: ReasonerMode,
    pub shots: usize,
    pub uses_cot: bool,
    pub system_text: String,
    pub demonstrations: Vec<Demonstration>,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.shots != self.demonstrations.len() {
            return Err(Error::Config(format!(
                "template {}: shots = {} but {} demonstrations",
                self.number,
                self.shots,
                self.demonstrations.len()
            )));
        }
        if self.uses_cot && self.demonstrations.iter().any(|d| d.reasoning.trim().is_empty()) {
            return Err(Error::Config(format!("template {}: chain-of-thought demonstration without reasoning", self.number)));
        }
        if self.mode.category() != self.category {
            return Err(Error::Config(format!("template {}: mode does not match category", self.number)));
        }
        Ok(())
    }

    /// One of the ten built-in rows.
    pub fn row(number: u8) -> Result<Self> {
        builtin_templates()
            .into_iter()
            .find(|t| t.number == number)
            .ok_or_else(|| Error::Config(format!("no prompt template row {number}")))
    }
}

const FORMAT_HINT: &str = "Reply with the final answer as a bracketed list, for example [dog, guitar], or [] if there is none.";

fn demos() -> Vec<Demonstration> {
    let d = |caption: &str, reasoning: &str, answer: &[&str]| Demonstration {
        caption: caption.to_string(),
        reasoning: reasoning.to_string(),
        answer: answer.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        d(
            "In this scene, a man is singing while a guitar hangs on a stand.",
            "The objects are man and guitar. The man is singing, which produces sound. The guitar hangs on a stand and nobody touches it, so it makes no sound. The sounding group is man.",
            &["man"],
        ),
        d(
            "In this scene, a dog is barking at the door, a car is parked by the curb and a lamp stands on the desk.",
            "The objects are dog, car and lamp. Barking is a sound, so the dog is sounding. A parked car is not running. A lamp does not make sound. The sounding group is dog.",
            &["dog"],
        ),
        d(
            "In this scene, someone plays a melody on a piano and a bird chirps on a branch.",
            "The objects are piano and bird. The piano is being played, so it sounds. Chirping is a sound made by the bird. The sounding group is piano and bird.",
            &["piano", "bird"],
        ),
    ]
}

/// The ten template rows: 1-6 instructive (few/one/zero-shot, with and
/// without reasoning), 7-9 misleading, 10 irrelevant.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    let cot_sys = format!(
        "You read a description of a scene and decide which objects in it are producing sound right now. \
         Sort the objects into those that take part in a sound-making interaction and those that do not, \
         think step by step, then give the sounding group. {FORMAT_HINT}"
    );
    let direct_sys = format!("You read a description of a scene and list the objects in it that are producing sound right now. {FORMAT_HINT}");
    let all = demos();
    let instructive = |number: u8, shots: usize, uses_cot: bool, system_text: String| PromptTemplate {
        number,
        category: TemplateCategory::Instructive,
        mode: ReasonerMode::Instructive,
        shots,
        uses_cot,
        system_text,
        demonstrations: all[..shots].to_vec(),
    };
    let bare = |number: u8, mode: ReasonerMode, text: &str| PromptTemplate {
        number,
        category: mode.category(),
        mode,
        shots: 0,
        uses_cot: false,
        system_text: format!("{text} {FORMAT_HINT}"),
        demonstrations: Vec::new(),
    };
    vec![
        instructive(1, 3, true, cot_sys.clone()),
        instructive(2, 1, true, cot_sys),
        instructive(3, 0, true, format!("Let's think step by step to obtain sounding objects in the caption. {FORMAT_HINT}")),
        instructive(4, 3, false, direct_sys.clone()),
        instructive(5, 1, false, direct_sys),
        instructive(6, 0, false, format!("Please tell me the sounding objects in the caption. {FORMAT_HINT}")),
        bare(7, ReasonerMode::MostPossible, "Please tell me the most possible sounding object in the caption."),
        bare(8, ReasonerMode::AnyObjects, "Please tell me any objects in the caption."),
        bare(9, ReasonerMode::Background, "Please tell me the background objects in the caption."),
        bare(10, ReasonerMode::Irrelevant, "Tell me any random object."),
    ]
}

pub fn format_answer(cues: &[String]) -> String {
    format!("[{}]", cues.join(", "))
}

const CAPTION_TAG: &str = "Caption: ";

/// System text, then each demonstration, then the query caption.
pub fn build_prompt(template: &PromptTemplate, caption: &str) -> String {
    let mut out = String::new();
    out.push_str(&template.system_text);
    out.push_str("\n\n");
    for d in &template.demonstrations {
        out.push_str(CAPTION_TAG);
        out.push_str(&d.caption);
        out.push('\n');
        if template.uses_cot {
            out.push_str("Reasoning: ");
            out.push_str(&d.reasoning);
            out.push('\n');
        }
        out.push_str("Answer: ");
        out.push_str(&format_answer(&d.answer));
        out.push_str("\n\n");
    }
    out.push_str(CAPTION_TAG);
    out.push_str(caption);
    out.push('\n');
    out
}

// ---------------------------------------------------------------------------
// Clients and parsing

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Collected,
    Filtered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueExtraction {
    pub cues: Vec<String>,
    pub raw_response: String,
    pub stage: Stage,
    /// Set when the response could not be parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl CueExtraction {
    pub fn collected(cues: Vec<String>, raw_response: String) -> Self {
        Self { cues, raw_response, stage: Stage::Collected, warning: None }
    }

    /// Keeps the cues whose dynamic-mask entry is open (exactly 0).
    pub fn filtered(&self, mask: &[f64]) -> Self {
        let cues = self
            .cues
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m == 0.0)
            .map(|(c, _)| c.clone())
            .collect();
        Self { cues, raw_response: self.raw_response.clone(), stage: Stage::Filtered, warning: self.warning.clone() }
    }
}

/// Anything that answers a text prompt with text.
pub trait LlmClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Items of the last `[...]` list in `response`, trimmed, unquoted and
/// de-duplicated; `None` if there is no list.
pub fn parse_answer(response: &str) -> Option<Vec<String>> {
    let close = response.rfind(']')?;
    let open = response[..close].rfind('[')?;
    let body = &response[open + 1..close];
    let mut out: Vec<String> = Vec::new();
    for item in body.split(',') {
        let item = item.trim().trim_matches(|c| c == '"' || c == '\'').trim().to_lowercase();
        if !item.is_empty() && !out.contains(&item) {
            out.push(item);
        }
    }
    Some(out)
}

pub fn reason_cues(client: &dyn LlmClient, prompt: &str) -> Result<CueExtraction> {
    let raw = client.complete(prompt)?;
    Ok(match parse_answer(&raw) {
        Some(cues) => CueExtraction::collected(cues, raw),
        None => CueExtraction {
            cues: Vec::new(),
            raw_response: raw,
            stage: Stage::Collected,
            warning: Some("response contains no bracketed answer list".into()),
        },
    })
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase())
}

/// Every vocabulary noun in the caption, in order of first occurrence.
pub fn parse_nouns(caption: &str, vocabulary: &Vocabulary) -> CueExtraction {
    let mut cues: Vec<String> = Vec::new();
    for w in words(caption) {
        if vocabulary.get(&w).is_some() && !cues.contains(&w) {
            cues.push(w);
        }
    }
    let raw = format_answer(&cues);
    CueExtraction::collected(cues, raw)
}

// ---------------------------------------------------------------------------
// Rule-based reasoner

const INTERACTION_WORDS: &[&str] = &[
    "sing", "sings", "singing", "talk", "talks", "talking", "shout", "shouts", "shouting", "strum", "strums", "strummed",
    "strumming", "play", "plays", "played", "playing", "bark", "barks", "barking", "growl", "growls", "honk", "honks",
    "rev", "revs", "roar", "roars", "chirp", "chirps", "tweet", "tweets", "melody",
];

const REST_WORDS: &[&str] = &[
    "sleep", "sleeps", "sleeping", "rest", "rests", "resting", "lie", "lies", "lean", "leans", "hang", "hangs", "parked",
    "idle", "untouched", "closed", "covered", "still", "perches", "sits", "stands", "off", "crossed",
];

const RANDOM_OBJECTS: &[&str] = &["teapot", "umbrella", "cactus", "kite", "volcano", "penguin", "anchor", "lantern"];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum ClauseKind {
    Sounding,
    Silent,
    Neutral,
}

struct Clause {
    text: String,
    nouns: Vec<String>,
    kind: ClauseKind,
}

fn clauses(caption: &str, vocab: &Vocabulary) -> Vec<Clause> {
    let mut text = caption.to_lowercase();
    for sep in [" while ", " and ", " but ", ";", "."] {
        text = text.replace(sep, ",");
    }
    text.split(',')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|c| {
            let ws: Vec<String> = words(c).collect();
            let mut nouns: Vec<String> = Vec::new();
            for w in &ws {
                if vocab.get(w).is_some() && !nouns.contains(w) {
                    nouns.push(w.clone());
                }
            }
            let has = |list: &[&str]| ws.iter().any(|w| list.contains(&w.as_str()));
            let explicit_silence = EXPLICIT_SILENCE_WORDS.iter().any(|w| c.contains(w));
            let kind = if explicit_silence || has(REST_WORDS) {
                ClauseKind::Silent
            } else if has(INTERACTION_WORDS) {
                ClauseKind::Sounding
            } else {
                ClauseKind::Neutral
            };
            Clause { text: c.to_string(), nouns, kind }
        })
        .collect()
}

struct Judgement {
    sounding: Vec<String>,
    uncertain: Vec<String>,
    all: Vec<String>,
    reasoning: String,
}

fn judge(caption: &str, vocab: &Vocabulary) -> Judgement {
    let mut j = Judgement { sounding: Vec::new(), uncertain: Vec::new(), all: Vec::new(), reasoning: String::new() };
    let cls = clauses(caption, vocab);
    for c in &cls {
        for n in &c.nouns {
            if !j.all.contains(n) {
                j.all.push(n.clone());
            }
        }
    }
    if j.all.is_empty() {
        j.reasoning = "The caption mentions no objects, so nothing is sounding.".into();
        return j;
    }
    let mut steps = vec![format!("The objects are {}.", j.all.join(", "))];
    for c in cls.iter().filter(|c| !c.nouns.is_empty()) {
        let (audible, mute): (Vec<&String>, Vec<&String>) = c.nouns.iter().partition(|n| vocab.is_audible(n));
        for n in &mute {
            steps.push(format!("A {n} cannot make sound by itself."));
        }
        if audible.is_empty() {
            continue;
        }
        let names: Vec<String> = audible.iter().map(|s| s.to_string()).collect();
        let list = names.join(" and ");
        match c.kind {
            ClauseKind::Sounding => {
                steps.push(format!("\"{}\" is a sound-making interaction, so {list} is sounding.", c.text));
                for n in names {
                    if !j.sounding.contains(&n) {
                        j.sounding.push(n);
                    }
                }
            }
            ClauseKind::Silent => {
                steps.push(format!("\"{}\" describes no interaction, so {list} is probably silent.", c.text));
            }
            ClauseKind::Neutral => {
                steps.push(format!("\"{}\" does not say what {list} is doing, so {list} may be sounding.", c.text));
                for n in names {
                    if !j.uncertain.contains(&n) {
                        j.uncertain.push(n);
                    }
                }
            }
        }
    }
    j.uncertain.retain(|n| !j.sounding.contains(n));
    steps.push(if j.sounding.is_empty() && j.uncertain.is_empty() {
        "No object is sounding.".to_string()
    } else {
        let mut group = j.sounding.clone();
        group.extend(j.uncertain.iter().cloned());
        format!("The sounding group is {}.", group.join(", "))
    });
    j.reasoning = steps.join(" ");
    j
}

/// Deterministic stand-in for a language model reading a caption.
pub fn mock_reasoner(caption: &str, mode: ReasonerMode, vocabulary: &Vocabulary) -> String {
    let j = judge(caption, vocabulary);
    let mut instructive = j.sounding.clone();
    instructive.extend(j.uncertain.iter().cloned());
    let (reasoning, answer) = match mode {
        ReasonerMode::Instructive => (j.reasoning.clone(), instructive),
        ReasonerMode::MostPossible => {
            let pick = instructive
                .first()
                .or_else(|| j.all.iter().find(|n| vocabulary.is_audible(n)))
                .or_else(|| j.all.first())
                .cloned();
            ("I pick the single most likely sound source.".to_string(), pick.into_iter().collect())
        }
        ReasonerMode::AnyObjects => ("I list every object in the caption.".to_string(), j.all.clone()),
        ReasonerMode::Background => {
            let bg = j.all.iter().filter(|n| !instructive.contains(n)).cloned().collect();
            ("I list the objects that are not doing anything.".to_string(), bg)
        }
        ReasonerMode::Irrelevant => {
            let lower = caption.to_lowercase();
            let start = (hash_str(caption) % RANDOM_OBJECTS.len() as u64) as usize;
            let pick = (0..RANDOM_OBJECTS.len())
                .map(|k| RANDOM_OBJECTS[(start + k) % RANDOM_OBJECTS.len()])
                .find(|w| !lower.contains(w))
                .unwrap_or(RANDOM_OBJECTS[start]);
            ("Here is a random object.".to_string(), vec![pick.to_string()])
        }
    };
    format!("{reasoning}\nAnswer: {}", format_answer(&answer))
}

/// Reads the request type and the query caption out of a prompt built by
/// [`build_prompt`] and answers with [`mock_reasoner`].
#[derive(Clone, Debug)]
pub struct MockReasoner {
    pub vocabulary: Vocabulary,
}

impl MockReasoner {
    pub fn new(vocabulary: Vocabulary) -> Self {
        Self { vocabulary }
    }

    pub fn detect_mode(prompt: &str) -> ReasonerMode {
        let head = prompt.split(CAPTION_TAG).next().unwrap_or("");
        if head.contains("most possible sounding object") {
            ReasonerMode::MostPossible
        } else if head.contains("any objects in the caption") {
            ReasonerMode::AnyObjects
        } else if head.contains("background objects") {
            ReasonerMode::Background
        } else if head.contains("random object") {
            ReasonerMode::Irrelevant
        } else {
            ReasonerMode::Instructive
        }
    }
}

impl LlmClient for MockReasoner {
    fn complete(&self, prompt: &str) -> Result<String> {
        let caption = prompt
            .rfind(CAPTION_TAG)
            .map(|i| prompt[i + CAPTION_TAG.len()..].lines().next().unwrap_or("").trim())
            .ok_or_else(|| Error::Input("prompt has no caption line".into()))?;
        Ok(mock_reasoner(caption, Self::detect_mode(prompt), &self.vocabulary))
    }
}

// ---------------------------------------------------------------------------
// Scoring

/// Micro-averaged average precision of ranked cue lists.
///
/// Cues from all samples are pooled and ordered by their position in their
/// own list (ties broken by sample order); a cue is a hit when it is in that
/// sample's ground-truth set. AP sums precision at every hit times the recall
/// step `1 / total_positives`. With no positives at all the score is 1 for
/// an empty prediction and 0 otherwise.
pub fn score_recognition(extractions: &[CueExtraction], gt: &[Vec<String>]) -> Result<f64> {
    if extractions.len() != gt.len() {
        return Err(Error::Input(format!("{} extractions vs {} label sets", extractions.len(), gt.len())));
    }
    let positives: usize = gt
        .iter()
        .map(|g| {
            let mut u = g.clone();
            u.sort();
            u.dedup();
            u.len()
        })
        .sum();
    let mut pooled: Vec<(usize, usize, bool)> = Vec::new();
    for (s, (e, g)) in extractions.iter().zip(gt).enumerate() {
        let mut seen: Vec<&String> = Vec::new();
        for (r, c) in e.cues.iter().enumerate() {
            let hit = g.contains(c) && !seen.contains(&c);
            seen.push(c);
            pooled.push((r, s, hit));
        }
    }
    if positives == 0 {
        return Ok(if pooled.is_empty() { 1.0 } else { 0.0 });
    }
    pooled.sort();
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &(_, _, hit)) in pooled.iter().enumerate() {
        if hit {
            tp += 1;
            ap += (tp as f64 / (k + 1) as f64) / positives as f64;
        }
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocabulary {
        Vocabulary::default()
    }

    fn cues(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn builtin_rows_are_valid() {
        let all = builtin_templates();
        assert_eq!(all.iter().map(|t| t.number).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        for t in &all {
            t.validate().unwrap();
        }
        let cats: Vec<_> = all.iter().map(|t| t.category).collect();
        assert!(cats[..6].iter().all(|&c| c == TemplateCategory::Instructive));
        assert!(cats[6..9].iter().all(|&c| c == TemplateCategory::Misleading));
        assert_eq!(cats[9], TemplateCategory::Irrelevant);
    }

    #[test]
    fn zero_shot_prompt_is_system_text_plus_caption() {
        let t = PromptTemplate::row(3).unwrap();
        assert!(t.system_text.starts_with("Let's think step by step to obtain sounding objects in the caption."));
        let p = build_prompt(&t, "a dog is barking");
        assert_eq!(p, format!("{}\n\nCaption: a dog is barking\n", t.system_text));
        assert_eq!(p, build_prompt(&t, "a dog is barking"));
    }

    #[test]
    fn few_shot_prompt_contains_every_reasoning() {
        let t = PromptTemplate::row(1).unwrap();
        let p = build_prompt(&t, "x");
        for d in &t.demonstrations {
            assert!(p.contains(&d.reasoning));
            assert!(p.contains(&format_answer(&d.answer)));
        }
        let direct = build_prompt(&PromptTemplate::row(4).unwrap(), "x");
        assert!(!direct.contains("Reasoning:"));
    }

    #[test]
    fn irrelevant_prompt_asks_for_random_object() {
        assert!(build_prompt(&PromptTemplate::row(10).unwrap(), "c").contains("Tell me any random object."));
    }

    #[test]
    fn invalid_template_is_rejected() {
        let mut t = PromptTemplate::row(1).unwrap();
        t.shots = 2;
        assert!(t.validate().is_err());
        let mut t = PromptTemplate::row(2).unwrap();
        t.demonstrations[0].reasoning.clear();
        assert!(t.validate().is_err());
    }

    #[test]
    fn mock_reasoner_keeps_the_interacting_group() {
        let client = MockReasoner::new(v());
        let prompt = build_prompt(&PromptTemplate::row(1).unwrap(), "a man strums a guitar while a dog sleeps");
        let e = reason_cues(&client, &prompt).unwrap();
        assert_eq!(e.cues, cues(&["man", "guitar"]));
        assert_eq!(e.stage, Stage::Collected);
        assert!(e.warning.is_none());
    }

    #[test]
    fn empty_room_has_no_cues() {
        let client = MockReasoner::new(v());
        let e = reason_cues(&client, &build_prompt(&PromptTemplate::row(6).unwrap(), "an empty room")).unwrap();
        assert!(e.cues.is_empty());
    }

    #[test]
    fn silent_guitar_is_excluded() {
        let a = mock_reasoner("In this scene, a guitar leans on the sofa, untouched and a bird chirps on a branch.", ReasonerMode::Instructive, &v());
        assert_eq!(parse_answer(&a).unwrap(), cues(&["bird"]));
    }

    #[test]
    fn misleading_and_irrelevant_modes() {
        let cap = "In this scene, a dog is barking, a man is singing and a chair stands by the table.";
        let one = parse_answer(&mock_reasoner(cap, ReasonerMode::MostPossible, &v())).unwrap();
        assert_eq!(one, cues(&["dog"]));
        let any = parse_answer(&mock_reasoner(cap, ReasonerMode::AnyObjects, &v())).unwrap();
        assert_eq!(any, cues(&["dog", "man", "chair"]));
        let bg = parse_answer(&mock_reasoner(cap, ReasonerMode::Background, &v())).unwrap();
        assert_eq!(bg, cues(&["chair"]));
        let rnd = parse_answer(&mock_reasoner(cap, ReasonerMode::Irrelevant, &v())).unwrap();
        assert_eq!(rnd.len(), 1);
        assert!(v().get(&rnd[0]).is_none() && !cap.contains(&rnd[0]));
    }

    #[test]
    fn mode_is_detected_from_prompt() {
        for (row, mode) in [(1, ReasonerMode::Instructive), (3, ReasonerMode::Instructive), (7, ReasonerMode::MostPossible), (8, ReasonerMode::AnyObjects), (9, ReasonerMode::Background), (10, ReasonerMode::Irrelevant)] {
            let p = build_prompt(&PromptTemplate::row(row).unwrap(), "a dog is barking");
            assert_eq!(MockReasoner::detect_mode(&p), mode, "row {row}");
        }
    }

    #[test]
    fn unparseable_response_gives_warning() {
        struct Broken;
        impl LlmClient for Broken {
            fn complete(&self, _: &str) -> Result<String> {
                Ok("I am not sure.".into())
            }
        }
        let e = reason_cues(&Broken, "p").unwrap();
        assert!(e.cues.is_empty());
        assert!(e.warning.is_some());
    }

    #[test]
    fn transport_errors_propagate() {
        struct Down;
        impl LlmClient for Down {
            fn complete(&self, _: &str) -> Result<String> {
                Err(Error::Transport("connection refused".into()))
            }
        }
        assert!(matches!(reason_cues(&Down, "p"), Err(Error::Transport(_))));
    }

    #[test]
    fn answer_parsing_uses_last_list() {
        assert_eq!(parse_answer("e.g. [a] ... Answer: [Dog, 'guitar', dog]").unwrap(), cues(&["dog", "guitar"]));
        assert_eq!(parse_answer("[]").unwrap(), Vec::<String>::new());
        assert!(parse_answer("none").is_none());
    }

    #[test]
    fn noun_parser_collects_in_order() {
        assert_eq!(parse_nouns("a man strums a guitar while a dog sleeps", &v()).cues, cues(&["man", "guitar", "dog"]));
        assert_eq!(parse_nouns("a guitar and another guitar", &v()).cues, cues(&["guitar"]));
        assert!(parse_nouns("the sky is blue", &v()).cues.is_empty());
    }

    #[test]
    fn recognition_ap_edge_cases() {
        let gt = vec![cues(&["man"]), cues(&["dog", "car"])];
        let perfect: Vec<_> = gt.iter().map(|g| CueExtraction::collected(g.clone(), String::new())).collect();
        assert_eq!(score_recognition(&perfect, &gt).unwrap(), 1.0);
        let empty: Vec<_> = gt.iter().map(|_| CueExtraction::collected(vec![], String::new())).collect();
        assert_eq!(score_recognition(&empty, &gt).unwrap(), 0.0);
        assert!(score_recognition(&empty[..1], &gt).is_err());
    }

    #[test]
    fn recognition_ap_matches_hand_table() {
        // pooled order: (r0, s0, man, hit) (r0, s1, guitar, hit) (r1, s0, dog, miss)
        // positives = 3; precision at the two hits is 1/1 and 2/2
        let ex = vec![
            CueExtraction::collected(cues(&["man", "dog"]), String::new()),
            CueExtraction::collected(cues(&["guitar"]), String::new()),
        ];
        let gt = vec![cues(&["man"]), cues(&["guitar", "piano"])];
        let ap = score_recognition(&ex, &gt).unwrap();
        assert!((ap - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn filtering_keeps_open_cues_only() {
        let e = CueExtraction::collected(cues(&["a", "b", "c"]), String::new());
        let f = e.filtered(&[0.0, crate::nn::MASK_NEG, 0.0, crate::nn::MASK_NEG]);
        assert_eq!(f.cues, cues(&["a", "c"]));
        assert_eq!(f.stage, Stage::Filtered);
    }
}
