//! Survey instruments and answer-option scoring from token probabilities.
//!
//! Every option is prompted separately as
//! `BOS question "\n" [prefix " "] option`, and scored as the product of the
//! temperature-scaled next-token probabilities of the option's tokens, all
//! read from a single forward pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::Session;
use crate::error::{Error, Result};
use crate::model::log_softmax_with_temperature;
use crate::tokenizer::{encode, TokenId, BOS};

/// Placeholder in likert questions, replaced by each adjective.
pub const ADJECTIVE_SLOT: &str = "{adjective}";
pub const QUESTION_SEPARATOR: &str = "\n";
pub const PREFIX_JOINER: &str = " ";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scoring {
    /// Raw per-option probabilities.
    Direct,
    /// Each adjective is rated on the option scale; adjectives are combined
    /// into one score per emotion.
    LikertScale {
        option_values: Vec<f64>,
        scales: BTreeMap<String, Vec<String>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instrument {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    pub options: Vec<String>,
    pub scoring: Scoring,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Casing {
    #[default]
    AsIs,
    Lower,
    Capitalized,
}

impl Casing {
    pub fn apply(self, s: &str) -> String {
        match self {
            Casing::AsIs => s.to_string(),
            Casing::Lower => s.to_lowercase(),
            Casing::Capitalized => {
                let mut c = s.chars();
                match c.next() {
                    Some(f) => f.to_uppercase().chain(c).collect(),
                    None => String::new(),
                }
            }
        }
    }
}

impl Instrument {
    /// Weekly mood question with the twelve emotion options and the `I felt` prefix.
    pub fn mood_weekly() -> Self {
        Instrument {
            id: "mood_weekly".into(),
            question: "Broadly speaking, which of the following best describe your mood and/or how you have felt in the past week?".into(),
            prefix: Some("I felt".into()),
            options: [
                "happy", "sad", "energetic", "apathetic", "inspired", "frustrated", "optimistic", "stressed",
                "content", "bored", "lonely", "scared",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            scoring: Scoring::Direct,
        }
    }

    /// PANAS-X style week instruction with scared and sad adjective lists.
    /// The adjective lists are editable config; load a file to change them.
    pub fn panasx_week() -> Self {
        let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Instrument {
            id: "panasx_week".into(),
            question: format!("To what extend have you felt {ADJECTIVE_SLOT} during the past week?"),
            prefix: None,
            options: list(&["very slightly or not at all", "a little", "moderately", "quite a bit", "extremely"]),
            scoring: Scoring::LikertScale {
                option_values: vec![1.0, 2.0, 3.0, 4.0, 5.0],
                scales: BTreeMap::from([
                    ("scared".into(), list(&["afraid", "scared", "frightened", "nervous", "jittery", "shaky"])),
                    ("sad".into(), list(&["sad", "blue", "downhearted", "alone", "lonely"])),
                ]),
            },
        }
    }

    /// Expectation for the National Health Service over the next few years.
    pub fn nhs_expectation() -> Self {
        Instrument {
            id: "nhs_expectation".into(),
            question: "Do you expect the National Health Service to get better, worse or stay the same over the next few years?".into(),
            prefix: None,
            options: vec!["get better".into(), "get worse".into()],
            scoring: Scoring::Direct,
        }
    }

    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            "mood_weekly" => Some(Self::mood_weekly()),
            "panasx_week" => Some(Self::panasx_week()),
            "nhs_expectation" => Some(Self::nhs_expectation()),
            _ => None,
        }
    }

    pub fn builtin_ids() -> [&'static str; 3] {
        ["mood_weekly", "panasx_week", "nhs_expectation"]
    }

    /// A built-in id, or a path to an instrument TOML file.
    pub fn resolve(id_or_path: &str) -> Result<Self> {
        match Self::builtin(id_or_path) {
            Some(i) => Ok(i),
            None => Self::load(Path::new(id_or_path)),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let inst: Instrument = toml::from_str(text)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("instrument serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::config(format!("instrument {}: needs at least 2 options", self.id)));
        }
        if self.options.iter().any(|o| o.is_empty()) {
            return Err(Error::config(format!("instrument {}: empty option string", self.id)));
        }
        if let Scoring::LikertScale { option_values, scales } = &self.scoring {
            if option_values.len() != self.options.len() {
                return Err(Error::config(format!(
                    "instrument {}: {} option values for {} options",
                    self.id,
                    option_values.len(),
                    self.options.len()
                )));
            }
            if option_values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(format!(
                    "instrument {}: option values must be strictly increasing",
                    self.id
                )));
            }
            if scales.is_empty() || scales.values().any(|a| a.is_empty()) {
                return Err(Error::config(format!("instrument {}: every scale needs adjectives", self.id)));
            }
            if !self.question.contains(ADJECTIVE_SLOT) {
                return Err(Error::config(format!(
                    "instrument {}: likert question lacks the {ADJECTIVE_SLOT} placeholder",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn with_prefix(mut self, prefix: Option<String>) -> Self {
        self.prefix = prefix;
        self
    }

    pub fn with_casing(mut self, casing: Casing) -> Self {
        self.options = self.options.iter().map(|o| casing.apply(o)).collect();
        self
    }

    /// Distinct adjectives across all scales, in first-seen order.
    fn adjectives(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        if let Scoring::LikertScale { scales, .. } = &self.scoring {
            for a in scales.values().flatten() {
                if !out.contains(a) {
                    out.push(a.clone());
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub option_index: usize,
    pub option: String,
    pub adjective: Option<String>,
    pub tokens: Vec<TokenId>,
    /// Positions of the option's own tokens within `tokens`.
    pub span: Range<usize>,
}

/// Question, separator and prefix: everything a prompt holds before the option.
fn stem(question: &str, prefix: Option<&str>) -> String {
    let mut s = format!("{question}{QUESTION_SEPARATOR}");
    if let Some(p) = prefix {
        s.push_str(p);
        s.push_str(PREFIX_JOINER);
    }
    s
}

fn prompt_for(question: &str, prefix: Option<&str>, option: &str) -> Result<(Vec<TokenId>, Range<usize>)> {
    let option_tokens = encode(option);
    if option_tokens.is_empty() {
        return Err(Error::config("answer option tokenizes to zero tokens"));
    }
    let mut tokens = vec![BOS];
    tokens.extend(encode(&stem(question, prefix)));
    let start = tokens.len();
    tokens.extend(option_tokens);
    let end = tokens.len();
    Ok((tokens, start..end))
}

impl Instrument {
    /// The text of a completed response, laid out exactly like a scoring prompt.
    pub fn response_text(&self, adjective: Option<&str>, option: &str) -> String {
        let question = match adjective {
            Some(a) => self.question.replace(ADJECTIVE_SLOT, a),
            None => self.question.clone(),
        };
        stem(&question, self.prefix.as_deref()) + option
    }
}

/// One prompt per option (per adjective and option for likert instruments).
pub fn build_prompts(instrument: &Instrument) -> Result<Vec<Prompt>> {
    instrument.validate()?;
    let questions: Vec<(Option<String>, String)> = match &instrument.scoring {
        Scoring::Direct => vec![(None, instrument.question.clone())],
        Scoring::LikertScale { .. } => instrument
            .adjectives()
            .into_iter()
            .map(|a| {
                let q = instrument.question.replace(ADJECTIVE_SLOT, &a);
                (Some(a), q)
            })
            .collect(),
    };
    let mut prompts = Vec::new();
    for (adjective, question) in questions {
        for (option_index, option) in instrument.options.iter().enumerate() {
            let (tokens, span) = prompt_for(&question, instrument.prefix.as_deref(), option)?;
            prompts.push(Prompt {
                option_index,
                option: option.clone(),
                adjective: adjective.clone(),
                tokens,
                span,
            });
        }
    }
    Ok(prompts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptionScore {
    pub option: String,
    pub adjective: Option<String>,
    /// Natural log of the option probability, accumulated in f64.
    pub log_prob: f64,
    pub probability: f64,
    pub temperature: f64,
    pub slice_id: Option<u32>,
    pub seed: Option<u64>,
}

/// Sum of `log p(token | preceding tokens)` over `span`, from one forward pass.
pub fn option_log_prob(session: &Session<'_>, tokens: &[TokenId], span: Range<usize>, temperature: f64) -> Result<f64> {
    if span.start == 0 || span.is_empty() || span.end > tokens.len() {
        return Err(Error::data(format!(
            "option span {span:?} does not fit a prompt of {} tokens",
            tokens.len()
        )));
    }
    // The final token is never used as context.
    let logits = session.forward(&tokens[..span.end - 1])?;
    let mut total = 0.0f64;
    for pos in span {
        let row: Vec<f64> = logits.row(pos - 1).iter().map(|&x| x as f64).collect();
        let lp = log_softmax_with_temperature(&row, temperature)?;
        total += lp[tokens[pos] as usize];
    }
    Ok(total)
}

pub fn score_option(session: &Session<'_>, prompt: &Prompt, temperature: f64) -> Result<OptionScore> {
    let log_prob = option_log_prob(session, &prompt.tokens, prompt.span.clone(), temperature)?;
    let meta = session.adapter().map(|a| &a.meta);
    Ok(OptionScore {
        option: prompt.option.clone(),
        adjective: prompt.adjective.clone(),
        log_prob,
        probability: log_prob.exp(),
        temperature,
        slice_id: meta.map(|m| m.slice_id),
        seed: meta.map(|m| m.seed),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentScores {
    pub instrument: String,
    pub temperature: f64,
    pub options: Vec<OptionScore>,
    /// Combined per-emotion scores for likert instruments.
    pub emotions: BTreeMap<String, f64>,
}

impl InstrumentScores {
    /// Direct option probability, or likert emotion score, by name.
    pub fn value(&self, name: &str) -> Option<f64> {
        if let Some(v) = self.emotions.get(name) {
            return Some(*v);
        }
        self.options
            .iter()
            .find(|o| o.adjective.is_none() && o.option == name)
            .map(|o| o.probability)
    }
}

pub fn score_instrument(session: &Session<'_>, instrument: &Instrument, temperature: f64) -> Result<InstrumentScores> {
    let prompts = build_prompts(instrument)?;
    let options = prompts
        .iter()
        .map(|p| score_option(session, p, temperature))
        .collect::<Result<Vec<_>>>()?;
    let emotions = match &instrument.scoring {
        Scoring::Direct => BTreeMap::new(),
        Scoring::LikertScale { option_values, scales } => combine_scales(&options, option_values, scales)?,
    };
    Ok(InstrumentScores {
        instrument: instrument.id.clone(),
        temperature,
        options,
        emotions,
    })
}

fn combine_scales(
    options: &[OptionScore],
    option_values: &[f64],
    scales: &BTreeMap<String, Vec<String>>,
) -> Result<BTreeMap<String, f64>> {
    let n = option_values.len();
    scales
        .iter()
        .map(|(emotion, adjectives)| {
            let per_adjective = adjectives
                .iter()
                .map(|adj| {
                    let probs: Vec<f64> = options
                        .iter()
                        .filter(|o| o.adjective.as_deref() == Some(adj.as_str()))
                        .map(|o| o.probability)
                        .collect();
                    if probs.len() != n {
                        return Err(Error::data(format!("adjective {adj:?}: {} of {n} options scored", probs.len())));
                    }
                    Ok(probs)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((emotion.clone(), panasx_combine(&per_adjective, option_values)?))
        })
        .collect()
}

/// Per adjective, normalize option probabilities and take the expected
/// option value; the emotion score is the mean over adjectives.
pub fn panasx_combine(per_adjective: &[Vec<f64>], option_values: &[f64]) -> Result<f64> {
    if per_adjective.is_empty() {
        return Err(Error::data("no adjectives to combine"));
    }
    let mut total = 0.0;
    for probs in per_adjective {
        if probs.len() != option_values.len() {
            return Err(Error::shape(format!(
                "{} probabilities for {} option values",
                probs.len(),
                option_values.len()
            )));
        }
        let sum: f64 = probs.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::data("all option probabilities are zero for an adjective"));
        }
        total += probs.iter().zip(option_values).map(|(p, v)| p / sum * v).sum::<f64>();
    }
    Ok(total / per_adjective.len() as f64)
}

/// Header comment line carried by every CSV this crate writes.
pub fn csv_header_comment() -> String {
    format!("# {}\n", crate::BUILD_ID)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instrument: String,
    pub slice_id: u32,
    pub seed: u64,
    pub option: String,
    pub temperature: f64,
    pub value: f64,
    pub log_probability: Option<f64>,
}

impl InstrumentScores {
    /// Direct options, or combined emotions for likert instruments.
    pub fn rows(&self, slice_id: u32, seed: u64) -> Vec<ScoreRow> {
        if self.emotions.is_empty() {
            self.options
                .iter()
                .map(|o| ScoreRow {
                    instrument: self.instrument.clone(),
                    slice_id,
                    seed,
                    option: o.option.clone(),
                    temperature: self.temperature,
                    value: o.probability,
                    log_probability: Some(o.log_prob),
                })
                .collect()
        } else {
            self.emotions
                .iter()
                .map(|(e, &v)| ScoreRow {
                    instrument: self.instrument.clone(),
                    slice_id,
                    seed,
                    option: e.clone(),
                    temperature: self.temperature,
                    value: v,
                    log_probability: None,
                })
                .collect()
        }
    }
}

pub const SCORE_COLUMNS: &str = "instrument,slice_id,seed,option_or_emotion,temperature,probability_or_score,log_probability";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn format_score_csv(rows: &[ScoreRow]) -> String {
    let mut out = csv_header_comment();
    out.push_str(SCORE_COLUMNS);
    out.push('\n');
    for r in rows {
        let lp = r.log_probability.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.instrument),
            r.slice_id,
            r.seed,
            csv_field(&r.option),
            r.temperature,
            r.value,
            lp
        );
    }
    out
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::data(format!("{}: bad number {:?}", path.display(), field(i))))
        };
        rows.push(ScoreRow {
            instrument: field(0).to_string(),
            slice_id: num(1)? as u32,
            seed: field(2)
                .parse()
                .map_err(|_| Error::data(format!("{}: bad seed {:?}", path.display(), field(2))))?,
            option: field(3).to_string(),
            temperature: num(4)?,
            value: num(5)?,
            log_probability: if field(6).is_empty() { None } else { Some(num(6)?) },
        });
    }
    Ok(rows)
}
