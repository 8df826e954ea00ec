use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::dataset::Unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionMode {
    #[default]
    SingleQuality,
    MultiQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub id: String,
    /// e.g. "more likely to score higher on an algebra proficiency exam".
    pub target_description: String,
    #[serde(default)]
    pub mode: QuestionMode,
    #[serde(default)]
    pub qualities: Vec<String>,
}

impl QuestionSpec {
    pub fn single(id: impl Into<String>, target: impl Into<String>) -> Self {
        QuestionSpec {
            id: id.into(),
            target_description: target.into(),
            mode: QuestionMode::SingleQuality,
            qualities: Vec::new(),
        }
    }

    pub fn multi(id: impl Into<String>, target: impl Into<String>, qualities: &[&str]) -> Self {
        QuestionSpec {
            id: id.into(),
            target_description: target.into(),
            mode: QuestionMode::MultiQuality,
            qualities: qualities.iter().map(|q| q.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.mode == QuestionMode::MultiQuality {
            let mut q = self.qualities.clone();
            q.sort();
            q.dedup();
            if q.len() < 2 || q.len() != self.qualities.len() {
                return Err(LlmError::Question(format!(
                    "question `{}` needs at least two distinct qualities",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Scoring keys produced by one ask: the question id, or `id:quality`.
    pub fn score_keys(&self) -> Vec<String> {
        match self.mode {
            QuestionMode::SingleQuality => vec![self.id.clone()],
            QuestionMode::MultiQuality => self.qualities.iter().map(|q| format!("{}:{q}", self.id)).collect(),
        }
    }
}

/// Schema-driven prompt text. Sentence templates use `{value}` as the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub system: String,
    /// `{target}` is replaced by the question's target description.
    pub preamble: String,
    /// "Observation" or "Paper"; units are shown as `<label> 1` / `<label> 2`.
    pub unit_label: String,
    pub sentences: BTreeMap<String, String>,
    /// Optional full sentence used when the covariate is missing.
    pub missing_sentences: BTreeMap<String, String>,
    pub missing_phrase: String,
    /// Text fields (e.g. abstracts) appended after the covariate sentences.
    pub text_fields: Vec<String>,
    pub answer_instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: "You compare two observations and answer with a single choice.".into(),
            preamble: "Which of the following two observations is {target}?".into(),
            unit_label: "Observation".into(),
            sentences: BTreeMap::new(),
            missing_sentences: BTreeMap::new(),
            missing_phrase: "is unknown".into(),
            text_fields: Vec::new(),
            answer_instruction: "Respond with either \"{label} 1\" or \"{label} 2\".".into(),
        }
    }
}

/// A rendered prompt plus the identities needed by a mock provider.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    pub first_id: String,
    pub second_id: String,
    pub question_id: String,
    pub qualities: Vec<String>,
}

impl PromptTemplate {
    fn sentence(&self, name: &str, value: Option<String>) -> Result<String, LlmError> {
        let template = self
            .sentences
            .get(name)
            .ok_or_else(|| LlmError::MissingTemplate(name.to_string()))?;
        Ok(match value {
            Some(v) => template.replace("{value}", &v),
            None => match self.missing_sentences.get(name) {
                Some(s) => s.clone(),
                None if template.contains("is {value}") => template.replace("is {value}", &self.missing_phrase),
                None => format!("The {name} {}.", self.missing_phrase),
            },
        })
    }

    fn describe(&self, unit: &Unit, out: &mut String) -> Result<(), LlmError> {
        let mut sentences = Vec::with_capacity(unit.covariates.len());
        for (name, value) in &unit.covariates {
            sentences.push(self.sentence(name, value.display())?);
        }
        out.push_str(&sentences.join(" "));
        for field in &self.text_fields {
            let text = unit.text(field).unwrap_or("unknown");
            out.push_str(&format!("\n{field}: {text}"));
        }
        Ok(())
    }

    /// Renders the prompt for `first` and `second` in that order.
    pub fn render(&self, question: &QuestionSpec, first: &Unit, second: &Unit) -> Result<RenderedPrompt, LlmError> {
        question.validate()?;
        let label = &self.unit_label;
        let mut user = self.preamble.replace("{target}", &question.target_description);
        user.push_str("\n\n");
        for (k, unit) in [first, second].into_iter().enumerate() {
            user.push_str(&format!("{label} {}: ", k + 1));
            self.describe(unit, &mut user)?;
            user.push_str("\n\n");
        }
        match question.mode {
            QuestionMode::SingleQuality => {
                user.push_str(&self.answer_instruction.replace("{label}", label));
            }
            QuestionMode::MultiQuality => {
                user.push_str(&format!(
                    "Compare the two on each quality below. Answer with one line per quality in the form \
                     \"<number>: {label} 1\" or \"<number>: {label} 2\".\n"
                ));
                for (k, q) in question.qualities.iter().enumerate() {
                    user.push_str(&format!("{}: {q}\n", k + 1));
                }
            }
        }
        Ok(RenderedPrompt {
            system: self.system.clone(),
            user: user.trim_end().to_string(),
            first_id: first.id.clone(),
            second_id: second.id.clone(),
            question_id: question.id.clone(),
            qualities: question.qualities.clone(),
        })
    }
}
