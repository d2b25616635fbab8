use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sample::VqaSample;

/// Size of the VQA-RAD answer set.
pub const VQA_RAD_ANSWER_COUNT: usize = 458;

/// Lowercases and collapses runs of whitespace.
pub fn normalize_answer(answer: &str) -> String {
    answer
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VocabWarning {
    EmptyAnswer { question_id: String },
    SizeMismatch { expected: usize, actual: usize },
}

/// Ordered set of normalized answer strings; classification targets are
/// positions in this list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for AnswerVocab {
    fn from(answers: Vec<String>) -> Self {
        let mut v = AnswerVocab {
            answers: Vec::new(),
            index: HashMap::new(),
        };
        for a in answers {
            v.push(normalize_answer(&a));
        }
        v
    }
}

impl From<AnswerVocab> for Vec<String> {
    fn from(v: AnswerVocab) -> Self {
        v.answers
    }
}

impl AnswerVocab {
    fn push(&mut self, answer: String) {
        if !self.index.contains_key(&answer) {
            self.index.insert(answer.clone(), self.answers.len());
            self.answers.push(answer);
        }
    }

    /// Unique normalized answers of the training split, in first-occurrence order.
    pub fn build(train: &[VqaSample]) -> Result<(AnswerVocab, Vec<VocabWarning>)> {
        if train.is_empty() {
            return Err(Error::Data(
                "cannot build an answer vocabulary from no samples".into(),
            ));
        }
        let mut vocab = AnswerVocab {
            answers: Vec::new(),
            index: HashMap::new(),
        };
        let mut warnings = Vec::new();
        for s in train {
            let a = normalize_answer(&s.answer);
            if a.is_empty() {
                warnings.push(VocabWarning::EmptyAnswer {
                    question_id: s.question_id.clone(),
                });
            }
            vocab.push(a);
        }
        Ok((vocab, warnings))
    }

    /// Warning when the vocabulary size differs from `expected`.
    pub fn check_size(&self, expected: usize) -> Option<VocabWarning> {
        (self.len() != expected).then_some(VocabWarning::SizeMismatch {
            expected,
            actual: self.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }

    /// Index of an answer after normalization.
    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnswerType, Category};

    fn sample(id: &str, answer: &str) -> VqaSample {
        VqaSample {
            question_id: id.into(),
            image_id: "i".into(),
            question: "q".into(),
            answer: answer.into(),
            answer_type: AnswerType::Closed,
            category: Category::Other,
        }
    }

    #[test]
    fn dedups_after_normalization() {
        let (v, w) =
            AnswerVocab::build(&[sample("1", "Yes"), sample("2", "yes"), sample("3", "no")])
                .unwrap();
        assert_eq!(v.answers(), ["yes", "no"]);
        assert!(w.is_empty());
        assert_eq!(v.index_of("  YES "), Some(0));
        assert_eq!(
            v.check_size(VQA_RAD_ANSWER_COUNT),
            Some(VocabWarning::SizeMismatch {
                expected: 458,
                actual: 2
            })
        );
        assert_eq!(v.check_size(2), None);
    }

    #[test]
    fn empty_answer_is_kept_and_flagged() {
        let (v, w) = AnswerVocab::build(&[sample("1", "left  lung"), sample("2", "  ")]).unwrap();
        assert_eq!(v.answers(), ["left lung", ""]);
        assert_eq!(
            w,
            vec![VocabWarning::EmptyAnswer {
                question_id: "2".into()
            }]
        );
    }

    #[test]
    fn json_roundtrip_preserves_order() {
        let (v, _) = AnswerVocab::build(&[sample("1", "b"), sample("2", "a")]).unwrap();
        let back: AnswerVocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(AnswerVocab::build(&[]).is_err());
    }
}
