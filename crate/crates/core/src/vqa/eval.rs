use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Params, Tensor};
use crate::data::{normalize_answer, AnswerType, AnswerVocab, VqaSample};
use crate::error::{Error, Result};
use crate::nn::argmax_rows;

use super::data::EncodedSet;
use super::model::VqaModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub predicted: String,
    pub truth: String,
    pub correct: bool,
    #[serde(rename = "type")]
    pub answer_type: AnswerType,
    /// Ground truth missing from the answer vocabulary; always incorrect.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unknown_truth: bool,
}

/// Percent accuracies; a subset with no questions is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub open_ended: Option<f64>,
    pub close_ended: Option<f64>,
    pub n_questions: usize,
    pub records: Vec<EvalRecord>,
}

fn percent(records: &[&EvalRecord]) -> Option<f64> {
    (!records.is_empty())
        .then(|| 100.0 * records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Scores `[N, answers]` logits against the samples' ground truth.
pub fn evaluate_logits(
    samples: &[VqaSample],
    logits: &Tensor,
    answers: &AnswerVocab,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty question set".into()));
    }
    if logits.shape() != [samples.len(), answers.len()] {
        return Err(Error::shape(
            "vqa_evaluate",
            format!(
                "logits {:?} for {} questions and {} answers",
                logits.shape(),
                samples.len(),
                answers.len()
            ),
        ));
    }
    let records: Vec<EvalRecord> = samples
        .iter()
        .zip(argmax_rows(logits)?)
        .map(|(s, p)| {
            let truth = normalize_answer(&s.answer);
            let predicted = answers
                .answer(p)
                .expect("index within vocabulary")
                .to_owned();
            let unknown_truth = answers.index_of(&truth).is_none();
            EvalRecord {
                question_id: s.question_id.clone(),
                correct: !unknown_truth && predicted == truth,
                predicted,
                truth,
                answer_type: s.answer_type,
                unknown_truth,
            }
        })
        .collect();
    let subset = |t: Option<AnswerType>| -> Vec<&EvalRecord> {
        records
            .iter()
            .filter(|r| t.is_none_or(|t| r.answer_type == t))
            .collect()
    };
    Ok(EvalReport {
        overall: percent(&subset(None)).expect("non-empty"),
        open_ended: percent(&subset(Some(AnswerType::Open))),
        close_ended: percent(&subset(Some(AnswerType::Closed))),
        n_questions: records.len(),
        records,
    })
}

/// Logits for every question, computed in parallel chunks and stacked in order.
pub fn predict_all(model: &VqaModel, params: &Params, set: &EncodedSet) -> Result<Tensor> {
    let params = params.detached();
    let indices: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<Vec<f64>> = indices
        .par_chunks(32)
        .map(|chunk| {
            let (images, tokens) = set.batch(chunk)?;
            Ok(model.predict_logits(&params, &images, &tokens)?.to_vec())
        })
        .collect::<Result<_>>()?;
    Tensor::new(chunks.concat(), &[set.len(), model.config.answers])
}

/// Accuracy report for a question set.
pub fn vqa_evaluate(
    model: &VqaModel,
    params: &Params,
    set: &EncodedSet,
    answers: &AnswerVocab,
) -> Result<EvalReport> {
    if answers.len() != model.config.answers {
        return Err(Error::Data(format!(
            "answer vocabulary has {} entries, model predicts {}",
            answers.len(),
            model.config.answers
        )));
    }
    evaluate_logits(&set.samples, &predict_all(model, params, set)?, answers)
}
