use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::data::{images_to_tensor, AnswerVocab, GrayImage, VqaSample};
use crate::error::{Error, Result};

use super::text::QuestionVocab;

/// Questions with their token ids, target indices and images, ready for
/// batching.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub samples: Vec<VqaSample>,
    pub tokens: Vec<Vec<usize>>,
    /// `None` when the ground-truth answer is not in the vocabulary.
    pub targets: Vec<Option<usize>>,
    images: Vec<GrayImage>,
    image_of: Vec<usize>,
}

impl EncodedSet {
    pub fn new(
        samples: &[VqaSample],
        images: &BTreeMap<String, GrayImage>,
        questions: &QuestionVocab,
        answers: &AnswerVocab,
    ) -> Result<Self> {
        let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
        let mut stored = Vec::new();
        let mut image_of = Vec::with_capacity(samples.len());
        for s in samples {
            let idx = match slot.get(s.image_id.as_str()) {
                Some(&i) => i,
                None => {
                    let img = images.get(&s.image_id).ok_or_else(|| {
                        Error::Data(format!(
                            "question {} references missing image `{}`",
                            s.question_id, s.image_id
                        ))
                    })?;
                    stored.push(img.clone());
                    slot.insert(&s.image_id, stored.len() - 1);
                    stored.len() - 1
                }
            };
            image_of.push(idx);
        }
        Ok(Self {
            samples: samples.to_vec(),
            tokens: samples
                .iter()
                .map(|s| questions.tokenize_and_pad(&s.question))
                .collect(),
            targets: samples
                .iter()
                .map(|s| answers.index_of(&s.answer))
                .collect(),
            images: stored,
            image_of,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sub-set by sample indices.
    pub fn subset(&self, indices: &[usize]) -> EncodedSet {
        EncodedSet {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            tokens: indices.iter().map(|&i| self.tokens[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            images: self.images.clone(),
            image_of: indices.iter().map(|&i| self.image_of[i]).collect(),
        }
    }

    /// `[B, 1, S, S]` images and token lists for the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let imgs: Vec<&GrayImage> = indices
            .iter()
            .map(|&i| &self.images[self.image_of[i]])
            .collect();
        Ok((
            images_to_tensor(&imgs)?,
            indices.iter().map(|&i| self.tokens[i].clone()).collect(),
        ))
    }
}
