//! Question answering over images: question encoder, MEVF visual features,
//! soft attention, answer classifier and multi-task fine-tuning.

mod data;
mod eval;
mod model;
mod text;
mod train;

pub use data::EncodedSet;
pub use eval::{evaluate_logits, predict_all, vqa_evaluate, EvalRecord, EvalReport};
pub use model::{
    multitask_loss, san_attend, InitMode, LossWeights, VqaConfig, VqaForwardOutput, VqaModel, GLOVE,
};
pub use text::{tokenize, QuestionVocab, WordEmbeddings, MAX_QUESTION_LEN, PAD, UNK};
pub use train::{vqa_train, VqaLogEntry, VqaTrainConfig, VqaTrainOutput};

#[cfg(test)]
mod tests;
