//! Dataset schemas, image I/O, the nine-class label map, synthetic data and
//! checkpoints.

mod checkpoint;
mod image;
mod sample;
mod synthetic;
mod vocab;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode as decode_checkpoint, encode as encode_checkpoint,
    FORMAT_VERSION,
};
pub use image::{images_to_tensor, load_image, GrayImage};
pub use sample::{
    load_image_dir, load_maml_labels, load_vqa_dataset, read_jsonl, resolve_image,
    split_train_test, write_jsonl, AnswerType, BodyPart, Category, Condition, LoadedDataset,
    MamlClass, MamlLabel, RecordReject, VqaSample,
};
pub use synthetic::{
    classify_image, generate_synthetic_suite, oracle_answer, ImageParams, QuestionKind,
    SyntheticSpec, SyntheticSuite,
};
pub use vocab::{normalize_answer, AnswerVocab, VocabWarning, VQA_RAD_ANSWER_COUNT};
