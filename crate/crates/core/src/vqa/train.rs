use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Params};
use crate::data::AnswerVocab;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Optimizer, OptimizerConfig};

use super::data::EncodedSet;
use super::eval::vqa_evaluate;
use super::model::{multitask_loss, LossWeights, VqaModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Validation accuracy (percent) whose first crossing is reported.
    pub target_accuracy: Option<f64>,
    /// Stop once the target is reached.
    pub stop_at_target: bool,
}

impl Default for VqaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(0.002),
            weights: LossWeights::default(),
            seed: 0,
            target_accuracy: None,
            stop_at_target: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqaLogEntry {
    pub epoch: usize,
    pub loss: f64,
    /// Percent of training questions answered correctly during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

impl VqaLogEntry {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_accuracy,val_accuracy";

    pub fn csv_line(&self) -> String {
        let val = self.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{}",
            self.epoch, self.loss, self.train_accuracy, val
        )
    }
}

pub struct VqaTrainOutput {
    pub params: Params,
    pub log: Vec<VqaLogEntry>,
    /// First epoch whose validation accuracy reached the target.
    pub epochs_to_target: Option<usize>,
}

/// Minibatch training of every parameter except the fixed word table
/// against the multi-task loss. Images are used uncorrupted as both input
/// and reconstruction target.
pub fn vqa_train(
    model: &VqaModel,
    params: &Params,
    answers: &AnswerVocab,
    train: &EncodedSet,
    val: Option<&EncodedSet>,
    cfg: &VqaTrainConfig,
    mut on_epoch: impl FnMut(&VqaLogEntry) -> Result<()>,
) -> Result<VqaTrainOutput> {
    cfg.weights.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if answers.len() != model.config.answers {
        return Err(Error::Data(format!(
            "answer vocabulary has {} entries, model predicts {}",
            answers.len(),
            model.config.answers
        )));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let targets: Vec<usize> = train
        .targets
        .iter()
        .zip(&train.samples)
        .map(|(t, s)| {
            t.ok_or_else(|| {
                Error::Data(format!("training answer `{}` not in vocabulary", s.answer))
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut trainable = model.trainable(params).to_leaves();
    let fixed = params.detached();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut epochs_to_target = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (images, tokens) = train.batch(batch)?;
            let batch_targets: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut full = fixed.clone();
            full.overwrite_from(&trainable)?;
            let out = model.forward(&full, &images, &tokens)?;
            let loss = multitask_loss(&out, &batch_targets, &images, cfg.weights)?;
            total += loss.item()? * batch.len() as f64;
            hits += argmax_rows(&out.logits)?
                .iter()
                .zip(&batch_targets)
                .filter(|(p, t)| p == t)
                .count();
            let grads = backward(&loss, &trainable, false)?;
            trainable = opt.step(&trainable, &grads)?;
        }
        let mut current = fixed.clone();
        current.overwrite_from(&trainable)?;
        let val_accuracy = val
            .map(|v| vqa_evaluate(model, &current, v, answers).map(|r| r.overall))
            .transpose()?;
        let entry = VqaLogEntry {
            epoch,
            loss: total / train.len() as f64,
            train_accuracy: 100.0 * hits as f64 / train.len() as f64,
            val_accuracy,
        };
        on_epoch(&entry)?;
        log.push(entry);
        if let (Some(target), Some(acc), None) =
            (cfg.target_accuracy, val_accuracy, epochs_to_target)
        {
            if acc >= target {
                epochs_to_target = Some(epoch);
                if cfg.stop_at_target {
                    break;
                }
            }
        }
    }
    let mut out_params = fixed;
    out_params.overwrite_from(&trainable)?;
    Ok(VqaTrainOutput {
        params: out_params,
        log,
        epochs_to_target,
    })
}
