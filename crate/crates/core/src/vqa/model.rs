use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Params, Tensor};
use crate::cdae::{Cdae, CdaeConfig, CDAE_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::maml::{MetaLearner, MAML_FEATURE_DIM};
use crate::nn::{
    concat_cols, cross_entropy_loss, fan_in_uniform, linear, lstm_step, mse_loss, slice_cols,
    softmax, zeros_param, LstmParams,
};

use super::text::{WordEmbeddings, MAX_QUESTION_LEN, PAD};

/// Architecture of the full question-answering model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaConfig {
    pub image_size: usize,
    pub maml_filters: usize,
    pub cdae_channels: Vec<usize>,
    pub cdae_pool_after: Vec<bool>,
    pub glove_dim: usize,
    pub augment_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    /// Attend over the single 128-D f_v instead of the two branch features.
    pub single_region: bool,
    pub question_vocab: usize,
    pub answers: usize,
}

impl Default for VqaConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            maml_filters: MAML_FEATURE_DIM,
            cdae_channels: vec![16, 32, 32],
            cdae_pool_after: vec![true, true, false],
            glove_dim: 300,
            augment_dim: 300,
            hidden_dim: 1024,
            attention_dim: 512,
            single_region: false,
            question_vocab: 2,
            answers: 1,
        }
    }
}

/// α1 · L_vqa + α2 · L_rec.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| a >= 0.0 && a.is_finite();
        if !ok(self.alpha1) || !ok(self.alpha2) || (self.alpha1 == 0.0 && self.alpha2 == 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative and not both zero, got ({}, {})",
                self.alpha1, self.alpha2
            )));
        }
        Ok(())
    }
}

/// Batched intermediate and final values of one forward pass.
#[derive(Clone, Debug)]
pub struct VqaForwardOutput {
    pub f_q: Tensor,
    pub f_v1: Tensor,
    pub f_v2: Tensor,
    pub f_v: Tensor,
    /// Attention weights, `[N, regions]`.
    pub attention: Tensor,
    pub f_a: Tensor,
    pub logits: Tensor,
    pub reconstruction: Tensor,
}

/// Where the initial weights come from.
#[derive(Clone, Debug)]
pub enum InitMode {
    Scratch,
    /// Copy the MAML encoder and CDAE entries from pretrained checkpoints.
    Finetune {
        maml: Params,
        cdae: Params,
    },
}

/// Name of the fixed pretrained word table; it is never updated.
pub const GLOVE: &str = "q.glove";
const AUGMENT: &str = "q.augment";
const LSTM: &str = "q.lstm";

#[derive(Clone, Debug)]
pub struct VqaModel {
    pub config: VqaConfig,
    pub learner: MetaLearner,
    pub cdae: Cdae,
}

impl VqaModel {
    pub fn new(config: VqaConfig) -> Result<Self> {
        if config.answers == 0
            || config.question_vocab < 2
            || config.hidden_dim == 0
            || config.attention_dim == 0
        {
            return Err(Error::invalid(
                "answers, question vocabulary, hidden and attention sizes must be positive",
            ));
        }
        if config.glove_dim + config.augment_dim == 0 {
            return Err(Error::invalid("word embedding dimension must be positive"));
        }
        let learner = MetaLearner {
            image_size: config.image_size,
            filters: config.maml_filters,
        };
        learner.stage_sizes()?;
        let cdae = Cdae::new(&cdae_config(&config))?;
        Ok(Self {
            config,
            learner,
            cdae,
        })
    }

    /// CDAE settings implied by this model (training fields at defaults).
    pub fn cdae_config(&self) -> CdaeConfig {
        cdae_config(&self.config)
    }

    pub fn feature_dim(&self) -> usize {
        self.config.maml_filters + CDAE_FEATURE_DIM
    }

    fn region_inputs(&self) -> Vec<usize> {
        if self.config.single_region {
            vec![self.feature_dim()]
        } else {
            vec![self.config.maml_filters, CDAE_FEATURE_DIM]
        }
    }

    /// Fresh parameters; `glove` fills the fixed word table.
    pub fn init(
        &self,
        glove: &WordEmbeddings,
        mode: &InitMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Params> {
        let c = &self.config;
        if glove.dim != c.glove_dim || glove.table.len() != c.question_vocab * c.glove_dim {
            return Err(Error::shape(
                "vqa_init",
                format!(
                    "word table {}×{} for vocabulary {}",
                    glove.table.len() / glove.dim.max(1),
                    glove.dim,
                    c.question_vocab
                ),
            ));
        }
        let mut p = self.learner.init(rng)?;
        for (name, t) in self.cdae.init(rng)?.iter() {
            p.insert(name, t.clone());
        }
        if c.glove_dim > 0 {
            p.insert(
                GLOVE,
                Tensor::new(glove.table.clone(), &[c.question_vocab, c.glove_dim])?,
            );
        }
        if c.augment_dim > 0 {
            p.insert(AUGMENT, zeros_param(&[c.question_vocab, c.augment_dim])?);
        }
        LstmParams::init(&mut p, LSTM, c.glove_dim + c.augment_dim, c.hidden_dim, rng)?;
        let d = c.attention_dim;
        for (r, dim) in self.region_inputs().into_iter().enumerate() {
            p.insert(
                format!("att.region{r}.weight"),
                fan_in_uniform(&[dim, d], dim, 1.0, rng)?,
            );
            p.insert(format!("att.region{r}.bias"), zeros_param(&[d])?);
        }
        p.insert("att.w_v", fan_in_uniform(&[d, d], d, 1.0, rng)?);
        p.insert(
            "att.w_q",
            fan_in_uniform(&[c.hidden_dim, d], c.hidden_dim, 1.0, rng)?,
        );
        p.insert("att.score", fan_in_uniform(&[d, 1], d, 1.0, rng)?);
        p.insert(
            "att.w_u",
            fan_in_uniform(&[c.hidden_dim, d], c.hidden_dim, 1.0, rng)?,
        );
        p.insert("cls.weight", fan_in_uniform(&[d, c.answers], d, 1.0, rng)?);
        p.insert("cls.bias", zeros_param(&[c.answers])?);
        if let InitMode::Finetune { maml, cdae } = mode {
            let pick = |src: &Params, prefix: &str| -> Result<Params> {
                let picked = src.with_prefix(prefix);
                if picked.is_empty() {
                    return Err(Error::Checkpoint(format!(
                        "pretrained checkpoint has no `{prefix}*` entries"
                    )));
                }
                Ok(picked.detached().to_leaves())
            };
            let mut pretrained = pick(maml, "maml.conv")?;
            // A checkpoint straight out of CDAE pretraining carries an untrained projection; keep it.
            for (n, t) in pick(cdae, "cdae.")?.iter() {
                pretrained.insert(n, t.clone());
            }
            p.overwrite_from(&pretrained)?;
        }
        Ok(p)
    }

    /// Names updated by training (everything except the fixed word table).
    pub fn trainable(&self, params: &Params) -> Params {
        Params::from_entries(
            params
                .iter()
                .filter(|(n, _)| *n != GLOVE)
                .map(|(n, t)| (n.to_owned(), t.clone())),
        )
    }

    /// Embedded token at position `t` of each question: `[N, glove + augment]`,
    /// zero at padding.
    fn embed_step(&self, params: &Params, tokens: &[Vec<usize>], t: usize) -> Result<Tensor> {
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|q| q[t]).collect();
        let mut parts = Vec::new();
        for (name, dim) in [
            (GLOVE, self.config.glove_dim),
            (AUGMENT, self.config.augment_dim),
        ] {
            if dim == 0 {
                continue;
            }
            let index: Vec<usize> = ids
                .iter()
                .flat_map(|&id| (0..dim).map(move |j| id * dim + j))
                .collect();
            parts.push(params.get(name)?.gather(Arc::new(index), &[n, dim])?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let x = if refs.len() == 1 {
            parts[0].clone()
        } else {
            concat_cols(&refs)?
        };
        if ids.iter().all(|&id| id != PAD) {
            return Ok(x);
        }
        let width = x.shape()[1];
        let mask: Vec<f64> = ids
            .iter()
            .flat_map(|&id| std::iter::repeat_n(if id == PAD { 0.0 } else { 1.0 }, width))
            .collect();
        x.mul(&Tensor::new(mask, &[n, width])?)
    }

    /// f_q: final LSTM hidden state over the 12 token embeddings, `[N, hidden]`.
    pub fn encode_question(&self, params: &Params, tokens: &[Vec<usize>]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::invalid("no questions to encode"));
        }
        for q in tokens {
            if q.len() != MAX_QUESTION_LEN {
                return Err(Error::shape(
                    "encode_question",
                    format!("{} tokens, expected {MAX_QUESTION_LEN}", q.len()),
                ));
            }
            if let Some(&bad) = q.iter().find(|&&id| id >= self.config.question_vocab) {
                return Err(Error::invalid(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.question_vocab
                )));
            }
        }
        let lstm = LstmParams::from_params(params, LSTM)?;
        let (mut h, mut c) = lstm.zero_state(tokens.len());
        for t in 0..MAX_QUESTION_LEN {
            let x = self.embed_step(params, tokens, t)?;
            (h, c) = lstm_step(&x, (&h, &c), &lstm)?;
        }
        Ok(h)
    }

    /// `(f_v1, f_v2, f_v)` for `[N, 1, S, S]` images.
    pub fn mevf_extract(
        &self,
        params: &Params,
        images: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let f_v1 = self.learner.features(params, images)?;
        let f_v2 = self.cdae.features(params, images)?;
        let f_v = concat_cols(&[&f_v1, &f_v2])?;
        Ok((f_v1, f_v2, f_v))
    }

    /// Projects raw visual features into attention regions.
    pub fn regions(
        &self,
        params: &Params,
        f_v1: &Tensor,
        f_v2: &Tensor,
        f_v: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let inputs: Vec<&Tensor> = if self.config.single_region {
            vec![f_v]
        } else {
            vec![f_v1, f_v2]
        };
        inputs
            .into_iter()
            .enumerate()
            .map(|(r, x)| {
                linear(
                    x,
                    params.get(&format!("att.region{r}.weight"))?,
                    params.get(&format!("att.region{r}.bias"))?,
                )
            })
            .collect()
    }

    pub fn forward(
        &self,
        params: &Params,
        images: &Tensor,
        tokens: &[Vec<usize>],
    ) -> Result<VqaForwardOutput> {
        if images.shape().first() != Some(&tokens.len()) {
            return Err(Error::shape(
                "vqa_forward",
                format!("{} questions for images {:?}", tokens.len(), images.shape()),
            ));
        }
        let f_q = self.encode_question(params, tokens)?;
        let (f_v1, f_v2, f_v) = self.mevf_extract(params, images)?;
        let regions = self.regions(params, &f_v1, &f_v2, &f_v)?;
        let (f_a, attention) = san_attend(&regions, &f_q, params)?;
        let logits = linear(&f_a, params.get("cls.weight")?, params.get("cls.bias")?)?;
        let reconstruction = self.cdae.reconstruct(params, images)?;
        Ok(VqaForwardOutput {
            f_q,
            f_v1,
            f_v2,
            f_v,
            attention,
            f_a,
            logits,
            reconstruction,
        })
    }

    /// Logits only; skips the reconstruction branch.
    pub fn predict_logits(
        &self,
        params: &Params,
        images: &Tensor,
        tokens: &[Vec<usize>],
    ) -> Result<Tensor> {
        let f_q = self.encode_question(params, tokens)?;
        let (f_v1, f_v2, f_v) = self.mevf_extract(params, images)?;
        let regions = self.regions(params, &f_v1, &f_v2, &f_v)?;
        let (f_a, _) = san_attend(&regions, &f_q, params)?;
        linear(&f_a, params.get("cls.weight")?, params.get("cls.bias")?)
    }
}

fn cdae_config(c: &VqaConfig) -> CdaeConfig {
    CdaeConfig {
        image_size: c.image_size,
        channels: c.cdae_channels.clone(),
        pool_after: c.cdae_pool_after.clone(),
        ..CdaeConfig::default()
    }
}

/// Single-glimpse soft attention over region vectors `[N, d]`:
/// `s_r = wᵀ tanh(W_v v_r + W_q f_q)`, `p = softmax(s)`,
/// `f_a = Σ_r p_r v_r + W_u f_q`. Returns `(f_a, p)`.
pub fn san_attend(regions: &[Tensor], f_q: &Tensor, params: &Params) -> Result<(Tensor, Tensor)> {
    let first = regions
        .first()
        .ok_or_else(|| Error::invalid("attention needs at least one region"))?;
    let [n, d] = *first.shape() else {
        return Err(Error::shape(
            "san_attend",
            format!("region {:?}", first.shape()),
        ));
    };
    let q = f_q.matmul(params.get("att.w_q")?)?;
    let score_w = params.get("att.score")?;
    let w_v = params.get("att.w_v")?;
    let scores = regions
        .iter()
        .map(|v| v.matmul(w_v)?.add(&q)?.tanh()?.matmul(score_w))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = scores.iter().collect();
    let p = if refs.len() == 1 {
        softmax(&scores[0])?
    } else {
        softmax(&concat_cols(&refs)?)?
    };
    let mut context: Option<Tensor> = None;
    for (r, v) in regions.iter().enumerate() {
        let weight = slice_cols(&p, r, 1)?.broadcast_mid(1, d, &[n, d])?;
        let term = weight.mul(v)?;
        context = Some(match context {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let f_a = context
        .expect("non-empty")
        .add(&f_q.matmul(params.get("att.w_u")?)?)?;
    Ok((f_a, p))
}

/// `α1 · cross_entropy(logits, targets) + α2 · mse(reconstruction, images)`.
/// A zero weight drops its term entirely.
pub fn multitask_loss(
    out: &VqaForwardOutput,
    targets: &[usize],
    images: &Tensor,
    weights: LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    let mut total: Option<Tensor> = None;
    if weights.alpha1 != 0.0 {
        total = Some(cross_entropy_loss(&out.logits, targets)?.scale(weights.alpha1)?);
    }
    if weights.alpha2 != 0.0 {
        let rec = mse_loss(&out.reconstruction, images)?.scale(weights.alpha2)?;
        total = Some(match total {
            Some(t) => t.add(&rec)?,
            None => rec,
        });
    }
    Ok(total.expect("weights validated"))
}
