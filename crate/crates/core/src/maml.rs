//! Model-agnostic meta-learning of the convolutional image encoder.
//!
//! The inner loop adapts a copy of θ on a task's support set with plain
//! gradient steps; the outer loop moves θ along the gradient of the summed
//! query losses of the adapted copies. With `second_order` the outer
//! gradient is taken through the inner steps (double backpropagation);
//! otherwise the adapted parameters are treated as independent leaves.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, GradientMap, Params, Tensor};
use crate::data::{images_to_tensor, GrayImage, MamlClass, MamlLabel};
use crate::error::{Error, Result};
use crate::nn::{
    argmax_rows, conv2d, cross_entropy_loss, fan_in_uniform, global_mean_pool, linear, zeros_param,
    ConvSpec, RELU_GAIN,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub ways: usize,
    pub shots: usize,
    pub meta_batch: usize,
    pub meta_iterations: usize,
    pub inner_steps: usize,
    pub second_order: bool,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.5,
            meta_lr: 0.05,
            ways: 3,
            shots: 3,
            meta_batch: 5,
            meta_iterations: 300,
            inner_steps: 1,
            second_order: true,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("inner_lr", self.inner_lr), ("meta_lr", self.meta_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.ways < 2 {
            return Err(Error::invalid("ways must be at least 2"));
        }
        for (name, v) in [
            ("shots", self.shots),
            ("meta_batch", self.meta_batch),
            ("meta_iterations", self.meta_iterations),
            ("inner_steps", self.inner_steps),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

fn check_step(name: &str, v: f64) -> Result<()> {
    if v < 0.0 || !v.is_finite() {
        return Err(Error::invalid(format!(
            "{name} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

/// A task the meta-learner can adapt to.
pub trait MetaTask: Sync {
    /// Extends θ with any task-specific parameters (e.g. a fresh head). The
    /// returned collection must contain every entry of θ unchanged.
    fn prepare(&self, theta: &Params) -> Result<Params> {
        Ok(theta.clone())
    }

    /// Loss on the support set (D_tr).
    fn support_loss(&self, params: &Params) -> Result<Tensor>;

    /// Loss on the query set (D_val) and, for classifiers, the accuracy.
    fn query_loss(&self, params: &Params) -> Result<(Tensor, Option<f64>)>;
}

/// `inner_steps` gradient steps on the support loss. With `create_graph` the
/// result stays differentiable with respect to `params`.
pub fn adapt<T: MetaTask + ?Sized>(
    params: &Params,
    task: &T,
    inner_lr: f64,
    inner_steps: usize,
    create_graph: bool,
) -> Result<Params> {
    check_step("inner_lr", inner_lr)?;
    if inner_steps == 0 {
        return Err(Error::invalid("inner_steps must be at least 1"));
    }
    let mut current = params.clone();
    for _ in 0..inner_steps {
        let loss = task.support_loss(&current)?;
        let tensors: Vec<Tensor> = current.tensors().cloned().collect();
        let grads = grad(&loss, &tensors, create_graph)?;
        let grads = Params::from_entries(current.names().map(str::to_owned).zip(grads));
        current = current.sub_scaled(&grads, inner_lr)?;
        if !create_graph {
            current = current.detached().to_leaves();
        }
    }
    Ok(current)
}

/// Per-task outcome of one outer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskOutcome {
    pub query_loss: f64,
    pub query_accuracy: Option<f64>,
}

fn task_meta_gradient<T: MetaTask>(
    theta: &Params,
    task: &T,
    cfg: &MetaConfig,
) -> Result<(GradientMap, TaskOutcome)> {
    let full = task.prepare(theta)?;
    let adapted = adapt(&full, task, cfg.inner_lr, cfg.inner_steps, cfg.second_order)?;
    // First-order: differentiate at θ' as if it were an independent leaf.
    let (at, wrt) = if cfg.second_order {
        (adapted, theta.tensors().cloned().collect::<Vec<_>>())
    } else {
        let leaves = adapted.detached().to_leaves();
        let wrt = theta
            .names()
            .map(|n| leaves.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        (leaves, wrt)
    };
    let (loss, query_accuracy) = task.query_loss(&at)?;
    let grads = grad(&loss, &wrt, false)?;
    Ok((
        Params::from_entries(theta.names().map(str::to_owned).zip(grads)),
        TaskOutcome {
            query_loss: loss.item()?,
            query_accuracy,
        },
    ))
}

/// Gradient of `Σ_i L_val_i(θ'_i)` with respect to θ. Tasks run in
/// parallel; the sum is accumulated in task order.
pub fn meta_gradient<T: MetaTask>(
    theta: &Params,
    tasks: &[T],
    cfg: &MetaConfig,
) -> Result<(GradientMap, Vec<TaskOutcome>)> {
    if tasks.is_empty() {
        return Err(Error::invalid("meta step needs at least one task"));
    }
    let theta = theta.to_leaves();
    let results: Vec<(GradientMap, TaskOutcome)> = tasks
        .par_iter()
        .map(|t| task_meta_gradient(&theta, t, cfg))
        .collect::<Result<_>>()?;
    let mut outcomes = Vec::with_capacity(results.len());
    let mut total: Option<GradientMap> = None;
    for (g, o) in results {
        outcomes.push(o);
        total = Some(match total {
            Some(acc) => acc.add(&g)?,
            None => g,
        });
    }
    Ok((total.expect("non-empty"), outcomes))
}

/// One outer SGD step: `θ ← θ − β · meta_gradient`.
pub fn meta_step<T: MetaTask>(
    theta: &Params,
    tasks: &[T],
    cfg: &MetaConfig,
) -> Result<(Params, Vec<TaskOutcome>)> {
    check_step("meta_lr", cfg.meta_lr)?;
    let (g, outcomes) = meta_gradient(theta, tasks, cfg)?;
    Ok((
        theta.detached().sub_scaled(&g, cfg.meta_lr)?.to_leaves(),
        outcomes,
    ))
}

/// Four-layer convolutional encoder: 3×3 kernels, stride 2, padding 1,
/// ReLU, then a global mean pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaLearner {
    pub image_size: usize,
    pub filters: usize,
}

pub const MAML_FEATURE_DIM: usize = 64;
pub const MAML_LAYERS: usize = 4;
const HEAD_WEIGHT: &str = "maml.head.weight";
const HEAD_BIAS: &str = "maml.head.bias";

impl Default for MetaLearner {
    fn default() -> Self {
        Self {
            image_size: 84,
            filters: MAML_FEATURE_DIM,
        }
    }
}

impl MetaLearner {
    pub fn conv_spec(&self, layer: usize) -> ConvSpec {
        let c_in = if layer == 0 { 1 } else { self.filters };
        ConvSpec::square(c_in, self.filters, 3, 2, 1)
    }

    /// Spatial size after each conv layer.
    pub fn stage_sizes(&self) -> Result<Vec<usize>> {
        let mut size = self.image_size;
        (0..MAML_LAYERS)
            .map(|l| {
                size = self.conv_spec(l).output_dim(size, 3)?;
                Ok(size)
            })
            .collect()
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<Params> {
        self.stage_sizes()?;
        let mut p = Params::new();
        for l in 0..MAML_LAYERS {
            let spec = self.conv_spec(l);
            let fan_in = spec.in_channels * 9;
            p.insert(
                format!("maml.conv{l}.weight"),
                fan_in_uniform(&spec.weight_shape(), fan_in, RELU_GAIN, rng)?,
            );
            p.insert(
                format!("maml.conv{l}.bias"),
                zeros_param(&[spec.out_channels])?,
            );
        }
        Ok(p)
    }

    /// `[N, 1, S, S]` images to `[N, filters]` features.
    pub fn features(&self, params: &Params, images: &Tensor) -> Result<Tensor> {
        match *images.shape() {
            [_, 1, h, w] if h == self.image_size && w == self.image_size => {}
            _ => {
                return Err(Error::shape(
                    "maml_feature",
                    format!(
                        "expected [N, 1, {s}, {s}], got {:?}",
                        images.shape(),
                        s = self.image_size
                    ),
                ))
            }
        }
        let mut x = images.clone();
        for l in 0..MAML_LAYERS {
            let w = params.get(&format!("maml.conv{l}.weight"))?;
            let b = params.get(&format!("maml.conv{l}.bias"))?;
            x = conv2d(&x, &self.conv_spec(l), w, Some(b))?.relu()?;
        }
        global_mean_pool(&x)
    }

    fn logits(&self, params: &Params, images: &Tensor) -> Result<Tensor> {
        let f = self.features(params, images)?;
        linear(&f, params.get(HEAD_WEIGHT)?, params.get(HEAD_BIAS)?)
    }
}

/// The 64-D image feature f_v1 of a single image.
pub fn maml_feature(learner: &MetaLearner, theta: &Params, image: &GrayImage) -> Result<Tensor> {
    let f = learner.features(theta, &images_to_tensor(&[image])?)?;
    f.reshape(&[learner.filters])
}

/// Labelled images grouped by class.
#[derive(Clone, Debug)]
pub struct MamlPool {
    images: Vec<GrayImage>,
    by_class: BTreeMap<MamlClass, Vec<usize>>,
}

impl MamlPool {
    pub fn new(entries: Vec<(GrayImage, MamlClass)>) -> Self {
        let mut by_class: BTreeMap<MamlClass, Vec<usize>> = BTreeMap::new();
        let mut images = Vec::with_capacity(entries.len());
        for (i, (img, class)) in entries.into_iter().enumerate() {
            images.push(img);
            by_class.entry(class).or_default().push(i);
        }
        Self { images, by_class }
    }

    /// Pairs each label with its image from `images`.
    pub fn from_labels(labels: &[MamlLabel], images: &BTreeMap<String, GrayImage>) -> Result<Self> {
        let entries = labels
            .iter()
            .map(|l| {
                images
                    .get(&l.image_id)
                    .map(|img| (img.clone(), l.class))
                    .ok_or_else(|| {
                        Error::Data(format!("no image for labelled id `{}`", l.image_id))
                    })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &GrayImage {
        &self.images[index]
    }

    pub fn classes(&self) -> impl Iterator<Item = (MamlClass, usize)> + '_ {
        self.by_class.iter().map(|(c, v)| (*c, v.len()))
    }
}

/// One k-shot n-way task. Labels in `support`/`query` are episode-local
/// indices into `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<MamlClass>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    /// The same episode with local labels permuted by `perm` (old → new).
    pub fn relabeled(&self, perm: &[usize]) -> Episode {
        let mut classes = self.classes.clone();
        for (old, &new) in perm.iter().enumerate() {
            classes[new] = self.classes[old];
        }
        let map = |set: &[(usize, usize)]| set.iter().map(|&(i, y)| (i, perm[y])).collect();
        Episode {
            classes,
            support: map(&self.support),
            query: map(&self.query),
        }
    }
}

/// Draws `meta_batch` episodes: `ways` classes without replacement, then
/// `2·shots` distinct images per class split evenly into support and query.
pub fn sample_meta_batch(
    pool: &MamlPool,
    cfg: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>> {
    let eligible: Vec<MamlClass> = pool
        .by_class
        .iter()
        .filter(|(_, v)| v.len() >= 2 * cfg.shots)
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < cfg.ways {
        return Err(Error::Data(format!(
            "{}-way {}-shot episodes need {} classes with at least {} images; pool has {}",
            cfg.ways,
            cfg.shots,
            cfg.ways,
            2 * cfg.shots,
            eligible.len()
        )));
    }
    (0..cfg.meta_batch)
        .map(|_| {
            let classes: Vec<MamlClass> =
                eligible.choose_multiple(rng, cfg.ways).copied().collect();
            let mut support = Vec::with_capacity(cfg.ways * cfg.shots);
            let mut query = Vec::with_capacity(cfg.ways * cfg.shots);
            for (label, class) in classes.iter().enumerate() {
                let picked: Vec<usize> = pool.by_class[class]
                    .choose_multiple(rng, 2 * cfg.shots)
                    .copied()
                    .collect();
                support.extend(picked[..cfg.shots].iter().map(|&i| (i, label)));
                query.extend(picked[cfg.shots..].iter().map(|&i| (i, label)));
            }
            Ok(Episode {
                classes,
                support,
                query,
            })
        })
        .collect()
}

/// An [`Episode`] materialized as tensors for a given learner. The n-way
/// head starts at zero for every episode, which keeps adaptation symmetric
/// under relabeling of the classes.
pub struct EpisodeTask {
    learner: MetaLearner,
    ways: usize,
    support_x: Tensor,
    support_y: Vec<usize>,
    query_x: Tensor,
    query_y: Vec<usize>,
}

impl EpisodeTask {
    pub fn new(learner: MetaLearner, pool: &MamlPool, episode: &Episode) -> Result<Self> {
        let batch = |set: &[(usize, usize)]| -> Result<(Tensor, Vec<usize>)> {
            let imgs: Vec<&GrayImage> = set.iter().map(|&(i, _)| pool.image(i)).collect();
            Ok((
                images_to_tensor(&imgs)?,
                set.iter().map(|&(_, y)| y).collect(),
            ))
        };
        let (support_x, support_y) = batch(&episode.support)?;
        let (query_x, query_y) = batch(&episode.query)?;
        Ok(Self {
            learner,
            ways: episode.classes.len(),
            support_x,
            support_y,
            query_x,
            query_y,
        })
    }
}

impl MetaTask for EpisodeTask {
    fn prepare(&self, theta: &Params) -> Result<Params> {
        let mut p = theta.clone();
        p.insert(
            HEAD_WEIGHT,
            zeros_param(&[self.learner.filters, self.ways])?,
        );
        p.insert(HEAD_BIAS, zeros_param(&[self.ways])?);
        Ok(p)
    }

    fn support_loss(&self, params: &Params) -> Result<Tensor> {
        cross_entropy_loss(
            &self.learner.logits(params, &self.support_x)?,
            &self.support_y,
        )
    }

    fn query_loss(&self, params: &Params) -> Result<(Tensor, Option<f64>)> {
        let logits = self.learner.logits(params, &self.query_x)?;
        let hits = argmax_rows(&logits)?
            .iter()
            .zip(&self.query_y)
            .filter(|(p, y)| p == y)
            .count();
        let loss = cross_entropy_loss(&logits, &self.query_y)?;
        Ok((loss, Some(hits as f64 / self.query_y.len() as f64)))
    }
}

/// Query loss and accuracy of θ after adapting to one task (no outer update).
pub fn evaluate_task<T: MetaTask>(
    theta: &Params,
    task: &T,
    cfg: &MetaConfig,
) -> Result<TaskOutcome> {
    let adapted = adapt(
        &task.prepare(&theta.to_leaves())?,
        task,
        cfg.inner_lr,
        cfg.inner_steps,
        false,
    )?;
    let (loss, query_accuracy) = task.query_loss(&adapted)?;
    Ok(TaskOutcome {
        query_loss: loss.item()?,
        query_accuracy,
    })
}

/// Mean post-adaptation query accuracy over `episodes` freshly sampled tasks.
pub fn evaluate_episodes(
    learner: &MetaLearner,
    theta: &Params,
    pool: &MamlPool,
    cfg: &MetaConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let eval_cfg = MetaConfig {
        meta_batch: episodes,
        ..cfg.clone()
    };
    let tasks = sample_meta_batch(pool, &eval_cfg, rng)?
        .iter()
        .map(|e| EpisodeTask::new(*learner, pool, e))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<TaskOutcome> = tasks
        .par_iter()
        .map(|t| evaluate_task(theta, t, cfg))
        .collect::<Result<_>>()?;
    Ok(outcomes
        .iter()
        .filter_map(|o| o.query_accuracy)
        .sum::<f64>()
        / outcomes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaLogEntry {
    pub iteration: usize,
    pub mean_query_loss: f64,
    pub mean_query_accuracy: f64,
}

impl MetaLogEntry {
    pub const CSV_HEADER: &'static str = "iteration,mean_query_loss,mean_query_accuracy";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{}",
            self.iteration, self.mean_query_loss, self.mean_query_accuracy
        )
    }
}

pub struct MetaTrainOutput {
    pub theta: Params,
    pub log: Vec<MetaLogEntry>,
}

/// Runs `meta_iterations` rounds of sampling, adaptation and outer update.
/// θ is initialized from `cfg.seed` unless `init` is given; `on_iteration`
/// sees every log entry as it is produced.
pub fn meta_train(
    learner: &MetaLearner,
    pool: &MamlPool,
    cfg: &MetaConfig,
    init: Option<Params>,
    mut on_iteration: impl FnMut(&MetaLogEntry) -> Result<()>,
) -> Result<MetaTrainOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = match init {
        Some(p) => p.to_leaves(),
        None => learner.init(&mut rng)?,
    };
    let mut log = Vec::with_capacity(cfg.meta_iterations);
    for iteration in 1..=cfg.meta_iterations {
        let tasks = sample_meta_batch(pool, cfg, &mut rng)?
            .iter()
            .map(|e| EpisodeTask::new(*learner, pool, e))
            .collect::<Result<Vec<_>>>()?;
        let (next, outcomes) = meta_step(&theta, &tasks, cfg)?;
        theta = next;
        let n = outcomes.len() as f64;
        let entry = MetaLogEntry {
            iteration,
            mean_query_loss: outcomes.iter().map(|o| o.query_loss).sum::<f64>() / n,
            mean_query_accuracy: outcomes
                .iter()
                .filter_map(|o| o.query_accuracy)
                .sum::<f64>()
                / n,
        };
        on_iteration(&entry)?;
        log.push(entry);
    }
    Ok(MetaTrainOutput { theta, log })
}
