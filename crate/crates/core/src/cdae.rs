//! Convolutional denoising auto-encoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Params, Tensor};
use crate::data::{images_to_tensor, GrayImage};
use crate::error::{Error, Result};
use crate::nn::{
    conv2d, conv2d_transposed, fan_in_uniform, global_mean_pool, linear, mse_loss, pool2d,
    zeros_param, ConvSpec, Optimizer, OptimizerConfig, PoolKind, RELU_GAIN,
};

pub const CDAE_FEATURE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdaeConfig {
    pub image_size: usize,
    /// Output channels of each encoder stage.
    pub channels: Vec<usize>,
    /// Whether a 2×2 max pool follows each stage.
    pub pool_after: Vec<bool>,
    pub noise_sigma: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CdaeConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            channels: vec![16, 32, 32],
            pool_after: vec![true, true, false],
            noise_sigma: 0.1,
            optimizer: OptimizerConfig::adam(0.001),
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Layer plan derived from a config, checked once at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Cdae {
    image_size: usize,
    encoder: Vec<ConvSpec>,
    pool_after: Vec<bool>,
    decoder: Vec<ConvSpec>,
    output: ConvSpec,
    latent_size: usize,
}

impl Cdae {
    pub fn new(cfg: &CdaeConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.contains(&0) {
            return Err(Error::invalid(
                "CDAE needs at least one stage with non-zero channels",
            ));
        }
        if cfg.pool_after.len() != cfg.channels.len() {
            return Err(Error::invalid(format!(
                "{} pool flags for {} encoder stages",
                cfg.pool_after.len(),
                cfg.channels.len()
            )));
        }
        let mut encoder = Vec::new();
        // (channels, spatial size) of every pre-pool activation the decoder must restore.
        let mut restore = Vec::new();
        let (mut c_in, mut size) = (1, cfg.image_size);
        for (&c, &pool) in cfg.channels.iter().zip(&cfg.pool_after) {
            let spec = ConvSpec::square(c_in, c, 3, 1, 1);
            size = spec.output_dim(size, 3)?;
            encoder.push(spec);
            if pool {
                if size < 2 {
                    return Err(Error::invalid(format!(
                        "image size {} too small for the pooling stages",
                        cfg.image_size
                    )));
                }
                restore.push((c, size));
                size /= 2;
            }
            c_in = c;
        }
        let latent_size = size;
        let mut decoder = Vec::new();
        let mut c_cur = c_in;
        for &(c, target) in restore.iter().rev() {
            // (in − 1)·2 + k = target with stride 2 and no padding.
            let kernel = target - 2 * (size - 1);
            decoder.push(ConvSpec::square(c_cur, c, kernel, 2, 0));
            c_cur = c;
            size = target;
        }
        let output = ConvSpec::square(c_cur, 1, 3, 1, 1);
        Ok(Self {
            image_size: cfg.image_size,
            encoder,
            pool_after: cfg.pool_after.clone(),
            decoder,
            output,
            latent_size,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.encoder.last().expect("non-empty").out_channels
    }

    pub fn latent_size(&self) -> usize {
        self.latent_size
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<Params> {
        let mut p = Params::new();
        for (i, spec) in self.encoder.iter().enumerate() {
            let fan_in = spec.in_channels * 9;
            p.insert(
                format!("cdae.enc{i}.weight"),
                fan_in_uniform(&spec.weight_shape(), fan_in, RELU_GAIN, rng)?,
            );
            p.insert(
                format!("cdae.enc{i}.bias"),
                zeros_param(&[spec.out_channels])?,
            );
        }
        for (i, spec) in self.decoder.iter().enumerate() {
            let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
            p.insert(
                format!("cdae.dec{i}.weight"),
                fan_in_uniform(&spec.transposed_weight_shape(), fan_in, RELU_GAIN, rng)?,
            );
            p.insert(
                format!("cdae.dec{i}.bias"),
                zeros_param(&[spec.out_channels])?,
            );
        }
        let fan_in = self.output.in_channels * 9;
        p.insert(
            "cdae.out.weight",
            fan_in_uniform(&self.output.weight_shape(), fan_in, 1.0, rng)?,
        );
        p.insert("cdae.out.bias", zeros_param(&[1])?);
        let c = self.latent_channels();
        p.insert(
            "cdae.proj.weight",
            fan_in_uniform(&[c, CDAE_FEATURE_DIM], c, 1.0, rng)?,
        );
        p.insert("cdae.proj.bias", zeros_param(&[CDAE_FEATURE_DIM])?);
        Ok(p)
    }

    /// `[N, 1, S, S]` to the latent `[N, C, s, s]`.
    pub fn encode(&self, params: &Params, x: &Tensor) -> Result<Tensor> {
        match *x.shape() {
            [_, 1, h, w] if h == self.image_size && w == self.image_size => {}
            _ => {
                return Err(Error::shape(
                    "cdae_encode",
                    format!(
                        "expected [N, 1, {s}, {s}], got {:?}",
                        x.shape(),
                        s = self.image_size
                    ),
                ))
            }
        }
        let mut z = x.clone();
        for (i, (spec, &pool)) in self.encoder.iter().zip(&self.pool_after).enumerate() {
            let w = params.get(&format!("cdae.enc{i}.weight"))?;
            let b = params.get(&format!("cdae.enc{i}.bias"))?;
            z = conv2d(&z, spec, w, Some(b))?.relu()?;
            if pool {
                z = pool2d(&z, PoolKind::Max, 2, 2)?;
            }
        }
        Ok(z)
    }

    /// Latent back to a `[N, 1, S, S]` image in (0, 1).
    pub fn decode(&self, params: &Params, z: &Tensor) -> Result<Tensor> {
        let mut y = z.clone();
        for (i, spec) in self.decoder.iter().enumerate() {
            let w = params.get(&format!("cdae.dec{i}.weight"))?;
            let b = params.get(&format!("cdae.dec{i}.bias"))?;
            y = conv2d_transposed(&y, spec, w, Some(b))?.relu()?;
        }
        let y = conv2d(
            &y,
            &self.output,
            params.get("cdae.out.weight")?,
            Some(params.get("cdae.out.bias")?),
        )?;
        let y = y.sigmoid()?;
        if y.shape()[2..] != [self.image_size, self.image_size] {
            return Err(Error::shape(
                "cdae_decode",
                format!("decoder produced {:?}", y.shape()),
            ));
        }
        Ok(y)
    }

    pub fn reconstruct(&self, params: &Params, x: &Tensor) -> Result<Tensor> {
        self.decode(params, &self.encode(params, x)?)
    }

    /// f_v2: latent mean-pooled per channel, then projected to 64 values.
    pub fn features(&self, params: &Params, x: &Tensor) -> Result<Tensor> {
        let pooled = global_mean_pool(&self.encode(params, x)?)?;
        linear(
            &pooled,
            params.get("cdae.proj.weight")?,
            params.get("cdae.proj.bias")?,
        )
    }
}

/// f_v2 of a single image.
pub fn cdae_feature(model: &Cdae, params: &Params, image: &GrayImage) -> Result<Tensor> {
    model
        .features(params, &images_to_tensor(&[image])?)?
        .reshape(&[CDAE_FEATURE_DIM])
}

/// `clamp(x + N(0, σ²), 0, 1)`, as a constant.
pub fn corrupt(x: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(x.detach());
    }
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    x.with_values(
        x.values()
            .iter()
            .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdaeLogEntry {
    pub epoch: usize,
    pub train_rec_loss: f64,
    pub test_rec_loss: f64,
}

impl CdaeLogEntry {
    pub const CSV_HEADER: &'static str = "epoch,train_rec_loss,test_rec_loss";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{}",
            self.epoch, self.train_rec_loss, self.test_rec_loss
        )
    }
}

pub struct CdaeTrainOutput {
    pub model: Cdae,
    pub params: Params,
    pub log: Vec<CdaeLogEntry>,
}

/// Reconstruction error from noisy inputs against clean targets, and the
/// error of the noisy inputs themselves. Noise comes from `seed`.
pub fn denoising_mse(
    model: &Cdae,
    params: &Params,
    images: &[GrayImage],
    sigma: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(Error::Data("no images to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = 0.0;
    let mut noisy = 0.0;
    for chunk in images.chunks(64) {
        let refs: Vec<&GrayImage> = chunk.iter().collect();
        let clean = images_to_tensor(&refs)?;
        let x = corrupt(&clean, sigma, &mut rng)?;
        let weight = chunk.len() as f64;
        rec += mse_loss(&model.reconstruct(&params.detached(), &x)?, &clean)?.item()? * weight;
        noisy += mse_loss(&x, &clean)?.item()? * weight;
    }
    let n = images.len() as f64;
    Ok((rec / n, noisy / n))
}

/// Minibatch training on `mean‖x − decode(encode(corrupt(x)))‖²`. Noise is
/// redrawn for every image in every epoch.
pub fn cdae_train(
    train: &[GrayImage],
    test: &[GrayImage],
    cfg: &CdaeConfig,
    mut on_epoch: impl FnMut(&CdaeLogEntry) -> Result<()>,
) -> Result<CdaeTrainOutput> {
    if train.is_empty() {
        return Err(Error::Data("CDAE training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let model = Cdae::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.init(&mut rng)?;
    // The projection is only trained downstream.
    let trainable: Params = Params::from_entries(
        params
            .iter()
            .filter(|(n, _)| !n.starts_with("cdae.proj"))
            .map(|(n, t)| (n.to_owned(), t.clone())),
    );
    let mut trainable = trainable;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&GrayImage> = batch.iter().map(|&i| &train[i]).collect();
            let clean = images_to_tensor(&refs)?;
            let noisy = corrupt(&clean, cfg.noise_sigma, &mut rng)?;
            let loss = mse_loss(&model.reconstruct(&trainable, &noisy)?, &clean)?;
            total += loss.item()? * batch.len() as f64;
            let grads = backward(&loss, &trainable, false)?;
            trainable = opt.step(&trainable, &grads)?;
        }
        let test_rec_loss = if test.is_empty() {
            f64::NAN
        } else {
            denoising_mse(&model, &trainable, test, cfg.noise_sigma, cfg.seed ^ 0x7e57)?.0
        };
        let entry = CdaeLogEntry {
            epoch,
            train_rec_loss: total / train.len() as f64,
            test_rec_loss,
        };
        on_epoch(&entry)?;
        log.push(entry);
    }
    params.overwrite_from(&trainable)?;
    Ok(CdaeTrainOutput { model, params, log })
}
