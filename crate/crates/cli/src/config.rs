use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mevf_core::cdae::CdaeConfig;
use mevf_core::data::SyntheticSpec;
use mevf_core::maml::MetaConfig;
use mevf_core::nn::OptimizerConfig;
use mevf_core::vqa::{LossWeights, VqaTrainConfig};

use crate::error::CliError;

/// Every accepted key with its default value, in file order.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.dir", "data"),
    ("data.image_size", "84"),
    ("synthetic.image_size", "32"),
    ("synthetic.vqa_train_images", "90"),
    ("synthetic.vqa_test_images", "30"),
    ("synthetic.questions_per_image", "3"),
    ("synthetic.maml_images", "180"),
    ("synthetic.unlabeled_images", "500"),
    ("maml.filters", "64"),
    ("maml.inner_lr", "0.5"),
    ("maml.meta_lr", "0.05"),
    ("maml.ways", "3"),
    ("maml.shots", "3"),
    ("maml.meta_batch", "5"),
    ("maml.meta_iterations", "300"),
    ("maml.inner_steps", "1"),
    ("maml.second_order", "true"),
    ("cdae.channels", "16,32,32"),
    ("cdae.pool_after", "true,true,false"),
    ("cdae.noise_sigma", "0.1"),
    ("cdae.optimizer", "adam"),
    ("cdae.lr", "0.001"),
    ("cdae.epochs", "30"),
    ("cdae.batch_size", "16"),
    ("vqa.glove_path", ""),
    ("vqa.glove_dim", "300"),
    ("vqa.augment_dim", "300"),
    ("vqa.hidden_dim", "1024"),
    ("vqa.attention_dim", "512"),
    ("vqa.single_region", "false"),
    ("vqa.maml_checkpoint", ""),
    ("vqa.cdae_checkpoint", ""),
    ("vqa.optimizer", "adam"),
    ("vqa.lr", "0.002"),
    ("vqa.epochs", "30"),
    ("vqa.batch_size", "16"),
    ("vqa.alpha1", "1"),
    ("vqa.alpha2", "1"),
    ("vqa.target_accuracy", ""),
    ("eval.model_dir", ""),
    ("eval.split", "test"),
];

/// Flat `key = value` document: defaults, then the config file, then
/// command-line overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_owned();
                Ok(())
            }
            None => Err(CliError::UnknownKey(key.to_owned())),
        }
    }

    /// Applies `key=value` (the `--set` form).
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            CliError::Config(format!("override `{pair}` is not of the form key=value"))
        })?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected `key = value`",
                    origin.display(),
                    i + 1
                ))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .expect("key is in the table")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| CliError::Config(format!("`{key}` = `{v}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("`{key}` element `{s}`: {e}")))
            })
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key))
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    }

    fn optimizer(&self, prefix: &str) -> Result<OptimizerConfig, CliError> {
        let lr: f64 = self.parse(&format!("{prefix}.lr"))?;
        match self.raw(&format!("{prefix}.optimizer")) {
            "sgd" => Ok(OptimizerConfig::sgd(lr)),
            "adam" => Ok(OptimizerConfig::adam(lr)),
            other => Err(CliError::Config(format!(
                "`{prefix}.optimizer` must be sgd or adam, got `{other}`"
            ))),
        }
    }

    /// The effective configuration as a config file.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            writeln!(out, "{k} = {}", self.raw(k)).expect("writing to a String");
        }
        out
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let seed: u64 = self.parse("seed")?;
        let data_image_size: usize = self.parse("data.image_size")?;
        let synthetic = SyntheticSpec {
            image_size: self.parse("synthetic.image_size")?,
            vqa_train_images: self.parse("synthetic.vqa_train_images")?,
            vqa_test_images: self.parse("synthetic.vqa_test_images")?,
            questions_per_image: self.parse("synthetic.questions_per_image")?,
            maml_images: self.parse("synthetic.maml_images")?,
            unlabeled_images: self.parse("synthetic.unlabeled_images")?,
            seed,
        };
        let maml = MetaConfig {
            inner_lr: self.parse("maml.inner_lr")?,
            meta_lr: self.parse("maml.meta_lr")?,
            ways: self.parse("maml.ways")?,
            shots: self.parse("maml.shots")?,
            meta_batch: self.parse("maml.meta_batch")?,
            meta_iterations: self.parse("maml.meta_iterations")?,
            inner_steps: self.parse("maml.inner_steps")?,
            second_order: self.parse("maml.second_order")?,
            seed,
        };
        let cdae = CdaeConfig {
            image_size: data_image_size,
            channels: self.list("cdae.channels")?,
            pool_after: self.list("cdae.pool_after")?,
            noise_sigma: self.parse("cdae.noise_sigma")?,
            optimizer: self.optimizer("cdae")?,
            epochs: self.parse("cdae.epochs")?,
            batch_size: self.parse("cdae.batch_size")?,
            seed,
        };
        let target_accuracy = match self.raw("vqa.target_accuracy") {
            "" => None,
            _ => Some(self.parse::<f64>("vqa.target_accuracy")?),
        };
        let vqa_train = VqaTrainConfig {
            epochs: self.parse("vqa.epochs")?,
            batch_size: self.parse("vqa.batch_size")?,
            optimizer: self.optimizer("vqa")?,
            weights: LossWeights {
                alpha1: self.parse("vqa.alpha1")?,
                alpha2: self.parse("vqa.alpha2")?,
            },
            seed,
            target_accuracy,
            stop_at_target: false,
        };
        let split = match self.raw("eval.split") {
            "test" => Split::Test,
            "train" => Split::Train,
            other => {
                return Err(CliError::Config(format!(
                    "`eval.split` must be train or test, got `{other}`"
                )))
            }
        };
        let cfg = RunConfig {
            seed,
            data_dir: self.path("data.dir").unwrap_or_else(|| PathBuf::from(".")),
            data_image_size,
            synthetic,
            maml,
            maml_filters: self.parse("maml.filters")?,
            cdae,
            vqa: VqaSettings {
                glove_path: self.path("vqa.glove_path"),
                glove_dim: self.parse("vqa.glove_dim")?,
                augment_dim: self.parse("vqa.augment_dim")?,
                hidden_dim: self.parse("vqa.hidden_dim")?,
                attention_dim: self.parse("vqa.attention_dim")?,
                single_region: self.parse("vqa.single_region")?,
                maml_checkpoint: self.path("vqa.maml_checkpoint"),
                cdae_checkpoint: self.path("vqa.cdae_checkpoint"),
                train: vqa_train,
            },
            eval_model_dir: self.path("eval.model_dir"),
            eval_split: split,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "vqa_train.jsonl",
            Split::Test => "vqa_test.jsonl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaSettings {
    pub glove_path: Option<PathBuf>,
    pub glove_dim: usize,
    pub augment_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub single_region: bool,
    pub maml_checkpoint: Option<PathBuf>,
    pub cdae_checkpoint: Option<PathBuf>,
    pub train: VqaTrainConfig,
}

/// Typed, validated run settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub data_image_size: usize,
    pub synthetic: SyntheticSpec,
    pub maml: MetaConfig,
    pub maml_filters: usize,
    pub cdae: CdaeConfig,
    pub vqa: VqaSettings,
    pub eval_model_dir: Option<PathBuf>,
    pub eval_split: Split,
}

impl RunConfig {
    fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("data.image_size", self.data_image_size),
            ("maml.filters", self.maml_filters),
            ("cdae.batch_size", self.cdae.batch_size),
            ("vqa.hidden_dim", self.vqa.hidden_dim),
            ("vqa.attention_dim", self.vqa.attention_dim),
            ("vqa.batch_size", self.vqa.train.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("`{key}` must be at least 1")));
            }
        }
        if self.vqa.glove_dim + self.vqa.augment_dim == 0 {
            return Err(CliError::Config(
                "`vqa.glove_dim` + `vqa.augment_dim` must be at least 1".into(),
            ));
        }
        if !(self.cdae.noise_sigma >= 0.0 && self.cdae.noise_sigma.is_finite()) {
            return Err(CliError::Config(format!(
                "`cdae.noise_sigma` must be ≥ 0, got {}",
                self.cdae.noise_sigma
            )));
        }
        if self.cdae.channels.len() != self.cdae.pool_after.len() {
            return Err(CliError::Config(
                "`cdae.channels` and `cdae.pool_after` differ in length".into(),
            ));
        }
        if let Some(t) = self.vqa.train.target_accuracy {
            if !(0.0..=100.0).contains(&t) {
                return Err(CliError::Config(format!(
                    "`vqa.target_accuracy` is a percentage, got {t}"
                )));
            }
        }
        if self.vqa.maml_checkpoint.is_some() != self.vqa.cdae_checkpoint.is_some() {
            return Err(CliError::Config(
                "`vqa.maml_checkpoint` and `vqa.cdae_checkpoint` must be given together".into(),
            ));
        }
        self.synthetic.validate().map_err(CliError::from_invalid)?;
        self.maml.validate().map_err(CliError::from_invalid)?;
        self.cdae
            .optimizer
            .validate()
            .map_err(CliError::from_invalid)?;
        self.vqa
            .train
            .optimizer
            .validate()
            .map_err(CliError::from_invalid)?;
        self.vqa
            .train
            .weights
            .validate()
            .map_err(CliError::from_invalid)?;
        Ok(())
    }
}
