use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mevf_core::cdae::{cdae_train, CdaeLogEntry};
use mevf_core::data::{
    checkpoint_load, checkpoint_save, generate_synthetic_suite, load_image, load_image_dir,
    load_maml_labels, load_vqa_dataset, resolve_image, split_train_test, AnswerVocab, GrayImage,
};
use mevf_core::maml::{meta_train, MamlPool, MetaLearner, MetaLogEntry};
use mevf_core::vqa::{
    vqa_evaluate, vqa_train, EncodedSet, InitMode, QuestionVocab, VqaConfig, VqaLogEntry, VqaModel,
    WordEmbeddings,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Split};
use crate::error::CliError;

pub const MAML_CHECKPOINT: &str = "maml.ckpt";
pub const CDAE_CHECKPOINT: &str = "cdae.ckpt";
pub const VQA_CHECKPOINT: &str = "vqa.ckpt";
pub const ANSWERS: &str = "answers.json";
pub const QUESTIONS: &str = "questions.json";
pub const MODEL: &str = "model.json";
pub const REPORT: &str = "report.json";

/// Creates `out`, refusing to reuse an existing path. Without `out`, picks
/// the first free `runs/<command>-NNN`.
pub fn create_run_dir(out: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    if let Some(dir) = out {
        if dir.exists() {
            return Err(CliError::RunDirExists(dir.to_owned()));
        }
        if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::create_dir(dir)?;
        return Ok(dir.to_owned());
    }
    fs::create_dir_all("runs")?;
    for n in 1..=999_999 {
        let dir = PathBuf::from("runs").join(format!("{command}-{n:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(CliError::Config(
        "no free run directory name under runs/".into(),
    ))
}

struct CsvLog {
    out: BufWriter<fs::File>,
}

impl CsvLog {
    fn create(path: &Path, header: &str) -> Result<Self, CliError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{header}")?;
        Ok(Self { out })
    }

    fn line(&mut self, line: &str) -> mevf_core::Result<()> {
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn gen_synthetic(cfg: &RunConfig, run: &Path) -> Result<(), CliError> {
    let suite = generate_synthetic_suite(&cfg.synthetic)?;
    suite.write_to_dir(run)?;
    println!(
        "wrote {} train / {} test questions, {} meta-learning images, {} unlabeled images to {}",
        suite.vqa_train.len(),
        suite.vqa_test.len(),
        suite.maml_labels.len(),
        suite.unlabeled.len(),
        run.display()
    );
    Ok(())
}

/// Fails with a data error naming `path` when it is not a file.
fn require_file(path: &Path) -> Result<&Path, CliError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(mevf_core::Error::Data(format!("missing input file {}", path.display())).into())
    }
}

fn load_referenced_images<'a>(
    dir: &Path,
    ids: impl IntoIterator<Item = &'a str>,
    resolution: usize,
) -> Result<BTreeMap<String, GrayImage>, CliError> {
    let mut images = BTreeMap::new();
    for id in ids {
        if images.contains_key(id) {
            continue;
        }
        let path = resolve_image(dir, id).ok_or_else(|| {
            mevf_core::Error::Data(format!("image `{id}` not found in {}", dir.display()))
        })?;
        images.insert(id.to_owned(), load_image(&path)?.resized(resolution));
    }
    Ok(images)
}

pub fn pretrain_maml(cfg: &RunConfig, run: &Path) -> Result<(), CliError> {
    let labels = load_maml_labels(require_file(&cfg.data_dir.join("maml_labels.jsonl"))?)?;
    let images = load_referenced_images(
        &cfg.data_dir.join("images"),
        labels.iter().map(|l| l.image_id.as_str()),
        cfg.data_image_size,
    )?;
    let pool = MamlPool::from_labels(&labels, &images)?;
    let learner = MetaLearner {
        image_size: cfg.data_image_size,
        filters: cfg.maml_filters,
    };
    let mut log = CsvLog::create(&run.join("maml_log.csv"), MetaLogEntry::CSV_HEADER)?;
    let out = meta_train(&learner, &pool, &cfg.maml, None, |e| {
        log.line(&e.csv_line())
    })?;
    checkpoint_save(&out.theta, &run.join(MAML_CHECKPOINT))?;
    if let Some(last) = out.log.last() {
        println!(
            "meta-training finished: iteration {}, query loss {:.4}, query accuracy {:.3}",
            last.iteration, last.mean_query_loss, last.mean_query_accuracy
        );
    }
    Ok(())
}

pub fn pretrain_cdae(cfg: &RunConfig, run: &Path) -> Result<(), CliError> {
    let dir = cfg.data_dir.join("unlabeled");
    if !dir.is_dir() {
        return Err(
            mevf_core::Error::Data(format!("missing image directory {}", dir.display())).into(),
        );
    }
    let images: Vec<GrayImage> = load_image_dir(&dir, cfg.data_image_size)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    let (train, test) = split_train_test(&images);
    let mut log = CsvLog::create(&run.join("cdae_log.csv"), CdaeLogEntry::CSV_HEADER)?;
    let out = cdae_train(&train, &test, &cfg.cdae, |e| log.line(&e.csv_line()))?;
    checkpoint_save(&out.params, &run.join(CDAE_CHECKPOINT))?;
    if let Some(last) = out.log.last() {
        println!(
            "denoising training finished: epoch {}, train mse {:.5}, test mse {:.5}",
            last.epoch, last.train_rec_loss, last.test_rec_loss
        );
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(
        path,
        serde_json::to_string_pretty(value).map_err(mevf_core::Error::from)?,
    )?;
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(require_file(path)?).map_err(mevf_core::Error::from)?;
    Ok(serde_json::from_str(&text).map_err(mevf_core::Error::from)?)
}

pub fn train_vqa(cfg: &RunConfig, run: &Path) -> Result<(), CliError> {
    let images_dir = cfg.data_dir.join("images");
    let train = load_vqa_dataset(
        require_file(&cfg.data_dir.join(Split::Train.file_name()))?,
        &images_dir,
        cfg.data_image_size,
    )?
    .strict()?;
    let val_path = cfg.data_dir.join(Split::Test.file_name());
    let val = if val_path.exists() {
        Some(load_vqa_dataset(&val_path, &images_dir, cfg.data_image_size)?.strict()?)
    } else {
        None
    };

    let (answers, warnings) = AnswerVocab::build(&train.samples)?;
    for w in &warnings {
        eprintln!("warning: {w:?}");
    }
    let questions = QuestionVocab::build(train.samples.iter().map(|s| s.question.as_str()));
    let s = &cfg.vqa;
    let glove = match &s.glove_path {
        Some(path) => {
            let (table, found) =
                WordEmbeddings::load_glove(require_file(path)?, &questions, s.glove_dim)?;
            println!(
                "word vectors: {found} of {} vocabulary words found in {}",
                questions.len(),
                path.display()
            );
            table
        }
        None => WordEmbeddings::synthetic(&questions, s.glove_dim),
    };
    let model = VqaModel::new(VqaConfig {
        image_size: cfg.data_image_size,
        maml_filters: cfg.maml_filters,
        cdae_channels: cfg.cdae.channels.clone(),
        cdae_pool_after: cfg.cdae.pool_after.clone(),
        glove_dim: s.glove_dim,
        augment_dim: s.augment_dim,
        hidden_dim: s.hidden_dim,
        attention_dim: s.attention_dim,
        single_region: s.single_region,
        question_vocab: questions.len(),
        answers: answers.len(),
    })?;
    let mode = match (&s.maml_checkpoint, &s.cdae_checkpoint) {
        (Some(m), Some(c)) => InitMode::Finetune {
            maml: checkpoint_load(require_file(m)?)?,
            cdae: checkpoint_load(require_file(c)?)?,
        },
        _ => InitMode::Scratch,
    };
    let params = model.init(&glove, &mode, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    let train_set = EncodedSet::new(&train.samples, &train.images, &questions, &answers)?;
    let val_set = val
        .map(|v| EncodedSet::new(&v.samples, &v.images, &questions, &answers))
        .transpose()?;
    let mut log = CsvLog::create(&run.join("vqa_log.csv"), VqaLogEntry::CSV_HEADER)?;
    let out = vqa_train(
        &model,
        &params,
        &answers,
        &train_set,
        val_set.as_ref(),
        &s.train,
        |e| log.line(&e.csv_line()),
    )?;

    checkpoint_save(&out.params, &run.join(VQA_CHECKPOINT))?;
    answers.save(&run.join(ANSWERS))?;
    write_json(&run.join(QUESTIONS), &questions)?;
    write_json(&run.join(MODEL), &model.config)?;
    let init = if matches!(mode, InitMode::Scratch) {
        "from scratch"
    } else {
        "finetuning"
    };
    if let Some(last) = out.log.last() {
        let val = last
            .val_accuracy
            .map(|v| format!(", val accuracy {v:.1}%"))
            .unwrap_or_default();
        println!(
            "trained ({init}): epoch {}, loss {:.4}, train accuracy {:.1}%{val}",
            last.epoch, last.loss, last.train_accuracy
        );
    }
    if let Some(e) = out.epochs_to_target {
        println!("target accuracy first reached at epoch {e}");
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, run: &Path) -> Result<(), CliError> {
    let model_dir = cfg.eval_model_dir.as_deref().ok_or_else(|| {
        CliError::Config("`eval.model_dir` must name a train-vqa run directory".into())
    })?;
    let config: VqaConfig = read_json(&model_dir.join(MODEL))?;
    let answers = AnswerVocab::load(require_file(&model_dir.join(ANSWERS))?)?;
    let questions: QuestionVocab = read_json(&model_dir.join(QUESTIONS))?;
    let params = checkpoint_load(require_file(&model_dir.join(VQA_CHECKPOINT))?)?;
    let image_size = config.image_size;
    let model = VqaModel::new(config)?;

    let data = load_vqa_dataset(
        require_file(&cfg.data_dir.join(cfg.eval_split.file_name()))?,
        &cfg.data_dir.join("images"),
        image_size,
    )?
    .strict()?;
    let set = EncodedSet::new(&data.samples, &data.images, &questions, &answers)?;
    let report = vqa_evaluate(&model, &params, &set, &answers)?;
    write_json(&run.join(REPORT), &report)?;
    let pct = |v: Option<f64>| {
        v.map(|v| format!("{v:.1}%"))
            .unwrap_or_else(|| "n/a".into())
    };
    println!(
        "{} questions: overall {:.1}%, open-ended {}, close-ended {}",
        report.n_questions,
        report.overall,
        pct(report.open_ended),
        pct(report.close_ended)
    );
    Ok(())
}
