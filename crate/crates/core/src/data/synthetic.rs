//! Procedural stand-in for a radiology VQA corpus.
//!
//! Each image is a dark field with one "organ" rectangle placed in the
//! top, middle or bottom band (the body part). A condition mark is drawn on
//! top: nothing, a bright blob, or an oversized organ. Questions come from a
//! small template bank and their answers are functions of the generating
//! parameters, so everything is answerable by construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::GrayImage;
use super::sample::{
    write_jsonl, AnswerType, BodyPart, Category, Condition, MamlClass, MamlLabel, VqaSample,
};

const BACKGROUND: f64 = 0.1;
const ORGAN: f64 = 0.55;
const BLOB: f64 = 0.95;
const PIXEL_NOISE: f64 = 0.03;

/// The three question families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Abnormality,
    Part,
    Condition,
}

impl QuestionKind {
    pub const ALL: [QuestionKind; 3] = [
        QuestionKind::Abnormality,
        QuestionKind::Part,
        QuestionKind::Condition,
    ];

    fn paraphrases(self) -> &'static [&'static str] {
        match self {
            QuestionKind::Abnormality => &[
                "Is there an abnormality?",
                "Is anything abnormal in this image?",
                "Does this image look abnormal?",
            ],
            QuestionKind::Part => &[
                "Which part is shown?",
                "What body part is this?",
                "Which region is imaged?",
            ],
            QuestionKind::Condition => &[
                "What condition is present?",
                "What finding is seen?",
                "Which abnormality is visible?",
            ],
        }
    }

    fn answer_type(self) -> AnswerType {
        match self {
            QuestionKind::Abnormality => AnswerType::Closed,
            _ => AnswerType::Open,
        }
    }

    fn category(self) -> Category {
        match self {
            QuestionKind::Abnormality => Category::Abnormality,
            QuestionKind::Part => Category::Organ,
            QuestionKind::Condition => Category::ObjectConditionPresence,
        }
    }

    /// Recognizes a question string produced by the template bank.
    pub fn from_question(question: &str) -> Option<QuestionKind> {
        QuestionKind::ALL
            .into_iter()
            .find(|k| k.paraphrases().contains(&question))
    }
}

/// Everything needed to redraw an image exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageParams {
    pub class: MamlClass,
    /// Organ centre, as fractions of the image size.
    pub center: (f64, f64),
    /// Organ half extents, as fractions of the image size.
    pub half: (f64, f64),
    /// Blob centre offset from the organ centre, as fractions of the half extents.
    pub blob_offset: (f64, f64),
    pub noise_seed: u64,
}

impl ImageParams {
    /// Random parameters for a given class.
    pub fn sample<R: Rng>(class: MamlClass, rng: &mut R) -> Self {
        let band = match class.part {
            BodyPart::Head => 1.0 / 6.0,
            BodyPart::Chest => 0.5,
            BodyPart::Abdomen => 5.0 / 6.0,
        };
        let scale = if class.condition == Condition::AbnormalOrgan {
            1.6
        } else {
            1.0
        };
        ImageParams {
            class,
            center: (rng.gen_range(0.35..0.65), band + rng.gen_range(-0.03..0.03)),
            half: (
                rng.gen_range(0.16..0.2) * scale,
                rng.gen_range(0.08..0.1) * scale.min(1.5),
            ),
            blob_offset: (rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3)),
            noise_seed: rng.gen(),
        }
    }

    pub fn render(&self, size: usize) -> GrayImage {
        let s = size as f64;
        let mut img = GrayImage::filled(size, BACKGROUND);
        let (cx, cy) = (self.center.0 * s, self.center.1 * s);
        let (hx, hy) = (self.half.0 * s, self.half.1 * s);
        let (bx, by) = (cx + self.blob_offset.0 * hx, cy + self.blob_offset.1 * hy);
        let blob_r = (0.06 * s).max(1.5);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let p = &mut img.pixels[y * size + x];
                if (px - cx).abs() <= hx && (py - cy).abs() <= hy {
                    *p = ORGAN;
                }
                if self.class.condition == Condition::AbnormalPresent
                    && (px - bx).powi(2) + (py - by).powi(2) <= blob_r * blob_r
                {
                    *p = BLOB;
                }
            }
        }
        let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        for p in &mut img.pixels {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        img.quantized()
    }
}

/// Ground-truth answer for a question kind.
pub fn oracle_answer(kind: QuestionKind, class: MamlClass) -> &'static str {
    match kind {
        QuestionKind::Abnormality => match class.condition {
            Condition::Normal => "no",
            _ => "yes",
        },
        QuestionKind::Part => match class.part {
            BodyPart::Head => "head",
            BodyPart::Chest => "chest",
            BodyPart::Abdomen => "abdomen",
        },
        QuestionKind::Condition => match class.condition {
            Condition::Normal => "none",
            Condition::AbnormalPresent => "mass",
            Condition::AbnormalOrgan => "enlarged organ",
        },
    }
}

/// Recovers the class from pixels alone: the band holding the most organ
/// pixels gives the part, saturated pixels mark a blob and a large organ
/// area marks enlargement.
pub fn classify_image(img: &GrayImage) -> MamlClass {
    let size = img.height;
    let mut band_mass = [0usize; 3];
    let mut organ_px = 0usize;
    let mut bright_px = 0usize;
    for y in 0..size {
        for x in 0..img.width {
            let v = img.get(x, y);
            if v > 0.35 {
                band_mass[(y * 3 / size).min(2)] += 1;
                organ_px += 1;
            }
            if v > 0.8 {
                bright_px += 1;
            }
        }
    }
    let part = BodyPart::ALL[(0..3)
        .max_by_key(|&i| (band_mass[i], std::cmp::Reverse(i)))
        .expect("3 bands")];
    let area = organ_px as f64 / (size * img.width) as f64;
    let blob_r = (0.06 * size as f64).max(1.5);
    let condition = if bright_px as f64 >= 0.25 * std::f64::consts::PI * blob_r * blob_r {
        Condition::AbnormalPresent
    } else if area > 0.1 {
        Condition::AbnormalOrgan
    } else {
        Condition::Normal
    };
    MamlClass { part, condition }
}

/// Sizes and seed of a generated suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub vqa_train_images: usize,
    pub vqa_test_images: usize,
    /// Questions asked per VQA image, at most 3 (one per template family).
    pub questions_per_image: usize,
    pub maml_images: usize,
    pub unlabeled_images: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            vqa_train_images: 90,
            vqa_test_images: 30,
            questions_per_image: 3,
            maml_images: 180,
            unlabeled_images: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("synthetic image_size must be at least 8"));
        }
        if self.questions_per_image == 0 || self.questions_per_image > 3 {
            return Err(Error::invalid("questions_per_image must be in 1..=3"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSuite {
    pub vqa_train: Vec<VqaSample>,
    pub vqa_test: Vec<VqaSample>,
    pub maml_labels: Vec<MamlLabel>,
    /// Images referenced by the VQA splits and the label file.
    pub images: BTreeMap<String, GrayImage>,
    pub params: BTreeMap<String, ImageParams>,
    pub unlabeled: Vec<(String, GrayImage)>,
}

/// Builds a suite in memory. Classes cycle through all nine so any count of
/// at least nine covers every class.
pub fn generate_synthetic_suite(spec: &SyntheticSpec) -> Result<SyntheticSuite> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = MamlClass::all();
    let mut images = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut qid = 0usize;

    let mut stratified = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| {
        let mut order: Vec<MamlClass> = (0..count).map(|i| classes[i % classes.len()]).collect();
        order.shuffle(rng);
        order
            .into_iter()
            .enumerate()
            .map(|(i, class)| {
                let id = format!("{prefix}_{i:05}");
                let p = ImageParams::sample(class, rng);
                images.insert(id.clone(), p.render(spec.image_size));
                params.insert(id.clone(), p);
                (id, class)
            })
            .collect::<Vec<_>>()
    };

    let train_imgs = stratified("vqa_train", spec.vqa_train_images, &mut rng);
    let test_imgs = stratified("vqa_test", spec.vqa_test_images, &mut rng);
    let maml_imgs = stratified("maml", spec.maml_images, &mut rng);

    let mut questions = |imgs: &[(String, MamlClass)], rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for (image_id, class) in imgs {
            let mut kinds = QuestionKind::ALL.to_vec();
            kinds.shuffle(rng);
            for kind in kinds.into_iter().take(spec.questions_per_image) {
                let question = kind.paraphrases().choose(rng).expect("non-empty bank");
                out.push(VqaSample {
                    question_id: format!("q{qid:06}"),
                    image_id: image_id.clone(),
                    question: question.to_string(),
                    answer: oracle_answer(kind, *class).to_string(),
                    answer_type: kind.answer_type(),
                    category: kind.category(),
                });
                qid += 1;
            }
        }
        out
    };
    let vqa_train = questions(&train_imgs, &mut rng);
    let vqa_test = questions(&test_imgs, &mut rng);
    let maml_labels = maml_imgs
        .into_iter()
        .map(|(image_id, class)| MamlLabel { image_id, class })
        .collect();

    let unlabeled = (0..spec.unlabeled_images)
        .map(|i| {
            let class = *classes.choose(&mut rng).expect("nine classes");
            (
                format!("unl_{i:05}"),
                ImageParams::sample(class, &mut rng).render(spec.image_size),
            )
        })
        .collect();

    Ok(SyntheticSuite {
        vqa_train,
        vqa_test,
        maml_labels,
        images,
        params,
        unlabeled,
    })
}

impl SyntheticSuite {
    /// Writes `images/*.png`, `unlabeled/*.png`, `vqa_train.jsonl`,
    /// `vqa_test.jsonl` and `maml_labels.jsonl` under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        let unl_dir = dir.join("unlabeled");
        fs::create_dir_all(&img_dir)?;
        fs::create_dir_all(&unl_dir)?;
        for (id, img) in &self.images {
            img.save_png(&img_dir.join(format!("{id}.png")))?;
        }
        for (id, img) in &self.unlabeled {
            img.save_png(&unl_dir.join(format!("{id}.png")))?;
        }
        write_jsonl(&dir.join("vqa_train.jsonl"), &self.vqa_train)?;
        write_jsonl(&dir.join("vqa_test.jsonl"), &self.vqa_test)?;
        write_jsonl(&dir.join("maml_labels.jsonl"), &self.maml_labels)?;
        Ok(())
    }

    /// Answer implied by the stored generation parameters, or `None` for a
    /// question outside the template bank.
    pub fn oracle(&self, sample: &VqaSample) -> Option<&'static str> {
        let kind = QuestionKind::from_question(&sample.question)?;
        Some(oracle_answer(
            kind,
            self.params.get(&sample.image_id)?.class,
        ))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::load_vqa_dataset;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            image_size: 24,
            vqa_train_images: 18,
            vqa_test_images: 9,
            questions_per_image: 3,
            maml_images: 27,
            unlabeled_images: 20,
            seed: 7,
        }
    }

    #[test]
    fn stored_answers_match_oracle_and_pixels() {
        let suite = generate_synthetic_suite(&small()).unwrap();
        for s in suite.vqa_train.iter().chain(&suite.vqa_test) {
            assert_eq!(suite.oracle(s), Some(s.answer.as_str()), "{s:?}");
            let from_pixels = classify_image(&suite.images[&s.image_id]);
            let kind = QuestionKind::from_question(&s.question).unwrap();
            assert_eq!(oracle_answer(kind, from_pixels), s.answer, "{s:?}");
        }
        for l in &suite.maml_labels {
            assert_eq!(classify_image(&suite.images[&l.image_id]), l.class);
        }
    }

    #[test]
    fn pixel_classifier_agrees_at_several_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for size in [16, 24, 32, 84] {
            for _ in 0..5 {
                for class in MamlClass::all() {
                    let img = ImageParams::sample(class, &mut rng).render(size);
                    assert_eq!(classify_image(&img), class, "size {size}");
                }
            }
        }
    }

    #[test]
    fn all_nine_classes_present() {
        let suite = generate_synthetic_suite(&small()).unwrap();
        let seen: BTreeSet<_> = suite.maml_labels.iter().map(|l| l.class).collect();
        assert_eq!(seen.len(), 9);
        let seen: BTreeSet<_> = suite
            .vqa_train
            .iter()
            .map(|s| suite.params[&s.image_id].class)
            .collect();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_suite(&small())
            .unwrap()
            .write_to_dir(a.path())
            .unwrap();
        generate_synthetic_suite(&small())
            .unwrap()
            .write_to_dir(b.path())
            .unwrap();
        for rel in [
            "vqa_train.jsonl",
            "vqa_test.jsonl",
            "maml_labels.jsonl",
            "images/maml_00003.png",
            "unlabeled/unl_00019.png",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        let other = generate_synthetic_suite(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        let first = generate_synthetic_suite(&small()).unwrap();
        assert_ne!(other.images["maml_00000"], first.images["maml_00000"]);
    }

    #[test]
    fn written_suite_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let suite = generate_synthetic_suite(&small()).unwrap();
        suite.write_to_dir(dir.path()).unwrap();
        let loaded = load_vqa_dataset(
            &dir.path().join("vqa_train.jsonl"),
            &dir.path().join("images"),
            24,
        )
        .unwrap();
        assert!(loaded.rejects.is_empty());
        assert_eq!(loaded.samples, suite.vqa_train);
        for (id, img) in &loaded.images {
            assert_eq!(img, &suite.images[id]);
        }
    }
}
