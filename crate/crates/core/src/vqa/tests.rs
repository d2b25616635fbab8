use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{numeric_grad_check, Params, Tensor};
use crate::data::{AnswerType, AnswerVocab, Category, GrayImage, VqaSample};
use crate::nn::{cross_entropy_loss, mse_loss};

fn tiny_config(answers: usize) -> VqaConfig {
    VqaConfig {
        image_size: 8,
        maml_filters: 2,
        cdae_channels: vec![2, 2],
        cdae_pool_after: vec![true, false],
        glove_dim: 3,
        augment_dim: 2,
        hidden_dim: 16,
        attention_dim: 6,
        single_region: false,
        question_vocab: 10,
        answers,
    }
}

fn vocab10() -> QuestionVocab {
    QuestionVocab::build(["is there a mass in the left lung"])
}

fn tiny(answers: usize, seed: u64) -> (VqaModel, Params) {
    let model = VqaModel::new(tiny_config(answers)).unwrap();
    let glove = WordEmbeddings::synthetic(&vocab10(), 3);
    let params = model
        .init(
            &glove,
            &InitMode::Scratch,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
    (model, params)
}

fn image(seed: u64, size: usize) -> Tensor {
    let values = (0..size * size)
        .map(|i| ((i as u64 * 37 + seed * 11) % 23) as f64 / 23.0)
        .collect();
    Tensor::new(values, &[1, 1, size, size]).unwrap()
}

fn stack(images: &[Tensor]) -> Tensor {
    let size = images[0].shape()[2];
    let values: Vec<f64> = images.iter().flat_map(|t| t.to_vec()).collect();
    Tensor::new(values, &[images.len(), 1, size, size]).unwrap()
}

fn zero_biases(p: &Params) -> Params {
    Params::from_entries(p.iter().map(|(n, t)| {
        let zero = n.ends_with("bias") || n.contains(".b_");
        (
            n.to_owned(),
            if zero {
                Tensor::zeros(t.shape())
            } else {
                t.clone()
            },
        )
    }))
}

#[test]
fn pad_only_question_encodes_to_zero() {
    let (model, params) = tiny(5, 0);
    let pads = vec![vec![PAD; MAX_QUESTION_LEN]];
    let f_q = model.encode_question(&zero_biases(&params), &pads).unwrap();
    assert_eq!(f_q.shape(), &[1, 16]);
    assert!(f_q.values().iter().all(|&v| v == 0.0));
}

#[test]
fn question_encoding_is_deterministic_and_checked() {
    let (model, params) = tiny(5, 0);
    let tokens = vec![vocab10().tokenize_and_pad("is there a mass")];
    let a = model.encode_question(&params, &tokens).unwrap();
    let b = model.encode_question(&params, &tokens).unwrap();
    assert_eq!(a.values(), b.values());
    assert!(a.values().iter().any(|&v| v != 0.0));
    let mut bad = tokens[0].clone();
    bad[0] = 10;
    assert!(model.encode_question(&params, &[bad]).is_err());
}

#[test]
fn default_question_pipeline_dimensions() {
    let config = VqaConfig {
        question_vocab: 10,
        answers: 458,
        ..VqaConfig::default()
    };
    assert_eq!(config.glove_dim + config.augment_dim, 600);
    assert_eq!(config.hidden_dim, 1024);
    let model = VqaModel::new(config).unwrap();
    assert_eq!(model.feature_dim(), 128);
}

#[test]
fn mevf_layout_and_zero_propagation() {
    let model = VqaModel::new(VqaConfig {
        image_size: 16,
        question_vocab: 10,
        answers: 3,
        hidden_dim: 8,
        attention_dim: 8,
        ..VqaConfig::default()
    })
    .unwrap();
    let glove = WordEmbeddings::synthetic(&vocab10(), 300);
    let params = model
        .init(
            &glove,
            &InitMode::Scratch,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
    let (f_v1, f_v2, f_v) = model.mevf_extract(&params, &image(3, 16)).unwrap();
    assert_eq!(f_v.shape(), &[1, 128]);
    assert_eq!(&f_v.values()[..64], f_v1.values());
    assert_eq!(&f_v.values()[64..], f_v2.values());
    let (_, _, zero) = model
        .mevf_extract(&zero_biases(&params), &Tensor::zeros(&[1, 1, 16, 16]))
        .unwrap();
    assert!(zero.values().iter().all(|&v| v == 0.0));
    assert!(model.mevf_extract(&params, &image(3, 12)).is_err());
}

fn attention_params(d: usize, h: usize, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    for (name, shape) in [
        ("att.w_v", [d, d]),
        ("att.w_q", [h, d]),
        ("att.score", [d, 1]),
        ("att.w_u", [h, d]),
    ] {
        p.insert(
            name,
            crate::nn::fan_in_uniform(&shape, shape[0], 1.0, &mut rng).unwrap(),
        );
    }
    p
}

#[test]
fn attention_examples() {
    let p = attention_params(4, 3, 0);
    let f_q = Tensor::new(vec![0.2, -0.4, 0.9, 0.1, 0.0, -0.3], &[2, 3]).unwrap();
    let v = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0], &[2, 4]).unwrap();
    let (f_a, weights) = san_attend(std::slice::from_ref(&v), &f_q, &p).unwrap();
    assert_eq!(weights.values(), &[1.0, 1.0]);
    let expected = v
        .add(&f_q.matmul(p.get("att.w_u").unwrap()).unwrap())
        .unwrap();
    for (a, b) in f_a.values().iter().zip(expected.values()) {
        assert!((a - b).abs() < 1e-12);
    }
    let (_, weights) = san_attend(&[v.clone(), v.clone()], &f_q, &p).unwrap();
    assert!(weights.values().iter().all(|&w| (w - 0.5).abs() < 1e-15));
    assert!(san_attend(&[], &f_q, &p).is_err());
}

#[test]
fn forward_shapes_and_finiteness() {
    let config = VqaConfig {
        answers: 458,
        ..tiny_config(458)
    };
    let model = VqaModel::new(config).unwrap();
    let glove = WordEmbeddings::synthetic(&vocab10(), 3);
    let params = model
        .init(
            &glove,
            &InitMode::Scratch,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
    let images = stack(&[image(0, 8), image(1, 8)]);
    let tokens = vec![
        vocab10().tokenize_and_pad("is there a mass"),
        vocab10().tokenize_and_pad("the left lung"),
    ];
    let out = model.forward(&params, &images, &tokens).unwrap();
    assert_eq!(out.logits.shape(), &[2, 458]);
    assert_eq!(out.reconstruction.shape(), images.shape());
    assert_eq!(out.attention.shape(), &[2, 2]);
    for t in [
        &out.f_q,
        &out.f_v,
        &out.f_a,
        &out.logits,
        &out.reconstruction,
    ] {
        assert!(t.values().iter().all(|v| v.is_finite()));
    }
    for row in out.attention.values().chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(
        model
            .predict_logits(&params, &images, &tokens)
            .unwrap()
            .values(),
        out.logits.values()
    );
}

#[test]
fn single_region_mode() {
    let model = VqaModel::new(VqaConfig {
        single_region: true,
        ..tiny_config(4)
    })
    .unwrap();
    let glove = WordEmbeddings::synthetic(&vocab10(), 3);
    let params = model
        .init(
            &glove,
            &InitMode::Scratch,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
    assert_eq!(params.get("att.region0.weight").unwrap().shape(), &[66, 6]);
    let out = model
        .forward(&params, &image(0, 8), &[vocab10().tokenize_and_pad("mass")])
        .unwrap();
    assert_eq!(out.attention.values(), &[1.0]);
}

fn forward_one(model: &VqaModel, params: &Params) -> VqaForwardOutput {
    model
        .forward(
            params,
            &image(4, 8),
            &[vocab10().tokenize_and_pad("is there a mass")],
        )
        .unwrap()
}

#[test]
fn multitask_loss_terms() {
    let (model, params) = tiny(5, 3);
    let out = forward_one(&model, &params);
    let x = image(4, 8);
    let ce = cross_entropy_loss(&out.logits, &[2])
        .unwrap()
        .item()
        .unwrap();
    let rec = mse_loss(&out.reconstruction, &x).unwrap().item().unwrap();
    let vqa_only = multitask_loss(
        &out,
        &[2],
        &x,
        LossWeights {
            alpha1: 1.0,
            alpha2: 0.0,
        },
    )
    .unwrap();
    assert_eq!(vqa_only.item().unwrap(), ce);
    let both = multitask_loss(&out, &[2], &x, LossWeights::default())
        .unwrap()
        .item()
        .unwrap();
    assert_eq!(both, ce + rec);
    assert!(multitask_loss(&out, &[5], &x, LossWeights::default()).is_err());
    assert!(multitask_loss(
        &out,
        &[0],
        &x,
        LossWeights {
            alpha1: 0.0,
            alpha2: 0.0
        }
    )
    .is_err());
}

#[test]
fn end_to_end_gradient_check() {
    let (model, params) = tiny(5, 4);
    let images = stack(&[image(1, 8), image(2, 8)]);
    let tokens = vec![
        vocab10().tokenize_and_pad("is there a mass"),
        vocab10().tokenize_and_pad("in the left lung"),
    ];
    // Keep ReLU inputs away from zero so central differences are smooth.
    let params = Params::from_entries(params.iter().map(|(n, t)| {
        let t = if n.ends_with("bias") && (n.starts_with("maml") || n.starts_with("cdae")) {
            Tensor::full(t.shape(), 0.05)
        } else {
            t.clone()
        };
        (n.to_owned(), t)
    }));
    let trainable = model.trainable(&params);
    let fixed = params.detached();
    let err = numeric_grad_check(
        |p| {
            let mut full = fixed.clone();
            full.overwrite_from(p)?;
            let out = model.forward(&full, &images, &tokens)?;
            multitask_loss(&out, &[1, 3], &images, LossWeights::default())
        },
        &trainable,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn permuting_answers_permutes_logits() {
    let (model, params) = tiny(4, 5);
    let perm = [2usize, 0, 3, 1];
    let w = params.get("cls.weight").unwrap();
    let b = params.get("cls.bias").unwrap();
    let mut wp = vec![0.0; w.numel()];
    let mut bp = vec![0.0; 4];
    for row in 0..6 {
        for (old, &new) in perm.iter().enumerate() {
            wp[row * 4 + new] = w.values()[row * 4 + old];
        }
    }
    for (old, &new) in perm.iter().enumerate() {
        bp[new] = b.values()[old];
    }
    let mut permuted = params.clone();
    permuted.insert("cls.weight", Tensor::new(wp, &[6, 4]).unwrap());
    permuted.insert("cls.bias", Tensor::new(bp, &[4]).unwrap());
    let a = forward_one(&model, &params).logits;
    let p = forward_one(&model, &permuted).logits;
    for (old, &new) in perm.iter().enumerate() {
        assert_eq!(a.values()[old], p.values()[new]);
    }
}

#[test]
fn ablated_branch_has_no_influence() {
    let (model, params) = tiny(4, 6);
    let mut ablated = params.clone();
    ablated.insert("att.region1.weight", Tensor::zeros(&[64, 6]));
    let mut perturbed = ablated.clone();
    let w = ablated.get("cdae.enc0.weight").unwrap();
    perturbed.insert(
        "cdae.enc0.weight",
        w.with_values(w.values().iter().map(|v| v * 1.7 + 0.1).collect())
            .unwrap(),
    );
    let a = forward_one(&model, &ablated);
    let b = forward_one(&model, &perturbed);
    assert_ne!(a.f_v2.values(), b.f_v2.values());
    assert_eq!(a.logits.values(), b.logits.values());
}

fn sample(id: &str, image: &str, question: &str, answer: &str, t: AnswerType) -> VqaSample {
    VqaSample {
        question_id: id.into(),
        image_id: image.into(),
        question: question.into(),
        answer: answer.into(),
        answer_type: t,
        category: Category::Other,
    }
}

fn answers(list: &[&str]) -> AnswerVocab {
    AnswerVocab::from(list.iter().map(|s| s.to_string()).collect::<Vec<_>>())
}

#[test]
fn evaluation_ratios_and_missing_subsets() {
    let vocab = answers(&["yes", "no"]);
    let samples: Vec<VqaSample> = ["yes", "no", "yes", "yes"]
        .iter()
        .enumerate()
        .map(|(i, a)| sample(&i.to_string(), "x", "q", a, AnswerType::Closed))
        .collect();
    // Predictions: yes, no, yes, no → 3 of 4 right.
    let logits = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0, 3.0], &[4, 2]).unwrap();
    let report = evaluate_logits(&samples, &logits, &vocab).unwrap();
    assert_eq!(report.overall, 75.0);
    assert_eq!(report.close_ended, Some(75.0));
    assert_eq!(report.open_ended, None);
    let json = serde_json::to_value(&report).unwrap();
    assert!(json["open_ended"].is_null());
    assert_eq!(json["records"][0]["type"], "CLOSED");
    assert_eq!(json["n_questions"], 4);
    assert_eq!(evaluate_logits(&samples, &logits, &vocab).unwrap(), report);
}

#[test]
fn ties_and_unknown_answers() {
    let vocab = answers(&["yes", "no"]);
    let samples = vec![
        sample("a", "x", "q", "Yes", AnswerType::Closed),
        sample("b", "x", "q", "maybe", AnswerType::Open),
    ];
    let logits = Tensor::new(vec![0.5, 0.5, 0.0, 1.0], &[2, 2]).unwrap();
    let report = evaluate_logits(&samples, &logits, &vocab).unwrap();
    assert_eq!(report.records[0].predicted, "yes");
    assert!(report.records[0].correct);
    assert!(report.records[1].unknown_truth && !report.records[1].correct);
    assert_eq!(report.open_ended, Some(0.0));
    assert!(evaluate_logits(&[], &Tensor::zeros(&[1, 2]), &vocab).is_err());
}

fn tiny_set(model: &VqaModel) -> (EncodedSet, AnswerVocab) {
    let mut images = BTreeMap::new();
    for i in 0..3 {
        images.insert(
            format!("img{i}"),
            GrayImage::new(8, 8, image(i, 8).to_vec()).unwrap(),
        );
    }
    let samples: Vec<VqaSample> = (0..6)
        .map(|i| {
            let (q, a) = if i % 2 == 0 {
                ("is there a mass", "yes")
            } else {
                ("in the left lung", "no")
            };
            sample(
                &format!("q{i}"),
                &format!("img{}", i % 3),
                q,
                a,
                AnswerType::Closed,
            )
        })
        .collect();
    let (vocab, _) = AnswerVocab::build(&samples).unwrap();
    assert_eq!(vocab.len(), model.config.answers);
    (
        EncodedSet::new(&samples, &images, &vocab10(), &vocab).unwrap(),
        vocab,
    )
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let (model, params) = tiny(2, 7);
    let (set, vocab) = tiny_set(&model);
    let cfg = VqaTrainConfig {
        epochs: 0,
        ..VqaTrainConfig::default()
    };
    let out = vqa_train(&model, &params, &vocab, &set, None, &cfg, |_| Ok(())).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.params.flat_values(), params.flat_values());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (model, params) = tiny(2, 8);
    let (set, vocab) = tiny_set(&model);
    let cfg = VqaTrainConfig {
        epochs: 15,
        batch_size: 3,
        optimizer: crate::nn::OptimizerConfig::adam(0.01),
        ..VqaTrainConfig::default()
    };
    let a = vqa_train(&model, &params, &vocab, &set, Some(&set), &cfg, |_| Ok(())).unwrap();
    let b = vqa_train(&model, &params, &vocab, &set, Some(&set), &cfg, |_| Ok(())).unwrap();
    assert_eq!(a.log, b.log);
    assert!(a.log.last().unwrap().loss < a.log[0].loss);
    assert_eq!(
        a.params.get(GLOVE).unwrap().values(),
        params.get(GLOVE).unwrap().values()
    );
    let report = vqa_evaluate(&model, &a.params, &set, &vocab).unwrap();
    assert_eq!(report.overall, 100.0);
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let (model, params) = tiny(3, 9);
    let (set, vocab) = tiny_set(&VqaModel::new(tiny_config(2)).unwrap());
    assert!(vqa_train(
        &model,
        &params,
        &vocab,
        &set,
        None,
        &VqaTrainConfig::default(),
        |_| Ok(())
    )
    .is_err());
    assert!(vqa_evaluate(&model, &params, &set, &vocab).is_err());
}

#[test]
fn finetune_copies_pretrained_branches() {
    let model = VqaModel::new(tiny_config(3)).unwrap();
    let glove = WordEmbeddings::synthetic(&vocab10(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let maml = model.learner.init(&mut rng).unwrap();
    let cdae = model.cdae.init(&mut rng).unwrap();
    let mode = InitMode::Finetune {
        maml: maml.clone(),
        cdae: cdae.clone(),
    };
    let params = model
        .init(&glove, &mode, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(
        params.get("maml.conv2.weight").unwrap().values(),
        maml.get("maml.conv2.weight").unwrap().values()
    );
    assert_eq!(
        params.get("cdae.dec0.weight").unwrap().values(),
        cdae.get("cdae.dec0.weight").unwrap().values()
    );
    let bad = InitMode::Finetune {
        maml: Params::new(),
        cdae,
    };
    assert!(model.init(&glove, &bad, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn multitask_loss_is_homogeneous(c in 0.0f64..5.0, a1 in 0.1f64..2.0, a2 in 0.1f64..2.0) {
        let (model, params) = tiny(5, 11);
        let out = forward_one(&model, &params);
        let x = image(4, 8);
        let base = multitask_loss(&out, &[1], &x, LossWeights { alpha1: a1, alpha2: a2 }).unwrap().item().unwrap();
        if c > 0.0 {
            let scaled = multitask_loss(&out, &[1], &x, LossWeights { alpha1: c * a1, alpha2: c * a2 }).unwrap().item().unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
        }
    }

    #[test]
    fn attention_weights_sum_to_one(seed in 0u64..500, regions in 1usize..5) {
        let p = attention_params(3, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<Tensor> = (0..regions).map(|_| crate::nn::fan_in_uniform(&[2, 3], 1, 1.0, &mut rng).unwrap().detach()).collect();
        let f_q = crate::nn::fan_in_uniform(&[2, 2], 1, 1.0, &mut rng).unwrap();
        let (_, w) = san_attend(&vs, &f_q, &p).unwrap();
        for row in w.values().chunks(regions) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
