use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{numeric_grad_check, Params, Tensor};

fn t(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(values.to_vec(), shape).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn conv2d_examples() {
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let one = ConvSpec::square(1, 1, 1, 1, 0);
    let y = conv2d(&x, &one, &t(&[2.0], &[1, 1, 1, 1]), None).unwrap();
    assert_eq!(y.values(), &[2.0, 4.0, 6.0, 8.0]);

    let two = ConvSpec::square(1, 1, 2, 1, 0);
    let y = conv2d(&x, &two, &Tensor::ones(&[1, 1, 2, 2]), None).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.values(), &[10.0]);
}

#[test]
fn conv_chain_shapes_from_84() {
    let mut x = Tensor::zeros(&[1, 1, 84, 84]);
    let mut sizes = Vec::new();
    let mut c = 1;
    for _ in 0..4 {
        let spec = ConvSpec::square(c, 4, 3, 2, 1);
        x = conv2d(&x, &spec, &Tensor::zeros(&spec.weight_shape()), None).unwrap();
        sizes.push(x.shape()[2]);
        c = 4;
    }
    assert_eq!(sizes, vec![42, 21, 11, 6]);
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let spec = ConvSpec::square(1, 1, 3, 1, 0);
    assert!(conv2d(&x, &spec, &Tensor::zeros(&spec.weight_shape()), None).is_err());
    let big = ConvSpec::square(2, 1, 7, 1, 0);
    assert!(conv2d(&x, &big, &Tensor::zeros(&big.weight_shape()), None).is_err());
}

#[test]
fn conv2d_transposed_examples() {
    let spec = ConvSpec::square(1, 1, 2, 1, 0);
    let y = conv2d_transposed(
        &t(&[5.0], &[1, 1, 1, 1]),
        &spec,
        &Tensor::ones(&[1, 1, 2, 2]),
        None,
    )
    .unwrap();
    assert_eq!(y.values(), &[5.0, 5.0, 5.0, 5.0]);

    let x = t(&[1.0, -2.0, 3.0, 0.5], &[1, 1, 2, 2]);
    let y = conv2d_transposed(&x, &spec, &Tensor::zeros(&[1, 1, 2, 2]), None).unwrap();
    assert!(y.values().iter().all(|&v| v == 0.0));

    let spec = ConvSpec::square(1, 1, 3, 2, 1);
    let y = conv2d_transposed(
        &Tensor::zeros(&[1, 1, 6, 6]),
        &spec,
        &Tensor::zeros(&[1, 1, 3, 3]),
        None,
    )
    .unwrap();
    assert_eq!(y.shape(), &[1, 1, 11, 11]);
}

#[test]
fn transposed_conv_restores_spatial_shape() {
    for (size, k, s, p) in [(11, 3, 2, 1), (12, 2, 2, 0), (9, 3, 1, 1), (16, 4, 2, 1)] {
        let spec = ConvSpec::square(2, 3, k, s, p);
        let x = Tensor::zeros(&[1, 2, size, size]);
        let y = conv2d(&x, &spec, &Tensor::zeros(&spec.weight_shape()), None).unwrap();
        let back_spec = ConvSpec::square(3, 2, k, s, p);
        let z = conv2d_transposed(
            &y,
            &back_spec,
            &Tensor::zeros(&back_spec.transposed_weight_shape()),
            None,
        )
        .unwrap();
        // Floor division can lose one row when the stride does not divide evenly.
        let lost = (size + 2 * p - k) % s;
        assert_eq!(z.shape()[2] + lost, size, "size {size} k {k} s {s} p {p}");
    }
}

#[test]
fn pooling_examples() {
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    assert_eq!(pool2d(&x, PoolKind::Max, 2, 2).unwrap().values(), &[4.0]);
    assert_eq!(pool2d(&x, PoolKind::Mean, 2, 2).unwrap().values(), &[2.5]);
    assert!(pool2d(&x, PoolKind::Max, 3, 1).is_err());

    let x = Tensor::ones(&[1, 64, 6, 6]);
    let full = pool2d(&x, PoolKind::Mean, 6, 6).unwrap();
    assert_eq!(full.shape(), &[1, 64, 1, 1]);
    let g = global_mean_pool(&x).unwrap();
    assert_eq!(g.shape(), &[1, 64]);
    assert!(g.values().iter().all(|&v| v == 1.0));

    // floor semantics: 5x5 with window 2 stride 2 -> 2x2
    assert_eq!(
        pool2d(&Tensor::zeros(&[1, 1, 5, 5]), PoolKind::Max, 2, 2)
            .unwrap()
            .shape(),
        &[1, 1, 2, 2]
    );
}

#[test]
fn linear_examples() {
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    assert_eq!(
        linear(&x, &eye, &Tensor::zeros(&[2])).unwrap().values(),
        x.values()
    );

    let y = linear(
        &t(&[1.0, 2.0], &[1, 2]),
        &t(&[1.0, 1.0], &[2, 1]),
        &t(&[0.0], &[1]),
    )
    .unwrap();
    assert_eq!(y.values(), &[3.0]);

    let y = linear(&x, &Tensor::zeros(&[2, 3]), &t(&[1.0, -1.0, 0.5], &[3])).unwrap();
    assert_eq!(y.values(), &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);
    assert!(linear(&x, &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[1])).is_err());
}

#[test]
fn activation_examples() {
    let x = t(&[-1.0, 0.0, 2.0], &[3]);
    assert_eq!(
        activation(&x, Activation::Relu).unwrap().values(),
        &[0.0, 0.0, 2.0]
    );
    assert_eq!(
        activation(&Tensor::scalar(0.0), Activation::Tanh)
            .unwrap()
            .item()
            .unwrap(),
        0.0
    );
    assert_eq!(
        activation(&Tensor::scalar(0.0), Activation::Sigmoid)
            .unwrap()
            .item()
            .unwrap(),
        0.5
    );
}

fn lstm_with(d: usize, h: usize, fill: impl Fn(&str) -> f64) -> LstmParams {
    let mut p = Params::new();
    for gate in ["input", "forget", "output", "cell"] {
        p.insert(
            format!("l.w_{gate}"),
            Tensor::full(&[h, d + h], fill(&format!("w_{gate}"))),
        );
        p.insert(
            format!("l.b_{gate}"),
            Tensor::full(&[h], fill(&format!("b_{gate}"))),
        );
    }
    LstmParams::from_params(&p, "l").unwrap()
}

#[test]
fn lstm_zero_params_give_zero_state() {
    let lstm = lstm_with(3, 4, |_| 0.0);
    let (h0, c0) = lstm.zero_state(2);
    let x = t(&[0.3, -2.0, 1.0, 4.0, 0.1, 0.2], &[2, 3]);
    let (h, c) = lstm_step(&x, (&h0, &c0), &lstm).unwrap();
    assert!(h.values().iter().chain(c.values()).all(|&v| v == 0.0));
}

#[test]
fn lstm_saturated_gates_keep_cell() {
    let lstm = lstm_with(2, 3, |name| match name {
        "b_forget" => 60.0,
        "b_input" => -60.0,
        _ => 0.1,
    });
    let h = t(&[0.1, 0.2, 0.3], &[1, 3]);
    let c = t(&[0.5, -1.5, 2.0], &[1, 3]);
    let (_, c_next) = lstm_step(&t(&[1.0, -1.0], &[1, 2]), (&h, &c), &lstm).unwrap();
    assert_close(c_next.values(), c.values(), 1e-12);
}

#[test]
fn lstm_rejects_dimension_mismatch() {
    let lstm = lstm_with(2, 3, |_| 0.0);
    let (h, c) = lstm.zero_state(1);
    assert!(lstm_step(&Tensor::zeros(&[1, 5]), (&h, &c), &lstm).is_err());
}

#[test]
fn cross_entropy_examples() {
    let loss = cross_entropy_loss(&Tensor::zeros(&[1, 458]), &[17])
        .unwrap()
        .item()
        .unwrap();
    assert!((loss - 458f64.ln()).abs() < 1e-12);
    assert!((loss - 6.127).abs() < 1e-3);

    let loss = cross_entropy_loss(&t(&[0.0, 0.0], &[1, 2]), &[1])
        .unwrap()
        .item()
        .unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-12);

    let loss = cross_entropy_loss(&t(&[-40.0, 40.0, -40.0], &[1, 3]), &[1])
        .unwrap()
        .item()
        .unwrap();
    assert!(loss < 1e-30);

    assert!(cross_entropy_loss(&Tensor::zeros(&[1, 3]), &[3]).is_err());
}

#[test]
fn mse_examples() {
    let x = t(&[0.2, 0.4], &[2]);
    assert_eq!(mse_loss(&x, &x).unwrap().item().unwrap(), 0.0);
    assert_eq!(
        mse_loss(&t(&[1.0, 1.0], &[2]), &t(&[0.0, 0.0], &[2]))
            .unwrap()
            .item()
            .unwrap(),
        1.0
    );
    assert_eq!(
        mse_loss(&t(&[0.0], &[1]), &t(&[2.0], &[1]))
            .unwrap()
            .item()
            .unwrap(),
        4.0
    );
    assert_eq!(
        squared_error(&t(&[1.0, 1.0], &[2]), &t(&[0.0, 0.0], &[2]), Reduction::Sum)
            .unwrap()
            .item()
            .unwrap(),
        2.0
    );
    assert!(mse_loss(&x, &Tensor::zeros(&[3])).is_err());
}

#[test]
fn concat_and_slice_are_inverse() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[5.0, 6.0], &[2, 1]);
    let c = concat_cols(&[&a, &b]).unwrap();
    assert_eq!(c.values(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    assert_eq!(slice_cols(&c, 0, 2).unwrap().values(), a.values());
    assert_eq!(slice_cols(&c, 2, 1).unwrap().values(), b.values());
}

fn random_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // keep magnitudes away from zero so ReLU / max kinks are not straddled
    let values = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::param(values, shape).unwrap()
}

/// Every layer op and both losses, checked against central differences with
/// respect to inputs and parameters.
fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = 1e-6;
    let mut run = |name: &'static str, p: Params, f: &dyn Fn(&Params) -> crate::Result<Tensor>| {
        out.push((name, numeric_grad_check(f, &p, eps).unwrap()));
    };
    fn ps(rng: &mut ChaCha8Rng, entries: &[(&str, &[usize])]) -> Params {
        Params::from_entries(
            entries
                .iter()
                .map(|(n, s)| (n.to_string(), random_param(rng, s))),
        )
    }

    let spec = ConvSpec::square(2, 3, 3, 2, 1);
    run(
        "conv2d",
        ps(
            &mut rng,
            &[
                ("x", &[2, 2, 5, 5]),
                ("w", &spec.weight_shape()),
                ("b", &[3]),
            ],
        ),
        &|p| {
            conv2d(p.get("x")?, &spec, p.get("w")?, Some(p.get("b")?))?
                .tanh()?
                .sum()
        },
    );
    let tspec = ConvSpec::square(3, 2, 3, 2, 1);
    run(
        "conv2d_transposed",
        ps(
            &mut rng,
            &[
                ("x", &[1, 3, 3, 3]),
                ("w", &tspec.transposed_weight_shape()),
                ("b", &[2]),
            ],
        ),
        &|p| {
            conv2d_transposed(p.get("x")?, &tspec, p.get("w")?, Some(p.get("b")?))?
                .square()?
                .mean()
        },
    );
    run("max_pool", ps(&mut rng, &[("x", &[1, 2, 4, 4])]), &|p| {
        pool2d(p.get("x")?, PoolKind::Max, 2, 2)?.square()?.sum()
    });
    run("mean_pool", ps(&mut rng, &[("x", &[1, 2, 5, 5])]), &|p| {
        pool2d(p.get("x")?, PoolKind::Mean, 2, 2)?.square()?.sum()
    });
    run(
        "global_mean_pool",
        ps(&mut rng, &[("x", &[2, 3, 3, 3])]),
        &|p| global_mean_pool(p.get("x")?)?.tanh()?.sum(),
    );
    run(
        "linear",
        ps(&mut rng, &[("x", &[3, 4]), ("w", &[4, 2]), ("b", &[2])]),
        &|p| {
            linear(p.get("x")?, p.get("w")?, p.get("b")?)?
                .sigmoid()?
                .sum()
        },
    );
    run("relu", ps(&mut rng, &[("x", &[6])]), &|p| {
        activation(p.get("x")?, Activation::Relu)?.square()?.sum()
    });
    run("tanh", ps(&mut rng, &[("x", &[6])]), &|p| {
        activation(p.get("x")?, Activation::Tanh)?.sum()
    });
    run("sigmoid", ps(&mut rng, &[("x", &[6])]), &|p| {
        activation(p.get("x")?, Activation::Sigmoid)?.sum()
    });
    run(
        "lstm_step",
        {
            let mut p = ps(&mut rng, &[("x", &[2, 3]), ("h", &[2, 2]), ("c", &[2, 2])]);
            for gate in ["input", "forget", "output", "cell"] {
                p.insert(format!("l.w_{gate}"), random_param(&mut rng, &[2, 5]));
                p.insert(format!("l.b_{gate}"), random_param(&mut rng, &[2]));
            }
            p
        },
        &|p| {
            let lstm = LstmParams::from_params(p, "l")?;
            let (h, c) = lstm_step(p.get("x")?, (p.get("h")?, p.get("c")?), &lstm)?;
            h.sum()?.add(&c.square()?.sum()?)
        },
    );
    let targets = [2usize, 0, 1];
    run(
        "cross_entropy_loss",
        ps(&mut rng, &[("z", &[3, 4])]),
        &|p| cross_entropy_loss(p.get("z")?, &targets),
    );
    run(
        "mse_loss",
        ps(&mut rng, &[("y", &[2, 3]), ("x", &[2, 3])]),
        &|p| mse_loss(p.get("y")?, p.get("x")?),
    );
    run(
        "concat_slice",
        ps(&mut rng, &[("a", &[2, 2]), ("b", &[2, 3])]),
        &|p| {
            let c = concat_cols(&[p.get("a")?, p.get("b")?])?;
            slice_cols(&c, 1, 3)?.tanh()?.sum()
        },
    );
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn every_op_passes_gradient_check(seed in any::<u64>()) {
        for (name, err) in gradient_suite(seed) {
            prop_assert!(err < 1e-4, "{} relative error {}", name, err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let s = softmax(&Tensor::new(values, &[3, 4]).unwrap()).unwrap();
        for row in s.values().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn sgd_and_adam_step_downhill() {
    let p = Params::from_entries([(
        "w".to_string(),
        Tensor::param(vec![1.0, -2.0], &[2]).unwrap(),
    )]);
    let g = Params::from_entries([("w".to_string(), Tensor::new(vec![0.5, -1.0], &[2]).unwrap())]);
    let mut sgd = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
    assert_close(
        sgd.step(&p, &g).unwrap().get("w").unwrap().values(),
        &[0.95, -1.9],
        1e-15,
    );
    let mut adam = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
    // first Adam step moves each coordinate by ~lr against the gradient sign
    assert_close(
        adam.step(&p, &g).unwrap().get("w").unwrap().values(),
        &[0.99, -1.99],
        1e-6,
    );
    assert!(Optimizer::new(OptimizerConfig::sgd(0.0)).is_err());
}
