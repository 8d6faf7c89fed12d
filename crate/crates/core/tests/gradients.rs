//! Reverse-mode gradients against central finite differences.

mod common;

use common::{max_rel_err, numeric_gradients};
use cupid_core::autodiff::{ops, Tape, Tensor, Var};
use cupid_core::nn::{Activation, Head, Mlp, MlpSpec};
use cupid_core::rng::SplitMix64;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build = fn(&mut Tape, &[Var]) -> Var;

/// `sum(w * f(inputs))` and its gradient with respect to every input.
fn analytic(inputs: &[Tensor], weights: &[f64], build: Build) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let len = tape.value(out).len();
    let w = tape.constant(Tensor::new(shape, weights[..len].to_vec()).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    (tape.value(loss).item(), vars.iter().map(|&v| grads.get(v)).collect())
}

fn check(name: &str, inputs: Vec<Tensor>, weights: &[f64], build: Build) -> Result<(), TestCaseError> {
    let (_, grads) = analytic(&inputs, weights, build);
    let numeric = numeric_gradients(&inputs, H, |p| analytic(p, weights, build).0);
    let err = max_rel_err(&grads, &numeric);
    prop_assert!(err < TOL, "{name}: max relative error {err:e}");
    Ok(())
}

/// Moves entries off the non-differentiable point at zero.
fn off_kink(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x.abs() < 0.05 { x + 0.1 } else { x }).collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn primitive_gradients_match_finite_differences(
        a in prop::collection::vec(-3.0..3.0f64, 6),
        b in prop::collection::vec(-3.0..3.0f64, 6),
        w in prop::collection::vec(-2.0..2.0f64, 6),
        slope in 0.01..0.5f64,
    ) {
        let a23 = || t(&[2, 3], a.clone());
        let b23 = || t(&[2, 3], b.clone());
        let b32 = || t(&[3, 2], b.clone());
        let kinked = || t(&[2, 3], off_kink(&a));

        check("matmul", vec![a23(), b32()], &w, |tp, v| tp.matmul(v[0], v[1]).unwrap())?;
        check("add", vec![a23(), b23()], &w, |tp, v| tp.add(v[0], v[1]).unwrap())?;
        check("sub", vec![a23(), b23()], &w, |tp, v| tp.sub(v[0], v[1]).unwrap())?;
        check("mul", vec![a23(), b23()], &w, |tp, v| tp.mul(v[0], v[1]).unwrap())?;
        check("scale", vec![a23()], &w, |tp, v| tp.scale(v[0], -1.7).unwrap())?;
        check("sigmoid", vec![a23()], &w, |tp, v| tp.sigmoid(v[0]).unwrap())?;
        check("relu", vec![kinked()], &w, |tp, v| tp.relu(v[0]).unwrap())?;
        check("leaky_relu", vec![kinked()], &w, |tp, v| tp.leaky_relu(v[0], 0.01).unwrap())?;
        check("prelu", vec![kinked(), Tensor::scalar(slope)], &w, |tp, v| tp.prelu(v[0], v[1]).unwrap())?;
        check("exp", vec![a23()], &w, |tp, v| tp.exp(v[0]).unwrap())?;
        check("log", vec![a23().map(|x| x.abs() + 0.5)], &w, |tp, v| tp.log(v[0]).unwrap())?;
        check("softmax", vec![a23()], &w, |tp, v| tp.softmax(v[0]).unwrap())?;
        check("log_softmax", vec![a23()], &w, |tp, v| tp.log_softmax(v[0]).unwrap())?;
        check("l1_norm", vec![kinked()], &w, |tp, v| tp.l1_norm(v[0]).unwrap())?;
        check("squared_l2", vec![a23()], &w, |tp, v| tp.squared_l2(v[0]).unwrap())?;
        check("sum", vec![a23()], &w, |tp, v| tp.sum(v[0]).unwrap())?;
        check("mean", vec![a23()], &w, |tp, v| tp.mean(v[0]).unwrap())?;
        check(
            "affine",
            vec![a23(), b32(), t(&[1, 2], w[..2].to_vec())],
            &w,
            |tp, v| tp.affine(v[0], v[1], v[2]).unwrap(),
        )?;
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        a in prop::collection::vec(-30.0..30.0f64, 12),
        shift in -100.0..100.0f64,
    ) {
        let x = t(&[3, 4], a);
        let p = ops::softmax(&x);
        for r in 0..3 {
            let total: f64 = p.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let shifted = ops::softmax(&x.map(|v| v + shift));
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }
}

/// Sum of squared outputs of a 3-layer MLP.
fn mlp_loss(net: &Mlp, x: &Tensor) -> f64 {
    net.logits(x).unwrap().data().iter().map(|v| v * v).sum()
}

#[test]
fn mlp_parameter_gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(7);
    for (case, act) in [Activation::Sigmoid, Activation::LeakyRelu, Activation::Relu].into_iter().cycle().take(12).enumerate() {
        let spec = MlpSpec::new(vec![3, 5, 4, 2], act, Head::Regression);
        let mut net = Mlp::build(spec, case as u64).unwrap();
        // zero biases put pre-activations behind dead units exactly on the ReLU kink
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.1, 0.1));
        }
        let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let vars: Vec<Var> = net.params().iter().map(|p| tape.param(p.clone())).collect();
        let input = tape.constant(x.clone());
        let out = net.record_layers(&mut tape, &vars, input, 0..3, None).unwrap();
        let loss = tape.squared_l2(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

        let params = net.params().to_vec();
        let numeric = numeric_gradients(&params, H, |p| {
            net.params_mut().clone_from_slice(p);
            mlp_loss(&net, &x)
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "case {case} ({act:?}): max relative error {err:e}");
    }
}
