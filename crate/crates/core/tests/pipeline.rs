//! End-to-end behaviour of training and the experiment harness.

use cupid_core::autodiff::Tensor;
use cupid_core::data::{classification_tensors, gen_blobs, gen_toy1, regression_tensors, BlobConfig};
use cupid_core::harness::{self, io, ExperimentConfig, ScoreType, Task};
use cupid_core::nn::{Activation, Head, Mlp, MlpSpec, Targets, TrainHyper};

fn accuracy(net: &Mlp, x: &Tensor, targets: &Targets) -> f64 {
    let Targets::Classes(classes) = targets else { unreachable!() };
    let probs = net.forward(x).unwrap();
    let hits = classes
        .iter()
        .enumerate()
        .filter(|&(i, &c)| {
            let row = probs.row(i);
            row.iter().all(|&p| p <= row[c])
        })
        .count();
    hits as f64 / classes.len() as f64
}

fn classifier(dim: usize, classes: usize, x: &Tensor, y: &Targets) -> Mlp {
    let spec = MlpSpec::new(vec![dim, 16, classes], Activation::Sigmoid, Head::SoftmaxClassification);
    let mut net = Mlp::build(spec, 5).unwrap();
    let hyper = TrainHyper { epochs: 50, batch_size: 16, lr: 0.01 };
    net.train(x, y, &hyper, 5).unwrap();
    net
}

#[test]
fn toy1_base_model_beats_the_mean_predictor() {
    let mut cfg = ExperimentConfig::preset(Task::Toy1);
    cfg.data.n_per_region = 300;
    let data = harness::prepare_data(&cfg, 0).unwrap();
    let (net, _) = harness::train_base(&cfg, &data, 0).unwrap();
    let Targets::Regression(y) = &data.train_targets else { unreachable!() };
    let pred = net.forward(&data.train_x).unwrap();
    let n = y.len() as f64;
    let mean = y.data().iter().sum::<f64>() / n;
    let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mse = y.data().iter().zip(pred.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    assert!(mse < var, "mse {mse} vs variance {var}");
}

#[test]
fn separable_blobs_are_learned() {
    let cfg = BlobConfig { classes: 2, n_per_class: 200, dim: 2, spread: 0.1 };
    let samples = gen_blobs(&cfg, 3).unwrap();

    // brute-force search over directions and thresholds for a perfect linear separator
    let separable = (0..720).any(|i| {
        let a = i as f64 * std::f64::consts::PI / 360.0;
        let proj: Vec<(f64, usize)> =
            samples.iter().map(|s| (s.features[0] * a.cos() + s.features[1] * a.sin(), s.class)).collect();
        let max0 = proj.iter().filter(|p| p.1 == 0).map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min1 = proj.iter().filter(|p| p.1 == 1).map(|p| p.0).fold(f64::INFINITY, f64::min);
        max0 < min1
    });
    assert!(separable);

    let (x, y) = classification_tensors(&samples).unwrap();
    let net = classifier(2, 2, &x, &y);
    let acc = accuracy(&net, &x, &y);
    assert!(acc > 0.95, "training accuracy {acc}");
}

#[test]
fn vanishing_spread_is_classified_almost_perfectly() {
    let cfg = BlobConfig { classes: 4, n_per_class: 150, dim: 4, spread: 0.01 };
    let (x, y) = classification_tensors(&gen_blobs(&cfg, 8).unwrap()).unwrap();
    let net = classifier(4, 4, &x, &y);
    let test = gen_blobs(&cfg, 9).unwrap();
    let (tx, ty) = classification_tensors(&test).unwrap();
    let acc = accuracy(&net, &tx, &ty);
    assert!(acc > 0.99, "accuracy {acc}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let samples = gen_toy1(30, 2).unwrap();
    let (x, y) = regression_tensors(&samples);
    let spec = MlpSpec::new(vec![1, 8, 1], Activation::Sigmoid, Head::Regression);
    let hyper = TrainHyper { epochs: 3, batch_size: 16, lr: 0.001 };
    let run = || {
        let mut net = Mlp::build(spec.clone(), 1).unwrap();
        let curve = net.train(&x, &y, &hyper, 1).unwrap();
        (net, curve)
    };
    assert_eq!(run(), run());
}

fn tiny(task: Task) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(task);
    cfg.base.epochs = 3;
    cfg.cupid.epochs = 3;
    cfg.data.n_per_region = 60;
    cfg.data.n_test_per_region = 50;
    cfg.data.blobs.n_per_class = 60;
    cfg
}

#[test]
fn report_means_are_arithmetic_means_of_seed_values() {
    let mut cfg = tiny(Task::Misclass);
    cfg.seeds = vec![4, 5, 6];
    let report = harness::run(&cfg).unwrap();
    assert!(report.failures.is_empty());
    assert!(!report.summary.is_empty());
    for s in &report.summary {
        let values = report.values(s.score_type, &s.metric, &s.params);
        assert_eq!(values.iter().map(|v| v.0).collect::<Vec<_>>(), cfg.seeds);
        let mean = values.iter().map(|v| v.1).sum::<f64>() / values.len() as f64;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!(s.std.is_some());
    }
}

#[test]
fn toy_report_covers_both_scores_and_three_metrics() {
    let mut cfg = tiny(Task::Toy2);
    cfg.seeds = vec![0, 1, 2];
    let report = harness::run(&cfg).unwrap();
    for score in [ScoreType::UAlea, ScoreType::UEpis] {
        for (metric, params) in [("pearson", ""), ("ause", "steps=100"), ("uce", "bins=10")] {
            let row = report.summary_for(score, metric, params);
            assert!(row.is_some_and(|r| r.n_seeds == 3 && r.std.is_some()), "{score:?} {metric}");
        }
    }
}

#[test]
fn tabular_sweep_gives_one_report_per_layer() {
    let mut cfg = tiny(Task::Tabular);
    cfg.seeds = vec![1];
    let reports = harness::sweep_placement(&cfg, &[1, 2, 3]).unwrap();
    assert_eq!(reports.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    for (_, r) in &reports {
        assert!(r.failures.is_empty());
        assert!(r.rows.iter().all(|row| row.value.is_finite()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    let table: Vec<(String, &harness::ExperimentReport)> = reports.iter().map(|(l, r)| (l.to_string(), r)).collect();
    io::write_comparison(&path, "layer", &table).unwrap();
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let keys: Vec<(String, String, String, String)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string(), r[2].to_string(), r[3].to_string())
        })
        .collect();
    let expected: usize = reports.iter().map(|(_, r)| r.summary.len()).sum();
    assert_eq!(keys.len(), expected);
    let mut unique = keys.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), keys.len());
}

#[test]
fn theta_hash_is_unchanged_by_every_arm() {
    let mut cfg = tiny(Task::Toy1);
    cfg.seeds = vec![3];
    cfg.ablations.separate_branches = true;
    let arms = [(1, harness::Variant::default()), (2, harness::Variant::from_config(&cfg))];
    let results = harness::run_seeds(&cfg, &arms).unwrap();
    let outcome = results[0].1.as_ref().unwrap();
    assert_eq!(harness::params_hash(outcome.base.params()), outcome.theta_hash);
    assert_eq!(outcome.arms.len(), 2);
}
