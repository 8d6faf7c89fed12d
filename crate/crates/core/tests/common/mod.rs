#![allow(dead_code)]

use cupid_core::autodiff::Tensor;

/// Relative error with a floor so vanishing gradients compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` with respect to every entry of `params`.
pub fn numeric_gradients(params: &[Tensor], h: f64, mut f: impl FnMut(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = params.to_vec();
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = Tensor::zeros(p.shape());
            for j in 0..p.len() {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + h;
                let up = f(&work);
                work[i].data_mut()[j] = orig - h;
                let down = f(&work);
                work[i].data_mut()[j] = orig;
                g.data_mut()[j] = (up - down) / (2.0 * h);
            }
            g
        })
        .collect()
}

/// Largest relative error between two gradient sets.
pub fn max_rel_err(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&a, &n)| rel_err(a, n)))
        .fold(0.0, f64::max)
}

/// Brute-force metric definitions.
pub mod oracles {
    use cupid_core::metrics::ScoredSample;
    use cupid_core::rng::SplitMix64;

    /// Scores drawn from a small grid so ties are common.
    pub fn tied_scores(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.below(6) as f64 * 0.25 - 0.5).collect()
    }

    pub fn labeled_instance(rng: &mut SplitMix64) -> Vec<ScoredSample> {
        loop {
            let n = 2 + rng.below(29);
            let scores = tied_scores(rng, n);
            let s: Vec<ScoredSample> = scores.iter().map(|&v| ScoredSample::labeled(v, rng.bernoulli(0.4))).collect();
            if s.iter().any(|x| x.label) && s.iter().any(|x| !x.label) {
                return s;
            }
        }
    }

    pub fn auc_pairs(s: &[ScoredSample]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for p in s.iter().filter(|x| x.label) {
            for q in s.iter().filter(|x| !x.label) {
                pairs += 1.0;
                wins += if p.score > q.score {
                    1.0
                } else if p.score == q.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / pairs
    }

    /// Average precision by scanning every distinct threshold from the top.
    pub fn aupr_thresholds(s: &[ScoredSample]) -> f64 {
        let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = s.iter().filter(|x| x.label).count() as f64;
        let mut prev = 0.0;
        let mut area = 0.0;
        for t in thresholds {
            let flagged: Vec<&ScoredSample> = s.iter().filter(|x| x.score >= t).collect();
            let tp = flagged.iter().filter(|x| x.label).count() as f64;
            let recall = tp / pos;
            area += (recall - prev) * tp / flagged.len() as f64;
            prev = recall;
        }
        area
    }

    pub fn pearson_two_pass(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    /// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
    pub fn counted_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                1.0 + less + (equal - 1.0) / 2.0
            })
            .collect()
    }

    pub fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }
}

/// Helpers for driving the `cupid` binary.
pub mod cli {
    use std::path::Path;
    use std::process::{Command, Output};

    use cupid_core::harness::{ExperimentConfig, Task};

    /// A preset shrunk so every command finishes in well under a second.
    pub fn tiny(task: Task) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(task);
        cfg.base.epochs = 3;
        cfg.cupid.epochs = 3;
        cfg.data.n_per_region = 60;
        cfg.data.n_test_per_region = 50;
        cfg.data.blobs.n_per_class = 60;
        cfg.seeds = vec![0, 1];
        cfg
    }

    pub fn write_config(path: &Path, cfg: &ExperimentConfig) {
        std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    }

    pub fn cupid(args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cupid")).args(args).output().expect("binary runs")
    }
}
