//! Inference-time uncertainty estimates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::cupid::CupidModule;
use crate::error::{Error, Result};
use crate::nn::{Head, Mlp, SplitNetwork, Targets};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub input_id: usize,
    /// Target vector (one-hot for classification).
    pub y_true: Option<Vec<f64>>,
    pub y_hat: Vec<f64>,
    pub y_hat_prime: Vec<f64>,
    /// `sum_j exp(s_j)`.
    pub u_alea: f64,
    /// `||y_hat - y_hat'||_1`.
    pub u_epis: f64,
    /// L1 error for regression, 0/1 misclassification for classification.
    pub error: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Per-row uncertainty records for the batch `x`. Ids count from `first_id`.
pub fn estimate(
    split: &SplitNetwork,
    module: &CupidModule,
    x: &Tensor,
    targets: Option<&Targets>,
    first_id: usize,
) -> Result<Vec<UncertaintyRecord>> {
    if let Some(t) = targets {
        if t.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "estimate",
                left: vec![x.rows()],
                right: vec![t.len()],
            });
        }
    }
    let p = module.perturbed_predict(split, x)?;
    let k = split.output_width();
    let dense = targets.map(|t| t.dense(k));
    let records = (0..x.rows())
        .map(|i| {
            let y_hat = p.y_hat.row(i).to_vec();
            let y_hat_prime = p.y_hat_prime.row(i).to_vec();
            let u_epis = y_hat.iter().zip(&y_hat_prime).map(|(a, b)| (a - b).abs()).sum();
            let u_alea = p.s.row(i).iter().map(|s| s.exp()).sum();
            let y_true = dense.as_ref().map(|d| d.row(i).to_vec());
            let error = y_true.as_ref().map(|y| match split.head() {
                Head::Regression => y.iter().zip(&y_hat).map(|(a, b)| (a - b).abs()).sum(),
                Head::SoftmaxClassification => {
                    if argmax(y) == argmax(&y_hat) {
                        0.0
                    } else {
                        1.0
                    }
                }
            });
            UncertaintyRecord {
                input_id: first_id + i,
                y_true,
                y_hat,
                y_hat_prime,
                u_alea,
                u_epis,
                error,
            }
        })
        .collect();
    Ok(records)
}

/// Jacobian `dF_l/dm` at a single feature row, `[k, d]`, one reverse pass per
/// output coordinate.
pub fn suffix_jacobian(split: &SplitNetwork, m: &Tensor) -> Result<Tensor> {
    if m.rows() != 1 {
        return Err(Error::invalid("suffix_jacobian takes a single feature row"));
    }
    let mut tape = Tape::new();
    let mv = tape.param(m.clone());
    let y = split.record_suffix(&mut tape, mv)?;
    let k = tape.value(y).cols();
    let mut rows = Vec::with_capacity(k);
    for j in 0..k {
        let mut seed = Tensor::zeros(&[1, k]);
        seed.data_mut()[j] = 1.0;
        let grads = tape.backward_with_seed(y, seed)?;
        rows.push(grads.get(mv).into_data());
    }
    Tensor::from_rows(&rows)
}

/// Exact vs. first-order output deviation under the scaled perturbation
/// `alpha * (m' - m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    pub exact: f64,
    pub linear: f64,
    pub rel_err: f64,
}

pub fn taylor_check(split: &SplitNetwork, module: &CupidModule, x: &Tensor, alpha: f64) -> Result<TaylorCheck> {
    if x.rows() != 1 {
        return Err(Error::invalid("taylor_check takes a single input row"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    module.check_split(split)?;
    let m = split.prefix(x)?;
    let m_prime = module.forward(&m)?.m_prime;
    let step: Vec<f64> = m_prime
        .data()
        .iter()
        .zip(m.post.data())
        .map(|(a, b)| alpha * (a - b))
        .collect();
    let moved = Tensor::new(
        m.post.shape().to_vec(),
        m.post.data().iter().zip(&step).map(|(a, b)| a + b).collect(),
    )?;
    let base = split.suffix(&m.post)?;
    let exact = split
        .suffix(&moved)?
        .data()
        .iter()
        .zip(base.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    let jac = suffix_jacobian(split, &m.post)?;
    let linear = (0..jac.rows())
        .map(|j| jac.row(j).iter().zip(&step).map(|(a, b)| a * b).sum::<f64>().abs())
        .sum::<f64>();
    Ok(TaylorCheck {
        exact,
        linear,
        rel_err: (exact - linear).abs() / linear.max(1e-12),
    })
}

/// MC-dropout predictive variance: for each row of `x`, the mean over output
/// coordinates of the unbiased sample variance across `passes` stochastic
/// forward passes.
pub fn mc_dropout_estimate(net: &Mlp, x: &Tensor, passes: usize, seed: u64) -> Result<Vec<f64>> {
    if passes < 2 {
        return Err(Error::invalid("MC dropout needs at least 2 passes"));
    }
    if !net.has_dropout() {
        return Err(Error::invalid("network has no dropout layer"));
    }
    let mut rng = SplitMix64::stream(seed, 0x3001);
    let samples: Vec<Tensor> = (0..passes)
        .map(|_| net.forward_stochastic(x, &mut rng))
        .collect::<Result<_>>()?;
    let (n, k) = (samples[0].rows(), samples[0].cols());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..k {
            // deviations from the first pass, so identical passes give exactly 0
            let first = samples[0].data()[i * k + j];
            let devs: Vec<f64> = samples.iter().map(|s| s.data()[i * k + j] - first).collect();
            let mean = devs.iter().sum::<f64>() / passes as f64;
            total += devs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (passes - 1) as f64;
        }
        out.push(total / k as f64);
    }
    Ok(out)
}
