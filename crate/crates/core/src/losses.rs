//! Training objectives for the plug-in module.
//!
//! All batch reductions are arithmetic means over samples; within a sample
//! the per-coordinate terms are summed.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the feature-deviation reward in the epistemic loss.
    pub lambda1: f64,
    /// Weight of the aleatoric loss in the total loss.
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::invalid(format!(
                "loss weights must be positive, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Whether the epistemic loss rewards feature deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisMode {
    /// `||y - y'||_1 - lambda1 ||m' - m||_1`.
    #[default]
    Max,
    /// Drops the deviation reward, keeping only prediction consistency.
    NoMax,
}

fn check_batch(op: &'static str, tape: &Tape, vars: &[Var]) -> Result<usize> {
    let first = tape.value(vars[0]);
    if first.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: first.shape().to_vec(),
            right: vec![first.rows(), first.cols()],
        });
    }
    for &v in &vars[1..] {
        let t = tape.value(v);
        if t.shape().len() != 2 || t.rows() != first.rows() {
            return Err(Error::ShapeMismatch {
                op,
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    Ok(first.rows())
}

/// Heteroscedastic Gaussian negative log-likelihood with log-variance `s`:
/// `mean_n sum_j [ exp(-s_j) (y_j - y'_j)^2 / 2 + s_j / 2 ]`.
///
/// For classification `y` is one-hot and `y_prime` the softmax vector.
pub fn alea_loss(tape: &mut Tape, y: Var, y_prime: Var, s: Var) -> Result<Var> {
    let n = check_batch("alea_loss", tape, &[y, y_prime, s])?;
    let diff = tape.sub(y, y_prime)?;
    let sq = tape.mul(diff, diff)?;
    let neg_s = tape.scale(s, -1.0)?;
    let precision = tape.exp(neg_s)?;
    let weighted = tape.mul(precision, sq)?;
    let fit = tape.sum(weighted)?;
    let penalty = tape.sum(s)?;
    let total = tape.add(fit, penalty)?;
    tape.scale(total, 0.5 / n as f64)
}

/// `mean_n [ ||y_hat - y_hat'||_1 - lambda1 ||m' - m||_1 ]`; the second term is
/// dropped under [`EpisMode::NoMax`].
pub fn epis_loss(
    tape: &mut Tape,
    y_hat: Var,
    y_hat_prime: Var,
    m: Var,
    m_prime: Var,
    lambda1: f64,
    mode: EpisMode,
) -> Result<Var> {
    let n = check_batch("epis_loss", tape, &[y_hat, y_hat_prime, m, m_prime])?;
    let dy = tape.sub(y_hat, y_hat_prime)?;
    let consistency = tape.l1_norm(dy)?;
    let total = match mode {
        EpisMode::Max => {
            let dm = tape.sub(m_prime, m)?;
            let deviation = tape.l1_norm(dm)?;
            let reward = tape.scale(deviation, lambda1)?;
            tape.sub(consistency, reward)?
        }
        EpisMode::NoMax => consistency,
    };
    tape.scale(total, 1.0 / n as f64)
}

/// `epis + lambda2 * alea`.
pub fn total_loss(tape: &mut Tape, epis: Var, alea: Var, lambda2: f64) -> Result<Var> {
    let weighted = tape.scale(alea, lambda2)?;
    tape.add(epis, weighted)
}

pub fn alea_loss_value(y: &Tensor, y_prime: &Tensor, s: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (y, yp, s) = (tape.constant(y.clone()), tape.constant(y_prime.clone()), tape.constant(s.clone()));
    let loss = alea_loss(&mut tape, y, yp, s)?;
    Ok(tape.value(loss).item())
}

pub fn epis_loss_value(
    y_hat: &Tensor,
    y_hat_prime: &Tensor,
    m: &Tensor,
    m_prime: &Tensor,
    lambda1: f64,
    mode: EpisMode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [y_hat, y_hat_prime, m, m_prime].map(|t| tape.constant(t.clone()));
    let loss = epis_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], lambda1, mode)?;
    Ok(tape.value(loss).item())
}

pub fn total_loss_value(epis: f64, alea: f64, lambda2: f64) -> f64 {
    epis + lambda2 * alea
}
