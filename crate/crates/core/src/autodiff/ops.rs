//! Forward kernels shared by the tape and by tape-free inference.
//!
//! Inference paths call these directly so that a recorded forward pass and a
//! plain one produce bit-identical values.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T` for a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose preserves length")
}

/// Elementwise binary op. Shapes must agree, except that either side may be
/// a scalar.
pub fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.is_scalar() {
        let y = b.item();
        Ok(a.map(|x| f(x, y)))
    } else if a.is_scalar() {
        let x = a.item();
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn prelu(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    if !slope.is_scalar() {
        return Err(Error::ShapeMismatch {
            op: "prelu",
            left: x.shape().to_vec(),
            right: slope.shape().to_vec(),
        });
    }
    Ok(leaky_relu(x, slope.item()))
}

/// Row-wise softmax over the trailing axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise log-softmax over the trailing axis.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// `ones[rows, 1] x bias[1, n]`: repeats a bias row once per batch row.
pub fn tile_rows(bias: &Tensor, rows: usize) -> Result<Tensor> {
    matmul(&Tensor::ones(&[rows, 1]), bias)
}
