use crate::error::{dim_mismatch, Error, Result};

use super::matrix::{dot, norm, Matrix};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;
/// Floor applied to the reference distribution inside [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;
/// Variance epsilon used by every layer norm.
pub const LN_EPS: f64 = 1e-5;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(dim_mismatch("cannot normalize an empty vector"));
    }
    let n = norm(v);
    if n < ZERO_NORM || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_mismatch(format!("cosine of {} vs {} values", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Normalize each row to unit length.
pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if n < ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Pairwise cosine similarity between the rows of `a` (m×d) and `b` (n×d).
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() || a.cols() == 0 {
        return Err(dim_mismatch(format!(
            "cosine_matrix widths {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let an = normalize_rows(a)?;
    let bn = normalize_rows(b)?;
    Ok(an.matmul_t(&bn))
}

/// Mean over rows followed by L2 normalization.
pub fn mean_pool(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() == 0 {
        return Err(dim_mismatch("cannot pool zero rows"));
    }
    l2_normalize(&m.mean_row())
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    Ok(softmax_unchecked(x, temperature))
}

pub(crate) fn softmax_unchecked(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// KL(p ‖ q) with `q` clamped below at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(dim_mismatch(format!("kl over {} vs {} entries", p.len(), q.len())));
    }
    for dist in [p, q] {
        let s: f64 = dist.iter().sum();
        if (s - 1.0).abs() > 1e-6 || dist.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::NotADistribution(s));
        }
    }
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let terms = p.iter().zip(q).map(|(&pi, &qi)| {
        if pi <= 0.0 {
            0.0
        } else {
            pi * (pi.ln() - qi.max(KL_FLOOR).ln())
        }
    });
    compensated_sum(terms)
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Kahan–Neumaier summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Row-wise layer norm with affine parameters.
pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> Matrix {
    let d = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
