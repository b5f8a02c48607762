//! Value-level probability helpers shared by the losses and the metrics.

use crate::error::{config, Error, Result};

/// Clamp applied to every probability before a logarithm.
pub const PROB_EPS: f64 = 1e-12;

const SUM_TOL: f64 = 1e-6;

/// Numerically stable softmax of a single row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Softmax along `axis` of a row-major tensor with the given shape.
pub fn softmax_axis(data: &[f64], shape: &[usize], axis: usize) -> Result<Vec<f64>> {
    if axis >= shape.len() {
        return config(format!("softmax axis {axis} out of range for shape {shape:?}"));
    }
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("softmax input contains {v}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    let mut row = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, r) in row.iter_mut().enumerate() {
                *r = data[base + k * inner];
            }
            for (k, p) in softmax(&row).into_iter().enumerate() {
                out[base + k * inner] = p;
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn clamped_neg_log(p: f64) -> f64 {
    0.0 - p.clamp(PROB_EPS, 1.0).ln()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return config("empty probability vector");
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("probabilities sum to {s}, expected 1")));
    }
    Ok(())
}

fn hot_index(target: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &t) in target.iter().enumerate() {
        if t == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if t != 0.0 {
            return Err(Error::Input("target is not one-hot".into()));
        }
    }
    hot.ok_or_else(|| Error::Input("target has no hot entry".into()))
}

/// `-log p[t]` for the hot index `t` of `target`, with `p` clamped to `[eps, 1]`.
pub fn cross_entropy_onehot(p: &[f64], target: &[f64]) -> Result<f64> {
    if p.len() != target.len() {
        return config(format!(
            "probability length {} does not match target length {}",
            p.len(),
            target.len()
        ));
    }
    check_distribution(p)?;
    Ok(clamped_neg_log(p[hot_index(target)?]))
}

/// `KL(target || p)` for a one-hot target. Analytically `-log p[hot]`.
pub fn kl_to_onehot(target: &[f64], p: &[f64]) -> Result<f64> {
    if p.len() != target.len() {
        return config(format!(
            "probability length {} does not match target length {}",
            p.len(),
            target.len()
        ));
    }
    check_distribution(p)?;
    let hot = hot_index(target)?;
    // Terms with a zero target entry vanish (0 log 0 = 0).
    Ok(clamped_neg_log(p[hot]))
}

/// `KL(uniform || p) = sum_i (1/C) log((1/C) / p_i)` with `p` clamped at eps.
pub fn kl_uniform_to(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    let c = p.len() as f64;
    let u = 1.0 / c;
    let kl: f64 = p.iter().map(|&pi| u * (u.ln() + clamped_neg_log(pi))).sum();
    Ok(kl.max(0.0))
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
