//! Correlation and error metrics for quality prediction: Pearson linear
//! correlation, Spearman rank correlation with average ranks for ties, and
//! root-mean-square error, plus the optional four-parameter logistic
//! remapping some evaluation protocols apply before the linear metrics.

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], truth: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction and truth lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < min_len {
        return Err(Error::Domain(format!(
            "need at least {min_len} samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::Domain("metric inputs must be finite".into()));
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in pred.iter().zip(truth) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedMetric(
            "correlation undefined for a zero-variance input".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Fractional ranks (1-based); tied values share the mean of their positions.
#[must_use]
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean rank.
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 2)?;
    plcc(&average_ranks(pred), &average_ranks(truth)).map_err(|e| match e {
        Error::UndefinedMetric(_) => Error::UndefinedMetric(
            "rank correlation undefined when all values are equal".into(),
        ),
        other => other,
    })
}

/// Root-mean-square error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    let n = pred.len() as f64;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sum / n).sqrt())
}

/// Fits a four-parameter logistic `b1 + (b2-b1) / (1 + exp(-(x-b3)/s))` from
/// predictions to ground truth by MSE and returns the remapped predictions.
/// Deterministic (data-derived initialization, fixed iteration budget); used
/// only when the evaluation explicitly asks for remapping.
pub fn logistic_remap(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    check_pair(pred, truth, 3)?;
    let n = pred.len() as f64;
    let (tmin, tmax) = truth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let pmean = pred.iter().sum::<f64>() / n;
    let pstd = (pred.iter().map(|v| (v - pmean) * (v - pmean)).sum::<f64>() / n).sqrt();
    if pstd == 0.0 || tmax == tmin {
        return Err(Error::UndefinedMetric(
            "logistic remap undefined for constant inputs".into(),
        ));
    }
    // Parameters: low asymptote, high asymptote, center, scale (kept
    // positive through abs in the model).
    let mut theta = [tmin, tmax, pmean, pstd];
    let mut m = [0.0; 4];
    let mut v = [0.0; 4];
    let (b1c, b2c, eps, lr) = (0.9, 0.999, 1e-8, 0.02);
    let spread = tmax - tmin;
    for step in 1..=2000 {
        let mut grad = [0.0; 4];
        for (&x, &y) in pred.iter().zip(truth) {
            let s = theta[3].abs().max(1e-9);
            let z = (x - theta[2]) / s;
            let sig = 1.0 / (1.0 + (-z).exp());
            let val = theta[0] + (theta[1] - theta[0]) * sig;
            let e = 2.0 * (val - y) / n;
            grad[0] += e * (1.0 - sig);
            grad[1] += e * sig;
            let dsig = (theta[1] - theta[0]) * sig * (1.0 - sig);
            grad[2] += e * dsig * (-1.0 / s);
            grad[3] += e * dsig * (-(x - theta[2]) / (s * s)) * theta[3].signum();
        }
        for i in 0..4 {
            m[i] = b1c * m[i] + (1.0 - b1c) * grad[i];
            v[i] = b2c * v[i] + (1.0 - b2c) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1c.powi(step));
            let vh = v[i] / (1.0 - b2c.powi(step));
            theta[i] -= lr * spread * mh / (vh.sqrt() + eps);
        }
    }
    let s = theta[3].abs().max(1e-9);
    Ok(pred
        .iter()
        .map(|&x| theta[0] + (theta[1] - theta[0]) / (1.0 + (-(x - theta[2]) / s).exp()))
        .collect())
}
