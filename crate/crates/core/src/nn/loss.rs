//! Losses with their analytic gradients. Every batch loss is a mean over
//! rows.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{invalid, shape, Error, Result};

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv(f64::exp)
}

/// `(1/B) Σ_i ‖pred_i − target_i‖²`.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(pred, target, "mse")?;
    let b = pred.nrows().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
    Ok((loss, diff * (2.0 / b)))
}

/// Mean negative log-likelihood of the true class.
pub fn ce_loss(logits: ArrayView2<f64>, labels: &[u32]) -> Result<(f64, Array2<f64>)> {
    if labels.len() != logits.nrows() {
        return Err(shape(format!("{} labels for {} rows", labels.len(), logits.nrows())));
    }
    let classes = logits.ncols();
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange { label: l as usize, classes });
    }
    let b = logits.nrows().max(1) as f64;
    let logp = log_softmax_rows(logits);
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y as usize]]).sum::<f64>() / b;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y as usize]] -= 1.0;
    }
    grad /= b;
    Ok((loss, grad))
}

/// `λ Σ|w| + (1−λ) Σ w²`; the subgradient of `|w|` at zero is taken as 0.
pub fn elastic_penalty(w: ArrayView2<f64>, lambda: f64) -> Result<(f64, Array2<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("elastic-net lambda {lambda} outside [0, 1]")));
    }
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let l2: f64 = w.iter().map(|v| v * v).sum();
    let grad = w.mapv(|v| {
        let sign = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        lambda * sign + 2.0 * (1.0 - lambda) * v
    });
    Ok((lambda * l1 + (1.0 - lambda) * l2, grad))
}

/// `T² · mean_i KL(softmax(teacher_i/T) ‖ softmax(student_i/T))`, gradient
/// with respect to the student logits only.
pub fn kd_loss(student: ArrayView2<f64>, teacher: ArrayView2<f64>, temperature: f64) -> Result<(f64, Array2<f64>)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be > 0, got {temperature}")));
    }
    same_shape(student, teacher, "kd")?;
    let b = student.nrows().max(1) as f64;
    let t = temperature;
    let log_ps = log_softmax_rows((&student / t).view());
    let log_pt = log_softmax_rows((&teacher / t).view());
    let mut kl = 0.0;
    Zip::from(&log_pt).and(&log_ps).for_each(|&lt, &ls| {
        let pt = lt.exp();
        if pt > 0.0 {
            kl += pt * (lt - ls);
        }
    });
    let loss = (t * t * kl / b).max(0.0);
    let grad = (log_ps.mapv(f64::exp) - log_pt.mapv(f64::exp)) * (t / b);
    Ok((loss, grad))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: ArrayView2<f64>, labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p == y as usize)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of each row's maximum, ties going to the lowest index.
pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
