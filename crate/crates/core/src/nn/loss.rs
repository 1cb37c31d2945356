use ndarray::{Array2, Axis};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Vector-Jacobian product of the row-wise softmax.
pub fn softmax_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut dz = Array2::<f64>::zeros(probs.dim());
    for ((p, d), mut out) in probs
        .axis_iter(Axis(0))
        .zip(dprobs.axis_iter(Axis(0)))
        .zip(dz.axis_iter_mut(Axis(0)))
    {
        let dot: f64 = p.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pi), &di) in out.iter_mut().zip(p.iter()).zip(d.iter()) {
            *o = pi * (di - dot);
        }
    }
    dz
}

/// Mean negative log-likelihood of `labels` under row-wise `probs`. NaN
/// probabilities propagate to the result.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs[[i, y]];
            -(if p < PROB_FLOOR { PROB_FLOOR } else { p }).ln()
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`cross_entropy`] with respect to the probabilities.
pub fn cross_entropy_backward(probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut d = Array2::<f64>::zeros(probs.dim());
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        if p > PROB_FLOOR {
            d[[i, y]] = -1.0 / (p * n);
        }
    }
    d
}
