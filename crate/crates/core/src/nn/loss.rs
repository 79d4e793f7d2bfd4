/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `softmax(scores)` against class `target`, with the
/// gradient w.r.t. the scores written to `grad` (scaled by `weight`).
pub fn cross_entropy(scores: &[f64], target: usize, weight: f64, grad: &mut [f64]) -> f64 {
    let p = softmax(scores);
    for (g, (j, pj)) in grad.iter_mut().zip(p.iter().enumerate()) {
        *g += weight * (pj - if j == target { 1.0 } else { 0.0 });
    }
    log_sum_exp(scores) - scores[target]
}

/// Binary cross-entropy on a logit; returns the loss and d/dlogit.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - target)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Transition point of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

/// Sum of smooth-L1 over the four delta coordinates, gradient scaled by
/// `weight` and accumulated into `grad`.
pub fn smooth_l1_4(pred: &[f64], target: &[f64; 4], weight: f64, grad: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..4 {
        let (l, g) = smooth_l1(pred[k] - target[k], SMOOTH_L1_BETA);
        total += l;
        grad[k] += weight * g;
    }
    total
}
