//! Row-level focal loss and its gradient with respect to the logits.

/// Lower and upper clamp margin for `p_t`.
pub const CLAMP_EPS: f64 = 1e-12;

pub(crate) struct Focal {
    pub loss: f64,
    pub clamped: bool,
}

/// Numerically stable `log softmax(z)[t]`.
/// The max term contributes exactly 1 to the sum, so the rest goes through
/// `ln_1p` to keep precision when one logit dominates.
pub(crate) fn log_softmax_at(z: &[f64], t: usize) -> f64 {
    let (arg, m) = z
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (z[t] - m) - rest.ln_1p()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-alpha (1 - p)^gamma log p` with `p = softmax(z)[t]` clamped to
/// `[CLAMP_EPS, 1 - CLAMP_EPS]`. `log p` comes from the stable log-softmax
/// so the unclamped gamma = 0, alpha = 1 case is exactly cross-entropy.
pub(crate) fn focal(z: &[f64], t: usize, gamma: f64, alpha: f64) -> Focal {
    let mut log_p = log_softmax_at(z, t);
    let lo = CLAMP_EPS.ln();
    let hi = (-CLAMP_EPS).ln_1p();
    let clamped = !(lo..=hi).contains(&log_p);
    log_p = log_p.clamp(lo, hi);
    let p = log_p.exp();
    let w = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
    Focal {
        loss: -alpha * w * log_p,
        clamped,
    }
}

/// d focal / d z. Zero when `p_t` sits on a clamp edge.
pub(crate) fn focal_grad(z: &[f64], t: usize, gamma: f64, alpha: f64) -> Vec<f64> {
    if focal(z, t, gamma, alpha).clamped {
        return vec![0.0; z.len()];
    }
    let s = softmax(z);
    let log_p = log_softmax_at(z, t);
    let p = log_p.exp();
    // dL/dp * p
    let mut coef = if gamma == 0.0 { 1.0 } else { (1.0 - p).powf(gamma) };
    if gamma != 0.0 {
        coef -= gamma * p * (1.0 - p).powf(gamma - 1.0) * log_p;
    }
    let coef = -alpha * coef;
    s.iter()
        .enumerate()
        .map(|(j, &sj)| coef * (if j == t { 1.0 } else { 0.0 } - sj))
        .collect()
}
