use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

use super::kernel;
pub use super::kernel::CLAMP_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Focal,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            _ => Err(Error::Invalid(format!("unknown loss `{s}` (expected ce or focal)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "focal",
        })
    }
}

/// Loss for all four heads. `gamma[h]` is the focal exponent of head `h`
/// (segment, category, subcategory, product).
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: [f64; 4],
    pub alpha: f64,
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            gamma: [0.0; 4],
            alpha: 1.0,
        }
    }

    pub fn focal(gamma: [f64; 4], alpha: f64) -> Self {
        Self {
            kind: LossKind::Focal,
            gamma,
            alpha,
        }
    }

    /// `(gamma, alpha)` actually applied to head `h`.
    pub fn head_params(&self, h: usize) -> (f64, f64) {
        match self.kind {
            LossKind::CrossEntropy => (0.0, 1.0),
            LossKind::Focal => (self.gamma[h], self.alpha),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::config("focal.gamma", format!("must be >= 0, got {g}")));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(
                "focal.alpha",
                format!("must be in (0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

fn check_row(logits: &[f64], t: usize) -> Result<()> {
    if t >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            bound: logits.len(),
        });
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// `-log softmax(logits)[t]`.
pub fn cross_entropy(logits: &[f64], t: usize) -> Result<f64> {
    check_row(logits, t)?;
    Ok(-kernel::log_softmax_at(logits, t))
}

/// `-alpha (1 - p_t)^gamma log p_t`, `p_t` clamped to
/// `[CLAMP_EPS, 1 - CLAMP_EPS]`.
pub fn focal_loss(logits: &[f64], t: usize, gamma: f64, alpha: f64) -> Result<f64> {
    check_row(logits, t)?;
    Ok(kernel::focal(logits, t, gamma, alpha).loss)
}

/// Batch-mean loss of one head. `rows[i]` are the logits of sample `i`.
pub fn head_loss(rows: &[Vec<f64>], targets: &[usize], cfg: &LossConfig, head: usize) -> Result<f64> {
    if rows.is_empty() || rows.len() != targets.len() {
        return Err(Error::Invalid(format!(
            "head loss over {} rows and {} targets",
            rows.len(),
            targets.len()
        )));
    }
    let (gamma, alpha) = cfg.head_params(head);
    let mut total = 0.0;
    for (row, &t) in rows.iter().zip(targets) {
        total += match cfg.kind {
            LossKind::CrossEntropy => cross_entropy(row, t)?,
            LossKind::Focal => focal_loss(row, t, gamma, alpha)?,
        };
    }
    Ok(total / rows.len() as f64)
}

/// Unweighted sum of the four batch-mean head losses.
pub fn multi_head_loss_value(
    logits: &[Vec<Vec<f64>>; 4],
    targets: &[[usize; 4]],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (h, rows) in logits.iter().enumerate() {
        let t: Vec<usize> = targets.iter().map(|l| l[h]).collect();
        total += head_loss(rows, &t, cfg, h)?;
    }
    Ok(total)
}

/// Records the four-head loss on `g`: for each head, the per-sample losses
/// are summed and divided by `denom`, then the heads are summed. Passing the
/// full batch size as `denom` gives the batch mean even when the batch is
/// split into shards.
pub fn multi_head_loss(
    g: &mut Graph<'_>,
    logits: [NodeId; 4],
    targets: &[[usize; 4]],
    cfg: &LossConfig,
    denom: f64,
) -> Result<NodeId> {
    let mut heads = Vec::with_capacity(4);
    for (h, &z) in logits.iter().enumerate() {
        let t: Vec<usize> = targets.iter().map(|l| l[h]).collect();
        let (gamma, alpha) = cfg.head_params(h);
        let rows = g.focal_loss(z, &t, gamma, alpha)?;
        let s = g.sum(rows, None)?;
        heads.push(g.scale(s, 1.0 / denom)?);
    }
    let mut total = heads[0];
    for &h in &heads[1..] {
        total = g.add(total, h)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, Tensor};
    use proptest::prelude::*;

    /// Logits whose softmax puts probability `p` on class 0 of 2.
    fn logits_for(p: f64) -> Vec<f64> {
        vec![(p / (1.0 - p)).ln(), 0.0]
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = cross_entropy(&[10.0, -10.0], 0).unwrap();
        let oracle = (-20f64).exp().ln_1p();
        assert!((v - oracle).abs() < 1e-20 && (v - 2.06e-9).abs() < 1e-11);
        assert!(cross_entropy(&[500.0, -500.0], 0).unwrap() < 1e-300);
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn focal_spot_values() {
        let v = focal_loss(&logits_for(0.5), 0, 2.0, 1.0).unwrap();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.1733).abs() < 1e-4);
        let v = focal_loss(&logits_for(0.9), 0, 2.0, 0.25).unwrap();
        let direct = -0.25 * 0.1f64.powi(2) * 0.9f64.ln();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 2.634e-4).abs() < 1e-6);
    }

    #[test]
    fn multi_head_is_sum_of_heads() {
        let logits: [Vec<Vec<f64>>; 4] = [
            vec![vec![0.2, -0.3], vec![1.0, 0.5]],
            vec![vec![0.1, 0.0, 0.3], vec![-1.0, 2.0, 0.0]],
            vec![vec![0.0, 0.7], vec![0.4, 0.4]],
            vec![vec![3.0, 1.0, -1.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]],
        ];
        let targets = [[0, 2, 1, 0], [1, 1, 0, 3]];
        let cfg = LossConfig::focal([2.0, 1.0, 1.0, 2.0], 0.25);
        let total = multi_head_loss_value(&logits, &targets, &cfg).unwrap();
        let parts: f64 = (0..4)
            .map(|h| {
                let t: Vec<usize> = targets.iter().map(|l| l[h]).collect();
                head_loss(&logits[h], &t, &cfg, h).unwrap()
            })
            .sum();
        assert!((total - parts).abs() < 1e-12);

        let mut zeroed = logits.clone();
        zeroed[1] = vec![vec![0.0; 3]; 2];
        let t1: Vec<usize> = targets.iter().map(|l| l[1]).collect();
        let delta = head_loss(&zeroed[1], &t1, &cfg, 1).unwrap() - head_loss(&logits[1], &t1, &cfg, 1).unwrap();
        let total2 = multi_head_loss_value(&zeroed, &targets, &cfg).unwrap();
        assert!((total2 - total - delta).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let rows = [[0.3, -0.2, 1.1], [2.0, 0.0, -1.0]];
        let heads: [Vec<Vec<f64>>; 4] = std::array::from_fn(|_| rows.iter().map(|r| r.to_vec()).collect());
        let targets = [[0, 1, 2, 0], [2, 2, 0, 1]];
        let cfg = LossConfig::focal([2.0, 0.0, 1.0, 0.5], 0.25);
        let mut g = Graph::new();
        let z: [NodeId; 4] = std::array::from_fn(|_| {
            g.constant(Tensor::from_rows(&[&rows[0], &rows[1]]))
        });
        let l = multi_head_loss(&mut g, z, &targets, &cfg, 2.0).unwrap();
        let direct = multi_head_loss_value(&heads, &targets, &cfg).unwrap();
        assert!((g.value(l).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_checks() {
        let z = Tensor::from_rows(&[&[0.3, -0.2, 1.1], &[2.0, 0.0, -1.0]]);
        for (gamma, alpha) in [(0.0, 1.0), (2.0, 0.25), (1.0, 1.0), (0.5, 0.7)] {
            let err = gradient_check(
                |g, x| {
                    let r = g.focal_loss(x, &[2, 1], gamma, alpha)?;
                    g.sum(r, None)
                },
                &z,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "gamma {gamma}: {err}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::focal([2.0; 4], 0.25).validate().is_ok());
        assert!(LossConfig::focal([-1.0, 0.0, 0.0, 0.0], 0.25).validate().is_err());
        assert!(LossConfig::focal([2.0; 4], 0.0).validate().is_err());
        assert_eq!("ce".parse::<LossKind>().unwrap(), LossKind::CrossEntropy);
        assert!("mse".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn focal_reduces_to_cross_entropy(z in proptest::collection::vec(-8.0f64..8.0, 2..8), t in 0usize..8) {
            let t = t % z.len();
            let f = focal_loss(&z, t, 0.0, 1.0).unwrap();
            let ce = cross_entropy(&z, t).unwrap();
            prop_assert!((f - ce).abs() <= 1e-12);
        }

        #[test]
        fn focal_decreases_in_gamma(p in 0.01f64..0.99, g1 in 0.0f64..4.0, dg in 0.1f64..2.0) {
            let z = logits_for(p);
            let a = focal_loss(&z, 0, g1, 1.0).unwrap();
            let b = focal_loss(&z, 0, g1 + dg, 1.0).unwrap();
            prop_assert!(b < a);
            prop_assert!(b >= 0.0);
        }
    }
}
