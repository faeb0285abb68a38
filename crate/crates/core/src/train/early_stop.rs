//! Patience-based early stopping on a metric to maximize.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best; keep this epoch's weights.
    Improved,
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
        }
    }

    /// Best `(epoch, metric)` so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    /// Records `metric` for `epoch` (1-based, increasing). Only a strict
    /// improvement counts, so ties keep the earlier epoch. NaN never
    /// improves.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(metric > b) => {}
            None if metric.is_nan() => {}
            _ => {
                self.best = Some((epoch, metric));
                return StopDecision::Improved;
            }
        }
        let since = epoch - self.best.map_or(0, |(e, _)| e);
        if since >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Replays a metric sequence; returns `(best_epoch, epochs_run)`.
pub fn simulate(patience: usize, metrics: &[f64]) -> (Option<usize>, usize) {
    let mut es = EarlyStopping::new(patience);
    for (i, &m) in metrics.iter().enumerate() {
        if es.observe(i + 1, m) == StopDecision::Stop {
            return (es.best().map(|b| b.0), i + 1);
        }
    }
    (es.best().map(|b| b.0), metrics.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_stops_after_patience_plus_one() {
        let m: Vec<f64> = (0..20).map(|i| 1.0 - i as f64 * 0.01).collect();
        assert_eq!(simulate(3, &m), (Some(1), 4));
        assert_eq!(simulate(10, &m), (Some(1), 11));
    }

    #[test]
    fn ties_keep_earliest() {
        assert_eq!(simulate(2, &[0.5, 0.7, 0.7, 0.7, 0.9]), (Some(2), 4));
    }

    #[test]
    fn improvement_resets_counter() {
        assert_eq!(simulate(2, &[0.1, 0.0, 0.2, 0.1, 0.1, 0.3]), (Some(3), 5));
    }

    #[test]
    fn runs_out_of_epochs() {
        assert_eq!(simulate(3, &[0.1, 0.2, 0.3]), (Some(3), 3));
    }

    #[test]
    fn nan_is_never_best() {
        assert_eq!(simulate(2, &[f64::NAN, 0.1, f64::NAN, f64::NAN]), (Some(2), 4));
    }
}
