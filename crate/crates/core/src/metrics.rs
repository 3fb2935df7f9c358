//! Depth error metrics over valid pixels.

use crate::error::{Error, Result};

/// Predictions at or below zero are replaced by this value in ratio and log metrics.
pub const MIN_PREDICTION: f64 = 1e-3;
pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelMode {
    /// `|D̂ − D| / D`.
    #[default]
    Absolute,
    /// `(D̂ − D) / D̂`, signed with the prediction in the denominator.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
    /// Valid pixels whose prediction was clamped up to [`MIN_PREDICTION`].
    pub n_clamped: usize,
}

/// Running sums for the metrics. Accumulators merge exactly in a fixed order,
/// so sharded evaluation reproduces a serial pass when shards are merged in order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsAccumulator {
    sq_err: f64,
    rel: f64,
    log10: f64,
    within: [usize; 3],
    n_valid: usize,
    n_clamped: usize,
    mode: RelMode,
}

impl MetricsAccumulator {
    pub fn new(mode: RelMode) -> Self {
        MetricsAccumulator {
            mode,
            ..Default::default()
        }
    }

    pub fn add_pixel(&mut self, pred: f64, truth: f64) {
        let err = pred - truth;
        self.sq_err += err * err;
        let clamped = if pred <= 0.0 {
            self.n_clamped += 1;
            MIN_PREDICTION
        } else {
            pred
        };
        self.rel += match self.mode {
            RelMode::Absolute => (clamped - truth).abs() / truth,
            RelMode::Literal => (clamped - truth) / clamped,
        };
        self.log10 += (clamped.log10() - truth.log10()).abs();
        let ratio = (clamped / truth).max(truth / clamped);
        for (w, t) in self.within.iter_mut().zip(DELTA_THRESHOLDS) {
            if ratio < t {
                *w += 1;
            }
        }
        self.n_valid += 1;
    }

    /// Adds every pixel with positive ground truth (and `mask` set, if given).
    pub fn add(&mut self, pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != pred.len()) {
            return Err(Error::InvalidArgument(format!(
                "metrics inputs differ in length: {} predictions, {} targets",
                pred.len(),
                truth.len()
            )));
        }
        for i in 0..pred.len() {
            if truth[i] > 0.0 && mask.map_or(true, |m| m[i]) {
                self.add_pixel(pred[i], truth[i]);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.sq_err += other.sq_err;
        self.rel += other.rel;
        self.log10 += other.log10;
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
        self.n_valid += other.n_valid;
        self.n_clamped += other.n_clamped;
    }

    pub fn n_valid(&self) -> usize {
        self.n_valid
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n_valid == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.n_valid as f64;
        Ok(MetricsReport {
            rmse: (self.sq_err / n).sqrt(),
            rel: self.rel / n,
            log10: self.log10 / n,
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            n_valid: self.n_valid,
            n_clamped: self.n_clamped,
        })
    }
}

pub fn compute_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(RelMode::Absolute);
    acc.add(pred, truth, None)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let d = [1.0, 2.5, 7.0];
        let r = compute_metrics(&d, &d).unwrap();
        assert_eq!((r.rmse, r.rel, r.log10), (0.0, 0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn scalar_boundary_is_strict() {
        let r = compute_metrics(&[5.0], &[4.0]).unwrap();
        assert_eq!(r.rmse, 1.0);
        assert_eq!(r.rel, 0.25);
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
        assert_eq!(r.delta3, 1.0);
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let with = compute_metrics(&[1.0, 9.0, 3.0], &[1.5, 0.0, 2.0]).unwrap();
        let without = compute_metrics(&[1.0, 3.0], &[1.5, 2.0]).unwrap();
        assert_eq!(with, without);
        assert_eq!(with.n_valid, 2);
    }

    #[test]
    fn nonpositive_predictions_are_clamped_and_counted() {
        let r = compute_metrics(&[0.0, -1.0, 2.0], &[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.n_clamped, 2);
        assert!(r.log10.is_finite() && r.rel.is_finite());
        assert!((r.log10 - 2.0 * 3.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn literal_rel_is_signed() {
        let mut acc = MetricsAccumulator::new(RelMode::Literal);
        acc.add(&[5.0, 2.0], &[4.0, 4.0], None).unwrap();
        assert!((acc.report().unwrap().rel - (0.2 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_report_errors() {
        assert!(matches!(compute_metrics(&[1.0], &[0.0]), Err(Error::NoValidPixels)));
    }
}
