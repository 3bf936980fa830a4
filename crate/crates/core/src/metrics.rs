//! Evaluation metrics: Spearman rank correlation, Pearson correlation,
//! RMSE and MAE.
//!
//! Correlations of a constant vector are defined as 0. The `*_detail`
//! variants report whether that convention was applied so callers can
//! flag degenerate folds in their reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} observations, got {n}")]
    TooShort { n: usize, min: usize },
}

/// A correlation value plus a flag set when either input was constant and
/// the value was defined as 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < min {
        return Err(MetricError::TooShort { n: a.len(), min });
    }
    Ok(())
}

/// Average (fractional) ranks, 1-based. Tied values share the mean of the
/// ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn pearson_detail(a: &[f64], b: &[f64]) -> Result<Correlation, MetricError> {
    check_lengths(a, b, 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    let r = sab / (saa * sbb).sqrt();
    Ok(Correlation {
        value: r.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    pearson_detail(a, b).map(|c| c.value)
}

pub fn spearman_detail(a: &[f64], b: &[f64]) -> Result<Correlation, MetricError> {
    check_lengths(a, b, 2)?;
    pearson_detail(&average_ranks(a), &average_ranks(b))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    spearman_detail(a, b).map(|c| c.value)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check_lengths(a, b, 1)?;
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sse / a.len() as f64).sqrt())
}

pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check_lengths(a, b, 1)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_identity_and_reversal() {
        let a = [0.1, 0.5, 0.9];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        let rev = [0.9, 0.5, 0.1];
        assert_eq!(spearman(&a, &rev).unwrap(), -1.0);
    }

    #[test]
    fn spearman_with_ties_worked_example() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(average_ranks(&a), vec![1.0, 2.5, 2.5, 4.0]);
        // 4.5 / sqrt(22.5)
        let expected = 4.5 / 22.5f64.sqrt();
        let got = spearman(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.9487).abs() < 1e-4);
    }

    #[test]
    fn constant_input_is_zero_and_flagged() {
        let c = spearman_detail(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert_eq!(pearson(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn length_errors() {
        assert_eq!(
            spearman(&[1.0, 2.0], &[1.0]),
            Err(MetricError::LengthMismatch { left: 2, right: 1 })
        );
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(MetricError::TooShort { .. })));
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn rmse_and_pearson_basics() {
        let x = [0.1, 0.4, 0.7, 0.2];
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.15).collect();
        assert!((rmse(&x, &shifted).unwrap() - 0.15).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert!((mae(&x, &shifted).unwrap() - 0.15).abs() < 1e-12);
    }
}
