//! Regression losses over per-iteration estimates.

use crate::error::{Error, Result};

/// `|dx| + |dy|` between an estimate and its target.
#[inline]
pub fn l1(estimate: [f64; 2], label: [f64; 2]) -> f64 {
    (estimate[0] - label[0]).abs() + (estimate[1] - label[1]).abs()
}

/// Weight of iteration `k` (0-based) out of `count`: `g^(count-1-k)`.
#[inline]
pub fn iteration_weight(k: usize, count: usize, discount: f64) -> f64 {
    discount.powi((count - 1 - k) as i32)
}

/// Discounted L1 over every iteration's estimate, heaviest on the last.
pub fn sequence_loss(estimates: &[[f64; 2]], label: [f64; 2], discount: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("iteration estimates"));
    }
    let n = estimates.len();
    Ok(estimates
        .iter()
        .enumerate()
        .map(|(k, &e)| iteration_weight(k, n, discount) * l1(e, label))
        .sum())
}

/// [`sequence_loss`] averaged over a batch of labelled estimate sequences.
pub fn batch_sequence_loss(batch: &[(Vec<[f64; 2]>, [f64; 2])], discount: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("label batch"));
    }
    let mut total = 0.0;
    for (est, label) in batch {
        total += sequence_loss(est, *label, discount)?;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_iteration_is_plain_l1() {
        assert_eq!(sequence_loss(&[[1.0, -2.0]], [0.0, 0.0], 0.8).unwrap(), 3.0);
    }

    #[test]
    fn perfect_iterations_cost_nothing() {
        let e = [[1.5, 2.0]; 4];
        assert_eq!(sequence_loss(&e, [1.5, 2.0], 0.8).unwrap(), 0.0);
    }

    #[test]
    fn discounted_sum_of_three() {
        // per-iteration L1 errors 2, 1, 0.5
        let e = [[2.0, 0.0], [0.0, 1.0], [0.25, 0.25]];
        let got = sequence_loss(&e, [0.0, 0.0], 0.8).unwrap();
        assert!((got - 2.58).abs() < 1e-12, "{got}");
    }

    #[test]
    fn empty_inputs_fail() {
        assert!(sequence_loss(&[], [0.0, 0.0], 0.8).is_err());
        assert!(batch_sequence_loss(&[], 0.8).is_err());
    }

    #[test]
    fn batch_averages() {
        let b = vec![(vec![[1.0, 0.0]], [0.0, 0.0]), (vec![[3.0, 0.0]], [0.0, 0.0])];
        assert_eq!(batch_sequence_loss(&b, 0.5).unwrap(), 2.0);
    }
}
