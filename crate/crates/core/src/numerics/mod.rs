//! Dense tensors, reverse-mode differentiation and gradient verification.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, max_relative_error, relative_error, GradCheckOptions, GradReport, Objective};
pub use graph::{softmax_rows, Gradients, Graph, PenaltyKind, Var, LAYER_NORM_EPS};
pub(crate) use graph::{penalty_grad, penalty_value};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Left-to-right sum in iteration order.
///
/// Every reduction that must be bit-reproducible goes through here, so the
/// result depends only on the order of the input sequence and never on
/// thread scheduling.
pub fn deterministic_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = 0.0;
    for v in values {
        acc += v;
    }
    acc
}

/// Mean negative log-likelihood over unmasked rows of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.param(logits);
    let loss = g.cross_entropy(l, targets, loss_mask)?;
    Ok(g.value(loss).item())
}

/// Softmax over each row of `x` restricted to `mask`, rank-2 boolean mask form.
pub fn masked_softmax(x: &Tensor, mask: &[Vec<bool>]) -> Result<Tensor> {
    if mask.len() != x.rows() {
        return Err(Error::Shape("mask rows".into()));
    }
    let flat: Vec<bool> = mask.iter().flatten().copied().collect();
    softmax_rows(x, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_sum_basic() {
        assert_eq!(deterministic_sum([1.0, 2.0, 3.0]), 6.0);
    }

    #[test]
    fn deterministic_sum_follows_index_order() {
        let values = [1e16, 1.0, -1e16, 1.0];
        let order = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        // applying the same index sequence to the permuted view reproduces bits
        let a = deterministic_sum(order.iter().map(|&i| values[i]));
        let b = deterministic_sum(permuted.iter().copied());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn deterministic_sum_repeatable_on_a_million_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..1_000_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = deterministic_sum(values.iter().copied());
        let b = deterministic_sum(values.iter().copied());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn cross_entropy_matches_hand_log_sum_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let targets = [1usize, 7, 0, 3, 3];
        let mask = [true, false, true, true, true];
        let logits = Tensor::from_rows(&rows);
        let got = cross_entropy(&logits, &targets, &mask).unwrap();

        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..5 {
            if !mask[r] {
                continue;
            }
            let m = rows[r].iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + rows[r].iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - rows[r][targets[r]];
            count += 1.0;
        }
        assert!((got - total / count).abs() < 1e-12);
    }
}
