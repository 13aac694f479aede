//! Numerically stable forward-backward smoothing over a single discrete
//! Markov chain with externally supplied per-frame log-likelihoods.
//!
//! The implementation rescales messages frame by frame (each forward message
//! is normalized to sum one and the log normalizers are accumulated), after
//! subtracting the per-frame maximum from the log-likelihoods. This keeps the
//! recursion in a safe floating-point range for arbitrarily long inputs while
//! leaving the posteriors exact.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Tolerance for stochasticity checks on distributions supplied by callers.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Transition and initial-state distributions of one Markov chain.
///
/// The transition matrix is column-stochastic: entry `(i, j)` is the
/// probability of moving to state `i` given the current state `j`, so every
/// column sums to one.
#[derive(Debug, Clone)]
pub struct ChainParams {
    transition: Array2<f64>,
    initial: Vec<f64>,
}

impl ChainParams {
    pub fn new(transition: Array2<f64>, initial: Vec<f64>) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::invalid("chain must have at least one state"));
        }
        if transition.nrows() != n || transition.ncols() != n {
            return Err(Error::invalid(format!(
                "transition matrix is {}x{}, expected {n}x{n}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        for v in transition.iter().chain(initial.iter()) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid("chain probabilities must be finite and >= 0"));
            }
        }
        for j in 0..n {
            let col_sum: f64 = transition.column(j).sum();
            if (col_sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "transition column {j} sums to {col_sum}, expected 1"
                )));
            }
        }
        let pi_sum: f64 = initial.iter().sum();
        if (pi_sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid(format!(
                "initial distribution sums to {pi_sum}, expected 1"
            )));
        }
        Ok(ChainParams {
            transition,
            initial,
        })
    }

    /// Uniform initial distribution and uniform transitions.
    pub fn uniform(n_states: usize) -> Self {
        let p = 1.0 / n_states as f64;
        ChainParams {
            transition: Array2::from_elem((n_states, n_states), p),
            initial: vec![p; n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }
}

/// Smoothed posteriors produced by [`forward_backward`].
#[derive(Debug, Clone)]
pub struct ChainPosterior {
    /// `T x N`; row `t` is `P(state = n at t | evidence)`.
    pub marginals: Array2<f64>,
    /// `(T-1) x N x N`; slice `t` entry `(i, j)` is
    /// `P(state = i at t, state = j at t+1 | evidence)`.
    pub pairwise: Array3<f64>,
    /// Log of the total evidence `sum over paths of prior * likelihood`.
    pub log_evidence: f64,
}

/// Exact smoothed inference given per-frame log-likelihoods (`T x N`).
///
/// Entries of `log_lik` may be `-inf` to encode impossible states; a frame
/// whose states are all impossible, or evidence with zero total probability,
/// is reported as an error rather than propagating NaN.
pub fn forward_backward(log_lik: &Array2<f64>, params: &ChainParams) -> Result<ChainPosterior> {
    let t_len = log_lik.nrows();
    let n = params.n_states();
    if t_len == 0 {
        return Err(Error::invalid("log-likelihood matrix has zero frames"));
    }
    if log_lik.ncols() != n {
        return Err(Error::invalid(format!(
            "log-likelihood has {} states, chain has {n}",
            log_lik.ncols()
        )));
    }
    for v in log_lik.iter() {
        if v.is_nan() || *v == f64::INFINITY {
            return Err(Error::invalid("log-likelihood entries must be finite or -inf"));
        }
    }

    // Per-frame max subtraction; cancels in the posteriors and is restored in
    // the evidence term.
    let mut row_max = vec![0.0f64; t_len];
    let mut lik = Array2::<f64>::zeros((t_len, n));
    for t in 0..t_len {
        let m = log_lik
            .row(t)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::numerical(format!(
                "all states have zero likelihood at frame {t}"
            )));
        }
        row_max[t] = m;
        for i in 0..n {
            lik[(t, i)] = (log_lik[(t, i)] - m).exp();
        }
    }

    let trans = params.transition();
    let mut alpha = Array2::<f64>::zeros((t_len, n));
    let mut scale = vec![0.0f64; t_len];

    for i in 0..n {
        alpha[(0, i)] = params.initial[i] * lik[(0, i)];
    }
    normalize_forward(&mut alpha, &mut scale, 0)?;
    for t in 1..t_len {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += trans[(i, j)] * alpha[(t - 1, j)];
            }
            alpha[(t, i)] = acc * lik[(t, i)];
        }
        normalize_forward(&mut alpha, &mut scale, t)?;
    }

    let mut beta = Array2::<f64>::zeros((t_len, n));
    for i in 0..n {
        beta[(t_len - 1, i)] = 1.0;
    }
    for t in (0..t_len - 1).rev() {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += trans[(i, j)] * lik[(t + 1, i)] * beta[(t + 1, i)];
            }
            beta[(t, j)] = acc / scale[t + 1];
        }
    }

    let mut marginals = Array2::<f64>::zeros((t_len, n));
    for t in 0..t_len {
        let mut sum = 0.0;
        for i in 0..n {
            let g = alpha[(t, i)] * beta[(t, i)];
            marginals[(t, i)] = g;
            sum += g;
        }
        if sum <= 0.0 {
            return Err(Error::numerical(format!(
                "posterior mass vanished at frame {t}"
            )));
        }
        for i in 0..n {
            marginals[(t, i)] /= sum;
        }
    }

    let mut pairwise = Array3::<f64>::zeros((t_len.saturating_sub(1), n, n));
    for t in 0..t_len.saturating_sub(1) {
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = alpha[(t, i)] * trans[(j, i)] * lik[(t + 1, j)] * beta[(t + 1, j)]
                    / scale[t + 1];
                pairwise[(t, i, j)] = v;
                sum += v;
            }
        }
        if sum <= 0.0 {
            return Err(Error::numerical(format!(
                "pairwise posterior mass vanished at frames {t}..{}",
                t + 1
            )));
        }
        for i in 0..n {
            for j in 0..n {
                pairwise[(t, i, j)] /= sum;
            }
        }
    }

    let log_evidence = scale
        .iter()
        .map(|c| c.ln())
        .chain(row_max.iter().copied())
        .sum();

    Ok(ChainPosterior {
        marginals,
        pairwise,
        log_evidence,
    })
}

fn normalize_forward(alpha: &mut Array2<f64>, scale: &mut [f64], t: usize) -> Result<()> {
    let sum: f64 = alpha.row(t).sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(Error::numerical(format!(
            "zero-probability evidence at frame {t}"
        )));
    }
    scale[t] = sum;
    alpha.row_mut(t).mapv_inplace(|v| v / sum);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_state_chain() {
        let params = ChainParams::uniform(1);
        let log_lik = array![[-1.5], [-0.25], [-3.0]];
        let post = forward_backward(&log_lik, &params).unwrap();
        for t in 0..3 {
            assert!((post.marginals[(t, 0)] - 1.0).abs() < 1e-15);
        }
        assert!((post.log_evidence - (-4.75)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_chain_gives_uniform_marginals() {
        let params = ChainParams::uniform(2);
        let log_lik = array![[-0.7, -0.7], [-1.3, -1.3], [-0.1, -0.1], [-2.0, -2.0]];
        let post = forward_backward(&log_lik, &params).unwrap();
        for t in 0..4 {
            assert!((post.marginals[(t, 0)] - 0.5).abs() < 1e-14);
            assert!((post.marginals[(t, 1)] - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn scaling_rows_shifts_evidence_only() {
        let trans = array![[0.8, 0.3], [0.2, 0.7]];
        let params = ChainParams::new(trans, vec![0.9, 0.1]).unwrap();
        let log_lik = array![[-0.2, -1.7], [-2.4, -0.3], [-0.9, -0.8]];
        let base = forward_backward(&log_lik, &params).unwrap();

        let shifts = [3.0, -1.25, 0.5];
        let mut shifted = log_lik.clone();
        for (t, c) in shifts.iter().enumerate() {
            shifted.row_mut(t).mapv_inplace(|v| v + c);
        }
        let moved = forward_backward(&shifted, &params).unwrap();

        for (a, b) in base.marginals.iter().zip(moved.marginals.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in base.pairwise.iter().zip(moved.pairwise.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let shift_sum: f64 = shifts.iter().sum();
        assert!((moved.log_evidence - base.log_evidence - shift_sum).abs() < 1e-10);
    }

    #[test]
    fn permutation_chain_follows_deterministic_trajectory() {
        // pi puts all mass on state 0, rho cycles 0 -> 1 -> 2 -> 0.
        let trans = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let params = ChainParams::new(trans, vec![1.0, 0.0, 0.0]).unwrap();
        let log_lik = Array2::from_shape_fn((5, 3), |(t, i)| -((t + i) as f64) * 0.3);
        let post = forward_backward(&log_lik, &params).unwrap();
        for t in 0..5 {
            let expect = t % 3;
            for i in 0..3 {
                let want = if i == expect { 1.0 } else { 0.0 };
                assert!((post.marginals[(t, i)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hard_zero_likelihood_propagates_exactly() {
        let trans = array![[0.5, 0.5], [0.5, 0.5]];
        let params = ChainParams::new(trans, vec![0.5, 0.5]).unwrap();
        let log_lik = array![[0.0, f64::NEG_INFINITY], [0.0, 0.0]];
        let post = forward_backward(&log_lik, &params).unwrap();
        assert_eq!(post.marginals[(0, 1)], 0.0);
        assert!((post.marginals[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_impossible_frame_is_an_error() {
        let params = ChainParams::uniform(2);
        let log_lik = array![[0.0, 0.0], [f64::NEG_INFINITY, f64::NEG_INFINITY]];
        let err = forward_backward(&log_lik, &params).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn incompatible_prior_and_likelihood_is_an_error() {
        let trans = array![[1.0, 0.0], [0.0, 1.0]];
        let params = ChainParams::new(trans, vec![1.0, 0.0]).unwrap();
        // Only state 1 is possible under the likelihood but the prior pins state 0.
        let log_lik = array![[f64::NEG_INFINITY, 0.0]];
        assert!(forward_backward(&log_lik, &params).is_err());
    }

    #[test]
    fn rejects_malformed_chains() {
        assert!(ChainParams::new(array![[0.5, 0.5], [0.4, 0.5]], vec![0.5, 0.5]).is_err());
        assert!(ChainParams::new(array![[1.0]], vec![0.9]).is_err());
        assert!(ChainParams::new(array![[1.0, 0.0], [0.0, 1.0]], vec![1.0]).is_err());
    }
}
