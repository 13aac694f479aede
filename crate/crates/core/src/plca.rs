//! Per-frame mixture-weight estimation over a fixed concatenated dictionary
//! with no temporal model. Frames are independent; the lockstep iteration
//! only exists so a single convergence monitor covers the whole spectrogram.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorial::weights_cross_entropy;
use crate::signal::CountSpectrogram;

/// Per-frame element distributions, `T x K_total` with unit row sums.
#[derive(Debug, Clone)]
pub struct PlcaWeights {
    pub weights: Array2<f64>,
    /// Reconstruction cross-entropy after each lockstep iteration.
    pub monitor: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PlcaConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for PlcaConfig {
    fn default() -> Self {
        PlcaConfig {
            max_iters: 200,
            rel_tol: 1e-6,
        }
    }
}

/// One multiplicative EM pass over every frame. Returns the monitor value
/// for the updated weights.
pub fn plca_step(
    weights: &mut Array2<f64>,
    beta_all: &Array2<f64>,
    data: &CountSpectrogram,
) -> Result<f64> {
    let k_total = beta_all.ncols();
    let n_bins = beta_all.nrows();
    let values = data.values();
    weights
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(k_total)
        .enumerate()
        .map(|(t, w)| {
            if data.frame_totals()[t] == 0.0 {
                return Ok(());
            }
            let mut updated = vec![0.0f64; k_total];
            for l in 0..n_bins {
                let v = values[(l, t)];
                if v == 0.0 {
                    continue;
                }
                let mut denom = 0.0;
                for k in 0..k_total {
                    denom += w[k] * beta_all[(l, k)];
                }
                if denom <= 0.0 {
                    return Err(Error::invalid(format!(
                        "no dictionary element has support at observed bin {l}, frame {t}"
                    )));
                }
                for k in 0..k_total {
                    updated[k] += v * w[k] * beta_all[(l, k)] / denom;
                }
            }
            let sum: f64 = updated.iter().sum();
            for k in 0..k_total {
                w[k] = updated[k] / sum;
            }
            Ok(())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(weights_cross_entropy(weights, beta_all, data))
}

/// Fixed-dictionary EM from a uniform start, iterated until the monitor's
/// relative change drops below `rel_tol` or `max_iters` is reached.
pub fn plca_separate(
    beta_all: &Array2<f64>,
    data: &CountSpectrogram,
    config: &PlcaConfig,
) -> Result<PlcaWeights> {
    let k_total = beta_all.ncols();
    if k_total == 0 {
        return Err(Error::invalid("dictionary has no elements"));
    }
    if beta_all.nrows() != data.n_bins() {
        return Err(Error::invalid(format!(
            "dictionary has {} bins but data has {}",
            beta_all.nrows(),
            data.n_bins()
        )));
    }
    for k in 0..k_total {
        let sum: f64 = beta_all.column(k).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "dictionary column {k} sums to {sum}, expected 1"
            )));
        }
    }

    let mut weights =
        Array2::<f64>::from_elem((data.n_frames(), k_total), 1.0 / k_total as f64);
    let mut monitor = Vec::new();
    let mut prev: Option<f64> = None;
    for _ in 0..config.max_iters.max(1) {
        let h = plca_step(&mut weights, beta_all, data)?;
        monitor.push(h);
        if let Some(p) = prev {
            let rel = (h - p).abs() / p.abs().max(1e-12);
            if rel < config.rel_tol {
                break;
            }
        }
        prev = Some(h);
    }
    Ok(PlcaWeights { weights, monitor })
}
