//! Turns inferred mixing weights into per-source spectrograms and audio: a
//! linear reconstruction from each source's dictionary elements, a cellwise
//! ratio mask against the mixture, and resynthesis with the mixture phase.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::factorial::MixtureModel;
use crate::signal::{istft, ComplexSpectrogram, CountSpectrogram, TimeSignal};

/// Conservation bound enforced on every mask application.
const MASK_CONSERVATION_TOL: f64 = 1e-9;

/// Per-source reconstructions, masked spectrograms, and resynthesized audio.
#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub raw_estimates: Vec<Array2<f64>>,
    pub masked: Vec<Array2<f64>>,
    pub signals: Vec<TimeSignal>,
}

/// Linear reconstruction of one source:
/// `V_hat[l][t] = v_t * sum_{k in source} weights[t][k] * beta_l(k)`.
///
/// Weight rows may come from the variational posterior mean, the exact
/// posterior average, or PLCA.
pub fn reconstruct(
    mixture: &MixtureModel,
    weights: &Array2<f64>,
    frame_totals: &[f64],
    source: usize,
) -> Result<Array2<f64>> {
    if source >= mixture.n_sources() {
        return Err(Error::invalid(format!("source {source} out of range")));
    }
    let n_frames = weights.nrows();
    if weights.ncols() != mixture.k_total() {
        return Err(Error::invalid(format!(
            "weights have {} elements but mixture has {}",
            weights.ncols(),
            mixture.k_total()
        )));
    }
    if frame_totals.len() != n_frames {
        return Err(Error::invalid("frame totals do not match weights"));
    }
    let n_bins = mixture.n_bins();
    let beta = mixture.beta_all();
    let n_dicts = mixture.source(source).dims().n_dicts;
    let mut out = Array2::<f64>::zeros((n_bins, n_frames));
    for t in 0..n_frames {
        let v_t = frame_totals[t];
        if v_t == 0.0 {
            continue;
        }
        for n in 0..n_dicts {
            for k in mixture.block(source, n) {
                let w = v_t * weights[(t, k)];
                if w == 0.0 {
                    continue;
                }
                for l in 0..n_bins {
                    out[(l, t)] += w * beta[(l, k)];
                }
            }
        }
    }
    Ok(out)
}

/// Cellwise ratio mask: `V*[s] = V * V_hat[s] / sum_s' V_hat[s']`. Cells with
/// no reconstructed mass split the mixture evenly. The outputs always sum
/// back to the mixture; that conservation is checked before returning.
pub fn wiener_mask(
    mixture_mag: &Array2<f64>,
    estimates: &[Array2<f64>],
) -> Result<Vec<Array2<f64>>> {
    if estimates.is_empty() {
        return Err(Error::invalid("no estimates to mask"));
    }
    let dim = mixture_mag.dim();
    for (s, est) in estimates.iter().enumerate() {
        if est.dim() != dim {
            return Err(Error::invalid(format!(
                "estimate {s} has shape {:?}, mixture has {:?}",
                est.dim(),
                dim
            )));
        }
    }
    let n_sources = estimates.len();
    let even = 1.0 / n_sources as f64;
    let mut masked = vec![Array2::<f64>::zeros(dim); n_sources];
    let (n_bins, n_frames) = dim;
    for l in 0..n_bins {
        for t in 0..n_frames {
            let v = mixture_mag[(l, t)];
            let denom: f64 = estimates.iter().map(|e| e[(l, t)]).sum();
            for (s, est) in estimates.iter().enumerate() {
                let ratio = if denom > 0.0 {
                    est[(l, t)] / denom
                } else {
                    even
                };
                masked[s][(l, t)] = v * ratio;
            }
        }
    }
    // Conservation check; anything beyond rounding means a NaN or negative
    // estimate slipped through.
    for l in 0..n_bins {
        for t in 0..n_frames {
            let v = mixture_mag[(l, t)];
            let total: f64 = masked.iter().map(|m| m[(l, t)]).sum();
            if (total - v).abs() > MASK_CONSERVATION_TOL * v.abs().max(1.0) {
                return Err(Error::numerical(format!(
                    "mask does not conserve the mixture at bin {l}, frame {t}: {total} vs {v}"
                )));
            }
        }
    }
    Ok(masked)
}

/// Attach the mixture phase to a masked magnitude spectrogram and invert.
pub fn resynthesize(
    masked: &Array2<f64>,
    mixture_spec: &ComplexSpectrogram,
) -> Result<TimeSignal> {
    if masked.dim() != mixture_spec.bins.dim() {
        return Err(Error::invalid(format!(
            "masked magnitudes have shape {:?}, spectrogram has {:?}",
            masked.dim(),
            mixture_spec.bins.dim()
        )));
    }
    let mut spec = mixture_spec.clone();
    for (out, (mag, mix)) in spec
        .bins
        .iter_mut()
        .zip(masked.iter().zip(mixture_spec.bins.iter()))
    {
        let norm = mix.norm();
        *out = if norm > 0.0 {
            mix * (mag / norm)
        } else {
            Complex64::new(*mag, 0.0)
        };
    }
    istft(&spec)
}

/// Full back end of the separation pipeline: reconstruct every source from
/// its weight rows, mask against the mixture counts, and resynthesize with
/// the mixture phase. `gain` is the factor that produced the counts from the
/// magnitudes, so masked counts are divided by it before inversion.
pub fn separate_sources(
    mixture: &MixtureModel,
    weights: &Array2<f64>,
    counts: &CountSpectrogram,
    mixture_spec: &ComplexSpectrogram,
    gain: f64,
) -> Result<SeparationResult> {
    let raw_estimates: Vec<Array2<f64>> = (0..mixture.n_sources())
        .map(|s| reconstruct(mixture, weights, counts.frame_totals(), s))
        .collect::<Result<Vec<_>>>()?;
    let masked = wiener_mask(counts.values(), &raw_estimates)?;
    let signals = masked
        .iter()
        .map(|m| resynthesize(&m.mapv(|v| v / gain), mixture_spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparationResult {
        raw_estimates,
        masked,
        signals,
    })
}
