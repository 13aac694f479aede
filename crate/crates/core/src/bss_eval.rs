//! SDR / SIR / SAR scoring of separated signals against reference sources.
//!
//! This is the zero-lag projection form of the decomposition: the estimate is
//! split into a component along the target reference, a component inside the
//! span of all references (interference), and a remainder (artifacts). It
//! preserves the ordering of separation quality on synthetic material; the
//! absolute decibel values are not comparable with implementations that allow
//! time-varying distortion filters.

use crate::error::{Error, Result};
use crate::signal::TimeSignal;

/// Scores are clamped to this many dB either side of zero.
pub const SCORE_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SepScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

impl SepScores {
    pub fn mean_of(scores: &[SepScores]) -> SepScores {
        let n = scores.len() as f64;
        SepScores {
            sdr: scores.iter().map(|s| s.sdr).sum::<f64>() / n,
            sir: scores.iter().map(|s| s.sir).sum::<f64>() / n,
            sar: scores.iter().map(|s| s.sar).sum::<f64>() / n,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

fn db_ratio(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -SCORE_CAP_DB;
    }
    if den <= 0.0 {
        return SCORE_CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-SCORE_CAP_DB, SCORE_CAP_DB)
}

/// Solve the small Gram system `G x = c` by Gaussian elimination with
/// partial pivoting. Fails when the references are linearly dependent.
fn solve_gram(mut g: Vec<Vec<f64>>, mut c: Vec<f64>) -> Result<Vec<f64>> {
    let n = c.len();
    let scale = g
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|a, b| g[*a][col].abs().total_cmp(&g[*b][col].abs()))
            .expect("non-empty range");
        if g[pivot_row][col].abs() <= 1e-12 * scale.max(1e-300) {
            return Err(Error::invalid(
                "references are linearly dependent; scores are undefined",
            ));
        }
        g.swap(col, pivot_row);
        c.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = g[row][col] / g[col][col];
            for k in col..n {
                g[row][k] -= factor * g[col][k];
            }
            c[row] -= factor * c[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = c[row];
        for k in row + 1..n {
            acc -= g[row][k] * x[k];
        }
        x[row] = acc / g[row][row];
    }
    Ok(x)
}

/// The three orthogonal-projection components of an estimate: along the
/// target, inside the reference span but off-target, and outside the span.
/// Their sum reconstructs the estimate exactly.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

/// Split an estimate into target, interference, and artifact components.
pub fn decompose(
    estimate: &TimeSignal,
    references: &[TimeSignal],
    target_index: usize,
) -> Result<Decomposition> {
    if target_index >= references.len() {
        return Err(Error::invalid(format!(
            "target index {target_index} out of range for {} references",
            references.len()
        )));
    }
    let len = estimate.len();
    for (i, r) in references.iter().enumerate() {
        if r.len() != len {
            return Err(Error::invalid(format!(
                "reference {i} has {} samples, estimate has {len}",
                r.len()
            )));
        }
    }
    let target = &references[target_index].samples;
    let target_energy = energy(target);
    if target_energy <= 0.0 {
        return Err(Error::invalid("target reference is all zeros"));
    }

    let est = &estimate.samples;
    let n_refs = references.len();
    let gram: Vec<Vec<f64>> = (0..n_refs)
        .map(|i| {
            (0..n_refs)
                .map(|j| dot(&references[i].samples, &references[j].samples))
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = (0..n_refs)
        .map(|i| dot(est, &references[i].samples))
        .collect();
    let coeffs = solve_gram(gram, rhs)?;

    // s_target: projection onto the target alone.
    let target_gain = dot(est, target) / target_energy;
    let mut s_target = vec![0.0f64; len];
    let mut e_interf = vec![0.0f64; len];
    let mut e_artif = vec![0.0f64; len];
    for i in 0..len {
        s_target[i] = target_gain * target[i];
        // Projection onto the span of all references.
        let mut span = 0.0;
        for (c, r) in coeffs.iter().zip(references) {
            span += c * r.samples[i];
        }
        e_interf[i] = span - s_target[i];
        e_artif[i] = est[i] - span;
    }
    Ok(Decomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

/// Score one estimate against a set of references, with `target_index`
/// naming the reference the estimate is supposed to match.
pub fn bss_eval(
    estimate: &TimeSignal,
    references: &[TimeSignal],
    target_index: usize,
) -> Result<SepScores> {
    let parts = decompose(estimate, references, target_index)?;
    let s_energy = energy(&parts.s_target);
    let interf_energy = energy(&parts.e_interf);
    let artif_energy = energy(&parts.e_artif);
    let distortion: f64 = parts
        .e_interf
        .iter()
        .zip(&parts.e_artif)
        .map(|(a, b)| (a + b) * (a + b))
        .sum();
    let wanted: f64 = parts
        .s_target
        .iter()
        .zip(&parts.e_interf)
        .map(|(a, b)| (a + b) * (a + b))
        .sum();

    Ok(SepScores {
        sdr: db_ratio(s_energy, distortion),
        sir: db_ratio(s_energy, interf_energy),
        sar: db_ratio(wanted, artif_energy),
    })
}

/// Score every estimate against every reference assignment and keep the
/// permutation with the highest mean SDR. Returns the chosen reference index
/// per estimate alongside the scores.
pub fn best_permutation(
    estimates: &[TimeSignal],
    references: &[TimeSignal],
) -> Result<(Vec<usize>, Vec<SepScores>)> {
    let n = estimates.len();
    if n == 0 || n != references.len() {
        return Err(Error::invalid(format!(
            "need matching nonzero counts of estimates and references, got {n} and {}",
            references.len()
        )));
    }
    if n > 8 {
        return Err(Error::invalid(
            "permutation search is limited to 8 sources",
        ));
    }
    // Score matrix first; permutations then just index into it.
    let mut table = vec![vec![SepScores {
        sdr: 0.0,
        sir: 0.0,
        sar: 0.0,
    }; n]; n];
    for (e, estimate) in estimates.iter().enumerate() {
        for r in 0..n {
            table[e][r] = bss_eval(estimate, references, r)?;
        }
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut assignment: Vec<usize> = (0..n).collect();
    permute(&mut assignment, 0, &mut |perm| {
        let mean: f64 = perm
            .iter()
            .enumerate()
            .map(|(e, r)| table[e][*r].sdr)
            .sum::<f64>()
            / n as f64;
        if best.as_ref().is_none_or(|(b, _)| mean > *b) {
            best = Some((mean, perm.to_vec()));
        }
    });
    let (_, perm) = best.expect("at least one permutation");
    let scores = perm
        .iter()
        .enumerate()
        .map(|(e, r)| table[e][*r])
        .collect();
    Ok((perm, scores))
}

fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(samples: Vec<f64>) -> TimeSignal {
        TimeSignal::new(samples, 16_000).unwrap()
    }

    fn orthogonal_pair(len: usize) -> (TimeSignal, TimeSignal) {
        // Sine and cosine at different integer frequencies over a full period.
        let a: Vec<f64> = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * 3.0 * n as f64 / len as f64).sin())
            .collect();
        let b: Vec<f64> = (0..len)
            .map(|n| (2.0 * std::f64::consts::PI * 7.0 * n as f64 / len as f64).sin())
            .collect();
        (sig(a), sig(b))
    }

    #[test]
    fn perfect_estimate_hits_the_cap() {
        let (a, b) = orthogonal_pair(256);
        let scores = bss_eval(&a.clone(), &[a, b], 0).unwrap();
        assert_eq!(scores.sdr, SCORE_CAP_DB);
        assert_eq!(scores.sir, SCORE_CAP_DB);
        assert_eq!(scores.sar, SCORE_CAP_DB);
    }

    #[test]
    fn scores_are_scale_invariant() {
        let (a, b) = orthogonal_pair(256);
        let mut noisy = a.clone();
        for (i, s) in noisy.samples.iter_mut().enumerate() {
            *s += 0.1 * b.samples[i] + 0.05 * ((i * i) as f64).sin();
        }
        let refs = [a, b];
        let base = bss_eval(&noisy, &refs, 0).unwrap();
        let mut scaled = noisy.clone();
        for s in scaled.samples.iter_mut() {
            *s *= -3.7;
        }
        let moved = bss_eval(&scaled, &refs, 0).unwrap();
        assert!((base.sdr - moved.sdr).abs() < 1e-9);
        assert!((base.sir - moved.sir).abs() < 1e-9);
        assert!((base.sar - moved.sar).abs() < 1e-9);
    }

    #[test]
    fn equal_power_interferer_gives_zero_sir() {
        let (a, b) = orthogonal_pair(512);
        let estimate = sig(a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(x, y)| x + y)
            .collect());
        let scores = bss_eval(&estimate, &[a, b], 0).unwrap();
        assert!(scores.sir.abs() < 1e-9, "sir = {}", scores.sir);
        assert_eq!(scores.sar, SCORE_CAP_DB);
    }

    #[test]
    fn orthogonal_noise_lowers_sdr_and_sar_only() {
        let (a, b) = orthogonal_pair(512);
        // Noise orthogonal to both references: a third sinusoid frequency.
        let noise: Vec<f64> = (0..512)
            .map(|n| (2.0 * std::f64::consts::PI * 11.0 * n as f64 / 512.0).sin())
            .collect();
        let estimate = sig(a
            .samples
            .iter()
            .zip(&noise)
            .map(|(x, y)| x + 0.3 * y)
            .collect());
        let scores = bss_eval(&estimate, &[a, b], 0).unwrap();
        assert_eq!(scores.sir, SCORE_CAP_DB);
        assert!(scores.sdr < SCORE_CAP_DB);
        assert!(scores.sar < SCORE_CAP_DB);
        assert!((scores.sdr - scores.sar).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        let (a, b) = orthogonal_pair(64);
        let zero = sig(vec![0.0; 64]);
        assert!(bss_eval(&a, &[zero, b.clone()], 0).is_err());
        let short = sig(vec![0.1; 32]);
        assert!(bss_eval(&short, &[a.clone(), b.clone()], 0).is_err());
        // Linearly dependent references.
        let doubled = sig(a.samples.iter().map(|x| 2.0 * x).collect());
        assert!(bss_eval(&a, &[a.clone(), doubled], 0).is_err());
        assert!(bss_eval(&a, &[a.clone(), b], 5).is_err());
    }

    #[test]
    fn permutation_is_resolved_by_best_sdr() {
        let (a, b) = orthogonal_pair(256);
        let estimates = vec![b.clone(), a.clone()];
        let references = vec![a, b];
        let (perm, scores) = best_permutation(&estimates, &references).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(scores[0].sdr, SCORE_CAP_DB);
        assert_eq!(scores[1].sdr, SCORE_CAP_DB);
    }
}
