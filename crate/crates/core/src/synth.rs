//! Synthetic two-source experiment material: seeded random source models,
//! sampled count spectrograms, and random-phase resynthesis so the counts can
//! be turned into WAV-able audio.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hmm::ChainParams;
use crate::nhmm::{sample, ModelDims, SourceModel};
use crate::signal::{istft, ComplexSpectrogram, CountSpectrogram, StftConfig, TimeSignal};

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub dims: ModelDims,
    pub frames: usize,
    pub quanta_per_frame: usize,
    /// Give the two sources disjoint frequency halves.
    pub disjoint_support: bool,
    /// Near-deterministic cyclic transitions instead of the default
    /// self-biased ergodic chain.
    pub strong_dynamics: bool,
    /// Dirichlet concentration of the spectral elements; values below one
    /// produce peaky, overlapping spectra.
    pub element_concentration: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            dims: ModelDims {
                n_dicts: 4,
                n_elems: 5,
                n_bins: 30,
            },
            frames: 100,
            quanta_per_frame: 200,
            disjoint_support: false,
            strong_dynamics: false,
            element_concentration: 0.5,
            seed: 0,
        }
    }
}

/// Symmetric-Dirichlet draw via Marsaglia-Tsang gamma variates.
fn dirichlet(rng: &mut ChaCha8Rng, concentration: f64, len: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; len];
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = sample_gamma(rng, concentration);
        sum += *v;
    }
    if sum <= 0.0 {
        // All draws underflowed; fall back to a point mass.
        let idx = rng.random_range(0..len);
        out[idx] = 1.0;
        return out;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn sample_gamma(rng: &mut ChaCha8Rng, shape: f64) -> f64 {
    if shape < 1.0 {
        let boost = rng.random::<f64>().powf(1.0 / shape);
        return sample_gamma(rng, shape + 1.0) * boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        if u < 1.0 - 0.0331 * x * x * x * x {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn make_chain(
    rng: &mut ChaCha8Rng,
    n: usize,
    strong_dynamics: bool,
    start_state: usize,
    reverse: bool,
) -> Result<ChainParams> {
    let mut transition = Array2::<f64>::zeros((n, n));
    let initial;
    if strong_dynamics && n > 1 {
        // Near-deterministic cycle from a fixed phase; `reverse` runs it the
        // other way so two sources sharing the pool rarely sit on the same
        // dictionary for more than a frame.
        let leak = 0.05 / (n - 1) as f64;
        for j in 0..n {
            let next = if reverse { (j + n - 1) % n } else { (j + 1) % n };
            for i in 0..n {
                transition[(i, j)] = if i == next { 0.95 } else { leak };
            }
        }
        initial = (0..n).map(|i| if i == start_state { 1.0 } else { 0.0 }).collect();
    } else {
        for j in 0..n {
            let mut col = vec![0.0f64; n];
            let mut sum = 0.0;
            for (i, c) in col.iter_mut().enumerate() {
                *c = 0.2 + rng.random::<f64>() + if i == j { 1.0 } else { 0.0 };
                sum += *c;
            }
            for (i, c) in col.iter().enumerate() {
                transition[(i, j)] = c / sum;
            }
        }
        initial = vec![1.0 / n as f64; n];
    }
    ChainParams::new(transition, initial)
}

fn make_model(
    rng: &mut ChaCha8Rng,
    opts: &SynthOptions,
    support: Option<std::ops::Range<usize>>,
    start_state: usize,
) -> Result<SourceModel> {
    let dims = opts.dims;
    let mut dictionaries = ndarray::Array3::<f64>::zeros((dims.n_dicts, dims.n_elems, dims.n_bins));
    for d in 0..dims.n_dicts {
        for z in 0..dims.n_elems {
            match &support {
                None => {
                    let element = dirichlet(rng, opts.element_concentration, dims.n_bins);
                    for (l, v) in element.iter().enumerate() {
                        dictionaries[(d, z, l)] = *v;
                    }
                }
                Some(range) => {
                    let element = dirichlet(rng, opts.element_concentration, range.len());
                    for (offset, v) in element.iter().enumerate() {
                        dictionaries[(d, z, range.start + offset)] = *v;
                    }
                }
            }
        }
    }
    let chain = make_chain(rng, dims.n_dicts, opts.strong_dynamics, start_state, false)?;
    SourceModel::new(dictionaries, chain)
}

/// Shape-pool model for the strong-dynamics pair: every dictionary element
/// is a lightly jittered copy of its dictionary's prototype shape. The
/// jitter is kept small so per-bin likelihoods barely distinguish the two
/// sources' copies; only the chains can resolve the attribution.
fn make_pool_model(
    rng: &mut ChaCha8Rng,
    opts: &SynthOptions,
    prototypes: &[Vec<f64>],
    start_state: usize,
    reverse: bool,
) -> Result<SourceModel> {
    let dims = opts.dims;
    let jitter_weight = 0.08;
    let mut dictionaries = ndarray::Array3::<f64>::zeros((dims.n_dicts, dims.n_elems, dims.n_bins));
    for d in 0..dims.n_dicts {
        for z in 0..dims.n_elems {
            let jitter = dirichlet(rng, 1.0, dims.n_bins);
            for l in 0..dims.n_bins {
                dictionaries[(d, z, l)] =
                    (1.0 - jitter_weight) * prototypes[d][l] + jitter_weight * jitter[l];
            }
            let sum: f64 = (0..dims.n_bins).map(|l| dictionaries[(d, z, l)]).sum();
            for l in 0..dims.n_bins {
                dictionaries[(d, z, l)] /= sum;
            }
        }
    }
    let chain = make_chain(rng, dims.n_dicts, true, start_state, reverse)?;
    SourceModel::new(dictionaries, chain)
}

/// Two seeded random source models over a shared frequency axis.
///
/// With `strong_dynamics` the two sources draw their dictionaries from one
/// shared pool of prototype shapes and differ mainly in cycle phase, so a
/// model without temporal structure cannot tell their elements apart.
pub fn make_source_pair(opts: &SynthOptions) -> Result<(SourceModel, SourceModel)> {
    if opts.disjoint_support && opts.dims.n_bins < 2 {
        return Err(Error::invalid("disjoint support needs at least two bins"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if opts.strong_dynamics && !opts.disjoint_support && opts.dims.n_dicts > 1 {
        let prototypes: Vec<Vec<f64>> = (0..opts.dims.n_dicts)
            .map(|_| dirichlet(&mut rng, opts.element_concentration, opts.dims.n_bins))
            .collect();
        let a = make_pool_model(&mut rng, opts, &prototypes, 0, false)?;
        let b = make_pool_model(&mut rng, opts, &prototypes, 1 % opts.dims.n_dicts, true)?;
        return Ok((a, b));
    }
    let (support_a, support_b) = if opts.disjoint_support {
        let half = opts.dims.n_bins / 2;
        (Some(0..half), Some(half..opts.dims.n_bins))
    } else {
        (None, None)
    };
    let a = make_model(&mut rng, opts, support_a, 0)?;
    let b = make_model(&mut rng, opts, support_b, 0)?;
    Ok((a, b))
}

/// Sampled per-source counts, their state paths, and the summed mixture.
#[derive(Debug, Clone)]
pub struct SynthMixture {
    pub sources: Vec<CountSpectrogram>,
    pub state_paths: Vec<Vec<usize>>,
    pub mixture: CountSpectrogram,
}

/// Sample both sources and add their counts cell by cell.
pub fn sample_mixture(
    models: &(SourceModel, SourceModel),
    opts: &SynthOptions,
) -> Result<SynthMixture> {
    let (counts_a, path_a) = sample(
        &models.0,
        opts.frames,
        opts.quanta_per_frame,
        opts.seed.wrapping_add(0x5EED_0001),
    )?;
    let (counts_b, path_b) = sample(
        &models.1,
        opts.frames,
        opts.quanta_per_frame,
        opts.seed.wrapping_add(0x5EED_0002),
    )?;
    let mixture = counts_a.add(&counts_b)?;
    Ok(SynthMixture {
        sources: vec![counts_a, counts_b],
        state_paths: vec![path_a, path_b],
        mixture,
    })
}

/// Interpret counts as STFT magnitudes with seeded random phase and invert.
/// The count matrix must have `fft_length / 2 + 1` rows.
pub fn counts_to_signal(
    counts: &CountSpectrogram,
    config: &StftConfig,
    sample_rate: u32,
    seed: u64,
) -> Result<TimeSignal> {
    config.validate()?;
    if counts.n_bins() != config.bins() {
        return Err(Error::invalid(format!(
            "counts have {} bins but the config produces {}",
            counts.n_bins(),
            config.bins()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bins = Array2::<Complex64>::zeros((counts.n_bins(), counts.n_frames()));
    let nyquist = counts.n_bins() - 1;
    for t in 0..counts.n_frames() {
        for l in 0..counts.n_bins() {
            let mag = counts.values()[(l, t)];
            // Real-signal constraint: DC and Nyquist stay on the real axis.
            let phase = if l == 0 || (config.fft_length.is_multiple_of(2) && l == nyquist) {
                if rng.random::<f64>() < 0.5 {
                    0.0
                } else {
                    std::f64::consts::PI
                }
            } else {
                rng.random::<f64>() * 2.0 * std::f64::consts::PI
            };
            bins[(l, t)] = Complex64::from_polar(mag, phase);
        }
    }
    let spec = ComplexSpectrogram {
        bins,
        config: *config,
        sample_rate,
    };
    istft(&spec)
}

/// Confine a signal's energy to the spectrogram rows in `keep` by zeroing
/// the other rows and re-rendering. One pass leaves a little out-of-band
/// energy behind (the overlap-add of the modified frames is not fully
/// consistent), so the projection is iterated.
pub fn band_limit(
    signal: &TimeSignal,
    config: &StftConfig,
    keep: std::ops::Range<usize>,
    passes: usize,
) -> Result<TimeSignal> {
    let mut out = signal.clone();
    for _ in 0..passes {
        let mut spec = crate::signal::stft(&out, config)?;
        for l in 0..spec.n_bins() {
            if !keep.contains(&l) {
                for t in 0..spec.n_frames() {
                    spec.bins[(l, t)] = Complex64::new(0.0, 0.0);
                }
            }
        }
        out = istft(&spec)?;
    }
    Ok(out)
}

/// Scale `signal` to a target RMS; zero signals are returned unchanged.
pub fn scale_to_rms(signal: &TimeSignal, target_rms: f64) -> TimeSignal {
    let rms = signal.rms();
    if rms <= 0.0 {
        return signal.clone();
    }
    let factor = target_rms / rms;
    TimeSignal {
        samples: signal.samples.iter().map(|s| s * factor).collect(),
        sample_rate: signal.sample_rate,
    }
}
