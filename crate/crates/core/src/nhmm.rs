//! Single-source non-negative hidden Markov model: each Markov state owns a
//! dictionary of normalized spectral elements, frames are multinomial draws
//! from a per-frame mixture of the active dictionary's elements, and state
//! transitions follow an ergodic chain.
//!
//! Training is maximum-likelihood EM from an isolated-source count
//! spectrogram; sampling runs the generative process forward for synthetic
//! test material.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::hmm::{forward_backward, ChainParams};
use crate::signal::CountSpectrogram;

const MODEL_MAGIC: &[u8; 8] = b"NFHMODL1";
const MODEL_VERSION: u64 = 1;

/// Probability floor applied after each M-step so EM never freezes on an
/// absorbing zero.
const PROB_FLOOR: f64 = 1e-12;

/// Dimensions of a source model: dictionaries, elements per dictionary, and
/// frequency bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_dicts: usize,
    pub n_elems: usize,
    pub n_bins: usize,
}

/// One source's model: `dictionaries[(d, z, l)]` is the weight of frequency
/// `l` in element `z` of dictionary `d`; every element sums to one over `l`.
#[derive(Debug, Clone)]
pub struct SourceModel {
    dictionaries: Array3<f64>,
    chain: ChainParams,
}

impl SourceModel {
    pub fn new(dictionaries: Array3<f64>, chain: ChainParams) -> Result<Self> {
        let (n_dicts, n_elems, n_bins) = dictionaries.dim();
        if n_dicts == 0 || n_elems == 0 || n_bins == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if chain.n_states() != n_dicts {
            return Err(Error::invalid(format!(
                "chain has {} states but model has {n_dicts} dictionaries",
                chain.n_states()
            )));
        }
        for v in dictionaries.iter() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::invalid("dictionary weights must be finite and >= 0"));
            }
        }
        for d in 0..n_dicts {
            for z in 0..n_elems {
                let sum: f64 = (0..n_bins).map(|l| dictionaries[(d, z, l)]).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "element ({d}, {z}) sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(SourceModel {
            dictionaries,
            chain,
        })
    }

    /// Random initialization: elements drawn from a flat Dirichlet over
    /// frequencies, near-uniform transitions with a small self-transition
    /// boost, uniform initial distribution. Deterministic given `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.n_dicts == 0 || dims.n_elems == 0 || dims.n_bins == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dictionaries = Array3::zeros((dims.n_dicts, dims.n_elems, dims.n_bins));
        for d in 0..dims.n_dicts {
            for z in 0..dims.n_elems {
                let mut sum = 0.0;
                for l in 0..dims.n_bins {
                    // -ln(U) is Exp(1); normalized exponentials are Dirichlet(1).
                    let draw = -(1.0 - rng.random::<f64>()).ln();
                    dictionaries[(d, z, l)] = draw;
                    sum += draw;
                }
                for l in 0..dims.n_bins {
                    dictionaries[(d, z, l)] /= sum;
                }
            }
        }

        let n = dims.n_dicts;
        let boost = 0.1;
        let off = (1.0 - boost) / n as f64;
        let transition = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                off + boost
            } else {
                off
            }
        });
        let chain = ChainParams::new(transition, vec![1.0 / n as f64; n])?;
        SourceModel::new(dictionaries, chain)
    }

    pub fn dims(&self) -> ModelDims {
        let (n_dicts, n_elems, n_bins) = self.dictionaries.dim();
        ModelDims {
            n_dicts,
            n_elems,
            n_bins,
        }
    }

    pub fn dictionaries(&self) -> &Array3<f64> {
        &self.dictionaries
    }

    pub fn chain(&self) -> &ChainParams {
        &self.chain
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dims = self.dims();
        let mut w = ContainerWriter::create(path, MODEL_MAGIC)?;
        w.write_u64(MODEL_VERSION)?;
        w.write_u64(dims.n_dicts as u64)?;
        w.write_u64(dims.n_elems as u64)?;
        w.write_u64(dims.n_bins as u64)?;
        w.write_f64_slice(self.dictionaries.as_slice().expect("row-major layout"))?;
        w.write_f64_slice(self.chain.transition().as_slice().expect("row-major layout"))?;
        w.write_f64_slice(self.chain.initial())?;
        w.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = ContainerReader::open(path, MODEL_MAGIC)?;
        let version = r.read_u64()?;
        if version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported model version {version}",
                path.display()
            )));
        }
        let n_dicts = r.read_dim("n_dicts")?;
        let n_elems = r.read_dim("n_elems")?;
        let n_bins = r.read_dim("n_bins")?;
        let beta = r.read_f64_vec(n_dicts * n_elems * n_bins)?;
        let dictionaries = Array3::from_shape_vec((n_dicts, n_elems, n_bins), beta)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let trans = r.read_f64_vec(n_dicts * n_dicts)?;
        let transition = Array2::from_shape_vec((n_dicts, n_dicts), trans)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let initial = r.read_f64_vec(n_dicts)?;
        SourceModel::new(dictionaries, ChainParams::new(transition, initial)?)
    }

    /// Human-readable dump for debugging: one dictionary element per line.
    pub fn export_text(&self, mut out: impl Write) -> std::io::Result<()> {
        let dims = self.dims();
        writeln!(
            out,
            "n_dicts={} n_elems={} n_bins={}",
            dims.n_dicts, dims.n_elems, dims.n_bins
        )?;
        for d in 0..dims.n_dicts {
            for z in 0..dims.n_elems {
                write!(out, "beta d={d} z={z}:")?;
                for l in 0..dims.n_bins {
                    write!(out, " {:.12e}", self.dictionaries[(d, z, l)])?;
                }
                writeln!(out)?;
            }
        }
        for j in 0..dims.n_dicts {
            write!(out, "rho from={j}:")?;
            for i in 0..dims.n_dicts {
                write!(out, " {:.12e}", self.chain.transition()[(i, j)])?;
            }
            writeln!(out)?;
        }
        write!(out, "pi:")?;
        for p in self.chain.initial() {
            write!(out, " {p:.12e}")?;
        }
        writeln!(out)
    }
}

/// Per-frame mixture weights carried through EM, plus the log-likelihood
/// trace. `weights[(t, d, z)]` sums to one over `z` for every `(t, d)`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: Array3<f64>,
    pub log_likelihood: Vec<f64>,
}

impl TrainState {
    /// Uniform mixture weights for `n_frames` frames.
    pub fn uniform(n_frames: usize, dims: ModelDims) -> Self {
        TrainState {
            weights: Array3::from_elem(
                (n_frames, dims.n_dicts, dims.n_elems),
                1.0 / dims.n_elems as f64,
            ),
            log_likelihood: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 100,
            rel_tol: 1e-5,
            seed: 0,
        }
    }
}

/// Per-frame per-dictionary multinomial log-likelihoods under the current
/// mixture weights: `sum_l V[l][t] * ln(sum_z theta[t][d][z] * beta[d][z][l])`.
pub fn frame_log_likelihoods(
    model: &SourceModel,
    data: &CountSpectrogram,
    weights: &Array3<f64>,
) -> Result<Array2<f64>> {
    let dims = model.dims();
    let n_frames = data.n_frames();
    if data.n_bins() != dims.n_bins {
        return Err(Error::invalid(format!(
            "data has {} bins but model has {}",
            data.n_bins(),
            dims.n_bins
        )));
    }
    let values = data.values();
    let mut log_lik = Array2::<f64>::zeros((n_frames, dims.n_dicts));
    let beta = model.dictionaries();
    log_lik
        .as_slice_mut()
        .expect("row-major layout")
        .par_chunks_mut(dims.n_dicts)
        .enumerate()
        .for_each(|(t, row)| {
            for (d, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..dims.n_bins {
                    let v = values[(l, t)];
                    if v == 0.0 {
                        continue;
                    }
                    let mut mix = 0.0;
                    for z in 0..dims.n_elems {
                        mix += weights[(t, d, z)] * beta[(d, z, l)];
                    }
                    acc += v * mix.ln();
                }
                *out = acc;
            }
        });
    Ok(log_lik)
}

/// One full EM iteration. The returned log-likelihood trace gains the
/// evidence of the incoming parameters, so the trace is non-decreasing.
pub fn em_step(
    model: &SourceModel,
    data: &CountSpectrogram,
    state: &TrainState,
) -> Result<(SourceModel, TrainState)> {
    let dims = model.dims();
    let n_frames = data.n_frames();
    if n_frames == 0 || data.total() <= 0.0 {
        return Err(Error::invalid("empty spectrogram"));
    }
    if state.weights.dim() != (n_frames, dims.n_dicts, dims.n_elems) {
        return Err(Error::invalid("train state does not match model and data"));
    }

    let log_lik = frame_log_likelihoods(model, data, &state.weights)?;
    let post = forward_backward(&log_lik, model.chain())?;
    if !post.log_evidence.is_finite() {
        return Err(Error::numerical("training log-likelihood is not finite"));
    }

    let values = data.values();
    let beta = model.dictionaries();
    let mut beta_new = Array3::<f64>::zeros((dims.n_dicts, dims.n_elems, dims.n_bins));
    let mut theta_new = Array3::<f64>::zeros((n_frames, dims.n_dicts, dims.n_elems));

    // Responsibilities are streamed frame by frame; accumulation order is
    // fixed so training is bit-reproducible.
    let mut resp = vec![0.0f64; dims.n_elems];
    for t in 0..n_frames {
        for d in 0..dims.n_dicts {
            let gamma = post.marginals[(t, d)];
            for l in 0..dims.n_bins {
                let v = values[(l, t)];
                if v == 0.0 {
                    continue;
                }
                let mut denom = 0.0;
                for z in 0..dims.n_elems {
                    let r = state.weights[(t, d, z)] * beta[(d, z, l)];
                    resp[z] = r;
                    denom += r;
                }
                if denom <= 0.0 {
                    return Err(Error::numerical(format!(
                        "no dictionary support for observed bin {l} at frame {t}"
                    )));
                }
                for z in 0..dims.n_elems {
                    let p = resp[z] / denom;
                    beta_new[(d, z, l)] += gamma * v * p;
                    theta_new[(t, d, z)] += v * p;
                }
            }
        }
    }

    floor_and_normalize_rows(theta_new.as_slice_mut().expect("layout"), dims.n_elems);
    floor_and_normalize_rows(beta_new.as_slice_mut().expect("layout"), dims.n_bins);

    let n = dims.n_dicts;
    let mut transition = Array2::<f64>::zeros((n, n));
    for t in 0..n_frames.saturating_sub(1) {
        for j in 0..n {
            for i in 0..n {
                // pairwise[(t, j, i)] is mass moving from j at t to i at t+1;
                // rho is column-stochastic with destination in rows.
                transition[(i, j)] += post.pairwise[(t, j, i)];
            }
        }
    }
    if n_frames == 1 {
        transition = model.chain().transition().clone();
    } else {
        for j in 0..n {
            let mut col: Vec<f64> = (0..n).map(|i| transition[(i, j)]).collect();
            floor_and_normalize_rows(&mut col, n);
            for i in 0..n {
                transition[(i, j)] = col[i];
            }
        }
    }
    let mut initial: Vec<f64> = post.marginals.row(0).to_vec();
    floor_and_normalize_rows(&mut initial, n);

    let new_model = SourceModel::new(beta_new, ChainParams::new(transition, initial)?)?;
    let mut trace = state.log_likelihood.clone();
    trace.push(post.log_evidence);
    Ok((
        new_model,
        TrainState {
            weights: theta_new,
            log_likelihood: trace,
        },
    ))
}

fn floor_and_normalize_rows(values: &mut [f64], row_len: usize) {
    for row in values.chunks_mut(row_len) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            if *v < PROB_FLOOR {
                *v = PROB_FLOOR;
            }
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// EM training to convergence from a seeded random initialization.
pub fn train(data: &CountSpectrogram, dims: ModelDims, config: &TrainConfig) -> Result<SourceModel> {
    let (model, _state) = train_traced(data, dims, config)?;
    Ok(model)
}

/// Like [`train`] but also returns the final train state, whose
/// log-likelihood trace has one entry per completed iteration.
pub fn train_traced(
    data: &CountSpectrogram,
    dims: ModelDims,
    config: &TrainConfig,
) -> Result<(SourceModel, TrainState)> {
    if data.n_frames() == 0 || data.total() <= 0.0 {
        return Err(Error::invalid("empty spectrogram"));
    }
    let mut model = SourceModel::init(dims, config.seed)?;
    let mut state = TrainState::uniform(data.n_frames(), dims);
    for _ in 0..config.max_iters.max(1) {
        let prev = state.log_likelihood.last().copied();
        let (next_model, next_state) = em_step(&model, data, &state)?;
        model = next_model;
        state = next_state;
        let current = *state.log_likelihood.last().expect("em_step pushes");
        let rel_change = match prev {
            None => f64::INFINITY,
            Some(p) => (current - p).abs() / p.abs().max(1.0),
        };
        if rel_change <= config.rel_tol {
            break;
        }
    }
    Ok((model, state))
}

/// Run the generative process: states from the chain, a fresh uniform-simplex
/// mixture weight vector per frame, then `quanta_per_frame` element and
/// frequency draws per frame. Returns the counts and the true state path.
pub fn sample(
    model: &SourceModel,
    n_frames: usize,
    quanta_per_frame: usize,
    seed: u64,
) -> Result<(CountSpectrogram, Vec<usize>)> {
    if n_frames == 0 || quanta_per_frame == 0 {
        return Err(Error::invalid("need at least one frame and one quantum"));
    }
    let dims = model.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Cumulative distributions of each element for binary-search sampling.
    let beta = model.dictionaries();
    let mut element_cdf = vec![vec![0.0f64; dims.n_bins]; dims.n_dicts * dims.n_elems];
    for d in 0..dims.n_dicts {
        for z in 0..dims.n_elems {
            let cdf = &mut element_cdf[d * dims.n_elems + z];
            let mut acc = 0.0;
            for l in 0..dims.n_bins {
                acc += beta[(d, z, l)];
                cdf[l] = acc;
            }
        }
    }

    let mut states = Vec::with_capacity(n_frames);
    let mut state = sample_discrete(&mut rng, model.chain().initial());
    states.push(state);
    for _ in 1..n_frames {
        let column: Vec<f64> = (0..dims.n_dicts)
            .map(|i| model.chain().transition()[(i, state)])
            .collect();
        state = sample_discrete(&mut rng, &column);
        states.push(state);
    }

    let mut values = Array2::<f64>::zeros((dims.n_bins, n_frames));
    let mut theta = vec![0.0f64; dims.n_elems];
    for (t, &d) in states.iter().enumerate() {
        // theta_t drawn uniformly on the simplex.
        let mut sum = 0.0;
        for w in theta.iter_mut() {
            *w = -(1.0 - rng.random::<f64>()).ln();
            sum += *w;
        }
        for w in theta.iter_mut() {
            *w /= sum;
        }
        for _ in 0..quanta_per_frame {
            let z = sample_discrete(&mut rng, &theta);
            let cdf = &element_cdf[d * dims.n_elems + z];
            let u = rng.random::<f64>() * cdf[dims.n_bins - 1];
            let l = cdf.partition_point(|c| *c < u).min(dims.n_bins - 1);
            values[(l, t)] += 1.0;
        }
    }
    Ok((CountSpectrogram::from_values(values)?, states))
}

fn sample_discrete(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
