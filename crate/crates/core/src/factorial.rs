//! Factorial mixture of source models over a shared count spectrogram, with
//! two inference engines.
//!
//! The variational engine keeps one Dirichlet posterior over mixing weights
//! per frame, per-frequency element responsibilities, and one full Markov
//! chain posterior per source; its per-iteration cost is linear in the number
//! of sources. The exact engine runs EM over the joint state lattice, whose
//! size is the product of the per-source state counts.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::hmm::{forward_backward, ChainParams};
use crate::nhmm::SourceModel;
use crate::signal::CountSpectrogram;

const POSTERIOR_MAGIC: &[u8; 8] = b"NFHPOST1";

/// Digamma function for positive arguments.
///
/// Uses the recurrence to shift the argument above 10, then the asymptotic
/// series; absolute error is below 1e-12 on the whole positive axis.
pub fn digamma(x: f64) -> f64 {
    assert!(x > 0.0, "digamma requires x > 0, got {x}");
    let mut shift = 0.0;
    let mut x = x;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ln x - 1/(2x) - sum of Bernoulli terms B_2n / (2n x^{2n}).
    let series = x.ln() - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2
                    * (1.0 / 120.0
                        - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    shift + series
}

/// S source models sharing one frequency axis, combined into a concatenated
/// dictionary with a binary availability mask.
///
/// Global element indices enumerate source-major, dictionary-major,
/// element-minor, so each `(source, state)` pair owns one contiguous block.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    sources: Vec<SourceModel>,
    beta_all: Array2<f64>,
    log_beta: Array2<f64>,
    masks: Vec<Array2<f64>>,
    blocks: Vec<Vec<Range<usize>>>,
    gamma: f64,
}

/// Build a mixture from per-source models and a Dirichlet concentration.
pub fn combine(sources: Vec<SourceModel>, gamma: f64) -> Result<MixtureModel> {
    if sources.is_empty() {
        return Err(Error::invalid("mixture needs at least one source"));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    let n_bins = sources[0].dims().n_bins;
    for (s, source) in sources.iter().enumerate() {
        if source.dims().n_bins != n_bins {
            return Err(Error::invalid(format!(
                "source {s} has {} bins, source 0 has {n_bins}",
                source.dims().n_bins
            )));
        }
    }

    let k_total: usize = sources
        .iter()
        .map(|m| m.dims().n_dicts * m.dims().n_elems)
        .sum();
    let mut beta_all = Array2::<f64>::zeros((n_bins, k_total));
    let mut masks = Vec::with_capacity(sources.len());
    let mut blocks = Vec::with_capacity(sources.len());
    let mut k = 0usize;
    for source in &sources {
        let dims = source.dims();
        let mut mask = Array2::<f64>::zeros((dims.n_dicts, k_total));
        let mut source_blocks = Vec::with_capacity(dims.n_dicts);
        for d in 0..dims.n_dicts {
            let start = k;
            for z in 0..dims.n_elems {
                for l in 0..n_bins {
                    beta_all[(l, k)] = source.dictionaries()[(d, z, l)];
                }
                mask[(d, k)] = 1.0;
                k += 1;
            }
            source_blocks.push(start..k);
        }
        masks.push(mask);
        blocks.push(source_blocks);
    }
    let log_beta = beta_all.mapv(|b| if b > 0.0 { b.ln() } else { f64::NEG_INFINITY });
    Ok(MixtureModel {
        sources,
        beta_all,
        log_beta,
        masks,
        blocks,
        gamma,
    })
}

impl MixtureModel {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_bins(&self) -> usize {
        self.beta_all.nrows()
    }

    pub fn k_total(&self) -> usize {
        self.beta_all.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn source(&self, s: usize) -> &SourceModel {
        &self.sources[s]
    }

    pub fn sources(&self) -> &[SourceModel] {
        &self.sources
    }

    /// Concatenated dictionary, `L x K_total`; columns sum to one.
    pub fn beta_all(&self) -> &Array2<f64> {
        &self.beta_all
    }

    /// Availability mask of source `s`, `N_s x K_total` with 0/1 entries.
    pub fn mask(&self, s: usize) -> &Array2<f64> {
        &self.masks[s]
    }

    /// Global element range owned by dictionary `n` of source `s`.
    pub fn block(&self, s: usize, n: usize) -> Range<usize> {
        self.blocks[s][n].clone()
    }

    /// Which source a global element index belongs to.
    pub fn source_of_element(&self, k: usize) -> usize {
        for (s, source_blocks) in self.blocks.iter().enumerate() {
            for range in source_blocks {
                if range.contains(&k) {
                    return s;
                }
            }
        }
        unreachable!("element index out of range")
    }

    /// Number of joint state configurations, checked for overflow.
    pub fn joint_state_count(&self) -> Result<usize> {
        let mut count = 1usize;
        for source in &self.sources {
            count = count
                .checked_mul(source.dims().n_dicts)
                .ok_or_else(|| Error::invalid("joint state count overflows"))?;
        }
        Ok(count)
    }

    /// Generative Dirichlet parameters for one joint state assignment:
    /// `alpha_k = 1 + gamma * sum_s B[s][states[s]][k]`.
    pub fn prior_alpha(&self, states: &[usize]) -> Result<Vec<f64>> {
        if states.len() != self.n_sources() {
            return Err(Error::invalid(format!(
                "got {} states for {} sources",
                states.len(),
                self.n_sources()
            )));
        }
        let mut alpha = vec![1.0; self.k_total()];
        for (s, &n) in states.iter().enumerate() {
            if n >= self.sources[s].dims().n_dicts {
                return Err(Error::invalid(format!(
                    "state {n} out of range for source {s}"
                )));
            }
            for k in self.block(s, n) {
                alpha[k] += self.gamma;
            }
        }
        Ok(alpha)
    }

    /// Joint chain over the product state space: transitions and initial
    /// probabilities are products of the per-source values.
    pub fn joint_chain(&self) -> Result<ChainParams> {
        let j_count = self.joint_state_count()?;
        let states = self.enumerate_joint_states();
        let mut transition = Array2::<f64>::zeros((j_count, j_count));
        for (to, to_states) in states.iter().enumerate() {
            for (from, from_states) in states.iter().enumerate() {
                let mut p = 1.0;
                for (s, source) in self.sources.iter().enumerate() {
                    p *= source.chain().transition()[(to_states[s], from_states[s])];
                }
                transition[(to, from)] = p;
            }
        }
        // Product columns can drift from 1 by rounding; renormalize.
        for j in 0..j_count {
            let sum: f64 = transition.column(j).sum();
            transition.column_mut(j).mapv_inplace(|v| v / sum);
        }
        let mut initial = vec![1.0f64; j_count];
        for (j, joint) in states.iter().enumerate() {
            for (s, source) in self.sources.iter().enumerate() {
                initial[j] *= source.chain().initial()[joint[s]];
            }
        }
        let sum: f64 = initial.iter().sum();
        for v in initial.iter_mut() {
            *v /= sum;
        }
        ChainParams::new(transition, initial)
    }

    /// All joint states in lattice order: source-major mixed radix, so the
    /// last source's state varies fastest.
    pub fn enumerate_joint_states(&self) -> Vec<Vec<usize>> {
        let dims: Vec<usize> = self.sources.iter().map(|m| m.dims().n_dicts).collect();
        let count: usize = dims.iter().product();
        let mut out = Vec::with_capacity(count);
        for mut j in 0..count {
            let mut states = vec![0usize; dims.len()];
            for s in (0..dims.len()).rev() {
                states[s] = j % dims[s];
                j /= dims[s];
            }
            out.push(states);
        }
        out
    }

    fn check_data(&self, data: &CountSpectrogram) -> Result<()> {
        if data.n_bins() != self.n_bins() {
            return Err(Error::invalid(format!(
                "data has {} bins but mixture has {}",
                data.n_bins(),
                self.n_bins()
            )));
        }
        Ok(())
    }
}

/// Posterior parameters of the variational approximation.
#[derive(Debug, Clone)]
pub struct VariationalState {
    /// `T x K_total` Dirichlet parameters; every entry stays >= 1.
    pub alpha_hat: Array2<f64>,
    /// `T x L x K_total` element responsibilities; each `(t, l)` row sums to 1.
    pub z_hat: Array3<f64>,
    /// Per source: `T x N_s` state marginals.
    pub d_hat: Vec<Array2<f64>>,
    /// Per source: `T x N_s` surrogate log-likelihoods from the last update.
    pub phi_hat: Vec<Array2<f64>>,
    /// Reconstruction cross-entropy after each completed iteration.
    pub monitor: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ViConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Optional jitter seed for the initial Dirichlet parameters; `None`
    /// keeps the deterministic uniform start.
    pub seed: Option<u64>,
}

impl Default for ViConfig {
    fn default() -> Self {
        ViConfig {
            max_iters: 50,
            rel_tol: 1e-4,
            seed: None,
        }
    }
}

impl VariationalState {
    /// Deterministic start: uniform state marginals, Dirichlet parameters at
    /// the prior mean, responsibilities refreshed from those.
    pub fn init(mixture: &MixtureModel, data: &CountSpectrogram) -> Result<Self> {
        Self::init_seeded(mixture, data, None)
    }

    pub fn init_seeded(
        mixture: &MixtureModel,
        data: &CountSpectrogram,
        seed: Option<u64>,
    ) -> Result<Self> {
        mixture.check_data(data)?;
        let n_frames = data.n_frames();
        if n_frames == 0 {
            return Err(Error::invalid("count spectrogram has zero frames"));
        }
        // Observed bins must be reachable through some element.
        for l in 0..mixture.n_bins() {
            let has_support = mixture.beta_all().row(l).iter().any(|b| *b > 0.0);
            if !has_support {
                for t in 0..n_frames {
                    if data.values()[(l, t)] > 0.0 {
                        return Err(Error::invalid(format!(
                            "no dictionary element has support at observed bin {l}"
                        )));
                    }
                }
            }
        }

        let d_hat: Vec<Array2<f64>> = (0..mixture.n_sources())
            .map(|s| {
                let n = mixture.source(s).dims().n_dicts;
                Array2::from_elem((n_frames, n), 1.0 / n as f64)
            })
            .collect();

        let mut alpha_hat = Array2::<f64>::from_elem((n_frames, mixture.k_total()), 1.0);
        for (s, d) in d_hat.iter().enumerate() {
            let n_dicts = mixture.source(s).dims().n_dicts;
            for n in 0..n_dicts {
                let block = mixture.block(s, n);
                for t in 0..n_frames {
                    let coeff = mixture.gamma() * d[(t, n)];
                    for k in block.clone() {
                        alpha_hat[(t, k)] += coeff;
                    }
                }
            }
        }
        if let Some(seed) = seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in alpha_hat.iter_mut() {
                let jitter = 1.0 + 2e-3 * (rng.random::<f64>() - 0.5);
                *v = 1.0 + (*v - 1.0) * jitter;
            }
        }

        let mut state = VariationalState {
            alpha_hat,
            z_hat: Array3::zeros((n_frames, mixture.n_bins(), mixture.k_total())),
            d_hat,
            phi_hat: Vec::new(),
            monitor: Vec::new(),
        };
        update_z(&mut state, mixture, data)?;
        state.phi_hat = (0..mixture.n_sources())
            .map(|s| surrogate_likelihood(&state, mixture, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(state)
    }

    pub fn n_frames(&self) -> usize {
        self.alpha_hat.nrows()
    }

    /// Posterior-mean mixing weights, `T x K_total` with unit row sums.
    pub fn expected_weights(&self) -> Array2<f64> {
        let mut out = self.alpha_hat.clone();
        for mut row in out.rows_mut() {
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        out
    }
}

/// Refresh element responsibilities from the current Dirichlet parameters:
/// `ln z[t][l][k] = ln beta_l(k) + psi(alpha[t][k]) - psi(sum_k alpha[t][k]) - kappa`.
pub fn update_z(
    state: &mut VariationalState,
    mixture: &MixtureModel,
    data: &CountSpectrogram,
) -> Result<()> {
    mixture.check_data(data)?;
    let k_total = mixture.k_total();
    let n_bins = mixture.n_bins();
    let (zt, zl, zk) = state.z_hat.dim();
    if zt != state.alpha_hat.nrows() || zl != n_bins || zk != k_total {
        return Err(Error::invalid("responsibility array shape mismatch"));
    }
    let alpha = &state.alpha_hat;
    let log_beta = &mixture.log_beta;
    let values = data.values();

    state
        .z_hat
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(n_bins * k_total)
        .enumerate()
        .map(|(t, frame)| {
            let alpha_row = alpha.row(t);
            let psi_sum = digamma(alpha_row.sum());
            let excitation: Vec<f64> =
                alpha_row.iter().map(|a| digamma(*a) - psi_sum).collect();
            for (l, row) in frame.chunks_mut(k_total).enumerate() {
                let mut max = f64::NEG_INFINITY;
                for k in 0..k_total {
                    let logit = log_beta[(l, k)] + excitation[k];
                    row[k] = logit;
                    if logit > max {
                        max = logit;
                    }
                }
                if max == f64::NEG_INFINITY {
                    if values[(l, t)] > 0.0 {
                        return Err(Error::invalid(format!(
                            "no dictionary element has support at observed bin {l}, frame {t}"
                        )));
                    }
                    for v in row.iter_mut() {
                        *v = 1.0 / k_total as f64;
                    }
                    continue;
                }
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Ok(())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

/// Refresh the Dirichlet parameters from responsibilities and state
/// marginals:
/// `alpha[t][k] = sum_l V[l][t] z[t][l][k] + gamma sum_s sum_n d[s][t][n] B[s][n][k] + 1`.
pub fn update_alpha(
    state: &mut VariationalState,
    mixture: &MixtureModel,
    data: &CountSpectrogram,
) -> Result<()> {
    mixture.check_data(data)?;
    let k_total = mixture.k_total();
    let n_bins = mixture.n_bins();
    let n_frames = state.alpha_hat.nrows();
    if data.n_frames() != n_frames {
        return Err(Error::invalid("frame count mismatch"));
    }
    let z_hat = &state.z_hat;
    let d_hat = &state.d_hat;
    let values = data.values();
    let gamma = mixture.gamma();

    state
        .alpha_hat
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(k_total)
        .enumerate()
        .for_each(|(t, alpha_row)| {
            alpha_row.fill(1.0);
            for l in 0..n_bins {
                let v = values[(l, t)];
                if v == 0.0 {
                    continue;
                }
                for k in 0..k_total {
                    alpha_row[k] += v * z_hat[(t, l, k)];
                }
            }
            for (s, d) in d_hat.iter().enumerate() {
                for n in 0..d.ncols() {
                    let coeff = gamma * d[(t, n)];
                    if coeff == 0.0 {
                        continue;
                    }
                    for k in mixture.block(s, n) {
                        alpha_row[k] += coeff;
                    }
                }
            }
        });
    Ok(())
}

/// Expected-log-weight mass per dictionary of one source, used as the
/// emission term inside that source's forward-backward pass:
/// `phi[t][n] = sum_k B[s][n][k] (psi(alpha[t][k]) - psi(sum_k alpha[t][k]))`.
pub fn surrogate_likelihood(
    state: &VariationalState,
    mixture: &MixtureModel,
    source: usize,
) -> Result<Array2<f64>> {
    if source >= mixture.n_sources() {
        return Err(Error::invalid(format!("source {source} out of range")));
    }
    let n_frames = state.alpha_hat.nrows();
    let n_dicts = mixture.source(source).dims().n_dicts;
    let mut phi = Array2::<f64>::zeros((n_frames, n_dicts));
    for t in 0..n_frames {
        let alpha_row = state.alpha_hat.row(t);
        let psi_sum = digamma(alpha_row.sum());
        for n in 0..n_dicts {
            let mut acc = 0.0;
            for k in mixture.block(source, n) {
                acc += digamma(alpha_row[k]) - psi_sum;
            }
            phi[(t, n)] = acc;
        }
    }
    Ok(phi)
}

/// Normalized negative log-score of the reconstructed frame distributions:
/// `H = -sum_{l,t} V[l][t] ln(sum_k mean_weight[t][k] beta_l(k)) / sum V`.
///
/// Returns `+inf` when an observed bin has zero reconstructed mass.
pub fn reconstruction_cross_entropy(
    state: &VariationalState,
    mixture: &MixtureModel,
    data: &CountSpectrogram,
) -> f64 {
    weights_cross_entropy(&state.expected_weights(), mixture.beta_all(), data)
}

/// Cross-entropy of arbitrary per-frame weights against the data; shared by
/// the variational, exact, and PLCA monitors.
pub fn weights_cross_entropy(
    weights: &Array2<f64>,
    beta_all: &Array2<f64>,
    data: &CountSpectrogram,
) -> f64 {
    let total = data.total();
    if total <= 0.0 {
        return 0.0;
    }
    let n_bins = data.n_bins();
    let k_total = beta_all.ncols();
    let values = data.values();
    let mut acc = 0.0;
    for t in 0..data.n_frames() {
        for l in 0..n_bins {
            let v = values[(l, t)];
            if v == 0.0 {
                continue;
            }
            let mut p = 0.0;
            for k in 0..k_total {
                p += weights[(t, k)] * beta_all[(l, k)];
            }
            if p <= 0.0 {
                return f64::INFINITY;
            }
            acc += v * p.ln();
        }
    }
    -acc / total
}

/// One full variational iteration: responsibilities, Dirichlet parameters,
/// then a surrogate-likelihood forward-backward pass per source. Returns the
/// monitor value, which is also appended to `state.monitor`.
pub fn vi_step(
    state: &mut VariationalState,
    mixture: &MixtureModel,
    data: &CountSpectrogram,
) -> Result<f64> {
    update_z(state, mixture, data)?;
    update_alpha(state, mixture, data)?;
    for s in 0..mixture.n_sources() {
        let phi = surrogate_likelihood(state, mixture, s)?;
        let post = forward_backward(&phi, mixture.source(s).chain())?;
        state.d_hat[s] = post.marginals;
        state.phi_hat[s] = phi;
    }
    let h = reconstruction_cross_entropy(state, mixture, data);
    if h.is_nan() {
        return Err(Error::numerical("reconstruction cross-entropy is NaN"));
    }
    state.monitor.push(h);
    Ok(h)
}

/// Iterate [`vi_step`] until the monitor's relative change drops below
/// `rel_tol` or `max_iters` is reached.
pub fn vi_infer(
    mixture: &MixtureModel,
    data: &CountSpectrogram,
    config: &ViConfig,
) -> Result<VariationalState> {
    let mut state = VariationalState::init_seeded(mixture, data, config.seed)?;
    let mut prev: Option<f64> = None;
    for _ in 0..config.max_iters.max(1) {
        let h = vi_step(&mut state, mixture, data)?;
        if let Some(p) = prev {
            let rel = (h - p).abs() / p.abs().max(1e-12);
            if rel < config.rel_tol {
                break;
            }
        }
        prev = Some(h);
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy)]
pub struct ExactConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Refuse joint lattices larger than this.
    pub max_joint_states: usize,
}

impl Default for ExactConfig {
    fn default() -> Self {
        ExactConfig {
            max_iters: 50,
            rel_tol: 1e-4,
            max_joint_states: 4096,
        }
    }
}

/// Working state of the exact joint-lattice EM.
#[derive(Debug, Clone)]
pub struct ExactState {
    joint_chain: ChainParams,
    joint_states: Vec<Vec<usize>>,
    /// Global element indices active under each joint state, `J x A` with
    /// `A = sum_s K_s`.
    active_elements: Vec<Vec<usize>>,
    /// `T x J x A` mixture weights over the active elements.
    pub weights: Array3<f64>,
    /// `T x J` joint state posterior from the last E pass.
    pub joint_marginals: Array2<f64>,
    /// Data log-likelihood after each completed iteration.
    pub log_likelihood: Vec<f64>,
}

impl ExactState {
    pub fn joint_states(&self) -> &[Vec<usize>] {
        &self.joint_states
    }

    /// Marginal state posterior of one source, `T x N_s`.
    pub fn source_marginals(&self, mixture: &MixtureModel, source: usize) -> Array2<f64> {
        let n_frames = self.joint_marginals.nrows();
        let n_dicts = mixture.source(source).dims().n_dicts;
        let mut out = Array2::<f64>::zeros((n_frames, n_dicts));
        for (j, states) in self.joint_states.iter().enumerate() {
            let n = states[source];
            for t in 0..n_frames {
                out[(t, n)] += self.joint_marginals[(t, j)];
            }
        }
        out
    }

    /// Posterior-averaged weights scattered over the full element axis,
    /// `T x K_total` with unit row sums.
    pub fn expected_weights(&self, mixture: &MixtureModel) -> Array2<f64> {
        let n_frames = self.joint_marginals.nrows();
        let mut out = Array2::<f64>::zeros((n_frames, mixture.k_total()));
        for (j, active) in self.active_elements.iter().enumerate() {
            for t in 0..n_frames {
                let p = self.joint_marginals[(t, j)];
                if p == 0.0 {
                    continue;
                }
                for (slot, &k) in active.iter().enumerate() {
                    out[(t, k)] += p * self.weights[(t, j, slot)];
                }
            }
        }
        out
    }
}

/// Allocate the exact-EM state: uniform weights over each joint state's
/// active elements. Fails when the joint lattice exceeds the configured cap.
pub fn exact_init(
    mixture: &MixtureModel,
    data: &CountSpectrogram,
    config: &ExactConfig,
) -> Result<ExactState> {
    mixture.check_data(data)?;
    let j_count = mixture.joint_state_count()?;
    if j_count > config.max_joint_states {
        return Err(Error::invalid(format!(
            "joint lattice has {j_count} states, above the limit of {}",
            config.max_joint_states
        )));
    }
    let n_frames = data.n_frames();
    if n_frames == 0 {
        return Err(Error::invalid("count spectrogram has zero frames"));
    }
    let joint_states = mixture.enumerate_joint_states();
    let active_elements: Vec<Vec<usize>> = joint_states
        .iter()
        .map(|states| {
            let mut active = Vec::new();
            for (s, &n) in states.iter().enumerate() {
                active.extend(mixture.block(s, n));
            }
            active
        })
        .collect();
    let slots = active_elements[0].len();
    Ok(ExactState {
        joint_chain: mixture.joint_chain()?,
        joint_states,
        active_elements,
        weights: Array3::from_elem((n_frames, j_count, slots), 1.0 / slots as f64),
        joint_marginals: Array2::zeros((n_frames, j_count)),
        log_likelihood: Vec::new(),
    })
}

/// One exact-EM iteration: a single multiplicative weight update per
/// `(frame, joint state)`, then forward-backward over the joint lattice.
/// Returns the data log-likelihood, which is non-decreasing across calls.
pub fn exact_step(
    state: &mut ExactState,
    mixture: &MixtureModel,
    data: &CountSpectrogram,
) -> Result<f64> {
    let n_frames = data.n_frames();
    let j_count = state.joint_states.len();
    let slots = state.active_elements[0].len();
    let n_bins = data.n_bins();
    let values = data.values();
    let beta = mixture.beta_all();
    let active = &state.active_elements;

    state
        .weights
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(j_count * slots)
        .enumerate()
        .map(|(t, frame)| {
            if data.frame_totals()[t] == 0.0 {
                return Ok(());
            }
            for (j, w) in frame.chunks_mut(slots).enumerate() {
                let mut updated = vec![0.0f64; slots];
                for l in 0..n_bins {
                    let v = values[(l, t)];
                    if v == 0.0 {
                        continue;
                    }
                    let mut denom = 0.0;
                    for (slot, &k) in active[j].iter().enumerate() {
                        denom += w[slot] * beta[(l, k)];
                    }
                    if denom <= 0.0 {
                        return Err(Error::invalid(format!(
                            "joint state {j} has no support at observed bin {l}, frame {t}"
                        )));
                    }
                    for (slot, &k) in active[j].iter().enumerate() {
                        updated[slot] += v * w[slot] * beta[(l, k)] / denom;
                    }
                }
                let sum: f64 = updated.iter().sum();
                for (slot, u) in updated.iter().enumerate() {
                    w[slot] = u / sum;
                }
            }
            Ok(())
        })
        .collect::<Result<Vec<_>>>()?;

    // E pass with the fresh weights keeps the stored posterior consistent.
    let mut log_lik = Array2::<f64>::zeros((n_frames, j_count));
    log_lik
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(j_count)
        .enumerate()
        .for_each(|(t, row)| {
            for (j, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..n_bins {
                    let v = values[(l, t)];
                    if v == 0.0 {
                        continue;
                    }
                    let mut mix = 0.0;
                    for (slot, &k) in active[j].iter().enumerate() {
                        mix += state.weights[(t, j, slot)] * beta[(l, k)];
                    }
                    acc += v * mix.ln();
                }
                *out = acc;
            }
        });
    let post = forward_backward(&log_lik, &state.joint_chain)?;
    state.joint_marginals = post.marginals;
    state.log_likelihood.push(post.log_evidence);
    Ok(post.log_evidence)
}

/// Exact joint-lattice EM to convergence, using the same stopping rule as
/// [`vi_infer`] on the log-likelihood trace.
pub fn exact_infer(
    mixture: &MixtureModel,
    data: &CountSpectrogram,
    config: &ExactConfig,
) -> Result<ExactState> {
    let mut state = exact_init(mixture, data, config)?;
    let mut prev: Option<f64> = None;
    for _ in 0..config.max_iters.max(1) {
        let ll = exact_step(&mut state, mixture, data)?;
        if let Some(p) = prev {
            let rel = (ll - p).abs() / p.abs().max(1e-12);
            if rel < config.rel_tol {
                break;
            }
        }
        prev = Some(ll);
    }
    Ok(state)
}

/// Persist the Dirichlet parameters and per-source state marginals.
pub fn save_posterior(path: impl AsRef<Path>, state: &VariationalState) -> Result<()> {
    let path = path.as_ref();
    let mut w = ContainerWriter::create(path, POSTERIOR_MAGIC)?;
    let (n_frames, k_total) = state.alpha_hat.dim();
    w.write_u64(n_frames as u64)?;
    w.write_u64(k_total as u64)?;
    w.write_u64(state.d_hat.len() as u64)?;
    w.write_f64_slice(state.alpha_hat.as_slice().expect("row-major layout"))?;
    for d in &state.d_hat {
        w.write_u64(d.ncols() as u64)?;
        w.write_f64_slice(d.as_slice().expect("row-major layout"))?;
    }
    w.finish()
}

/// Load a posterior dump: Dirichlet parameters plus per-source marginals.
pub fn load_posterior(path: impl AsRef<Path>) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let path = path.as_ref();
    let mut r = ContainerReader::open(path, POSTERIOR_MAGIC)?;
    let n_frames = r.read_dim("frames")?;
    let k_total = r.read_dim("k_total")?;
    let n_sources = r.read_dim("sources")?;
    let alpha = r.read_f64_vec(n_frames * k_total)?;
    let alpha_hat = Array2::from_shape_vec((n_frames, k_total), alpha)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut d_hat = Vec::with_capacity(n_sources);
    for _ in 0..n_sources {
        let n_dicts = r.read_dim("n_dicts")?;
        let d = r.read_f64_vec(n_frames * n_dicts)?;
        d_hat.push(
            Array2::from_shape_vec((n_frames, n_dicts), d)
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?,
        );
    }
    Ok((alpha_hat, d_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nhmm::ModelDims;
    use ndarray::array;

    fn two_source_mixture(gamma: f64) -> MixtureModel {
        let a = SourceModel::init(
            ModelDims {
                n_dicts: 2,
                n_elems: 1,
                n_bins: 4,
            },
            1,
        )
        .unwrap();
        let b = SourceModel::init(
            ModelDims {
                n_dicts: 2,
                n_elems: 1,
                n_bins: 4,
            },
            2,
        )
        .unwrap();
        combine(vec![a, b], gamma).unwrap()
    }

    #[test]
    fn digamma_reference_values() {
        // psi(1) = -Euler-Mascheroni.
        let gamma_em = 0.577_215_664_901_532_9_f64;
        assert!((digamma(1.0) + gamma_em).abs() < 1e-12);
        assert!((digamma(2.0) - (1.0 - gamma_em)).abs() < 1e-12);
        // psi(1/2) = -gamma - 2 ln 2.
        let half = -gamma_em - 2.0 * 2.0_f64.ln();
        assert!((digamma(0.5) - half).abs() < 1e-12);
        // psi(100) = -gamma + H_99.
        let h99: f64 = (1..100).map(|k| 1.0 / k as f64).sum();
        assert!((digamma(100.0) - (h99 - gamma_em)).abs() < 1e-10);
        // Truncated asymptotic form is good to about 1e-4 here.
        assert!((digamma(100.0) - (100.0_f64.ln() - 1.0 / 200.0)).abs() < 1e-4);
    }

    #[test]
    fn digamma_recurrence() {
        let mut x = 0.13;
        while x < 40.0 {
            let lhs = digamma(x + 1.0);
            let rhs = digamma(x) + 1.0 / x;
            assert!((lhs - rhs).abs() < 1e-10, "x = {x}");
            x += 0.37;
        }
    }

    #[test]
    #[should_panic]
    fn digamma_rejects_non_positive() {
        digamma(0.0);
    }

    #[test]
    fn combine_layout_and_counts() {
        let mixture = two_source_mixture(1.0);
        assert_eq!(mixture.k_total(), 4);
        assert_eq!(mixture.joint_state_count().unwrap(), 4);
        // Source-major blocks: source 0 owns elements 0..2, source 1 owns 2..4.
        assert_eq!(mixture.block(0, 0), 0..1);
        assert_eq!(mixture.block(0, 1), 1..2);
        assert_eq!(mixture.block(1, 0), 2..3);
        assert_eq!(mixture.block(1, 1), 3..4);
        // Every element belongs to exactly one (source, state) block.
        for k in 0..4 {
            let owners: f64 = (0..2).map(|s| mixture.mask(s).column(k).sum()).sum();
            assert_eq!(owners, 1.0);
        }
        // Columns of the concatenated dictionary are normalized.
        for k in 0..4 {
            let sum: f64 = mixture.beta_all().column(k).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_mixed_dims() {
        let a = SourceModel::init(
            ModelDims {
                n_dicts: 2,
                n_elems: 3,
                n_bins: 5,
            },
            3,
        )
        .unwrap();
        let b = SourceModel::init(
            ModelDims {
                n_dicts: 3,
                n_elems: 2,
                n_bins: 5,
            },
            4,
        )
        .unwrap();
        let mixture = combine(vec![a, b], 1.0).unwrap();
        assert_eq!(mixture.k_total(), 12);
        for s in 0..2 {
            let dims = mixture.source(s).dims();
            for n in 0..dims.n_dicts {
                let row_sum: f64 = mixture.mask(s).row(n).sum();
                assert_eq!(row_sum, dims.n_elems as f64);
            }
        }
    }

    #[test]
    fn combine_rejects_bin_mismatch_and_empty() {
        let a = SourceModel::init(
            ModelDims {
                n_dicts: 1,
                n_elems: 1,
                n_bins: 4,
            },
            0,
        )
        .unwrap();
        let b = SourceModel::init(
            ModelDims {
                n_dicts: 1,
                n_elems: 1,
                n_bins: 5,
            },
            0,
        )
        .unwrap();
        assert!(combine(vec![a.clone(), b], 1.0).is_err());
        assert!(combine(vec![], 1.0).is_err());
        assert!(combine(vec![a], -0.5).is_err());
    }

    #[test]
    fn prior_alpha_examples() {
        let mixture = two_source_mixture(0.0);
        assert_eq!(mixture.prior_alpha(&[0, 1]).unwrap(), vec![1.0; 4]);

        let mixture = two_source_mixture(1.0);
        assert_eq!(
            mixture.prior_alpha(&[0, 1]).unwrap(),
            vec![2.0, 1.0, 1.0, 2.0]
        );

        let mixture = two_source_mixture(3.0);
        assert_eq!(
            mixture.prior_alpha(&[0, 1]).unwrap(),
            vec![4.0, 1.0, 1.0, 4.0]
        );
        assert!(mixture.prior_alpha(&[0, 2]).is_err());
        assert!(mixture.prior_alpha(&[0]).is_err());
    }

    #[test]
    fn update_alpha_zero_data_reduces_to_smoothed_prior() {
        let mixture = two_source_mixture(1.0);
        let data =
            CountSpectrogram::from_values(Array2::zeros((4, 3))).unwrap();
        let mut state = VariationalState::init(&mixture, &data).unwrap();
        update_alpha(&mut state, &mixture, &data).unwrap();
        // Uniform d over two states: alpha = 0 + 1 * 0.5 + 1.
        for v in state.alpha_hat.iter() {
            assert!((v - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn update_alpha_hand_case() {
        // One bin, two single-state single-element sources.
        let mut d0 = Array3::zeros((1, 1, 1));
        d0[(0, 0, 0)] = 1.0;
        let a = SourceModel::new(d0.clone(), ChainParams::uniform(1)).unwrap();
        let b = SourceModel::new(d0, ChainParams::uniform(1)).unwrap();
        let mixture = combine(vec![a, b], 1.0).unwrap();

        let data = CountSpectrogram::from_values(array![[4.0]]).unwrap();
        let mut state = VariationalState::init(&mixture, &data).unwrap();
        // Force z to split mass evenly; d is already a point mass per source.
        state.z_hat.fill(0.5);
        update_alpha(&mut state, &mixture, &data).unwrap();
        // alpha = 4 * 0.5 + 1 * 1 + 1 = 4 for each source's element.
        assert!((state.alpha_hat[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((state.alpha_hat[(0, 1)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn update_alpha_is_linear_in_counts() {
        let mixture = two_source_mixture(1.0);
        let values = Array2::from_shape_fn((4, 2), |(l, t)| (l + t + 1) as f64);
        let data = CountSpectrogram::from_values(values.clone()).unwrap();
        let scaled = CountSpectrogram::from_values(values * 10.0).unwrap();

        let mut state = VariationalState::init(&mixture, &data).unwrap();
        let z = state.z_hat.clone();
        let d = state.d_hat.clone();
        update_alpha(&mut state, &mixture, &data).unwrap();
        let alpha_base = state.alpha_hat.clone();

        let mut state10 = VariationalState::init(&mixture, &scaled).unwrap();
        state10.z_hat = z;
        state10.d_hat = d;
        update_alpha(&mut state10, &mixture, &scaled).unwrap();

        // Data term scales by 10, prior term (here 1.5 total) does not.
        for (a, b) in alpha_base.iter().zip(state10.alpha_hat.iter()) {
            let data_term = a - 1.5;
            assert!((b - (10.0 * data_term + 1.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn update_z_uniform_symmetry_and_single_element() {
        // Uniform beta and equal alpha: responsibilities are uniform.
        let mut dicts = Array3::zeros((1, 2, 4));
        for z in 0..2 {
            for l in 0..4 {
                dicts[(0, z, l)] = 0.25;
            }
        }
        let a = SourceModel::new(dicts, ChainParams::uniform(1)).unwrap();
        let mixture = combine(vec![a], 1.0).unwrap();
        let data = CountSpectrogram::from_values(Array2::from_elem((4, 2), 1.0)).unwrap();
        let state = VariationalState::init(&mixture, &data).unwrap();
        for v in state.z_hat.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }

        // Single element: responsibility is exactly one.
        let mut single = Array3::zeros((1, 1, 3));
        for l in 0..3 {
            single[(0, 0, l)] = 1.0 / 3.0;
        }
        let b = SourceModel::new(single, ChainParams::uniform(1)).unwrap();
        let mixture = combine(vec![b], 1.0).unwrap();
        let data = CountSpectrogram::from_values(Array2::from_elem((3, 2), 2.0)).unwrap();
        let state = VariationalState::init(&mixture, &data).unwrap();
        for v in state.z_hat.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn update_z_equal_alpha_recovers_beta_ratios() {
        // Two elements with beta_l = (0.8, 0.2) at every bin and equal alpha:
        // the digamma terms cancel and z follows beta.
        let mut dicts = Array3::zeros((2, 1, 2));
        dicts[(0, 0, 0)] = 0.8;
        dicts[(0, 0, 1)] = 0.2;
        dicts[(1, 0, 0)] = 0.2;
        dicts[(1, 0, 1)] = 0.8;
        let chain = ChainParams::uniform(2);
        let a = SourceModel::new(dicts, chain).unwrap();
        let mixture = combine(vec![a], 1.0).unwrap();
        let data = CountSpectrogram::from_values(Array2::from_elem((2, 1), 1.0)).unwrap();
        let mut state = VariationalState::init(&mixture, &data).unwrap();
        state.alpha_hat.fill(2.5);
        update_z(&mut state, &mixture, &data).unwrap();
        assert!((state.z_hat[(0, 0, 0)] - 0.8).abs() < 1e-12);
        assert!((state.z_hat[(0, 0, 1)] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn update_z_zero_support_is_an_error() {
        // Both elements are point masses on bin 0, but bin 1 is observed.
        let mut dicts = Array3::zeros((1, 2, 2));
        dicts[(0, 0, 0)] = 1.0;
        dicts[(0, 1, 0)] = 1.0;
        let a = SourceModel::new(dicts, ChainParams::uniform(1)).unwrap();
        let mixture = combine(vec![a], 1.0).unwrap();
        let data =
            CountSpectrogram::from_values(array![[1.0], [2.0]]).unwrap();
        assert!(VariationalState::init(&mixture, &data).is_err());
    }

    #[test]
    fn surrogate_symmetry_and_concentration() {
        let mixture = two_source_mixture(1.0);
        let data = CountSpectrogram::from_values(Array2::from_elem((4, 3), 1.0)).unwrap();
        let mut state = VariationalState::init(&mixture, &data).unwrap();

        state.alpha_hat.fill(2.0);
        let phi = surrogate_likelihood(&state, &mixture, 0).unwrap();
        for t in 0..3 {
            assert!((phi[(t, 0)] - phi[(t, 1)]).abs() < 1e-12);
        }

        // Concentrate mass on dictionary 1 of source 0 (element index 1).
        state.alpha_hat.fill(1.0);
        for t in 0..3 {
            state.alpha_hat[(t, 1)] = 6.0;
        }
        let phi = surrogate_likelihood(&state, &mixture, 0).unwrap();
        for t in 0..3 {
            assert!(phi[(t, 1)] > phi[(t, 0)]);
        }

        // A constant shift changes phi but not the per-frame ordering.
        let before = surrogate_likelihood(&state, &mixture, 0).unwrap();
        state.alpha_hat.mapv_inplace(|v| v + 2.0);
        let after = surrogate_likelihood(&state, &mixture, 0).unwrap();
        for t in 0..3 {
            assert!(
                (before[(t, 1)] > before[(t, 0)]) == (after[(t, 1)] > after[(t, 0)]),
                "ordering changed at frame {t}"
            );
            assert!((before[(t, 0)] - after[(t, 0)]).abs() > 1e-9);
        }
    }

    #[test]
    fn cross_entropy_hand_cases() {
        // Perfect reconstruction of a point-mass spectrum.
        let mut dicts = Array3::zeros((1, 1, 2));
        dicts[(0, 0, 0)] = 1.0;
        let a = SourceModel::new(dicts, ChainParams::uniform(1)).unwrap();
        let mixture = combine(vec![a], 1.0).unwrap();
        let data = CountSpectrogram::from_values(array![[5.0], [0.0]]).unwrap();
        let state = VariationalState::init(&mixture, &data).unwrap();
        assert_eq!(reconstruction_cross_entropy(&state, &mixture, &data), 0.0);

        // Uniform reconstruction gives ln L regardless of the data.
        let l_bins = 4usize;
        let mut dicts = Array3::zeros((1, 1, l_bins));
        for l in 0..l_bins {
            dicts[(0, 0, l)] = 0.25;
        }
        let a = SourceModel::new(dicts, ChainParams::uniform(1)).unwrap();
        let mixture = combine(vec![a], 1.0).unwrap();
        let data =
            CountSpectrogram::from_values(array![[3.0], [0.5], [2.0], [1.5]]).unwrap();
        let state = VariationalState::init(&mixture, &data).unwrap();
        let h = reconstruction_cross_entropy(&state, &mixture, &data);
        assert!((h - (l_bins as f64).ln()).abs() < 1e-12);

        // Two orthogonal elements with alpha = (3, 1) and V = (2, 2).
        let mut dicts = Array3::zeros((2, 1, 2));
        dicts[(0, 0, 0)] = 1.0;
        dicts[(1, 0, 1)] = 1.0;
        let a = SourceModel::new(dicts, ChainParams::uniform(2)).unwrap();
        let mixture = combine(vec![a], 1.0).unwrap();
        let data = CountSpectrogram::from_values(array![[2.0], [2.0]]).unwrap();
        let mut state = VariationalState::init(&mixture, &data).unwrap();
        state.alpha_hat[(0, 0)] = 3.0;
        state.alpha_hat[(0, 1)] = 1.0;
        let h = reconstruction_cross_entropy(&state, &mixture, &data);
        let expect = -(2.0 * 0.75_f64.ln() + 2.0 * 0.25_f64.ln()) / 4.0;
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_reports_infinity_on_zero_mass() {
        // An observed bin with no reconstructed mass is reported as +inf
        // rather than poisoning the trace with NaN.
        let beta = array![[1.0], [0.0]];
        let weights = array![[1.0]];
        let data = CountSpectrogram::from_values(array![[1.0], [3.0]]).unwrap();
        assert_eq!(weights_cross_entropy(&weights, &beta, &data), f64::INFINITY);

        // No data at all is a zero, not a NaN.
        let empty = CountSpectrogram::from_values(Array2::zeros((2, 1))).unwrap();
        assert_eq!(weights_cross_entropy(&weights, &beta, &empty), 0.0);
    }

    #[test]
    fn vi_single_source_state_posterior_matches_forward_backward() {
        let source = SourceModel::init(
            ModelDims {
                n_dicts: 2,
                n_elems: 2,
                n_bins: 5,
            },
            17,
        )
        .unwrap();
        let (data, _) = crate::nhmm::sample(&source, 12, 60, 3).unwrap();
        let mixture = combine(vec![source], 1.0).unwrap();
        let state = vi_infer(&mixture, &data, &ViConfig::default()).unwrap();

        // The stored marginals must be the forward-backward smoothing of the
        // stored surrogate likelihoods.
        let post = forward_backward(&state.phi_hat[0], mixture.source(0).chain()).unwrap();
        for (a, b) in state.d_hat[0].iter().zip(post.marginals.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(!state.monitor.is_empty());
        assert!(state.monitor.iter().all(|h| h.is_finite()));
    }

    #[test]
    fn vi_disjoint_sources_attribute_weight_correctly() {
        // Source 0 lives in bins 0..3, source 1 in bins 3..6.
        let mut d0 = Array3::zeros((2, 1, 6));
        d0[(0, 0, 0)] = 0.6;
        d0[(0, 0, 1)] = 0.4;
        d0[(1, 0, 1)] = 0.5;
        d0[(1, 0, 2)] = 0.5;
        let mut d1 = Array3::zeros((2, 1, 6));
        d1[(0, 0, 3)] = 0.7;
        d1[(0, 0, 4)] = 0.3;
        d1[(1, 0, 4)] = 0.2;
        d1[(1, 0, 5)] = 0.8;
        let a = SourceModel::new(d0, ChainParams::uniform(2)).unwrap();
        let b = SourceModel::new(d1, ChainParams::uniform(2)).unwrap();

        // Only source 0 is active in the data.
        let (data, _) = crate::nhmm::sample(&a, 10, 200, 9).unwrap();
        let mut values = Array2::zeros((6, 10));
        for l in 0..6 {
            for t in 0..10 {
                values[(l, t)] = data.values()[(l, t)];
            }
        }
        let data = CountSpectrogram::from_values(values).unwrap();

        let mixture = combine(vec![a, b], 1.0).unwrap();
        let state = vi_infer(&mixture, &data, &ViConfig::default()).unwrap();
        let weights = state.expected_weights();
        for t in 0..10 {
            let source0: f64 = (0..2).map(|k| weights[(t, k)]).sum();
            assert!(
                source0 >= 0.95,
                "frame {t}: only {source0:.3} of the weight on the active source"
            );
        }
    }

    #[test]
    fn exact_two_single_state_sources_match_flat_weight_estimation() {
        // With one joint state the lattice is trivial and the weight update
        // is plain per-frame EM over the concatenated dictionary.
        let mut d0 = Array3::zeros((1, 2, 3));
        d0[(0, 0, 0)] = 0.7;
        d0[(0, 0, 1)] = 0.3;
        d0[(0, 1, 1)] = 0.4;
        d0[(0, 1, 2)] = 0.6;
        let mut d1 = Array3::zeros((1, 1, 3));
        d1[(0, 0, 0)] = 0.2;
        d1[(0, 0, 2)] = 0.8;
        let a = SourceModel::new(d0, ChainParams::uniform(1)).unwrap();
        let b = SourceModel::new(d1, ChainParams::uniform(1)).unwrap();
        let mixture = combine(vec![a, b], 1.0).unwrap();
        assert_eq!(mixture.joint_state_count().unwrap(), 1);

        let values = array![[4.0, 1.0], [2.0, 2.0], [1.0, 5.0]];
        let data = CountSpectrogram::from_values(values).unwrap();
        let config = ExactConfig {
            max_iters: 40,
            rel_tol: 0.0,
            ..ExactConfig::default()
        };
        let state = exact_infer(&mixture, &data, &config).unwrap();

        let plca = crate::plca::plca_separate(
            mixture.beta_all(),
            &data,
            &crate::plca::PlcaConfig {
                max_iters: 40,
                rel_tol: 0.0,
            },
        )
        .unwrap();
        let exact_weights = state.expected_weights(&mixture);
        for (a, b) in exact_weights.iter().zip(plca.weights.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_lattice_guard() {
        let mixture = two_source_mixture(1.0);
        let data = CountSpectrogram::from_values(Array2::from_elem((4, 3), 1.0)).unwrap();
        let config = ExactConfig {
            max_joint_states: 3,
            ..ExactConfig::default()
        };
        let err = exact_init(&mixture, &data, &config).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn exact_log_likelihood_is_non_decreasing() {
        let mixture = two_source_mixture(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = Array2::from_shape_fn((4, 8), |_| (rng.random::<f64>() * 7.0).floor());
        let data = CountSpectrogram::from_values(values).unwrap();
        let config = ExactConfig {
            max_iters: 25,
            rel_tol: 0.0,
            ..ExactConfig::default()
        };
        let state = exact_infer(&mixture, &data, &config).unwrap();
        for pair in state.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn posterior_dump_round_trip() {
        let mixture = two_source_mixture(1.0);
        let values = Array2::from_shape_fn((4, 5), |(l, t)| ((l * 7 + t * 3) % 5) as f64);
        let data = CountSpectrogram::from_values(values).unwrap();
        let state = vi_infer(&mixture, &data, &ViConfig::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posterior.nfp");
        save_posterior(&path, &state).unwrap();
        let (alpha, d_hat) = load_posterior(&path).unwrap();
        for (a, b) in state.alpha_hat.iter().zip(alpha.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(d_hat.len(), 2);
        for (mine, theirs) in state.d_hat.iter().zip(&d_hat) {
            for (a, b) in mine.iter().zip(theirs.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn vi_invariants_hold_after_each_step() {
        let mixture = two_source_mixture(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let values = Array2::from_shape_fn((4, 6), |_| (rng.random::<f64>() * 5.0).floor());
        let data = CountSpectrogram::from_values(values).unwrap();
        let mut state = VariationalState::init(&mixture, &data).unwrap();
        for _ in 0..6 {
            vi_step(&mut state, &mixture, &data).unwrap();
            for v in state.alpha_hat.iter() {
                assert!(*v >= 1.0, "alpha below one: {v}");
            }
            for t in 0..data.n_frames() {
                for l in 0..4 {
                    let sum: f64 = (0..mixture.k_total())
                        .map(|k| state.z_hat[(t, l, k)])
                        .sum();
                    assert!((sum - 1.0).abs() < 1e-10);
                }
            }
            for d in &state.d_hat {
                for row in d.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
