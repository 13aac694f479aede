//! Independent reference implementations shared by the integration suites:
//! brute-force path enumeration for chain posteriors, straightforward
//! triple-loop evaluations of the variational updates, a long-run PLCA EM,
//! and a profile-likelihood enumeration oracle for the joint lattice.

#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nfhmm::digamma;
use nfhmm::factorial::{combine, MixtureModel, VariationalState};
use nfhmm::hmm::ChainParams;
use nfhmm::nhmm::{ModelDims, SourceModel};
use nfhmm::signal::CountSpectrogram;

pub struct EnumPosterior {
    pub marginals: Array2<f64>,
    pub pairwise: Array3<f64>,
    pub log_evidence: f64,
}

/// Smoothed posteriors by exhaustive enumeration of all `N^T` state paths.
pub fn enumerate_forward_backward(log_lik: &Array2<f64>, params: &ChainParams) -> EnumPosterior {
    let t_len = log_lik.nrows();
    let n = params.n_states();
    let row_max: Vec<f64> = (0..t_len)
        .map(|t| {
            log_lik
                .row(t)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let path_count = n.pow(t_len as u32);
    let mut marginals = Array2::<f64>::zeros((t_len, n));
    let mut pairwise = Array3::<f64>::zeros((t_len.saturating_sub(1), n, n));
    let mut total = 0.0f64;
    let mut path = vec![0usize; t_len];
    for mut code in 0..path_count {
        for slot in path.iter_mut() {
            *slot = code % n;
            code /= n;
        }
        let mut weight = params.initial()[path[0]] * (log_lik[(0, path[0])] - row_max[0]).exp();
        for t in 1..t_len {
            weight *= params.transition()[(path[t], path[t - 1])]
                * (log_lik[(t, path[t])] - row_max[t]).exp();
        }
        if weight == 0.0 {
            continue;
        }
        total += weight;
        for t in 0..t_len {
            marginals[(t, path[t])] += weight;
        }
        for t in 0..t_len - 1 {
            pairwise[(t, path[t], path[t + 1])] += weight;
        }
    }
    marginals.mapv_inplace(|v| v / total);
    pairwise.mapv_inplace(|v| v / total);
    let log_evidence = total.ln() + row_max.iter().sum::<f64>();
    EnumPosterior {
        marginals,
        pairwise,
        log_evidence,
    }
}

/// Direct evaluation of the Dirichlet-parameter update with explicit mask
/// sums, no shortcuts.
pub fn naive_update_alpha(
    state: &VariationalState,
    mixture: &MixtureModel,
    data: &CountSpectrogram,
) -> Array2<f64> {
    let n_frames = state.alpha_hat.nrows();
    let k_total = mixture.k_total();
    let n_bins = mixture.n_bins();
    let mut out = Array2::<f64>::zeros((n_frames, k_total));
    for t in 0..n_frames {
        for k in 0..k_total {
            let mut acc = 0.0;
            for l in 0..n_bins {
                acc += data.values()[(l, t)] * state.z_hat[(t, l, k)];
            }
            for s in 0..mixture.n_sources() {
                for n in 0..mixture.source(s).dims().n_dicts {
                    acc += mixture.gamma() * state.d_hat[s][(t, n)] * mixture.mask(s)[(n, k)];
                }
            }
            out[(t, k)] = acc + 1.0;
        }
    }
    out
}

/// Direct evaluation of the responsibility update in the linear domain.
pub fn naive_update_z(state: &VariationalState, mixture: &MixtureModel) -> Array3<f64> {
    let n_frames = state.alpha_hat.nrows();
    let k_total = mixture.k_total();
    let n_bins = mixture.n_bins();
    let beta = mixture.beta_all();
    let mut out = Array3::<f64>::zeros((n_frames, n_bins, k_total));
    for t in 0..n_frames {
        let alpha_sum: f64 = (0..k_total).map(|k| state.alpha_hat[(t, k)]).sum();
        for l in 0..n_bins {
            let mut denom = 0.0;
            for k in 0..k_total {
                let v = beta[(l, k)]
                    * (digamma(state.alpha_hat[(t, k)]) - digamma(alpha_sum)).exp();
                out[(t, l, k)] = v;
                denom += v;
            }
            for k in 0..k_total {
                out[(t, l, k)] /= denom;
            }
        }
    }
    out
}

/// Direct evaluation of the surrogate log-likelihoods via the mask.
pub fn naive_surrogate(
    state: &VariationalState,
    mixture: &MixtureModel,
    source: usize,
) -> Array2<f64> {
    let n_frames = state.alpha_hat.nrows();
    let k_total = mixture.k_total();
    let n_dicts = mixture.source(source).dims().n_dicts;
    let mut out = Array2::<f64>::zeros((n_frames, n_dicts));
    for t in 0..n_frames {
        let alpha_sum: f64 = (0..k_total).map(|k| state.alpha_hat[(t, k)]).sum();
        for n in 0..n_dicts {
            let mut acc = 0.0;
            for k in 0..k_total {
                acc += mixture.mask(source)[(n, k)]
                    * (digamma(state.alpha_hat[(t, k)]) - digamma(alpha_sum));
            }
            out[(t, n)] = acc;
        }
    }
    out
}

/// Frame-by-frame fixed-dictionary EM run for a fixed iteration count.
pub fn reference_plca(beta: &Array2<f64>, data: &CountSpectrogram, iters: usize) -> Array2<f64> {
    let k_total = beta.ncols();
    let n_bins = beta.nrows();
    let n_frames = data.n_frames();
    let mut weights = Array2::<f64>::from_elem((n_frames, k_total), 1.0 / k_total as f64);
    for _ in 0..iters {
        for t in 0..n_frames {
            if data.frame_totals()[t] == 0.0 {
                continue;
            }
            let mut updated = vec![0.0f64; k_total];
            for l in 0..n_bins {
                let v = data.values()[(l, t)];
                if v == 0.0 {
                    continue;
                }
                let mut denom = 0.0;
                for k in 0..k_total {
                    denom += weights[(t, k)] * beta[(l, k)];
                }
                for k in 0..k_total {
                    updated[k] += v * weights[(t, k)] * beta[(l, k)] / denom;
                }
            }
            let sum: f64 = updated.iter().sum();
            for k in 0..k_total {
                weights[(t, k)] = updated[k] / sum;
            }
        }
    }
    weights
}

/// Joint-state marginals by enumerating every joint state path, with the
/// per-(frame, joint state) mixture weights first fitted to convergence by
/// EM on that frame alone.
pub fn exact_joint_oracle(
    mixture: &MixtureModel,
    data: &CountSpectrogram,
    inner_iters: usize,
) -> Array2<f64> {
    let sources = mixture.sources();
    let s_count = sources.len();
    let state_counts: Vec<usize> = sources.iter().map(|m| m.dims().n_dicts).collect();
    let j_count: usize = state_counts.iter().product();
    let n_frames = data.n_frames();
    let n_bins = data.n_bins();
    let beta = mixture.beta_all();

    // Joint states in the same order as the library: last source fastest.
    let mut joint_states: Vec<Vec<usize>> = Vec::with_capacity(j_count);
    for mut code in 0..j_count {
        let mut states = vec![0usize; s_count];
        for s in (0..s_count).rev() {
            states[s] = code % state_counts[s];
            code /= state_counts[s];
        }
        joint_states.push(states);
    }

    // Profile log-likelihood per (frame, joint state).
    let mut profile = Array2::<f64>::zeros((n_frames, j_count));
    for (j, states) in joint_states.iter().enumerate() {
        let mut active: Vec<usize> = Vec::new();
        for (s, &n) in states.iter().enumerate() {
            active.extend(mixture.block(s, n));
        }
        for t in 0..n_frames {
            let mut w = vec![1.0 / active.len() as f64; active.len()];
            for _ in 0..inner_iters {
                let mut updated = vec![0.0f64; active.len()];
                for l in 0..n_bins {
                    let v = data.values()[(l, t)];
                    if v == 0.0 {
                        continue;
                    }
                    let mut denom = 0.0;
                    for (slot, &k) in active.iter().enumerate() {
                        denom += w[slot] * beta[(l, k)];
                    }
                    for (slot, &k) in active.iter().enumerate() {
                        updated[slot] += v * w[slot] * beta[(l, k)] / denom;
                    }
                }
                let sum: f64 = updated.iter().sum();
                if sum <= 0.0 {
                    break;
                }
                for (slot, u) in updated.iter().enumerate() {
                    w[slot] = u / sum;
                }
            }
            let mut ll = 0.0;
            for l in 0..n_bins {
                let v = data.values()[(l, t)];
                if v == 0.0 {
                    continue;
                }
                let mut mix = 0.0;
                for (slot, &k) in active.iter().enumerate() {
                    mix += w[slot] * beta[(l, k)];
                }
                ll += v * mix.ln();
            }
            profile[(t, j)] = ll;
        }
    }

    let row_max: Vec<f64> = (0..n_frames)
        .map(|t| {
            profile
                .row(t)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    // Enumerate all joint paths with chain probabilities built from the
    // per-source parameters directly.
    let path_count = j_count.pow(n_frames as u32);
    let mut marginals = Array2::<f64>::zeros((n_frames, j_count));
    let mut total = 0.0f64;
    let mut path = vec![0usize; n_frames];
    for mut code in 0..path_count {
        for slot in path.iter_mut() {
            *slot = code % j_count;
            code /= j_count;
        }
        let mut weight = 1.0f64;
        for (s, source) in sources.iter().enumerate() {
            weight *= source.chain().initial()[joint_states[path[0]][s]];
        }
        weight *= (profile[(0, path[0])] - row_max[0]).exp();
        for t in 1..n_frames {
            for (s, source) in sources.iter().enumerate() {
                weight *= source.chain().transition()
                    [(joint_states[path[t]][s], joint_states[path[t - 1]][s])];
            }
            weight *= (profile[(t, path[t])] - row_max[t]).exp();
        }
        if weight == 0.0 {
            continue;
        }
        total += weight;
        for t in 0..n_frames {
            marginals[(t, path[t])] += weight;
        }
    }
    marginals.mapv_inplace(|v| v / total);
    marginals
}

/// Random column-stochastic chain.
pub fn random_chain(rng: &mut ChaCha8Rng, n: usize) -> ChainParams {
    let mut transition = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut col = vec![0.0f64; n];
        let mut sum = 0.0;
        for c in col.iter_mut() {
            *c = 0.05 + rng.random::<f64>();
            sum += *c;
        }
        for (i, c) in col.iter().enumerate() {
            transition[(i, j)] = c / sum;
        }
    }
    let mut initial = vec![0.0f64; n];
    let mut sum = 0.0;
    for p in initial.iter_mut() {
        *p = 0.05 + rng.random::<f64>();
        sum += *p;
    }
    for p in initial.iter_mut() {
        *p /= sum;
    }
    ChainParams::new(transition, initial).unwrap()
}

/// Random source model with strictly positive normalized elements.
pub fn random_source(rng: &mut ChaCha8Rng, dims: ModelDims) -> SourceModel {
    let mut dictionaries = Array3::<f64>::zeros((dims.n_dicts, dims.n_elems, dims.n_bins));
    for d in 0..dims.n_dicts {
        for z in 0..dims.n_elems {
            let mut sum = 0.0;
            for l in 0..dims.n_bins {
                let v = 0.05 + rng.random::<f64>();
                dictionaries[(d, z, l)] = v;
                sum += v;
            }
            for l in 0..dims.n_bins {
                dictionaries[(d, z, l)] /= sum;
            }
        }
    }
    let chain = random_chain(rng, dims.n_dicts);
    SourceModel::new(dictionaries, chain).unwrap()
}

/// Random two-source mixture with `K_total <= 12` and a random count matrix.
pub fn random_small_instance(
    rng: &mut ChaCha8Rng,
) -> (MixtureModel, CountSpectrogram, VariationalState) {
    let n_bins = 2 + rng.random_range(0..7usize);
    let n_frames = 1 + rng.random_range(0..5usize);
    let dims_a = ModelDims {
        n_dicts: 1 + rng.random_range(0..3usize),
        n_elems: 1 + rng.random_range(0..2usize),
        n_bins,
    };
    let dims_b = ModelDims {
        n_dicts: 1 + rng.random_range(0..2usize),
        n_elems: 1 + rng.random_range(0..2usize),
        n_bins,
    };
    let a = random_source(rng, dims_a);
    let b = random_source(rng, dims_b);
    let gamma = rng.random::<f64>() * 3.0;
    let mixture = combine(vec![a, b], gamma).unwrap();

    let values = Array2::from_shape_fn((n_bins, n_frames), |_| {
        (rng.random::<f64>() * 6.0).floor()
    });
    let data = CountSpectrogram::from_values(values).unwrap();

    // Populate the posterior fields with valid random values.
    let k_total = mixture.k_total();
    let mut state = VariationalState::init(&mixture, &data).unwrap();
    for t in 0..n_frames {
        for k in 0..k_total {
            state.alpha_hat[(t, k)] = 1.0 + rng.random::<f64>() * 5.0;
        }
        for l in 0..n_bins {
            let mut sum = 0.0;
            for k in 0..k_total {
                let v = 0.01 + rng.random::<f64>();
                state.z_hat[(t, l, k)] = v;
                sum += v;
            }
            for k in 0..k_total {
                state.z_hat[(t, l, k)] /= sum;
            }
        }
    }
    for s in 0..mixture.n_sources() {
        let n_dicts = mixture.source(s).dims().n_dicts;
        for t in 0..n_frames {
            let mut sum = 0.0;
            let mut row = vec![0.0f64; n_dicts];
            for v in row.iter_mut() {
                *v = 0.01 + rng.random::<f64>();
                sum += *v;
            }
            for (n, v) in row.iter().enumerate() {
                state.d_hat[s][(t, n)] = v / sum;
            }
        }
    }
    (mixture, data, state)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff<'a, I, J>(a: I, b: J) -> f64
where
    I: IntoIterator<Item = &'a f64>,
    J: IntoIterator<Item = &'a f64>,
{
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
