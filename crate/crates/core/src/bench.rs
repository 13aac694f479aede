//! Per-iteration wall-time comparison of the variational and exact engines
//! across a sweep of dictionary counts. Measurements interleave the two
//! engines so background load biases neither side.

use std::time::Instant;

use crate::error::Result;
use crate::factorial::{
    combine, exact_init, exact_step, vi_step, ExactConfig, MixtureModel, VariationalState,
};
use crate::nhmm::ModelDims;
use crate::signal::CountSpectrogram;
use crate::synth::{make_source_pair, sample_mixture, SynthOptions};

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Dictionary counts to sweep.
    pub n_dicts_sweep: Vec<usize>,
    pub n_elems: usize,
    pub n_bins: usize,
    pub frames: usize,
    pub quanta_per_frame: usize,
    /// Timed iterations per engine (after one warmup iteration each).
    pub reps: usize,
    pub gamma: f64,
    pub seed: u64,
    pub max_joint_states: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            n_dicts_sweep: vec![2, 5, 10, 20],
            n_elems: 30,
            n_bins: 30,
            frames: 100,
            quanta_per_frame: 200,
            reps: 5,
            gamma: 1.0,
            seed: 0,
            max_joint_states: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub n_dicts: usize,
    pub n_elems: usize,
    pub frames: usize,
    pub vi_seconds_per_iter: f64,
    pub exact_seconds_per_iter: f64,
    pub ratio: f64,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Median per-iteration seconds for both engines on one synthetic mixture.
pub fn bench_point(
    mixture: &MixtureModel,
    data: &CountSpectrogram,
    reps: usize,
    max_joint_states: usize,
) -> Result<(f64, f64)> {
    let mut vi_state = VariationalState::init(mixture, data)?;
    let exact_config = ExactConfig {
        max_joint_states,
        ..ExactConfig::default()
    };
    let mut exact_state = exact_init(mixture, data, &exact_config)?;

    // Warmup pass for both engines.
    vi_step(&mut vi_state, mixture, data)?;
    exact_step(&mut exact_state, mixture, data)?;

    let mut vi_times = Vec::with_capacity(reps);
    let mut exact_times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        vi_step(&mut vi_state, mixture, data)?;
        vi_times.push(start.elapsed().as_secs_f64());

        let start = Instant::now();
        exact_step(&mut exact_state, mixture, data)?;
        exact_times.push(start.elapsed().as_secs_f64());
    }
    Ok((median(vi_times), median(exact_times)))
}

/// Run the sweep, one row per dictionary count.
pub fn bench_sweep(opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(opts.n_dicts_sweep.len());
    for &n_dicts in &opts.n_dicts_sweep {
        let synth = SynthOptions {
            dims: ModelDims {
                n_dicts,
                n_elems: opts.n_elems,
                n_bins: opts.n_bins,
            },
            frames: opts.frames,
            quanta_per_frame: opts.quanta_per_frame,
            seed: opts.seed.wrapping_add(n_dicts as u64),
            ..SynthOptions::default()
        };
        let models = make_source_pair(&synth)?;
        let mixture_data = sample_mixture(&models, &synth)?;
        let mixture = combine(vec![models.0, models.1], opts.gamma)?;
        let (vi_sec, exact_sec) =
            bench_point(&mixture, &mixture_data.mixture, opts.reps, opts.max_joint_states)?;
        rows.push(BenchRow {
            n_dicts,
            n_elems: opts.n_elems,
            frames: opts.frames,
            vi_seconds_per_iter: vi_sec,
            exact_seconds_per_iter: exact_sec,
            ratio: exact_sec / vi_sec,
        });
    }
    Ok(rows)
}
