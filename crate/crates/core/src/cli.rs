//! Command-line pipeline: `train`, `separate`, `bench`, `synth`, and `eval`
//! subcommands over the library modules. Flags may also be supplied through
//! an optional `key=value` config file; explicit flags win.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::bench::{bench_sweep, BenchOptions};
use crate::bss_eval::{best_permutation, SepScores};
use crate::error::{Error, Result};
use crate::factorial::{
    combine, exact_init, exact_step, vi_step, ExactConfig, MixtureModel, VariationalState,
};
use crate::nhmm::{train_traced, ModelDims, SourceModel, TrainConfig};
use crate::plca::plca_step;
use crate::separation::separate_sources;
use crate::signal::{load_wav, stft, to_counts, write_wav, StftConfig, TimeSignal, WindowKind};
use crate::synth::{
    counts_to_signal, make_source_pair, sample_mixture, scale_to_rms, SynthOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "nfhmm",
    about = "Supervised audio source separation with factorial hidden Markov models",
    version
)]
pub struct Cli {
    /// Optional key=value config file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a source model from isolated training audio.
    Train(TrainArgs),
    /// Separate a mixture with previously trained source models.
    Separate(SeparateArgs),
    /// Compare per-iteration cost of the variational and exact engines.
    Bench(BenchArgs),
    /// Generate a synthetic two-source mixture with known ground truth.
    Synth(SynthArgs),
    /// Score separated estimates against reference signals.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algorithm {
    Vi,
    Exact,
    Plca,
}

impl Algorithm {
    fn as_str(self) -> &'static str {
        match self {
            Algorithm::Vi => "vi",
            Algorithm::Exact => "exact",
            Algorithm::Plca => "plca",
        }
    }
}

#[derive(Debug, Args)]
pub struct StftArgs {
    /// Analysis window length in samples.
    #[arg(long, value_name = "SAMPLES")]
    pub window_length: Option<usize>,
    /// Hop between frames in samples.
    #[arg(long, value_name = "SAMPLES")]
    pub hop_length: Option<usize>,
    /// FFT length in samples (>= window length).
    #[arg(long, value_name = "SAMPLES")]
    pub fft_length: Option<usize>,
    /// Window taper: hann or rect.
    #[arg(long, value_name = "KIND")]
    pub window: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training WAV files; multiple files are concatenated. Multichannel
    /// input uses channel 0.
    #[arg(required = true, value_name = "WAV")]
    pub inputs: Vec<PathBuf>,
    /// Number of dictionaries (Markov states).
    #[arg(long)]
    pub n_dicts: Option<usize>,
    /// Elements per dictionary.
    #[arg(long)]
    pub n_elems: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Initialization seed; required for reproducible training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Magnitude-to-counts gain.
    #[arg(long)]
    pub gain: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Model output path; defaults to `<out-dir>/<first input stem>.nfm`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write a human-readable dump of the model here.
    #[arg(long, value_name = "PATH")]
    pub export_text: Option<PathBuf>,
    #[command(flatten)]
    pub stft: StftArgs,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    /// Mixture WAV file; channel 0 of multichannel input is used.
    #[arg(value_name = "WAV")]
    pub mixture: PathBuf,
    /// Trained model files, one per source (at least two).
    #[arg(long = "model", required = true, value_name = "PATH")]
    pub models: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub algo: Option<Algorithm>,
    /// Dirichlet concentration over the active dictionary elements.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Optional jitter seed for the variational initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gain: Option<f64>,
    /// Refuse exact inference above this joint lattice size.
    #[arg(long)]
    pub max_joint_states: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Write the variational posterior parameters to this file (vi only).
    #[arg(long, value_name = "PATH")]
    pub dump_posterior: Option<PathBuf>,
    #[command(flatten)]
    pub stft: StftArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated dictionary counts to sweep.
    #[arg(long, value_name = "LIST")]
    pub n_sweep: Option<String>,
    #[arg(long)]
    pub n_elems: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub quanta: Option<usize>,
    /// Timed iterations per engine and sweep point.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_joint_states: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_dicts: Option<usize>,
    #[arg(long)]
    pub n_elems: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Sound quanta sampled per frame.
    #[arg(long)]
    pub quanta: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Level of the second source relative to the first, in dB.
    #[arg(long)]
    pub mix_db: Option<f64>,
    /// Give the two sources disjoint frequency halves.
    #[arg(long)]
    pub disjoint_support: bool,
    /// Near-deterministic cyclic dictionary transitions.
    #[arg(long)]
    pub strong_dynamics: bool,
    /// Dirichlet concentration of the spectral elements.
    #[arg(long)]
    pub element_concentration: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub stft: StftArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Separated estimate WAVs, in output order.
    #[arg(long = "estimate", required = true, value_name = "WAV")]
    pub estimates: Vec<PathBuf>,
    /// Reference source WAVs.
    #[arg(long = "reference", required = true, value_name = "WAV")]
    pub references: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

/// Key=value settings file. Lines starting with `#` and blank lines are
/// ignored; keys use the long flag names.
#[derive(Debug, Default)]
pub struct Settings {
    map: HashMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    line_no + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Settings { map })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::invalid(format!("config key '{key}' = '{raw}': {e}"))),
        }
    }
}

fn resolve<T>(flag: Option<T>, config: Result<Option<T>>, default: T) -> Result<T> {
    Ok(flag.or(config?).unwrap_or(default))
}

fn resolve_required<T>(flag: Option<T>, config: Result<Option<T>>, key: &str) -> Result<T> {
    flag.or(config?)
        .ok_or_else(|| Error::invalid(format!("--{key} is required (or set '{key}' in a config file)")))
}

fn resolve_stft(args: &StftArgs, settings: &Settings) -> Result<StftConfig> {
    let defaults = StftConfig::default();
    let window_kind = match args
        .window
        .clone()
        .or(settings.get::<String>("window")?)
    {
        None => defaults.window_kind,
        Some(name) => WindowKind::parse(&name)?,
    };
    let config = StftConfig {
        window_length: resolve(
            args.window_length,
            settings.get("window-length"),
            defaults.window_length,
        )?,
        hop_length: resolve(args.hop_length, settings.get("hop-length"), defaults.hop_length)?,
        fft_length: resolve(args.fft_length, settings.get("fft-length"), defaults.fft_length)?,
        window_kind,
    };
    config.validate()?;
    Ok(config)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_report(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in entries {
        let _ = writeln!(text, "{key}={value}");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join("\t");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join("\t"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.9e}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl Cli {
    pub fn run(self) -> Result<()> {
        let settings = Settings::load(self.config.as_deref())?;
        match self.command {
            Command::Train(args) => cmd_train(&args, &settings),
            Command::Separate(args) => cmd_separate(&args, &settings),
            Command::Bench(args) => cmd_bench(&args, &settings),
            Command::Synth(args) => cmd_synth(&args, &settings),
            Command::Eval(args) => cmd_eval(&args, &settings),
        }
    }
}

pub fn cmd_train(args: &TrainArgs, settings: &Settings) -> Result<()> {
    let stft_config = resolve_stft(&args.stft, settings)?;
    let n_dicts = resolve(args.n_dicts, settings.get("n-dicts"), 20)?;
    let n_elems = resolve(args.n_elems, settings.get("n-elems"), 20)?;
    let max_iters = resolve(args.max_iters, settings.get("max-iters"), 100)?;
    let rel_tol = resolve(args.rel_tol, settings.get("rel-tol"), 1e-5)?;
    let seed = resolve_required(args.seed, settings.get("seed"), "seed")?;
    let gain = resolve(args.gain, settings.get("gain"), 1.0)?;
    let out_dir = resolve(args.out_dir.clone(), settings.get("out-dir"), PathBuf::from("."))?;
    ensure_out_dir(&out_dir)?;

    let mut signal: Option<TimeSignal> = None;
    for input in &args.inputs {
        let part = load_wav(input)?;
        signal = Some(match signal {
            None => part,
            Some(mut acc) => {
                if acc.sample_rate != part.sample_rate {
                    return Err(Error::invalid(format!(
                        "{}: sample rate {} differs from {}",
                        input.display(),
                        part.sample_rate,
                        acc.sample_rate
                    )));
                }
                acc.samples.extend_from_slice(&part.samples);
                acc
            }
        });
    }
    let signal = signal.expect("clap requires at least one input");

    let spec = stft(&signal, &stft_config)?;
    let counts = to_counts(&spec, gain)?;
    let dims = ModelDims {
        n_dicts,
        n_elems,
        n_bins: counts.n_bins(),
    };
    let config = TrainConfig {
        max_iters,
        rel_tol,
        seed,
    };
    let started = Instant::now();
    let (model, state) = train_traced(&counts, dims, &config)?;
    let elapsed = started.elapsed().as_secs_f64();

    let out_path = match &args.out {
        Some(path) => path.clone(),
        None => {
            let stem = args.inputs[0]
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "model".to_string());
            out_dir.join(format!("{stem}.nfm"))
        }
    };
    model.save(&out_path)?;
    if let Some(text_path) = &args.export_text {
        let mut buffer = Vec::new();
        model
            .export_text(&mut buffer)
            .map_err(|e| Error::io(text_path, e))?;
        fs::write(text_path, buffer).map_err(|e| Error::io(text_path, e))?;
    }

    let iterations = state.log_likelihood.len();
    let final_ll = state.log_likelihood.last().copied().unwrap_or(f64::NAN);
    println!("model={}", out_path.display());
    println!("iterations={iterations}");
    println!("final_log_likelihood={final_ll:.9e}");
    println!("train_seconds={elapsed:.3}");
    Ok(())
}

/// Outcome of one inference engine run, step by step so wall time and
/// diagnostics are recorded per iteration.
struct InferenceOutcome {
    weights: Array2<f64>,
    monitor: Vec<f64>,
    iter_seconds: Vec<f64>,
    /// Mean over sources and frames of the largest state marginal; absent
    /// for PLCA, which has no state posterior.
    dhat_trace: Option<Vec<f64>>,
    converged: bool,
}

fn state_concentration(d_hats: &[Array2<f64>]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for d in d_hats {
        for row in d.rows() {
            acc += row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            count += 1;
        }
    }
    acc / count as f64
}

fn run_inference(
    algo: Algorithm,
    mixture: &MixtureModel,
    counts: &crate::signal::CountSpectrogram,
    max_iters: usize,
    rel_tol: f64,
    seed: Option<u64>,
    max_joint_states: usize,
    dump_posterior: Option<&Path>,
) -> Result<InferenceOutcome> {
    if dump_posterior.is_some() && algo != Algorithm::Vi {
        return Err(Error::invalid(
            "--dump-posterior requires the variational engine (--algo vi)",
        ));
    }
    let mut monitor = Vec::new();
    let mut iter_seconds = Vec::new();
    let mut converged = false;
    match algo {
        Algorithm::Vi => {
            let mut state = VariationalState::init_seeded(mixture, counts, seed)?;
            let mut dhat_trace = Vec::new();
            let mut prev: Option<f64> = None;
            for _ in 0..max_iters.max(1) {
                let started = Instant::now();
                let h = vi_step(&mut state, mixture, counts)?;
                iter_seconds.push(started.elapsed().as_secs_f64());
                monitor.push(h);
                dhat_trace.push(state_concentration(&state.d_hat));
                if let Some(p) = prev {
                    if (h - p).abs() / p.abs().max(1e-12) < rel_tol {
                        converged = true;
                        break;
                    }
                }
                prev = Some(h);
            }
            if let Some(path) = dump_posterior {
                crate::factorial::save_posterior(path, &state)?;
            }
            Ok(InferenceOutcome {
                weights: state.expected_weights(),
                monitor,
                iter_seconds,
                dhat_trace: Some(dhat_trace),
                converged,
            })
        }
        Algorithm::Exact => {
            let config = ExactConfig {
                max_iters,
                rel_tol,
                max_joint_states,
            };
            let mut state = exact_init(mixture, counts, &config)?;
            let mut dhat_trace = Vec::new();
            let mut prev: Option<f64> = None;
            for _ in 0..max_iters.max(1) {
                let started = Instant::now();
                let ll = exact_step(&mut state, mixture, counts)?;
                iter_seconds.push(started.elapsed().as_secs_f64());
                monitor.push(ll);
                let marginals: Vec<Array2<f64>> = (0..mixture.n_sources())
                    .map(|s| state.source_marginals(mixture, s))
                    .collect();
                dhat_trace.push(state_concentration(&marginals));
                if let Some(p) = prev {
                    if (ll - p).abs() / p.abs().max(1e-12) < rel_tol {
                        converged = true;
                        break;
                    }
                }
                prev = Some(ll);
            }
            Ok(InferenceOutcome {
                weights: state.expected_weights(mixture),
                monitor,
                iter_seconds,
                dhat_trace: Some(dhat_trace),
                converged,
            })
        }
        Algorithm::Plca => {
            let k_total = mixture.k_total();
            let mut weights =
                Array2::<f64>::from_elem((counts.n_frames(), k_total), 1.0 / k_total as f64);
            let mut prev: Option<f64> = None;
            for _ in 0..max_iters.max(1) {
                let started = Instant::now();
                let h = plca_step(&mut weights, mixture.beta_all(), counts)?;
                iter_seconds.push(started.elapsed().as_secs_f64());
                monitor.push(h);
                if let Some(p) = prev {
                    if (h - p).abs() / p.abs().max(1e-12) < rel_tol {
                        converged = true;
                        break;
                    }
                }
                prev = Some(h);
            }
            Ok(InferenceOutcome {
                weights,
                monitor,
                iter_seconds,
                dhat_trace: None,
                converged,
            })
        }
    }
}

pub fn cmd_separate(args: &SeparateArgs, settings: &Settings) -> Result<()> {
    if args.models.len() < 2 {
        return Err(Error::invalid("separation needs at least two --model files"));
    }
    let stft_config = resolve_stft(&args.stft, settings)?;
    let algo = match args.algo {
        Some(a) => a,
        None => match settings.get::<String>("algo")? {
            None => Algorithm::Vi,
            Some(name) => match name.as_str() {
                "vi" => Algorithm::Vi,
                "exact" => Algorithm::Exact,
                "plca" => Algorithm::Plca,
                other => return Err(Error::invalid(format!("unknown algorithm '{other}'"))),
            },
        },
    };
    let gamma = resolve(args.gamma, settings.get("gamma"), 1.0)?;
    let max_iters = resolve(args.max_iters, settings.get("max-iters"), 50)?;
    let rel_tol = resolve(args.rel_tol, settings.get("rel-tol"), 1e-4)?;
    let gain = resolve(args.gain, settings.get("gain"), 1.0)?;
    let max_joint_states =
        resolve(args.max_joint_states, settings.get("max-joint-states"), 4096)?;
    let out_dir = resolve(args.out_dir.clone(), settings.get("out-dir"), PathBuf::from("."))?;
    let seed = match args.seed {
        Some(s) => Some(s),
        None => settings.get("seed")?,
    };
    ensure_out_dir(&out_dir)?;

    let mixture_signal = load_wav(&args.mixture)?;
    let spec = stft(&mixture_signal, &stft_config)?;
    let counts = to_counts(&spec, gain)?;

    let models = args
        .models
        .iter()
        .map(SourceModel::load)
        .collect::<Result<Vec<_>>>()?;
    for (path, model) in args.models.iter().zip(&models) {
        if model.dims().n_bins != counts.n_bins() {
            return Err(Error::invalid(format!(
                "{}: model has {} bins but the mixture spectrogram has {}",
                path.display(),
                model.dims().n_bins,
                counts.n_bins()
            )));
        }
    }
    let mixture = combine(models, gamma)?;

    let started = Instant::now();
    let outcome = run_inference(
        algo,
        &mixture,
        &counts,
        max_iters,
        rel_tol,
        seed,
        max_joint_states,
        args.dump_posterior.as_deref(),
    )?;
    let infer_seconds = started.elapsed().as_secs_f64();

    let result = separate_sources(&mixture, &outcome.weights, &counts, &spec, gain)?;

    let stem = args
        .mixture
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "mixture".to_string());
    let mut out_paths = Vec::new();
    for (s, signal) in result.signals.iter().enumerate() {
        let path = out_dir.join(format!("{stem}.source{s}.wav"));
        write_wav(&path, signal)?;
        out_paths.push(path);
    }

    let mut entries: Vec<(&str, String)> = vec![
        ("command", "separate".to_string()),
        ("mixture", args.mixture.display().to_string()),
        ("algo", outcome_algo_name(algo)),
        ("n_sources", mixture.n_sources().to_string()),
        ("k_total", mixture.k_total().to_string()),
        ("frames", counts.n_frames().to_string()),
        ("bins", counts.n_bins().to_string()),
        ("gamma", format!("{gamma}")),
        ("max_iters", max_iters.to_string()),
        ("rel_tol", format!("{rel_tol:e}")),
        ("iterations", outcome.monitor.len().to_string()),
        ("converged", outcome.converged.to_string()),
        ("monitor_trace", join_floats(&outcome.monitor)),
        ("infer_seconds", format!("{infer_seconds:.6}")),
        ("iter_seconds", join_floats(&outcome.iter_seconds)),
    ];
    if let Some(dhat) = &outcome.dhat_trace {
        entries.push(("dhat_trace", join_floats(dhat)));
    }
    for (s, path) in out_paths.iter().enumerate() {
        entries.push(("output", format!("{s}:{}", path.display())));
    }
    let report_path = out_dir.join(format!("{stem}.report.txt"));
    write_report(&report_path, &entries)?;

    println!("algo={}", algo.as_str());
    println!("iterations={}", outcome.monitor.len());
    println!("converged={}", outcome.converged);
    if let Some(h) = outcome.monitor.last() {
        println!("final_monitor={h:.9e}");
    }
    for path in &out_paths {
        println!("output={}", path.display());
    }
    println!("report={}", report_path.display());
    Ok(())
}

fn outcome_algo_name(algo: Algorithm) -> String {
    algo.as_str().to_string()
}

pub fn cmd_bench(args: &BenchArgs, settings: &Settings) -> Result<()> {
    let sweep_text = args
        .n_sweep
        .clone()
        .or(settings.get::<String>("n-sweep")?)
        .unwrap_or_else(|| "2,5,10,20".to_string());
    let n_dicts_sweep = sweep_text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|e| Error::invalid(format!("bad sweep entry '{part}': {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if n_dicts_sweep.is_empty() {
        return Err(Error::invalid("sweep list is empty"));
    }
    let opts = BenchOptions {
        n_dicts_sweep,
        n_elems: resolve(args.n_elems, settings.get("n-elems"), 30)?,
        n_bins: resolve(args.bins, settings.get("bins"), 30)?,
        frames: resolve(args.frames, settings.get("frames"), 100)?,
        quanta_per_frame: resolve(args.quanta, settings.get("quanta"), 200)?,
        reps: resolve(args.reps, settings.get("reps"), 5)?,
        gamma: resolve(args.gamma, settings.get("gamma"), 1.0)?,
        seed: resolve_required(args.seed, settings.get("seed"), "seed")?,
        max_joint_states: resolve(
            args.max_joint_states,
            settings.get("max-joint-states"),
            4096,
        )?,
    };
    let out_dir = resolve(args.out_dir.clone(), settings.get("out-dir"), PathBuf::from("."))?;
    ensure_out_dir(&out_dir)?;

    let rows = bench_sweep(&opts)?;

    println!("n_dicts\tn_elems\tframes\tvi_s_per_iter\texact_s_per_iter\tratio");
    let mut tsv_rows = Vec::new();
    for row in &rows {
        println!(
            "{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.2}",
            row.n_dicts,
            row.n_elems,
            row.frames,
            row.vi_seconds_per_iter,
            row.exact_seconds_per_iter,
            row.ratio
        );
        tsv_rows.push(vec![
            row.n_dicts.to_string(),
            row.n_elems.to_string(),
            row.frames.to_string(),
            format!("{:.9e}", row.vi_seconds_per_iter),
            format!("{:.9e}", row.exact_seconds_per_iter),
            format!("{:.4}", row.ratio),
        ]);
    }
    let table_path = out_dir.join("bench.tsv");
    write_tsv(
        &table_path,
        &[
            "n_dicts",
            "n_elems",
            "frames",
            "vi_s_per_iter",
            "exact_s_per_iter",
            "ratio",
        ],
        &tsv_rows,
    )?;
    println!("table={}", table_path.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, settings: &Settings) -> Result<()> {
    let stft_config = resolve_stft(&args.stft, settings)?;
    let seed = resolve_required(args.seed, settings.get("seed"), "seed")?;
    let sample_rate = resolve(args.sample_rate, settings.get("sample-rate"), 16_000)?;
    let mix_db = resolve(args.mix_db, settings.get("mix-db"), 0.0)?;
    let out_dir = resolve(args.out_dir.clone(), settings.get("out-dir"), PathBuf::from("."))?;
    ensure_out_dir(&out_dir)?;

    let defaults = SynthOptions::default();
    let opts = SynthOptions {
        dims: ModelDims {
            n_dicts: resolve(args.n_dicts, settings.get("n-dicts"), 4)?,
            n_elems: resolve(args.n_elems, settings.get("n-elems"), 5)?,
            n_bins: stft_config.bins(),
        },
        frames: resolve(args.frames, settings.get("frames"), 100)?,
        quanta_per_frame: resolve(args.quanta, settings.get("quanta"), 200)?,
        disjoint_support: args.disjoint_support
            || settings.get::<bool>("disjoint-support")?.unwrap_or(false),
        strong_dynamics: args.strong_dynamics
            || settings.get::<bool>("strong-dynamics")?.unwrap_or(false),
        element_concentration: resolve(
            args.element_concentration,
            settings.get("element-concentration"),
            defaults.element_concentration,
        )?,
        seed,
    };

    let models = make_source_pair(&opts)?;
    let sampled = sample_mixture(&models, &opts)?;

    // Random-phase audio for each source, equal RMS at 0 dB.
    let base_rms = 0.1;
    let mut raw0 = counts_to_signal(&sampled.sources[0], &stft_config, sample_rate, seed ^ 0xA0)?;
    let mut raw1 = counts_to_signal(&sampled.sources[1], &stft_config, sample_rate, seed ^ 0xA1)?;
    if opts.disjoint_support {
        // Keep each rendered source inside the frequency half its model owns.
        let half = opts.dims.n_bins / 2;
        raw0 = crate::synth::band_limit(&raw0, &stft_config, 0..half, 3)?;
        raw1 = crate::synth::band_limit(&raw1, &stft_config, half..opts.dims.n_bins, 3)?;
    }
    let source0 = scale_to_rms(&raw0, base_rms);
    let source1 = scale_to_rms(&raw1, base_rms * 10f64.powf(mix_db / 20.0));
    let mixture_samples: Vec<f64> = source0
        .samples
        .iter()
        .zip(&source1.samples)
        .map(|(a, b)| a + b)
        .collect();
    let mixture = TimeSignal::new(mixture_samples, sample_rate)?;

    let paths = [
        out_dir.join("source0.wav"),
        out_dir.join("source1.wav"),
        out_dir.join("mixture.wav"),
    ];
    write_wav(&paths[0], &source0)?;
    write_wav(&paths[1], &source1)?;
    write_wav(&paths[2], &mixture)?;

    let model_paths = [out_dir.join("model0.nfm"), out_dir.join("model1.nfm")];
    models.0.save(&model_paths[0])?;
    models.1.save(&model_paths[1])?;

    for (s, path) in [(0usize, out_dir.join("states0.txt")), (1, out_dir.join("states1.txt"))] {
        let mut text = String::new();
        for (t, state) in sampled.state_paths[s].iter().enumerate() {
            let _ = writeln!(text, "{t}\t{state}");
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }

    let entries: Vec<(&str, String)> = vec![
        ("command", "synth".to_string()),
        ("seed", seed.to_string()),
        ("n_dicts", opts.dims.n_dicts.to_string()),
        ("n_elems", opts.dims.n_elems.to_string()),
        ("bins", opts.dims.n_bins.to_string()),
        ("frames", opts.frames.to_string()),
        ("quanta", opts.quanta_per_frame.to_string()),
        ("mix_db", format!("{mix_db}")),
        ("disjoint_support", opts.disjoint_support.to_string()),
        ("strong_dynamics", opts.strong_dynamics.to_string()),
        ("source0_rms", format!("{:.9e}", source0.rms())),
        ("source1_rms", format!("{:.9e}", source1.rms())),
    ];
    write_report(&out_dir.join("synth.report.txt"), &entries)?;

    for path in paths.iter().chain(model_paths.iter()) {
        println!("output={}", path.display());
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, settings: &Settings) -> Result<()> {
    if args.estimates.len() != args.references.len() {
        return Err(Error::invalid(format!(
            "got {} estimates and {} references",
            args.estimates.len(),
            args.references.len()
        )));
    }
    let out_dir = resolve(args.out_dir.clone(), settings.get("out-dir"), PathBuf::from("."))?;
    ensure_out_dir(&out_dir)?;

    let estimates = args
        .estimates
        .iter()
        .map(load_wav)
        .collect::<Result<Vec<_>>>()?;
    let references = args
        .references
        .iter()
        .map(load_wav)
        .collect::<Result<Vec<_>>>()?;

    let (assignment, scores) = best_permutation(&estimates, &references)?;
    let mut rows = Vec::new();
    for (e, (r, score)) in assignment.iter().zip(&scores).enumerate() {
        println!(
            "estimate={e} reference={r} sdr={:.3} sir={:.3} sar={:.3}",
            score.sdr, score.sir, score.sar
        );
        rows.push(vec![
            e.to_string(),
            r.to_string(),
            format!("{:.6}", score.sdr),
            format!("{:.6}", score.sir),
            format!("{:.6}", score.sar),
        ]);
    }
    let mean = SepScores::mean_of(&scores);
    println!(
        "mean sdr={:.3} sir={:.3} sar={:.3}",
        mean.sdr, mean.sir, mean.sar
    );
    rows.push(vec![
        "mean".to_string(),
        "-".to_string(),
        format!("{:.6}", mean.sdr),
        format!("{:.6}", mean.sir),
        format!("{:.6}", mean.sar),
    ]);
    write_tsv(
        &out_dir.join("scores.tsv"),
        &["estimate", "reference", "sdr", "sir", "sar"],
        &rows,
    )?;

    let mut entries: Vec<(&str, String)> = vec![
        ("command", "eval".to_string()),
        ("n_sources", scores.len().to_string()),
        ("assignment", assignment.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")),
        ("mean_sdr", format!("{:.6}", mean.sdr)),
        ("mean_sir", format!("{:.6}", mean.sir)),
        ("mean_sar", format!("{:.6}", mean.sar)),
    ];
    for (e, score) in scores.iter().enumerate() {
        entries.push(("sdr", format!("{e}:{:.6}", score.sdr)));
        entries.push(("sir", format!("{e}:{:.6}", score.sir)));
        entries.push(("sar", format!("{e}:{:.6}", score.sar)));
    }
    write_report(&out_dir.join("scores.txt"), &entries)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nn-dicts = 7\nrel-tol=1e-3\n\n").unwrap();
        let settings = Settings::load(Some(&path)).unwrap();
        assert_eq!(settings.get::<usize>("n-dicts").unwrap(), Some(7));
        assert_eq!(settings.get::<f64>("rel-tol").unwrap(), Some(1e-3));
        assert_eq!(settings.get::<usize>("missing").unwrap(), None);

        // Flags win over config values.
        let v = resolve(Some(3usize), settings.get("n-dicts"), 1).unwrap();
        assert_eq!(v, 3);
        let v = resolve(None, settings.get("n-dicts"), 1).unwrap();
        assert_eq!(v, 7);
    }

    #[test]
    fn settings_reject_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        fs::write(&path, "just-a-word\n").unwrap();
        assert!(Settings::load(Some(&path)).is_err());
    }

    #[test]
    fn missing_required_seed_is_invalid() {
        let settings = Settings::default();
        let err = resolve_required::<u64>(None, settings.get("seed"), "seed").unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn cli_parses_subcommands() {
        let cli = Cli::try_parse_from([
            "nfhmm", "synth", "--seed", "1", "--out-dir", "/tmp/x", "--frames", "10",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Synth(_)));

        let cli = Cli::try_parse_from([
            "nfhmm",
            "separate",
            "mix.wav",
            "--model",
            "a.nfm",
            "--model",
            "b.nfm",
            "--algo",
            "exact",
        ])
        .unwrap();
        match cli.command {
            Command::Separate(args) => {
                assert_eq!(args.models.len(), 2);
                assert_eq!(args.algo, Some(Algorithm::Exact));
            }
            _ => panic!("expected separate"),
        }
    }
}
