//! C ABI for the separation toolkit: train or load source models, separate a
//! mixture WAV into per-source WAVs, and score estimates against references.
//!
//! Conventions: every function returns an [`NfhmmStatus`]; results are
//! written through out-pointers. Models are opaque handles owned by the
//! library and released with [`nfhmm_model_free`]. On failure,
//! [`nfhmm_last_error_message`] returns a thread-local description of the
//! most recent error.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::c_char;

use nfhmm::cli::Algorithm;
use nfhmm::error::Error;
use nfhmm::factorial::{combine, exact_infer, vi_infer, ExactConfig, ViConfig};
use nfhmm::nhmm::{train_traced, ModelDims, SourceModel, TrainConfig};
use nfhmm::plca::{plca_separate, PlcaConfig};
use nfhmm::separation::separate_sources;
use nfhmm::signal::{load_wav, stft, to_counts, write_wav, StftConfig, TimeSignal, WindowKind};

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

/// Result code of every `nfhmm_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfhmmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    IoError = 3,
    InvalidInput = 4,
    NumericalFailure = 5,
    Panic = 6,
}

/// Opaque handle to a trained source model.
pub struct NfhmmModel {
    inner: SourceModel,
}

/// STFT settings shared by training and separation.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NfhmmStftParams {
    pub window_length: usize,
    pub hop_length: usize,
    pub fft_length: usize,
    /// 0 = periodic Hann, 1 = rectangular.
    pub window_kind: u32,
}

/// SDR / SIR / SAR in decibels.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NfhmmScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// Inference engine selector: 0 = variational, 1 = exact, 2 = plca.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfhmmAlgorithm {
    Variational = 0,
    Exact = 1,
    Plca = 2,
}

fn set_last_error(message: String) {
    let cstring =
        CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn status_of(err: &Error) -> NfhmmStatus {
    match err {
        Error::Io { .. } => NfhmmStatus::IoError,
        Error::Invalid(_) => NfhmmStatus::InvalidInput,
        Error::Numerical(_) => NfhmmStatus::NumericalFailure,
    }
}

fn fail(err: Error) -> NfhmmStatus {
    let status = status_of(&err);
    set_last_error(err.to_string());
    status
}

/// Run `body` with panics converted into an error status.
fn guarded(body: impl FnOnce() -> NfhmmStatus) -> NfhmmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic".to_string());
            NfhmmStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, NfhmmStatus> {
    if ptr.is_null() {
        set_last_error("null path argument".to_string());
        return Err(NfhmmStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(text) => Ok(PathBuf::from(text)),
        Err(_) => {
            set_last_error("path is not valid UTF-8".to_string());
            Err(NfhmmStatus::InvalidUtf8)
        }
    }
}

fn stft_config_from(params: &NfhmmStftParams) -> Result<StftConfig, NfhmmStatus> {
    let window_kind = match params.window_kind {
        0 => WindowKind::Hann,
        1 => WindowKind::Rectangular,
        other => {
            set_last_error(format!("unknown window kind {other}"));
            return Err(NfhmmStatus::InvalidInput);
        }
    };
    let config = StftConfig {
        window_length: params.window_length,
        hop_length: params.hop_length,
        fft_length: params.fft_length,
        window_kind,
    };
    if let Err(err) = config.validate() {
        return Err(fail(err));
    }
    Ok(config)
}

/// Message text of the most recent error on this thread. The pointer stays
/// valid until the next failing `nfhmm_*` call on the same thread. Returns
/// null when no error has occurred yet.
#[no_mangle]
pub extern "C" fn nfhmm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |msg| msg.as_ptr())
    })
}

/// Default STFT settings: 1024-sample Hann window, 256-sample hop.
#[no_mangle]
pub extern "C" fn nfhmm_stft_params_default() -> NfhmmStftParams {
    let defaults = StftConfig::default();
    NfhmmStftParams {
        window_length: defaults.window_length,
        hop_length: defaults.hop_length,
        fft_length: defaults.fft_length,
        window_kind: 0,
    }
}

/// Train a source model from one or more WAV files (concatenated in order)
/// and hand back an owned handle through `out_model`.
///
/// # Safety
/// `wav_paths` must point to `n_paths` valid NUL-terminated strings and
/// `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nfhmm_model_train(
    wav_paths: *const *const c_char,
    n_paths: usize,
    stft_params: NfhmmStftParams,
    n_dicts: usize,
    n_elems: usize,
    max_iters: usize,
    rel_tol: f64,
    seed: u64,
    gain: f64,
    out_model: *mut *mut NfhmmModel,
) -> NfhmmStatus {
    guarded(|| {
        if wav_paths.is_null() || out_model.is_null() || n_paths == 0 {
            set_last_error("null argument to nfhmm_model_train".to_string());
            return NfhmmStatus::NullArgument;
        }
        let config = match stft_config_from(&stft_params) {
            Ok(config) => config,
            Err(status) => return status,
        };
        let mut signal: Option<TimeSignal> = None;
        for i in 0..n_paths {
            let path = match path_from(*wav_paths.add(i)) {
                Ok(path) => path,
                Err(status) => return status,
            };
            let part = match load_wav(&path) {
                Ok(part) => part,
                Err(err) => return fail(err),
            };
            signal = Some(match signal {
                None => part,
                Some(mut acc) => {
                    if acc.sample_rate != part.sample_rate {
                        set_last_error(format!(
                            "{}: sample rate {} differs from {}",
                            path.display(),
                            part.sample_rate,
                            acc.sample_rate
                        ));
                        return NfhmmStatus::InvalidInput;
                    }
                    acc.samples.extend_from_slice(&part.samples);
                    acc
                }
            });
        }
        let signal = signal.expect("n_paths checked above");
        let result = stft(&signal, &config)
            .and_then(|spec| to_counts(&spec, gain))
            .and_then(|counts| {
                let dims = ModelDims {
                    n_dicts,
                    n_elems,
                    n_bins: counts.n_bins(),
                };
                let train_config = TrainConfig {
                    max_iters,
                    rel_tol,
                    seed,
                };
                train_traced(&counts, dims, &train_config)
            });
        match result {
            Ok((model, _)) => {
                *out_model = Box::into_raw(Box::new(NfhmmModel { inner: model }));
                NfhmmStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Load a model file produced by `nfhmm_model_save` or the CLI.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn nfhmm_model_load(
    path: *const c_char,
    out_model: *mut *mut NfhmmModel,
) -> NfhmmStatus {
    guarded(|| {
        if out_model.is_null() {
            set_last_error("null out_model".to_string());
            return NfhmmStatus::NullArgument;
        }
        let path = match path_from(path) {
            Ok(path) => path,
            Err(status) => return status,
        };
        match SourceModel::load(&path) {
            Ok(model) => {
                *out_model = Box::into_raw(Box::new(NfhmmModel { inner: model }));
                NfhmmStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Write a model to disk; the file round-trips bit-exactly.
///
/// # Safety
/// `model` must be a live handle from this library and `path` a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nfhmm_model_save(
    model: *const NfhmmModel,
    path: *const c_char,
) -> NfhmmStatus {
    guarded(|| {
        if model.is_null() {
            set_last_error("null model".to_string());
            return NfhmmStatus::NullArgument;
        }
        let path = match path_from(path) {
            Ok(path) => path,
            Err(status) => return status,
        };
        match (*model).inner.save(&path) {
            Ok(()) => NfhmmStatus::Ok,
            Err(err) => fail(err),
        }
    })
}

/// Report a model's dimensions. Null out-pointers are skipped.
///
/// # Safety
/// `model` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn nfhmm_model_dims(
    model: *const NfhmmModel,
    out_n_dicts: *mut usize,
    out_n_elems: *mut usize,
    out_n_bins: *mut usize,
) -> NfhmmStatus {
    guarded(|| {
        if model.is_null() {
            set_last_error("null model".to_string());
            return NfhmmStatus::NullArgument;
        }
        let dims = (*model).inner.dims();
        if !out_n_dicts.is_null() {
            *out_n_dicts = dims.n_dicts;
        }
        if !out_n_elems.is_null() {
            *out_n_elems = dims.n_elems;
        }
        if !out_n_bins.is_null() {
            *out_n_bins = dims.n_bins;
        }
        NfhmmStatus::Ok
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn nfhmm_model_free(model: *mut NfhmmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Separate a mixture WAV with the given source models and write one WAV per
/// source into `out_dir` as `<stem>.source<k>.wav`. On success the number of
/// inference iterations is stored in `out_iterations` (when non-null).
///
/// # Safety
/// `mixture_path`, `out_dir`, and `stem` must be valid NUL-terminated
/// strings; `models` must point to `n_models` live model handles.
#[no_mangle]
pub unsafe extern "C" fn nfhmm_separate(
    mixture_path: *const c_char,
    models: *const *const NfhmmModel,
    n_models: usize,
    algorithm: NfhmmAlgorithm,
    gamma: f64,
    max_iters: usize,
    rel_tol: f64,
    gain: f64,
    stft_params: NfhmmStftParams,
    out_dir: *const c_char,
    stem: *const c_char,
    out_iterations: *mut usize,
) -> NfhmmStatus {
    guarded(|| {
        if models.is_null() {
            set_last_error("null models array".to_string());
            return NfhmmStatus::NullArgument;
        }
        if n_models < 2 {
            set_last_error("separation needs at least two models".to_string());
            return NfhmmStatus::InvalidInput;
        }
        let mixture_path = match path_from(mixture_path) {
            Ok(path) => path,
            Err(status) => return status,
        };
        let out_dir = match path_from(out_dir) {
            Ok(path) => path,
            Err(status) => return status,
        };
        let stem = if stem.is_null() {
            set_last_error("null stem".to_string());
            return NfhmmStatus::NullArgument;
        } else {
            match CStr::from_ptr(stem).to_str() {
                Ok(text) => text.to_string(),
                Err(_) => {
                    set_last_error("stem is not valid UTF-8".to_string());
                    return NfhmmStatus::InvalidUtf8;
                }
            }
        };
        let config = match stft_config_from(&stft_params) {
            Ok(config) => config,
            Err(status) => return status,
        };

        let mut sources = Vec::with_capacity(n_models);
        for i in 0..n_models {
            let handle = *models.add(i);
            if handle.is_null() {
                set_last_error(format!("model {i} is null"));
                return NfhmmStatus::NullArgument;
            }
            sources.push((*handle).inner.clone());
        }

        let algo = match algorithm {
            NfhmmAlgorithm::Variational => Algorithm::Vi,
            NfhmmAlgorithm::Exact => Algorithm::Exact,
            NfhmmAlgorithm::Plca => Algorithm::Plca,
        };
        let result = (|| {
            let signal = load_wav(&mixture_path)?;
            let spec = stft(&signal, &config)?;
            let counts = to_counts(&spec, gain)?;
            let mixture = combine(sources, gamma)?;
            let (weights, iterations) = match algo {
                Algorithm::Vi => {
                    let vi_config = ViConfig {
                        max_iters,
                        rel_tol,
                        seed: None,
                    };
                    let state = vi_infer(&mixture, &counts, &vi_config)?;
                    (state.expected_weights(), state.monitor.len())
                }
                Algorithm::Exact => {
                    let exact_config = ExactConfig {
                        max_iters,
                        rel_tol,
                        ..ExactConfig::default()
                    };
                    let state = exact_infer(&mixture, &counts, &exact_config)?;
                    (state.expected_weights(&mixture), state.log_likelihood.len())
                }
                Algorithm::Plca => {
                    let plca_config = PlcaConfig { max_iters, rel_tol };
                    let result = plca_separate(mixture.beta_all(), &counts, &plca_config)?;
                    (result.weights, result.monitor.len())
                }
            };
            let separated = separate_sources(&mixture, &weights, &counts, &spec, gain)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for (s, signal) in separated.signals.iter().enumerate() {
                write_wav(out_dir.join(format!("{stem}.source{s}.wav")), signal)?;
            }
            Ok::<usize, Error>(iterations)
        })();
        match result {
            Ok(iterations) => {
                if !out_iterations.is_null() {
                    *out_iterations = iterations;
                }
                NfhmmStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Score one estimate WAV against reference WAVs; `target_index` names the
/// reference the estimate should match.
///
/// # Safety
/// `estimate_path` must be a valid NUL-terminated string, `reference_paths`
/// must point to `n_references` valid strings, and `out_scores` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nfhmm_bss_eval(
    estimate_path: *const c_char,
    reference_paths: *const *const c_char,
    n_references: usize,
    target_index: usize,
    out_scores: *mut NfhmmScores,
) -> NfhmmStatus {
    guarded(|| {
        if reference_paths.is_null() || out_scores.is_null() || n_references == 0 {
            set_last_error("null argument to nfhmm_bss_eval".to_string());
            return NfhmmStatus::NullArgument;
        }
        let estimate_path = match path_from(estimate_path) {
            Ok(path) => path,
            Err(status) => return status,
        };
        let result = (|| {
            let estimate = load_wav(&estimate_path)?;
            let mut references = Vec::with_capacity(n_references);
            for i in 0..n_references {
                let path = match path_from(*reference_paths.add(i)) {
                    Ok(path) => path,
                    Err(_) => return Err(Error::invalid("bad reference path")),
                };
                references.push(load_wav(&path)?);
            }
            nfhmm::bss_eval::bss_eval(&estimate, &references, target_index)
        })();
        match result {
            Ok(scores) => {
                *out_scores = NfhmmScores {
                    sdr: scores.sdr,
                    sir: scores.sir,
                    sar: scores.sar,
                };
                NfhmmStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}
