//! Supervised single-channel audio source separation built on non-negative
//! spectrogram models with Markov dictionary dynamics.
//!
//! The pipeline: [`signal`] turns WAV audio into count spectrograms,
//! [`nhmm`] learns one model per source from isolated recordings,
//! [`factorial`] resolves a mixture of trained sources with either a
//! variational engine (cost linear in the number of sources) or exact
//! joint-lattice EM (cost exponential in the number of sources), [`plca`]
//! provides the temporally flat baseline, and [`separation`] plus
//! [`mod@bss_eval`] turn posteriors into scored audio. [`cli`] wires the whole
//! thing into the `nfhmm` binary.

pub mod bench;
pub mod bss_eval;
mod container;
pub mod cli;
pub mod error;
pub mod factorial;
pub mod hmm;
pub mod nhmm;
pub mod plca;
pub mod separation;
pub mod signal;
pub mod synth;

pub use bss_eval::{best_permutation, bss_eval, SepScores};
pub use error::{Error, Result};
pub use factorial::{
    combine, digamma, exact_infer, vi_infer, ExactConfig, ExactState, MixtureModel,
    VariationalState, ViConfig,
};
pub use hmm::{forward_backward, ChainParams, ChainPosterior};
pub use nhmm::{em_step, sample, train, ModelDims, SourceModel, TrainConfig, TrainState};
pub use plca::{plca_separate, PlcaConfig, PlcaWeights};
pub use separation::{reconstruct, resynthesize, separate_sources, wiener_mask, SeparationResult};
pub use signal::{
    istft, load_wav, stft, to_counts, write_wav, ComplexSpectrogram, CountSpectrogram,
    StftConfig, TimeSignal, WindowKind,
};
