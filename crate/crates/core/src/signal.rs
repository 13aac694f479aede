//! WAV audio I/O, short-time Fourier analysis/synthesis, and conversion of
//! magnitude spectrograms into the non-negative "quanta" count matrices
//! consumed by the inference modules.
//!
//! Resynthesis uses weighted overlap-add with the analysis window applied a
//! second time at synthesis and a division by the accumulated squared-window
//! envelope. For any config that passes [`StftConfig::validate`] this makes
//! `istft(stft(x))` reconstruct the interior of `x` to floating-point
//! precision.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use realfft::RealFftPlanner;

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};

const SPECTROGRAM_MAGIC: &[u8; 8] = b"NFHSPEC1";

/// A mono time-domain signal with amplitudes expected in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl TimeSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("signal contains non-finite samples"));
        }
        Ok(TimeSignal {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum_sq: f64 = self.samples.iter().map(|s| s * s).sum();
        (sum_sq / self.samples.len() as f64).sqrt()
    }
}

/// Window taper applied to each analysis frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic raised cosine; exact overlap-add at hop = length / 4.
    Hann,
    /// All-ones taper; exact overlap-add at hop = length.
    Rectangular,
}

impl WindowKind {
    pub fn taps(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|i| {
                    let phase = 2.0 * std::f64::consts::PI * i as f64 / len as f64;
                    0.5 * (1.0 - phase.cos())
                })
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Rectangular => "rect",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "hann" => Ok(WindowKind::Hann),
            "rect" | "rectangular" => Ok(WindowKind::Rectangular),
            other => Err(Error::invalid(format!("unknown window kind '{other}'"))),
        }
    }

    fn to_tag(self) -> u64 {
        match self {
            WindowKind::Hann => 0,
            WindowKind::Rectangular => 1,
        }
    }

    fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(WindowKind::Hann),
            1 => Ok(WindowKind::Rectangular),
            other => Err(Error::invalid(format!("unknown window tag {other}"))),
        }
    }
}

/// Short-time Fourier transform configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub window_kind: WindowKind,
    pub fft_length: usize,
}

impl Default for StftConfig {
    /// 64 ms window and 16 ms hop at 16 kHz.
    fn default() -> Self {
        StftConfig {
            window_length: 1024,
            hop_length: 256,
            window_kind: WindowKind::Hann,
            fft_length: 1024,
        }
    }
}

impl StftConfig {
    /// Number of non-negative-frequency bins.
    pub fn bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 {
            return Err(Error::invalid("hop length must be positive"));
        }
        if self.hop_length > self.window_length {
            return Err(Error::invalid("hop length must not exceed window length"));
        }
        if self.window_length > self.fft_length {
            return Err(Error::invalid("window length must not exceed fft length"));
        }
        // Exact resynthesis needs the squared-window envelope to stay bounded
        // away from zero over an interior period.
        let taps = self.window_kind.taps(self.window_length);
        let period = self.hop_length;
        let mut envelope = vec![0.0f64; period];
        let mut offset = 0usize;
        while offset < self.window_length {
            for n in 0..period {
                let idx = offset + n;
                if idx < self.window_length {
                    envelope[n] += taps[idx] * taps[idx];
                }
            }
            offset += self.hop_length;
        }
        let max = envelope.iter().cloned().fold(0.0, f64::max);
        let min = envelope.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || min < 1e-6 * max {
            return Err(Error::invalid(format!(
                "window '{}' of length {} does not overlap-add at hop {}",
                self.window_kind.as_str(),
                self.window_length,
                self.hop_length
            )));
        }
        Ok(())
    }
}

/// Complex STFT, `bins` is `L x T` with `L = fft_length / 2 + 1`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_bins(&self) -> usize {
        self.bins.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.bins.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|z| z.norm())
    }
}

/// Non-negative count ("sound quanta") spectrogram, `L x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountSpectrogram {
    values: Array2<f64>,
    frame_totals: Vec<f64>,
}

impl CountSpectrogram {
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "count spectrogram entries must be finite and >= 0",
            ));
        }
        let frame_totals = (0..values.ncols()).map(|t| values.column(t).sum()).collect();
        Ok(CountSpectrogram {
            values,
            frame_totals,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn frame_totals(&self) -> &[f64] {
        &self.frame_totals
    }

    pub fn n_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn total(&self) -> f64 {
        self.frame_totals.iter().sum()
    }

    /// Element-wise sum of two count spectrograms of equal shape.
    pub fn add(&self, other: &CountSpectrogram) -> Result<CountSpectrogram> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::invalid("count spectrogram shapes differ"));
        }
        CountSpectrogram::from_values(&self.values + &other.values)
    }
}

/// Load the first channel of a PCM WAV file, normalized to `[-1, 1]`.
pub fn load_wav(path: impl AsRef<Path>) -> Result<TimeSignal> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::from_hound(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::invalid(format!(
            "{}: wav has zero channels",
            path.display()
        )));
    }

    let mut samples = Vec::new();
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            for (i, s) in reader.samples::<f32>().enumerate() {
                let s = s.map_err(|e| Error::from_hound(path, e))?;
                if i % channels == 0 {
                    samples.push(s as f64);
                }
            }
        }
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1u64 << (bits - 1)) as f64;
            for (i, s) in reader.samples::<i32>().enumerate() {
                let s = s.map_err(|e| Error::from_hound(path, e))?;
                if i % channels == 0 {
                    samples.push(s as f64 / scale);
                }
            }
        }
        (format, bits) => {
            return Err(Error::invalid(format!(
                "{}: unsupported wav encoding {format:?}/{bits}-bit",
                path.display()
            )));
        }
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "{}: wav contains no audio",
            path.display()
        )));
    }
    TimeSignal::new(samples, spec.sample_rate)
}

/// Write a signal as 16-bit PCM, clamping to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, signal: &TimeSignal) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::from_hound(path, e))?;
    for &s in &signal.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::from_hound(path, e))?;
    }
    writer.finalize().map_err(|e| Error::from_hound(path, e))
}

/// Forward STFT; frame `t` covers samples `[t * hop, t * hop + window)`.
pub fn stft(signal: &TimeSignal, config: &StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    if signal.len() < config.window_length {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than the {}-sample window",
            signal.len(),
            config.window_length
        )));
    }
    let n_frames = (signal.len() - config.window_length) / config.hop_length + 1;
    let n_bins = config.bins();
    let taps = config.window_kind.taps(config.window_length);

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(config.fft_length);

    let columns: Vec<Vec<Complex64>> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            let fft = Arc::clone(&fft);
            let start = t * config.hop_length;
            let mut frame = vec![0.0f64; config.fft_length];
            for (i, tap) in taps.iter().enumerate() {
                frame[i] = signal.samples[start + i] * tap;
            }
            let mut spectrum = fft.make_output_vec();
            fft.process(&mut frame, &mut spectrum)
                .expect("fft buffer sizes are planned");
            spectrum
        })
        .collect();

    let mut bins = Array2::<Complex64>::zeros((n_bins, n_frames));
    for (t, column) in columns.iter().enumerate() {
        for (l, v) in column.iter().enumerate() {
            bins[(l, t)] = *v;
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        config: *config,
        sample_rate: signal.sample_rate,
    })
}

/// Inverse STFT via weighted overlap-add.
pub fn istft(spec: &ComplexSpectrogram) -> Result<TimeSignal> {
    let config = &spec.config;
    config.validate()?;
    if spec.n_bins() != config.bins() {
        return Err(Error::invalid(format!(
            "spectrogram has {} bins but config expects {}",
            spec.n_bins(),
            config.bins()
        )));
    }
    let n_frames = spec.n_frames();
    if n_frames == 0 {
        return Err(Error::invalid("spectrogram has zero frames"));
    }
    let taps = config.window_kind.taps(config.window_length);
    let out_len = (n_frames - 1) * config.hop_length + config.window_length;

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(config.fft_length);

    let frames: Vec<Vec<f64>> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            let ifft = Arc::clone(&ifft);
            let mut column: Vec<Complex64> = spec.bins.column(t).to_vec();
            // The DC and Nyquist bins of a real signal are real; rounding errors
            // from masking math land in the imaginary parts, so clear them.
            column[0].im = 0.0;
            if config.fft_length.is_multiple_of(2) {
                let last = column.len() - 1;
                column[last].im = 0.0;
            }
            let mut frame = ifft.make_output_vec();
            ifft.process(&mut column, &mut frame)
                .expect("ifft buffer sizes are planned");
            // realfft's inverse is unnormalized.
            let norm = 1.0 / config.fft_length as f64;
            for v in frame.iter_mut() {
                *v *= norm;
            }
            frame
        })
        .collect();

    let mut numerator = vec![0.0f64; out_len];
    let mut envelope = vec![0.0f64; out_len];
    for (t, frame) in frames.iter().enumerate() {
        let start = t * config.hop_length;
        for (i, tap) in taps.iter().enumerate() {
            numerator[start + i] += frame[i] * tap;
            envelope[start + i] += tap * tap;
        }
    }
    // Where frames only partially overlap (the outer edge samples) the
    // envelope tends to zero; dividing there amplifies any inconsistency in
    // a modified spectrogram into huge spikes. Mute those samples instead.
    let env_max = envelope.iter().cloned().fold(0.0, f64::max);
    let floor = 1e-2 * env_max;
    let samples = numerator
        .iter()
        .zip(&envelope)
        .map(|(num, env)| if *env > floor { num / env } else { 0.0 })
        .collect();
    TimeSignal::new(samples, spec.sample_rate)
}

/// Scale magnitudes into quanta counts: `V[l][t] = gain * |bins[l][t]|`.
pub fn to_counts(spec: &ComplexSpectrogram, gain: f64) -> Result<CountSpectrogram> {
    if !gain.is_finite() || gain <= 0.0 {
        return Err(Error::invalid(format!("gain must be positive, got {gain}")));
    }
    CountSpectrogram::from_values(spec.bins.mapv(|z| gain * z.norm()))
}

/// Persist a count spectrogram with its originating STFT configuration.
pub fn save_spectrogram(
    path: impl AsRef<Path>,
    counts: &CountSpectrogram,
    config: &StftConfig,
    sample_rate: u32,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = ContainerWriter::create(path, SPECTROGRAM_MAGIC)?;
    w.write_u64(counts.n_bins() as u64)?;
    w.write_u64(counts.n_frames() as u64)?;
    w.write_u64(u64::from(sample_rate))?;
    w.write_u64(config.window_length as u64)?;
    w.write_u64(config.hop_length as u64)?;
    w.write_u64(config.fft_length as u64)?;
    w.write_u64(config.window_kind.to_tag())?;
    w.write_f64_slice(counts.values().as_slice().expect("row-major layout"))?;
    w.finish()
}

pub fn load_spectrogram(
    path: impl AsRef<Path>,
) -> Result<(CountSpectrogram, StftConfig, u32)> {
    let path = path.as_ref();
    let mut r = ContainerReader::open(path, SPECTROGRAM_MAGIC)?;
    let n_bins = r.read_dim("bins")?;
    let n_frames = r.read_dim("frames")?;
    let sample_rate = r.read_u64()? as u32;
    let config = StftConfig {
        window_length: r.read_dim("window_length")?,
        hop_length: r.read_dim("hop_length")?,
        fft_length: r.read_dim("fft_length")?,
        window_kind: WindowKind::from_tag(r.read_u64()?)?,
    };
    let values = r.read_f64_vec(n_bins * n_frames)?;
    let values = Array2::from_shape_vec((n_bins, n_frames), values)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok((CountSpectrogram::from_values(values)?, config, sample_rate))
}
