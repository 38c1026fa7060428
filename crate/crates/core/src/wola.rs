//! STFT analysis and weighted overlap-add (WOLA) synthesis.
//!
//! The same window is used for analysis and synthesis, so the squared window
//! must overlap-add to a constant at the configured hop. Synthesis divides
//! by that constant, making analysis followed by synthesis an identity on
//! every sample covered by a full set of overlapping frames.

use std::borrow::Borrow;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::beamformer::{apply_weights, BeamformerWeights};
use crate::error::{Error, Result};

pub const DEFAULT_FRAME_LEN: usize = 1024;
pub const DEFAULT_HOP: usize = 512;
pub const DEFAULT_SAMPLE_RATE: f64 = 48_000.0;

/// Frame geometry and window shared by analysis and synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig {
    frame_len: usize,
    hop: usize,
    sample_rate: f64,
    window: Vec<f64>,
    cola_gain: f64,
}

impl StftConfig {
    /// Validates the frame geometry and the constant-overlap-add property
    /// of `window^2` (relative ripple at most 1e-6).
    pub fn new(frame_len: usize, hop: usize, sample_rate: f64, window: Vec<f64>) -> Result<Self> {
        if frame_len < 2 || !frame_len.is_power_of_two() {
            return Err(Error::invalid(
                "STFT config",
                format!("frame_len {frame_len} is not a power of two >= 2"),
            ));
        }
        if hop == 0 || hop > frame_len {
            return Err(Error::invalid(
                "STFT config",
                format!("hop {hop} not in (0, {frame_len}]"),
            ));
        }
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::invalid(
                "STFT config",
                format!("sample_rate {sample_rate}"),
            ));
        }
        if window.len() != frame_len {
            return Err(Error::dim("window", frame_len, window.len()));
        }
        if window.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("STFT config", "non-finite window"));
        }
        let mut overlap = vec![0.0; hop];
        for (n, w) in window.iter().enumerate() {
            overlap[n % hop] += w * w;
        }
        let max = overlap.iter().copied().fold(f64::MIN, f64::max);
        let min = overlap.iter().copied().fold(f64::MAX, f64::min);
        let mean = overlap.iter().sum::<f64>() / hop as f64;
        if !(mean > 0.0) || (max - min) > 1e-6 * mean {
            return Err(Error::invalid(
                "STFT config",
                format!(
                    "squared window is not overlap-add constant at hop {hop} (ripple {:.3e})",
                    (max - min) / mean
                ),
            ));
        }
        Ok(Self {
            frame_len,
            hop,
            sample_rate,
            window,
            cola_gain: mean,
        })
    }

    /// Square-root periodic Hann window, valid for `hop = frame_len / 2`
    /// and `frame_len / 4`.
    pub fn sqrt_hann(frame_len: usize, hop: usize, sample_rate: f64) -> Result<Self> {
        Self::new(frame_len, hop, sample_rate, sqrt_hann_window(frame_len))
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Overlap-add sum of the squared window.
    pub fn cola_gain(&self) -> f64 {
        self.cola_gain
    }

    /// Number of full frames in a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Length of the signal synthesized from `count` frames.
    pub fn synthesized_len(&self, count: usize) -> usize {
        if count == 0 {
            0
        } else {
            (count - 1) * self.hop + self.frame_len
        }
    }

    pub fn frame_start_time(&self, frame_index: usize) -> f64 {
        (frame_index * self.hop) as f64 / self.sample_rate
    }

    pub fn frame_center_time(&self, frame_index: usize) -> f64 {
        self.frame_start_time(frame_index) + self.frame_len as f64 / 2.0 / self.sample_rate
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate / self.frame_len as f64
    }
}

impl Default for StftConfig {
    /// 1024-sample frames at 48 kHz, 50% overlap, square-root Hann.
    fn default() -> Self {
        Self::sqrt_hann(DEFAULT_FRAME_LEN, DEFAULT_HOP, DEFAULT_SAMPLE_RATE)
            .expect("default STFT config is valid")
    }
}

pub fn sqrt_hann_window(frame_len: usize) -> Vec<f64> {
    (0..frame_len)
        .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / frame_len as f64).cos()).sqrt())
        .collect()
}

/// One-sided spectra of one frame, `[bin][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub bins: Array2<Complex64>,
    pub frame_index: usize,
    pub start_time: f64,
}

/// Cached forward/inverse real FFTs for one frame length.
pub(crate) struct FrameFft {
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    time: Vec<f64>,
    spectrum: Vec<Complex64>,
    scratch_fwd: Vec<Complex64>,
    scratch_inv: Vec<Complex64>,
}

impl FrameFft {
    pub(crate) fn new(frame_len: usize) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(frame_len);
        let inverse = planner.plan_fft_inverse(frame_len);
        Self {
            time: forward.make_input_vec(),
            spectrum: forward.make_output_vec(),
            scratch_fwd: forward.make_scratch_vec(),
            scratch_inv: inverse.make_scratch_vec(),
            forward,
            inverse,
        }
    }

    /// Windowed forward transform of `samples` (length frame_len).
    pub(crate) fn forward(
        &mut self,
        samples: impl Iterator<Item = f64>,
        window: &[f64],
    ) -> &[Complex64] {
        for ((t, s), w) in self.time.iter_mut().zip(samples).zip(window) {
            *t = s * w;
        }
        self.forward
            .process_with_scratch(&mut self.time, &mut self.spectrum, &mut self.scratch_fwd)
            .expect("buffer sizes match plan");
        &self.spectrum
    }

    /// Normalized inverse transform. The imaginary parts of the DC and
    /// Nyquist bins are discarded (real part of the full inverse DFT).
    pub(crate) fn inverse(&mut self, spectrum: &[Complex64]) -> &[f64] {
        self.spectrum.copy_from_slice(spectrum);
        let last = self.spectrum.len() - 1;
        self.spectrum[0].im = 0.0;
        self.spectrum[last].im = 0.0;
        self.inverse
            .process_with_scratch(&mut self.spectrum, &mut self.time, &mut self.scratch_inv)
            .expect("buffer sizes match plan");
        let scale = 1.0 / self.time.len() as f64;
        self.time.iter_mut().for_each(|v| *v *= scale);
        &self.time
    }
}

/// Windowed one-sided spectra at hop spacing for a `[channel][sample]`
/// signal. A signal shorter than one frame yields no frames; trailing
/// samples past the last full frame are dropped.
pub fn analyze(signal: ArrayView2<'_, f64>, config: &StftConfig) -> Vec<SpectralFrame> {
    let (n_ch, len) = signal.dim();
    let mut fft = FrameFft::new(config.frame_len);
    (0..config.frame_count(len))
        .map(|t| {
            let start = t * config.hop;
            let mut bins = Array2::zeros((config.n_bins(), n_ch));
            for ch in 0..n_ch {
                let seg = signal.slice(ndarray::s![ch, start..start + config.frame_len]);
                let spec = fft.forward(seg.iter().copied(), &config.window);
                bins.column_mut(ch)
                    .iter_mut()
                    .zip(spec)
                    .for_each(|(b, s)| *b = *s);
            }
            SpectralFrame {
                bins,
                frame_index: t,
                start_time: config.frame_start_time(t),
            }
        })
        .collect()
}

/// Overlap-adds the windowed inverse transforms of mono spectra.
pub fn synthesize<S: AsRef<[Complex64]>>(frames: &[S], config: &StftConfig) -> Result<Vec<f64>> {
    let mut out = vec![0.0; config.synthesized_len(frames.len())];
    let mut fft = FrameFft::new(config.frame_len);
    for (t, frame) in frames.iter().enumerate() {
        let frame = frame.as_ref();
        if frame.len() != config.n_bins() {
            return Err(Error::Frame {
                frame: t,
                reason: format!("expected {} bins, got {}", config.n_bins(), frame.len()),
            });
        }
        overlap_add(&mut out, t * config.hop, fft.inverse(frame), config);
    }
    Ok(out)
}

fn overlap_add(out: &mut [f64], start: usize, frame: &[f64], config: &StftConfig) {
    let gain = 1.0 / config.cola_gain;
    for ((o, s), w) in out[start..start + config.frame_len]
        .iter_mut()
        .zip(frame)
        .zip(&config.window)
    {
        *o += s * w * gain;
    }
}

/// Filters a `[channel][sample]` signal frame by frame.
///
/// `provider(frame_index, start_time)` supplies the weights for each frame
/// and may change them every frame. Frame `t` reads only input samples
/// `t * hop .. t * hop + frame_len`, so output sample `n` depends on input
/// samples up to `n + frame_len` at most.
pub fn process_stream<W, F>(
    signal: ArrayView2<'_, f64>,
    config: &StftConfig,
    mut provider: F,
) -> Result<Vec<f64>>
where
    W: Borrow<BeamformerWeights>,
    F: FnMut(usize, f64) -> Result<W>,
{
    let (n_ch, len) = signal.dim();
    let count = config.frame_count(len);
    let mut out = vec![0.0; config.synthesized_len(count)];
    let mut fft = FrameFft::new(config.frame_len);
    let mut bins = Array2::<Complex64>::zeros((config.n_bins(), n_ch));
    for t in 0..count {
        let start = t * config.hop;
        for ch in 0..n_ch {
            let seg = signal.slice(ndarray::s![ch, start..start + config.frame_len]);
            let spec = fft.forward(seg.iter().copied(), &config.window);
            bins.column_mut(ch)
                .iter_mut()
                .zip(spec)
                .for_each(|(b, s)| *b = *s);
        }
        let weights = provider(t, config.frame_start_time(t))?;
        let weights = weights.borrow();
        if (weights.n_bins(), weights.n_channels()) != (config.n_bins(), n_ch) {
            return Err(Error::Frame {
                frame: t,
                reason: format!(
                    "weights are ({}, {}), frame is ({}, {n_ch})",
                    weights.n_bins(),
                    weights.n_channels(),
                    config.n_bins()
                ),
            });
        }
        let y = apply_weights(weights, bins.view())?;
        overlap_add(&mut out, start, fft.inverse(&y), config);
    }
    Ok(out)
}
