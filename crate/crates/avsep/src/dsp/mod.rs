//! Deterministic signal processing: STFT/iSTFT, log-frequency resampling,
//! mask application, and waveform reconstruction with mixture phase.
//!
//! All functions here are pure; none touch global state.

mod wav;

pub use wav::{read_wav, write_wav};

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{AvsepError, Result};

pub const SAMPLE_RATE: u32 = 11_025;
pub const WINDOW_SIZE: usize = 1022;
pub const HOP: usize = 256;
pub const FREQ_BINS: usize = WINDOW_SIZE / 2 + 1; // 512
pub const LOG_BINS: usize = 256;
pub const FRAMES: usize = 256;
/// Sample count that yields exactly [`FRAMES`] frames: 255*256 + 1022.
pub const STANDARD_SAMPLES: usize = (FRAMES - 1) * HOP + WINDOW_SIZE;
pub const CLIP_SECONDS: f64 = 6.0;

const WINDOW_SUM_EPS: f64 = 1e-2;

/// Mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AvsepError::Validation("audio clip is empty".into()));
        }
        if sample_rate == 0 {
            return Err(AvsepError::Validation("sample_rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AvsepError::NonFinite(format!("sample {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Sum of two equal-length clips, scaled by 0.5 to stay within [-1, 1].
    pub fn mix(&self, other: &AudioClip) -> Result<AudioClip> {
        if self.len() != other.len() {
            return Err(AvsepError::Validation(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        if self.sample_rate != other.sample_rate {
            return Err(AvsepError::Validation("sample rate mismatch".into()));
        }
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        AudioClip::new(samples, self.sample_rate)
    }
}

/// Pads (reflection, centered) or crops (centered) a clip to exactly
/// [`STANDARD_SAMPLES`] samples so the STFT yields [`FRAMES`] frames.
pub fn prepare_clip(clip: &AudioClip) -> AudioClip {
    let n = clip.len();
    let target = STANDARD_SAMPLES;
    let samples = if n == target {
        clip.samples.clone()
    } else if n > target {
        let start = (n - target) / 2;
        clip.samples[start..start + target].to_vec()
    } else {
        let pad = target - n;
        let left = pad / 2;
        let right = pad - left;
        let mut out = Vec::with_capacity(target);
        // reflection about the first/last sample
        for i in (1..=left).rev() {
            out.push(clip.samples[i.min(n - 1)]);
        }
        out.extend_from_slice(&clip.samples);
        for i in 1..=right {
            out.push(clip.samples[n - 1 - i.min(n - 1)]);
        }
        out
    };
    AudioClip { samples, sample_rate: clip.sample_rate }
}

/// Complex linear-frequency time-frequency grid.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// F x T, F = window_size/2 + 1.
    pub bins: Array2<Complex64>,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.bins.nrows()
    }

    pub fn frames(&self) -> usize {
        self.bins.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }
}

/// Nonnegative magnitude grid on geometrically spaced frequency bins.
#[derive(Debug, Clone)]
pub struct LogSpec {
    /// LOG_BINS x T.
    pub mag: Array2<f64>,
    /// Center frequency of each log bin, Hz, strictly increasing.
    pub bin_centers: Vec<f64>,
}

impl LogSpec {
    /// log(1 + mag) compression used as network input.
    pub fn compressed(&self) -> Array2<f64> {
        self.mag.mapv(|m| (1.0 + m).ln())
    }
}

fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Short-time Fourier transform with a Hann window of [`WINDOW_SIZE`]
/// samples and hop [`HOP`]. Frames start at t*hop; no implicit centering.
pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    if clip.len() < WINDOW_SIZE {
        return Err(AvsepError::ClipTooShort { got: clip.len(), need: WINDOW_SIZE });
    }
    if let Some(i) = clip.samples.iter().position(|s| !s.is_finite()) {
        return Err(AvsepError::NonFinite(format!("sample {i}")));
    }
    let frames = (clip.len() - WINDOW_SIZE) / HOP + 1;
    let window = hann_window(WINDOW_SIZE);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(WINDOW_SIZE);

    let mut bins = Array2::<Complex64>::zeros((FREQ_BINS, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); WINDOW_SIZE];
    for t in 0..frames {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(clip.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..FREQ_BINS {
            bins[(k, t)] = buf[k];
        }
    }
    Ok(Spectrogram { bins, window_size: WINDOW_SIZE, hop: HOP, sample_rate: clip.sample_rate })
}

/// Inverse STFT by windowed overlap-add with window-square-sum
/// normalization (floored near the edges, never an error).
pub fn istft(spec: &Spectrogram, length: usize) -> Result<AudioClip> {
    if spec.freq_bins() != spec.window_size / 2 + 1 {
        return Err(AvsepError::Shape(format!(
            "spectrogram has {} bins for window {}",
            spec.freq_bins(),
            spec.window_size
        )));
    }
    let n = spec.window_size;
    let frames = spec.frames();
    let span = (frames - 1) * spec.hop + n;
    if length > span {
        return Err(AvsepError::Validation(format!(
            "requested {length} samples but spectrogram spans only {span}"
        )));
    }
    let window = hann_window(n);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);

    let mut acc = vec![0.0f64; span];
    let mut wsum = vec![0.0f64; span];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        // rebuild the full spectrum from the one-sided half
        for k in 0..spec.freq_bins() {
            buf[k] = spec.bins[(k, t)];
        }
        for k in spec.freq_bins()..n {
            buf[k] = spec.bins[(n - k, t)].conj();
        }
        ifft.process(&mut buf);
        let start = t * spec.hop;
        for i in 0..n {
            let sample = buf[i].re / n as f64;
            acc[start + i] += sample * window[i];
            wsum[start + i] += window[i] * window[i];
        }
    }
    let samples = acc
        .iter()
        .zip(&wsum)
        .take(length)
        .map(|(a, w)| a / w.max(WINDOW_SUM_EPS))
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// One interpolation row: up to two (index, weight) taps summing to 1.
pub type InterpRow = Vec<(usize, f64)>;

/// Linear-in-frequency interpolation weights between the 512-bin linear
/// grid and the 256-bin geometric grid. The geometric centers run from
/// linear bin 1 to linear bin 511 (Nyquist); DC is excluded from the log
/// grid, and its backward row copies log bin 0.
#[derive(Debug, Clone)]
pub struct FreqMap {
    /// One row per log bin, taps into the 512 linear bins.
    pub forward: Vec<InterpRow>,
    /// One row per linear bin, taps into the 256 log bins.
    pub backward: Vec<InterpRow>,
    /// Log-bin positions in linear-bin units (1..=511, geometric).
    positions: Vec<f64>,
    pub sample_rate: u32,
}

impl FreqMap {
    pub fn new() -> Self {
        Self::for_sample_rate(SAMPLE_RATE)
    }

    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let lo = 1.0f64;
        let hi = (FREQ_BINS - 1) as f64; // 511
        let ratio = hi / lo;
        let positions: Vec<f64> = (0..LOG_BINS)
            .map(|i| lo * ratio.powf(i as f64 / (LOG_BINS - 1) as f64))
            .collect();

        let forward = positions
            .iter()
            .map(|&pos| {
                let k = pos.floor() as usize;
                let frac = pos - k as f64;
                if k >= FREQ_BINS - 1 || frac == 0.0 {
                    vec![(k.min(FREQ_BINS - 1), 1.0)]
                } else {
                    vec![(k, 1.0 - frac), (k + 1, frac)]
                }
            })
            .collect();

        let mut backward: Vec<InterpRow> = Vec::with_capacity(FREQ_BINS);
        // DC bin is outside the log grid; copy the lowest log bin.
        backward.push(vec![(0, 1.0)]);
        for k in 1..FREQ_BINS {
            let pos = k as f64;
            if pos >= hi {
                backward.push(vec![(LOG_BINS - 1, 1.0)]);
                continue;
            }
            // log-bin index whose position brackets this linear bin
            let i_exact = (LOG_BINS - 1) as f64 * (pos / lo).ln() / ratio.ln();
            let mut i = i_exact.floor() as usize;
            // guard against floating point landing one cell off
            while positions[i + 1] < pos {
                i += 1;
            }
            while i > 0 && positions[i] > pos {
                i -= 1;
            }
            let frac = (pos - positions[i]) / (positions[i + 1] - positions[i]);
            backward.push(vec![(i, 1.0 - frac), (i + 1, frac)]);
        }

        Self { forward, backward, positions, sample_rate }
    }

    /// Center frequency of each log bin in Hz.
    pub fn bin_centers_hz(&self) -> Vec<f64> {
        let hz_per_bin = self.sample_rate as f64 / WINDOW_SIZE as f64;
        self.positions.iter().map(|p| p * hz_per_bin).collect()
    }
}

impl Default for FreqMap {
    fn default() -> Self {
        Self::new()
    }
}

/// Resamples the frequency axis of a 512-bin magnitude grid onto the
/// 256-bin geometric grid; time is untouched.
pub fn to_log_spec(spec: &Spectrogram, map: &FreqMap) -> Result<LogSpec> {
    if spec.freq_bins() != FREQ_BINS {
        return Err(AvsepError::Shape(format!(
            "expected {} frequency bins, got {}",
            FREQ_BINS,
            spec.freq_bins()
        )));
    }
    let magnitude = spec.magnitude();
    let frames = spec.frames();
    let mut mag = Array2::<f64>::zeros((LOG_BINS, frames));
    for (i, row) in map.forward.iter().enumerate() {
        for &(k, w) in row {
            for t in 0..frames {
                mag[(i, t)] += w * magnitude[(k, t)];
            }
        }
    }
    Ok(LogSpec { mag, bin_centers: map.bin_centers_hz() })
}

/// Lifts a 256-bin mask to the 512-bin linear grid.
pub fn lift_mask(mask: &Array2<f64>, map: &FreqMap) -> Result<Array2<f64>> {
    if mask.nrows() != LOG_BINS {
        return Err(AvsepError::Shape(format!(
            "mask has {} rows, expected {}",
            mask.nrows(),
            LOG_BINS
        )));
    }
    let frames = mask.ncols();
    let mut lifted = Array2::<f64>::zeros((FREQ_BINS, frames));
    for (k, row) in map.backward.iter().enumerate() {
        for &(i, w) in row {
            for t in 0..frames {
                lifted[(k, t)] += w * mask[(i, t)];
            }
        }
    }
    Ok(lifted)
}

/// Applies a binary 256-bin mask to a mixture spectrogram (mixture phase
/// retained) and reconstructs the waveform.
pub fn apply_mask_and_reconstruct(
    mix: &Spectrogram,
    mask: &Array2<f64>,
    map: &FreqMap,
    length: usize,
) -> Result<AudioClip> {
    if mask.ncols() != mix.frames() {
        return Err(AvsepError::Shape(format!(
            "mask has {} frames, spectrogram has {}",
            mask.ncols(),
            mix.frames()
        )));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(AvsepError::Validation("mask entries must be 0 or 1".into()));
    }
    let lifted = lift_mask(mask, map)?;
    let masked = Spectrogram {
        bins: ndarray::Zip::from(&mix.bins)
            .and(&lifted)
            .map_collect(|&b, &w| b * w),
        window_size: mix.window_size,
        hop: mix.hop,
        sample_rate: mix.sample_rate,
    };
    istft(&masked, length)
}
