//! Time-domain and spectral signal machinery.
//!
//! Real-signal FFT convention: `X[k] = sum_n x[n] exp(-2 pi i k n / N)` for
//! `k = 0 ..= N/2`, unnormalised; the inverse divides by `N`. Negative
//! frequencies are implied by Hermitian symmetry.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const DEFAULT_SAMPLE_RATE: f64 = 450e3;

#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

impl Signal {
    pub fn new(sample_rate: f64, samples: Vec<f64>) -> Result<Self> {
        ensure!(
            sample_rate.is_finite() && sample_rate > 0.0,
            "sample rate must be positive, got {sample_rate}"
        );
        ensure!(
            samples.iter().all(|s| s.is_finite()),
            "signal contains non-finite samples"
        );
        Ok(Self {
            sample_rate,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Copy zero-padded (or truncated) to `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            sample_rate: self.sample_rate,
            samples,
        }
    }
}

/// One-sided complex spectrum of a real signal of length `fft_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub sample_rate: f64,
    pub fft_len: usize,
    pub values: Vec<Complex64>,
}

impl Spectrum {
    pub fn bin_spacing(&self) -> f64 {
        self.sample_rate / self.fft_len as f64
    }

    pub fn frequency_bins(&self) -> Vec<f64> {
        frequency_bins(self.fft_len, self.sample_rate)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &Spectrum) -> bool {
        self.fft_len == other.fft_len && self.sample_rate == other.sample_rate
    }
}

/// Bin centre frequencies `k * fs / n` for `k = 0 ..= n/2`.
pub fn frequency_bins(fft_len: usize, sample_rate: f64) -> Vec<f64> {
    (0..fft_len / 2 + 1)
        .map(|k| k as f64 * sample_rate / fft_len as f64)
        .collect()
}

/// A block of equally long channels sharing one sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelRecording {
    pub sample_rate: f64,
    pub channels: Vec<Vec<f64>>,
}

impl MultichannelRecording {
    pub fn new(sample_rate: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(
            sample_rate.is_finite() && sample_rate > 0.0,
            "sample rate must be positive, got {sample_rate}"
        );
        ensure!(!channels.is_empty(), "recording has no channels");
        let frames = channels[0].len();
        for (i, c) in channels.iter().enumerate() {
            ensure!(
                c.len() == frames,
                "channel {i} has {} frames, channel 0 has {frames}",
                c.len()
            );
            ensure!(
                c.iter().all(|s| s.is_finite()),
                "channel {i} contains non-finite samples"
            );
        }
        Ok(Self {
            sample_rate,
            channels,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn frames(&self) -> usize {
        self.channels[0].len()
    }

    pub fn channel(&self, i: usize) -> Signal {
        Signal {
            sample_rate: self.sample_rate,
            samples: self.channels[i].clone(),
        }
    }

    pub(crate) fn check_same_shape(recordings: &[MultichannelRecording]) -> Result<()> {
        ensure!(!recordings.is_empty(), "no recordings given");
        let first = &recordings[0];
        for r in recordings {
            ensure!(
                r.sample_rate == first.sample_rate
                    && r.channel_count() == first.channel_count()
                    && r.frames() == first.frames(),
                "recordings differ in shape or sample rate"
            );
        }
        Ok(())
    }

    /// Sample-wise mean of several recordings with identical shape.
    pub fn mean_of(recordings: &[MultichannelRecording]) -> Result<Self> {
        Self::check_same_shape(recordings)?;
        let first = &recordings[0];
        let scale = 1.0 / recordings.len() as f64;
        let channels = (0..first.channel_count())
            .map(|c| {
                (0..first.frames())
                    .map(|n| recordings.iter().map(|r| r.channels[c][n]).sum::<f64>() * scale)
                    .collect()
            })
            .collect();
        Ok(Self {
            sample_rate: first.sample_rate,
            channels,
        })
    }
}

struct Plans {
    planner: RealFftPlanner<f64>,
}

thread_local! {
    static PLANS: RefCell<Plans> = RefCell::new(Plans { planner: RealFftPlanner::new() });
}

fn forward_plan(n: usize) -> Arc<dyn RealToComplex<f64>> {
    PLANS.with(|p| p.borrow_mut().planner.plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn ComplexToReal<f64>> {
    PLANS.with(|p| p.borrow_mut().planner.plan_fft_inverse(n))
}

/// Unnormalised forward real FFT of `x`; returns `len/2 + 1` bins.
pub(crate) fn rfft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return vec![Complex64::new(0.0, 0.0)];
    }
    let plan = forward_plan(n);
    let mut input = x.to_vec();
    let mut output = plan.make_output_vec();
    plan.process(&mut input, &mut output)
        .expect("buffer sizes come from the plan");
    output
}

/// Inverse of [`rfft`] including the `1/n` normalisation. The imaginary parts
/// of the DC bin (and of the Nyquist bin for even `n`) are discarded.
pub(crate) fn irfft(spectrum: &[Complex64], n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let plan = inverse_plan(n);
    let mut input = spectrum.to_vec();
    input[0].im = 0.0;
    if n.is_multiple_of(2) {
        input[n / 2].im = 0.0;
    }
    let mut output = plan.make_output_vec();
    plan.process(&mut input, &mut output)
        .expect("buffer sizes come from the plan");
    let scale = 1.0 / n as f64;
    output.iter_mut().for_each(|v| *v *= scale);
    output
}

pub fn fft_forward(signal: &Signal) -> Result<Spectrum> {
    ensure!(!signal.is_empty(), "cannot transform an empty signal");
    Ok(Spectrum {
        sample_rate: signal.sample_rate,
        fft_len: signal.len(),
        values: rfft(&signal.samples),
    })
}

pub fn fft_inverse(spectrum: &Spectrum) -> Result<Signal> {
    ensure!(spectrum.fft_len > 0, "cannot invert an empty spectrum");
    ensure!(
        spectrum.values.len() == spectrum.fft_len / 2 + 1,
        "spectrum has {} bins, expected {} for length {}",
        spectrum.values.len(),
        spectrum.fft_len / 2 + 1,
        spectrum.fft_len
    );
    Ok(Signal {
        sample_rate: spectrum.sample_rate,
        samples: irfft(&spectrum.values, spectrum.fft_len),
    })
}

/// Phase factor `exp(-i w tau)` for bin `k` of an `n`-point transform with a
/// delay of `delay_samples`. On the Nyquist bin of an even transform only the
/// real part is kept so the output stays real.
pub(crate) fn delay_factor(k: usize, n: usize, delay_samples: f64) -> Complex64 {
    let cycles = k as f64 * delay_samples / n as f64;
    let phase = -2.0 * PI * (cycles - cycles.floor());
    if n.is_multiple_of(2) && 2 * k == n {
        Complex64::new(phase.cos(), 0.0)
    } else {
        Complex64::from_polar(1.0, phase)
    }
}

/// Delay `x` by `delay_samples` (may be fractional or negative) with an FFT
/// phase ramp. The shift is circular: callers zero-pad by at least the delay.
pub(crate) fn delay_samples_in_place(x: &mut [f64], delay_samples: f64) {
    let n = x.len();
    if n == 0 || delay_samples == 0.0 {
        return;
    }
    let mut spec = rfft(x);
    for (k, v) in spec.iter_mut().enumerate() {
        *v *= delay_factor(k, n, delay_samples);
    }
    x.copy_from_slice(&irfft(&spec, n));
}

/// Delay a signal by `delay` seconds. The output spectrum is the input spectrum
/// times `exp(-i w delay)`, applied over the signal's own length, so content
/// pushed past either end wraps around. For even lengths the Nyquist bin can
/// only carry the real part of the phase factor; composition of two
/// fractional delays is therefore exact only for odd lengths or signals with
/// no Nyquist content.
pub fn fractional_delay(signal: &Signal, delay: f64) -> Result<Signal> {
    ensure!(delay.is_finite(), "delay must be finite");
    ensure!(
        delay.abs() < signal.duration(),
        "delay {delay} s is not shorter than the signal ({} s)",
        signal.duration()
    );
    let mut samples = signal.samples.clone();
    delay_samples_in_place(&mut samples, delay * signal.sample_rate);
    Ok(Signal {
        sample_rate: signal.sample_rate,
        samples,
    })
}

/// Parameters of an exponential (logarithmic) frequency sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
    pub sample_rate: f64,
}

impl Default for SweepParams {
    /// 2.5 ms sweep from 100 kHz down to 20 kHz.
    fn default() -> Self {
        Self {
            f_start: 100e3,
            f_end: 20e3,
            duration: 2.5e-3,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SweepParams {
    pub fn generate(&self) -> Result<Signal> {
        log_fm_sweep(self.f_start, self.f_end, self.duration, self.sample_rate)
    }
}

/// `sin(2 pi f0 T / ln(f1/f0) * (exp(t ln(f1/f0) / T) - 1))`, sampled at
/// `round(duration * sample_rate)` points starting at `t = 0`. No taper.
pub fn log_fm_sweep(f_start: f64, f_end: f64, duration: f64, sample_rate: f64) -> Result<Signal> {
    ensure!(
        f_start.is_finite() && f_end.is_finite() && f_start > 0.0 && f_end > 0.0,
        "sweep frequencies must be positive"
    );
    ensure!(f_start != f_end, "sweep start and end frequency are equal");
    ensure!(
        duration.is_finite() && duration > 0.0,
        "sweep duration must be positive"
    );
    ensure!(
        sample_rate.is_finite() && sample_rate > 2.0 * f_start.max(f_end),
        "sample rate {sample_rate} Hz does not exceed twice the top sweep frequency"
    );
    let n = (duration * sample_rate).round() as usize;
    ensure!(n > 0, "sweep is shorter than one sample");
    let rate = (f_end / f_start).ln() / duration;
    let k = 2.0 * PI * f_start / rate;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            (k * (t * rate).exp_m1()).sin()
        })
        .collect();
    Signal::new(sample_rate, samples)
}

/// Taper applied to each Welch segment. All windows are the periodic
/// (DFT-even) variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    Hann,
    Hamming,
    Blackman,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / n;
                match self {
                    Window::Rectangular => 1.0,
                    Window::Hann => 0.5 - 0.5 * x.cos(),
                    Window::Hamming => 0.54 - 0.46 * x.cos(),
                    Window::Blackman => 0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos(),
                }
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Rectangular => "rectangular",
            Window::Hann => "hann",
            Window::Hamming => "hamming",
            Window::Blackman => "blackman",
        }
    }
}

impl std::str::FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rect" | "rectangular" | "boxcar" => Ok(Window::Rectangular),
            "hann" | "hanning" => Ok(Window::Hann),
            "hamming" => Ok(Window::Hamming),
            "blackman" => Ok(Window::Blackman),
            other => Err(Error::validation(format!("unknown window `{other}`"))),
        }
    }
}

pub const DEFAULT_WELCH_SEGMENT: usize = 256;
pub const DEFAULT_WELCH_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub frequency_bins: Vec<f64>,
    /// One-sided power per hertz.
    pub power_density: Vec<f64>,
    pub segment_length: usize,
    pub overlap: f64,
    pub window: Window,
    pub segments: usize,
}

impl PsdEstimate {
    pub fn resolution(&self) -> f64 {
        if self.frequency_bins.len() > 1 {
            self.frequency_bins[1] - self.frequency_bins[0]
        } else {
            0.0
        }
    }

    /// Rectangle-rule integral over all bins, i.e. the mean signal power.
    pub fn total_power(&self) -> f64 {
        self.power_density.iter().sum::<f64>() * self.resolution()
    }
}

/// Welch estimate: mean of windowed periodograms over segments of
/// `segment_length` samples overlapping by `overlap` (a fraction), scaled as
/// a one-sided density normalised by the window power.
pub fn welch_psd(
    signal: &Signal,
    segment_length: usize,
    overlap: f64,
    window: Window,
) -> Result<PsdEstimate> {
    ensure!(segment_length >= 1, "segment length must be at least 1");
    ensure!(
        segment_length <= signal.len(),
        "segment length {segment_length} exceeds signal length {}",
        signal.len()
    );
    ensure!(
        (0.0..1.0).contains(&overlap),
        "overlap must lie in [0, 1), got {overlap}"
    );
    let noverlap = ((overlap * segment_length as f64).round() as usize).min(segment_length - 1);
    let step = segment_length - noverlap;
    let segments = (signal.len() - segment_length) / step + 1;

    let w = window.coefficients(segment_length);
    let window_power: f64 = w.iter().map(|v| v * v).sum();
    let bins = segment_length / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buf = vec![0.0; segment_length];
    for s in 0..segments {
        let seg = &signal.samples[s * step..s * step + segment_length];
        for ((b, x), wv) in buf.iter_mut().zip(seg).zip(&w) {
            *b = x * wv;
        }
        for (a, v) in acc.iter_mut().zip(rfft(&buf)) {
            *a += v.norm_sqr();
        }
    }
    let scale = 1.0 / (segments as f64 * signal.sample_rate * window_power);
    let nyquist = segment_length
        .is_multiple_of(2)
        .then_some(segment_length / 2);
    let power_density = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || Some(k) == nyquist {
                1.0
            } else {
                2.0
            };
            a * scale * one_sided
        })
        .collect();
    Ok(PsdEstimate {
        frequency_bins: frequency_bins(segment_length, signal.sample_rate),
        power_density,
        segment_length,
        overlap,
        window,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sweep_length_and_start() {
        let s = log_fm_sweep(100e3, 20e3, 2.5e-3, 450e3).unwrap();
        assert_eq!(s.len(), 1125);
        assert_eq!(s.samples[0], 0.0);
        assert!(s.samples.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn sweep_rejects_undersampling() {
        assert!(log_fm_sweep(100e3, 20e3, 2.5e-3, 200e3).is_err());
        assert!(log_fm_sweep(100e3, 100e3, 2.5e-3, 450e3).is_err());
        assert!(log_fm_sweep(-1.0, 20e3, 2.5e-3, 450e3).is_err());
        assert!(log_fm_sweep(100e3, 20e3, 0.0, 450e3).is_err());
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = vec![0.0; 64];
        x[0] = 1.0;
        let s = fft_forward(&Signal::new(1.0, x).unwrap()).unwrap();
        assert!(s.values.iter().all(|v| (v.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn bin_centred_sine_is_single_bin() {
        let n = 256;
        let x = (0..n)
            .map(|i| (2.0 * PI * 10.0 * i as f64 / n as f64).sin())
            .collect();
        let s = fft_forward(&Signal::new(n as f64, x).unwrap()).unwrap();
        let peak = s.values[10].norm();
        assert_relative_eq!(peak, n as f64 / 2.0, max_relative = 1e-12);
        for (k, v) in s.values.iter().enumerate() {
            if k != 10 {
                assert!(v.norm() < 1e-10 * peak, "bin {k}");
            }
        }
    }

    #[test]
    fn fft_round_trip() {
        for n in [1, 2, 7, 64, 1125, 1000] {
            let x = noise(n, n as u64);
            let sig = Signal::new(1e3, x.clone()).unwrap();
            let back = fft_inverse(&fft_forward(&sig).unwrap()).unwrap();
            let max = x.iter().fold(0f64, |m, v| m.max(v.abs()));
            for (a, b) in x.iter().zip(&back.samples) {
                assert!((a - b).abs() < 1e-12 * max);
            }
        }
    }

    #[test]
    fn zero_delay_is_identity() {
        let x = Signal::new(1e3, noise(100, 1)).unwrap();
        assert_eq!(fractional_delay(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn integer_delay_is_circular_shift() {
        for n in [128usize, 127] {
            let x = Signal::new(1e3, noise(n, 2)).unwrap();
            for k in [1i64, 5, -3, 40] {
                let y = fractional_delay(&x, k as f64 / 1e3).unwrap();
                for i in 0..n {
                    let src = (i as i64 - k).rem_euclid(n as i64) as usize;
                    assert!((y.samples[i] - x.samples[src]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn delay_must_be_shorter_than_signal() {
        let x = Signal::new(1e3, vec![0.0; 10]).unwrap();
        assert!(fractional_delay(&x, 0.01).is_err());
        assert!(fractional_delay(&x, -0.02).is_err());
        assert!(fractional_delay(&x, 0.0099).is_ok());
    }

    #[test]
    fn welch_of_zero_is_zero() {
        let x = Signal::new(1e3, vec![0.0; 1000]).unwrap();
        let p = welch_psd(&x, 256, 0.5, Window::Hann).unwrap();
        assert!(p.power_density.iter().all(|v| *v == 0.0));
        assert_eq!(p.frequency_bins.len(), 129);
        assert_eq!(p.segments, 6);
    }

    #[test]
    fn welch_validates_arguments() {
        let x = Signal::new(1e3, vec![0.0; 100]).unwrap();
        assert!(welch_psd(&x, 101, 0.5, Window::Hann).is_err());
        assert!(welch_psd(&x, 50, 1.0, Window::Hann).is_err());
        assert!(welch_psd(&x, 50, -0.1, Window::Hann).is_err());
    }

    #[test]
    fn window_names_parse() {
        for w in [
            Window::Rectangular,
            Window::Hann,
            Window::Hamming,
            Window::Blackman,
        ] {
            assert_eq!(w.name().parse::<Window>().unwrap(), w);
        }
        assert!("kaiser".parse::<Window>().is_err());
    }

    #[test]
    fn recording_mean_and_validation() {
        let a = MultichannelRecording::new(1.0, vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = MultichannelRecording::new(1.0, vec![vec![3.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let m = MultichannelRecording::mean_of(&[a, b]).unwrap();
        assert_eq!(m.channels, vec![vec![2.0, 2.0], vec![2.0, 2.0]]);
        assert!(MultichannelRecording::new(1.0, vec![vec![1.0], vec![]]).is_err());
        assert!(MultichannelRecording::new(1.0, vec![]).is_err());
    }
}
