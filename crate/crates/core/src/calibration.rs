//! Boresight calibration of waveguide-induced phase shifts.
//!
//! With the source on boresight every channel hears the same wavefront, so any
//! difference between channel spectra is due to the channel itself. Each
//! channel's transfer function is estimated against the channel mean and its
//! phase is then cancelled with a unit-magnitude conjugate filter; the
//! magnitude response is left in place.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::signals::{frequency_bins, irfft, rfft, MultichannelRecording, Spectrum};

/// Bins whose magnitude falls below this fraction of the channel (or
/// reference) maximum are treated as out of band and calibrated to identity.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunctionSet {
    pub sample_rate: f64,
    pub fft_len: usize,
    /// `channels[i][k]` is `H_i` at bin `k`.
    pub channels: Vec<Vec<Complex64>>,
}

impl TransferFunctionSet {
    pub fn new(sample_rate: f64, fft_len: usize, channels: Vec<Vec<Complex64>>) -> Result<Self> {
        ensure!(
            sample_rate.is_finite() && sample_rate > 0.0,
            "sample rate must be positive"
        );
        ensure!(fft_len > 0, "transform length must be positive");
        ensure!(
            !channels.is_empty(),
            "transfer-function set has no channels"
        );
        for (i, c) in channels.iter().enumerate() {
            ensure!(
                c.len() == fft_len / 2 + 1,
                "channel {i} has {} bins, expected {}",
                c.len(),
                fft_len / 2 + 1
            );
            ensure!(
                c.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
                "channel {i} has non-finite values"
            );
        }
        Ok(Self {
            sample_rate,
            fft_len,
            channels,
        })
    }

    pub fn frequency_bins(&self) -> Vec<f64> {
        frequency_bins(self.fft_len, self.sample_rate)
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// How the calibration filter treats the magnitude of `H_i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum FilterMode {
    /// `conj(H_i / |H_i|)`: cancels phase only.
    #[default]
    PhaseOnly,
    /// `1 / H_i`: also flattens each channel's magnitude. Off by default.
    Equalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFilterSet {
    pub sample_rate: f64,
    pub fft_len: usize,
    pub mode: FilterMode,
    pub filters: Vec<Vec<Complex64>>,
}

impl CalibrationFilterSet {
    pub fn frequency_bins(&self) -> Vec<f64> {
        frequency_bins(self.fft_len, self.sample_rate)
    }

    pub fn channel_count(&self) -> usize {
        self.filters.len()
    }

    /// Multiply channel spectra in place.
    pub(crate) fn apply_to_spectra(&self, spectra: &mut [Vec<Complex64>]) {
        for (spec, filt) in spectra.iter_mut().zip(&self.filters) {
            for (x, h) in spec.iter_mut().zip(filt) {
                *x *= h;
            }
        }
    }

    pub(crate) fn check_compatible(&self, recording: &MultichannelRecording) -> Result<()> {
        ensure!(
            recording.channel_count() == self.channel_count(),
            "recording has {} channels but calibration has {}",
            recording.channel_count(),
            self.channel_count()
        );
        ensure!(
            recording.frames() == self.fft_len && recording.sample_rate == self.sample_rate,
            "recording grid ({} frames at {} Hz) does not match calibration ({} frames at {} Hz)",
            recording.frames(),
            recording.sample_rate,
            self.fft_len,
            self.sample_rate
        );
        Ok(())
    }
}

fn channel_spectra(recording: &MultichannelRecording) -> Vec<Vec<Complex64>> {
    recording.channels.par_iter().map(|c| rfft(c)).collect()
}

fn mean_spectrum(spectra: &[Vec<Complex64>]) -> Vec<Complex64> {
    let scale = 1.0 / spectra.len() as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); spectra[0].len()];
    for s in spectra {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    out
}

/// Complex mean of all channel spectra, used as the stand-in for the emitted
/// spectrum.
pub fn reference_spectrum(recording: &MultichannelRecording) -> Result<Spectrum> {
    ensure!(recording.frames() > 0, "recording is empty");
    Ok(Spectrum {
        sample_rate: recording.sample_rate,
        fft_len: recording.frames(),
        values: mean_spectrum(&channel_spectra(recording)),
    })
}

fn transfer_from_spectra(
    spectra: &[Vec<Complex64>],
    fft_len: usize,
    sample_rate: f64,
) -> Result<TransferFunctionSet> {
    let reference = mean_spectrum(spectra);
    let peak = reference.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    if peak == 0.0 || !peak.is_finite() {
        return Err(Error::DegenerateReference(
            "channel mean is zero at every frequency".into(),
        ));
    }
    let floor = RELATIVE_FLOOR * peak;
    let one = Complex64::new(1.0, 0.0);
    let channels = spectra
        .iter()
        .map(|spec| {
            spec.iter()
                .zip(&reference)
                .map(|(x, s)| if s.norm() < floor { one } else { x / s })
                .collect()
        })
        .collect();
    TransferFunctionSet::new(sample_rate, fft_len, channels)
}

/// `H_i = S_i / S` per bin, where `S` is the channel mean. Bins where `|S|`
/// is below [`RELATIVE_FLOOR`] of its peak get `H_i = 1`.
pub fn estimate_transfer_functions(
    boresight: &MultichannelRecording,
) -> Result<TransferFunctionSet> {
    ensure!(boresight.frames() > 0, "recording is empty");
    transfer_from_spectra(
        &channel_spectra(boresight),
        boresight.frames(),
        boresight.sample_rate,
    )
}

/// How repeated boresight captures are combined before estimation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RepetitionAveraging {
    /// Complex (equivalently time-domain) mean. Requires synchronised triggers.
    #[default]
    Complex,
    /// Mean magnitude and mean phase per channel, with each repetition's
    /// phase measured against its own array reference. For data whose
    /// repetitions were not trigger-synchronised.
    MagnitudePhase,
}

/// Estimate from several boresight repetitions.
pub fn estimate_transfer_functions_averaged(
    repetitions: &[MultichannelRecording],
    averaging: RepetitionAveraging,
) -> Result<TransferFunctionSet> {
    ensure!(!repetitions.is_empty(), "no boresight recordings given");
    match averaging {
        RepetitionAveraging::Complex => {
            estimate_transfer_functions(&MultichannelRecording::mean_of(repetitions)?)
        }
        RepetitionAveraging::MagnitudePhase => {
            MultichannelRecording::check_same_shape(repetitions)?;
            let first = &repetitions[0];
            ensure!(first.frames() > 0, "recording is empty");
            let per_rep: Vec<Vec<Vec<Complex64>>> =
                repetitions.iter().map(channel_spectra).collect();
            // Phase is taken relative to each repetition's own channel mean,
            // so a trigger offset shared by all channels drops out before
            // averaging. Unwrapping along frequency instead picks up
            // repetition-dependent 2*pi jumps in the noise below the band.
            let references: Vec<Vec<Complex64>> =
                per_rep.iter().map(|r| mean_spectrum(r)).collect();
            let scale = 1.0 / repetitions.len() as f64;
            let averaged: Vec<Vec<Complex64>> = (0..first.channel_count())
                .map(|c| {
                    let bins = per_rep[0][c].len();
                    (0..bins)
                        .map(|k| {
                            let mut mag = 0.0;
                            let mut direction = Complex64::new(0.0, 0.0);
                            for (rep, reference) in per_rep.iter().zip(&references) {
                                let x = rep[c][k];
                                mag += x.norm() * scale;
                                let rel = x * reference[k].conj();
                                if rel.norm() > 0.0 {
                                    direction += rel / rel.norm();
                                }
                            }
                            Complex64::from_polar(mag, direction.arg())
                        })
                        .collect()
                })
                .collect();
            transfer_from_spectra(&averaged, first.frames(), first.sample_rate)
        }
    }
}

/// Phase of each bin, unwrapped along frequency.
pub fn unwrap_phase(values: &[Complex64]) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(values.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for v in values {
        let p = v.arg();
        if let Some(q) = prev {
            let d = p - q;
            offset -= tau * (d / tau).round();
        }
        out.push(p + offset);
        prev = Some(p);
    }
    out
}

/// Phase-only calibration filters `conj(H_i / |H_i|)`.
pub fn make_calibration_filters(tfs: &TransferFunctionSet) -> CalibrationFilterSet {
    make_calibration_filters_with_mode(tfs, FilterMode::PhaseOnly)
}

pub fn make_calibration_filters_with_mode(
    tfs: &TransferFunctionSet,
    mode: FilterMode,
) -> CalibrationFilterSet {
    let one = Complex64::new(1.0, 0.0);
    let filters = tfs
        .channels
        .iter()
        .map(|h| {
            let peak = h.iter().fold(0.0f64, |m, v| m.max(v.norm()));
            let floor = RELATIVE_FLOOR * peak;
            h.iter()
                .map(|v| {
                    let mag = v.norm();
                    if mag == 0.0 || mag < floor {
                        return one;
                    }
                    match mode {
                        FilterMode::PhaseOnly => (v / mag).conj(),
                        FilterMode::Equalize => v.inv(),
                    }
                })
                .collect()
        })
        .collect();
    CalibrationFilterSet {
        sample_rate: tfs.sample_rate,
        fft_len: tfs.fft_len,
        mode,
        filters,
    }
}

/// Filter every channel with its calibration filter over the full recording
/// length.
pub fn apply_calibration(
    recording: &MultichannelRecording,
    filters: &CalibrationFilterSet,
) -> Result<MultichannelRecording> {
    filters.check_compatible(recording)?;
    let n = recording.frames();
    let channels = recording
        .channels
        .par_iter()
        .zip(&filters.filters)
        .map(|(x, h)| {
            let mut spec = rfft(x);
            for (s, f) in spec.iter_mut().zip(h) {
                *s *= f;
            }
            irfft(&spec, n)
        })
        .collect();
    MultichannelRecording::new(recording.sample_rate, channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn tfs(values: Vec<Complex64>) -> TransferFunctionSet {
        let n = (values.len() - 1) * 2;
        TransferFunctionSet::new(1.0, n, vec![values]).unwrap()
    }

    #[test]
    fn identity_transfer_gives_identity_filter() {
        let f = make_calibration_filters(&tfs(vec![c(1.0, 0.0); 5]));
        assert!(f.filters[0].iter().all(|v| *v == c(1.0, 0.0)));
    }

    #[test]
    fn filter_negates_phase() {
        let phi = 0.7;
        let f = make_calibration_filters(&tfs(vec![Complex64::from_polar(1.0, phi); 5]));
        for v in &f.filters[0] {
            assert!((v - Complex64::from_polar(1.0, -phi)).norm() < 1e-15);
        }
    }

    #[test]
    fn filter_discards_magnitude() {
        let f = make_calibration_filters(&tfs(vec![Complex64::from_polar(3.0, PI / 4.0); 5]));
        for v in &f.filters[0] {
            assert!((v.norm() - 1.0).abs() < 1e-15);
            assert!((v.arg() + PI / 4.0).abs() < 1e-15);
        }
        let eq = make_calibration_filters_with_mode(
            &tfs(vec![Complex64::from_polar(3.0, PI / 4.0); 5]),
            FilterMode::Equalize,
        );
        assert!((eq.filters[0][0].norm() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_bins_get_identity() {
        let f = make_calibration_filters(&tfs(vec![c(0.0, 0.0), c(0.0, 2.0), c(1e-9, 0.0)]));
        assert_eq!(f.filters[0][0], c(1.0, 0.0));
        assert!((f.filters[0][1] - c(0.0, -1.0)).norm() < 1e-15);
        assert_eq!(f.filters[0][2], c(1.0, 0.0));
    }

    #[test]
    fn reference_of_identical_channels() {
        let x = vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.5];
        let rec = MultichannelRecording::new(10.0, vec![x.clone(); 4]).unwrap();
        let s = reference_spectrum(&rec).unwrap();
        let single = rfft(&x);
        for (a, b) in s.values.iter().zip(&single) {
            assert!((a - b).norm() < 1e-14);
        }
        let h = estimate_transfer_functions(&rec).unwrap();
        for ch in &h.channels {
            assert!(ch.iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-14));
        }
    }

    #[test]
    fn opposite_channels_cancel() {
        let x = vec![0.3, -1.0, 2.0, 0.5];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let rec = MultichannelRecording::new(10.0, vec![x, neg]).unwrap();
        let s = reference_spectrum(&rec).unwrap();
        assert!(s.values.iter().all(|v| v.norm() == 0.0));
        assert!(matches!(
            estimate_transfer_functions(&rec),
            Err(Error::DegenerateReference(_))
        ));
    }

    #[test]
    fn gain_on_one_channel() {
        // H_i = g S / ((g + N - 1) S / N) = g N / (g + N - 1)
        let (g, n) = (2.5, 6usize);
        let x = vec![1.0, 0.2, -0.7, 0.4, 0.9, -0.3, 0.1, 0.0];
        let mut chans = vec![x.clone(); n];
        chans[2] = x.iter().map(|v| v * g).collect();
        let h =
            estimate_transfer_functions(&MultichannelRecording::new(1.0, chans).unwrap()).unwrap();
        let expected = g * n as f64 / (g + n as f64 - 1.0);
        for v in &h.channels[2] {
            assert!((v.norm() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_filters_leave_recording_unchanged() {
        let rec = MultichannelRecording::new(
            8.0,
            vec![vec![0.1, 0.5, -0.2, 0.9, 0.3, 0.0, -1.0, 0.7]; 3],
        )
        .unwrap();
        let filters = CalibrationFilterSet {
            sample_rate: 8.0,
            fft_len: 8,
            mode: FilterMode::PhaseOnly,
            filters: vec![vec![c(1.0, 0.0); 5]; 3],
        };
        let out = apply_calibration(&rec, &filters).unwrap();
        for (a, b) in out
            .channels
            .iter()
            .flatten()
            .zip(rec.channels.iter().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let rec = MultichannelRecording::new(8.0, vec![vec![0.0; 8]; 2]).unwrap();
        let filters = CalibrationFilterSet {
            sample_rate: 8.0,
            fft_len: 10,
            mode: FilterMode::PhaseOnly,
            filters: vec![vec![c(1.0, 0.0); 6]; 2],
        };
        assert!(apply_calibration(&rec, &filters).is_err());
        let wrong_count = CalibrationFilterSet {
            fft_len: 8,
            filters: vec![vec![c(1.0, 0.0); 5]; 3],
            ..filters
        };
        assert!(apply_calibration(&rec, &wrong_count).is_err());
    }

    #[test]
    fn unwrap_follows_linear_phase() {
        let vals: Vec<Complex64> = (0..50)
            .map(|k| Complex64::from_polar(1.0, -0.4 * k as f64))
            .collect();
        let p = unwrap_phase(&vals);
        for (k, v) in p.iter().enumerate() {
            assert!((v + 0.4 * k as f64).abs() < 1e-12);
        }
    }
}
