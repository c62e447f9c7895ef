//! Far-field delay-and-sum beamforming in the pan (x-z) plane.
//!
//! A direction `theta` (degrees) points at `(sin theta, 0, cos theta)`; 0 is
//! boresight and positive angles lie towards `+x`. A plane wave from that
//! direction reaches port `r` after `-(r . u) / v` seconds relative to the
//! origin; all steering delays are returned with their mean removed.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::geometry::ArrayGeometry;
pub use crate::geometry::Side;
use crate::signals::{irfft, rfft, MultichannelRecording, Signal, Spectrum};

pub const DEFAULT_LOBE_THRESHOLD_DB: f64 = -3.0;
pub const DEFAULT_MAIN_LOBE_HALFWIDTH_DEG: f64 = 10.0;

/// Unit vector towards azimuth `angle_deg` in the pan plane.
pub fn direction_vector(angle_deg: f64) -> [f64; 3] {
    let a = angle_deg.to_radians();
    [a.sin(), 0.0, a.cos()]
}

/// Relative plane-wave arrival time at each selected port for a source in
/// direction `direction_deg`, seconds, mean removed.
pub fn steering_delays(geometry: &ArrayGeometry, direction_deg: f64, side: Side) -> Vec<f64> {
    let u = direction_vector(direction_deg);
    let v = geometry.sound_speed();
    let mut tau: Vec<f64> = geometry
        .positions(side)
        .iter()
        .map(|r| -(r[0] * u[0] + r[1] * u[1] + r[2] * u[2]) / v)
        .collect();
    let mean = tau.iter().sum::<f64>() / tau.len() as f64;
    tau.iter_mut().for_each(|t| *t -= mean);
    tau
}

/// Beamformer response over `scan angle x frequency` in dB, normalised so the
/// strongest angle at every frequency reads 0 dB. Exact nulls are `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectivityMap {
    pub scan_angles: Vec<f64>,
    pub frequency_bins: Vec<f64>,
    /// `response_db[angle][frequency]`.
    pub response_db: Vec<Vec<f64>>,
    pub steer_angle: f64,
}

impl DirectivityMap {
    /// Normalise a linear magnitude matrix (`[angle][frequency]`) per frequency.
    pub fn from_linear(
        scan_angles: Vec<f64>,
        frequency_bins: Vec<f64>,
        linear: &[Vec<f64>],
        steer_angle: f64,
    ) -> Result<Self> {
        ensure!(!scan_angles.is_empty(), "scan angle list is empty");
        ensure!(!frequency_bins.is_empty(), "frequency list is empty");
        ensure!(
            linear.len() == scan_angles.len()
                && linear.iter().all(|r| r.len() == frequency_bins.len()),
            "response matrix shape does not match the axes"
        );
        ensure!(
            scan_angles.windows(2).all(|w| w[0] < w[1]),
            "scan angles must be strictly ascending"
        );
        let peaks: Vec<f64> = (0..frequency_bins.len())
            .map(|j| linear.iter().map(|r| r[j]).fold(0.0, f64::max))
            .collect();
        let response_db = linear
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&peaks)
                    .map(|(&g, &peak)| {
                        if g > 0.0 && peak > 0.0 {
                            20.0 * (g / peak).log10()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            scan_angles,
            frequency_bins,
            response_db,
            steer_angle,
        })
    }

    /// Response across all scan angles at frequency index `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.response_db.iter().map(|r| r[j]).collect()
    }

    /// Scan angle of the strongest response at frequency index `j`; ties go
    /// to the lowest angle.
    pub fn argmax_angle(&self, j: usize) -> f64 {
        let mut best = 0;
        for i in 1..self.scan_angles.len() {
            if self.response_db[i][j] > self.response_db[best][j] {
                best = i;
            }
        }
        self.scan_angles[best]
    }
}

fn check_axes(scan_angles: &[f64], frequencies: &[f64]) -> Result<()> {
    ensure!(!scan_angles.is_empty(), "scan angle list is empty");
    ensure!(!frequencies.is_empty(), "frequency list is empty");
    ensure!(
        scan_angles.iter().chain(frequencies).all(|v| v.is_finite()),
        "scan angles and frequencies must be finite"
    );
    Ok(())
}

/// Linear, un-normalised narrowband response
/// `|sum_i w_i exp(i w tau_i(theta))|` with `w_i = exp(-i w tau_i(steer)) / N`,
/// returned as `[angle][frequency]`. Unity at the steering direction.
pub fn array_gain(
    geometry: &ArrayGeometry,
    steer_angle: f64,
    scan_angles: &[f64],
    frequencies: &[f64],
    side: Side,
) -> Result<Vec<Vec<f64>>> {
    check_axes(scan_angles, frequencies)?;
    let steer = steering_delays(geometry, steer_angle, side);
    let n = steer.len() as f64;
    Ok(scan_angles
        .par_iter()
        .map(|&theta| {
            let rel: Vec<f64> = steering_delays(geometry, theta, side)
                .iter()
                .zip(&steer)
                .map(|(t, s)| t - s)
                .collect();
            frequencies
                .iter()
                .map(|&f| {
                    let w = 2.0 * PI * f;
                    let sum = rel.iter().fold(Complex64::new(0.0, 0.0), |acc, dt| {
                        acc + Complex64::from_polar(1.0, w * dt)
                    });
                    sum.norm() / n
                })
                .collect()
        })
        .collect())
}

/// Analytic far-field directivity map for a delay-and-sum beamformer steered
/// to `steer_angle`.
pub fn directivity_map(
    geometry: &ArrayGeometry,
    steer_angle: f64,
    scan_angles: &[f64],
    frequencies: &[f64],
    side: Side,
) -> Result<DirectivityMap> {
    let linear = array_gain(geometry, steer_angle, scan_angles, frequencies, side)?;
    DirectivityMap::from_linear(
        scan_angles.to_vec(),
        frequencies.to_vec(),
        &linear,
        steer_angle,
    )
}

/// Mean of per-channel spectra after delaying channel `i` by `shifts[i]`
/// samples.
pub(crate) fn delay_and_sum_spectra(
    spectra: &[Vec<Complex64>],
    n: usize,
    shifts: &[f64],
) -> Vec<Complex64> {
    let bins = n / 2 + 1;
    let scale = 1.0 / spectra.len() as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); bins];
    for (spec, &shift) in spectra.iter().zip(shifts) {
        for (k, (o, x)) in out.iter_mut().zip(spec).enumerate() {
            *o += x * crate::signals::delay_factor(k, n, shift);
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    out
}

/// Advance every channel by its steering delay towards `steer_angle` and
/// average; returns the spectrum of the beamformed output.
pub fn beamform_spectrum(
    recording: &MultichannelRecording,
    geometry: &ArrayGeometry,
    steer_angle: f64,
    side: Side,
) -> Result<Spectrum> {
    ensure!(
        recording.channel_count() == geometry.len(),
        "recording has {} channels but geometry has {} elements",
        recording.channel_count(),
        geometry.len()
    );
    let spectra: Vec<Vec<Complex64>> = recording.channels.iter().map(|c| rfft(c)).collect();
    Ok(beamform_channel_spectra(
        &spectra,
        recording.frames(),
        recording.sample_rate,
        geometry,
        steer_angle,
        side,
    ))
}

pub(crate) fn beamform_channel_spectra(
    spectra: &[Vec<Complex64>],
    frames: usize,
    sample_rate: f64,
    geometry: &ArrayGeometry,
    steer_angle: f64,
    side: Side,
) -> Spectrum {
    let shifts: Vec<f64> = steering_delays(geometry, steer_angle, side)
        .iter()
        .map(|t| -t * sample_rate)
        .collect();
    Spectrum {
        sample_rate,
        fft_len: frames,
        values: delay_and_sum_spectra(spectra, frames, &shifts),
    }
}

/// Time-domain delay-and-sum output steered to `steer_angle`.
pub fn beamform_recording(
    recording: &MultichannelRecording,
    geometry: &ArrayGeometry,
    steer_angle: f64,
    side: Side,
) -> Result<Signal> {
    let spec = beamform_spectrum(recording, geometry, steer_angle, side)?;
    Ok(Signal {
        sample_rate: spec.sample_rate,
        samples: irfft(&spec.values, spec.fft_len),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lobe {
    pub angle: f64,
    pub level_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyLobes {
    pub frequency: f64,
    pub lobes: Vec<Lobe>,
    pub grating_lobe_present: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LobeReport {
    pub threshold_db: f64,
    pub main_lobe_halfwidth: f64,
    pub per_frequency: Vec<FrequencyLobes>,
}

impl LobeReport {
    pub fn any_present(&self) -> bool {
        self.per_frequency.iter().any(|f| f.grating_lobe_present)
    }
}

/// Strict local maxima (over scan angle) lying more than
/// `main_lobe_halfwidth` degrees from the steering angle and at or above
/// `threshold_db`. End points count when they exceed their only neighbour;
/// plateaus never qualify.
pub fn find_grating_lobes(
    map: &DirectivityMap,
    threshold_db: f64,
    main_lobe_halfwidth: f64,
) -> Result<LobeReport> {
    ensure!(
        threshold_db <= 0.0,
        "threshold must be at most 0 dB, got {threshold_db}"
    );
    ensure!(
        main_lobe_halfwidth >= 0.0,
        "main lobe half-width must be non-negative"
    );
    let m = map.scan_angles.len();
    let per_frequency = map
        .frequency_bins
        .iter()
        .enumerate()
        .map(|(j, &frequency)| {
            let col = map.column(j);
            let lobes: Vec<Lobe> = (0..m)
                .filter(|_| m > 1)
                .filter(|&i| i == 0 || col[i] > col[i - 1])
                .filter(|&i| i + 1 == m || col[i] > col[i + 1])
                .filter(|&i| (map.scan_angles[i] - map.steer_angle).abs() > main_lobe_halfwidth)
                .filter(|&i| col[i] >= threshold_db)
                .map(|i| Lobe {
                    angle: map.scan_angles[i],
                    level_db: col[i],
                })
                .collect();
            FrequencyLobes {
                frequency,
                grating_lobe_present: !lobes.is_empty(),
                lobes,
            }
        })
        .collect();
    Ok(LobeReport {
        threshold_db,
        main_lobe_halfwidth,
        per_frequency,
    })
}

/// `[start, start + step, ...]` up to and including `end` (within rounding).
pub fn angle_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    ensure!(
        step > 0.0 && step.is_finite(),
        "angle step must be positive"
    );
    ensure!(end >= start, "angle range is empty");
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}
