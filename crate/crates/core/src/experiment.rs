//! Simulated pan-sweep measurement campaign.
//!
//! A point source at `source_range` metres is panned through the horizontal
//! plane in front of the array. Each channel receives the emitted signal with
//! spherical spreading and the exact propagation delay to its front inlet,
//! then passes through its waveguide (extra delay plus flat attenuation), and
//! finally picks up independent white Gaussian noise.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamforming::{angle_grid, beamform_channel_spectra, DirectivityMap, Side};
use crate::calibration::CalibrationFilterSet;
use crate::error::{ensure, Result};
use crate::geometry::{distance, ArrayGeometry, WaveguideModel};
use crate::signals::{
    delay_factor, irfft, rfft, welch_psd, MultichannelRecording, PsdEstimate, Signal, SweepParams,
    Window, DEFAULT_WELCH_OVERLAP, DEFAULT_WELCH_SEGMENT,
};

/// Distance at which the received amplitude equals the emitted amplitude.
pub const REFERENCE_RANGE: f64 = 1.0;

/// Extra frames appended after the latest arrival so delay ringing has room.
const GUARD_FRAMES: usize = 64;

/// Longest recording the simulator will produce.
pub const MAX_FRAMES: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanSweepConfig {
    pub angle_start: f64,
    pub angle_end: f64,
    pub angle_step: f64,
    pub repetitions: usize,
    pub source_range: f64,
    pub sweep: SweepParams,
    /// `None` disables noise.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for PanSweepConfig {
    fn default() -> Self {
        Self {
            angle_start: -90.0,
            angle_end: 90.0,
            angle_step: 1.0,
            repetitions: 10,
            source_range: 2.0,
            sweep: SweepParams::default(),
            snr_db: Some(40.0),
            seed: 0,
        }
    }
}

impl PanSweepConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.angle_step.is_finite() && self.angle_step > 0.0,
            "angle step must be positive"
        );
        ensure!(
            self.angle_start.is_finite()
                && self.angle_end.is_finite()
                && self.angle_end >= self.angle_start,
            "angle range is empty"
        );
        ensure!(self.repetitions >= 1, "at least one repetition is required");
        ensure!(
            self.source_range.is_finite() && self.source_range > 0.0,
            "source range must be positive"
        );
        if let Some(snr) = self.snr_db {
            ensure!(snr.is_finite(), "SNR must be finite");
        }
        Ok(())
    }

    pub fn angles(&self) -> Result<Vec<f64>> {
        self.validate()?;
        angle_grid(self.angle_start, self.angle_end, self.angle_step)
    }
}

/// Recordings indexed as `recordings[angle][repetition]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepDataset {
    pub config: PanSweepConfig,
    pub geometry: ArrayGeometry,
    pub waveguide: Option<WaveguideModel>,
    pub angles: Vec<f64>,
    pub recordings: Vec<Vec<MultichannelRecording>>,
}

impl SweepDataset {
    pub fn new(
        config: PanSweepConfig,
        geometry: ArrayGeometry,
        waveguide: Option<WaveguideModel>,
        angles: Vec<f64>,
        recordings: Vec<Vec<MultichannelRecording>>,
    ) -> Result<Self> {
        ensure!(!angles.is_empty(), "dataset has no angles");
        ensure!(
            angles.windows(2).all(|w| w[0] < w[1]),
            "dataset angles must be strictly ascending"
        );
        ensure!(
            recordings.len() == angles.len(),
            "dataset has {} angles but {} recording groups",
            angles.len(),
            recordings.len()
        );
        let all: Vec<MultichannelRecording> = recordings.iter().flatten().cloned().collect();
        MultichannelRecording::check_same_shape(&all)?;
        for (a, reps) in angles.iter().zip(&recordings) {
            ensure!(!reps.is_empty(), "angle {a} has no recordings");
        }
        Ok(Self {
            config,
            geometry,
            waveguide,
            angles,
            recordings,
        })
    }

    pub fn recording_count(&self) -> usize {
        self.recordings.iter().map(Vec::len).sum()
    }

    pub fn sample_rate(&self) -> f64 {
        self.recordings[0][0].sample_rate
    }

    pub fn frames(&self) -> usize {
        self.recordings[0][0].frames()
    }

    pub fn channel_count(&self) -> usize {
        self.recordings[0][0].channel_count()
    }

    /// Mean over the repetitions taken at angle index `i`.
    pub fn averaged(&self, i: usize) -> Result<MultichannelRecording> {
        MultichannelRecording::mean_of(&self.recordings[i])
    }

    /// Index of the angle closest to boresight, if it is within `1e-9` deg.
    pub fn boresight_index(&self) -> Option<usize> {
        self.angles.iter().position(|a| a.abs() < 1e-9)
    }
}

/// Frames needed to hold the emitted signal after the longest possible
/// propagation plus waveguide delay for a source at `source_range`, whatever
/// its angle. Always odd, so the transform has no Nyquist bin and fractional
/// delays compose exactly.
pub fn required_frames(
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
    source_range: f64,
    emitted: &Signal,
) -> Result<usize> {
    let reach = geometry
        .positions(Side::Front)
        .iter()
        .map(|p| distance(p, &[0.0; 3]))
        .fold(0.0, f64::max);
    let longest_guide = waveguide.map_or(0.0, |w| {
        w.path_lengths().iter().copied().fold(0.0, f64::max)
    });
    let max_delay = (source_range + reach + longest_guide) / geometry.sound_speed();
    let pad = (max_delay * emitted.sample_rate).ceil();
    ensure!(
        pad.is_finite() && pad < MAX_FRAMES as f64,
        "propagation delay of {max_delay} s exceeds the recording budget"
    );
    let mut frames = emitted.len() + pad as usize + GUARD_FRAMES;
    if frames.is_multiple_of(2) {
        frames += 1;
    }
    ensure!(
        frames <= MAX_FRAMES,
        "emitted signal of {} samples plus {} frames of delay exceeds the {MAX_FRAMES}-frame budget",
        emitted.len(),
        pad
    );
    Ok(frames)
}

fn source_position(angle_deg: f64, range: f64) -> [f64; 3] {
    let d = crate::beamforming::direction_vector(angle_deg);
    [range * d[0], range * d[1], range * d[2]]
}

fn check_inputs(
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
    source_range: f64,
    emitted: &Signal,
) -> Result<()> {
    ensure!(!emitted.is_empty(), "emitted signal is empty");
    ensure!(
        source_range.is_finite() && source_range > 0.0,
        "source range must be positive"
    );
    if let Some(w) = waveguide {
        w.check_against(geometry)?;
    }
    Ok(())
}

/// Noise-free channels for a source at `source_angle`.
fn clean_channels(
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
    source_angle: f64,
    source_range: f64,
    emitted_spectrum: &[Complex64],
    frames: usize,
    sample_rate: f64,
) -> Vec<Vec<f64>> {
    let v = geometry.sound_speed();
    let src = source_position(source_angle, source_range);
    let guide_delay = waveguide.map(|w| w.delays(v));
    let guide_gain = waveguide.map(WaveguideModel::gains);
    geometry
        .positions(Side::Front)
        .iter()
        .enumerate()
        .map(|(i, port)| {
            let r = distance(&src, port);
            let delay = r / v + guide_delay.as_ref().map_or(0.0, |d| d[i]);
            let gain = REFERENCE_RANGE / r * guide_gain.as_ref().map_or(1.0, |g| g[i]);
            let shift = delay * sample_rate;
            let spec: Vec<Complex64> = emitted_spectrum
                .iter()
                .enumerate()
                .map(|(k, x)| x * delay_factor(k, frames, shift) * gain)
                .collect();
            irfft(&spec, frames)
        })
        .collect()
}

fn add_noise(channels: &mut [Vec<f64>], active_len: usize, snr_db: f64, rng: &mut impl Rng) {
    let quietest = channels
        .iter()
        .map(|c| c.iter().map(|s| s * s).sum::<f64>() / active_len as f64)
        .fold(f64::INFINITY, f64::min);
    let sigma = (quietest / 10f64.powf(snr_db / 10.0)).sqrt();
    for c in channels.iter_mut() {
        for s in c.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *s += sigma * z;
        }
    }
}

/// Simulate one capture of `emitted` from a source at `source_angle` degrees.
/// Noise power is `snr_db` below the signal power of the quietest channel,
/// where signal power is the channel energy over the emitted duration.
pub fn simulate_recording(
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
    source_angle: f64,
    source_range: f64,
    emitted: &Signal,
    snr_db: Option<f64>,
    rng: &mut impl Rng,
) -> Result<MultichannelRecording> {
    check_inputs(geometry, waveguide, source_range, emitted)?;
    let frames = required_frames(geometry, waveguide, source_range, emitted)?;
    simulate_recording_with_frames(
        geometry,
        waveguide,
        source_angle,
        source_range,
        emitted,
        snr_db,
        rng,
        frames,
    )
}

/// [`simulate_recording`] with an explicit output length, which must be at
/// least [`required_frames`].
#[allow(clippy::too_many_arguments)]
pub fn simulate_recording_with_frames(
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
    source_angle: f64,
    source_range: f64,
    emitted: &Signal,
    snr_db: Option<f64>,
    rng: &mut impl Rng,
    frames: usize,
) -> Result<MultichannelRecording> {
    check_inputs(geometry, waveguide, source_range, emitted)?;
    ensure!(source_angle.is_finite(), "source angle must be finite");
    let needed = required_frames(geometry, waveguide, source_range, emitted)?;
    ensure!(
        frames >= needed,
        "{frames} frames cannot hold the delayed signal ({needed} needed)"
    );
    let spectrum = rfft(&emitted.resized(frames).samples);
    let mut channels = clean_channels(
        geometry,
        waveguide,
        source_angle,
        source_range,
        &spectrum,
        frames,
        emitted.sample_rate,
    );
    if let Some(snr) = snr_db {
        ensure!(snr.is_finite(), "SNR must be finite");
        add_noise(&mut channels, emitted.len(), snr, rng);
    }
    MultichannelRecording::new(emitted.sample_rate, channels)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent RNG stream for one (angle, repetition) cell.
pub fn cell_rng(seed: u64, angle_index: usize, repetition: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ angle_index as u64) ^ repetition as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// Run the full pan sweep with the configured log sweep as the emitted signal.
pub fn run_pan_sweep(
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
    config: &PanSweepConfig,
) -> Result<SweepDataset> {
    let emitted = config.sweep.generate()?;
    run_pan_sweep_with_signal(geometry, waveguide, config, &emitted)
}

/// Run the pan sweep with an arbitrary emitted signal (the `sweep` field of
/// `config` is then only echoed).
pub fn run_pan_sweep_with_signal(
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
    config: &PanSweepConfig,
    emitted: &Signal,
) -> Result<SweepDataset> {
    let angles = config.angles()?;
    check_inputs(geometry, waveguide, config.source_range, emitted)?;
    let frames = required_frames(geometry, waveguide, config.source_range, emitted)?;
    let spectrum = rfft(&emitted.resized(frames).samples);
    let recordings: Vec<Vec<MultichannelRecording>> = angles
        .par_iter()
        .enumerate()
        .map(|(ai, &angle)| {
            let clean = clean_channels(
                geometry,
                waveguide,
                angle,
                config.source_range,
                &spectrum,
                frames,
                emitted.sample_rate,
            );
            (0..config.repetitions)
                .map(|rep| {
                    let mut channels = clean.clone();
                    if let Some(snr) = config.snr_db {
                        let mut rng = cell_rng(config.seed, ai, rep);
                        add_noise(&mut channels, emitted.len(), snr, &mut rng);
                    }
                    MultichannelRecording::new(emitted.sample_rate, channels)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    SweepDataset::new(
        config.clone(),
        geometry.clone(),
        waveguide.cloned(),
        angles,
        recordings,
    )
}

/// Measured-data directivity: for every source angle, average the
/// repetitions, optionally calibrate, beamform towards `steer_angle` and take
/// the magnitude spectrum of the output. Rows are source angles, columns are
/// FFT bins; each frequency is normalised to its strongest source angle.
pub fn response_map_from_dataset(
    dataset: &SweepDataset,
    geometry: &ArrayGeometry,
    side: Side,
    calibration: Option<&CalibrationFilterSet>,
    steer_angle: f64,
) -> Result<DirectivityMap> {
    ensure!(
        dataset.channel_count() == geometry.len(),
        "dataset has {} channels but geometry has {} elements",
        dataset.channel_count(),
        geometry.len()
    );
    let frames = dataset.frames();
    let fs = dataset.sample_rate();
    if let Some(cal) = calibration {
        cal.check_compatible(&dataset.recordings[0][0])?;
    }
    let linear: Vec<Vec<f64>> = (0..dataset.angles.len())
        .into_par_iter()
        .map(|i| {
            let rec = dataset.averaged(i)?;
            let mut spectra: Vec<Vec<Complex64>> = rec.channels.iter().map(|c| rfft(c)).collect();
            if let Some(cal) = calibration {
                cal.apply_to_spectra(&mut spectra);
            }
            let out = beamform_channel_spectra(&spectra, frames, fs, geometry, steer_angle, side);
            Ok(out.values.iter().map(|v| v.norm()).collect())
        })
        .collect::<Result<_>>()?;
    DirectivityMap::from_linear(
        dataset.angles.clone(),
        crate::signals::frequency_bins(frames, fs),
        &linear,
        steer_angle,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchParams {
    pub segment_length: usize,
    pub overlap: f64,
    pub window: Window,
}

impl Default for WelchParams {
    fn default() -> Self {
        Self {
            segment_length: DEFAULT_WELCH_SEGMENT,
            overlap: DEFAULT_WELCH_OVERLAP,
            window: Window::Hann,
        }
    }
}

/// Welch PSD of a dataset: repetitions are averaged per angle, then the PSD
/// of every channel at every angle is averaged into one estimate.
pub fn dataset_psd(dataset: &SweepDataset, params: &WelchParams) -> Result<PsdEstimate> {
    let per_angle: Vec<PsdEstimate> = (0..dataset.angles.len())
        .into_par_iter()
        .map(|i| {
            let rec = dataset.averaged(i)?;
            let psds = (0..rec.channel_count())
                .map(|c| {
                    welch_psd(
                        &rec.channel(c),
                        params.segment_length,
                        params.overlap,
                        params.window,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(mean_psd(&psds))
        })
        .collect::<Result<_>>()?;
    Ok(mean_psd(&per_angle))
}

fn mean_psd(psds: &[PsdEstimate]) -> PsdEstimate {
    let mut out = psds[0].clone();
    let scale = 1.0 / psds.len() as f64;
    for (k, v) in out.power_density.iter_mut().enumerate() {
        *v = psds.iter().map(|p| p.power_density[k]).sum::<f64>() * scale;
    }
    out
}

/// One PSD per dataset on a shared frequency grid, for overlaying.
pub fn psd_comparison(
    dataset_a: &SweepDataset,
    dataset_b: &SweepDataset,
    params: &WelchParams,
) -> Result<(PsdEstimate, PsdEstimate)> {
    ensure!(
        dataset_a.sample_rate() == dataset_b.sample_rate(),
        "datasets have different sample rates ({} vs {} Hz)",
        dataset_a.sample_rate(),
        dataset_b.sample_rate()
    );
    Ok((
        dataset_psd(dataset_a, params)?,
        dataset_psd(dataset_b, params)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_grid_geometry, ElementPorts};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn default_protocol_counts() {
        let c = PanSweepConfig::default();
        assert_eq!(c.angles().unwrap().len(), 181);
        assert_eq!(c.angles().unwrap().len() * c.repetitions, 1810);
    }

    #[test]
    fn config_validation() {
        let bad = [
            PanSweepConfig {
                angle_step: 0.0,
                ..Default::default()
            },
            PanSweepConfig {
                repetitions: 0,
                ..Default::default()
            },
            PanSweepConfig {
                source_range: 0.0,
                ..Default::default()
            },
            PanSweepConfig {
                angle_start: 10.0,
                angle_end: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn three_angle_sweep() {
        let g = make_grid_geometry(1, 2, 3.8e-3, 343.0).unwrap();
        let cfg = PanSweepConfig {
            angle_step: 90.0,
            repetitions: 1,
            ..Default::default()
        };
        let ds = run_pan_sweep(&g, None, &cfg).unwrap();
        assert_eq!(ds.angles, vec![-90.0, 0.0, 90.0]);
        assert_eq!(ds.recording_count(), 3);
        assert_eq!(ds.boresight_index(), Some(1));
        assert_eq!(ds.frames() % 2, 1);
    }

    #[test]
    fn boresight_equidistant_channels_match() {
        // four ports on a circle around the axis are equidistant from a boresight source
        let r = 2e-3;
        let g = ArrayGeometry::new(
            "ring",
            343.0,
            vec![
                ElementPorts::unbaffled(0, [r, 0.0, 0.0]),
                ElementPorts::unbaffled(1, [0.0, r, 0.0]),
                ElementPorts::unbaffled(2, [-r, 0.0, 0.0]),
                ElementPorts::unbaffled(3, [0.0, -r, 0.0]),
            ],
        )
        .unwrap();
        let s = SweepParams::default().generate().unwrap();
        let rec = simulate_recording(&g, None, 0.0, 2.0, &s, None, &mut rng()).unwrap();
        for c in &rec.channels[1..] {
            for (a, b) in c.iter().zip(&rec.channels[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_empty_emission_and_oversized_budget() {
        let g = make_grid_geometry(1, 2, 3.8e-3, 343.0).unwrap();
        let empty = Signal::new(450e3, vec![]).unwrap();
        assert!(simulate_recording(&g, None, 0.0, 2.0, &empty, None, &mut rng()).is_err());
        let long = Signal::new(450e3, vec![0.0; MAX_FRAMES]).unwrap();
        assert!(simulate_recording(&g, None, 0.0, 2.0, &long, None, &mut rng()).is_err());
    }

    #[test]
    fn waveguide_must_match_geometry() {
        let g = make_grid_geometry(1, 2, 3.8e-3, 343.0).unwrap();
        let wg = WaveguideModel::new(vec![1e-3; 3], vec![0.0; 3]).unwrap();
        let s = SweepParams::default().generate().unwrap();
        assert!(simulate_recording(&g, Some(&wg), 0.0, 2.0, &s, None, &mut rng()).is_err());
    }

    #[test]
    fn response_map_rejects_channel_mismatch() {
        let g = make_grid_geometry(1, 2, 3.8e-3, 343.0).unwrap();
        let cfg = PanSweepConfig {
            angle_step: 90.0,
            repetitions: 1,
            snr_db: None,
            ..Default::default()
        };
        let ds = run_pan_sweep(&g, None, &cfg).unwrap();
        let other = make_grid_geometry(1, 3, 3.8e-3, 343.0).unwrap();
        assert!(response_map_from_dataset(&ds, &other, Side::Pcb, None, 0.0).is_err());
    }
}
