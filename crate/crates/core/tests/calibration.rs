mod common;

use aperture_core::beamforming::{angle_grid, beamform_spectrum, Side};
use aperture_core::calibration::*;
use aperture_core::experiment::simulate_recording;
use aperture_core::geometry::*;
use aperture_core::signals::{
    fft_forward, fractional_delay, MultichannelRecording, Signal, SweepParams,
};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: f64 = 450e3;

fn sweep() -> Signal {
    SweepParams::default().generate().unwrap()
}

/// Reference baffle with extra random length (0..spread) added to each guide.
fn jittered_baffle(spread: f64, seed: u64) -> (ArrayGeometry, WaveguideModel) {
    let (b, wg) = apply_baffle(&default_sensor_geometry(), 1.8e-3, 10e-3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = wg
        .path_lengths()
        .iter()
        .map(|l| l + rng.random_range(0.0..spread))
        .collect();
    (b, wg.with_path_lengths(paths).unwrap())
}

fn boresight(g: &ArrayGeometry, wg: Option<&WaveguideModel>) -> MultichannelRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    simulate_recording(g, wg, 0.0, 2.0, &sweep(), None, &mut rng).unwrap()
}

fn band_bins(n: usize, lo: f64, hi: f64) -> Vec<usize> {
    (0..n / 2 + 1)
        .filter(|k| {
            let f = *k as f64 * FS / n as f64;
            f >= lo && f <= hi
        })
        .collect()
}

#[test]
fn reference_magnitude_stays_inside_channel_envelope() {
    let (g, wg) = jittered_baffle(2.5e-3, 3);
    let rec = boresight(&g, Some(&wg));
    let s = reference_spectrum(&rec).unwrap();
    let chans: Vec<_> = (0..30)
        .map(|c| fft_forward(&rec.channel(c)).unwrap())
        .collect();
    for k in band_bins(rec.frames(), 20e3, 100e3) {
        let hi = chans.iter().map(|c| c.values[k].norm()).fold(0.0, f64::max);
        assert!(s.values[k].norm() <= hi * (1.0 + 1e-12));
    }
}

/// Least-squares slope of y against x.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn delayed_channel_shows_linear_phase() {
    let n_ch = 30;
    let delay = 2.3 / FS;
    let x = sweep().resized(2001);
    let shifted = fractional_delay(&x, delay).unwrap();
    let mut chans = vec![x.samples.clone(); n_ch];
    chans[7] = shifted.samples;
    let h = estimate_transfer_functions(&MultichannelRecording::new(FS, chans).unwrap()).unwrap();
    let bins = band_bins(2001, 25e3, 95e3);
    let freqs: Vec<f64> = bins.iter().map(|&k| k as f64 * FS / 2001.0).collect();
    let phase = unwrap_phase(&h.channels[7]);
    let ph: Vec<f64> = bins.iter().map(|&k| phase[k]).collect();
    let fitted = slope(&freqs, &ph);
    let expected = -2.0 * std::f64::consts::PI * delay;
    assert!(
        (fitted / expected - 1.0).abs() < 0.05,
        "{fitted} vs {expected}"
    );
}

#[test]
fn boresight_calibration_removes_inter_channel_delay() {
    let (g, wg) = jittered_baffle(2.5e-3, 4);
    let rec = boresight(&g, Some(&wg));
    let filters = make_calibration_filters(&estimate_transfer_functions(&rec).unwrap());
    let cal = apply_calibration(&rec, &filters).unwrap();
    // before: waveguide spread of up to 2.5 mm is several samples
    let before = (1..30)
        .map(|c| xcorr_delay(&rec.channels[c], &rec.channels[0], 12).abs())
        .fold(0.0, f64::max);
    assert!(before > 1.0, "{before}");
    for c in 1..30 {
        let d = xcorr_delay(&cal.channels[c], &cal.channels[0], 12);
        assert!(d.abs() < 0.02, "channel {c}: {d}");
    }
}

#[test]
fn calibration_is_phase_only() {
    let (g, wg) = jittered_baffle(2.5e-3, 5);
    let rec = boresight(&g, Some(&wg));
    let tfs = estimate_transfer_functions(&rec).unwrap();
    let filters = make_calibration_filters(&tfs);
    for (h, f) in tfs.channels.iter().zip(&filters.filters) {
        for (hv, fv) in h.iter().zip(f) {
            if hv.norm() > 0.0 {
                assert!((fv.norm() - 1.0).abs() < 4.0 * f64::EPSILON);
            }
        }
    }
    let off_axis = simulate_recording(
        &g,
        Some(&wg),
        25.0,
        2.0,
        &sweep(),
        Some(30.0),
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let cal = apply_calibration(&off_axis, &filters).unwrap();
    for c in 0..30 {
        let a = fft_forward(&off_axis.channel(c)).unwrap();
        let b = fft_forward(&cal.channel(c)).unwrap();
        let peak = a.values.iter().fold(0f64, |m, v| m.max(v.norm()));
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x.norm() - y.norm()).abs() <= 1e-12 * peak);
        }
        let (ea, eb) = (off_axis.channel(c).energy(), cal.channel(c).energy());
        assert!((ea - eb).abs() <= 1e-9 * ea);
    }
}

#[test]
fn calibrated_channels_share_phase_at_boresight() {
    let (g, wg) = jittered_baffle(2.5e-3, 6);
    let rec = boresight(&g, Some(&wg));
    let cal = apply_calibration(
        &rec,
        &make_calibration_filters(&estimate_transfer_functions(&rec).unwrap()),
    )
    .unwrap();
    let specs: Vec<_> = (0..30)
        .map(|c| fft_forward(&cal.channel(c)).unwrap())
        .collect();
    let bins = band_bins(rec.frames(), 20e3, 100e3);
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..30 {
        for j in i + 1..30 {
            for &k in &bins {
                let d = (specs[i].values[k] * specs[j].values[k].conj()).arg();
                sum += d * d;
                count += 1;
            }
        }
    }
    let rms = (sum / count as f64).sqrt();
    assert!(rms < 0.01, "{rms}");
}

fn peak_direction(
    rec: &MultichannelRecording,
    g: &ArrayGeometry,
    lo: f64,
    hi: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let scan = angle_grid(-90.0, 90.0, 0.5).unwrap();
    let energy: Vec<f64> = scan
        .iter()
        .map(|&a| {
            let s = beamform_spectrum(rec, g, a, Side::Front).unwrap();
            s.frequency_bins()
                .iter()
                .zip(&s.values)
                .filter(|(f, _)| **f >= lo && **f <= hi)
                .map(|(_, v)| v.norm_sqr())
                .sum()
        })
        .collect();
    let best = (0..scan.len())
        .max_by(|&a, &b| energy[a].total_cmp(&energy[b]))
        .unwrap();
    (scan[best], scan, energy)
}

#[test]
fn calibration_restores_beam_towards_off_axis_source() {
    let (g, wg) = jittered_baffle(3e-3, 8);
    let rec0 = boresight(&g, Some(&wg));
    let filters = make_calibration_filters(&estimate_transfer_functions(&rec0).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let src = simulate_recording(&g, Some(&wg), 40.0, 2.0, &sweep(), None, &mut rng).unwrap();
    let cal = apply_calibration(&src, &filters).unwrap();
    let oracle = simulate_recording(&g, None, 40.0, 2.0, &sweep(), None, &mut rng).unwrap();

    let (truth, _, _) = peak_direction(&oracle, &g, 20e3, 94e3);
    let (calibrated, scan, cal_energy) = peak_direction(&cal, &g, 20e3, 94e3);
    let (_, _, raw_energy) = peak_direction(&src, &g, 20e3, 94e3);
    assert!((calibrated - truth).abs() <= 1.0, "{calibrated} vs {truth}");
    let at40 = scan.iter().position(|a| *a == 40.0).unwrap();
    assert!(cal_energy[at40] >= raw_energy[at40]);
}

#[test]
fn unsynchronised_repetitions_fall_back_to_phase_averaging() {
    let (g, wg) = jittered_baffle(2e-3, 10);
    let base = boresight(&g, Some(&wg));
    let reps: Vec<MultichannelRecording> = [0.0, 1.3, -0.7]
        .iter()
        .map(|shift| {
            let chans = base
                .channels
                .iter()
                .map(|c| {
                    fractional_delay(&Signal::new(FS, c.clone()).unwrap(), shift / FS)
                        .unwrap()
                        .samples
                })
                .collect();
            MultichannelRecording::new(FS, chans).unwrap()
        })
        .collect();
    let single = estimate_transfer_functions(&base).unwrap();
    let averaged =
        estimate_transfer_functions_averaged(&reps, RepetitionAveraging::MagnitudePhase).unwrap();
    for &k in &band_bins(base.frames(), 25e3, 95e3) {
        for c in 0..30 {
            let d = (averaged.channels[c][k] * single.channels[c][k].conj()).arg();
            assert!(d.abs() < 1e-6, "channel {c} bin {k}: {d}");
        }
    }
    let complex =
        estimate_transfer_functions_averaged(&reps[..1], RepetitionAveraging::Complex).unwrap();
    assert_eq!(complex, single);
}

#[test]
fn phase_averaging_tolerates_noise_and_trigger_jitter() {
    let (g, wg) = jittered_baffle(2e-3, 12);
    let clean = estimate_transfer_functions(&boresight(&g, Some(&wg))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let reps: Vec<MultichannelRecording> = (0..6)
        .map(|_| {
            let rec = simulate_recording(&g, Some(&wg), 0.0, 2.0, &sweep(), Some(30.0), &mut rng)
                .unwrap();
            let shift = rng.random_range(-3.0..3.0) / FS;
            let chans = rec
                .channels
                .iter()
                .map(|c| {
                    fractional_delay(&Signal::new(FS, c.clone()).unwrap(), shift)
                        .unwrap()
                        .samples
                })
                .collect();
            MultichannelRecording::new(FS, chans).unwrap()
        })
        .collect();
    let est =
        estimate_transfer_functions_averaged(&reps, RepetitionAveraging::MagnitudePhase).unwrap();
    let bins = band_bins(reps[0].frames(), 25e3, 95e3);
    let mut sum = 0.0;
    for c in 0..30 {
        for &k in &bins {
            let d = (est.channels[c][k] * clean.channels[c][k].conj()).arg();
            sum += d * d;
        }
    }
    let rms = (sum / (30 * bins.len()) as f64).sqrt();
    assert!(rms < 0.05, "{rms}");
}
