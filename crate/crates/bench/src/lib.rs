//! Shared fixtures for the criterion benchmarks in `benches/`.

use aperture_core::experiment::simulate_recording;
use aperture_core::geometry::{
    apply_baffle, default_sensor_geometry, ArrayGeometry, WaveguideModel,
};
use aperture_core::signals::{MultichannelRecording, SweepParams};
use rand_chacha::rand_core::SeedableRng;

/// The 5x6 array behind a 1.8 mm baffle with a few millimetres of path spread.
pub fn baffled_array() -> (ArrayGeometry, WaveguideModel) {
    let (g, wg) = apply_baffle(&default_sensor_geometry(), 1.8e-3, 10e-3).expect("default baffle");
    (g, wg.with_path_jitter(2.5e-3, 1).expect("valid jitter"))
}

/// One noisy capture of the default sweep from `angle` degrees.
pub fn capture(angle: f64) -> MultichannelRecording {
    let (g, wg) = baffled_array();
    let sweep = SweepParams::default().generate().expect("default sweep");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    simulate_recording(&g, Some(&wg), angle, 2.0, &sweep, Some(40.0), &mut rng).expect("simulation")
}
