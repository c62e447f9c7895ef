//! Modelling of ultrasonic MEMS microphone arrays fitted with aperture-reducing
//! waveguide baffles.
//!
//! The crate covers the whole chain used to study grating lobes in such arrays:
//!
//! * [`geometry`]: element layouts, baffle lofting and the spatial-aliasing limit
//! * [`signals`]: log sweeps, FFT helpers, fractional delay and Welch PSD
//! * [`beamforming`]: delay-and-sum steering, directivity maps, grating-lobe search
//! * [`calibration`]: boresight transfer-function estimation and phase-only filters
//! * [`experiment`]: a simulated pan-sweep measurement campaign
//! * [`io`]: the on-disk formats (geometry/calibration JSON, WAV, raw, CSV, datasets)

pub mod beamforming;
pub mod calibration;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod signals;

pub use beamforming::{
    beamform_recording, directivity_map, find_grating_lobes, steering_delays, DirectivityMap,
    LobeReport, Side,
};
pub use calibration::{
    apply_calibration, estimate_transfer_functions, make_calibration_filters, reference_spectrum,
    CalibrationFilterSet, FilterMode, TransferFunctionSet,
};
pub use error::{Error, Result};
pub use experiment::{
    psd_comparison, response_map_from_dataset, run_pan_sweep, simulate_recording, PanSweepConfig,
    SweepDataset,
};
pub use geometry::{
    apply_baffle, make_grid_geometry, max_unaliased_frequency, min_spacing, ArrayGeometry,
    ElementPorts, WaveguideModel,
};
pub use signals::{
    fft_forward, fft_inverse, fractional_delay, log_fm_sweep, welch_psd, MultichannelRecording,
    PsdEstimate, Signal, Spectrum, Window,
};

/// Speed of sound in air used throughout, m/s.
pub const DEFAULT_SOUND_SPEED: f64 = 343.0;
