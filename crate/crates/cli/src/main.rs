mod commands;
mod heatmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aperture_core::experiment::WelchParams;
use aperture_core::signals::{SweepParams, Window};

/// Exit status for bad arguments, malformed files and failed checks.
pub const EXIT_VALIDATION: u8 = 1;
/// Exit status for missing, unreadable or unwritable paths.
pub const EXIT_IO: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<aperture_core::Error> for Failure {
    fn from(e: aperture_core::Error) -> Self {
        Self {
            code: if e.is_io() { EXIT_IO } else { EXIT_VALIDATION },
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "aperture",
    version,
    about = "Acoustic array geometry, simulation, calibration and directivity analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a grid geometry file, optionally with a waveguide baffle.
    Geometry(GeometryArgs),
    /// Print the spatial-aliasing limit of a geometry (or a bare spacing).
    Fmax(FmaxArgs),
    /// Simulate a pan sweep and write it as a dataset directory.
    Simulate(SimulateArgs),
    /// Estimate calibration filters from a boresight recording or dataset.
    Calibrate(CalibrateArgs),
    /// Apply a calibration file to a recording or a dataset directory.
    ApplyCal(ApplyCalArgs),
    /// Write a directivity map (analytic) or response map (from a dataset) as CSV.
    Directivity(DirectivityArgs),
    /// Write the Welch PSD of two datasets side by side as CSV.
    Psd(PsdArgs),
}

#[derive(Args, Debug)]
pub struct GeometryArgs {
    /// Grid shape as ROWSxCOLS, e.g. 5x6.
    #[arg(long, default_value = "5x6")]
    pub grid: String,
    /// Element pitch on the PCB, metres.
    #[arg(long, default_value_t = 3.8e-3)]
    pub spacing: f64,
    #[arg(long, default_value_t = aperture_core::DEFAULT_SOUND_SPEED)]
    pub sound_speed: f64,
    /// Pitch of the baffle inlets, metres. Adds a waveguide block.
    #[arg(long)]
    pub baffle_spacing: Option<f64>,
    /// Baffle thickness, metres.
    #[arg(long, default_value_t = aperture_core::geometry::DEFAULT_BAFFLE_THICKNESS, requires = "baffle_spacing")]
    pub thickness: f64,
    /// Flat waveguide attenuation applied to every channel, dB.
    #[arg(long, default_value_t = 0.0, requires = "baffle_spacing")]
    pub attenuation_db: f64,
    /// Extra random path length per waveguide, uniform in [0, S) metres.
    #[arg(long, default_value_t = 0.0, requires = "baffle_spacing")]
    pub path_jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub jitter_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FmaxArgs {
    #[arg(long, conflicts_with = "spacing", required_unless_present = "spacing")]
    pub geometry: Option<PathBuf>,
    /// Bare element spacing, metres.
    #[arg(long)]
    pub spacing: Option<f64>,
    #[arg(long, default_value_t = aperture_core::DEFAULT_SOUND_SPEED)]
    pub sound_speed: f64,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub geometry: PathBuf,
    /// Dataset directory to create; must not exist or be empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = -90.0, allow_hyphen_values = true)]
    pub angle_start: f64,
    #[arg(long, default_value_t = 90.0, allow_hyphen_values = true)]
    pub angle_end: f64,
    #[arg(long, default_value_t = 1.0)]
    pub angle_step: f64,
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    /// Source distance from the array centre, metres.
    #[arg(long, default_value_t = 2.0)]
    pub range: f64,
    #[arg(long, default_value_t = 40.0, allow_hyphen_values = true)]
    pub snr_db: f64,
    /// Disable additive noise.
    #[arg(long)]
    pub noise_free: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SweepParams::default().f_start)]
    pub f_start: f64,
    #[arg(long, default_value_t = SweepParams::default().f_end)]
    pub f_end: f64,
    /// Sweep duration, seconds.
    #[arg(long, default_value_t = SweepParams::default().duration)]
    pub duration: f64,
    #[arg(long, default_value_t = SweepParams::default().sample_rate)]
    pub sample_rate: f64,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Boresight recording (.wav or raw) or dataset directory.
    #[arg(long)]
    pub boresight: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Repetitions were not trigger-synchronised: average magnitude and
    /// unwrapped phase instead of complex spectra.
    #[arg(long)]
    pub unsynchronized: bool,
    /// Also flatten channel magnitudes (filters become 1/H).
    #[arg(long)]
    pub equalize_magnitude: bool,
}

#[derive(Args, Debug)]
pub struct ApplyCalArgs {
    #[arg(long)]
    pub cal: PathBuf,
    /// Recording file or dataset directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DirectivityArgs {
    /// Geometry file. Required for the analytic map; overrides the dataset's
    /// own geometry otherwise.
    #[arg(long, required_unless_present = "dataset")]
    pub geometry: Option<PathBuf>,
    /// Build the response map from this dataset instead of the analytic model.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Calibration file applied to the dataset before beamforming.
    #[arg(long, requires = "dataset")]
    pub cal: Option<PathBuf>,
    /// `pcb` or `front`; defaults to `front` for baffled geometries.
    #[arg(long)]
    pub side: Option<String>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub steer: f64,
    #[arg(long, default_value_t = -90.0, allow_hyphen_values = true)]
    pub scan_start: f64,
    #[arg(long, default_value_t = 90.0, allow_hyphen_values = true)]
    pub scan_end: f64,
    #[arg(long, default_value_t = 0.5)]
    pub scan_step: f64,
    #[arg(long, default_value_t = 20e3)]
    pub f_min: f64,
    #[arg(long, default_value_t = 100e3)]
    pub f_max: f64,
    /// Frequency step of the analytic map, Hz.
    #[arg(long, default_value_t = 1e3)]
    pub f_step: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a heatmap image.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PsdArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = WelchParams::default().segment_length)]
    pub segment: usize,
    #[arg(long, default_value_t = WelchParams::default().overlap)]
    pub overlap: f64,
    #[arg(long, default_value = "hann")]
    pub window: Window,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("APERTURE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Failure::validation(format!("APERTURE_THREADS must be a count, got {raw:?}"))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::validation(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Geometry(a) => commands::geometry(&a),
        Command::Fmax(a) => commands::fmax(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::ApplyCal(a) => commands::apply_cal(&a),
        Command::Directivity(a) => commands::directivity(&a),
        Command::Psd(a) => commands::psd(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
