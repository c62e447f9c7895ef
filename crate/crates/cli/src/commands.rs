use std::path::Path;

use aperture_core::beamforming::{angle_grid, directivity_map, DirectivityMap, Side};
use aperture_core::calibration::{
    apply_calibration, estimate_transfer_functions_averaged, FilterMode, RepetitionAveraging,
};
use aperture_core::experiment::{
    psd_comparison, response_map_from_dataset, run_pan_sweep, PanSweepConfig, SweepDataset,
    WelchParams,
};
use aperture_core::geometry::{
    apply_baffle, make_grid_geometry, max_unaliased_frequency, min_spacing, ArrayGeometry,
};
use aperture_core::io;
use aperture_core::signals::{MultichannelRecording, SweepParams};

use crate::{
    heatmap, ApplyCalArgs, CalibrateArgs, DirectivityArgs, Failure, FmaxArgs, GeometryArgs,
    PsdArgs, SimulateArgs,
};

type Outcome = Result<(), Failure>;

fn parse_grid(text: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::validation(format!("grid must look like ROWSxCOLS, got {text:?}"));
    let lower = text.to_ascii_lowercase();
    let (r, c) = lower.split_once('x').ok_or_else(bad)?;
    Ok((
        r.trim().parse().map_err(|_| bad())?,
        c.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn geometry(a: &GeometryArgs) -> Outcome {
    let (rows, cols) = parse_grid(&a.grid)?;
    let pcb = make_grid_geometry(rows, cols, a.spacing, a.sound_speed)?;
    match a.baffle_spacing {
        None => io::write_geometry(&a.out, &pcb, None)?,
        Some(front) => {
            let (baffled, wg) = apply_baffle(&pcb, front, a.thickness)?;
            let wg = wg
                .with_uniform_attenuation(a.attenuation_db)?
                .with_path_jitter(a.path_jitter, a.jitter_seed)?;
            io::write_geometry(&a.out, &baffled, Some(&wg))?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_limit(side: &str, spacing: f64, v: f64) -> Outcome {
    let f = max_unaliased_frequency(spacing, v)?;
    println!("{side}: spacing {:.3} mm, f_max {f:.2} Hz", spacing * 1e3);
    Ok(())
}

pub fn fmax(a: &FmaxArgs) -> Outcome {
    if let Some(d) = a.spacing {
        return print_limit("spacing", d, a.sound_speed);
    }
    let path = a
        .geometry
        .as_deref()
        .expect("clap requires geometry or spacing");
    let (g, _) = io::read_geometry(path)?;
    print_limit("pcb", min_spacing(&g, Side::Pcb)?, g.sound_speed())?;
    if g.is_baffled() {
        print_limit("front", min_spacing(&g, Side::Front)?, g.sound_speed())?;
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Outcome {
    let (g, wg) = io::read_geometry(&a.geometry)?;
    let config = PanSweepConfig {
        angle_start: a.angle_start,
        angle_end: a.angle_end,
        angle_step: a.angle_step,
        repetitions: a.repetitions,
        source_range: a.range,
        sweep: SweepParams {
            f_start: a.f_start,
            f_end: a.f_end,
            duration: a.duration,
            sample_rate: a.sample_rate,
        },
        snr_db: (!a.noise_free).then_some(a.snr_db),
        seed: a.seed,
    };
    config.validate()?;
    let ds = run_pan_sweep(&g, wg.as_ref(), &config)?;
    io::write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} recordings to {}",
        ds.recording_count(),
        a.out.display()
    );
    Ok(())
}

fn boresight_recordings(path: &Path) -> Result<Vec<MultichannelRecording>, Failure> {
    if !io::is_dataset_dir(path) {
        return Ok(vec![io::read_recording(path)?]);
    }
    let ds = io::read_dataset(path)?;
    let i = ds.boresight_index().ok_or_else(|| {
        Failure::validation(format!("{} has no 0 degree recordings", path.display()))
    })?;
    Ok(ds.recordings[i].clone())
}

pub fn calibrate(a: &CalibrateArgs) -> Outcome {
    let reps = boresight_recordings(&a.boresight)?;
    let averaging = if a.unsynchronized {
        RepetitionAveraging::MagnitudePhase
    } else {
        RepetitionAveraging::Complex
    };
    let tfs = estimate_transfer_functions_averaged(&reps, averaging)?;
    let mode = if a.equalize_magnitude {
        FilterMode::Equalize
    } else {
        FilterMode::PhaseOnly
    };
    io::write_calibration(&a.out, &tfs, mode)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn apply_cal(a: &ApplyCalArgs) -> Outcome {
    let (_, filters) = io::read_calibration(&a.cal)?;
    if io::is_dataset_dir(&a.input) {
        let ds = io::read_dataset(&a.input)?;
        let recordings = ds
            .recordings
            .iter()
            .map(|reps| {
                reps.iter()
                    .map(|r| apply_calibration(r, &filters))
                    .collect()
            })
            .collect::<Result<Vec<Vec<_>>, _>>()?;
        let out = SweepDataset::new(ds.config, ds.geometry, ds.waveguide, ds.angles, recordings)?;
        io::write_dataset(&a.out, &out)?;
    } else {
        let rec = io::read_recording(&a.input)?;
        io::write_recording(&a.out, &apply_calibration(&rec, &filters)?)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn resolve_side(text: Option<&str>, g: &ArrayGeometry) -> Result<Side, Failure> {
    match text {
        Some(s) => Ok(s.parse()?),
        None if g.is_baffled() => Ok(Side::Front),
        None => Ok(Side::Pcb),
    }
}

fn frequency_grid(a: &DirectivityArgs) -> Result<Vec<f64>, Failure> {
    if !(a.f_step > 0.0 && a.f_min > 0.0 && a.f_max >= a.f_min) {
        return Err(Failure::validation(
            "frequency band needs 0 < f-min <= f-max and a positive step",
        ));
    }
    Ok(angle_grid(a.f_min, a.f_max, a.f_step)?)
}

fn crop_band(map: DirectivityMap, lo: f64, hi: f64) -> Result<DirectivityMap, Failure> {
    let keep: Vec<usize> = (0..map.frequency_bins.len())
        .filter(|&j| (lo..=hi).contains(&map.frequency_bins[j]))
        .collect();
    if keep.is_empty() {
        return Err(Failure::validation(format!(
            "no frequency bins between {lo} and {hi} Hz"
        )));
    }
    Ok(DirectivityMap {
        frequency_bins: keep.iter().map(|&j| map.frequency_bins[j]).collect(),
        response_db: map
            .response_db
            .iter()
            .map(|row| keep.iter().map(|&j| row[j]).collect())
            .collect(),
        ..map
    })
}

pub fn directivity(a: &DirectivityArgs) -> Outcome {
    let map = match &a.dataset {
        Some(dir) => {
            let ds = io::read_dataset(dir)?;
            let filters = match &a.cal {
                Some(p) => Some(io::read_calibration(p)?.1),
                None => None,
            };
            let g = match &a.geometry {
                Some(p) => io::read_geometry(p)?.0,
                None => ds.geometry.clone(),
            };
            let side = resolve_side(a.side.as_deref(), &g)?;
            let full = response_map_from_dataset(&ds, &g, side, filters.as_ref(), a.steer)?;
            crop_band(full, a.f_min, a.f_max)?
        }
        None => {
            let path = a
                .geometry
                .as_deref()
                .expect("clap requires geometry without dataset");
            let (g, _) = io::read_geometry(path)?;
            let side = resolve_side(a.side.as_deref(), &g)?;
            let angles = angle_grid(a.scan_start, a.scan_end, a.scan_step)?;
            directivity_map(&g, a.steer, &angles, &frequency_grid(a)?, side)?
        }
    };
    let csv = io::directivity_csv(&map);
    if let Some(png) = &a.png {
        io::write_atomic(png, &heatmap::encode(&map))?;
    }
    io::write_atomic(&a.out, csv.as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn psd(a: &PsdArgs) -> Outcome {
    let da = io::read_dataset(&a.a)?;
    let db = io::read_dataset(&a.b)?;
    let params = WelchParams {
        segment_length: a.segment,
        overlap: a.overlap,
        window: a.window,
    };
    let (pa, pb) = psd_comparison(&da, &db, &params)?;
    let csv = io::psd_csv(&[("power_density_a", &pa), ("power_density_b", &pb)])?;
    io::write_atomic(&a.out, csv.as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(())
}
