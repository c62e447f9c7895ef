//! On-disk formats.
//!
//! * geometry file: JSON, `label`, `sound_speed`, `elements[]`, optional `waveguide`
//! * calibration file: JSON, `frequency_bins[]` plus `h_real[]`/`h_imag[]` per channel
//! * recordings: 32-bit float WAV, or raw little-endian `f32` (interleaved)
//!   with a `<file>.hdr` text sidecar holding `channels`, `sample_rate`, `frames`
//! * CSV: PSD rows `frequency_hz,power_density` and directivity matrices
//! * datasets: a directory of `angle_{+DDD}_rep_{RR}.wav` plus `manifest.json`
//!
//! Floats are written in shortest round-trip form, so every value reads back
//! bit-identical. Every file is written to a temporary name and renamed into
//! place, so a failed run leaves no partial output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamforming::DirectivityMap;
use crate::calibration::{
    make_calibration_filters_with_mode, CalibrationFilterSet, FilterMode, TransferFunctionSet,
};
use crate::error::{Error, Result};
use crate::experiment::{PanSweepConfig, SweepDataset};
use crate::geometry::{ArrayGeometry, ElementPorts, WaveguideModel};
use crate::signals::{frequency_bins, MultichannelRecording, PsdEstimate};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const DATASET_GEOMETRY_NAME: &str = "geometry.json";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// Write `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ElementRecord {
    index: usize,
    pcb_port: [f64; 3],
    front_port: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WaveguideRecord {
    path_lengths: Vec<f64>,
    attenuation_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeometryRecord {
    label: String,
    sound_speed: f64,
    elements: Vec<ElementRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    waveguide: Option<WaveguideRecord>,
}

/// Serialise a geometry (and optional waveguide) to the geometry-file JSON.
pub fn geometry_to_json(geometry: &ArrayGeometry, waveguide: Option<&WaveguideModel>) -> String {
    let record = GeometryRecord {
        label: geometry.label().to_owned(),
        sound_speed: geometry.sound_speed(),
        elements: geometry
            .elements()
            .iter()
            .map(|e| ElementRecord {
                index: e.index,
                pcb_port: e.pcb_port,
                front_port: e.front_port,
            })
            .collect(),
        waveguide: waveguide.map(|w| WaveguideRecord {
            path_lengths: w.path_lengths().to_vec(),
            attenuation_db: w.attenuation_db().to_vec(),
        }),
    };
    to_json(&record)
}

/// Parse and validate geometry-file JSON.
pub fn geometry_from_json(text: &str) -> Result<(ArrayGeometry, Option<WaveguideModel>)> {
    let record: GeometryRecord =
        serde_json::from_str(text).map_err(|e| Error::validation(e.to_string()))?;
    let geometry = ArrayGeometry::new(
        record.label,
        record.sound_speed,
        record
            .elements
            .into_iter()
            .map(|e| ElementPorts {
                index: e.index,
                pcb_port: e.pcb_port,
                front_port: e.front_port,
            })
            .collect(),
    )?;
    let waveguide = match record.waveguide {
        Some(w) => {
            let model = WaveguideModel::new(w.path_lengths, w.attenuation_db)?;
            model.check_against(&geometry)?;
            Some(model)
        }
        None => None,
    };
    Ok((geometry, waveguide))
}

pub fn write_geometry(
    path: &Path,
    geometry: &ArrayGeometry,
    waveguide: Option<&WaveguideModel>,
) -> Result<()> {
    write_atomic(path, geometry_to_json(geometry, waveguide).as_bytes())
}

pub fn read_geometry(path: &Path) -> Result<(ArrayGeometry, Option<WaveguideModel>)> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    geometry_from_json(&text).map_err(|e| match e {
        Error::Validation(m) | Error::UnsupportedLayout(m) => Error::format(path, m),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalibrationChannel {
    h_real: Vec<f64>,
    h_imag: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalibrationRecord {
    sample_rate: f64,
    fft_length: usize,
    #[serde(default)]
    magnitude_equalization: bool,
    frequency_bins: Vec<f64>,
    channels: Vec<CalibrationChannel>,
}

/// Persist the estimated transfer functions; filters are re-derived on load.
pub fn write_calibration(path: &Path, tfs: &TransferFunctionSet, mode: FilterMode) -> Result<()> {
    let record = CalibrationRecord {
        sample_rate: tfs.sample_rate,
        fft_length: tfs.fft_len,
        magnitude_equalization: mode == FilterMode::Equalize,
        frequency_bins: tfs.frequency_bins(),
        channels: tfs
            .channels
            .iter()
            .map(|h| CalibrationChannel {
                h_real: h.iter().map(|v| v.re).collect(),
                h_imag: h.iter().map(|v| v.im).collect(),
            })
            .collect(),
    };
    write_atomic(path, to_json(&record).as_bytes())
}

pub fn read_calibration(path: &Path) -> Result<(TransferFunctionSet, CalibrationFilterSet)> {
    let record: CalibrationRecord = from_json(path)?;
    let bad = |m: String| Error::format(path, m);
    if record.frequency_bins != frequency_bins(record.fft_length, record.sample_rate) {
        return Err(bad(
            "frequency_bins do not match sample_rate and fft_length".into(),
        ));
    }
    let mut channels = Vec::with_capacity(record.channels.len());
    for (i, c) in record.channels.into_iter().enumerate() {
        if c.h_real.len() != c.h_imag.len() {
            return Err(bad(format!(
                "channel {i}: h_real and h_imag differ in length"
            )));
        }
        channels.push(
            c.h_real
                .into_iter()
                .zip(c.h_imag)
                .map(|(re, im)| Complex64::new(re, im))
                .collect(),
        );
    }
    let tfs = TransferFunctionSet::new(record.sample_rate, record.fft_length, channels)
        .map_err(|e| bad(e.to_string()))?;
    let mode = if record.magnitude_equalization {
        FilterMode::Equalize
    } else {
        FilterMode::PhaseOnly
    };
    let filters = make_calibration_filters_with_mode(&tfs, mode);
    Ok((tfs, filters))
}

fn integral_rate(sample_rate: f64) -> Result<u32> {
    if sample_rate.fract() != 0.0 || sample_rate < 1.0 || sample_rate > u32::MAX as f64 {
        return Err(Error::validation(format!(
            "sample rate {sample_rate} Hz cannot be stored (integral hertz required)"
        )));
    }
    Ok(sample_rate as u32)
}

/// Encode a recording as a 32-bit float WAV file in memory.
pub fn wav_bytes(recording: &MultichannelRecording) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: u16::try_from(recording.channel_count())
            .map_err(|_| Error::validation("too many channels for WAV"))?,
        sample_rate: integral_rate(recording.sample_rate)?,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| Error::validation(e.to_string()))?;
        for n in 0..recording.frames() {
            for c in &recording.channels {
                w.write_sample(c[n] as f32)
                    .map_err(|e| Error::validation(e.to_string()))?;
            }
        }
        w.finalize().map_err(|e| Error::validation(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: &Path, recording: &MultichannelRecording) -> Result<()> {
    write_atomic(path, &wav_bytes(recording)?)
}

pub fn read_wav(path: &Path) -> Result<MultichannelRecording> {
    let bytes = read_bytes(path)?;
    let bad = |e: hound::Error| Error::format(path, e.to_string());
    let mut reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(bad)?;
    let spec = reader.spec();
    let nch = spec.channels as usize;
    if nch == 0 {
        return Err(Error::format(path, "WAV file has no channels"));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        hound::SampleFormat::Int => {
            let full_scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
    };
    let channels = deinterleave(&interleaved, nch);
    MultichannelRecording::new(spec.sample_rate as f64, channels)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn deinterleave(interleaved: &[f64], nch: usize) -> Vec<Vec<f64>> {
    let frames = interleaved.len() / nch;
    (0..nch)
        .map(|c| (0..frames).map(|n| interleaved[n * nch + c]).collect())
        .collect()
}

/// Sidecar header path for a raw recording.
pub fn raw_header_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".hdr");
    path.with_file_name(name)
}

pub fn write_raw(path: &Path, recording: &MultichannelRecording) -> Result<()> {
    let mut data = Vec::with_capacity(recording.frames() * recording.channel_count() * 4);
    for n in 0..recording.frames() {
        for c in &recording.channels {
            data.extend_from_slice(&(c[n] as f32).to_le_bytes());
        }
    }
    let header = format!(
        "channels={}\nsample_rate={}\nframes={}\n",
        recording.channel_count(),
        recording.sample_rate,
        recording.frames()
    );
    write_atomic(path, &data)?;
    write_atomic(&raw_header_path(path), header.as_bytes())
}

pub fn read_raw(path: &Path) -> Result<MultichannelRecording> {
    let header_path = raw_header_path(path);
    let header = String::from_utf8(read_bytes(&header_path)?)
        .map_err(|e| Error::format(&header_path, e.to_string()))?;
    let (mut channels, mut sample_rate, mut frames) = (None, None, None);
    for line in header.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&header_path, format!("malformed line `{line}`")))?;
        let value = value.trim();
        let parse_err = || Error::format(&header_path, format!("bad value for `{}`", key.trim()));
        match key.trim() {
            "channels" => channels = Some(value.parse::<usize>().map_err(|_| parse_err())?),
            "sample_rate" => sample_rate = Some(value.parse::<f64>().map_err(|_| parse_err())?),
            "frames" => frames = Some(value.parse::<usize>().map_err(|_| parse_err())?),
            _ => {}
        }
    }
    let missing = |k: &str| Error::format(&header_path, format!("missing `{k}`"));
    let nch = channels.ok_or_else(|| missing("channels"))?;
    let sample_rate = sample_rate.ok_or_else(|| missing("sample_rate"))?;
    let frames = frames.ok_or_else(|| missing("frames"))?;
    let data = read_bytes(path)?;
    if nch == 0 || data.len() != nch * frames * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for {nch} channels x {frames} frames, found {}",
                nch * frames * 4,
                data.len()
            ),
        ));
    }
    let interleaved: Vec<f64> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    MultichannelRecording::new(sample_rate, deinterleave(&interleaved, nch))
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Read a `.wav` file, or a raw file with its `.hdr` sidecar.
pub fn read_recording(path: &Path) -> Result<MultichannelRecording> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        read_wav(path)
    } else {
        read_raw(path)
    }
}

pub fn write_recording(path: &Path, recording: &MultichannelRecording) -> Result<()> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        write_wav(path, recording)
    } else {
        write_raw(path, recording)
    }
}

/// `frequency_hz,<name>...` rows; all estimates must share one grid.
pub fn psd_csv(columns: &[(&str, &PsdEstimate)]) -> Result<String> {
    let Some((_, first)) = columns.first() else {
        return Err(Error::validation("no PSD to write"));
    };
    if columns
        .iter()
        .any(|(_, p)| p.frequency_bins != first.frequency_bins)
    {
        return Err(Error::validation(
            "PSD estimates use different frequency grids",
        ));
    }
    let mut out = String::from("frequency_hz");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (k, f) in first.frequency_bins.iter().enumerate() {
        out.push_str(&f.to_string());
        for (_, p) in columns {
            out.push(',');
            out.push_str(&p.power_density[k].to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

/// Header `angle_deg \ freq_hz,f1,f2,...`, then one `angle,dB,dB,...` row per
/// scan angle. Exact nulls are written as `-inf`.
pub fn directivity_csv(map: &DirectivityMap) -> String {
    let mut out = String::from("angle_deg \\ freq_hz");
    for f in &map.frequency_bins {
        out.push(',');
        out.push_str(&f.to_string());
    }
    out.push('\n');
    for (angle, row) in map.scan_angles.iter().zip(&map.response_db) {
        out.push_str(&angle.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parse [`directivity_csv`] output (the steering angle is not stored and is
/// returned as NaN).
pub fn parse_directivity_csv(text: &str) -> Result<DirectivityMap> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::validation("empty directivity CSV"))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::validation(format!("bad number `{s}`")))
    };
    let frequency_bins = header
        .split(',')
        .skip(1)
        .map(parse)
        .collect::<Result<Vec<_>>>()?;
    let mut scan_angles = Vec::new();
    let mut response_db = Vec::new();
    for line in lines {
        let mut cells = line.split(',');
        scan_angles.push(parse(cells.next().unwrap_or(""))?);
        let row = cells.map(parse).collect::<Result<Vec<_>>>()?;
        if row.len() != frequency_bins.len() {
            return Err(Error::validation("ragged directivity CSV row"));
        }
        response_db.push(row);
    }
    Ok(DirectivityMap {
        scan_angles,
        frequency_bins,
        response_db,
        steer_angle: f64::NAN,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub angle_deg: f64,
    pub repetition: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: PanSweepConfig,
    pub geometry_file: String,
    /// Whether the geometry file's waveguide block was part of the simulation.
    pub waveguide: bool,
    pub seed: u64,
    pub sample_rate: f64,
    pub channels: usize,
    pub frames: usize,
    pub files: Vec<ManifestEntry>,
}

/// `angle_{+DDD}_rep_{RR}.wav`; fractional angles keep one decimal.
pub fn recording_file_name(angle_deg: f64, repetition: usize) -> String {
    let angle = if angle_deg.fract() == 0.0 {
        format!("{:+04}", angle_deg as i64)
    } else {
        format!("{angle_deg:+06.1}")
    };
    format!("angle_{angle}_rep_{repetition:02}.wav")
}

/// Write a dataset directory. `dir` must not exist or be empty; contents are
/// staged in a sibling directory and renamed into place.
pub fn write_dataset(dir: &Path, dataset: &SweepDataset) -> Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_none();
        if !empty {
            return Err(Error::io(
                dir,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output directory exists and is not empty",
                ),
            ));
        }
    }
    let staging = temp_path(dir);
    let _ = fs::remove_dir_all(&staging);
    let result = write_dataset_into(&staging, dataset).and_then(|_| {
        if dir.exists() {
            fs::remove_dir(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

fn write_dataset_into(dir: &Path, dataset: &SweepDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_geometry(
        &dir.join(DATASET_GEOMETRY_NAME),
        &dataset.geometry,
        dataset.waveguide.as_ref(),
    )?;
    let mut files = Vec::with_capacity(dataset.recording_count());
    for (angle, reps) in dataset.angles.iter().zip(&dataset.recordings) {
        for (rep, rec) in reps.iter().enumerate() {
            let name = recording_file_name(*angle, rep);
            write_wav(&dir.join(&name), rec)?;
            files.push(ManifestEntry {
                angle_deg: *angle,
                repetition: rep,
                file: name,
            });
        }
    }
    let manifest = DatasetManifest {
        config: dataset.config.clone(),
        geometry_file: DATASET_GEOMETRY_NAME.into(),
        waveguide: dataset.waveguide.is_some(),
        seed: dataset.config.seed,
        sample_rate: dataset.sample_rate(),
        channels: dataset.channel_count(),
        frames: dataset.frames(),
        files,
    };
    write_atomic(&dir.join(MANIFEST_NAME), to_json(&manifest).as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    from_json(&dir.join(MANIFEST_NAME))
}

pub fn is_dataset_dir(path: &Path) -> bool {
    path.join(MANIFEST_NAME).is_file()
}

/// Load a dataset directory written by [`write_dataset`] (or laid out the
/// same way by hand).
pub fn read_dataset(dir: &Path) -> Result<SweepDataset> {
    let manifest = read_manifest(dir)?;
    let (geometry, waveguide) = read_geometry(&dir.join(&manifest.geometry_file))?;
    let waveguide = if manifest.waveguide { waveguide } else { None };
    let mut entries = manifest.files.clone();
    entries.sort_by(|a, b| {
        a.angle_deg
            .total_cmp(&b.angle_deg)
            .then(a.repetition.cmp(&b.repetition))
    });
    let mut angles: Vec<f64> = Vec::new();
    let mut recordings: Vec<Vec<MultichannelRecording>> = Vec::new();
    for entry in &entries {
        let rec = read_wav(&dir.join(&entry.file))?;
        if angles.last() != Some(&entry.angle_deg) {
            angles.push(entry.angle_deg);
            recordings.push(Vec::new());
        }
        recordings.last_mut().expect("pushed above").push(rec);
    }
    SweepDataset::new(manifest.config, geometry, waveguide, angles, recordings)
        .map_err(|e| Error::format(dir, e.to_string()))
}
