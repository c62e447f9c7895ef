//! Array layouts, waveguide baffles and the spatial-aliasing limit.
//!
//! Coordinate convention: the PCB lies in the `z = const` plane with the array
//! facing `+z` (boresight). Columns run along `x`, which is also the pan axis;
//! rows run along `y`. A baffle moves each acoustic inlet to a front plane at
//! `z + thickness`.

use crate::error::{ensure, Error, Result};
use crate::DEFAULT_SOUND_SPEED;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Point3 = [f64; 3];

/// Which set of acoustic ports to use: the microphone ports on the PCB or the
/// inlets on the front of the baffle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Pcb,
    Front,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pcb" => Ok(Side::Pcb),
            "front" => Ok(Side::Front),
            other => Err(Error::validation(format!(
                "unknown side `{other}` (expected pcb or front)"
            ))),
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Pcb => "pcb",
            Side::Front => "front",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementPorts {
    pub index: usize,
    pub pcb_port: Point3,
    /// Equal to `pcb_port` when no baffle is fitted.
    pub front_port: Point3,
}

impl ElementPorts {
    pub fn unbaffled(index: usize, position: Point3) -> Self {
        Self {
            index,
            pcb_port: position,
            front_port: position,
        }
    }

    pub fn port(&self, side: Side) -> Point3 {
        match side {
            Side::Pcb => self.pcb_port,
            Side::Front => self.front_port,
        }
    }

    /// Straight-line distance between the PCB port and the front inlet.
    pub fn loft_distance(&self) -> f64 {
        distance(&self.pcb_port, &self.front_port)
    }
}

/// A validated, immutable array layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    label: String,
    sound_speed: f64,
    elements: Vec<ElementPorts>,
}

impl ArrayGeometry {
    pub fn new(
        label: impl Into<String>,
        sound_speed: f64,
        elements: Vec<ElementPorts>,
    ) -> Result<Self> {
        ensure!(!elements.is_empty(), "geometry needs at least one element");
        ensure!(
            sound_speed.is_finite() && sound_speed > 0.0,
            "sound speed must be positive and finite, got {sound_speed}"
        );
        let mut seen = std::collections::BTreeSet::new();
        for e in &elements {
            ensure!(seen.insert(e.index), "duplicate element index {}", e.index);
            ensure!(
                e.pcb_port
                    .iter()
                    .chain(&e.front_port)
                    .all(|c| c.is_finite()),
                "element {} has a non-finite coordinate",
                e.index
            );
        }
        for (i, a) in elements.iter().enumerate() {
            for b in &elements[i + 1..] {
                ensure!(
                    a.front_port != b.front_port,
                    "elements {} and {} share the same front port",
                    a.index,
                    b.index
                );
            }
        }
        // PCB and front ports must sit in two z-planes a common thickness apart.
        let thickness = elements[0].front_port[2] - elements[0].pcb_port[2];
        let scale = elements
            .iter()
            .flat_map(|e| e.pcb_port.iter().chain(&e.front_port))
            .fold(1e-3_f64, |m, c| m.max(c.abs()));
        let tol = 1e-9 * scale;
        ensure!(
            thickness >= -tol,
            "front ports lie behind the PCB (thickness {thickness})"
        );
        for e in &elements {
            let t = e.front_port[2] - e.pcb_port[2];
            ensure!(
                (t - thickness).abs() <= tol,
                "element {} has baffle thickness {t}, expected {thickness}",
                e.index
            );
            ensure!(
                (e.pcb_port[2] - elements[0].pcb_port[2]).abs() <= tol,
                "PCB ports are not coplanar (element {})",
                e.index
            );
        }
        Ok(Self {
            label: label.into(),
            sound_speed,
            elements,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    pub fn elements(&self) -> &[ElementPorts] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn positions(&self, side: Side) -> Vec<Point3> {
        self.elements.iter().map(|e| e.port(side)).collect()
    }

    /// Separation between the PCB plane and the front plane (0 without a baffle).
    pub fn baffle_thickness(&self) -> f64 {
        let e = &self.elements[0];
        (e.front_port[2] - e.pcb_port[2]).max(0.0)
    }

    pub fn is_baffled(&self) -> bool {
        self.elements.iter().any(|e| e.pcb_port != e.front_port)
    }

    /// Same layout with a different label.
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Copy with every front port reset onto its PCB port.
    pub fn without_baffle(&self) -> Self {
        let elements = self
            .elements
            .iter()
            .map(|e| ElementPorts::unbaffled(e.index, e.pcb_port))
            .collect();
        Self {
            label: self.label.clone(),
            sound_speed: self.sound_speed,
            elements,
        }
    }

    /// Rigidly translate every port.
    pub fn translated(&self, offset: Point3) -> Self {
        let shift = |p: Point3| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]];
        let elements = self
            .elements
            .iter()
            .map(|e| ElementPorts {
                index: e.index,
                pcb_port: shift(e.pcb_port),
                front_port: shift(e.front_port),
            })
            .collect();
        Self {
            label: self.label.clone(),
            sound_speed: self.sound_speed,
            elements,
        }
    }
}

/// Per-channel waveguide: acoustic path length and flat attenuation.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveguideModel {
    path_lengths: Vec<f64>,
    attenuation_db: Vec<f64>,
}

impl WaveguideModel {
    pub fn new(path_lengths: Vec<f64>, attenuation_db: Vec<f64>) -> Result<Self> {
        ensure!(
            path_lengths.len() == attenuation_db.len(),
            "waveguide has {} path lengths but {} attenuation values",
            path_lengths.len(),
            attenuation_db.len()
        );
        ensure!(
            path_lengths.iter().all(|l| l.is_finite() && *l >= 0.0),
            "waveguide path lengths must be finite and non-negative"
        );
        ensure!(
            attenuation_db.iter().all(|a| a.is_finite() && *a >= 0.0),
            "waveguide attenuation must be finite and non-negative"
        );
        Ok(Self {
            path_lengths,
            attenuation_db,
        })
    }

    pub fn len(&self) -> usize {
        self.path_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path_lengths.is_empty()
    }

    pub fn path_lengths(&self) -> &[f64] {
        &self.path_lengths
    }

    pub fn attenuation_db(&self) -> &[f64] {
        &self.attenuation_db
    }

    /// Propagation delay through each waveguide, seconds.
    pub fn delays(&self, sound_speed: f64) -> Vec<f64> {
        self.path_lengths.iter().map(|l| l / sound_speed).collect()
    }

    /// Linear amplitude factor per channel.
    pub fn gains(&self) -> Vec<f64> {
        self.attenuation_db
            .iter()
            .map(|db| 10f64.powf(-db / 20.0))
            .collect()
    }

    /// Replace every channel's attenuation with the same flat value.
    pub fn with_uniform_attenuation(mut self, db: f64) -> Result<Self> {
        ensure!(
            db.is_finite() && db >= 0.0,
            "attenuation must be non-negative, got {db}"
        );
        self.attenuation_db.iter_mut().for_each(|a| *a = db);
        Ok(self)
    }

    /// Override the per-channel path lengths.
    pub fn with_path_lengths(self, path_lengths: Vec<f64>) -> Result<Self> {
        Self::new(path_lengths, self.attenuation_db)
    }

    /// Lengthen each path by an independent uniform draw from `[0, spread)`,
    /// standing in for the routing differences of a real printed baffle.
    pub fn with_path_jitter(self, spread: f64, seed: u64) -> Result<Self> {
        ensure!(
            spread.is_finite() && spread >= 0.0,
            "path jitter must be non-negative, got {spread}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = self
            .path_lengths
            .iter()
            .map(|l| l + spread * rng.random::<f64>())
            .collect();
        self.with_path_lengths(paths)
    }

    /// Check that this model can be attached to `geometry`: one entry per
    /// element and no path shorter than the straight PCB-to-inlet distance.
    pub fn check_against(&self, geometry: &ArrayGeometry) -> Result<()> {
        ensure!(
            self.len() == geometry.len(),
            "waveguide has {} channels but geometry has {} elements",
            self.len(),
            geometry.len()
        );
        for (e, &l) in geometry.elements().iter().zip(&self.path_lengths) {
            let straight = e.loft_distance();
            ensure!(
                l >= straight * (1.0 - 1e-9),
                "element {}: path length {l} m is shorter than the port separation {straight} m",
                e.index
            );
        }
        Ok(())
    }
}

/// Planar `rows x cols` grid centred on the origin with equal pitch on both
/// axes. Element `r * cols + c` sits at column `c` (x) and row `r` (y).
pub fn make_grid_geometry(
    rows: usize,
    cols: usize,
    spacing: f64,
    sound_speed: f64,
) -> Result<ArrayGeometry> {
    ensure!(
        rows >= 1 && cols >= 1,
        "grid needs at least one row and column"
    );
    ensure!(
        spacing.is_finite() && spacing > 0.0,
        "grid spacing must be positive, got {spacing}"
    );
    let x0 = (cols as f64 - 1.0) / 2.0;
    let y0 = (rows as f64 - 1.0) / 2.0;
    let elements = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| {
            let p = [(c as f64 - x0) * spacing, (r as f64 - y0) * spacing, 0.0];
            ElementPorts::unbaffled(r * cols + c, p)
        })
        .collect();
    ArrayGeometry::new(
        format!("{rows}x{cols} grid, {:.2} mm pitch", spacing * 1e3),
        sound_speed,
        elements,
    )
}

/// The 5 x 6, 3.8 mm layout assumed for the reference sensor.
pub fn default_sensor_geometry() -> ArrayGeometry {
    make_grid_geometry(5, 6, 3.8e-3, DEFAULT_SOUND_SPEED).expect("constant layout is valid")
}

pub const DEFAULT_BAFFLE_SPACING: f64 = 1.8e-3;
pub const DEFAULT_BAFFLE_THICKNESS: f64 = 10e-3;

struct GridFit {
    spacing: Option<f64>,
    center: [f64; 2],
}

fn fit_grid(geometry: &ArrayGeometry) -> Result<GridFit> {
    let pcb = geometry.positions(Side::Pcb);
    let n = pcb.len();
    let center = [
        pcb.iter().map(|p| p[0]).sum::<f64>() / n as f64,
        pcb.iter().map(|p| p[1]).sum::<f64>() / n as f64,
    ];
    if n == 1 {
        return Ok(GridFit {
            spacing: None,
            center,
        });
    }
    let extent = pcb
        .iter()
        .flat_map(|p| p.iter())
        .fold(0f64, |m, c| m.max(c.abs()))
        .max(1e-9);
    let tol = 1e-9 * extent;

    let axis_values = |axis: usize| {
        let mut v: Vec<f64> = pcb.iter().map(|p| p[axis]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() <= tol);
        v
    };
    let xs = axis_values(0);
    let ys = axis_values(1);
    if xs.len() * ys.len() != n {
        return Err(Error::UnsupportedLayout(format!(
            "{n} elements do not fill a {}x{} axis-aligned grid",
            ys.len(),
            xs.len()
        )));
    }
    let pitch = |vals: &[f64]| -> Result<Option<f64>> {
        if vals.len() < 2 {
            return Ok(None);
        }
        let d = vals[1] - vals[0];
        if vals.windows(2).all(|w| ((w[1] - w[0]) - d).abs() <= tol) {
            Ok(Some(d))
        } else {
            Err(Error::UnsupportedLayout("grid pitch is not uniform".into()))
        }
    };
    let spacing = match (pitch(&xs)?, pitch(&ys)?) {
        (Some(a), Some(b)) if (a - b).abs() > tol => {
            return Err(Error::UnsupportedLayout(format!(
                "grid pitch differs between axes ({a} vs {b})"
            )))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => unreachable!("n > 1 with a single distinct coordinate"),
    };
    let mut occupied = std::collections::BTreeSet::new();
    for p in &pcb {
        let ix = ((p[0] - xs[0]) / spacing).round() as i64;
        let iy = ((p[1] - ys[0]) / spacing).round() as i64;
        if !occupied.insert((ix, iy)) {
            return Err(Error::UnsupportedLayout(
                "two elements occupy the same grid cell".into(),
            ));
        }
    }
    Ok(GridFit {
        spacing: Some(spacing),
        center,
    })
}

/// Fit a baffle to a planar grid: the front inlets keep the grid topology at
/// pitch `front_spacing` and sit `thickness` in front of the PCB. Each
/// waveguide is modelled as a straight loft from PCB port to inlet, with no
/// attenuation.
pub fn apply_baffle(
    geometry: &ArrayGeometry,
    front_spacing: f64,
    thickness: f64,
) -> Result<(ArrayGeometry, WaveguideModel)> {
    ensure!(
        front_spacing.is_finite() && front_spacing > 0.0,
        "baffle spacing must be positive, got {front_spacing}"
    );
    ensure!(
        thickness.is_finite() && thickness > 0.0,
        "baffle thickness must be positive, got {thickness}"
    );
    let fit = fit_grid(geometry)?;
    let scale = fit.spacing.map_or(1.0, |s| front_spacing / s);
    let elements: Vec<ElementPorts> = geometry
        .elements()
        .iter()
        .map(|e| {
            let p = e.pcb_port;
            ElementPorts {
                index: e.index,
                pcb_port: p,
                front_port: [
                    fit.center[0] + (p[0] - fit.center[0]) * scale,
                    fit.center[1] + (p[1] - fit.center[1]) * scale,
                    p[2] + thickness,
                ],
            }
        })
        .collect();
    let paths: Vec<f64> = elements.iter().map(ElementPorts::loft_distance).collect();
    let n = paths.len();
    let baffled = ArrayGeometry::new(
        format!(
            "{} + baffle {:.2} mm pitch",
            geometry.label(),
            front_spacing * 1e3
        ),
        geometry.sound_speed(),
        elements,
    )?;
    Ok((baffled, WaveguideModel::new(paths, vec![0.0; n])?))
}

/// Smallest pairwise distance between the selected ports.
pub fn min_spacing(geometry: &ArrayGeometry, side: Side) -> Result<f64> {
    ensure!(
        geometry.len() >= 2,
        "spacing needs at least two elements, geometry has {}",
        geometry.len()
    );
    let pts = geometry.positions(side);
    let mut best = f64::INFINITY;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            best = best.min(distance(a, b));
        }
    }
    Ok(best)
}

/// Highest frequency at which a regular array of pitch `spacing` can be
/// steered anywhere in the half-space without grating lobes: `v / (2 d)`.
pub fn max_unaliased_frequency(spacing: f64, sound_speed: f64) -> Result<f64> {
    ensure!(
        spacing.is_finite() && spacing > 0.0,
        "spacing must be positive, got {spacing}"
    );
    ensure!(
        sound_speed.is_finite() && sound_speed > 0.0,
        "sound speed must be positive, got {sound_speed}"
    );
    Ok(sound_speed / (2.0 * spacing))
}

pub(crate) fn distance(a: &Point3, b: &Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
