//! Experiment runner: strict TOML configuration, the individual pipeline
//! stages, and the `run` / `compare` / `volume` drivers that write artifacts
//! plus a content-hashed manifest.
//!
//! Every stage hands its output to the next through the same `f32`
//! quantization used by the on-disk formats, so a chain of stages resumed
//! from saved files reproduces an end-to-end run bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{ArrayConfig, DEFAULT_SOUND_SPEED};
use crate::beamform::{beamform, BeamformParams, Image, ImageGrid};
use crate::channel::ChannelData;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{gcnr, wire_fwhm, MetricReport, MetricRow, RoiPair, DEFAULT_BINS};
use crate::phantoms::{
    cyst_phantom, wire_phantom, CystShape, Phantom, Roi, RoiKind, SpeckleSpec,
    DEFAULT_SPECKLE_DENSITY,
};
use crate::postproc::{
    envelope, log_compress, stitch_volume, BModeImage, VolumeSpec, DEFAULT_DYNAMIC_RANGE_DB,
};
use crate::sequences::{
    default_focus_depth, default_vls_params, forces_decode, forces_polarity_correct, hadamard,
    make_forces_sequence_at, make_tpw_sequence, make_vls_sequence, uniform_angles, Orientation,
    Sequence, SequenceKind,
};
use crate::simulator::{add_noise, simulate, Pulse, SimOptions, Window};

/// Volumes with at least this many planes are flagged as long acquisitions.
pub const LONG_ACQUISITION_PLANES: usize = 64;

pub const CHANNELS_FILE: &str = "channels.rccd";
pub const DECODED_FILE: &str = "decoded.rccd";
pub const RF_FILE: &str = "rf.raw";
pub const ENVELOPE_FILE: &str = "envelope.raw";
pub const BMODE_FILE: &str = "bmode.pgm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn default_fc() -> f64 {
    5e6
}
fn default_bw() -> f64 {
    0.6
}
fn default_fs() -> f64 {
    20e6
}
fn default_c() -> f64 {
    DEFAULT_SOUND_SPEED
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_density() -> f64 {
    DEFAULT_SPECKLE_DENSITY
}
fn default_dr() -> f64 {
    DEFAULT_DYNAMIC_RANGE_DB
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySection {
    pub n: usize,
    /// Defaults to one wavelength at the center frequency.
    pub pitch_m: Option<f64>,
    #[serde(default = "default_fc")]
    pub center_freq_hz: f64,
    #[serde(default = "default_bw")]
    pub frac_bandwidth: f64,
    #[serde(default = "default_c")]
    pub sound_speed_m_s: f64,
    #[serde(default = "default_fs")]
    pub sampling_freq_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SequenceSection {
    Forces {
        focus_depth_m: Option<f64>,
        #[serde(default)]
        plane_y_m: f64,
        #[serde(default)]
        orientation: Orientation,
    },
    Tpw {
        /// Explicit angles; otherwise `count` angles spread over
        /// `±max_angle_deg`.
        angles_deg: Option<Vec<f64>>,
        count: Option<usize>,
        max_angle_deg: Option<f64>,
        #[serde(default)]
        orientation: Orientation,
    },
    Vls {
        n_virtual: Option<usize>,
        virtual_depth_m: Option<f64>,
        subaperture_rows: Option<usize>,
        #[serde(default)]
        orientation: Orientation,
    },
}

impl Default for SequenceSection {
    fn default() -> Self {
        SequenceSection::Forces {
            focus_depth_m: None,
            plane_y_m: 0.0,
            orientation: Orientation::RowsTransmit,
        }
    }
}

impl SequenceSection {
    pub fn default_for(kind: SequenceKind) -> Option<Self> {
        let orientation = Orientation::RowsTransmit;
        Some(match kind {
            SequenceKind::Forces => Self::default(),
            SequenceKind::Tpw => SequenceSection::Tpw {
                angles_deg: None,
                count: None,
                max_angle_deg: None,
                orientation,
            },
            SequenceKind::Vls => SequenceSection::Vls {
                n_virtual: None,
                virtual_depth_m: None,
                subaperture_rows: None,
                orientation,
            },
            SequenceKind::Custom => return None,
        })
    }

    fn orientation(&self) -> Orientation {
        match self {
            SequenceSection::Forces { orientation, .. }
            | SequenceSection::Tpw { orientation, .. }
            | SequenceSection::Vls { orientation, .. } => *orientation,
        }
    }

    /// Builds the sequence, filling unset parameters with the array's
    /// defaults.
    pub fn build(&self, cfg: &ArrayConfig) -> Result<Sequence> {
        let seq = match self {
            SequenceSection::Forces {
                focus_depth_m,
                plane_y_m,
                ..
            } => make_forces_sequence_at(
                cfg,
                focus_depth_m.unwrap_or_else(|| default_focus_depth(cfg)),
                *plane_y_m,
            )?,
            SequenceSection::Tpw {
                angles_deg,
                count,
                max_angle_deg,
                ..
            } => {
                let angles = match angles_deg {
                    Some(a) => a.iter().map(|d| d.to_radians()).collect(),
                    None => uniform_angles(count.unwrap_or(cfg.n), max_angle_deg.unwrap_or(15.0)),
                };
                make_tpw_sequence(cfg, &angles)?
            }
            SequenceSection::Vls {
                n_virtual,
                virtual_depth_m,
                subaperture_rows,
                ..
            } => {
                let (nv, zv, rows) = default_vls_params(cfg);
                make_vls_sequence(
                    cfg,
                    n_virtual.unwrap_or(nv),
                    virtual_depth_m.unwrap_or(zv),
                    subaperture_rows.unwrap_or(rows),
                )?
            }
        };
        Ok(match self.orientation() {
            Orientation::RowsTransmit => seq,
            Orientation::ColumnsTransmit => seq.transposed(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomSection {
    /// Point targets in the `y = 0` plane, given as `[x, z]` pairs.
    Wires {
        positions_m: Vec<[f64; 2]>,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Anechoic cyst in seeded speckle.
    Cyst {
        center_m: [f64; 3],
        radius_m: f64,
        #[serde(default)]
        shape: CystShape,
        region_min_m: [f64; 3],
        region_max_m: [f64; 3],
        /// Scatterers per cubic wavelength.
        #[serde(default = "default_density")]
        density: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Scatterer list (`x,y,z,amplitude`) relative to the config file, with
    /// measurement targets declared inline.
    Csv {
        path: PathBuf,
        #[serde(default)]
        rois: Vec<Roi>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    FromTrigger,
    Fit,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default)]
    pub window: WindowKind,
    /// Required for the `fixed` window.
    pub t0_s: Option<f64>,
    pub n_samples: Option<usize>,
    /// Unset means noiseless.
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dr")]
    pub dynamic_range_db: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Peak search radius around each wire; defaults to one wavelength.
    pub search_radius_m: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSection {
    pub m: usize,
    pub plane_spacing_m: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Defaults to FORCES, TPW and VLS with default parameters.
    #[serde(default)]
    pub sequences: Vec<SequenceSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub array: ArraySection,
    #[serde(default)]
    pub sequence: SequenceSection,
    pub phantom: PhantomSection,
    pub grid: ImageGrid,
    #[serde(default)]
    pub beamform: BeamformParams,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub volume: Option<VolumeSection>,
    #[serde(default)]
    pub compare: CompareSection,
}

/// Line of `key` inside `[section]` (or `[[section]]`), 1-based.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = "";
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Checker<'a> {
    text: &'a str,
    origin: &'a str,
}

impl Checker<'_> {
    fn fail(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        match locate(self.text, section, key) {
            Some(line) => Error::Config(format!(
                "{}:{line}: {section}.{key}: {msg}",
                self.origin
            )),
            None => Error::Config(format!("{}: {section}.{key}: {msg}", self.origin)),
        }
    }

    fn ensure(&self, ok: bool, section: &str, key: &str, msg: impl std::fmt::Display) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(section, key, msg))
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config. `origin` names the source in messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.check(&Checker { text, origin })?;
        Ok(cfg)
    }

    fn check(&self, c: &Checker) -> Result<()> {
        let a = &self.array;
        c.ensure(
            a.n >= 1 && a.n.is_power_of_two(),
            "array",
            "n",
            format!("must be a power of two, got {}", a.n),
        )?;
        c.ensure(a.center_freq_hz > 0.0, "array", "center_freq_hz", "must be positive")?;
        c.ensure(a.sound_speed_m_s > 0.0, "array", "sound_speed_m_s", "must be positive")?;
        if let Some(p) = a.pitch_m {
            c.ensure(p > 0.0, "array", "pitch_m", "must be positive")?;
        }
        c.ensure(
            a.frac_bandwidth > 0.0 && a.frac_bandwidth <= 1.0,
            "array",
            "frac_bandwidth",
            "must lie in (0, 1]",
        )?;
        c.ensure(
            a.sampling_freq_hz >= 4.0 * a.center_freq_hz,
            "array",
            "sampling_freq_hz",
            "must be at least four times the center frequency",
        )?;
        self.check_sequence(c, &self.sequence, "sequence")?;
        for s in &self.compare.sequences {
            self.check_sequence(c, s, "compare.sequences")?;
        }
        match &self.phantom {
            PhantomSection::Wires {
                positions_m,
                amplitude,
            } => {
                c.ensure(!positions_m.is_empty(), "phantom", "positions_m", "needs at least one wire")?;
                c.ensure(
                    positions_m.iter().all(|p| p[1] > 0.0 && p[0].is_finite()),
                    "phantom",
                    "positions_m",
                    "wire depths must be positive",
                )?;
                c.ensure(amplitude.is_finite(), "phantom", "amplitude", "must be finite")?;
            }
            PhantomSection::Cyst {
                radius_m,
                region_min_m,
                region_max_m,
                density,
                ..
            } => {
                c.ensure(*radius_m > 0.0, "phantom", "radius_m", "must be positive")?;
                c.ensure(
                    (0..3).all(|k| region_max_m[k] > region_min_m[k]),
                    "phantom",
                    "region_max_m",
                    "must exceed region_min_m on every axis",
                )?;
                c.ensure(region_min_m[2] > 0.0, "phantom", "region_min_m", "speckle must lie at positive depth")?;
                c.ensure(*density > 0.0, "phantom", "density", "must be positive")?;
            }
            PhantomSection::Csv { .. } => {}
        }
        let g = &self.grid;
        c.ensure(g.nx >= 1, "grid", "nx", "must be at least 1")?;
        c.ensure(g.nz >= 4, "grid", "nz", "must be at least 4")?;
        c.ensure(g.x_max >= g.x_min, "grid", "x_max", "must not be below x_min")?;
        c.ensure(g.z_max > g.z_min, "grid", "z_max", "must exceed z_min")?;
        c.ensure(g.z_min >= 0.0, "grid", "z_min", "must not be negative")?;
        g.validate().map_err(|e| c.fail("grid", "x_min", e))?;
        c.ensure(self.beamform.f_number > 0.0, "beamform", "f_number", "must be positive")?;
        c.ensure(self.beamform.tx_f_number > 0.0, "beamform", "tx_f_number", "must be positive")?;
        let s = &self.simulation;
        if s.window == WindowKind::Fixed {
            c.ensure(s.t0_s.is_some(), "simulation", "t0_s", "required by the fixed window")?;
            c.ensure(
                s.n_samples.is_some_and(|n| n > 0),
                "simulation",
                "n_samples",
                "required by the fixed window",
            )?;
        }
        if let Some(snr) = s.snr_db {
            c.ensure(!snr.is_nan(), "simulation", "snr_db", "must be a number")?;
        }
        c.ensure(
            self.outputs.dynamic_range_db > 0.0,
            "outputs",
            "dynamic_range_db",
            "must be positive",
        )?;
        if let Some(r) = self.metrics.search_radius_m {
            c.ensure(r > 0.0, "metrics", "search_radius_m", "must be positive")?;
        }
        if let Some(v) = &self.volume {
            c.ensure(v.m >= 1, "volume", "m", "must be at least 1")?;
            c.ensure(v.plane_spacing_m > 0.0, "volume", "plane_spacing_m", "must be positive")?;
        }
        Ok(())
    }

    fn check_sequence(&self, c: &Checker, s: &SequenceSection, section: &str) -> Result<()> {
        match s {
            SequenceSection::Forces { focus_depth_m, .. } => {
                if let Some(f) = focus_depth_m {
                    c.ensure(*f > 0.0, section, "focus_depth_m", "must be positive")?;
                }
            }
            SequenceSection::Tpw {
                angles_deg, count, ..
            } => {
                if let Some(a) = angles_deg {
                    c.ensure(!a.is_empty(), section, "angles_deg", "needs at least one angle")?;
                }
                if let Some(n) = count {
                    c.ensure(*n >= 1, section, "count", "must be at least 1")?;
                }
            }
            SequenceSection::Vls {
                n_virtual,
                virtual_depth_m,
                subaperture_rows,
                ..
            } => {
                if let Some(z) = virtual_depth_m {
                    c.ensure(*z < 0.0, section, "virtual_depth_m", "must be negative (behind the aperture)")?;
                }
                if let Some(n) = n_virtual {
                    c.ensure(*n >= 1, section, "n_virtual", "must be at least 1")?;
                }
                if let Some(r) = subaperture_rows {
                    c.ensure(
                        *r >= 1 && *r <= self.array.n,
                        section,
                        "subaperture_rows",
                        format!("must lie in 1..={}", self.array.n),
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn array_config(&self) -> Result<ArrayConfig> {
        let a = &self.array;
        let pitch = a.pitch_m.unwrap_or(a.sound_speed_m_s / a.center_freq_hz);
        ArrayConfig::new(
            a.n,
            pitch,
            a.center_freq_hz,
            a.frac_bandwidth,
            a.sound_speed_m_s,
            a.sampling_freq_hz,
        )
    }

    /// Replaces every seed (speckle and noise).
    pub fn set_seed(&mut self, seed: u64) {
        if let PhantomSection::Cyst { seed: s, .. } = &mut self.phantom {
            *s = seed;
        }
        self.simulation.noise_seed = seed;
    }
}

/// A resolved experiment: validated config plus the objects built from it.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub array: ArrayConfig,
    pub sequence: Sequence,
    pub phantom: Phantom,
    /// SHA-256 of the config text this experiment was parsed from.
    pub config_sha256: String,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, &path.display().to_string(), base)
    }

    /// `base` resolves relative phantom paths.
    pub fn from_toml(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut config = ExperimentConfig::parse(text, origin)?;
        if let PhantomSection::Csv { path, .. } = &mut config.phantom {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        let mut exp = Self::from_config(config)?;
        exp.config_sha256 = sha256_hex(text.as_bytes());
        Ok(exp)
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        let array = config.array_config()?;
        let sequence = config.sequence.build(&array)?;
        let phantom = build_phantom(&config.phantom, &array)?;
        let config_sha256 = sha256_hex(
            toml::to_string(&config)
                .map_err(|e| Error::Format(e.to_string()))?
                .as_bytes(),
        );
        Ok(Self {
            config,
            array,
            sequence,
            phantom,
            config_sha256,
        })
    }

    /// Same experiment with every seed replaced.
    pub fn with_seed(&self, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.set_seed(seed);
        let mut exp = Self::from_config(config)?;
        exp.config_sha256 = self.config_sha256.clone();
        Ok(exp)
    }

    /// Same array, phantom and grid, different transmit sequence.
    pub fn with_sequence(&self, section: SequenceSection) -> Result<Self> {
        let sequence = section.build(&self.array)?;
        let mut exp = self.clone();
        exp.config.sequence = section;
        exp.sequence = sequence;
        Ok(exp)
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.config.grid
    }

    pub fn label(&self) -> &'static str {
        self.sequence.kind().label()
    }

    pub fn simulate(&self) -> Result<ChannelData> {
        let s = &self.config.simulation;
        let window = match s.window {
            WindowKind::FromTrigger => Window::FromTrigger,
            WindowKind::Fit => Window::Fit,
            WindowKind::Fixed => Window::Fixed {
                t0_s: s.t0_s.unwrap_or(0.0),
                n_samples: s.n_samples.unwrap_or(0),
            },
        };
        let pulse = Pulse::from_config(&self.array);
        let mut data = simulate(
            &self.array,
            &self.sequence,
            &self.phantom,
            &pulse,
            &SimOptions { window },
        )?;
        if let Some(snr) = s.snr_db {
            data = add_noise(&data, snr, s.noise_seed)?;
        }
        Ok(data.quantized())
    }

    /// Polarity correction and Hadamard decoding for FORCES; other
    /// sequences pass through unchanged.
    pub fn decode(&self, raw: &ChannelData) -> Result<ChannelData> {
        if self.sequence.kind() != SequenceKind::Forces {
            return Ok(raw.quantized());
        }
        let h = hadamard(self.array.n)?;
        let decoded = forces_decode(&forces_polarity_correct(raw, &self.sequence)?, &h)?;
        Ok(decoded.quantized())
    }

    pub fn beamform(&self, decoded: &ChannelData) -> Result<Image> {
        let rf = beamform(
            decoded,
            &self.array,
            &self.sequence,
            self.grid(),
            &self.config.beamform,
        )?;
        Ok(quantize_image(rf))
    }

    pub fn postproc(&self, rf: Image) -> Result<BModeImage> {
        let env = quantize_image(envelope(&rf)?);
        let dr = self.config.outputs.dynamic_range_db;
        let db = log_compress(&env, dr)?;
        Ok(BModeImage {
            rf,
            envelope: env,
            db,
            dynamic_range_db: dr,
        })
    }

    /// Image-domain processing for one acquisition held in memory.
    pub fn image(&self) -> Result<BModeImage> {
        let raw = self.simulate()?;
        let decoded = self.decode(&raw)?;
        self.postproc(self.beamform(&decoded)?)
    }

    /// FWHM rows for wire targets and gCNR rows for cysts, in ROI order.
    pub fn metrics(&self, env: &Image) -> Result<MetricReport> {
        let radius = self
            .config
            .metrics
            .search_radius_m
            .unwrap_or_else(|| self.array.wavelength());
        let method = self.label().to_string();
        let plane = |y: f64| nearest_plane(&env.grid, y);
        let mut rows = Vec::new();
        for roi in &self.phantom.rois {
            let row = match roi.kind {
                RoiKind::Wire { position } => {
                    let iy = plane(position[1]);
                    let (lat, ax) = match wire_fwhm(env, iy, (position[0], position[2]), radius) {
                        Ok(w) => (w.lateral_m.ok(), w.axial_m.ok()),
                        Err(e) => {
                            log::warn!("{}: {e}", roi.name);
                            (None, None)
                        }
                    };
                    MetricRow {
                        method: method.clone(),
                        target_id: roi.name.clone(),
                        depth_mm: position[2] * 1e3,
                        gcnr: None,
                        fwhm_lat_um: lat.map(|v| v * 1e6),
                        fwhm_ax_um: ax.map(|v| v * 1e6),
                    }
                }
                RoiKind::Cyst { center, radius, .. } => {
                    let pair = RoiPair::for_cyst(center[0], center[2], radius);
                    let g = gcnr(env, plane(center[1]), &pair, DEFAULT_BINS)
                        .map_err(|e| log::warn!("{}: {e}", roi.name))
                        .ok();
                    MetricRow {
                        method: method.clone(),
                        target_id: roi.name.clone(),
                        depth_mm: center[2] * 1e3,
                        gcnr: g,
                        fwhm_lat_um: None,
                        fwhm_ax_um: None,
                    }
                }
            };
            rows.push(row);
        }
        Ok(MetricReport { rows })
    }
}

fn nearest_plane(grid: &ImageGrid, y: f64) -> usize {
    let ys = grid.ys();
    (0..ys.len())
        .min_by(|&a, &b| (ys[a] - y).abs().total_cmp(&(ys[b] - y).abs()))
        .unwrap_or(0)
}

fn build_phantom(section: &PhantomSection, cfg: &ArrayConfig) -> Result<Phantom> {
    match section {
        PhantomSection::Wires {
            positions_m,
            amplitude,
        } => {
            let pts: Vec<(f64, f64)> = positions_m.iter().map(|p| (p[0], p[1])).collect();
            wire_phantom(&pts, *amplitude)
        }
        PhantomSection::Cyst {
            center_m,
            radius_m,
            shape,
            region_min_m,
            region_max_m,
            density,
            seed,
        } => {
            let spec = SpeckleSpec {
                region_min: *region_min_m,
                region_max: *region_max_m,
                density: *density,
                wavelength_m: cfg.wavelength(),
                rng_seed: *seed,
            };
            cyst_phantom(*center_m, *radius_m, *shape, &spec)
        }
        PhantomSection::Csv { path, rois } => {
            let file = fs::File::open(path).map_err(|e| {
                Error::Config(format!("phantom.path: cannot open {}: {e}", path.display()))
            })?;
            let mut ph = Phantom::read_csv(std::io::BufReader::new(file))?;
            ph.rois = rois.clone();
            ph.validate()?;
            Ok(ph)
        }
    }
}

pub fn quantize_image(mut img: Image) -> Image {
    for v in &mut img.data {
        *v = *v as f32 as f64;
    }
    img
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub index: usize,
    pub y_m: f64,
    pub transmit_events: usize,
    pub envelope_sha256: String,
}

/// Record of a pipeline invocation. Contains no timestamps or host details,
/// so identical inputs give identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub command: String,
    pub status: Status,
    pub config_sha256: String,
    pub transmit_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planes: Vec<PlaneRecord>,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    fn new(command: &str, config_sha256: &str) -> Self {
        Self {
            tool: format!("tobe {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            status: Status::Incomplete,
            config_sha256: config_sha256.to_string(),
            transmit_events: 0,
            error: None,
            notes: Vec::new(),
            planes: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

/// Writes artifacts into a directory while recording their hashes.
pub struct ArtifactWriter {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, command: &str, config_sha256: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::new(command, config_sha256),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.manifest.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_grid(&mut self, name: &str, img: &Image) -> Result<()> {
        self.write(name, &io::raw_grid_bytes(img))?;
        let sidecar = io::sidecar_path(Path::new(name));
        self.write(&sidecar.to_string_lossy(), io::sidecar_text(&img.grid).as_bytes())
    }

    fn write_csv(&mut self, name: &str, report: &MetricReport) -> Result<()> {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        self.write(name, &buf)
    }

    /// Writes the manifest with the outcome of `result` and passes the
    /// result through.
    pub fn finish<T>(mut self, result: Result<T>) -> Result<(T, Manifest)> {
        match &result {
            Ok(_) => self.manifest.status = Status::Complete,
            Err(e) => {
                self.manifest.status = Status::Incomplete;
                self.manifest.error = Some(e.to_string());
            }
        }
        fs::write(self.dir.join(MANIFEST_FILE), self.manifest.to_toml()?)?;
        result.map(|v| (v, self.manifest))
    }
}

/// Full single-acquisition pipeline. Artifacts written before a failure are
/// kept and the manifest is marked incomplete.
pub fn run(exp: &Experiment, out: &Path) -> Result<Manifest> {
    let mut w = ArtifactWriter::new(out, "run", &exp.config_sha256)?;
    w.manifest.transmit_events = exp.sequence.len();
    let result = run_stages(exp, &mut w);
    w.finish(result).map(|(_, m)| m)
}

fn run_stages(exp: &Experiment, w: &mut ArtifactWriter) -> Result<()> {
    let raw = exp.simulate()?;
    w.write(CHANNELS_FILE, &raw.to_rccd_bytes()?)?;
    let decoded = exp.decode(&raw)?;
    w.write(DECODED_FILE, &decoded.to_rccd_bytes()?)?;
    let rf = exp.beamform(&decoded)?;
    w.write_grid(RF_FILE, &rf)?;
    let bmode = exp.postproc(rf)?;
    w.write_grid(ENVELOPE_FILE, &bmode.envelope)?;
    w.write(BMODE_FILE, &io::pgm_bytes(&bmode.db, 0, bmode.dynamic_range_db)?)?;
    let report = exp.metrics(&bmode.envelope)?;
    w.write_csv(METRICS_FILE, &report)
}

/// Sequences compared by `compare`: the configured list, or the three
/// methods with default parameters.
pub fn comparison_sequences(exp: &Experiment) -> Vec<SequenceSection> {
    let listed = &exp.config.compare.sequences;
    if !listed.is_empty() {
        return listed.clone();
    }
    let forces = match &exp.config.sequence {
        s @ SequenceSection::Forces { .. } => s.clone(),
        _ => SequenceSection::default(),
    };
    vec![
        forces,
        SequenceSection::default_for(SequenceKind::Tpw).expect("TPW default"),
        SequenceSection::default_for(SequenceKind::Vls).expect("VLS default"),
    ]
}

/// Outcome of a comparison: per-method rows and per-target differences.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub report: MetricReport,
    pub deltas: Vec<DeltaRow>,
    pub images: Vec<(String, BModeImage)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub target_id: String,
    pub reference: String,
    pub method: String,
    pub d_gcnr: Option<f64>,
    pub d_fwhm_lat_um: Option<f64>,
    pub d_fwhm_ax_um: Option<f64>,
}

/// Images the shared phantom with each method. Unequal transmit counts are
/// refused unless `override_fairness` is set, in which case a warning is
/// recorded.
pub fn compare(exp: &Experiment, out: &Path, override_fairness: bool) -> Result<(Comparison, Manifest)> {
    let sections = comparison_sequences(exp);
    let exps = sections
        .into_iter()
        .map(|s| exp.with_sequence(s))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = exps.iter().map(|e| e.sequence.len()).collect();
    let unfair = counts.iter().any(|&c| c != counts[0]);
    let summary = exps
        .iter()
        .map(|e| format!("{} {}", e.label(), e.sequence.len()))
        .collect::<Vec<_>>()
        .join(", ");
    if unfair && !override_fairness {
        return Err(Error::Config(format!(
            "unequal transmit counts ({summary}); pass the fairness override to compare anyway"
        )));
    }
    let mut w = ArtifactWriter::new(out, "compare", &exp.config_sha256)?;
    w.manifest.transmit_events = counts.iter().sum();
    if unfair {
        let note = format!("fairness warning: unequal transmit counts ({summary})");
        log::warn!("{note}");
        w.manifest.notes.push(note);
    }
    let result = compare_stages(&exps, &mut w);
    w.finish(result)
}

fn compare_stages(exps: &[Experiment], w: &mut ArtifactWriter) -> Result<Comparison> {
    let mut images = Vec::new();
    let mut per_method = Vec::new();
    for e in exps {
        let label = e.label().to_lowercase();
        let bmode = e.image()?;
        w.write_grid(&format!("{label}_envelope.raw"), &bmode.envelope)?;
        per_method.push(e.metrics(&bmode.envelope)?);
        images.push((e.label().to_string(), bmode));
    }
    // Grouped by target, one row per method.
    let mut report = MetricReport::default();
    let n_targets = per_method[0].rows.len();
    for t in 0..n_targets {
        for m in &per_method {
            report.rows.push(m.rows[t].clone());
        }
    }
    let reference = exps
        .iter()
        .position(|e| e.sequence.kind() == SequenceKind::Forces)
        .unwrap_or(0);
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    let mut deltas = Vec::new();
    for t in 0..n_targets {
        let r = &per_method[reference].rows[t];
        for (k, m) in per_method.iter().enumerate() {
            if k == reference {
                continue;
            }
            let o = &m.rows[t];
            deltas.push(DeltaRow {
                target_id: r.target_id.clone(),
                reference: r.method.clone(),
                method: o.method.clone(),
                d_gcnr: diff(r.gcnr, o.gcnr),
                d_fwhm_lat_um: diff(r.fwhm_lat_um, o.fwhm_lat_um),
                d_fwhm_ax_um: diff(r.fwhm_ax_um, o.fwhm_ax_um),
            });
        }
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    w.write("compare_metrics.csv", &buf)?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    for d in &deltas {
        wr.serialize(d).map_err(|e| Error::Format(e.to_string()))?;
    }
    let buf = wr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    w.write("compare_deltas.csv", &buf)?;
    let dr = exps[0].config.outputs.dynamic_range_db;
    let dbs: Vec<&Image> = images.iter().map(|(_, b)| &b.db).collect();
    w.write("compare_strip.pgm", &io::pgm_strip(&dbs, dr, 4)?)?;
    Ok(Comparison {
        report,
        deltas,
        images,
    })
}

/// Walking-FORCES volume: per-plane experiments at each plane position.
pub fn volume_planes(exp: &Experiment) -> Result<(VolumeSpec, Vec<Experiment>)> {
    let v = exp
        .config
        .volume
        .ok_or_else(|| Error::Config("volume: section is required".into()))?;
    let focus = match &exp.config.sequence {
        SequenceSection::Forces { focus_depth_m, .. } => {
            focus_depth_m.unwrap_or_else(|| default_focus_depth(&exp.array))
        }
        _ => return Err(Error::Config("sequence.kind: volumes need a FORCES sequence".into())),
    };
    let spec = VolumeSpec {
        m: v.m,
        plane_spacing_m: v.plane_spacing_m,
        focal_depth_m: focus,
    };
    spec.validate()?;
    let planes = spec
        .plane_positions()
        .into_iter()
        .map(|y| {
            let mut e = exp.with_sequence(SequenceSection::Forces {
                focus_depth_m: Some(focus),
                plane_y_m: y,
                orientation: Orientation::RowsTransmit,
            })?;
            e.config.grid = e.config.grid.clone().at_y(y);
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, planes))
}

pub fn volume(exp: &Experiment, out: &Path) -> Result<Manifest> {
    let (spec, planes) = volume_planes(exp)?;
    let mut w = ArtifactWriter::new(out, "volume", &exp.config_sha256)?;
    w.manifest.transmit_events = spec.transmit_events(exp.array.n);
    if spec.m >= LONG_ACQUISITION_PLANES {
        w.manifest
            .notes
            .push(format!("long acquisition: {} planes", spec.m));
    }
    let result = (|| {
        let mut images = Vec::with_capacity(planes.len());
        for (k, p) in planes.iter().enumerate() {
            let bmode = p.image()?;
            w.manifest.planes.push(PlaneRecord {
                index: k,
                y_m: p.grid().y_plane,
                transmit_events: p.sequence.len(),
                envelope_sha256: sha256_hex(&io::raw_grid_bytes(&bmode.envelope)),
            });
            images.push(bmode);
        }
        let vol = stitch_volume(&images, &spec)?;
        w.write_grid("volume_envelope.raw", &vol.envelope)?;
        w.write_grid("volume_db.raw", &vol.db)?;
        let mid = spec.m / 2;
        w.write("volume_mid.pgm", &io::pgm_bytes(&vol.db, mid, exp.config.outputs.dynamic_range_db)?)
    })();
    w.finish(result).map(|(_, m)| m)
}
