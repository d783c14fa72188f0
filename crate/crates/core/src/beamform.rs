//! Delay-and-sum kernels for the three transmit schemes.
//!
//! Grids are expressed in the acquisition frame: `x` runs along the receive
//! electrodes' enumeration axis (azimuth) and `y` along the transmit-delay
//! axis (elevation). For a rows-transmit acquisition that is the physical
//! frame; for a columns-transmit acquisition physical `x` and `y` swap.
//!
//! Receive delays treat each column as a line element: the distance from a
//! pixel to column `r` is `sqrt((x - x_r)^2 + z^2)`, independent of `y`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::ArrayConfig;
use crate::channel::ChannelData;
use crate::error::{check_shape, domain, Result};
use crate::sequences::{Sequence, SequenceKind, SequenceParams};

/// Rectilinear pixel or voxel lattice. Axis endpoints are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub nz: usize,
    /// Elevation of a single-plane grid.
    #[serde(default)]
    pub y_plane: f64,
    /// Elevation extent `(y_min, y_max, ny)` of a volumetric grid.
    #[serde(default)]
    pub y_range: Option<(f64, f64, usize)>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl ImageGrid {
    pub fn plane(x_min: f64, x_max: f64, nx: usize, z_min: f64, z_max: f64, nz: usize) -> Self {
        Self {
            x_min,
            x_max,
            nx,
            z_min,
            z_max,
            nz,
            y_plane: 0.0,
            y_range: None,
        }
    }

    pub fn at_y(mut self, y: f64) -> Self {
        self.y_plane = y;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nz == 0 {
            return Err(domain("grid needs nx, nz >= 1"));
        }
        if !(self.z_min > 0.0) || self.z_max < self.z_min || self.x_max < self.x_min {
            return Err(domain("grid needs 0 < z_min <= z_max and x_min <= x_max"));
        }
        if let Some((lo, hi, ny)) = self.y_range {
            if ny == 0 || hi < lo {
                return Err(domain("grid y range needs ny >= 1 and y_min <= y_max"));
            }
        }
        Ok(())
    }

    pub fn ny(&self) -> usize {
        self.y_range.map_or(1, |(_, _, ny)| ny)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny() * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.nx)
    }

    pub fn zs(&self) -> Vec<f64> {
        linspace(self.z_min, self.z_max, self.nz)
    }

    pub fn ys(&self) -> Vec<f64> {
        match self.y_range {
            Some((lo, hi, ny)) => linspace(lo, hi, ny),
            None => vec![self.y_plane],
        }
    }

    pub fn dx(&self) -> f64 {
        step(self.x_min, self.x_max, self.nx)
    }

    pub fn dz(&self) -> f64 {
        step(self.z_min, self.z_max, self.nz)
    }

    pub fn dy(&self) -> f64 {
        self.y_range.map_or(0.0, |(lo, hi, ny)| step(lo, hi, ny))
    }

    fn warn_if_coarse(&self, wavelength: f64) {
        let coarse = |d: f64| d > wavelength / 2.0 * (1.0 + 1e-9);
        if coarse(self.dx()) || coarse(self.dz()) {
            log::warn!(
                "pixel spacing ({:.3e}, {:.3e}) m exceeds half a wavelength",
                self.dx(),
                self.dz()
            );
        }
    }
}

fn step(lo: f64, hi: f64, n: usize) -> f64 {
    if n > 1 {
        (hi - lo) / (n - 1) as f64
    } else {
        0.0
    }
}

/// Beamformed data on a grid, stored `[y][x][z]` so depth columns are
/// contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub grid: ImageGrid,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: ImageGrid) -> Self {
        let len = grid.len();
        Self {
            grid,
            data: vec![0.0; len],
        }
    }

    #[inline]
    pub fn index(&self, iy: usize, ix: usize, iz: usize) -> usize {
        (iy * self.grid.nx + ix) * self.grid.nz + iz
    }

    #[inline]
    pub fn get(&self, iy: usize, ix: usize, iz: usize) -> f64 {
        self.data[self.index(iy, ix, iz)]
    }

    pub fn column(&self, iy: usize, ix: usize) -> &[f64] {
        let start = self.index(iy, ix, 0);
        &self.data[start..start + self.grid.nz]
    }

    /// One elevation plane as a single-plane image.
    pub fn slice(&self, iy: usize) -> Image {
        let len = self.grid.nx * self.grid.nz;
        let mut grid = self.grid.clone();
        grid.y_plane = self.grid.ys()[iy];
        grid.y_range = None;
        Image {
            grid,
            data: self.data[iy * len..(iy + 1) * len].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index `(iy, ix, iz)` of the largest value.
    pub fn argmax(&self) -> (usize, usize, usize) {
        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
        for (k, &v) in self.data.iter().enumerate() {
            if v > best {
                best = v;
                at = k;
            }
        }
        let nz = self.grid.nz;
        let nx = self.grid.nx;
        (at / (nx * nz), (at / nz) % nx, at % nz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApodWindow {
    Rect,
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformParams {
    /// Receive aperture growth: active width = depth / f_number.
    pub f_number: f64,
    /// Synthetic transmit aperture growth (FORCES columns, VLS sources).
    pub tx_f_number: f64,
    pub apod_window: ApodWindow,
}

impl Default for BeamformParams {
    fn default() -> Self {
        Self {
            f_number: 1.5,
            tx_f_number: 1.5,
            apod_window: ApodWindow::Hann,
        }
    }
}

impl BeamformParams {
    fn validate(&self) -> Result<()> {
        if !(self.f_number > 0.0 && self.tx_f_number > 0.0) {
            return Err(domain("f-numbers must be positive"));
        }
        Ok(())
    }
}

/// Window value at `u = (element - pixel) / (depth / f_number)`, zero outside
/// `|u| <= 1/2`.
pub fn apodization_weight(
    window: ApodWindow,
    f_number: f64,
    pixel: f64,
    element: f64,
    depth: f64,
) -> f64 {
    let width = depth / f_number;
    if !(width > 0.0) {
        return 0.0;
    }
    let u = (element - pixel) / width;
    if u.abs() > 0.5 {
        return 0.0;
    }
    match window {
        ApodWindow::Rect => 1.0,
        ApodWindow::Hann => 0.5 * (1.0 + (2.0 * std::f64::consts::PI * u).cos()),
    }
}

/// Linear interpolation at fractional sample `idx`; zero outside the record.
#[inline]
fn sample(trace: &[f64], idx: f64) -> f64 {
    if !(idx >= 0.0) {
        return 0.0;
    }
    let i0 = idx as usize;
    let frac = idx - i0 as f64;
    if i0 + 1 < trace.len() {
        trace[i0] + frac * (trace[i0 + 1] - trace[i0])
    } else if i0 + 1 == trace.len() && frac == 0.0 {
        trace[i0]
    } else {
        0.0
    }
}

/// Per-element tables over a plane: one-way line-element travel time in
/// samples and apodization weight, both `[element][x][z]`.
struct LateralTables {
    samples: Vec<f64>,
    weights: Vec<f64>,
}

impl LateralTables {
    fn new(
        cfg: &ArrayConfig,
        grid: &ImageGrid,
        fs: f64,
        window: ApodWindow,
        f_number: f64,
    ) -> Self {
        let (xs, zs) = (grid.xs(), grid.zs());
        let per = xs.len() * zs.len();
        let mut samples = vec![0.0; cfg.n * per];
        let mut weights = vec![0.0; cfg.n * per];
        let k = fs / cfg.sound_speed_m_s;
        for (e, xe) in cfg.element_coords().into_iter().enumerate() {
            for (ix, &x) in xs.iter().enumerate() {
                let base = e * per + ix * zs.len();
                for (iz, &z) in zs.iter().enumerate() {
                    samples[base + iz] = (x - xe).hypot(z) * k;
                    weights[base + iz] = apodization_weight(window, f_number, x, xe, z);
                }
            }
        }
        Self { samples, weights }
    }

    #[inline]
    fn column(&self, e: usize, ix: usize, nx: usize, nz: usize) -> (&[f64], &[f64]) {
        let base = (e * nx + ix) * nz;
        (
            &self.samples[base..base + nz],
            &self.weights[base..base + nz],
        )
    }
}

fn check_data(cfg: &ArrayConfig, data: &ChannelData, seq: &Sequence) -> Result<()> {
    check_shape("events", seq.len(), data.n_events)?;
    check_shape("receive channels", cfg.n, data.n_rx)?;
    if !(data.fs_hz > 0.0) {
        return Err(domain("record sampling rate must be positive"));
    }
    Ok(())
}

fn coverage_warning(data: &ChannelData, grid: &ImageGrid, extra_s: f64) {
    let c = data.sound_speed;
    let t_end = data.t0_s + data.n_samples as f64 / data.fs_hz;
    let early = 2.0 * grid.z_min / c + extra_s < data.t0_s;
    let late = 2.0 * grid.z_max / c + extra_s > t_end;
    if early || late {
        log::info!("grid extends outside the recorded time window; uncovered pixels are 0");
    }
}

/// Synthetic transmit-receive aperture DAS on decoded FORCES data: event `c`
/// of `decoded` is the single-column transmit from column `c`.
pub fn das_forces(
    decoded: &ChannelData,
    cfg: &ArrayConfig,
    seq: &Sequence,
    grid: &ImageGrid,
    params: &BeamformParams,
) -> Result<Image> {
    grid.validate()?;
    params.validate()?;
    check_data(cfg, decoded, seq)?;
    let SequenceParams::Forces { plane_y_m, .. } = seq.params else {
        return Err(domain(format!(
            "FORCES beamformer got a {} sequence",
            seq.kind().label()
        )));
    };
    if grid.y_range.is_some() {
        return Err(domain("FORCES data images a single elevation plane"));
    }
    if (grid.y_plane - plane_y_m).abs() > 1e-9 {
        return Err(domain(format!(
            "grid plane y = {} differs from the sequence focus plane y = {plane_y_m}",
            grid.y_plane
        )));
    }
    grid.warn_if_coarse(cfg.wavelength());
    let t_ref = seq.events[0].delay_ref_s;
    coverage_warning(decoded, grid, t_ref);

    let fs = decoded.fs_hz;
    let (nx, nz, n) = (grid.nx, grid.nz, cfg.n);
    let tx = LateralTables::new(cfg, grid, fs, params.apod_window, params.tx_f_number);
    let rx = LateralTables::new(cfg, grid, fs, params.apod_window, params.f_number);
    let offset = (t_ref - decoded.t0_s) * fs;

    let mut img = Image::zeros(grid.clone());
    img.data.par_chunks_mut(nz).enumerate().for_each(|(ix, col)| {
        let mut idx = vec![0.0; nz];
        let mut wt = vec![0.0; nz];
        for c in 0..n {
            let (ts_c, w_c) = tx.column(c, ix, nx, nz);
            if w_c.iter().all(|&w| w == 0.0) {
                continue;
            }
            for r in 0..n {
                let (ts_r, w_r) = rx.column(r, ix, nx, nz);
                let trace = decoded.trace(c, r);
                for iz in 0..nz {
                    wt[iz] = w_c[iz] * w_r[iz];
                    idx[iz] = ts_c[iz] + ts_r[iz] + offset;
                }
                for iz in 0..nz {
                    if wt[iz] != 0.0 {
                        col[iz] += wt[iz] * sample(trace, idx[iz]);
                    }
                }
            }
        }
    });
    Ok(img)
}

/// Shared receive-side DAS for conventional row-column sequences: for every
/// event, `tx_time(event, y, z)` gives the transmit arrival in seconds and
/// `tx_weight(event, y, z)` its weight.
fn das_conventional<T, W>(
    data: &ChannelData,
    cfg: &ArrayConfig,
    grid: &ImageGrid,
    params: &BeamformParams,
    tx_time: T,
    tx_weight: W,
) -> Image
where
    T: Fn(usize, f64, f64) -> f64 + Sync,
    W: Fn(usize, f64, f64) -> f64 + Sync,
{
    let fs = data.fs_hz;
    let (nx, nz, n) = (grid.nx, grid.nz, cfg.n);
    let rx = LateralTables::new(cfg, grid, fs, params.apod_window, params.f_number);
    let (ys, zs) = (grid.ys(), grid.zs());
    let n_events = data.n_events;
    let mut img = Image::zeros(grid.clone());
    img.data
        .par_chunks_mut(nz)
        .enumerate()
        .for_each(|(k, col)| {
            let (iy, ix) = (k / nx, k % nx);
            let y = ys[iy];
            let mut tx_idx = vec![0.0; nz];
            let mut tx_w = vec![0.0; nz];
            for e in 0..n_events {
                for (iz, &z) in zs.iter().enumerate() {
                    tx_idx[iz] = (tx_time(e, y, z) - data.t0_s) * fs;
                    tx_w[iz] = tx_weight(e, y, z);
                }
                if tx_w.iter().all(|&w| w == 0.0) {
                    continue;
                }
                for r in 0..n {
                    let (ts_r, w_r) = rx.column(r, ix, nx, nz);
                    let trace = data.trace(e, r);
                    for iz in 0..nz {
                        let w = tx_w[iz] * w_r[iz];
                        if w != 0.0 {
                            col[iz] += w * sample(trace, tx_idx[iz] + ts_r[iz]);
                        }
                    }
                }
            }
        });
    img
}

/// Tilted plane wave compounding with line-element receive focusing. The
/// grid may be volumetric.
pub fn das_tpw(
    data: &ChannelData,
    cfg: &ArrayConfig,
    seq: &Sequence,
    grid: &ImageGrid,
    params: &BeamformParams,
) -> Result<Image> {
    grid.validate()?;
    params.validate()?;
    check_data(cfg, data, seq)?;
    let SequenceParams::Tpw { angles_rad } = &seq.params else {
        return Err(domain(format!(
            "TPW beamformer got a {} sequence",
            seq.kind().label()
        )));
    };
    grid.warn_if_coarse(cfg.wavelength());
    coverage_warning(data, grid, 0.0);
    let c = cfg.sound_speed_m_s;
    let trig: Vec<(f64, f64, f64)> = angles_rad
        .iter()
        .zip(&seq.events)
        .map(|(a, ev)| (a.sin(), a.cos(), ev.delay_ref_s))
        .collect();
    Ok(das_conventional(
        data,
        cfg,
        grid,
        params,
        |e, y, z| {
            let (s, co, t_ref) = trig[e];
            (z * co + y * s) / c + t_ref
        },
        |_, _, _| 1.0,
    ))
}

/// Virtual line source synthetic aperture DAS. The grid may be volumetric.
pub fn das_vls(
    data: &ChannelData,
    cfg: &ArrayConfig,
    seq: &Sequence,
    grid: &ImageGrid,
    params: &BeamformParams,
) -> Result<Image> {
    grid.validate()?;
    params.validate()?;
    check_data(cfg, data, seq)?;
    let SequenceParams::Vls {
        virtual_depth_m,
        source_y_m,
        ..
    } = &seq.params
    else {
        return Err(domain(format!(
            "VLS beamformer got a {} sequence",
            seq.kind().label()
        )));
    };
    grid.warn_if_coarse(cfg.wavelength());
    coverage_warning(data, grid, 0.0);
    let c = cfg.sound_speed_m_s;
    let zv = *virtual_depth_m;
    let refs: Vec<f64> = seq.events.iter().map(|e| e.delay_ref_s).collect();
    let window = params.apod_window;
    let tx_f = params.tx_f_number;
    Ok(das_conventional(
        data,
        cfg,
        grid,
        params,
        |e, y, z| ((y - source_y_m[e]).hypot(z - zv) - zv.abs()) / c + refs[e],
        |e, y, z| apodization_weight(window, tx_f, y, source_y_m[e], z),
    ))
}

/// Dispatches on the sequence kind. FORCES data must already be decoded.
pub fn beamform(
    data: &ChannelData,
    cfg: &ArrayConfig,
    seq: &Sequence,
    grid: &ImageGrid,
    params: &BeamformParams,
) -> Result<Image> {
    match seq.kind() {
        SequenceKind::Forces => das_forces(data, cfg, seq, grid, params),
        SequenceKind::Tpw => das_tpw(data, cfg, seq, grid, params),
        SequenceKind::Vls => das_vls(data, cfg, seq, grid, params),
        SequenceKind::Custom => Err(domain("no beamformer for custom sequences")),
    }
}
