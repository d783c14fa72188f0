//! Row-column aperture geometry.
//!
//! Axes: `x` is azimuth (columns are enumerated along `x` and are long in
//! `y`), `y` is elevation (rows are enumerated along `y` and are long in
//! `x`), `z` is depth into the medium. The aperture is centered on the origin
//! in the `z = 0` plane, so sub-element `(row i, col j)` sits at
//! `((j - (n-1)/2) * pitch, (i - (n-1)/2) * pitch, 0)`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Default medium sound speed (m/s).
pub const DEFAULT_SOUND_SPEED: f64 = 1540.0;

/// Geometry and acoustics of an `n x n` row-column aperture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub n: usize,
    pub pitch_m: f64,
    pub center_freq_hz: f64,
    pub frac_bandwidth: f64,
    pub sound_speed_m_s: f64,
    pub sampling_freq_hz: f64,
}

impl ArrayConfig {
    /// Builds a validated configuration.
    pub fn new(
        n: usize,
        pitch_m: f64,
        center_freq_hz: f64,
        frac_bandwidth: f64,
        sound_speed_m_s: f64,
        sampling_freq_hz: f64,
    ) -> Result<Self> {
        let cfg = Self {
            n,
            pitch_m,
            center_freq_hz,
            frac_bandwidth,
            sound_speed_m_s,
            sampling_freq_hz,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Lambda-pitch array at the default sound speed.
    pub fn lambda_pitch(
        n: usize,
        center_freq_hz: f64,
        frac_bandwidth: f64,
        sampling_freq_hz: f64,
    ) -> Result<Self> {
        let pitch = DEFAULT_SOUND_SPEED / center_freq_hz;
        Self::new(
            n,
            pitch,
            center_freq_hz,
            frac_bandwidth,
            DEFAULT_SOUND_SPEED,
            sampling_freq_hz,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !self.n.is_power_of_two() {
            return Err(domain(format!(
                "n = {} must be a power of two",
                self.n
            )));
        }
        if !(self.pitch_m > 0.0 && self.pitch_m.is_finite()) {
            return Err(domain(format!("pitch_m = {} must be positive", self.pitch_m)));
        }
        if !(self.center_freq_hz > 0.0 && self.center_freq_hz.is_finite()) {
            return Err(domain("center_freq_hz must be positive"));
        }
        if !(self.frac_bandwidth > 0.0 && self.frac_bandwidth <= 1.0) {
            return Err(domain(format!(
                "frac_bandwidth = {} must lie in (0, 1]",
                self.frac_bandwidth
            )));
        }
        if !(self.sound_speed_m_s > 0.0 && self.sound_speed_m_s.is_finite()) {
            return Err(domain("sound_speed_m_s must be positive"));
        }
        if !(self.sampling_freq_hz >= 4.0 * self.center_freq_hz) {
            return Err(domain(format!(
                "sampling_freq_hz = {} is below 4 x center_freq_hz",
                self.sampling_freq_hz
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        wavelength(self)
    }

    /// Aperture side length `n * pitch`.
    pub fn aperture_width(&self) -> f64 {
        self.n as f64 * self.pitch_m
    }

    /// Coordinate of element `k` along either lateral axis.
    #[inline]
    pub fn element_coord(&self, k: usize) -> f64 {
        (k as f64 - (self.n as f64 - 1.0) / 2.0) * self.pitch_m
    }

    /// Element centers along one lateral axis (same for rows and columns).
    pub fn element_coords(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.element_coord(k)).collect()
    }
}

/// Medium wavelength at the center frequency.
pub fn wavelength(cfg: &ArrayConfig) -> f64 {
    cfg.sound_speed_m_s / cfg.center_freq_hz
}

/// Center of sub-element `(row, col)`.
pub fn subelement_position(cfg: &ArrayConfig, row: usize, col: usize) -> Result<[f64; 3]> {
    if row >= cfg.n || col >= cfg.n {
        return Err(domain(format!(
            "sub-element ({row}, {col}) outside {n}x{n} aperture",
            n = cfg.n
        )));
    }
    Ok([cfg.element_coord(col), cfg.element_coord(row), 0.0])
}
