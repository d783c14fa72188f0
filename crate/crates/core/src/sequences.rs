//! Transmit sequences for FORCES, tilted plane wave (TPW) and virtual line
//! source (VLS) acquisitions, plus the FORCES polarity correction and
//! Hadamard decode.
//!
//! Every delay profile is zero-referenced (minimum delay 0). The shift removed
//! is stored per event as [`TransmitEvent::delay_ref_s`]; a beamformer adds it
//! back to its nominal transmit time model.

use serde::{Deserialize, Serialize};

use crate::array::ArrayConfig;
use crate::channel::ChannelData;
use crate::error::{check_shape, domain, Result};

/// Sylvester-ordered `n x n` Hadamard matrix of `+1`/`-1` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasMatrix {
    n: usize,
    entries: Vec<i8>,
}

impl BiasMatrix {
    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.entries[row * self.n + col]
    }

    pub fn column(&self, col: usize) -> Vec<i8> {
        (0..self.n).map(|r| self.get(r, col)).collect()
    }

    /// `H * H^T` in exact integer arithmetic.
    pub fn gram(&self) -> Vec<i64> {
        let n = self.n;
        let mut out = vec![0i64; n * n];
        for a in 0..n {
            for b in 0..n {
                out[a * n + b] = (0..n)
                    .map(|k| self.get(a, k) as i64 * self.get(b, k) as i64)
                    .sum();
            }
        }
        out
    }
}

/// Sylvester construction `H(2m) = [[H, H], [H, -H]]`.
pub fn hadamard(n: usize) -> Result<BiasMatrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(domain(format!("Hadamard order {n} is not a power of two")));
    }
    let mut entries = vec![1i8];
    let mut m = 1;
    while m < n {
        let mut next = vec![0i8; 4 * m * m];
        for r in 0..m {
            for c in 0..m {
                let h = entries[r * m + c];
                next[r * 2 * m + c] = h;
                next[r * 2 * m + c + m] = h;
                next[(r + m) * 2 * m + c] = h;
                next[(r + m) * 2 * m + c + m] = -h;
            }
        }
        entries = next;
        m *= 2;
    }
    Ok(BiasMatrix { n, entries })
}

/// Which electrode set carries the transmit delays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Delays on rows, bias and receive on columns; images the x-z plane.
    #[default]
    RowsTransmit,
    /// Roles interchanged: delays on columns, bias and receive on rows;
    /// images the y-z plane.
    ColumnsTransmit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmitEvent {
    pub row_delays_s: Vec<f64>,
    pub row_apod: Vec<f64>,
    /// Transmit polarity of each column, in {-1, 0, +1}.
    pub col_bias: Vec<i8>,
    /// Receive polarity of each column. FORCES events reuse `col_bias`.
    pub rx_bias: Vec<i8>,
    /// Shift removed when zero-referencing the raw delay profile.
    pub delay_ref_s: f64,
    pub label: String,
}

impl TransmitEvent {
    /// Zero-references `raw` over the rows with nonzero apodization.
    fn from_raw_delays(raw: &[f64], row_apod: Vec<f64>, bias: Vec<i8>, label: String) -> Self {
        let min = raw
            .iter()
            .zip(&row_apod)
            .filter(|(_, &w)| w != 0.0)
            .map(|(&d, _)| d)
            .fold(f64::INFINITY, f64::min);
        let min = if min.is_finite() { min } else { 0.0 };
        let row_delays_s = raw
            .iter()
            .zip(&row_apod)
            .map(|(&d, &w)| if w != 0.0 { d - min } else { 0.0 })
            .collect();
        Self {
            row_delays_s,
            row_apod,
            rx_bias: bias.clone(),
            col_bias: bias,
            delay_ref_s: -min,
            label,
        }
    }
}

/// Method-specific parameters a sequence was generated from.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceParams {
    Forces { focus_depth_m: f64, plane_y_m: f64 },
    Tpw { angles_rad: Vec<f64> },
    Vls {
        virtual_depth_m: f64,
        subaperture_rows: usize,
        source_y_m: Vec<f64>,
    },
    /// Hand-built events, e.g. single-column reference acquisitions.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Forces,
    Tpw,
    Vls,
    Custom,
}

impl SequenceKind {
    pub fn label(self) -> &'static str {
        match self {
            SequenceKind::Forces => "FORCES",
            SequenceKind::Tpw => "TPW",
            SequenceKind::Vls => "VLS",
            SequenceKind::Custom => "CUSTOM",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub params: SequenceParams,
    pub orientation: Orientation,
    pub events: Vec<TransmitEvent>,
}

impl Sequence {
    pub fn kind(&self) -> SequenceKind {
        match self.params {
            SequenceParams::Forces { .. } => SequenceKind::Forces,
            SequenceParams::Tpw { .. } => SequenceKind::Tpw,
            SequenceParams::Vls { .. } => SequenceKind::Vls,
            SequenceParams::Custom => SequenceKind::Custom,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Hand-built sequence; every event must match the aperture size.
    pub fn custom(cfg: &ArrayConfig, events: Vec<TransmitEvent>) -> Result<Self> {
        for ev in &events {
            check_shape("row_delays_s", cfg.n, ev.row_delays_s.len())?;
            check_shape("row_apod", cfg.n, ev.row_apod.len())?;
            check_shape("col_bias", cfg.n, ev.col_bias.len())?;
            check_shape("rx_bias", cfg.n, ev.rx_bias.len())?;
        }
        Ok(Self {
            params: SequenceParams::Custom,
            orientation: Orientation::RowsTransmit,
            events,
        })
    }

    /// Same events with rows and columns interchanged.
    pub fn transposed(mut self) -> Self {
        self.orientation = match self.orientation {
            Orientation::RowsTransmit => Orientation::ColumnsTransmit,
            Orientation::ColumnsTransmit => Orientation::RowsTransmit,
        };
        self
    }

    /// Largest zero-referenced row delay over all events.
    pub fn max_delay(&self) -> f64 {
        self.events
            .iter()
            .flat_map(|e| e.row_delays_s.iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Row delays focusing the transmit at depth `focus_depth_m` in the y = 0
/// plane: outer rows fire first, the center row last.
pub fn elevational_focus_delays(cfg: &ArrayConfig, focus_depth_m: f64) -> Result<Vec<f64>> {
    Ok(steered_focus_profile(cfg, focus_depth_m, 0.0)?.0)
}

/// Zero-referenced focusing delays toward `(y = plane_y_m, z = focus)` and the
/// removed reference shift `(max_k r_k - F) / c`.
fn steered_focus_profile(cfg: &ArrayConfig, focus: f64, plane_y: f64) -> Result<(Vec<f64>, f64)> {
    if !(focus > 0.0 && focus.is_finite()) {
        return Err(domain(format!("focus depth {focus} must be positive")));
    }
    let c = cfg.sound_speed_m_s;
    let r: Vec<f64> = cfg
        .element_coords()
        .iter()
        .map(|&y| (y - plane_y).hypot(focus))
        .collect();
    let r_max = r.iter().copied().fold(f64::MIN, f64::max);
    let delays = r.iter().map(|&ri| (r_max - ri) / c).collect();
    Ok((delays, (r_max - focus) / c))
}

/// B-scan focal depth used when a config leaves it unset: 35 mm scaled by the
/// ratio of this aperture to a 128-element array at 7.8 MHz.
pub fn default_focus_depth(cfg: &ArrayConfig) -> f64 {
    let reference_width = 128.0 * cfg.sound_speed_m_s / 7.8e6;
    35e-3 * cfg.aperture_width() / reference_width
}

pub fn make_forces_sequence(cfg: &ArrayConfig, focus_depth_m: f64) -> Result<Sequence> {
    make_forces_sequence_at(cfg, focus_depth_m, 0.0)
}

/// FORCES sequence whose elevational focus sits in the plane `y = plane_y_m`.
/// Event `k` biases the columns with column `k` of the Hadamard matrix.
pub fn make_forces_sequence_at(
    cfg: &ArrayConfig,
    focus_depth_m: f64,
    plane_y_m: f64,
) -> Result<Sequence> {
    cfg.validate()?;
    let h = hadamard(cfg.n)?;
    let (delays, delay_ref) = steered_focus_profile(cfg, focus_depth_m, plane_y_m)?;
    let events = (0..cfg.n)
        .map(|k| {
            let bias = h.column(k);
            TransmitEvent {
                row_delays_s: delays.clone(),
                row_apod: vec![1.0; cfg.n],
                rx_bias: bias.clone(),
                col_bias: bias,
                delay_ref_s: delay_ref,
                label: format!("forces[{k}]"),
            }
        })
        .collect();
    Ok(Sequence {
        params: SequenceParams::Forces {
            focus_depth_m,
            plane_y_m,
        },
        orientation: Orientation::RowsTransmit,
        events,
    })
}

/// `count` angles evenly spaced over `[-max_deg, +max_deg]` (0 for one angle).
pub fn uniform_angles(count: usize, max_deg: f64) -> Vec<f64> {
    let max = max_deg.to_radians();
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count)
            .map(|k| -max + 2.0 * max * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// One plane wave per angle, tilted in elevation, bias +1 everywhere.
pub fn make_tpw_sequence(cfg: &ArrayConfig, angles_rad: &[f64]) -> Result<Sequence> {
    cfg.validate()?;
    if angles_rad.is_empty() {
        return Err(domain("TPW sequence needs at least one angle"));
    }
    if let Some(a) = angles_rad.iter().find(|a| !a.is_finite()) {
        return Err(domain(format!("non-finite TPW angle {a}")));
    }
    if angles_rad.iter().any(|a| a.abs() > std::f64::consts::FRAC_PI_4) {
        log::warn!("TPW angle beyond +/-45 degrees");
    }
    let c = cfg.sound_speed_m_s;
    let ys = cfg.element_coords();
    let events = angles_rad
        .iter()
        .enumerate()
        .map(|(k, &theta)| {
            let raw: Vec<f64> = ys.iter().map(|&y| y * theta.sin() / c).collect();
            TransmitEvent::from_raw_delays(
                &raw,
                vec![1.0; cfg.n],
                vec![1; cfg.n],
                format!("tpw[{k}]"),
            )
        })
        .collect();
    Ok(Sequence {
        params: SequenceParams::Tpw {
            angles_rad: angles_rad.to_vec(),
        },
        orientation: Orientation::RowsTransmit,
        events,
    })
}

/// Defaults for VLS: `n` sources, `z_v = -width/2`, `n/2` rows per subaperture.
pub fn default_vls_params(cfg: &ArrayConfig) -> (usize, f64, usize) {
    (cfg.n, -0.5 * cfg.aperture_width(), (cfg.n / 2).max(1))
}

/// Diverging waves from virtual line sources behind the aperture, walked
/// across elevation with a centered `subaperture_rows`-row subaperture.
pub fn make_vls_sequence(
    cfg: &ArrayConfig,
    n_virtual: usize,
    virtual_depth_m: f64,
    subaperture_rows: usize,
) -> Result<Sequence> {
    cfg.validate()?;
    if !(virtual_depth_m < 0.0) || !virtual_depth_m.is_finite() {
        return Err(domain(format!(
            "virtual source depth {virtual_depth_m} must be negative"
        )));
    }
    if n_virtual == 0 {
        return Err(domain("VLS sequence needs at least one virtual source"));
    }
    if subaperture_rows == 0 || subaperture_rows > cfg.n {
        return Err(domain(format!(
            "subaperture of {subaperture_rows} rows does not fit {} rows",
            cfg.n
        )));
    }
    let c = cfg.sound_speed_m_s;
    let ys = cfg.element_coords();
    let (y_lo, y_hi) = (ys[0], ys[cfg.n - 1]);
    let source_y: Vec<f64> = if n_virtual == 1 {
        vec![0.0]
    } else {
        (0..n_virtual)
            .map(|v| y_lo + (y_hi - y_lo) * v as f64 / (n_virtual - 1) as f64)
            .collect()
    };
    let zv = virtual_depth_m;
    let events = source_y
        .iter()
        .enumerate()
        .map(|(v, &yv)| {
            let center = yv / cfg.pitch_m + (cfg.n as f64 - 1.0) / 2.0;
            let first = (center - (subaperture_rows as f64 - 1.0) / 2.0)
                .round()
                .clamp(0.0, (cfg.n - subaperture_rows) as f64) as usize;
            let row_apod: Vec<f64> = (0..cfg.n)
                .map(|i| {
                    if (first..first + subaperture_rows).contains(&i) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let raw: Vec<f64> = ys
                .iter()
                .map(|&y| ((y - yv).hypot(zv) - zv.abs()) / c)
                .collect();
            TransmitEvent::from_raw_delays(&raw, row_apod, vec![1; cfg.n], format!("vls[{v}]"))
        })
        .collect();
    Ok(Sequence {
        params: SequenceParams::Vls {
            virtual_depth_m,
            subaperture_rows,
            source_y_m: source_y,
        },
        orientation: Orientation::RowsTransmit,
        events,
    })
}

/// Multiplies trace `(k, r)` by the receive polarity of column `r` in event
/// `k`, undoing the bias applied on receive. Applying it twice is identity.
pub fn forces_polarity_correct(raw: &ChannelData, seq: &Sequence) -> Result<ChannelData> {
    if seq.kind() != SequenceKind::Forces {
        return Err(domain(format!(
            "polarity correction expects a FORCES sequence, got {}",
            seq.kind().label()
        )));
    }
    check_shape("events", seq.len(), raw.n_events)?;
    let mut out = raw.clone();
    for (k, ev) in seq.events.iter().enumerate() {
        check_shape("receive channels", ev.rx_bias.len(), raw.n_rx)?;
        for (r, &b) in ev.rx_bias.iter().enumerate() {
            if b != 1 {
                let s = b as f64;
                out.trace_mut(k, r).iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(out)
}

/// Recovers single-column-transmit data: `s_c = (1/n) * sum_k H[c,k] S_k`.
pub fn forces_decode(corrected: &ChannelData, h: &BiasMatrix) -> Result<ChannelData> {
    let n = h.order();
    check_shape("events", n, corrected.n_events)?;
    let mut out = corrected.clone();
    let scale = 1.0 / n as f64;
    for c in 0..n {
        let dst = out.event_mut(c);
        dst.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            let w = h.get(c, k) as f64;
            for (d, s) in dst.iter_mut().zip(corrected.event(k)) {
                *d += w * s;
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Synthetic Hadamard encoding `S_k = sum_c H[c,k] s_c`, the inverse of
/// [`forces_decode`].
pub fn hadamard_encode(data: &ChannelData, h: &BiasMatrix) -> Result<ChannelData> {
    let n = h.order();
    check_shape("events", n, data.n_events)?;
    let mut out = data.clone();
    for k in 0..n {
        let dst = out.event_mut(k);
        dst.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..n {
            let w = h.get(c, k) as f64;
            for (d, s) in dst.iter_mut().zip(data.event(c)) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}
