//! B-mode display chain and volume assembly.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::array::ArrayConfig;
use crate::beamform::{das_forces, BeamformParams, Image, ImageGrid};
use crate::channel::ChannelData;
use crate::error::{domain, Result};
use crate::sequences::{forces_decode, forces_polarity_correct, hadamard, Orientation, Sequence};

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 60.0;

/// Analytic-signal magnitude along depth for every image column, using the
/// one-sided spectrum (discrete Hilbert transform).
pub fn envelope(rf: &Image) -> Result<Image> {
    let nz = rf.grid.nz;
    if nz < 4 {
        return Err(domain(format!("envelope needs nz >= 4, got {nz}")));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nz);
    let inv = planner.plan_fft_inverse(nz);
    let mut out = rf.clone();
    out.data.par_chunks_mut(nz).for_each_init(
        || vec![Complex64::new(0.0, 0.0); nz],
        |buf, col| {
            for (b, &v) in buf.iter_mut().zip(col.iter()) {
                *b = Complex64::new(v, 0.0);
            }
            fwd.process(buf);
            let half = nz / 2;
            for (k, b) in buf.iter_mut().enumerate() {
                let h = if k == 0 || (nz % 2 == 0 && k == half) {
                    1.0
                } else if k < (nz + 1) / 2 {
                    2.0
                } else {
                    0.0
                };
                *b *= h;
            }
            inv.process(buf);
            let scale = 1.0 / nz as f64;
            for (v, b) in col.iter_mut().zip(buf.iter()) {
                *v = b.norm() * scale;
            }
        },
    );
    Ok(out)
}

/// `20 log10(env / max)` clamped to `[-dynamic_range_db, 0]`.
pub fn log_compress(env: &Image, dynamic_range_db: f64) -> Result<Image> {
    if !(dynamic_range_db > 0.0) {
        return Err(domain("dynamic range must be positive"));
    }
    let max = env.data.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(domain("log compression of an all-zero envelope"));
    }
    let mut out = env.clone();
    for v in &mut out.data {
        let db = 20.0 * (*v / max).log10();
        *v = if db.is_nan() {
            -dynamic_range_db
        } else {
            db.clamp(-dynamic_range_db, 0.0)
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BModeImage {
    pub rf: Image,
    pub envelope: Image,
    pub db: Image,
    pub dynamic_range_db: f64,
}

impl BModeImage {
    pub fn from_rf(rf: Image, dynamic_range_db: f64) -> Result<Self> {
        let envelope = envelope(&rf)?;
        let db = log_compress(&envelope, dynamic_range_db)?;
        Ok(Self {
            rf,
            envelope,
            db,
            dynamic_range_db,
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.rf.grid
    }
}

/// Orthogonal FORCES B-scans: one acquired with delays on rows (x-z plane),
/// one with the roles of rows and columns interchanged (y-z plane). Each
/// image is expressed in its own acquisition frame, so its azimuth is `x`
/// for the first and `y` for the second.
pub fn cross_plane(
    cfg: &ArrayConfig,
    rows: (&Sequence, &ChannelData),
    cols: (&Sequence, &ChannelData),
    grid: &ImageGrid,
    params: &BeamformParams,
    dynamic_range_db: f64,
) -> Result<(BModeImage, BModeImage)> {
    let (seq_a, raw_a) = rows;
    let (seq_b, raw_b) = cols;
    if seq_a.orientation != Orientation::RowsTransmit
        || seq_b.orientation != Orientation::ColumnsTransmit
    {
        return Err(domain(
            "cross-plane needs a rows-transmit and a columns-transmit acquisition",
        ));
    }
    if seq_a.kind() != seq_b.kind()
        || seq_a.len() != seq_b.len()
        || seq_a.params != seq_b.params
        || !raw_a.same_layout(raw_b)
    {
        return Err(domain("cross-plane acquisitions have mismatched configs"));
    }
    let h = hadamard(cfg.n)?;
    let image = |seq: &Sequence, raw: &ChannelData| -> Result<BModeImage> {
        let decoded = forces_decode(&forces_polarity_correct(raw, seq)?, &h)?;
        let rf = das_forces(&decoded, cfg, seq, grid, params)?;
        BModeImage::from_rf(rf, dynamic_range_db)
    };
    Ok((image(seq_a, raw_a)?, image(seq_b, raw_b)?))
}

/// Walking-scan layout: `m` planes, `plane_spacing_m` apart, centered on
/// `y = 0`, each focused at `focal_depth_m`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSpec {
    pub m: usize,
    pub plane_spacing_m: f64,
    pub focal_depth_m: f64,
}

impl VolumeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(domain("volume needs m >= 1 planes"));
        }
        if !(self.plane_spacing_m > 0.0) {
            return Err(domain("plane spacing must be positive"));
        }
        if !(self.focal_depth_m > 0.0) {
            return Err(domain("focal depth must be positive"));
        }
        Ok(())
    }

    pub fn plane_positions(&self) -> Vec<f64> {
        let mid = (self.m as f64 - 1.0) / 2.0;
        (0..self.m)
            .map(|p| (p as f64 - mid) * self.plane_spacing_m)
            .collect()
    }

    /// `(m - 1) * spacing`.
    pub fn extent(&self) -> f64 {
        (self.m as f64 - 1.0) * self.plane_spacing_m
    }

    /// Transmit events for the whole volume: `events_per_plane * m`.
    pub fn transmit_events(&self, events_per_plane: usize) -> usize {
        events_per_plane * self.m
    }
}

/// Stacked scan planes; no interpolation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchedVolume {
    pub spec: VolumeSpec,
    pub envelope: Image,
    pub db: Image,
}

pub fn stitch_volume(planes: &[BModeImage], spec: &VolumeSpec) -> Result<StitchedVolume> {
    spec.validate()?;
    if planes.len() != spec.m {
        return Err(domain(format!(
            "expected {} planes, got {}",
            spec.m,
            planes.len()
        )));
    }
    let first = planes[0].grid();
    for p in planes {
        let g = p.grid();
        if g.y_range.is_some()
            || (g.x_min, g.x_max, g.nx, g.z_min, g.z_max, g.nz)
                != (first.x_min, first.x_max, first.nx, first.z_min, first.z_max, first.nz)
        {
            return Err(domain("scan planes have inconsistent grids"));
        }
    }
    let ys = spec.plane_positions();
    let mut grid = first.clone();
    grid.y_plane = 0.0;
    grid.y_range = Some((ys[0], ys[spec.m - 1], spec.m));
    let stack = |pick: fn(&BModeImage) -> &Image| Image {
        grid: grid.clone(),
        data: planes.iter().flat_map(|p| pick(p).data.iter().copied()).collect(),
    };
    Ok(StitchedVolume {
        spec: *spec,
        envelope: stack(|p| &p.envelope),
        db: stack(|p| &p.db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn column_image(values: Vec<f64>) -> Image {
        let nz = values.len();
        Image {
            grid: ImageGrid::plane(0.0, 0.0, 1, 1.0, 2.0, nz),
            data: values,
        }
    }

    #[test]
    fn envelope_of_cosine_is_flat() {
        let nz = 512;
        let amp = 2.5;
        // 37 cycles over the column keeps the tone on a DFT bin.
        let rf = column_image((0..nz).map(|k| amp * (2.0 * PI * 37.0 * k as f64 / nz as f64).cos()).collect());
        let env = envelope(&rf).unwrap();
        for &v in &env.data[nz / 8..7 * nz / 8] {
            assert!((v - amp).abs() < 0.02 * amp);
        }
    }

    #[test]
    fn envelope_of_gated_tone_interior() {
        // Off-bin tone: interior samples within 2%.
        let nz = 400;
        let rf = column_image((0..nz).map(|k| (2.0 * PI * 0.21 * k as f64).cos()).collect());
        let env = envelope(&rf).unwrap();
        for &v in &env.data[nz / 4..3 * nz / 4] {
            assert!((v - 1.0).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn envelope_zero_and_sign() {
        let z = column_image(vec![0.0; 16]);
        assert!(envelope(&z).unwrap().data.iter().all(|&v| v == 0.0));
        let rf = column_image((0..32).map(|k| (k as f64 * 0.7).sin() * (k as f64)).collect());
        let mut neg = rf.clone();
        neg.data.iter_mut().for_each(|v| *v = -*v);
        let a = envelope(&rf).unwrap();
        let b = envelope(&neg).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(envelope(&column_image(vec![1.0; 3])).is_err());
    }

    #[test]
    fn envelope_is_homogeneous() {
        let rf = column_image((0..64).map(|k| (k as f64 * 0.9).cos() * (-(k as f64 - 30.0).powi(2) / 50.0).exp()).collect());
        let mut scaled = rf.clone();
        scaled.data.iter_mut().for_each(|v| *v *= 3.7);
        let a = envelope(&rf).unwrap();
        let b = envelope(&scaled).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((3.7 * x - y).abs() < 1e-12);
        }
        let da = log_compress(&a, 60.0).unwrap();
        let db = log_compress(&b, 60.0).unwrap();
        for (x, y) in da.data.iter().zip(&db.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn log_compress_cases() {
        let env = column_image(vec![10.0, 1.0, 0.0, 5.0]);
        let db = log_compress(&env, 60.0).unwrap();
        assert_eq!(db.data[0], 0.0);
        assert!((db.data[1] + 20.0).abs() < 1e-12);
        assert_eq!(db.data[2], -60.0);
        assert!(log_compress(&column_image(vec![0.0; 4]), 60.0).is_err());
    }

    fn plane(y: f64, fill: f64) -> BModeImage {
        let rf = Image {
            grid: ImageGrid::plane(-1e-3, 1e-3, 3, 1e-3, 2e-3, 8).at_y(y),
            data: (0..24).map(|k| fill + (k as f64).sin()).collect(),
        };
        BModeImage::from_rf(rf, 60.0).unwrap()
    }

    #[test]
    fn stitch_single_plane() {
        let spec = VolumeSpec { m: 1, plane_spacing_m: 3e-4, focal_depth_m: 0.035 };
        let p = plane(0.0, 0.0);
        let vol = stitch_volume(&[p.clone()], &spec).unwrap();
        assert_eq!(vol.envelope.slice(0), p.envelope);
        assert_eq!(vol.envelope.data, p.envelope.data);
    }

    #[test]
    fn stitch_extent_and_slices() {
        let spec = VolumeSpec { m: 8, plane_spacing_m: 300e-6, focal_depth_m: 0.012 };
        assert!((spec.extent() - 2.1e-3).abs() < 1e-15);
        let ys = spec.plane_positions();
        let planes: Vec<BModeImage> = ys.iter().enumerate().map(|(k, &y)| plane(y, k as f64)).collect();
        let vol = stitch_volume(&planes, &spec).unwrap();
        assert_eq!(vol.envelope.grid.ny(), 8);
        let (lo, hi, _) = vol.envelope.grid.y_range.unwrap();
        assert!((hi - lo - 2.1e-3).abs() < 1e-15);
        for (k, p) in planes.iter().enumerate() {
            assert_eq!(vol.envelope.slice(k).data, p.envelope.data);
            assert_eq!(vol.db.slice(k).data, p.db.data);
        }
        assert!(stitch_volume(&planes[..7], &spec).is_err());
    }

    #[test]
    fn sixty_four_plane_extent() {
        let spec = VolumeSpec { m: 64, plane_spacing_m: 300e-6, focal_depth_m: 0.035 };
        assert!((spec.extent() - 18.9e-3).abs() < 1e-12);
        assert_eq!(spec.transmit_events(128), 128 * 64);
    }

    #[test]
    fn stitch_rejects_inconsistent_grids() {
        let spec = VolumeSpec { m: 2, plane_spacing_m: 3e-4, focal_depth_m: 0.01 };
        let a = plane(0.0, 0.0);
        let mut b = plane(0.0, 1.0);
        b.rf.grid.nx = 4;
        assert!(stitch_volume(&[a, b], &spec).is_err());
    }
}
