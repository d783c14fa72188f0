//! Image quality metrics: generalized contrast-to-noise ratio (gCNR) for
//! anechoic cysts and full width at half maximum (FWHM) for point targets.

use std::io::Write;

use serde::Serialize;

use crate::beamform::Image;
use crate::error::{domain, Error, Result};

pub const DEFAULT_BINS: usize = 100;
/// ROIs with fewer pixels than this trigger a warning.
pub const MIN_ROI_PIXELS: usize = 100;

/// Region in the image plane; coordinates are `(x, z)` in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Disk { center: (f64, f64), radius: f64 },
    Annulus {
        center: (f64, f64),
        inner: f64,
        outer: f64,
    },
}

impl Region {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        match *self {
            Region::Disk { center, radius } => {
                (x - center.0).hypot(z - center.1) <= radius
            }
            Region::Annulus {
                center,
                inner,
                outer,
            } => {
                let r = (x - center.0).hypot(z - center.1);
                r >= inner && r <= outer
            }
        }
    }

    /// Values of plane `iy` of `img` inside the region.
    pub fn samples(&self, img: &Image, iy: usize) -> Vec<f64> {
        let (xs, zs) = (img.grid.xs(), img.grid.zs());
        let mut out = Vec::new();
        for (ix, &x) in xs.iter().enumerate() {
            for (iz, &z) in zs.iter().enumerate() {
                if self.contains(x, z) {
                    out.push(img.get(iy, ix, iz));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiPair {
    pub inside: Region,
    pub outside: Region,
}

impl RoiPair {
    /// Inside disk at 0.8 r, background annulus 1.25 r to 1.75 r.
    pub fn for_cyst(center_x: f64, center_z: f64, radius: f64) -> Self {
        let center = (center_x, center_z);
        Self {
            inside: Region::Disk {
                center,
                radius: 0.8 * radius,
            },
            outside: Region::Annulus {
                center,
                inner: 1.25 * radius,
                outer: 1.75 * radius,
            },
        }
    }
}

/// `1 - sum_b min(p_in[b], p_out[b])` over shared bins spanning both sample
/// sets.
pub fn gcnr_samples(inside: &[f64], outside: &[f64], n_bins: usize) -> Result<f64> {
    if inside.is_empty() || outside.is_empty() {
        return Err(domain("gCNR needs nonempty inside and outside samples"));
    }
    if n_bins == 0 {
        return Err(domain("gCNR needs at least one bin"));
    }
    let (lo, hi) = inside
        .iter()
        .chain(outside)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(domain("gCNR samples must be finite"));
    }
    if hi == lo {
        return Ok(0.0);
    }
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; n_bins];
        let scale = n_bins as f64 / (hi - lo);
        for &v in xs {
            let b = (((v - lo) * scale) as usize).min(n_bins - 1);
            h[b] += 1.0;
        }
        let total = xs.len() as f64;
        h.iter_mut().for_each(|v| *v /= total);
        h
    };
    let (hi_in, hi_out) = (hist(inside), hist(outside));
    let overlap: f64 = hi_in.iter().zip(&hi_out).map(|(a, b)| a.min(*b)).sum();
    Ok((1.0 - overlap).clamp(0.0, 1.0))
}

/// gCNR of plane `iy` of an envelope image over `roi`.
pub fn gcnr(envelope: &Image, iy: usize, roi: &RoiPair, n_bins: usize) -> Result<f64> {
    let inside = roi.inside.samples(envelope, iy);
    let outside = roi.outside.samples(envelope, iy);
    if inside.len() < MIN_ROI_PIXELS || outside.len() < MIN_ROI_PIXELS {
        log::warn!(
            "gCNR ROI has few pixels (inside {}, outside {})",
            inside.len(),
            outside.len()
        );
    }
    gcnr_samples(&inside, &outside, n_bins)
}

/// Why a width measurement could not be made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MeasureError {
    #[error("profile is empty")]
    Empty,
    #[error("peak lies on the profile boundary")]
    PeakAtBoundary,
    #[error("profile never falls to half maximum")]
    NoCrossing,
    #[error("no peak within the search radius")]
    NoPeak,
}

/// Width between the half-maximum crossings nearest the global peak, each
/// placed by linear interpolation.
pub fn fwhm(profile: &[f64], spacing_m: f64) -> std::result::Result<f64, MeasureError> {
    if profile.is_empty() {
        return Err(MeasureError::Empty);
    }
    let (peak_at, peak) = profile
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    if peak_at == 0 || peak_at == profile.len() - 1 {
        return Err(MeasureError::PeakAtBoundary);
    }
    let half = peak / 2.0;
    let mut k = peak_at;
    while k > 0 && profile[k - 1] > half {
        k -= 1;
    }
    if k == 0 {
        return Err(MeasureError::NoCrossing);
    }
    let (a, b) = (profile[k - 1], profile[k]);
    let left = (k - 1) as f64 + (half - a) / (b - a);
    let mut k = peak_at;
    while k + 1 < profile.len() && profile[k + 1] > half {
        k += 1;
    }
    if k + 1 == profile.len() {
        return Err(MeasureError::NoCrossing);
    }
    let (a, b) = (profile[k], profile[k + 1]);
    let right = k as f64 + (a - half) / (a - b);
    Ok((right - left) * spacing_m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireWidth {
    pub lateral_m: std::result::Result<f64, MeasureError>,
    pub axial_m: std::result::Result<f64, MeasureError>,
    pub peak_x: f64,
    pub peak_z: f64,
    pub peak: f64,
}

/// Locates the brightest pixel within `search_radius` of `expected` (x, z)
/// in plane `iy` and measures lateral and axial FWHM through it.
pub fn wire_fwhm(
    envelope: &Image,
    iy: usize,
    expected: (f64, f64),
    search_radius: f64,
) -> std::result::Result<WireWidth, MeasureError> {
    let g = &envelope.grid;
    let (xs, zs) = (g.xs(), g.zs());
    let mut best: Option<(usize, usize, f64)> = None;
    for (ix, &x) in xs.iter().enumerate() {
        for (iz, &z) in zs.iter().enumerate() {
            if (x - expected.0).hypot(z - expected.1) <= search_radius {
                let v = envelope.get(iy, ix, iz);
                if best.map_or(true, |b| v > b.2) {
                    best = Some((ix, iz, v));
                }
            }
        }
    }
    let (ix, iz, peak) = best.ok_or(MeasureError::NoPeak)?;
    if !(peak > 0.0) {
        return Err(MeasureError::NoPeak);
    }
    let lateral: Vec<f64> = (0..g.nx).map(|k| envelope.get(iy, k, iz)).collect();
    let axial = envelope.column(iy, ix);
    Ok(WireWidth {
        lateral_m: fwhm_around(&lateral, ix, g.dx()),
        axial_m: fwhm_around(axial, iz, g.dz()),
        peak_x: xs[ix],
        peak_z: zs[iz],
        peak,
    })
}

/// FWHM of the lobe containing `at`, ignoring brighter targets elsewhere on
/// the profile.
fn fwhm_around(profile: &[f64], at: usize, spacing: f64) -> std::result::Result<f64, MeasureError> {
    let half = profile[at] / 2.0;
    let mut lo = at;
    while lo > 0 && profile[lo] > half {
        lo -= 1;
    }
    let mut hi = at;
    while hi + 1 < profile.len() && profile[hi] > half {
        hi += 1;
    }
    fwhm(&profile[lo..=hi], spacing)
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub method: String,
    pub target_id: String,
    pub depth_mm: f64,
    pub gcnr: Option<f64>,
    pub fwhm_lat_um: Option<f64>,
    pub fwhm_ax_um: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wr.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.rows.is_empty() {
            wr.write_record([
                "method",
                "target_id",
                "depth_mm",
                "gcnr",
                "fwhm_lat_um",
                "fwhm_ax_um",
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::ImageGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn gcnr_identical_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = uniform(&mut rng, 0.0, 1.0, 20_000);
        let b = uniform(&mut rng, 0.0, 1.0, 20_000);
        assert!(gcnr_samples(&a, &b, 100).unwrap() <= 0.05);
    }

    #[test]
    fn gcnr_disjoint() {
        assert_eq!(gcnr_samples(&[0.0, 0.1, 0.2], &[0.8, 0.9, 1.0], 100).unwrap(), 1.0);
    }

    #[test]
    fn gcnr_half_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = uniform(&mut rng, 0.0, 1.0, 100_000);
        let b = uniform(&mut rng, 0.5, 1.5, 100_000);
        let v = gcnr_samples(&a, &b, 100).unwrap();
        assert!((v - 0.5).abs() <= 0.02, "{v}");
    }

    #[test]
    fn gcnr_empty_roi() {
        assert!(gcnr_samples(&[], &[1.0], 10).is_err());
    }

    #[test]
    fn gaussian_fwhm() {
        let sigma = 10.0;
        let p: Vec<f64> = (0..201).map(|k| (-((k as f64 - 100.0) / sigma).powi(2) / 2.0).exp()).collect();
        let w = fwhm(&p, 0.1e-3).unwrap();
        assert!((w - 2.3548e-3).abs() < 0.01 * 2.3548e-3);
    }

    #[test]
    fn triangle_and_rect_fwhm() {
        let tri: Vec<f64> = (0..21).map(|k| (1.0 - (k as f64 - 10.0).abs() / 6.0).max(0.0)).collect();
        assert!((fwhm(&tri, 1.0).unwrap() - 6.0).abs() < 1e-12);
        let rect: Vec<f64> = (0..20).map(|k| if (5..12).contains(&k) { 1.0 } else { 0.0 }).collect();
        // 7 samples high; crossings interpolate half a sample outside.
        assert!((fwhm(&rect, 1.0).unwrap() - 7.0).abs() <= 1.0);
    }

    #[test]
    fn delta_fwhm_is_one_sample() {
        assert_eq!(fwhm(&[0.0, 0.0, 1.0, 0.0, 0.0], 0.5).unwrap(), 0.5);
    }

    #[test]
    fn fwhm_failures() {
        assert_eq!(fwhm(&[1.0, 0.5, 0.1], 1.0), Err(MeasureError::PeakAtBoundary));
        assert_eq!(fwhm(&[0.9, 1.0, 0.1], 1.0), Err(MeasureError::NoCrossing));
        assert_eq!(fwhm(&[], 1.0), Err(MeasureError::Empty));
    }

    #[test]
    fn wire_fwhm_on_gaussian_spot() {
        let grid = ImageGrid::plane(-2e-3, 2e-3, 81, 4e-3, 8e-3, 81);
        let (xs, zs) = (grid.xs(), grid.zs());
        let mut img = Image::zeros(grid);
        let (sx, sz) = (0.2e-3, 0.1e-3);
        for (ix, &x) in xs.iter().enumerate() {
            for (iz, &z) in zs.iter().enumerate() {
                let k = img.index(0, ix, iz);
                img.data[k] = (-(x - 0.5e-3).powi(2) / (2.0 * sx * sx) - (z - 6e-3).powi(2) / (2.0 * sz * sz)).exp();
            }
        }
        let w = wire_fwhm(&img, 0, (0.4e-3, 6.1e-3), 1e-3).unwrap();
        assert!((w.peak_x - 0.5e-3).abs() < 1e-9);
        assert!((w.lateral_m.unwrap() - 2.3548 * sx).abs() < 0.02 * 2.3548 * sx);
        assert!((w.axial_m.unwrap() - 2.3548 * sz).abs() < 0.03 * 2.3548 * sz);
        assert_eq!(wire_fwhm(&img, 0, (10e-3, 6e-3), 1e-3).unwrap_err(), MeasureError::NoPeak);
    }

    #[test]
    fn csv_columns() {
        let rep = MetricReport {
            rows: vec![MetricRow {
                method: "FORCES".into(),
                target_id: "wire0".into(),
                depth_mm: 12.0,
                gcnr: None,
                fwhm_lat_um: Some(350.5),
                fwhm_ax_um: Some(300.0),
            }],
        };
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "method,target_id,depth_mm,gcnr,fwhm_lat_um,fwhm_ax_um\nFORCES,wire0,12.0,,350.5,300.0\n"
        );
    }

    proptest! {
        #[test]
        fn gcnr_symmetric_and_monotone_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = uniform(&mut rng, 0.0, 1.0, 3000);
            let b = uniform(&mut rng, 0.3, 2.0, 3000);
            let g = gcnr_samples(&a, &b, 100).unwrap();
            prop_assert!((g - gcnr_samples(&b, &a, 100).unwrap()).abs() < 1e-12);
            let f = |v: &f64| (3.0 * v).exp();
            let ta: Vec<f64> = a.iter().map(f).collect();
            let tb: Vec<f64> = b.iter().map(f).collect();
            // Nonlinear rescaling changes the binning; agreement holds to the
            // histogram resolution of the sparser distribution.
            let gt = gcnr_samples(&ta, &tb, 100).unwrap();
            prop_assert!((g - gt).abs() <= 0.1, "{} vs {}", g, gt);
        }

        #[test]
        fn fwhm_scales_with_spacing(sigma in 2.0f64..20.0, dx in 1e-5f64..1e-3) {
            let p: Vec<f64> = (0..301).map(|k| (-((k as f64 - 150.0) / sigma).powi(2) / 2.0).exp()).collect();
            let a = fwhm(&p, dx).unwrap();
            let b = fwhm(&p, 2.0 * dx).unwrap();
            prop_assert!((b - 2.0 * a).abs() <= 1e-12 * b);
        }
    }
}
