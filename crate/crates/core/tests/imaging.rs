//! End-to-end imaging properties of the three reconstruction methods on
//! point targets.

use tobe_core::beamform::{beamform, das_forces, das_tpw, BeamformParams, Image, ImageGrid};
use tobe_core::phantoms::{wire_phantom, Phantom, Scatterer};
use tobe_core::postproc::envelope;
use tobe_core::sequences::{
    default_focus_depth, default_vls_params, forces_decode, forces_polarity_correct, hadamard,
    make_forces_sequence, make_tpw_sequence, make_vls_sequence, uniform_angles, Sequence,
    SequenceKind,
};
use tobe_core::simulator::{simulate, Pulse, SimOptions, Window};
use tobe_core::{ArrayConfig, ChannelData};

fn array(n: usize) -> ArrayConfig {
    ArrayConfig::lambda_pitch(n, 5e6, 0.6, 20e6).unwrap()
}

fn sequences(cfg: &ArrayConfig, focus: f64) -> Vec<Sequence> {
    let (nv, zv, rows) = default_vls_params(cfg);
    vec![
        make_forces_sequence(cfg, focus).unwrap(),
        make_tpw_sequence(cfg, &uniform_angles(cfg.n, 15.0)).unwrap(),
        make_vls_sequence(cfg, nv, zv, rows).unwrap(),
    ]
}

/// Channel data ready for the method's beamformer.
fn acquire(cfg: &ArrayConfig, seq: &Sequence, ph: &Phantom) -> ChannelData {
    acquire_with(cfg, seq, ph, Window::FromTrigger)
}

fn acquire_with(cfg: &ArrayConfig, seq: &Sequence, ph: &Phantom, window: Window) -> ChannelData {
    let raw = simulate(cfg, seq, ph, &Pulse::from_config(cfg), &SimOptions { window }).unwrap();
    if seq.kind() == SequenceKind::Forces {
        let corrected = forces_polarity_correct(&raw, seq).unwrap();
        forces_decode(&corrected, &hadamard(cfg.n).unwrap()).unwrap()
    } else {
        raw
    }
}

fn env_image(cfg: &ArrayConfig, seq: &Sequence, ph: &Phantom, grid: &ImageGrid) -> Image {
    let data = acquire(cfg, seq, ph);
    envelope(&beamform(&data, cfg, seq, grid, &BeamformParams::default()).unwrap()).unwrap()
}

#[test]
fn point_targets_focus_within_half_wavelength() {
    let cfg = array(16);
    let lam = cfg.wavelength();
    let f = default_focus_depth(&cfg);
    let (x0, z0) = (0.4e-3, f);
    let ph = wire_phantom(&[(x0, z0)], 1.0).unwrap();
    let grid = ImageGrid::plane(-1.5e-3, 1.5e-3, 61, f - 1.5e-3, f + 1.5e-3, 121);
    for seq in sequences(&cfg, f) {
        let env = env_image(&cfg, &seq, &ph, &grid);
        let (_, ix, iz) = env.argmax();
        let (x, z) = (grid.xs()[ix], grid.zs()[iz]);
        assert!((x - x0).abs() <= lam / 2.0, "{:?}: x {x}", seq.kind());
        assert!((z - z0).abs() <= lam / 2.0, "{:?}: z {z}", seq.kind());
    }
}

#[test]
fn single_plane_wave_and_collinear_virtual_source_range_correctly() {
    let cfg = array(16);
    let lam = cfg.wavelength();
    let z0 = 5e-3;
    let grid = ImageGrid::plane(-1e-3, 1e-3, 41, 3e-3, 7e-3, 161);
    let ph = wire_phantom(&[(0.0, z0)], 1.0).unwrap();
    let tpw = make_tpw_sequence(&cfg, &[0.0]).unwrap();
    let env = env_image(&cfg, &tpw, &ph, &grid);
    assert!((grid.zs()[env.argmax().2] - z0).abs() <= lam / 2.0);

    // One virtual source on axis; the scatterer sits directly beneath it.
    let vls = make_vls_sequence(&cfg, 1, -2e-3, 8).unwrap();
    let env = env_image(&cfg, &vls, &ph, &grid);
    assert!((grid.zs()[env.argmax().2] - z0).abs() <= lam / 2.0);
}

#[test]
fn beamforming_is_linear() {
    let cfg = array(8);
    let f = default_focus_depth(&cfg);
    let grid = ImageGrid::plane(-1e-3, 1e-3, 21, f - 1e-3, f + 1e-3, 41);
    let a = wire_phantom(&[(0.2e-3, f)], 1.0).unwrap();
    let b = wire_phantom(&[(-0.3e-3, f + 0.4e-3)], 1.0).unwrap();
    let params = BeamformParams::default();
    for seq in sequences(&cfg, f) {
        // A shared record window keeps the two acquisitions aligned.
        let window = Window::Fixed { t0_s: 0.0, n_samples: 256 };
        let (da, db) = (acquire_with(&cfg, &seq, &a, window), acquire_with(&cfg, &seq, &b, window));
        let mut mix = da.clone();
        for (m, (x, y)) in mix.data.iter_mut().zip(da.data.iter().zip(&db.data)) {
            *m = 2.0 * x - 0.5 * y;
        }
        let ia = beamform(&da, &cfg, &seq, &grid, &params).unwrap();
        let ib = beamform(&db, &cfg, &seq, &grid, &params).unwrap();
        let im = beamform(&mix, &cfg, &seq, &grid, &params).unwrap();
        let scale = ia.max_abs().max(ib.max_abs());
        for k in 0..im.data.len() {
            let expect = 2.0 * ia.data[k] - 0.5 * ib.data[k];
            assert!((im.data[k] - expect).abs() <= 1e-12 * scale, "{:?}", seq.kind());
        }
    }
}

#[test]
fn one_pixel_shift_moves_the_peak_one_pixel() {
    let cfg = array(16);
    let lam = cfg.wavelength();
    let f = default_focus_depth(&cfg);
    let grid = ImageGrid::plane(-1e-3, 1e-3, 33, f - 0.8e-3, f + 0.8e-3, 65);
    let dx = grid.dx();
    for seq in sequences(&cfg, f) {
        let peak_x = |x: f64| {
            let env = env_image(&cfg, &seq, &wire_phantom(&[(x, f)], 1.0).unwrap(), &grid);
            grid.xs()[env.argmax().1]
        };
        let shift = peak_x(dx) - peak_x(0.0);
        assert!((shift - dx).abs() <= lam / 4.0, "{:?}: shift {shift}", seq.kind());
    }
}

#[test]
fn symmetric_compounding_gives_elevation_symmetric_volume() {
    let cfg = array(8);
    let z0 = 4e-3;
    let seq = make_tpw_sequence(&cfg, &uniform_angles(8, 15.0)).unwrap();
    let ph = wire_phantom(&[(0.0, z0)], 1.0).unwrap();
    let mut grid = ImageGrid::plane(-0.6e-3, 0.6e-3, 9, 3e-3, 5e-3, 41);
    grid.y_range = Some((-1e-3, 1e-3, 9));
    let data = acquire(&cfg, &seq, &ph);
    let vol = das_tpw(&data, &cfg, &seq, &grid, &BeamformParams::default()).unwrap();
    let peak = vol.max_abs();
    for iy in 0..9 {
        for ix in 0..9 {
            for iz in 0..41 {
                let d = vol.get(iy, ix, iz) - vol.get(8 - iy, ix, iz);
                assert!(d.abs() <= 1e-9 * peak);
            }
        }
    }
}

/// Fresnel knife-edge attenuation (Lee's approximation) in dB for Fresnel
/// parameter `v`, valid for `v > -0.7`.
fn knife_edge_db(v: f64) -> f64 {
    -(6.9 + 20.0 * (((v - 0.1).powi(2) + 1.0).sqrt() + v - 0.1).log10())
}

#[test]
fn aperture_shadow_follows_knife_edge_diffraction() {
    let cfg = array(32);
    let lam = cfg.wavelength();
    let half = cfg.aperture_width() / 2.0;
    let pulse = Pulse::from_config(&cfg);
    let seq = make_tpw_sequence(&cfg, &[0.0]).unwrap();
    for z in [12e-3, 16e-3] {
        let energy = |x: f64| {
            let ph = wire_phantom(&[(x, z)], 1.0).unwrap();
            let d = simulate(&cfg, &seq, &ph, &pulse, &SimOptions::default()).unwrap();
            d.data.iter().map(|v| v * v).sum::<f64>()
        };
        let on = energy(0.0);
        for k in [0.0, 2.0, 4.0] {
            let off = k * lam;
            let v = off * (2.0 / (lam * z)).sqrt();
            let sim = 10.0 * (energy(half + off) / on).log10();
            assert!((sim - knife_edge_db(v)).abs() <= 1.5, "z {z} off {k}λ: {sim} dB");
        }
    }
}

#[test]
fn conventional_image_suppresses_off_shadow_targets() {
    let cfg = array(32);
    let lam = cfg.wavelength();
    let z = 12e-3;
    let x_off = cfg.aperture_width() / 2.0 + 2.0 * lam;
    let seq = make_tpw_sequence(&cfg, &uniform_angles(32, 15.0)).unwrap();
    let ph = wire_phantom(&[(0.0, z), (x_off, z)], 1.0).unwrap();
    let grid = ImageGrid::plane(-lam, x_off + lam, 81, z - lam, z + lam, 41);
    let env = env_image(&cfg, &seq, &ph, &grid);
    let xs = grid.xs();
    let peak = |lo: f64, hi: f64| {
        let mut m = 0.0f64;
        for ix in (0..grid.nx).filter(|&ix| xs[ix] >= lo && xs[ix] <= hi) {
            m = m.max(env.column(0, ix).iter().cloned().fold(0.0, f64::max));
        }
        m
    };
    let ratio = 20.0 * (peak(x_off - lam / 2.0, x_off + lam) / peak(-lam, lam / 2.0)).log10();
    assert!(ratio <= -15.0, "{ratio} dB");
}

#[test]
fn forces_beamformer_rejects_other_planes() {
    let cfg = array(8);
    let seq = make_forces_sequence(&cfg, 4e-3).unwrap();
    let ph = Phantom::new(vec![Scatterer::new(0.0, 0.0, 4e-3, 1.0)]);
    let data = acquire(&cfg, &seq, &ph);
    let params = BeamformParams::default();
    let grid = ImageGrid::plane(-1e-3, 1e-3, 5, 3e-3, 5e-3, 8);
    assert!(das_forces(&data, &cfg, &seq, &grid.clone().at_y(0.5e-3), &params).is_err());
    let mut vol = grid.clone();
    vol.y_range = Some((-1e-3, 1e-3, 3));
    assert!(das_forces(&data, &cfg, &seq, &vol, &params).is_err());
    assert!(das_forces(&data, &cfg, &seq, &grid, &params).is_ok());
}
