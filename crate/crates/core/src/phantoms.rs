//! Point-scatterer phantoms: wire targets, anechoic cysts in speckle, and the
//! seeded speckle generator behind them.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Speckle density used by presets, in scatterers per cubic wavelength.
pub const DEFAULT_SPECKLE_DENSITY: f64 = 15.0;

/// Below this many scatterers per cubic wavelength speckle is not fully
/// developed.
pub const MIN_SPECKLE_DENSITY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub amplitude: f64,
}

impl Scatterer {
    pub fn new(x: f64, y: f64, z: f64, amplitude: f64) -> Self {
        Self { x, y, z, amplitude }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CystShape {
    Sphere,
    /// Infinite cylinder along the elevation (y) axis.
    #[default]
    Cylinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RoiKind {
    Wire { position: [f64; 3] },
    Cyst {
        center: [f64; 3],
        radius: f64,
        shape: CystShape,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub name: String,
    #[serde(flatten)]
    pub kind: RoiKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Phantom {
    pub scatterers: Vec<Scatterer>,
    pub rois: Vec<Roi>,
    pub rng_seed: Option<u64>,
}

impl Phantom {
    pub fn new(scatterers: Vec<Scatterer>) -> Self {
        Self {
            scatterers,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.scatterers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scatterers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.scatterers.iter().enumerate() {
            if !(s.z > 0.0) {
                return Err(domain(format!("scatterer {k} has depth {} <= 0", s.z)));
            }
            if !(s.x.is_finite() && s.y.is_finite() && s.z.is_finite() && s.amplitude.is_finite())
            {
                return Err(domain(format!("scatterer {k} is not finite")));
            }
        }
        Ok(())
    }

    /// Union of two phantoms (scatterers of `self` first).
    pub fn union(&self, other: &Phantom) -> Phantom {
        let mut out = self.clone();
        out.scatterers.extend_from_slice(&other.scatterers);
        out.rois.extend(other.rois.iter().cloned());
        out
    }

    /// Mirror across the `x = y` plane.
    pub fn transposed(&self) -> Phantom {
        let swap = |p: [f64; 3]| [p[1], p[0], p[2]];
        Phantom {
            scatterers: self
                .scatterers
                .iter()
                .map(|s| Scatterer::new(s.y, s.x, s.z, s.amplitude))
                .collect(),
            rois: self
                .rois
                .iter()
                .map(|r| Roi {
                    name: r.name.clone(),
                    kind: match r.kind {
                        RoiKind::Wire { position } => RoiKind::Wire {
                            position: swap(position),
                        },
                        RoiKind::Cyst {
                            center,
                            radius,
                            shape,
                        } => RoiKind::Cyst {
                            center: swap(center),
                            radius,
                            shape,
                        },
                    },
                })
                .collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Scatterer list as CSV with header `x,y,z,amplitude`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for s in &self.scatterers {
            wr.serialize(s).map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Phantom> {
        let mut rd = csv::Reader::from_reader(r);
        let scatterers = rd
            .deserialize()
            .collect::<std::result::Result<Vec<Scatterer>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let ph = Phantom::new(scatterers);
        ph.validate()?;
        Ok(ph)
    }
}

/// Point targets in the `y = 0` plane, one ROI per wire.
pub fn wire_phantom(positions: &[(f64, f64)], amplitude: f64) -> Result<Phantom> {
    let mut ph = Phantom::default();
    for (k, &(x, z)) in positions.iter().enumerate() {
        ph.scatterers.push(Scatterer::new(x, 0.0, z, amplitude));
        ph.rois.push(Roi {
            name: format!("wire{k}"),
            kind: RoiKind::Wire {
                position: [x, 0.0, z],
            },
        });
    }
    ph.validate()?;
    Ok(ph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleSpec {
    pub region_min: [f64; 3],
    pub region_max: [f64; 3],
    /// Scatterers per cubic wavelength.
    pub density: f64,
    pub wavelength_m: f64,
    pub rng_seed: u64,
}

impl SpeckleSpec {
    pub fn volume(&self) -> f64 {
        (0..3)
            .map(|a| self.region_max[a] - self.region_min[a])
            .product()
    }

    /// Mean scatterer count `density * volume / lambda^3`.
    pub fn expected_count(&self) -> f64 {
        self.density * self.volume() / self.wavelength_m.powi(3)
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.region_max[a] > self.region_min[a]) {
                return Err(domain(format!("speckle region axis {a} is empty")));
            }
        }
        if !(self.region_min[2] > 0.0) {
            return Err(domain("speckle region must lie at positive depth"));
        }
        if !(self.density > 0.0 && self.wavelength_m > 0.0) {
            return Err(domain("speckle density and wavelength must be positive"));
        }
        Ok(())
    }
}

/// Poisson-distributed count of scatterers, uniform in the region, with
/// standard normal amplitudes. Pure function of the speckle parameters and seed.
pub fn seeded_speckle(spec: &SpeckleSpec) -> Result<Vec<Scatterer>> {
    spec.validate()?;
    if spec.density < MIN_SPECKLE_DENSITY {
        log::warn!(
            "speckle density {} per cubic wavelength is below {MIN_SPECKLE_DENSITY}",
            spec.density
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mean = spec.expected_count();
    let count = Poisson::new(mean)
        .map_err(|e| domain(format!("speckle count: {e}")))?
        .sample(&mut rng) as usize;
    let (lo, hi) = (spec.region_min, spec.region_max);
    Ok((0..count)
        .map(|_| {
            let x = rng.gen_range(lo[0]..hi[0]);
            let y = rng.gen_range(lo[1]..hi[1]);
            let z = rng.gen_range(lo[2]..hi[2]);
            let a: f64 = StandardNormal.sample(&mut rng);
            Scatterer::new(x, y, z, a)
        })
        .collect())
}

/// True when `p` lies strictly within the cyst.
pub fn inside_cyst(p: [f64; 3], center: [f64; 3], radius: f64, shape: CystShape) -> bool {
    let dx = p[0] - center[0];
    let dz = p[2] - center[2];
    let dy = match shape {
        CystShape::Sphere => p[1] - center[1],
        CystShape::Cylinder => 0.0,
    };
    dx * dx + dy * dy + dz * dz < radius * radius
}

/// Speckle with all scatterers inside the cyst removed.
pub fn cyst_phantom(
    center: [f64; 3],
    radius: f64,
    shape: CystShape,
    speckle: &SpeckleSpec,
) -> Result<Phantom> {
    if !(radius >= 0.0) {
        return Err(domain("cyst radius must be non-negative"));
    }
    let axes: &[usize] = match shape {
        CystShape::Sphere => &[0, 1, 2],
        CystShape::Cylinder => &[0, 2],
    };
    for &a in axes {
        if center[a] - radius < speckle.region_min[a] || center[a] + radius > speckle.region_max[a]
        {
            return Err(domain("cyst extends outside the speckle region"));
        }
    }
    if shape == CystShape::Cylinder
        && !(speckle.region_min[1]..=speckle.region_max[1]).contains(&center[1])
    {
        return Err(domain("cyst center outside the speckle region"));
    }
    let scatterers = seeded_speckle(speckle)?
        .into_iter()
        .filter(|s| !inside_cyst([s.x, s.y, s.z], center, radius, shape))
        .collect();
    Ok(Phantom {
        scatterers,
        rois: vec![Roi {
            name: "cyst0".into(),
            kind: RoiKind::Cyst {
                center,
                radius,
                shape,
            },
        }],
        rng_seed: Some(speckle.rng_seed),
    })
}
