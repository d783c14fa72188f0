//! Artifact formats for images and volumes: raw little-endian `f32` grids
//! with a `key=value` text sidecar, and 8-bit binary PGM for display.

use std::fs;
use std::path::{Path, PathBuf};

use crate::beamform::{Image, ImageGrid};
use crate::error::{domain, Error, Result};

/// Raw samples in `[y][x][z]` order, as little-endian `f32`.
pub fn raw_grid_bytes(img: &Image) -> Vec<u8> {
    img.data
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

/// Sidecar text describing a raw grid. `z` is the fastest axis.
pub fn sidecar_text(grid: &ImageGrid) -> String {
    let (y0, y1, dy) = match grid.y_range {
        Some((a, b, _)) => (a, b, grid.dy()),
        None => (grid.y_plane, grid.y_plane, 0.0),
    };
    // Axis endpoints are stored verbatim so a reloaded grid is bit-identical.
    format!(
        "format=f32le\norder=yxz\nnx={}\nny={}\nnz={}\nspacing_x={:e}\nspacing_y={:e}\nspacing_z={:e}\norigin_x={:e}\norigin_y={:e}\norigin_z={:e}\nend_x={:e}\nend_y={:e}\nend_z={:e}\n",
        grid.nx,
        grid.ny(),
        grid.nz,
        grid.dx(),
        dy,
        grid.dz(),
        grid.x_min,
        y0,
        grid.z_min,
        grid.x_max,
        y1,
        grid.z_max
    )
}

/// Sidecar path for a raw grid: `image.raw` → `image.raw.txt`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn write_raw_grid(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, raw_grid_bytes(img))?;
    fs::write(sidecar_path(path), sidecar_text(&img.grid))?;
    Ok(())
}

fn parse_sidecar(text: &str) -> Result<ImageGrid> {
    let mut kv = std::collections::BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("sidecar line {}: expected key=value", k + 1)))?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| {
        kv.get(key)
            .ok_or_else(|| Error::Format(format!("sidecar is missing '{key}'")))
    };
    let count = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("sidecar '{key}' is not a count")))
    };
    let real = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("sidecar '{key}' is not a number")))
    };
    if get("format")? != "f32le" || get("order")? != "yxz" {
        return Err(Error::Format("unsupported raw grid format".into()));
    }
    let (nx, ny, nz) = (count("nx")?, count("ny")?, count("nz")?);
    let (x0, y0, z0) = (real("origin_x")?, real("origin_y")?, real("origin_z")?);
    let (x1, y1, z1) = (real("end_x")?, real("end_y")?, real("end_z")?);
    let mut grid = ImageGrid::plane(x0, x1, nx, z0, z1, nz).at_y(y0);
    if ny > 1 {
        grid.y_plane = 0.0;
        grid.y_range = Some((y0, y1, ny));
    }
    Ok(grid)
}

pub fn read_raw_grid(path: &Path) -> Result<Image> {
    let grid = parse_sidecar(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * grid.len() {
        return Err(Error::Format(format!(
            "raw grid holds {} bytes, sidecar implies {}",
            bytes.len(),
            4 * grid.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Image { grid, data })
}

/// Binary PGM of one plane of a dB image, depth down the rows and azimuth
/// across. `[-dr, 0]` maps linearly onto `[0, 255]`.
pub fn pgm_bytes(db: &Image, iy: usize, dynamic_range_db: f64) -> Result<Vec<u8>> {
    if !(dynamic_range_db > 0.0) {
        return Err(domain("dynamic range must be positive"));
    }
    if iy >= db.grid.ny() {
        return Err(domain(format!("plane {iy} out of range")));
    }
    let (nx, nz) = (db.grid.nx, db.grid.nz);
    let mut out = format!("P5\n{nx} {nz}\n255\n").into_bytes();
    out.reserve(nx * nz);
    for iz in 0..nz {
        for ix in 0..nx {
            out.push(gray(db.get(iy, ix, iz), dynamic_range_db));
        }
    }
    Ok(out)
}

fn gray(db: f64, dr: f64) -> u8 {
    let v = ((db + dr) / dr).clamp(0.0, 1.0) * 255.0;
    v.round() as u8
}

/// Concatenates planes left to right with a `gap`-pixel black separator.
pub fn pgm_strip(images: &[&Image], dynamic_range_db: f64, gap: usize) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| domain("no images for strip"))?;
    let nz = first.grid.nz;
    if images.iter().any(|im| im.grid.nz != nz) {
        return Err(domain("strip images must share depth sampling"));
    }
    let width: usize = images.iter().map(|im| im.grid.nx).sum::<usize>() + gap * (images.len() - 1);
    let mut out = format!("P5\n{width} {nz}\n255\n").into_bytes();
    for iz in 0..nz {
        for (k, im) in images.iter().enumerate() {
            if k > 0 {
                out.extend(std::iter::repeat(0).take(gap));
            }
            for ix in 0..im.grid.nx {
                out.push(gray(im.get(0, ix, iz), dynamic_range_db));
            }
        }
    }
    Ok(out)
}

/// Parses a binary PGM into `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a binary 8-bit PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?;
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let grid = ImageGrid::plane(-1e-3, 1e-3, 3, 5e-3, 6e-3, 4);
        let mut img = Image::zeros(grid);
        for (k, v) in img.data.iter_mut().enumerate() {
            *v = -(k as f64) * 5.0;
        }
        img
    }

    #[test]
    fn raw_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.raw");
        let mut img = ramp();
        img.grid.y_range = None;
        img.grid.y_plane = 0.25e-3;
        write_raw_grid(&path, &img).unwrap();
        let text = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(text.contains("nx=3\nny=1\nnz=4\n"));
        let back = read_raw_grid(&path).unwrap();
        assert_eq!(back.data, img.data);
        assert_eq!((back.grid.nx, back.grid.nz), (3, 4));
        assert_eq!(back.grid, img.grid);
    }

    #[test]
    fn truncated_raw_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.raw");
        write_raw_grid(&path, &ramp()).unwrap();
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_raw_grid(&path), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_mapping() {
        let img = ramp();
        let bytes = pgm_bytes(&img, 0, 60.0).unwrap();
        let (w, h, px) = read_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 4));
        // First pixel is 0 dB, the column ramps down by 5 dB per depth step.
        assert_eq!(px[0], 255);
        assert_eq!(px[w], gray(-5.0, 60.0));
        assert_eq!(gray(-60.0, 60.0), 0);
        assert_eq!(gray(-90.0, 60.0), 0);
        assert_eq!(gray(-30.0, 60.0), 128);
    }

    #[test]
    fn strip_width() {
        let img = ramp();
        let bytes = pgm_strip(&[&img, &img, &img], 60.0, 2).unwrap();
        let (w, h, _) = read_pgm(&bytes).unwrap();
        assert_eq!((w, h), (13, 4));
    }
}
