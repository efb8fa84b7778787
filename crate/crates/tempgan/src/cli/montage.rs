//! Montage export: center slices of a volume sequence as one binary PGM.
//!
//! Grid rows are the sagittal, coronal, and axial center slices (top to
//! bottom); columns are time steps. Intensities map linearly from [-1, 1]
//! to [0, 255], rounding half away from zero.

use std::io::Write;
use std::path::Path;

use crate::volume_io::{Volume, VolumeError};

/// Pixel value for a normalized intensity.
fn to_pixel(v: f32) -> u8 {
    let scaled = (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0;
    // f32::round rounds half away from zero.
    scaled.round() as u8
}

/// Write the montage PGM. For cubic volumes of side d and t steps the
/// image is (t*d) x (3*d).
pub fn export_montage(volumes: &[Volume], out: &Path) -> Result<(), VolumeError> {
    if volumes.is_empty() {
        return Err(VolumeError::InvalidDims(0, 0, 0));
    }
    let dims = volumes[0].dims();
    for v in volumes {
        if v.dims() != dims {
            return Err(VolumeError::MixedDims {
                patient: "montage".into(),
                a: dims,
                b: v.dims(),
            });
        }
    }
    let t = volumes.len();

    // (rows, cols, sampler) per grid row.
    type Sampler<'a> = Box<dyn Fn(&Volume, usize, usize) -> f32 + 'a>;
    let cx = dims.x / 2;
    let cy = dims.y / 2;
    let cz = dims.z / 2;
    let grid_rows: [(usize, usize, Sampler); 3] = [
        // Sagittal: fixed x, rows z, cols y.
        (dims.z, dims.y, Box::new(move |v, r, c| v.get(cx, c, r))),
        // Coronal: fixed y, rows z, cols x.
        (dims.z, dims.x, Box::new(move |v, r, c| v.get(c, cy, r))),
        // Axial: fixed z, rows y, cols x.
        (dims.y, dims.x, Box::new(move |v, r, c| v.get(c, r, cz))),
    ];

    let cell_cols = grid_rows.iter().map(|(_, c, _)| *c).max().unwrap();
    let width = t * cell_cols;
    let height: usize = grid_rows.iter().map(|(r, _, _)| *r).sum();

    let mut pixels = vec![0u8; width * height];
    let mut row_offset = 0usize;
    for (rows, cols, sampler) in &grid_rows {
        for (step, v) in volumes.iter().enumerate() {
            for r in 0..*rows {
                for c in 0..*cols {
                    let px = step * cell_cols + c;
                    let py = row_offset + r;
                    pixels[py * width + px] = to_pixel(sampler(v, r, c));
                }
            }
        }
        row_offset += rows;
    }

    let file = std::fs::File::create(out).map_err(|e| crate::volume_io::io_err(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = format!("P5\n{width} {height}\n255\n");
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&pixels))
        .and_then(|_| w.flush())
        .map_err(|e| crate::volume_io::io_err(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Dims;

    #[test]
    fn pixel_mapping_endpoints_and_midpoint() {
        assert_eq!(to_pixel(-1.0), 0);
        assert_eq!(to_pixel(1.0), 255);
        // (0 + 1)/2 * 255 = 127.5, rounded half away from zero.
        assert_eq!(to_pixel(0.0), 128);
    }

    #[test]
    fn montage_dimensions_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let d = 8;
        let vols: Vec<Volume> = (0..4)
            .map(|i| Volume::constant(Dims::cubic(d), -1.0 + 0.4 * i as f32).unwrap())
            .collect();
        export_montage(&vols, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = format!("P5\n{} {}\n255\n", 4 * d, 3 * d);
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + 4 * d * 3 * d);
        // First cell is the constant -1 volume: pixel 0.
        assert_eq!(bytes[header.len()], 0);
    }

    #[test]
    fn empty_list_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_montage(&[], &dir.path().join("x.pgm")).is_err());
    }
}
