//! `.tvol` binary volume format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   4 bytes   magic "TVOL"
//! offset 4   u32       version (currently 1)
//! offset 8   u32 x 3   dims dx, dy, dz
//! offset 20  f32 x N   voxels, x-fastest then y then z (N = dx*dy*dz)
//! ```
//!
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{io_err, Dims, Volume, VolumeError};

pub const TVOL_MAGIC: [u8; 4] = *b"TVOL";
pub const TVOL_VERSION: u32 = 1;

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> VolumeError {
    VolumeError::Format {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

/// Write `volume` to `path` in `.tvol` format.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<(), VolumeError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let dims = volume.dims();
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    emit(&TVOL_MAGIC)?;
    emit(&TVOL_VERSION.to_le_bytes())?;
    emit(&(dims.x as u32).to_le_bytes())?;
    emit(&(dims.y as u32).to_le_bytes())?;
    emit(&(dims.z as u32).to_le_bytes())?;
    for &v in volume.voxels() {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a `.tvol` file. Reports malformed content with the byte offset at
/// which parsing failed.
pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;

    let mut read_exact = |buf: &mut [u8], offset: &mut u64, what: &str| {
        r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                format_err(path, *offset, format!("truncated file while reading {what}"))
            } else {
                io_err(path, e)
            }
        })?;
        *offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic, &mut offset, "magic")?;
    if magic != TVOL_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:02x?}")));
    }

    let mut word = [0u8; 4];
    read_exact(&mut word, &mut offset, "version")?;
    let version = u32::from_le_bytes(word);
    if version != TVOL_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported version {version} (expected {TVOL_VERSION})"),
        ));
    }

    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        read_exact(&mut word, &mut offset, "dims")?;
        *d = u32::from_le_bytes(word) as usize;
        if *d == 0 {
            return Err(format_err(path, 8 + 4 * i as u64, "zero dim"));
        }
    }
    let dims = Dims::new(dims[0], dims[1], dims[2]);

    let mut voxels = Vec::with_capacity(dims.count());
    for _ in 0..dims.count() {
        read_exact(&mut word, &mut offset, "voxels")?;
        voxels.push(f32::from_le_bytes(word));
    }

    Volume::new(dims, voxels)
}
