//! Pyramid grid file, format `PTG1`.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "PTG1" (4 bytes)
//! version u32 (currently 1)
//! levels  u32
//! per level: resolution u32, depth u32, channels u32
//! per level: resolution^2 * depth * channels * 3 f32 values in index order
//!            [plane][depth layer][channel][row][col], level-major
//! ```
//!
//! Loading validates shapes and rejects non-finite values, so a round trip
//! is bit-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{PyramidTriGrid, TriGrid, PLANES};

use super::atomic_write;

const MAGIC: [u8; 4] = *b"PTG1";
const VERSION: u32 = 1;

pub fn encode_grid(pyr: &PyramidTriGrid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(pyr.levels().len() as u32).to_le_bytes());
    for level in pyr.levels() {
        out.extend_from_slice(&(level.resolution() as u32).to_le_bytes());
        out.extend_from_slice(&(level.depth_layers() as u32).to_le_bytes());
        out.extend_from_slice(&(level.channels() as u32).to_le_bytes());
    }
    for level in pyr.levels() {
        out.reserve(level.values().len() * 4);
        for v in level.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<PyramidTriGrid> {
    let fail = |msg: &str| Error::Format(format!("grid file: {msg}"));
    if bytes.len() < 12 {
        return Err(fail("truncated header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let u32_at =
        |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != VERSION as usize {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let n_levels = u32_at(8);
    if n_levels == 0 || n_levels > 64 {
        return Err(fail(&format!("implausible level count {n_levels}")));
    }
    let header_end = 12 + n_levels * 12;
    if bytes.len() < header_end {
        return Err(fail("truncated level headers"));
    }
    let mut shapes = Vec::with_capacity(n_levels);
    let mut total = 0usize;
    for l in 0..n_levels {
        let o = 12 + l * 12;
        let (res, depth, channels) = (u32_at(o), u32_at(o + 4), u32_at(o + 8));
        let count = PLANES
            .checked_mul(depth)
            .and_then(|x| x.checked_mul(channels))
            .and_then(|x| x.checked_mul(res * res))
            .ok_or_else(|| fail("level size overflow"))?;
        shapes.push((res, depth, channels, count));
        total += count;
    }
    if bytes.len() != header_end + total * 4 {
        return Err(fail(&format!(
            "payload size {} != expected {}",
            bytes.len() - header_end,
            total * 4
        )));
    }
    let mut offset = header_end;
    let mut levels = Vec::with_capacity(n_levels);
    for (res, depth, channels, count) in shapes {
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let v = f32::from_le_bytes(bytes[offset + i * 4..offset + i * 4 + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(fail("non-finite grid value"));
            }
            values.push(v);
        }
        offset += count * 4;
        levels.push(TriGrid::from_values(res, depth, channels, values)?);
    }
    PyramidTriGrid::from_levels(levels)
}

pub fn store_grid(path: &Path, pyr: &PyramidTriGrid) -> Result<()> {
    atomic_write(path, &encode_grid(pyr))
}

pub fn load_grid(path: &Path) -> Result<PyramidTriGrid> {
    decode_grid(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random_pyramid(seed: u64) -> PyramidTriGrid {
        let mut rng = seeded_rng(seed);
        let mut pyr = PyramidTriGrid::zeros(&[4, 8], 3, 5).unwrap();
        for l in pyr.levels_mut() {
            for v in l.values_mut() {
                *v = rng.gen_range(-10.0f32..10.0);
            }
        }
        pyr
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let pyr = random_pyramid(1);
        let bytes = encode_grid(&pyr);
        let decoded = decode_grid(&bytes).unwrap();
        assert_eq!(pyr, decoded);
        assert_eq!(bytes, encode_grid(&decoded));
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let pyr = random_pyramid(2);
        let good = encode_grid(&pyr);
        assert!(decode_grid(&good[..8]).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode_grid(&bad_magic).is_err());
        let mut truncated = good.clone();
        truncated.truncate(good.len() - 4);
        assert!(decode_grid(&truncated).is_err());
        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_grid(&nan).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("ptg-grid-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scene.ptg");
        let pyr = random_pyramid(3);
        store_grid(&path, &pyr).unwrap();
        assert_eq!(load_grid(&path).unwrap(), pyr);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
