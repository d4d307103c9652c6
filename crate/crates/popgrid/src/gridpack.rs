//! GridPack: the bit-exact raster container used for every raster this
//! tool reads or writes.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4    magic ASCII "GPK1"
//! bytes 4..8    little-endian u32 header byte length H
//! bytes 8..8+H  UTF-8 JSON header:
//!               {"width","height","bands","dtype","transform":[ox,oy,px,py],
//!                "band_names":[...],"groups":[...]}
//! payload       band-sequential, row-major, little-endian f32 or u32
//! mask          one bit per cell per band (1 = valid), band-sequential
//!               row-major, LSB first, padded to a byte boundary per band
//! ```
//!
//! Writing the same grid twice produces byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::{FeatureGroup, Grid, Transform};
use crate::regions::{RegionMap, NODATA};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GPK1";

#[derive(Serialize, Deserialize)]
struct Header {
    width: usize,
    height: usize,
    bands: usize,
    dtype: String,
    transform: [f64; 4],
    band_names: Vec<String>,
    groups: Vec<String>,
}

fn mask_bytes_per_band(width: usize, height: usize) -> usize {
    (width * height + 7) / 8
}

fn pack_mask(valid: &[bool], width: usize, height: usize, bands: usize) -> Vec<u8> {
    let per_band = mask_bytes_per_band(width, height);
    let n = width * height;
    let mut out = vec![0u8; per_band * bands];
    for band in 0..bands {
        let cells = &valid[band * n..(band + 1) * n];
        let bytes = &mut out[band * per_band..(band + 1) * per_band];
        for (i, &ok) in cells.iter().enumerate() {
            if ok {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
    }
    out
}

fn unpack_mask(bytes: &[u8], width: usize, height: usize, bands: usize) -> Vec<bool> {
    let per_band = mask_bytes_per_band(width, height);
    let n = width * height;
    let mut out = vec![false; n * bands];
    for band in 0..bands {
        let src = &bytes[band * per_band..(band + 1) * per_band];
        let dst = &mut out[band * n..(band + 1) * n];
        for (i, cell) in dst.iter_mut().enumerate() {
            *cell = src[i / 8] & (1 << (i % 8)) != 0;
        }
    }
    out
}

fn encode(
    width: usize,
    height: usize,
    bands: usize,
    dtype: &str,
    transform: Transform,
    band_names: &[String],
    groups: &[String],
    payload: &[u8],
    valid: &[bool],
) -> Vec<u8> {
    let header = Header {
        width,
        height,
        bands,
        dtype: dtype.to_string(),
        transform: [
            transform.origin_x,
            transform.origin_y,
            transform.pixel_size_x,
            transform.pixel_size_y,
        ],
        band_names: band_names.to_vec(),
        groups: groups.to_vec(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(payload);
    out.extend_from_slice(&pack_mask(valid, width, height, bands));
    out
}

struct Decoded {
    header: Header,
    payload: Vec<u8>,
    valid: Vec<bool>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload { expected: 4, actual: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::TruncatedPayload { expected: 8, actual: bytes.len() });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::TruncatedPayload { expected: 8 + header_len, actual: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])?;
    if header.dtype != "f32" && header.dtype != "u32" {
        return Err(Error::UnsupportedDtype(header.dtype.clone()));
    }
    if header.band_names.len() != header.bands {
        return Err(Error::SizeMismatch(format!(
            "header declares {} bands but {} band names",
            header.bands,
            header.band_names.len()
        )));
    }
    if header.groups.len() != header.bands {
        return Err(Error::SizeMismatch(format!(
            "header declares {} bands but {} groups",
            header.bands,
            header.groups.len()
        )));
    }
    let cells = header.width * header.height * header.bands;
    let payload_len = cells * 4;
    let mask_len = mask_bytes_per_band(header.width, header.height) * header.bands;
    let expected = 8 + header_len + payload_len + mask_len;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::SizeMismatch(format!(
            "file is {} bytes but header implies {expected}",
            bytes.len()
        )));
    }
    let payload = bytes[8 + header_len..8 + header_len + payload_len].to_vec();
    let valid = unpack_mask(
        &bytes[8 + header_len + payload_len..],
        header.width,
        header.height,
        header.bands,
    );
    Ok(Decoded { header, payload, valid })
}

/// Serialize a float grid to GridPack bytes.
pub fn grid_to_bytes(grid: &Grid) -> Vec<u8> {
    let mut payload = Vec::with_capacity(grid.values().len() * 4);
    for v in grid.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let groups: Vec<String> = grid.groups().iter().map(|g| g.as_str().to_string()).collect();
    encode(
        grid.width(),
        grid.height(),
        grid.bands(),
        "f32",
        grid.transform(),
        grid.band_names(),
        &groups,
        &payload,
        grid.valid_mask(),
    )
}

/// Deserialize a float grid from GridPack bytes.
pub fn grid_from_bytes(bytes: &[u8]) -> Result<Grid> {
    let d = decode(bytes)?;
    if d.header.dtype != "f32" {
        return Err(Error::UnsupportedDtype(format!(
            "{} (expected f32 grid)",
            d.header.dtype
        )));
    }
    let values: Vec<f32> = d
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let groups = d
        .header
        .groups
        .iter()
        .map(|g| FeatureGroup::parse(g))
        .collect::<Result<Vec<_>>>()?;
    let [ox, oy, px, py] = d.header.transform;
    Grid::from_parts(
        d.header.width,
        d.header.height,
        Transform::new(ox, oy, px, py),
        d.header.band_names,
        groups,
        values,
        d.valid,
    )
}

/// Write a float grid to a GridPack file.
pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    fs::write(path, grid_to_bytes(grid))?;
    Ok(())
}

/// Read a float grid from a GridPack file.
pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path)?;
    grid_from_bytes(&bytes)
}

/// Write a region map as a single-band u32 GridPack. Sentinel cells are
/// stored with the sentinel value and a cleared validity bit.
pub fn write_region_map(path: &Path, map: &RegionMap) -> Result<()> {
    let mut payload = Vec::with_capacity(map.indices().len() * 4);
    let mut valid = Vec::with_capacity(map.indices().len());
    for &idx in map.indices() {
        payload.extend_from_slice(&idx.to_le_bytes());
        valid.push(idx != NODATA);
    }
    let bytes = encode(
        map.width(),
        map.height(),
        1,
        "u32",
        map.transform(),
        &["region_id".to_string()],
        &["AUX".to_string()],
        &payload,
        &valid,
    );
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a region map from a u32 GridPack.
pub fn read_region_map(path: &Path) -> Result<RegionMap> {
    let bytes = fs::read(path)?;
    let d = decode(&bytes)?;
    if d.header.dtype != "u32" {
        return Err(Error::UnsupportedDtype(format!(
            "{} (expected u32 region map)",
            d.header.dtype
        )));
    }
    if d.header.bands != 1 {
        return Err(Error::SizeMismatch(format!(
            "region map must have 1 band, found {}",
            d.header.bands
        )));
    }
    let indices: Vec<u32> = d
        .payload
        .chunks_exact(4)
        .zip(&d.valid)
        .map(|(c, &ok)| {
            if ok {
                u32::from_le_bytes(c.try_into().unwrap())
            } else {
                NODATA
            }
        })
        .collect();
    let [ox, oy, px, py] = d.header.transform;
    RegionMap::from_indices(
        d.header.width,
        d.header.height,
        Transform::new(ox, oy, px, py),
        indices,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_grid() -> Grid {
        let values: Vec<f32> = (0..7 * 5 * 3).map(|i| (i as f32) * 0.5 - 17.0).collect();
        let valid: Vec<bool> = (0..7 * 5 * 3).map(|i| i % 4 != 0).collect();
        Grid::from_parts(
            7,
            5,
            Transform::new(100.0, 200.0, 10.0, 10.0),
            vec!["vv".into(), "red".into(), "dem".into()],
            vec![FeatureGroup::S1, FeatureGroup::S2, FeatureGroup::Aux],
            values,
            valid,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let g = small_grid();
        let bytes = grid_to_bytes(&g);
        let back = grid_from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn write_is_deterministic() {
        let g = small_grid();
        assert_eq!(grid_to_bytes(&g), grid_to_bytes(&g));
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = grid_to_bytes(&small_grid());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(grid_from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = grid_to_bytes(&small_grid());
        let cut = &bytes[..bytes.len() - 40];
        assert!(matches!(grid_from_bytes(cut), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn trailing_bytes_are_a_size_mismatch() {
        let mut bytes = grid_to_bytes(&small_grid());
        bytes.push(0);
        assert!(matches!(grid_from_bytes(&bytes), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn unsupported_dtype_is_reported() {
        let g = small_grid();
        let bytes = grid_to_bytes(&g);
        let json = String::from_utf8(bytes[8..8 + header_len(&bytes)].to_vec()).unwrap();
        let patched = json.replace("\"f32\"", "\"f64\"");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[8 + header_len(&bytes)..]);
        assert!(matches!(grid_from_bytes(&out), Err(Error::UnsupportedDtype(_))));
    }

    fn header_len(bytes: &[u8]) -> usize {
        u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize
    }

    #[test]
    fn single_zero_cell_payload_bytes() {
        let g = Grid::filled(
            1,
            1,
            Transform::new(0.0, 0.0, 1.0, 1.0),
            vec!["b".into()],
            vec![FeatureGroup::Aux],
            0.0,
        )
        .unwrap();
        let bytes = grid_to_bytes(&g);
        let h = header_len(&bytes);
        // 4 payload bytes, all zero, then one mask byte with bit 0 set.
        assert_eq!(&bytes[8 + h..8 + h + 4], &[0, 0, 0, 0]);
        assert_eq!(bytes[8 + h + 4], 0b1);
        assert_eq!(bytes.len(), 8 + h + 5);
    }

    #[test]
    fn all_invalid_mask_is_zero_bits() {
        let values = vec![1.0f32; 6];
        let valid = vec![false; 6];
        let g = Grid::from_parts(
            3,
            2,
            Transform::new(0.0, 0.0, 1.0, 1.0),
            vec!["b".into()],
            vec![FeatureGroup::S1],
            values,
            valid,
        )
        .unwrap();
        let bytes = grid_to_bytes(&g);
        let h = header_len(&bytes);
        let mask = &bytes[8 + h + 24..];
        assert!(mask.iter().all(|&b| b == 0));
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_finite_grids(
            w in 1usize..9,
            h in 1usize..9,
            bands in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = w * h * bands;
            let values: Vec<f32> = (0..n)
                .map(|_| f32::from_bits(rng.gen::<u32>()))
                .map(|v| if v.is_finite() { v } else { 0.25 })
                .collect();
            let valid: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            let names = (0..bands).map(|i| format!("band{i}")).collect();
            let groups = vec![FeatureGroup::S2; bands];
            let g = Grid::from_parts(
                w, h,
                Transform::new(-3.5, 900.0, 10.0, 10.0),
                names, groups, values, valid,
            ).unwrap();
            let back = grid_from_bytes(&grid_to_bytes(&g)).unwrap();
            // Bit-exact: compare raw value bits, not float equality.
            let a: Vec<u32> = g.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(g.valid_mask(), back.valid_mask());
        }
    }
}
