//! Binary raster (`DDR1`), voxel vector (`DDF1`), voxel table and PNG I/O.
//!
//! Raster: `"DDR1"` + u32 C + u32 H + u32 W (little-endian) + C*H*W f32,
//! row-major. Voxel vector: `"DDF1"` + u32 V + V f32. Voxel table: CSV with
//! header `voxel_id,region`, one row per vector position.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::Region;

pub const RASTER_MAGIC: &[u8; 4] = b"DDR1";
pub const FMRI_MAGIC: &[u8; 4] = b"DDF1";

fn read_u32(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

pub fn encode_raster(raster: &Array3<f32>) -> Vec<u8> {
    let (c, h, w) = raster.dim();
    let mut out = Vec::with_capacity(16 + 4 * c * h * w);
    out.extend_from_slice(RASTER_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in raster.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<Array3<f32>> {
    if bytes.len() < 16 || &bytes[..4] != RASTER_MAGIC {
        return Err(Error::format(path, "missing DDR1 header"));
    }
    let (c, h, w) = (
        read_u32(bytes, 4) as usize,
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
    );
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::format(path, "raster dimensions overflow"))?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, "zero-sized raster"));
    }
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!(
                "expected {} payload bytes for {c}x{h}x{w}, found {}",
                4 * n,
                bytes.len() - 16
            ),
        ));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Array3::from_shape_vec((c, h, w), data).expect("size checked"))
}

pub fn write_raster(path: &Path, raster: &Array3<f32>) -> Result<()> {
    fs::write(path, encode_raster(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Array3<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

pub fn encode_fmri(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * values.len());
    out.extend_from_slice(FMRI_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fmri(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    if bytes.len() < 8 || &bytes[..4] != FMRI_MAGIC {
        return Err(Error::format(path, "missing DDF1 header"));
    }
    let v = read_u32(bytes, 4) as usize;
    if bytes.len() != 8 + 4 * v {
        return Err(Error::format(
            path,
            format!("header declares {v} voxels but payload holds {}", (bytes.len() - 8) / 4),
        ));
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_fmri(path: &Path, values: &[f32]) -> Result<()> {
    fs::write(path, encode_fmri(values)).map_err(|e| Error::io(path, e))
}

pub fn read_fmri(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmri(&bytes, path)
}

pub fn write_voxel_table(path: &Path, rows: &[(u32, Region)]) -> Result<()> {
    let mut text = String::from("voxel_id,region\n");
    for (id, region) in rows {
        text.push_str(&format!("{id},{region}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_voxel_table(path: &Path) -> Result<Vec<(u32, Region)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "voxel_id,region" => {}
        _ => return Err(Error::format(path, "expected header voxel_id,region")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, region) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("row {} lacks a comma", i + 2)))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("row {}: bad voxel id {id:?}", i + 2)))?;
        let region: Region = region
            .parse()
            .map_err(|_| Error::format(path, format!("row {}: bad region {region:?}", i + 2)))?;
        rows.push((id, region));
    }
    Ok(rows)
}

/// Reads an 8-bit PNG as a 3 x H x W raster in [0, 1].
pub fn read_png_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = f32::from(p.0[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Writes channels 0..3 (or a single gray channel) of a [0, 1] raster as PNG.
pub fn write_png(path: &Path, raster: &Array3<f32>) -> Result<()> {
    let (c, h, w) = raster.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| (raster[[ch.min(c - 1), y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            let p = if c >= 3 { [px(0), px(1), px(2)] } else { [px(0); 3] };
            img.put_pixel(x as u32, y as u32, image::Rgb(p));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
