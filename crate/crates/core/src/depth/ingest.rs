//! Pairs color images with externally predicted depth maps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::io::{read_png_rgb, read_raster};
use crate::types::{ChannelMode, RgbdSample};

/// Largest relative aspect-ratio difference between an image and its depth
/// map that resizing is allowed to absorb.
pub const MAX_ASPECT_MISMATCH: f64 = 0.02;

/// Bilinear resize with half-pixel centers, applied per channel.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| coord(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| coord(o, w, out_w)).collect();
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = src[[ch, y0, x0]] * (1.0 - tx) + src[[ch, y0, x1]] * tx;
                let bot = src[[ch, y1, x0]] * (1.0 - tx) + src[[ch, y1, x1]] * tx;
                out[[ch, oy, ox]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Per-image min-max normalization to [0, 1]. A constant map becomes all
/// zeros; the returned flag reports that case.
pub fn minmax_normalize(depth: &mut Array3<f32>) -> bool {
    let lo = depth.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = depth.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !range.is_finite() || range <= 0.0 {
        depth.fill(0.0);
        return true;
    }
    depth.mapv_inplace(|v| ((v - lo) / range).clamp(0.0, 1.0));
    false
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if !exts.contains(&ext.as_str()) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_color(path: &Path) -> Result<Array3<f32>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        return read_png_rgb(path);
    }
    let r = read_raster(path)?;
    if r.dim().0 != 3 {
        return Err(Error::format(
            path,
            format!("expected 3 color channels, found {}", r.dim().0),
        ));
    }
    Ok(r)
}

fn read_depth(path: &Path) -> Result<Array3<f32>> {
    let r = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        read_png_rgb(path)?
    } else {
        read_raster(path)?
    };
    Ok(r.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned())
}

/// Loads every image in `image_dir` (`.png` or 3-channel `.ddr`) with the
/// same-stem depth map in `depth_dir` (`.ddr` or `.png`), resizes both to
/// `resolution` and returns `(stem, RGBD sample)` sorted by stem.
pub fn ingest_precomputed_depth(
    image_dir: &Path,
    depth_dir: &Path,
    resolution: usize,
) -> Result<Vec<(String, RgbdSample)>> {
    let images = stems(image_dir, &["png", "ddr"])?;
    let depths = stems(depth_dir, &["ddr", "png"])?;
    let missing: Vec<String> = images.keys().filter(|s| !depths.contains_key(*s)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingDepth(missing));
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let rgb = read_color(img_path)?;
        let depth_path = &depths[stem];
        let depth = read_depth(depth_path)?;
        let aspect = |a: &Array3<f32>| a.dim().2 as f64 / a.dim().1 as f64;
        let (ai, ad) = (aspect(&rgb), aspect(&depth));
        if (ai - ad).abs() > MAX_ASPECT_MISMATCH * ai {
            return Err(Error::Shape {
                expected: format!("depth aspect {ai:.3} for {stem}"),
                actual: format!("{ad:.3} ({})", depth_path.display()),
            });
        }
        let rgb = resize_bilinear(&rgb, resolution, resolution).mapv(|v| v.clamp(0.0, 1.0));
        let mut depth = resize_bilinear(&depth, resolution, resolution);
        if minmax_normalize(&mut depth) {
            log::warn!("depth map for {stem} is constant; normalized to zeros");
        }
        let raster = ndarray::concatenate(Axis(0), &[rgb.view(), depth.view()]).expect("matching sizes");
        out.push((stem.clone(), RgbdSample::new(ChannelMode::Rgbd, raster)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_png, write_raster};

    fn fixture(n: usize, depth_of: impl Fn(usize) -> Array3<f32>) -> (tempfile::TempDir, PathBuf, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let (img, dep) = (dir.path().join("img"), dir.path().join("depth"));
        fs::create_dir_all(&img).unwrap();
        fs::create_dir_all(&dep).unwrap();
        for i in 0..n {
            let rgb = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + y + x + i) % 5) as f32 / 4.0);
            write_png(&img.join(format!("im{i:02}.png")), &rgb).unwrap();
            write_raster(&dep.join(format!("im{i:02}.ddr")), &depth_of(i)).unwrap();
        }
        (dir, img, dep)
    }

    #[test]
    fn ten_pairs_give_ten_samples() {
        let (_d, img, dep) = fixture(10, |i| {
            Array3::from_shape_fn((1, 8, 8), |(_, y, x)| (y * 8 + x + i) as f32)
        });
        let out = ingest_precomputed_depth(&img, &dep, 8).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|(_, s)| s.channels() == 4 && s.resolution() == (8, 8)));
    }

    #[test]
    fn range_two_to_ten_maps_affinely() {
        let raw = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| 2.0 + 8.0 * ((y * 8 + x) as f32 / 63.0));
        let (_d, img, dep) = fixture(1, |_| raw.clone());
        let out = ingest_precomputed_depth(&img, &dep, 8).unwrap();
        let d = out[0].1.raster();
        for y in 0..8 {
            for x in 0..8 {
                let expect = (raw[[0, y, x]] - 2.0) / 8.0;
                assert!((d[[3, y, x]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_depth_becomes_zeros() {
        let (_d, img, dep) = fixture(2, |_| Array3::from_elem((1, 8, 8), 3.5));
        let out = ingest_precomputed_depth(&img, &dep, 8).unwrap();
        assert!(out[1].1.raster().index_axis(Axis(0), 3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_depth_lists_stems() {
        let (_d, img, dep) = fixture(3, |_| Array3::from_elem((1, 8, 8), 1.0));
        fs::remove_file(dep.join("im01.ddr")).unwrap();
        match ingest_precomputed_depth(&img, &dep, 8) {
            Err(Error::MissingDepth(s)) => assert_eq!(s, vec!["im01".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aspect_mismatch_is_rejected() {
        let (_d, img, dep) = fixture(1, |_| Array3::from_elem((1, 8, 16), 1.0));
        assert!(matches!(
            ingest_precomputed_depth(&img, &dep, 8),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn bilinear_upsample_of_ramp_stays_monotone_and_bounded() {
        let src = Array3::from_shape_fn((1, 2, 2), |(_, _, x)| x as f32);
        let up = resize_bilinear(&src, 4, 4);
        // half-pixel centers: columns at 0, 0.25, 0.75, 1
        let row: Vec<f32> = (0..4).map(|x| up[[0, 1, x]]).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
