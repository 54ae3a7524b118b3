//! Minimal raster plots. Every figure is written with a JSON sidecar holding
//! the plotted data, so labels and values live there rather than in pixels.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use depthdecode_core::analysis::VdsiReport;
use depthdecode_core::evaluation::EvalReport;
use image::{Rgb, RgbImage};
use serde::Serialize;

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: f64 = 48.0;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(W, H, Rgb([255, 255, 255])),
            x,
            y,
        };
        let (l, t, r, b) = (MARGIN, MARGIN, W as f64 - MARGIN, H as f64 - MARGIN);
        c.line_px((l, b), (r, b), [0, 0, 0]);
        c.line_px((l, b), (l, t), [0, 0, 0]);
        c
    }

    fn to_px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let span_x = (self.x.1 - self.x.0).max(f64::EPSILON);
        let span_y = (self.y.1 - self.y.0).max(f64::EPSILON);
        let px = MARGIN + (x - self.x.0) / span_x * (W as f64 - 2.0 * MARGIN);
        let py = H as f64 - MARGIN - (y - self.y.0) / span_y * (H as f64 - 2.0 * MARGIN);
        (px, py)
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    fn line_px(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.put(x.round() as i64, y.round() as i64, color);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (pa, pb) = (self.to_px(a), self.to_px(b));
        self.line_px(pa, pb, color);
    }

    fn dashed(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (pa, pb) = (self.to_px(a), self.to_px(b));
        let len = ((pb.0 - pa.0).powi(2) + (pb.1 - pa.1).powi(2)).sqrt();
        let dashes = (len / 8.0).ceil() as usize;
        for i in (0..dashes).step_by(2) {
            let t0 = i as f64 / dashes as f64;
            let t1 = ((i + 1) as f64 / dashes as f64).min(1.0);
            let p = |t: f64| (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1));
            self.line_px(p(t0), p(t1), color);
        }
    }

    fn dot(&mut self, p: (f64, f64), radius: i64, color: [u8; 3]) {
        let (cx, cy) = self.to_px(p);
        let (cx, cy) = (cx.round() as i64, cy.round() as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dx * dx + dy * dy <= radius * radius {
                    self.put(cx + dx, cy + dy, color);
                }
            }
        }
    }

    fn cell(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        let (a, b) = (self.to_px((x0, y0)), self.to_px((x1, y1)));
        let (lx, hx) = (a.0.min(b.0).round() as i64, a.0.max(b.0).round() as i64);
        let (ly, hy) = (a.1.min(b.1).round() as i64, a.1.max(b.1).round() as i64);
        for y in ly..hy.max(ly + 1) {
            for x in lx..hx.max(lx + 1) {
                self.put(x, y, color);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// Path of the data sidecar written next to a figure.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn write_sidecar<T: Serialize>(png: &Path, data: &T) -> Result<PathBuf> {
    let path = sidecar_path(png);
    std::fs::write(&path, serde_json::to_string_pretty(data)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct RankSeries {
    pub label: String,
    pub metric: String,
    pub n: Vec<usize>,
    pub mean_rank: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub chance: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct RankFigure {
    pub x_axis: &'static str,
    pub y_axis: &'static str,
    pub series: Vec<RankSeries>,
}

/// Mean rank against log10(n), one colored series per report with CI
/// whiskers, and the chance line dashed in grey.
pub fn plot_ranks(reports: &[(String, EvalReport)], png: &Path) -> Result<PathBuf> {
    let series: Vec<RankSeries> = reports
        .iter()
        .map(|(label, r)| RankSeries {
            label: label.clone(),
            metric: r.metric.to_string(),
            n: r.results.iter().map(|x| x.n).collect(),
            mean_rank: r.results.iter().map(|x| x.mean_rank).collect(),
            ci_low: r.results.iter().map(|x| x.ci_low).collect(),
            ci_high: r.results.iter().map(|x| x.ci_high).collect(),
            chance: r.results.iter().map(|x| x.chance).collect(),
        })
        .collect();
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.n.iter().map(|&n| (n as f64).log10()))
        .collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.ci_high.iter().chain(&s.chance).copied())
        .collect();
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x = if x_lo.is_finite() {
        (x_lo - 0.1, x_hi + 0.1)
    } else {
        (0.0, 1.0)
    };
    let y_hi = ys.iter().cloned().fold(1.0, f64::max);
    let mut c = Canvas::new(x, (0.0, y_hi * 1.05));

    if let Some(s) = series.first() {
        for w in s.n.windows(2).zip(s.chance.windows(2)) {
            let (n, ch) = w;
            c.dashed(
                ((n[0] as f64).log10(), ch[0]),
                ((n[1] as f64).log10(), ch[1]),
                [150, 150, 150],
            );
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> =
            s.n.iter()
                .zip(&s.mean_rank)
                .map(|(&n, &m)| ((n as f64).log10(), m))
                .collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], color);
        }
        for ((p, lo), hi) in pts.iter().zip(&s.ci_low).zip(&s.ci_high) {
            c.line((p.0, *lo), (p.0, *hi), color);
            c.dot(*p, 3, color);
        }
    }
    c.save(png)?;
    write_sidecar(
        png,
        &RankFigure {
            x_axis: "log10 candidate set size n",
            y_axis: "mean rank (lower is better)",
            series,
        },
    )
}

#[derive(Debug, Serialize)]
pub struct ScatterFigure {
    pub x_axis: String,
    pub y_axis: String,
    /// Both axes show log10(1 + VDSI).
    pub transform: &'static str,
    pub bins: usize,
    pub pearson: f64,
    pub count: usize,
    pub excluded: usize,
    pub voxel_ids: Vec<u32>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Density scatter of voxel-aligned VDSI values from two reports.
pub fn plot_vdsi_scatter(
    a: &VdsiReport,
    b: &VdsiReport,
    labels: (&str, &str),
    agreement: &depthdecode_core::analysis::Agreement,
    png: &Path,
) -> Result<PathBuf> {
    const BINS: usize = 64;
    let bmap: std::collections::HashMap<u32, &depthdecode_core::analysis::VdsiEntry> =
        b.entries.iter().map(|e| (e.voxel_id, e)).collect();
    let mut ids = Vec::new();
    let (mut va, mut vb) = (Vec::new(), Vec::new());
    for e in &a.entries {
        if let Some(o) = bmap.get(&e.voxel_id) {
            if !e.clipped && !o.clipped {
                ids.push(e.voxel_id);
                va.push(e.vdsi);
                vb.push(o.vdsi);
            }
        }
    }
    let t = |v: f64| (1.0 + v).log10();
    let hi = va.iter().chain(&vb).map(|&v| t(v)).fold(0.1, f64::max) * 1.02;
    let mut counts = vec![0usize; BINS * BINS];
    for (&x, &y) in va.iter().zip(&vb) {
        let bx = ((t(x) / hi * BINS as f64) as usize).min(BINS - 1);
        let by = ((t(y) / hi * BINS as f64) as usize).min(BINS - 1);
        counts[by * BINS + bx] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut c = Canvas::new((0.0, hi), (0.0, hi));
    let step = hi / BINS as f64;
    for by in 0..BINS {
        for bx in 0..BINS {
            let n = counts[by * BINS + bx];
            if n == 0 {
                continue;
            }
            let shade = (1.0 + n as f64).ln() / (1.0 + max).ln();
            let v = (230.0 * (1.0 - shade)) as u8;
            c.cell(
                bx as f64 * step,
                by as f64 * step,
                (bx + 1) as f64 * step,
                (by + 1) as f64 * step,
                [v, v, 255],
            );
        }
    }
    c.dashed((0.0, 0.0), (hi, hi), [120, 120, 120]);
    c.save(png)?;
    write_sidecar(
        png,
        &ScatterFigure {
            x_axis: labels.0.to_string(),
            y_axis: labels.1.to_string(),
            transform: "log10(1 + vdsi)",
            bins: BINS,
            pearson: agreement.pearson,
            count: agreement.count,
            excluded: agreement.excluded,
            voxel_ids: ids,
            a: va,
            b: vb,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canvas_maps_corners_inside_margins() {
        let c = Canvas::new((0.0, 10.0), (0.0, 5.0));
        assert_eq!(c.to_px((0.0, 0.0)), (MARGIN, H as f64 - MARGIN));
        assert_eq!(c.to_px((10.0, 5.0)), (W as f64 - MARGIN, MARGIN));
    }

    #[test]
    fn lines_stay_in_bounds() {
        let mut c = Canvas::new((0.0, 1.0), (0.0, 1.0));
        c.line((-5.0, -5.0), (5.0, 5.0), [0, 0, 0]);
        c.dot((2.0, 2.0), 4, [0, 0, 0]);
    }
}
