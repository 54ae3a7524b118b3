//! Procedural scenes with exact depth.
//!
//! Depth convention everywhere: larger value = nearer (relative inverse
//! depth), background = 0. Object color brightness grows with nearness, which
//! makes depth recoverable from color for the trainable estimator.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: [f32; 3],
    pub depth_plane: f32,
    /// Center in pixels (x, y).
    pub center: (f32, f32),
    /// Half extents in pixels (x, y); zero covers no pixel.
    pub half_size: (f32, f32),
}

impl SceneObject {
    fn covers(&self, px: f32, py: f32) -> bool {
        let (hx, hy) = self.half_size;
        if hx <= 0.0 || hy <= 0.0 {
            return false;
        }
        let dx = px - self.center.0;
        let dy = py - self.center.1;
        match self.shape {
            Shape::Rectangle => dx.abs() < hx && dy.abs() < hy,
            Shape::Ellipse => (dx / hx).powi(2) + (dy / hy).powi(2) < 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
}

/// Knobs of the random scene distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object half-size range as a fraction of the resolution.
    pub min_half_size: f32,
    pub max_half_size: f32,
    pub min_depth: f32,
    pub max_depth: f32,
    /// How strongly object brightness follows depth: 1 ties brightness to
    /// depth, 0 draws it independently.
    pub depth_shading: f32,
    /// How strongly nearer objects sit lower in the frame, from 0 (no cue)
    /// to 1 (vertical position set by depth).
    pub position_cue: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: 112,
            min_objects: 1,
            max_objects: 4,
            min_half_size: 0.08,
            max_half_size: 0.3,
            min_depth: 0.15,
            max_depth: 1.0,
            depth_shading: 1.0,
            position_cue: 0.0,
        }
    }
}

/// Color of an object with base hue `hue` (max channel 1) at `depth`.
pub fn shade(hue: [f32; 3], depth: f32) -> [f32; 3] {
    let b = 0.25 + 0.75 * depth;
    [hue[0] * b, hue[1] * b, hue[2] * b]
}

fn random_hue<R: Rng>(rng: &mut R) -> [f32; 3] {
    // saturated hue: one channel at 1, one at 0, one in between
    let h: f32 = rng.random_range(0.0..6.0);
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn background(y: usize, height: usize) -> [f32; 3] {
    let t = (y as f32 + 0.5) / height as f32;
    [0.12 + 0.1 * t, 0.14 + 0.1 * t, 0.2 + 0.06 * t]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("scene resolution must be positive".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::Invalid("scene needs at least one object".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let inside = o.center.0 >= 0.0
                && o.center.1 >= 0.0
                && o.center.0 <= self.width as f32
                && o.center.1 <= self.height as f32;
            if !inside || o.half_size.0 < 0.0 || o.half_size.1 < 0.0 {
                return Err(Error::Invalid(format!("object {i} not renderable within bounds")));
            }
            if !(0.0..=1.0).contains(&o.depth_plane) || o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!("object {i} has color or depth outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Random scene from the given distribution, fully determined by `seed`.
    pub fn random(seed: u64, cfg: &SceneConfig) -> Self {
        let mut rng = seeded_rng(seed);
        let res = cfg.resolution as f32;
        let count = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
        let objects = (0..count)
            .map(|_| {
                let depth = rng.random_range(cfg.min_depth..=cfg.max_depth);
                random_object(&mut rng, res, cfg, depth, None)
            })
            .collect();
        Self {
            seed,
            height: cfg.resolution,
            width: cfg.resolution,
            objects,
        }
    }

    /// Single-object scene for the recognition task: `class = shape * 2 + band`
    /// where band 0 is far (depth below 0.5) and band 1 near.
    pub fn classification(seed: u64, cfg: &SceneConfig, class: usize) -> Self {
        let mut rng = seeded_rng(seed);
        let res = cfg.resolution as f32;
        let shape = if class / 2 == 0 {
            Shape::Rectangle
        } else {
            Shape::Ellipse
        };
        let depth = if class.is_multiple_of(2) {
            rng.random_range(0.2..0.45)
        } else {
            rng.random_range(0.6..=1.0)
        };
        let mut obj = random_object(&mut rng, res, cfg, depth, Some(shape));
        // large, centered objects keep corners visible after pooling
        obj.half_size = (rng.random_range(0.22..0.4) * res, rng.random_range(0.22..0.4) * res);
        obj.center = (rng.random_range(0.4..0.6) * res, rng.random_range(0.4..0.6) * res);
        Self {
            seed,
            height: cfg.resolution,
            width: cfg.resolution,
            objects: vec![obj],
        }
    }
}

fn random_object<R: Rng>(rng: &mut R, res: f32, cfg: &SceneConfig, depth: f32, shape: Option<Shape>) -> SceneObject {
    let shape = shape.unwrap_or(if rng.random_bool(0.5) {
        Shape::Rectangle
    } else {
        Shape::Ellipse
    });
    let hx = rng.random_range(cfg.min_half_size..=cfg.max_half_size) * res;
    let hy = rng.random_range(cfg.min_half_size..=cfg.max_half_size) * res;
    let cx = rng.random_range(0.15 * res..=0.85 * res);
    let mut cy = rng.random_range(0.15 * res..=0.85 * res);
    let hue = random_hue(rng);
    let mut tone = depth;
    if cfg.depth_shading < 1.0 {
        let u: f32 = rng.random();
        tone = cfg.depth_shading * depth + (1.0 - cfg.depth_shading) * u;
    }
    if cfg.position_cue > 0.0 {
        let span = (cfg.max_depth - cfg.min_depth).max(f32::EPSILON);
        let t = ((depth - cfg.min_depth) / span).clamp(0.0, 1.0);
        cy = (1.0 - cfg.position_cue) * cy + cfg.position_cue * (0.15 + 0.7 * t) * res;
    }
    SceneObject {
        shape,
        color: shade(hue, tone),
        depth_plane: depth,
        center: (cx, cy),
        half_size: (hx, hy),
    }
}

/// Renders a scene to a 3xHxW color raster and a 1xHxW depth raster.
///
/// At every pixel the covering object with the largest depth plane wins;
/// among equal planes the later object in the list wins.
pub fn render_scene(spec: &SceneSpec) -> (Array3<f32>, Array3<f32>) {
    let (h, w) = (spec.height, spec.width);
    let mut rgb = Array3::<f32>::zeros((3, h, w));
    let mut depth = Array3::<f32>::zeros((1, h, w));
    for y in 0..h {
        let bg = background(y, h);
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut best: Option<&SceneObject> = None;
            for o in &spec.objects {
                if o.covers(px, py) && best.is_none_or(|b| o.depth_plane >= b.depth_plane) {
                    best = Some(o);
                }
            }
            let (col, d) = match best {
                Some(o) => (o.color, o.depth_plane),
                None => (bg, 0.0),
            };
            for c in 0..3 {
                rgb[[c, y, x]] = col[c];
            }
            depth[[0, y, x]] = d;
        }
    }
    (rgb, depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(depth: f32, center: (f32, f32), half: (f32, f32)) -> SceneObject {
        SceneObject {
            shape: Shape::Rectangle,
            color: [0.5, 0.5, 0.5],
            depth_plane: depth,
            center,
            half_size: half,
        }
    }

    fn spec(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec {
            seed: 0,
            height: 8,
            width: 8,
            objects,
        }
    }

    #[test]
    fn zero_coverage_objects_leave_background() {
        let s = spec(vec![rect(0.9, (4.0, 4.0), (0.0, 3.0))]);
        s.validate().unwrap();
        let (_, d) = render_scene(&s);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_frame_rectangle_is_constant() {
        let (_, d) = render_scene(&spec(vec![rect(0.7, (4.0, 4.0), (4.0, 4.0))]));
        assert!(d.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn nearer_rectangle_wins_overlap() {
        let back = rect(0.3, (3.0, 3.0), (3.0, 3.0)); // covers x,y in [0,6)
        let front = rect(0.8, (5.0, 5.0), (3.0, 3.0)); // covers x,y in [2,8)
        let (_, d) = render_scene(&spec(vec![back.clone(), front.clone()]));
        // enumerate every pixel against the occlusion rule
        for y in 0..8 {
            for x in 0..8 {
                let in_back = x < 6 && y < 6;
                let in_front = x >= 2 && y >= 2;
                let expect = if in_front {
                    0.8
                } else if in_back {
                    0.3
                } else {
                    0.0
                };
                assert_eq!(d[[0, y, x]], expect, "pixel ({x},{y})");
            }
        }
        // order of listing does not matter for distinct planes
        let (_, d2) = render_scene(&spec(vec![front, back]));
        assert_eq!(d, d2);
    }

    #[test]
    fn hidden_far_object_does_not_change_depth() {
        let near = rect(0.9, (4.0, 4.0), (3.0, 3.0));
        let hidden = rect(0.2, (4.0, 4.0), (2.0, 2.0));
        let (rgb_a, d_a) = render_scene(&spec(vec![near.clone()]));
        let (rgb_b, d_b) = render_scene(&spec(vec![hidden, near]));
        assert_eq!(d_a, d_b);
        assert_eq!(rgb_a, rgb_b);
    }

    #[test]
    fn random_scenes_are_deterministic_and_valid() {
        let cfg = SceneConfig {
            resolution: 32,
            ..Default::default()
        };
        for seed in 0..20 {
            let a = SceneSpec::random(seed, &cfg);
            a.validate().unwrap();
            assert_eq!(render_scene(&a), render_scene(&SceneSpec::random(seed, &cfg)));
        }
    }

    fn brightness_depth_correlation(shading: f32) -> f64 {
        let cfg = SceneConfig {
            resolution: 32,
            depth_shading: shading,
            ..SceneConfig::default()
        };
        let (mut b, mut d) = (Vec::new(), Vec::new());
        for seed in 0..400 {
            for o in SceneSpec::random(seed, &cfg).objects {
                b.push(o.color.iter().cloned().fold(0.0f32, f32::max) as f64);
                d.push(o.depth_plane as f64);
            }
        }
        let n = b.len() as f64;
        let (mb, md) = (b.iter().sum::<f64>() / n, d.iter().sum::<f64>() / n);
        let cov: f64 = b.iter().zip(&d).map(|(x, y)| (x - mb) * (y - md)).sum();
        let vb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
        let vd: f64 = d.iter().map(|y| (y - md).powi(2)).sum();
        cov / (vb * vd).sqrt()
    }

    #[test]
    fn full_shading_ties_brightness_to_depth() {
        assert!((brightness_depth_correlation(1.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_shading_decouples_brightness() {
        assert!(brightness_depth_correlation(0.0).abs() < 0.1);
    }

    #[test]
    fn full_position_cue_places_by_depth() {
        let cfg = SceneConfig {
            resolution: 100,
            position_cue: 1.0,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = SceneSpec::random(seed, &cfg);
            s.validate().unwrap();
            for o in &s.objects {
                let t = (o.depth_plane - cfg.min_depth) / (cfg.max_depth - cfg.min_depth);
                assert!((o.center.1 - (0.15 + 0.7 * t) * 100.0).abs() < 1e-3);
            }
        }
    }
}
