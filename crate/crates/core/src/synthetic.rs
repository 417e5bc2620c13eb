//! Procedural color scenes: a two-color gradient background with a few
//! saturated ellipses and bars. Deterministic per seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as u32;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Bar { x0: f64, x1: f64, y0: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
            }
            Shape::Bar { x0, x1, y0, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// One `size x size` scene.
pub fn scene(size: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = hsv(
        rng.random(),
        rng.random_range(0.3..0.7),
        rng.random_range(0.6..0.95),
    );
    let bottom = hsv(
        rng.random(),
        rng.random_range(0.3..0.7),
        rng.random_range(0.2..0.6),
    );
    let count = rng.random_range(2..=4);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let color = hsv(
                rng.random(),
                rng.random_range(0.6..1.0),
                rng.random_range(0.35..1.0),
            );
            let shape = if rng.random_bool(0.6) {
                Shape::Ellipse {
                    cx: rng.random_range(0.15..0.85),
                    cy: rng.random_range(0.15..0.85),
                    rx: rng.random_range(0.08..0.3),
                    ry: rng.random_range(0.08..0.3),
                }
            } else {
                let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
                Shape::Bar {
                    x0: x,
                    x1: x + rng.random_range(0.1..0.3),
                    y0: y,
                    y1: y + rng.random_range(0.1..0.3),
                }
            };
            (shape, color)
        })
        .collect();
    let s = size as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = top[k] * (1.0 - v) + bottom[k] * v;
        }
        for (shape, color) in &shapes {
            if shape.contains(u, v) {
                c = *color;
            }
        }
        c.map(|ch| (ch * 255.0).round().clamp(0.0, 255.0) as u8)
    })
}

/// Writes `n` scenes as `scene_000.png`, ... into `dir`.
pub fn write_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n)
        .map(|i| {
            let path = dir.join(format!("scene_{i:03}.png"));
            scene(size, seed.wrapping_mul(1000).wrapping_add(i as u64)).write_png(&path)?;
            Ok(path)
        })
        .collect()
}
