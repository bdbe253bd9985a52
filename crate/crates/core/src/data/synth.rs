//! Procedurally generated colored-shape image corpora.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RawImage;
use super::mix_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Stripes,
    Diamond,
    Checker,
    Saltire,
    HalfDisk,
    Frame,
    Dots,
}

impl Shape {
    pub const ALL: [Shape; 12] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Ring,
        Shape::Stripes,
        Shape::Diamond,
        Shape::Checker,
        Shape::Saltire,
        Shape::HalfDisk,
        Shape::Frame,
        Shape::Dots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Stripes => "stripes",
            Shape::Diamond => "diamond",
            Shape::Checker => "checker",
            Shape::Saltire => "saltire",
            Shape::HalfDisk => "half_disk",
            Shape::Frame => "frame",
            Shape::Dots => "dots",
        }
    }

    /// Whether the point `(u, v)`, in shape-local coordinates scaled so the
    /// shape spans `[-1, 1]`, lies inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        let inside_box = u.abs() <= 1.0 && v.abs() <= 1.0;
        match self {
            Shape::Circle => r <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Triangle => v <= 0.8 && v >= -1.0 + 1.8 * u.abs(),
            Shape::Cross => inside_box && (u.abs() <= 0.25 || v.abs() <= 0.25),
            Shape::Ring => (0.6..=1.0).contains(&r),
            Shape::Stripes => inside_box && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Checker => {
                inside_box
                    && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0
            }
            Shape::Saltire => inside_box && ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3),
            Shape::HalfDisk => r <= 1.0 && v >= 0.0,
            Shape::Frame => inside_box && (u.abs() >= 0.65 || v.abs() >= 0.65),
            Shape::Dots => {
                let (du, dv) = (u.abs() - 0.5, v.abs() - 0.5);
                inside_box && (du * du + dv * dv).sqrt() <= 0.3
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn random_color<R: Rng>(rng: &mut R, bright: bool) -> [f64; 3] {
    let (lo, hi) = if bright { (120.0, 255.0) } else { (0.0, 90.0) };
    [0, 1, 2].map(|_| rng.random_range(lo..hi))
}

/// Renders one `size x size` image of `shape`: random foreground and
/// background colors, scale, position, rotation and mild pixel noise.
pub fn render<R: Rng>(shape: Shape, size: usize, rng: &mut R) -> RawImage {
    let s = size as f64;
    let (fg, bg) = if rng.random::<bool>() {
        (random_color(rng, true), random_color(rng, false))
    } else {
        (random_color(rng, false), random_color(rng, true))
    };
    let radius = s * rng.random_range(0.25..0.4);
    let cx = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let (sin, cos) = rng.random_range(-0.3f64..0.3).sin_cos();
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (y as f64 + 0.5 - cy) / radius);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let base = if shape.contains(u, v) { fg } else { bg };
            for b in base {
                let noisy = b + rng.random_range(-12.0..12.0);
                pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(size, size, pixels).expect("positive size")
}

/// Writes `per_class` PPM images of each shape under `root/<shape>/`.
pub fn generate_dataset(
    root: impl AsRef<Path>,
    shapes: &[Shape],
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    if shapes.is_empty() || per_class == 0 || size == 0 {
        return Err(Error::config("synthetic dataset needs shapes, images and a size"));
    }
    for (k, &shape) in shapes.iter().enumerate() {
        let dir = root.join(shape.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, k as u64, i as u64]));
            let img = render(shape, size, &mut rng);
            let path = dir.join(format!("{}_{i:04}.ppm", shape.name()));
            std::fs::write(&path, img.to_ppm()).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
