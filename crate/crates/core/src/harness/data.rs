//! Seeded synthetic segmentation scenes: coloured squares and circles on a
//! textured background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Foreground categories in class-index order (index 0 is background).
/// Square and circle share colours so colour alone cannot separate them.
pub const SHAPE_PALETTE: [(&str, Shape, [f64; 3]); 6] = [
    ("red square", Shape::Square, [0.85, 0.15, 0.15]),
    ("red circle", Shape::Circle, [0.85, 0.15, 0.15]),
    ("blue circle", Shape::Circle, [0.15, 0.25, 0.85]),
    ("blue square", Shape::Square, [0.15, 0.25, 0.85]),
    ("green circle", Shape::Circle, [0.15, 0.75, 0.2]),
    ("green square", Shape::Square, [0.15, 0.75, 0.2]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    /// Square image side, a multiple of 8 in `32..=128`.
    pub image_size: usize,
    /// Number of classes including background, `2..=7`.
    pub classes: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 400,
            image_size: 48,
            classes: 4,
            seed: 42,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(32..=128).contains(&self.image_size) || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 8 in 32..=128, got {}",
                self.image_size
            )));
        }
        if !(2..=SHAPE_PALETTE.len() + 1).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must be in 2..={}, got {}",
                SHAPE_PALETTE.len() + 1,
                self.classes
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    std::iter::once("background")
        .chain(SHAPE_PALETTE.iter().map(|p| p.0))
        .take(classes)
        .map(String::from)
        .collect()
}

/// Geometry of one drawn shape, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub class: usize,
    pub centre_y: f64,
    pub centre_x: f64,
    /// Circle radius or square half-side.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[S, S, 3]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    /// Row-major class indices, length `S * S`.
    pub labels: Vec<usize>,
    /// Shapes in drawing order; later ones occlude earlier ones.
    pub shapes: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub items: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Pixel count per class over the whole set.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes()];
        for s in &self.items {
            for &l in &s.labels {
                h[l] += 1;
            }
        }
        h
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let items = (0..spec.count).map(|i| render(spec, &mut root.fork(i as u64))).collect();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        class_names: class_names(spec.classes),
        items,
    })
}

/// One scene; depends only on the item's own stream.
fn render(spec: &DatasetSpec, rng: &mut Rng) -> Sample {
    let n = spec.image_size;
    let mut img = vec![0.0; n * n * 3];
    let mut labels = vec![0; n * n];

    let base: Vec<f64> = (0..3).map(|_| rng.uniform(0.35, 0.65)).collect();
    let (fy, fx, phase) = (rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.0, 6.3));
    for y in 0..n {
        for x in 0..n {
            let stripe = 0.06 * (fy * y as f64 + fx * x as f64 + phase).sin();
            for c in 0..3 {
                img[(y * n + x) * 3 + c] = base[c] + stripe + 0.04 * rng.normal();
            }
        }
    }

    let count = 1 + rng.below(3);
    let (rmin, rmax) = (n as f64 / 10.0, n as f64 / 4.0);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = 1 + rng.below(spec.classes - 1);
        let (_, shape, colour) = SHAPE_PALETTE[class - 1];
        let r = rng.uniform(rmin, rmax);
        let cy = rng.uniform(r, n as f64 - r);
        let cx = rng.uniform(r, n as f64 - r);
        shapes.push(Placement { class, centre_y: cy, centre_x: cx, radius: r });
        let tint: Vec<f64> = colour.iter().map(|&v| v + rng.uniform(-0.08, 0.08)).collect();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = match shape {
                    Shape::Square => dy.abs() <= r && dx.abs() <= r,
                    Shape::Circle => dy * dy + dx * dx <= r * r,
                };
                if inside {
                    labels[y * n + x] = class;
                    for c in 0..3 {
                        img[(y * n + x) * 3 + c] = tint[c] + 0.03 * rng.normal();
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Sample {
        image: Tensor::new(&[n, n, 3], img).expect("shape matches buffer"),
        labels,
        shapes,
    }
}

impl Sample {
    pub fn image_as<T: Scalar>(&self) -> Tensor<T> {
        self.image.cast()
    }
}
