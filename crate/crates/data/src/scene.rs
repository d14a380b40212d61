//! Procedural toy scenes: colored shapes on textured backgrounds.
//!
//! Each scene carries the metadata needed to caption it, so the whole
//! pipeline can be exercised without downloading any dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::ImageTensor;

pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.12]),
    ("orange", [0.95, 0.55, 0.10]),
    ("yellow", [0.95, 0.88, 0.20]),
    ("green", [0.20, 0.70, 0.25]),
    ("blue", [0.15, 0.30, 0.85]),
    ("purple", [0.55, 0.20, 0.70]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "ring"];

pub const BACKGROUND_COLORS: [(&str, [f32; 3]); 5] = [
    ("gray", [0.50, 0.50, 0.50]),
    ("beige", [0.80, 0.72, 0.58]),
    ("teal", [0.20, 0.50, 0.50]),
    ("brown", [0.45, 0.30, 0.18]),
    ("pink", [0.90, 0.65, 0.70]),
];

pub const TEXTURES: [&str; 4] = ["plain", "striped", "checkered", "dotted"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: String,
    pub shape: String,
    /// Center and half-size, as fractions of the image side.
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub color: String,
    pub texture: String,
    /// Texture period as a fraction of the image side.
    pub period: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub id: String,
    pub background: Background,
    pub objects: Vec<SceneObject>,
}

fn color_rgb(name: &str) -> [f32; 3] {
    COLORS
        .iter()
        .chain(BACKGROUND_COLORS.iter())
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .unwrap_or([0.5, 0.5, 0.5])
}

impl ToyScene {
    /// Samples a scene with one to three objects.
    pub fn random(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bg_color, _) = BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())];
        let texture = TEXTURES[rng.random_range(0..TEXTURES.len())];
        let count = rng.random_range(1..=3);
        let objects = (0..count)
            .map(|_| SceneObject {
                color: COLORS[rng.random_range(0..COLORS.len())].0.to_string(),
                shape: SHAPES[rng.random_range(0..SHAPES.len())].to_string(),
                cx: rng.random_range(0.2..0.8),
                cy: rng.random_range(0.2..0.8),
                size: rng.random_range(0.1..0.22),
            })
            .collect();
        Self {
            id: id.into(),
            background: Background {
                color: bg_color.to_string(),
                texture: texture.to_string(),
                period: rng.random_range(0.08..0.2),
            },
            objects,
        }
    }

    /// Object phrase used by captions, e.g. `a red circle and a blue ring`.
    pub fn object_phrase(&self) -> Vec<(String, String)> {
        self.objects
            .iter()
            .map(|o| (o.color.clone(), o.shape.clone()))
            .collect()
    }

    pub fn render(&self, height: usize, width: usize) -> Result<ImageTensor> {
        let bg = color_rgb(&self.background.color);
        let side = height.min(width) as f32;
        let period = (self.background.period * side).max(2.0);
        let texture = self.background.texture.as_str();
        let objects: Vec<([f32; 3], &SceneObject)> = self.objects.iter().map(|o| (color_rgb(&o.color), o)).collect();
        ImageTensor::from_fn(height, width, |y, x, c| {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let shade = match texture {
                "striped" => {
                    if ((fx + fy) / period).floor() as i64 % 2 == 0 {
                        0.12
                    } else {
                        -0.12
                    }
                }
                "checkered" => {
                    let k = (fx / period).floor() as i64 + (fy / period).floor() as i64;
                    if k.rem_euclid(2) == 0 {
                        0.1
                    } else {
                        -0.1
                    }
                }
                "dotted" => {
                    let (dx, dy) = ((fx % period) - period / 2.0, (fy % period) - period / 2.0);
                    if dx * dx + dy * dy < (period * 0.25).powi(2) {
                        0.18
                    } else {
                        0.0
                    }
                }
                _ => 0.04 * ((fx * 0.3).sin() * (fy * 0.23).cos()),
            };
            let mut value = bg[c] + shade;
            for (rgb, o) in &objects {
                let (ox, oy, r) = (o.cx * width as f32, o.cy * height as f32, o.size * side);
                let (dx, dy) = (fx - ox, fy - oy);
                let inside = match o.shape.as_str() {
                    "circle" => dx * dx + dy * dy <= r * r,
                    "square" => dx.abs() <= r && dy.abs() <= r,
                    "triangle" => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
                    "ring" => {
                        let d2 = dx * dx + dy * dy;
                        d2 <= r * r && d2 >= (0.55 * r).powi(2)
                    }
                    _ => false,
                };
                if inside {
                    // mild shading so objects are not perfectly flat
                    value = rgb[c] * (1.0 - 0.15 * (dy / r.max(1.0)).clamp(-1.0, 1.0));
                }
            }
            value
        })
    }
}
