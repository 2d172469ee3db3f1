//! Scene description and bounded rejection sampling of object layouts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SynthError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    Pink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::Pink,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::Pink => "pink",
        }
    }

    /// 8-bit RGB, all far from the grey background.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 190, 50],
            Color::Blue => [30, 60, 220],
            Color::Yellow => [240, 225, 30],
            Color::Purple => [150, 50, 200],
            Color::Orange => [250, 140, 0],
            Color::Cyan => [30, 215, 225],
            Color::Pink => [250, 130, 190],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// One object; `cx`, `cy` are pixel coordinates of the centre, `radius` the
/// half-extent of its bounding square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Object {
    pub fn bbox_gap(&self, other: &Object) -> f64 {
        let dx = (self.cx - other.cx).abs() - self.radius - other.radius;
        let dy = (self.cy - other.cy).abs() - self.radius - other.radius;
        dx.max(dy)
    }

    pub fn distance(&self, other: &Object) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
    /// Bounding squares are pairwise disjoint, so no object hides another.
    pub occlusion_free: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub small_radius: f64,
    pub large_radius: f64,
    /// Minimum distance between object centres.
    pub min_separation: f64,
    /// Minimum empty gap between bounding squares, in pixels.
    pub gap: f64,
    /// Positional difference needed before a spatial word applies.
    pub spatial_margin: f64,
    /// Bound on rejection-sampling attempts.
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 2,
            max_objects: 5,
            small_radius: 5.0,
            large_radius: 9.0,
            min_separation: 12.0,
            gap: 1.0,
            spatial_margin: 4.0,
            max_attempts: 1000,
        }
    }
}

impl SynthConfig {
    pub fn radius(&self, size: Size) -> f64 {
        match size {
            Size::Small => self.small_radius,
            Size::Large => self.large_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(SynthError::Config(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.small_radius >= 1.0 && self.large_radius > self.small_radius) {
            return Err(SynthError::Config(
                "need 1 <= small_radius < large_radius".into(),
            ));
        }
        if 2.0 * self.large_radius + 2.0 > self.image_size as f64 {
            return Err(SynthError::Config(
                "large objects do not fit in the image".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(SynthError::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Samples 2–5 (configurable) non-overlapping objects. Placement uses
/// rejection sampling bounded by `max_attempts` draws per scene.
pub fn generate_scene<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rejected = 0usize;
    'scene: for _ in 0..cfg.max_attempts {
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut objects: Vec<Object> = Vec::with_capacity(n);
        while objects.len() < n {
            if rejected >= cfg.max_attempts {
                break 'scene;
            }
            let size = Size::ALL[rng.random_range(0..2)];
            let radius = cfg.radius(size);
            let lo = radius;
            let hi = cfg.image_size as f64 - radius;
            let obj = Object {
                shape: Shape::ALL[rng.random_range(0..3)],
                color: Color::ALL[rng.random_range(0..8)],
                size,
                cx: rng.random_range(lo as i64..=hi as i64) as f64,
                cy: rng.random_range(lo as i64..=hi as i64) as f64,
                radius,
            };
            let fits = objects
                .iter()
                .all(|o| o.bbox_gap(&obj) >= cfg.gap && o.distance(&obj) >= cfg.min_separation);
            if fits {
                objects.push(obj);
            } else {
                rejected += 1;
                if rejected.is_multiple_of(50) {
                    // Restart with a fresh object count rather than packing forever.
                    continue 'scene;
                }
            }
        }
        return Ok(SceneSpec {
            objects,
            occlusion_free: true,
        });
    }
    Err(SynthError::Unsatisfiable {
        attempts: cfg.max_attempts,
        detail: format!(
            "{}..={} objects of radius up to {} with separation {} in a {}px image",
            cfg.min_objects, cfg.max_objects, cfg.large_radius, cfg.min_separation, cfg.image_size
        ),
    })
}
