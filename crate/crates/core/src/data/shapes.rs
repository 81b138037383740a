//! Silhouette families used as synthetic object classes.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Ellipse,
    Rectangle,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Star,
    Crescent,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Ellipse,
        ShapeClass::Rectangle,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::Diamond,
        ShapeClass::Star,
        ShapeClass::Crescent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Rectangle => "rectangle",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::Diamond => "diamond",
            ShapeClass::Star => "star",
            ShapeClass::Crescent => "crescent",
        }
    }

    /// Stable integer id used as `class_id` throughout.
    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::config(format!("unknown shape class `{name}`")))
    }

    /// Whether the family is stretched by the sample's aspect ratio.
    fn uses_aspect(self) -> bool {
        matches!(
            self,
            ShapeClass::Ellipse | ShapeClass::Rectangle | ShapeClass::Diamond
        )
    }

    /// Whether the family is drawn rotated.
    fn uses_rotation(self) -> bool {
        !matches!(self, ShapeClass::Rectangle)
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Placement of one object. Coordinates are in pixels; pixel `(x, y)` has
/// its centre at `(x + 0.5, y + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub aspect: f64,
    pub angle: f64,
}

impl ShapeParams {
    /// Radius of a disc around the centre that contains the whole silhouette.
    pub fn extent(&self) -> f64 {
        match self.class {
            ShapeClass::Rectangle => {
                let (a, b) = self.rect_half_extents();
                (a * a + b * b).sqrt()
            }
            _ => 1.1 * self.radius,
        }
    }

    /// Half extents of the axis-aligned rectangle family.
    pub fn rect_half_extents(&self) -> (f64, f64) {
        (self.radius.round(), (self.radius * self.aspect).round())
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let (u, v) = if self.class.uses_rotation() {
            let (s, c) = self.angle.sin_cos();
            (c * dx + s * dy, -s * dx + c * dy)
        } else {
            (dx, dy)
        };
        let r = self.radius;
        let b = if self.class.uses_aspect() {
            r * self.aspect
        } else {
            r
        };
        match self.class {
            ShapeClass::Ellipse => (u / r).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeClass::Rectangle => {
                let (ha, hb) = self.rect_half_extents();
                u.abs() <= ha && v.abs() <= hb
            }
            ShapeClass::Diamond => u.abs() / r + v.abs() / b <= 1.0,
            ShapeClass::Cross => {
                let t = r / 3.0;
                (u.abs() <= r && v.abs() <= t) || (u.abs() <= t && v.abs() <= r)
            }
            ShapeClass::Ring => {
                let d = (u * u + v * v).sqrt();
                d <= r && d >= 0.5 * r
            }
            ShapeClass::Triangle => {
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|i| {
                        let a = -PI / 2.0 + i as f64 * 2.0 * PI / 3.0;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                point_in_polygon(u, v, &verts)
            }
            ShapeClass::Star => {
                let verts: Vec<(f64, f64)> = (0..10)
                    .map(|i| {
                        let a = -PI / 2.0 + i as f64 * PI / 5.0;
                        let rr = if i % 2 == 0 { r } else { 0.5 * r };
                        (rr * a.cos(), rr * a.sin())
                    })
                    .collect();
                point_in_polygon(u, v, &verts)
            }
            ShapeClass::Crescent => {
                let outer = u * u + v * v <= r * r;
                let (ox, r2) = (0.5 * r, 0.75 * r);
                let inner = (u - ox).powi(2) + v * v <= r2 * r2;
                outer && !inner
            }
        }
    }

    /// Binary `[h, w]` occupancy, row-major.
    pub fn rasterize(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    out[y * w + x] = 1.0;
                }
            }
        }
        out
    }
}

/// Even-odd rule.
fn point_in_polygon(x: f64, y: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_ids_are_stable() {
        for (i, c) in ShapeClass::ALL.iter().enumerate() {
            assert_eq!(ShapeClass::from_name(c.name()).unwrap(), *c);
            assert_eq!(c.id(), i);
        }
        assert!(matches!(
            ShapeClass::from_name("hexagon"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn axis_aligned_rectangle_pixel_count_is_exact() {
        let p = ShapeParams {
            class: ShapeClass::Rectangle,
            cx: 32.0,
            cy: 30.0,
            radius: 10.0,
            aspect: 0.7,
            angle: 1.0,
        };
        let count: f64 = p.rasterize(64, 64).iter().sum();
        assert_eq!(count, 4.0 * 10.0 * 7.0);
    }

    #[test]
    fn silhouettes_stay_within_extent() {
        for class in ShapeClass::ALL {
            let p = ShapeParams {
                class,
                cx: 32.0,
                cy: 32.0,
                radius: 12.0,
                aspect: 0.8,
                angle: 0.4,
            };
            let m = p.rasterize(64, 64);
            assert!(m.iter().sum::<f64>() > 0.0, "{class} is empty");
            for y in 0..64 {
                for x in 0..64 {
                    if m[y * 64 + x] > 0.0 {
                        let d = ((x as f64 + 0.5 - 32.0).powi(2) + (y as f64 + 0.5 - 32.0).powi(2))
                            .sqrt();
                        assert!(d <= p.extent(), "{class} leaks outside its extent");
                    }
                }
            }
        }
    }
}
