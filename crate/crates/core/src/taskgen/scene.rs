//! Scene objects and the exact geometric predicates used by the rules.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Side length of a square of area pi is sqrt(pi); half of it.
pub const SQUARE_HALF: f64 = 0.886_226_925_452_758;
/// Circumradius of an equilateral triangle of area pi.
pub const TRIANGLE_R: f64 = 1.555_120_301_556_214;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Polygon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Polygon];
}

/// Outline in a local frame where every shape has area pi, so `size` is the
/// radius of the disc with the same area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    /// Simple star-shaped polygon, vertices counter-clockwise.
    Polygon(Vec<[f64; 2]>),
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Circle => ShapeKind::Circle,
            Shape::Square => ShapeKind::Square,
            Shape::Triangle => ShapeKind::Triangle,
            Shape::Polygon(_) => ShapeKind::Polygon,
        }
    }

    pub fn sample<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> Self {
        match kind {
            ShapeKind::Circle => Shape::Circle,
            ShapeKind::Square => Shape::Square,
            ShapeKind::Triangle => Shape::Triangle,
            ShapeKind::Polygon => Shape::random_polygon(rng),
        }
    }

    /// Random star-shaped polygon with 5 to 7 vertices.
    pub fn random_polygon<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let k = rng.gen_range(5..=7);
        let step = TAU / k as f64;
        let pts: Vec<[f64; 2]> = (0..k)
            .map(|i| {
                let angle = step * (i as f64 + rng.gen_range(-0.3..0.3));
                let r = rng.gen_range(0.6..1.0);
                [r * angle.cos(), r * angle.sin()]
            })
            .collect();
        let area = polygon_area(&pts);
        let scale = (PI / area).sqrt();
        Shape::Polygon(pts.into_iter().map(|[x, y]| [x * scale, y * scale]).collect())
    }

    /// Vertices in the local frame; `None` for the circle.
    pub fn vertices(&self) -> Option<Vec<[f64; 2]>> {
        match self {
            Shape::Circle => None,
            Shape::Square => {
                let a = SQUARE_HALF;
                Some(vec![[a, a], [-a, a], [-a, -a], [a, -a]])
            }
            Shape::Triangle => Some(
                (0..3)
                    .map(|i| {
                        let t = FRAC_PI_2 + TAU * i as f64 / 3.0;
                        [TRIANGLE_R * t.cos(), TRIANGLE_R * t.sin()]
                    })
                    .collect(),
            ),
            Shape::Polygon(v) => Some(v.clone()),
        }
    }

    /// Circumradius in the local frame.
    pub fn circumradius(&self) -> f64 {
        match self {
            Shape::Circle => 1.0,
            Shape::Square => SQUARE_HALF * std::f64::consts::SQRT_2,
            Shape::Triangle => TRIANGLE_R,
            Shape::Polygon(v) => v.iter().map(|[x, y]| x.hypot(*y)).fold(0.0, f64::max),
        }
    }

    /// Inscribed-circle radius in the local frame (containers only).
    pub fn inradius(&self) -> Option<f64> {
        match self {
            Shape::Circle => Some(1.0),
            Shape::Square => Some(SQUARE_HALF),
            _ => None,
        }
    }

    /// Rotation period of the outline's symmetry group.
    pub fn symmetry_period(&self) -> Option<f64> {
        match self {
            Shape::Circle => Some(0.0),
            Shape::Square => Some(FRAC_PI_2),
            Shape::Triangle => Some(TAU / 3.0),
            Shape::Polygon(_) => None,
        }
    }
}

pub fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let [x0, y0] = pts[i];
            let [x1, y1] = pts[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        .abs()
        * 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Canvas fraction, x to the right and y downwards.
    pub center: [f64; 2],
    /// Equal-area disc radius as a canvas fraction.
    pub size: f64,
    /// Radians in `[0, 2pi)`.
    pub rotation: f64,
    /// Mirror about the local vertical axis, applied before rotation.
    pub flip: bool,
    pub color: [u8; 3],
}

impl SceneObject {
    pub fn radius(&self) -> f64 {
        self.size * self.shape.circumradius()
    }

    /// World point to the object's local frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let dx = (p[0] - self.center[0]) / self.size;
        let dy = (p[1] - self.center[1]) / self.size;
        let rot = self.render_rotation();
        let (s, c) = rot.sin_cos();
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        if self.flip {
            [-lx, ly]
        } else {
            [lx, ly]
        }
    }

    /// Rotation reduced modulo the outline's symmetry, so symmetric rotations
    /// rasterize identically.
    pub fn render_rotation(&self) -> f64 {
        match self.shape.symmetry_period() {
            Some(p) if p == 0.0 => 0.0,
            Some(p) => {
                let r = self.rotation.rem_euclid(p);
                if (p - r) < 1e-9 || r < 1e-9 {
                    0.0
                } else {
                    r
                }
            }
            None => self.rotation,
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [x, y] = self.to_local(p);
        match self.shape.vertices() {
            None => x * x + y * y <= 1.0,
            Some(v) => point_in_polygon(&v, [x, y]),
        }
    }
}

/// Crossing-number test.
pub fn point_in_polygon(v: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (v[i][0], v[i][1]);
        let (xj, yj) = (v[j][0], v[j][1]);
        if (yi > p[1]) != (yj > p[1]) && p[0] < (xj - xi) * (p[1] - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Circumscribed circles intersect or come closer than `gap`.
pub fn overlaps(a: &SceneObject, b: &SceneObject, gap: f64) -> bool {
    distance(a.center, b.center) < a.radius() + b.radius() + gap
}

/// `inner` lies within the inscribed circle of `outer`.
pub fn is_inside(outer: &SceneObject, inner: &SceneObject) -> bool {
    match outer.shape.inradius() {
        Some(ir) => distance(outer.center, inner.center) + inner.radius() <= ir * outer.size,
        None => false,
    }
}

pub const CONTACT_TOLERANCE: f64 = 1e-9;

/// Two discs touching at exactly one point.
pub fn in_contact(a: &SceneObject, b: &SceneObject) -> bool {
    matches!((&a.shape, &b.shape), (Shape::Circle, Shape::Circle))
        && (distance(a.center, b.center) - (a.size + b.size)).abs() <= CONTACT_TOLERANCE
}

/// Smallest angle between two rotations.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}
