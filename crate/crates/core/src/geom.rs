//! Planar geometry shared by the simulator, sensors and planners.
//!
//! World frame is right-handed: x east, y north, headings counter-clockwise
//! from +x. The ego frame has x forward and y to the left.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

/// 2D vector; serialized as a two-element `[x, y]` array.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            Vec2::ZERO
        }
    }

    /// Counter-clockwise rotation by `theta`.
    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Unit normal pointing to the right of this direction.
    pub fn right_normal(self) -> Vec2 {
        Vec2::new(self.y, -self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Planar pose: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Self { position, heading }
    }

    pub fn to_ego(&self, world: Vec2) -> Vec2 {
        (world - self.position).rotate(-self.heading)
    }

    pub fn to_world(&self, ego: Vec2) -> Vec2 {
        ego.rotate(self.heading) + self.position
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::from_angle(self.heading)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Closest point on segment `[a, b]` to `p`, with the segment parameter in [0, 1].
pub fn closest_on_segment(p: Vec2, a: Vec2, b: Vec2) -> (Vec2, f64) {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return (a, 0.0);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    (a + ab * t, t)
}

/// Oriented rectangle used for collision tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub center: Vec2,
    pub heading: f64,
    pub half_extents: Vec2,
}

impl Obb {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_angle(self.heading) * self.half_extents.x;
        let l = Vec2::from_angle(self.heading + std::f64::consts::FRAC_PI_2) * self.half_extents.y;
        [
            self.center + f + l,
            self.center + f - l,
            self.center - f - l,
            self.center - f + l,
        ]
    }

    /// Separating-axis overlap test.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            Vec2::from_angle(self.heading),
            Vec2::from_angle(self.heading + std::f64::consts::FRAC_PI_2),
            Vec2::from_angle(other.heading),
            Vec2::from_angle(other.heading + std::f64::consts::FRAC_PI_2),
        ];
        for axis in axes {
            let (amin, amax) = project(&a, axis);
            let (bmin, bmax) = project(&b, axis);
            if amax < bmin || bmax < amin {
                return false;
            }
        }
        true
    }

    /// Distance along the ray `origin + t*dir` (unit `dir`) to the first hit, if any.
    pub fn ray_hit(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        // Slab test in the box frame.
        let o = (origin - self.center).rotate(-self.heading);
        let d = dir.rotate(-self.heading);
        let mut t_min = f64::NEG_INFINITY;
        let mut t_max = f64::INFINITY;
        for (oc, dc, h) in [(o.x, d.x, self.half_extents.x), (o.y, d.y, self.half_extents.y)] {
            if dc.abs() < 1e-12 {
                if oc.abs() > h {
                    return None;
                }
            } else {
                let t1 = (-h - oc) / dc;
                let t2 = (h - oc) / dc;
                t_min = t_min.max(t1.min(t2));
                t_max = t_max.min(t1.max(t2));
            }
        }
        if t_max < t_min.max(0.0) {
            None
        } else {
            Some(t_min.max(0.0))
        }
    }
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let v = p.dot(axis);
        (lo.min(v), hi.max(v))
    })
}

/// Polyline with cumulative arc lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Vec2>,
    #[serde(skip)]
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                acc += p.dist(points[i - 1]);
            }
            cum.push(acc);
        }
        Self { points, cum }
    }

    /// Rebuilds cached arc lengths after deserialization.
    pub fn rebuild(&mut self) {
        *self = Polyline::new(std::mem::take(&mut self.points));
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cum
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point and unit tangent at arc length `s` (clamped).
    pub fn sample(&self, s: f64) -> (Vec2, Vec2) {
        let n = self.points.len();
        if n == 0 {
            return (Vec2::ZERO, Vec2::new(1.0, 0.0));
        }
        if n == 1 {
            return (self.points[0], Vec2::new(1.0, 0.0));
        }
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let a = self.points[i];
        let b = self.points[i + 1];
        (a.lerp(b, t), (b - a).normalized())
    }

    /// Nearest point over segments `[lo, hi)`: returns (arc length, distance).
    pub fn project_range(&self, p: Vec2, lo: usize, hi: usize) -> (f64, f64) {
        if self.points.len() == 1 {
            return (0.0, p.dist(self.points[0]));
        }
        let mut best = (0.0, f64::INFINITY);
        for i in lo..hi.min(self.points.len() - 1) {
            let a = self.points[i];
            let b = self.points[i + 1];
            let (q, t) = closest_on_segment(p, a, b);
            let d = p.dist(q);
            if d < best.1 {
                best = (self.cum[i] + t * (self.cum[i + 1] - self.cum[i]), d);
            }
        }
        best
    }

    pub fn project(&self, p: Vec2) -> (f64, f64) {
        self.project_range(p, 0, self.points.len())
    }

    /// Segment index containing arc length `s`.
    pub fn segment_at(&self, s: f64) -> usize {
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }
}

/// Resamples a dense curve at (at most) `spacing` metres, keeping both endpoints.
pub fn resample(points: &[Vec2], spacing: f64) -> Vec<Vec2> {
    let line = Polyline::new(points.to_vec());
    let len = line.length();
    if len == 0.0 {
        return vec![points[0]];
    }
    let n = (len / spacing).ceil().max(1.0) as usize;
    let full = (len / spacing).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=full {
        out.push(line.sample(k as f64 * spacing).0);
    }
    let last = *points.last().unwrap();
    if out.last().unwrap().dist(last) > 1e-6 {
        out.push(last);
    } else {
        *out.last_mut().unwrap() = last;
    }
    out
}
