//! Oriented 3D boxes, rotated-rectangle intersection and IoU.
//!
//! Frame convention: x forward, y left, z up. `z` is the box *center*, so the
//! vertical extent of a box is `[z - h/2, z + h/2]`. The footprint is an
//! `l x w` rectangle rotated by `theta` about the vertical axis, with `l`
//! running along the heading direction.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box size must be positive, got h={h}, w={w}, l={l}")]
    NonPositiveSize { h: f64, w: f64, l: f64 },
    #[error("box field `{field}` is not finite ({value})")]
    NonFinite { field: &'static str, value: f64 },
    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),
}

/// Wraps an angle into `(-pi, pi]`.
///
/// Values already inside the interval are returned unchanged, bit for bit.
pub fn normalize_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let wrapped = angle.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// A 7-parameter oriented 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub theta: f64,
}

impl Box3D {
    /// Validating constructor. `theta` is wrapped into `(-pi, pi]`.
    pub fn new(
        center: [f64; 3],
        size_hwl: [f64; 3],
        theta: f64,
    ) -> Result<Self, GeometryError> {
        let [x, y, z] = center;
        let [h, w, l] = size_hwl;
        for (field, value) in [
            ("x", x),
            ("y", y),
            ("z", z),
            ("h", h),
            ("w", w),
            ("l", l),
            ("theta", theta),
        ] {
            if !value.is_finite() {
                return Err(GeometryError::NonFinite { field, value });
            }
        }
        if h <= 0.0 || w <= 0.0 || l <= 0.0 {
            return Err(GeometryError::NonPositiveSize { h, w, l });
        }
        Ok(Self {
            x,
            y,
            z,
            h,
            w,
            l,
            theta: normalize_angle(theta),
        })
    }

    /// Axis-aligned unit cube centered at the origin.
    pub fn unit() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            h: 1.0,
            w: 1.0,
            l: 1.0,
            theta: 0.0,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// `(x, y, z, h, w, l, theta)` in that order.
    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.h, self.w, self.l, self.theta]
    }

    pub fn from_array(v: [f64; 7]) -> Result<Self, GeometryError> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    fn bottom(&self) -> f64 {
        self.z - 0.5 * self.h
    }

    fn top(&self) -> f64 {
        self.z + 0.5 * self.h
    }

    /// Length of the overlap of the two vertical extents (0 when disjoint).
    pub fn vertical_overlap(&self, other: &Box3D) -> f64 {
        (self.top().min(other.top()) - self.bottom().max(other.bottom())).max(0.0)
    }

    /// Reflection across the x axis (the `y -> -y` augmentation).
    pub fn flip_x(&self) -> Box3D {
        Box3D {
            y: -self.y,
            theta: normalize_angle(-self.theta),
            ..*self
        }
    }

    /// Rotation of the whole box about the vertical axis through the origin.
    pub fn rotate_z(&self, phi: f64) -> Box3D {
        let (s, c) = phi.sin_cos();
        Box3D {
            x: self.x * c - self.y * s,
            y: self.x * s + self.y * c,
            theta: normalize_angle(self.theta + phi),
            ..*self
        }
    }

    /// Uniform scaling about the origin; heading is unchanged.
    pub fn scale(&self, s: f64) -> Result<Box3D, GeometryError> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(GeometryError::NonPositiveScale(s));
        }
        Ok(Box3D {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
            h: self.h * s,
            w: self.w * s,
            l: self.l * s,
            theta: self.theta,
        })
    }

    /// Total order over the raw fields, used to make pairwise computations
    /// independent of argument order.
    fn total_cmp(&self, other: &Box3D) -> Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl TryFrom<[f64; 7]> for Box3D {
    type Error = GeometryError;

    fn try_from(v: [f64; 7]) -> Result<Self, Self::Error> {
        Box3D::from_array(v)
    }
}

impl From<Box3D> for [f64; 7] {
    fn from(b: Box3D) -> Self {
        b.to_array()
    }
}

/// Convex polygon with counter-clockwise vertices. May be empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polygon2D {
    vertices: Vec<[f64; 2]>,
}

impl Polygon2D {
    /// Wraps vertices that the caller guarantees are convex and CCW.
    pub fn from_ccw(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Shoelace area; non-negative for CCW input.
    pub fn area(&self) -> f64 {
        shoelace(&self.vertices).max(0.0)
    }

    /// True when every consecutive triple turns left (collinear allowed).
    pub fn is_convex_ccw(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return n == 0;
        }
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            cross(a, b, c) >= 0.0
        }) && shoelace(&self.vertices) > 0.0
    }
}

fn shoelace(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let [x0, y0] = vertices[i];
        let [x1, y1] = vertices[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice
}

/// z-component of `(b - a) x (p - a)`; positive when `p` is left of `a -> b`.
#[inline]
fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Footprint corners in counter-clockwise order.
pub fn bev_corners(b: &Box3D) -> Polygon2D {
    let (s, c) = b.theta.sin_cos();
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]];
    let vertices = local
        .iter()
        .map(|&[u, v]| [b.x + u * c - v * s, b.y + u * s + v * c])
        .collect();
    Polygon2D::from_ccw(vertices)
}

/// Keeps the part of `poly` left of the directed line `a -> b`.
fn clip_half_plane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 2);
    for i in 0..n {
        let s = poly[(i + n - 1) % n];
        let e = poly[i];
        let ds = cross(a, b, s);
        let de = cross(a, b, e);
        let s_in = ds >= 0.0;
        let e_in = de >= 0.0;
        if e_in {
            if !s_in {
                out.push(lerp(s, e, ds / (ds - de)));
            }
            out.push(e);
        } else if s_in {
            out.push(lerp(s, e, ds / (ds - de)));
        }
    }
    out
}

#[inline]
fn lerp(s: [f64; 2], e: [f64; 2], t: f64) -> [f64; 2] {
    [s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]
}

/// Sutherland-Hodgman intersection of two convex CCW polygons.
pub fn convex_intersection(a: &Polygon2D, b: &Polygon2D) -> Polygon2D {
    if a.is_empty() || b.is_empty() {
        return Polygon2D::empty();
    }
    let clip = b.vertices();
    let mut current = a.vertices().to_vec();
    for i in 0..clip.len() {
        current = clip_half_plane(&current, clip[i], clip[(i + 1) % clip.len()]);
        if current.len() < 3 {
            return Polygon2D::empty();
        }
    }
    Polygon2D::from_ccw(current)
}

/// Area of `a ∩ b` for convex CCW polygons.
pub fn convex_intersection_area(a: &Polygon2D, b: &Polygon2D) -> f64 {
    let area = convex_intersection(a, b).area();
    // Clipping cannot create area; guard against last-bit noise.
    area.min(a.area()).min(b.area())
}

fn bev_disjoint_by_bound(a: &Box3D, b: &Box3D) -> bool {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let reach = 0.5 * (a.l.hypot(a.w) + b.l.hypot(b.w));
    dx * dx + dy * dy > reach * reach
}

/// Footprint intersection area, computed in an argument-order independent way.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    if bev_disjoint_by_bound(a, b) {
        return 0.0;
    }
    let (first, second) = match a.total_cmp(b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    convex_intersection_area(&bev_corners(first), &bev_corners(second))
}

/// Bird's-eye-view IoU of the two footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let overlap_h = a.vertical_overlap(b);
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}
