//! Planar primitives shared by every other module.
//!
//! All coordinates are pixels with the origin at the top-left corner of the
//! frame and `y` growing downward. A pixel `(i, j)` covers the unit square
//! `[i, i + 1] x [j, j + 1]`, so its center sits at `(i + 0.5, j + 0.5)`.
//!
//! Signed areas use the plain shoelace sum. Under the y-down convention a
//! positive signed area means the vertices run clockwise on screen.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by geometric constructions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("homogeneous coordinate w is degenerate ({0:e})")]
    DegenerateW(f64),
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 2-D cross product.
    pub fn cross(self, other: Self) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        // Page coordinates never approach overflow, so skip libm's hypot.
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn distance(self, other: Self) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Self, t: f64) -> Self {
        self + (other - self) * t
    }
}

impl Add for Point2 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Self::new(x, y)
    }
}

/// Row-major 3x3 homogeneous matrix acting on column vectors `[x, y, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Default for Mat3 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_affine(a: f64, b: f64, c: f64, d: f64, tx: f64, ty: f64) -> Self {
        Mat3([[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]])
    }

    pub fn translate(tx: f64, ty: f64) -> Self {
        Self::from_affine(1.0, 0.0, 0.0, 1.0, tx, ty)
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self::from_affine(sx, 0.0, 0.0, sy, 0.0, 0.0)
    }

    /// Rotation by `deg` degrees. With y pointing down a positive angle turns
    /// clockwise on screen.
    pub fn rotate_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self::from_affine(c, -s, s, c, 0.0, 0.0)
    }

    pub fn shear_deg(shx_deg: f64, shy_deg: f64) -> Self {
        Self::from_affine(
            1.0,
            shx_deg.to_radians().tan(),
            shy_deg.to_radians().tan(),
            1.0,
            0.0,
            0.0,
        )
    }

    pub fn mul(&self, rhs: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    /// Determinant of the upper-left 2x2 block.
    pub fn linear_det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn is_affine(&self) -> bool {
        self.0[2] == [0.0, 0.0, 1.0]
    }

    pub fn apply(&self, p: Point2) -> Result<Point2, GeometryError> {
        let m = &self.0;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w.abs() < 1e-12 {
            return Err(GeometryError::DegenerateW(w));
        }
        let x = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let y = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        if w == 1.0 {
            Ok(Point2::new(x, y))
        } else {
            Ok(Point2::new(x / w, y / w))
        }
    }

    /// Affine-only application; the bottom row is assumed to be `(0, 0, 1)`.
    #[inline]
    pub fn apply_affine(&self, p: Point2) -> Point2 {
        let m = &self.0;
        Point2::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }
}

/// Product of `ms` in list order, so the last matrix acts on points first.
///
/// An empty list yields the identity.
pub fn matrix_compose(ms: &[Mat3]) -> Mat3 {
    ms.iter().fold(Mat3::IDENTITY, |acc, m| acc.mul(m))
}

pub fn apply_matrix(m: &Mat3, p: Point2) -> Result<Point2, GeometryError> {
    m.apply(p)
}

/// A simple polygon given by its ordered vertices (at least three).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for Polygon {
    type Error = GeometryError;
    fn try_from(v: Vec<Point2>) -> Result<Self, Self::Error> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point2> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if !vertices.iter().all(|p| p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle from two opposite corners, listed clockwise on
    /// screen starting at the top-left corner.
    pub fn from_corners(a: Point2, b: Point2) -> Result<Self, GeometryError> {
        let (x0, x1) = (a.x.min(b.x), a.x.max(b.x));
        let (y0, y1) = (a.y.min(b.y), a.y.max(b.y));
        Polygon::new(vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point2> {
        self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        let mut sign = 0.0f64;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            let z = (b - a).cross(c - b);
            if z.abs() <= 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = z.signum();
            } else if z.signum() != sign {
                return false;
            }
        }
        // A convex polygon winds around exactly once.
        sign != 0.0 && (n <= 3 || !has_self_crossing(self))
    }

    /// Same polygon with clockwise-on-screen orientation (positive signed area).
    pub fn oriented_cw(&self) -> Polygon {
        if self.signed_area() < 0.0 {
            let mut v = self.vertices.clone();
            v.reverse();
            Polygon { vertices: v }
        } else {
            self.clone()
        }
    }

    /// Even-odd point containment; points on the boundary may go either way.
    pub fn contains(&self, p: Point2) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Minimum distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    pub fn map<F: FnMut(Point2) -> Point2>(&self, f: F) -> Result<Polygon, GeometryError> {
        Polygon::new(self.vertices.iter().copied().map(f).collect())
    }

    /// Inserts evenly spaced vertices so that no edge is longer than `max_edge`.
    pub fn densified(&self, max_edge: f64) -> Polygon {
        if !(max_edge > 0.0) {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.vertices.len());
        for (a, b) in self.edges() {
            out.push(a);
            let steps = (a.distance(b) / max_edge).ceil() as usize;
            for k in 1..steps {
                out.push(a.lerp(b, k as f64 / steps as f64));
            }
        }
        Polygon { vertices: out }
    }
}

pub fn signed_area(pts: &[Point2]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += pts[i].cross(pts[(i + 1) % n]);
    }
    0.5 * acc
}

pub fn polygon_area(poly: &Polygon) -> f64 {
    poly.area()
}

pub fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Clips `subject` against every half-plane of the convex `clip` polygon.
///
/// The subject may be non-convex; the result then has the correct area but
/// can contain zero-width bridges along the clip boundary.
pub fn clip_polygon(subject: &[Point2], clip: &Polygon) -> Vec<Point2> {
    let clip = clip.oriented_cw();
    let mut output: Vec<Point2> = subject.to_vec();
    for (a, b) in clip.edges() {
        if output.is_empty() {
            break;
        }
        let input = std::mem::take(&mut output);
        let edge = b - a;
        // For a clockwise-on-screen clipper the interior lies where the cross
        // product is non-negative.
        let side = |p: Point2| edge.cross(p - a);
        let mut prev = *input.last().unwrap();
        let mut prev_side = side(prev);
        for &cur in &input {
            let cur_side = side(cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(intersect_at(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(intersect_at(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    output
}

fn intersect_at(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    p.lerp(q, t)
}

/// Intersection of two convex polygons, or `None` when they are disjoint or
/// only touch along a zero-area region.
pub fn convex_intersect(a: &Polygon, b: &Polygon) -> Option<Polygon> {
    let out = clip_polygon(a.vertices(), b);
    let out = dedup_ring(out);
    if out.len() < 3 || signed_area(&out).abs() <= 1e-14 * (1.0 + a.area().max(b.area())) {
        return None;
    }
    Polygon::new(out).ok()
}

fn dedup_ring(mut pts: Vec<Point2>) -> Vec<Point2> {
    pts.dedup_by(|a, b| a.distance(*b) <= 1e-12);
    while pts.len() > 1 && pts[0].distance(*pts.last().unwrap()) <= 1e-12 {
        pts.pop();
    }
    pts
}

/// Convex hull by Andrew's monotone chain. The result has positive signed
/// area (counter-clockwise in math axes, clockwise on screen).
pub fn convex_hull(points: &[Point2]) -> Result<Polygon, GeometryError> {
    if points.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(GeometryError::Degenerate("fewer than 3 distinct points"));
    }
    let turn = |o: Point2, a: Point2, b: Point2| (a - o).cross(b - o);
    let mut lower: Vec<Point2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && turn(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && turn(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        return Err(GeometryError::Degenerate("points are collinear"));
    }
    let scale = pts
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(1.0, f64::max);
    if signed_area(&lower) <= 1e-12 * scale * scale {
        return Err(GeometryError::Degenerate("points are collinear"));
    }
    Polygon::new(lower)
}

/// Minimum-area enclosing rectangle by rotating calipers over the hull edges.
///
/// The four corners are returned with positive signed area; their order is
/// otherwise unspecified (see [`crate::obb::canonical_order`]).
pub fn min_area_rect(poly: &Polygon) -> Result<Polygon, GeometryError> {
    let hull = convex_hull(poly.vertices())?;
    let hv = hull.vertices();
    let mut best: Option<(f64, [Point2; 4])> = None;
    for (a, b) in hull.edges() {
        let len = a.distance(b);
        if len <= 0.0 {
            continue;
        }
        let u = (b - a) * (1.0 / len);
        let v = Point2::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &p in hv {
            let d = p - a;
            let pu = d.dot(u);
            let pv = d.dot(v);
            umin = umin.min(pu);
            umax = umax.max(pu);
            vmin = vmin.min(pv);
            vmax = vmax.max(pv);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().is_none_or(|(ba, _)| area < *ba) {
            let corner = |s: f64, t: f64| a + u * s + v * t;
            best = Some((
                area,
                [
                    corner(umin, vmin),
                    corner(umax, vmin),
                    corner(umax, vmax),
                    corner(umin, vmax),
                ],
            ));
        }
    }
    let (_, corners) = best.ok_or(GeometryError::Degenerate("empty hull"))?;
    Ok(Polygon::new(corners.to_vec())?.oriented_cw())
}

/// True when any two non-adjacent edges cross at an interior point.
pub fn has_self_crossing(poly: &Polygon) -> bool {
    let v = poly.vertices();
    let n = v.len();
    if n < 4 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (v[i], v[(i + 1) % n]);
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_properly_intersect(a1, a2, v[j], v[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

/// True when segments `p1p2` and `q1q2` cross at a single interior point.
pub fn segments_properly_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = (p2 - p1).cross(q1 - p1);
    let d2 = (p2 - p1).cross(q2 - p1);
    let d3 = (q2 - q1).cross(p1 - q1);
    let d4 = (q2 - q1).cross(p2 - q1);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}
