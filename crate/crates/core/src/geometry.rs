//! Planar geometry: points, oriented boxes, polygons and polylines.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point2<T> {
    #[inline]
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    /// Unit vector pointing along `heading`.
    #[inline]
    pub fn from_angle(heading: T) -> Self {
        Self::new(heading.cos(), heading.sin())
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    #[inline]
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    /// Counter-clockwise perpendicular.
    #[inline]
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    #[inline]
    pub fn angle(self) -> T {
        self.y.atan2(self.x)
    }

    /// Rotates the vector by `angle` radians about the origin.
    #[inline]
    pub fn rotate(self, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl<T: Scalar> Add for Point2<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Point2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> Mul<T> for Point2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl<T: Scalar> Neg for Point2<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle<T: Scalar>(angle: T) -> T {
    let pi = T::pi();
    let two_pi = pi + pi;
    let mut a = angle % two_pi;
    if a > pi {
        a -= two_pi;
    } else if a <= -pi {
        a += two_pi;
    }
    a
}

/// Rectangle with arbitrary orientation, used as a vehicle footprint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox<T> {
    pub center: Point2<T>,
    pub half_length: T,
    pub half_width: T,
    /// Radians in (−π, π].
    pub heading: T,
}

impl<T: Scalar> OrientedBox<T> {
    pub fn new(center: Point2<T>, half_length: T, half_width: T, heading: T) -> Result<Self> {
        if !(half_length > T::zero() && half_width > T::zero()) {
            return Err(Error::invalid(format!(
                "box extents must be positive, got {half_length} x {half_width}"
            )));
        }
        Ok(Self {
            center,
            half_length,
            half_width,
            heading: wrap_angle(heading),
        })
    }

    /// Unit vectors along the box length and width.
    #[inline]
    pub fn axes(&self) -> (Point2<T>, Point2<T>) {
        let u = Point2::from_angle(self.heading);
        (u, u.perp())
    }

    /// Corners in counter-clockwise order, starting front-left.
    pub fn corners(&self) -> [Point2<T>; 4] {
        let (u, v) = self.axes();
        let l = u * self.half_length;
        let w = v * self.half_width;
        let c = self.center;
        [c + l + w, c - l + w, c - l - w, c + l - w]
    }

    /// Boundary counts as inside.
    pub fn contains(&self, p: Point2<T>) -> bool {
        let (u, v) = self.axes();
        let d = p - self.center;
        d.dot(u).abs() <= self.half_length && d.dot(v).abs() <= self.half_width
    }

    /// Radius of the circumscribed circle.
    #[inline]
    pub fn bounding_radius(&self) -> T {
        self.half_length.hypot(self.half_width)
    }

    fn project(&self, axis: Point2<T>) -> (T, T) {
        let (u, v) = self.axes();
        let c = self.center.dot(axis);
        let r = self.half_length * u.dot(axis).abs() + self.half_width * v.dot(axis).abs();
        (c - r, c + r)
    }

    pub fn translated(&self, offset: Point2<T>) -> Self {
        Self {
            center: self.center + offset,
            ..*self
        }
    }
}

/// Separating-axis test over the four face normals. Touching boxes intersect.
pub fn obb_intersects<T: Scalar>(a: &OrientedBox<T>, b: &OrientedBox<T>) -> bool {
    let (au, av) = a.axes();
    let (bu, bv) = b.axes();
    for axis in [au, av, bu, bv] {
        let (amin, amax) = a.project(axis);
        let (bmin, bmax) = b.project(axis);
        if amax < bmin || bmax < amin {
            return false;
        }
    }
    true
}

/// Even-odd point-in-polygon test; points on an edge count as inside.
///
/// `polygon` is an implicitly closed ring (the first vertex is not repeated).
pub fn point_in_polygon<T: Scalar>(p: Point2<T>, polygon: &[Point2<T>]) -> bool {
    let n = polygon.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let a = polygon[j];
        let b = polygon[i];
        if on_segment(p, a, b) {
            return true;
        }
        if (b.y > p.y) != (a.y > p.y) {
            let x_cross = b.x + (p.y - b.y) * (a.x - b.x) / (a.y - b.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn on_segment<T: Scalar>(p: Point2<T>, a: Point2<T>, b: Point2<T>) -> bool {
    let ab = b - a;
    let ap = p - a;
    if ab.cross(ap) != T::zero() {
        return false;
    }
    let t = ap.dot(ab);
    t >= T::zero() && t <= ab.norm_sq()
}

/// Twice the signed area (positive for counter-clockwise rings).
pub fn signed_area2<T: Scalar>(polygon: &[Point2<T>]) -> T {
    let n = polygon.len();
    let mut acc = T::zero();
    for i in 0..n {
        acc += polygon[i].cross(polygon[(i + 1) % n]);
    }
    acc
}

/// Checks the ring has at least three vertices and is not degenerate
/// (all points collinear). A repeated closing vertex is dropped.
pub fn validate_ring<T: Scalar>(mut ring: Vec<Point2<T>>) -> Result<Vec<Point2<T>>> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: ring.len(),
        });
    }
    let a = ring[0];
    let collinear = ring
        .windows(2)
        .all(|w| (w[0] - a).cross(w[1] - a) == T::zero());
    if collinear {
        return Err(Error::invalid("polygon vertices are collinear"));
    }
    Ok(ring)
}

/// Result of projecting a point onto a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolylineProjection<T> {
    pub segment: usize,
    /// Arc length of the foot point; negative before the start and beyond
    /// the total length past the end (the end segments extend as rays).
    pub arc_length: T,
    pub foot: Point2<T>,
    /// Signed offset, positive to the left of the travel direction.
    pub lateral: T,
    pub tangent: Point2<T>,
}

/// Open polyline with cached cumulative arc lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline<T> {
    points: Vec<Point2<T>>,
    cumulative: Vec<T>,
}

impl<T: Scalar> Polyline<T> {
    pub fn new(points: Vec<Point2<T>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InsufficientPoints {
                needed: 2,
                got: points.len(),
            });
        }
        let mut cumulative = Vec::with_capacity(points.len());
        let mut s = T::zero();
        cumulative.push(s);
        for w in points.windows(2) {
            s += w[0].distance(w[1]);
            cumulative.push(s);
        }
        if s <= T::zero() {
            return Err(Error::invalid("polyline has zero length"));
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[Point2<T>] {
        &self.points
    }

    pub fn length(&self) -> T {
        *self.cumulative.last().expect("non-empty")
    }

    fn segment_tangent(&self, i: usize) -> Option<Point2<T>> {
        let d = self.points[i + 1] - self.points[i];
        let len = d.norm();
        (len > T::zero()).then(|| d * (T::one() / len))
    }

    /// Nearest-point projection. The first and last segments are treated as
    /// rays so that points before the start or past the end get a
    /// meaningful arc length.
    pub fn project(&self, p: Point2<T>) -> PolylineProjection<T> {
        let nseg = self.points.len() - 1;
        let mut best: Option<(T, PolylineProjection<T>)> = None;
        for i in 0..nseg {
            let Some(tangent) = self.segment_tangent(i) else {
                continue;
            };
            let a = self.points[i];
            let seg_len = self.cumulative[i + 1] - self.cumulative[i];
            let mut along = (p - a).dot(tangent);
            if !(i == 0 && along < T::zero()) && !(i == nseg - 1 && along > seg_len) {
                along = along.max(T::zero()).min(seg_len);
            }
            let foot = a + tangent * along;
            let offset = p - foot;
            let dist = offset.norm();
            let cand = PolylineProjection {
                segment: i,
                arc_length: self.cumulative[i] + along,
                foot,
                lateral: tangent.cross(offset),
                tangent,
            };
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, cand));
            }
        }
        best.expect("polyline has a non-degenerate segment").1
    }

    /// Point and unit tangent at arc length `s`, extrapolating linearly
    /// beyond either end.
    pub fn point_at(&self, s: T) -> (Point2<T>, Point2<T>) {
        let nseg = self.points.len() - 1;
        let mut idx = match self.cumulative.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => nseg - 1,
        };
        idx = idx.min(nseg - 1);
        // skip zero-length segments
        let mut i = idx;
        while self.segment_tangent(i).is_none() && i + 1 < nseg {
            i += 1;
        }
        while self.segment_tangent(i).is_none() && i > 0 {
            i -= 1;
        }
        let tangent = self.segment_tangent(i).expect("non-degenerate polyline");
        let p = self.points[i] + tangent * (s - self.cumulative[i]);
        (p, tangent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-FRAC_PI_2 - 2.0 * PI) + FRAC_PI_2).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25f32), 0.25f32);
    }

    #[test]
    fn box_rejects_nonpositive_extents() {
        assert!(OrientedBox::new(Point2::new(0.0, 0.0), 0.0, 1.0, 0.0).is_err());
        assert!(OrientedBox::new(Point2::new(0.0, 0.0), 1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn obb_basic_cases() {
        let a = OrientedBox::new(Point2::new(0.0, 0.0), 0.5, 0.5, 0.0).unwrap();
        assert!(obb_intersects(&a, &a));
        let b = a.translated(Point2::new(100.0, 0.0));
        assert!(!obb_intersects(&a, &b));
        // exactly touching along x
        let c = a.translated(Point2::new(1.0, 0.0));
        assert!(obb_intersects(&a, &c));
    }

    #[test]
    fn obb_works_in_f32() {
        let a = OrientedBox::new(Point2::new(0.0f32, 0.0), 2.0, 1.0, 0.0).unwrap();
        let b = OrientedBox::new(Point2::new(3.0f32, 0.0), 2.0, 1.0, 0.785).unwrap();
        let far = OrientedBox::new(Point2::new(30.0f32, 0.0), 2.0, 1.0, 0.785).unwrap();
        assert!(obb_intersects(&a, &b));
        assert!(!obb_intersects(&a, &far));
    }

    #[test]
    fn polygon_boundary_is_inside() {
        let sq = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ];
        assert!(point_in_polygon(Point2::new(0.5, 0.5), &sq));
        assert!(point_in_polygon(Point2::new(1.0, 0.5), &sq));
        assert!(point_in_polygon(Point2::new(0.0, 0.0), &sq));
        assert!(!point_in_polygon(Point2::new(1.0 + 1e-9, 0.5), &sq));
        assert!(!point_in_polygon(Point2::new(1000.0, 0.5), &sq));
    }

    #[test]
    fn ring_validation() {
        let closed = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.0, 0.0),
        ];
        assert_eq!(validate_ring(closed).unwrap().len(), 3);
        let line = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(2.0, 2.0),
        ];
        assert!(validate_ring(line).is_err());
        assert!(validate_ring(vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]).is_err());
    }

    #[test]
    fn polyline_projection_and_extrapolation() {
        let pl = Polyline::new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(10.0, 10.0),
        ])
        .unwrap();
        assert_eq!(pl.length(), 20.0);
        let pr = pl.project(Point2::new(4.0, 1.5));
        assert_eq!(pr.arc_length, 4.0);
        assert_eq!(pr.lateral, 1.5);
        let before = pl.project(Point2::new(-3.0, -0.5));
        assert_eq!(before.arc_length, -3.0);
        assert_eq!(before.lateral, -0.5);
        let after = pl.project(Point2::new(10.0, 14.0));
        assert_eq!(after.arc_length, 24.0);
        let (p, t) = pl.point_at(15.0);
        assert_eq!(p, Point2::new(10.0, 5.0));
        assert_eq!(t, Point2::new(0.0, 1.0));
        let (p, _) = pl.point_at(-2.0);
        assert_eq!(p, Point2::new(-2.0, 0.0));
        let (p, _) = pl.point_at(22.0);
        assert_eq!(p, Point2::new(10.0, 12.0));
        assert!(Polyline::new(vec![Point2::new(1.0, 1.0)]).is_err());
    }
}
