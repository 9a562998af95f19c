//! Small 3D geometry kernel: vectors, planar-yaw poses, primitives and exact
//! closest-distance queries between segments, points, boxes and spheres.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Serialized as `[x, y, z]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T> From<[T; 3]> for Vec3<T> {
    fn from([x, y, z]: [T; 3]) -> Self {
        Self { x, y, z }
    }
}

impl<T> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<T: Serialize> Serialize for Vec3<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (&self.x, &self.y, &self.z).serialize(s)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Vec3<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (x, y, z) = <(T, T, T)>::deserialize(d)?;
        Ok(Self { x, y, z })
    }
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    pub fn lerp(self, o: Self, t: T) -> Self {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Rigid pose restricted to a position and a rotation about +z.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub position: Vec3<T>,
    pub yaw: T,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vec3<T>, yaw: T) -> Self {
        Self { position, yaw }
    }
}

/// Static obstacle primitive, all quantities in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle<T> {
    Aabb { name: String, min: Vec3<T>, max: Vec3<T> },
    Sphere { name: String, center: Vec3<T>, radius: T },
}

impl<T: Real> Obstacle<T> {
    pub fn aabb(name: impl Into<String>, min: Vec3<T>, max: Vec3<T>) -> Self {
        Obstacle::Aabb { name: name.into(), min, max }
    }

    pub fn sphere(name: impl Into<String>, center: Vec3<T>, radius: T) -> Self {
        Obstacle::Sphere { name: name.into(), center, radius }
    }

    pub fn name(&self) -> &str {
        match self {
            Obstacle::Aabb { name, .. } | Obstacle::Sphere { name, .. } => name,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            Obstacle::Aabb { min, max, .. } => {
                min.is_finite() && max.is_finite() && min.x < max.x && min.y < max.y && min.z < max.z
            }
            Obstacle::Sphere { center, radius, .. } => center.is_finite() && *radius > T::zero(),
        }
    }

    /// Distance from a point to the solid primitive (zero inside).
    pub fn point_distance(&self, p: Vec3<T>) -> T {
        match self {
            Obstacle::Aabb { min, max, .. } => point_aabb_sq_distance(p, *min, *max).sqrt(),
            Obstacle::Sphere { center, radius, .. } => (p.distance(*center) - *radius).max(T::zero()),
        }
    }

    /// Exact distance between a segment and the solid primitive (zero when touching).
    pub fn segment_distance(&self, a: Vec3<T>, b: Vec3<T>) -> T {
        match self {
            Obstacle::Aabb { min, max, .. } => segment_aabb_sq_distance(a, b, *min, *max).sqrt(),
            Obstacle::Sphere { center, radius, .. } => {
                (point_segment_distance(*center, a, b) - *radius).max(T::zero())
            }
        }
    }
}

/// Closest parameter on segment `[a, b]` to `p`, in `[0, 1]`.
pub fn closest_param_on_segment<T: Real>(p: Vec3<T>, a: Vec3<T>, b: Vec3<T>) -> T {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 <= T::epsilon() {
        return T::zero();
    }
    ((p - a).dot(d) / len2).max(T::zero()).min(T::one())
}

pub fn point_segment_distance<T: Real>(p: Vec3<T>, a: Vec3<T>, b: Vec3<T>) -> T {
    let t = closest_param_on_segment(p, a, b);
    p.distance(a.lerp(b, t))
}

/// Minimum distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_segment_distance<T: Real>(p1: Vec3<T>, q1: Vec3<T>, p2: Vec3<T>, q2: Vec3<T>) -> T {
    let zero = T::zero();
    let one = T::one();
    let eps = T::epsilon();
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(r);

    let (s, t);
    if a <= eps && e <= eps {
        return p1.distance(p2);
    }
    if a <= eps {
        s = zero;
        t = (f / e).max(zero).min(one);
    } else {
        let c = d1.dot(r);
        if e <= eps {
            t = zero;
            s = (-c / a).max(zero).min(one);
        } else {
            let b = d1.dot(d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps { ((b * f - c * e) / denom).max(zero).min(one) } else { zero };
            let mut t0 = (b * s0 + f) / e;
            if t0 < zero {
                t0 = zero;
                s0 = (-c / a).max(zero).min(one);
            } else if t0 > one {
                t0 = one;
                s0 = ((b - c) / a).max(zero).min(one);
            }
            s = s0;
            t = t0;
        }
    }
    (p1 + d1 * s).distance(p2 + d2 * t)
}

pub fn point_aabb_sq_distance<T: Real>(p: Vec3<T>, min: Vec3<T>, max: Vec3<T>) -> T {
    let mut acc = T::zero();
    for i in 0..3 {
        let v = p[i];
        if v < min[i] {
            acc = acc + (min[i] - v) * (min[i] - v);
        } else if v > max[i] {
            acc = acc + (v - max[i]) * (v - max[i]);
        }
    }
    acc
}

/// Exact squared distance between segment `[a, b]` and a box.
///
/// The squared distance is piecewise quadratic in the segment parameter with
/// breakpoints where the segment crosses a slab plane; each piece is minimized
/// in closed form.
pub fn segment_aabb_sq_distance<T: Real>(a: Vec3<T>, b: Vec3<T>, min: Vec3<T>, max: Vec3<T>) -> T {
    let zero = T::zero();
    let one = T::one();
    let two = T::lit(2.0);
    let d = b - a;
    let mut ts: Vec<T> = vec![zero, one];
    for i in 0..3 {
        if d[i] != zero {
            for bound in [min[i], max[i]] {
                let t = (bound - a[i]) / d[i];
                if t > zero && t < one {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(|x, y| x.partial_cmp(y).expect("finite breakpoints"));

    let mut best = T::infinity();
    for w in ts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = (lo + hi) / two;
        let (mut qa, mut qb, mut qc) = (zero, zero, zero);
        for i in 0..3 {
            let v = a[i] + d[i] * mid;
            let bound = if v < min[i] {
                min[i]
            } else if v > max[i] {
                max[i]
            } else {
                continue;
            };
            let e = a[i] - bound;
            qa = qa + d[i] * d[i];
            qb = qb + two * e * d[i];
            qc = qc + e * e;
        }
        let t = if qa > zero { (-qb / (two * qa)).max(lo).min(hi) } else { lo };
        let val = (qa * t * t + qb * t + qc).max(zero);
        if val < best {
            best = val;
        }
    }
    // the piecewise pattern is only sampled at midpoints; endpoints are exact anchors
    best.min(point_aabb_sq_distance(a, min, max)).min(point_aabb_sq_distance(b, min, max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3<f64> {
        Vec3::new(x, y, z)
    }

    #[test]
    fn segment_segment_parallel_and_crossing() {
        let d = segment_segment_distance(v(0., 0., 0.), v(1., 0., 0.), v(0., 1., 0.), v(1., 1., 0.));
        assert!((d - 1.0).abs() < 1e-12);
        let d = segment_segment_distance(v(-1., 0., 0.), v(1., 0., 0.), v(0., -1., 0.5), v(0., 1., 0.5));
        assert!((d - 0.5).abs() < 1e-12);
        let d = segment_segment_distance(v(0., 0., 0.), v(1., 0., 0.), v(2., 0., 0.), v(3., 0., 0.));
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segment_box_matches_dense_sampling() {
        let min = v(-0.1, -0.2, 0.0);
        let max = v(0.1, 0.2, 0.3);
        let cases = [
            (v(-1., 0., 0.5), v(1., 0., 0.5)),
            (v(-1., -1., 0.4), v(1., 1., 0.35)),
            (v(0., 0., 0.1), v(0.05, 0.05, 0.2)),
            (v(0.5, 0.5, 0.5), v(0.7, -0.3, -0.2)),
        ];
        for (a, b) in cases {
            let exact = segment_aabb_sq_distance(a, b, min, max).sqrt();
            let sampled = (0..=20_000)
                .map(|i| point_aabb_sq_distance(a.lerp(b, i as f64 / 20_000.0), min, max).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(exact <= sampled + 1e-12);
            assert!(sampled - exact < 1e-4, "exact {exact} sampled {sampled}");
        }
    }

    #[test]
    fn obstacle_validity() {
        assert!(Obstacle::aabb("w", v(0., 0., 0.), v(1., 1., 1.)).is_valid());
        assert!(!Obstacle::aabb("w", v(0., 0., 0.), v(1., 0., 1.)).is_valid());
        assert!(!Obstacle::sphere("s", v(0., 0., 0.), 0.0).is_valid());
    }

    #[test]
    fn vec3_serializes_as_array() {
        let s = serde_json::to_string(&v(1.0, 2.5, -3.0)).unwrap();
        assert_eq!(s, "[1.0,2.5,-3.0]");
    }
}
