//! Simplified articulated arms: a base yaw joint followed by three pitch
//! joints, four capsule links, position-only damped least squares IK, and
//! capsule collision checks over the composite configuration of all arms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{segment_segment_distance, Obstacle, Pose, Vec3};
use crate::scalar::Real;

pub const DOF: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("arm {arm}: joint {joint} value {value} outside [{lo}, {hi}]")]
    OutOfLimits { arm: String, joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("invalid arm model {arm}: {reason}")]
    InvalidModel { arm: String, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error("target ({:.3}, {:.3}, {:.3}) is unreachable for arm {arm}", target[0], target[1], target[2])]
    Unreachable { arm: String, target: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimit<T> {
    pub lo: T,
    pub hi: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModel<T> {
    pub name: String,
    pub base: Pose<T>,
    pub link_lengths: [T; DOF],
    pub joint_limits: [JointLimit<T>; DOF],
    pub link_radius: T,
}

impl<T: Real> ArmModel<T> {
    /// Arm with the default link lengths `[0.30, 0.25, 0.20, 0.10]` and radius 0.04.
    pub fn new(name: impl Into<String>, base: Pose<T>) -> Self {
        let l = |lo: f64, hi: f64| JointLimit { lo: T::lit(lo), hi: T::lit(hi) };
        let pi = std::f64::consts::PI;
        Self {
            name: name.into(),
            base,
            link_lengths: [T::lit(0.30), T::lit(0.25), T::lit(0.20), T::lit(0.10)],
            joint_limits: [l(-pi, pi), l(-pi / 2.0, pi / 2.0), l(-2.5, 2.5), l(-2.5, 2.5)],
            link_radius: T::lit(0.04),
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let bad = |reason: &str| KinematicsError::InvalidModel { arm: self.name.clone(), reason: reason.into() };
        if self.link_lengths.iter().any(|l| !(*l > T::zero())) {
            return Err(bad("link lengths must be positive"));
        }
        if self.joint_limits.iter().any(|j| !(j.lo < j.hi)) {
            return Err(bad("joint limits must satisfy lo < hi"));
        }
        if !(self.link_radius > T::zero()) {
            return Err(bad("link radius must be positive"));
        }
        Ok(())
    }

    pub fn reach(&self) -> T {
        self.link_lengths.iter().fold(T::zero(), |a, b| a + *b)
    }

    pub fn check_limits(&self, q: &JointConfig<T>) -> Result<(), KinematicsError> {
        for (j, (v, lim)) in q.q.iter().zip(self.joint_limits.iter()).enumerate() {
            if !(*v >= lim.lo && *v <= lim.hi) {
                return Err(KinematicsError::OutOfLimits {
                    arm: self.name.clone(),
                    joint: j,
                    value: v.to_f64_lossy(),
                    lo: lim.lo.to_f64_lossy(),
                    hi: lim.hi.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &mut JointConfig<T>) {
        for (v, lim) in q.q.iter_mut().zip(self.joint_limits.iter()) {
            *v = v.max(lim.lo).min(lim.hi);
        }
    }

    pub fn mid_config(&self) -> JointConfig<T> {
        let two = T::lit(2.0);
        JointConfig { q: self.joint_limits.map(|l| (l.lo + l.hi) / two) }
    }

    pub fn random_config<R: Rng>(&self, rng: &mut R) -> JointConfig<T> {
        JointConfig {
            q: self.joint_limits.map(|l| {
                let (lo, hi) = (l.lo.to_f64_lossy(), l.hi.to_f64_lossy());
                T::lit(rng.random_range(lo..=hi))
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig<T> {
    pub q: [T; DOF],
}

impl<T: Real> JointConfig<T> {
    pub fn new(q: [T; DOF]) -> Self {
        Self { q }
    }

    pub fn zero() -> Self {
        Self { q: [T::zero(); DOF] }
    }
}

/// Stacked joint vectors of all arms; a point of the composite configuration space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompositeConfig<T> {
    pub per_arm: Vec<JointConfig<T>>,
}

impl<T: Real> CompositeConfig<T> {
    pub fn new(per_arm: Vec<JointConfig<T>>) -> Self {
        Self { per_arm }
    }

    pub fn dim(&self) -> usize {
        self.per_arm.len() * DOF
    }

    pub fn flat(&self) -> Vec<T> {
        self.per_arm.iter().flat_map(|j| j.q).collect()
    }

    pub fn from_flat(v: &[T]) -> Self {
        assert_eq!(v.len() % DOF, 0, "flat composite length must be a multiple of {DOF}");
        Self {
            per_arm: v
                .chunks(DOF)
                .map(|c| JointConfig { q: [c[0], c[1], c[2], c[3]] })
                .collect(),
        }
    }

    pub fn distance(&self, other: &Self) -> T {
        self.flat()
            .iter()
            .zip(other.flat())
            .fold(T::zero(), |acc, (a, b)| acc + (*a - b) * (*a - b))
            .sqrt()
    }

    pub fn max_joint_delta(&self, other: &Self) -> T {
        self.flat()
            .iter()
            .zip(other.flat())
            .fold(T::zero(), |acc, (a, b)| acc.max((*a - b).abs()))
    }

    pub fn interpolate(&self, other: &Self, t: T) -> Self {
        let v: Vec<T> = self.flat().iter().zip(other.flat()).map(|(a, b)| *a + (b - *a) * t).collect();
        Self::from_flat(&v)
    }

    pub fn within_limits(&self, arms: &[ArmModel<T>]) -> bool {
        self.per_arm.len() == arms.len()
            && self.per_arm.iter().zip(arms).all(|(q, arm)| arm.check_limits(q).is_ok())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule<T> {
    pub a: Vec3<T>,
    pub b: Vec3<T>,
    pub radius: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FkResult<T> {
    pub ee: Vec3<T>,
    pub links: [Capsule<T>; DOF],
}

/// Forward kinematics; rejects out-of-limit configurations.
pub fn forward_kinematics<T: Real>(arm: &ArmModel<T>, q: &JointConfig<T>) -> Result<FkResult<T>, KinematicsError> {
    arm.check_limits(q)?;
    Ok(fk_unchecked(arm, q))
}

/// Joint frame origins `[shoulder, elbow, wrist, tool, ee]`.
pub fn joint_points<T: Real>(arm: &ArmModel<T>, q: &JointConfig<T>) -> [Vec3<T>; DOF + 1] {
    let heading = arm.base.yaw + q.q[0];
    let (sh, ch) = heading.sin_cos();
    let mut pts = [arm.base.position; DOF + 1];
    let mut elevation = T::zero();
    for i in 0..DOF {
        // the last link is a fixed tool extension with no joint of its own
        if i < 3 {
            elevation = elevation + q.q[i + 1];
        }
        let (se, ce) = elevation.sin_cos();
        let l = arm.link_lengths[i];
        pts[i + 1] = pts[i] + Vec3::new(l * ce * ch, l * ce * sh, l * se);
    }
    pts
}

pub fn fk_unchecked<T: Real>(arm: &ArmModel<T>, q: &JointConfig<T>) -> FkResult<T> {
    let p = joint_points(arm, q);
    let cap = |i: usize| Capsule { a: p[i], b: p[i + 1], radius: arm.link_radius };
    FkResult { ee: p[DOF], links: [cap(0), cap(1), cap(2), cap(3)] }
}

pub fn end_effector<T: Real>(arm: &ArmModel<T>, q: &JointConfig<T>) -> Vec3<T> {
    joint_points(arm, q)[DOF]
}

/// Analytic 3x4 position Jacobian, columns per joint.
fn jacobian<T: Real>(arm: &ArmModel<T>, q: &JointConfig<T>) -> [[T; DOF]; 3] {
    let heading = arm.base.yaw + q.q[0];
    let (sh, ch) = heading.sin_cos();
    let l = arm.link_lengths;
    let a1 = q.q[1];
    let a2 = a1 + q.q[2];
    let a3 = a2 + q.q[3];
    let angles = [a1, a2, a3, a3];
    let mut r = T::zero();
    for i in 0..DOF {
        r = r + l[i] * angles[i].cos();
    }
    let mut jac = [[T::zero(); DOF]; 3];
    jac[0][0] = -r * sh;
    jac[1][0] = r * ch;
    for j in 1..DOF {
        let (mut dr, mut dz) = (T::zero(), T::zero());
        for i in (j - 1)..DOF {
            dr = dr - l[i] * angles[i].sin();
            dz = dz + l[i] * angles[i].cos();
        }
        jac[0][j] = dr * ch;
        jac[1][j] = dr * sh;
        jac[2][j] = dz;
    }
    jac
}

fn solve3<T: Real>(m: [[T; 3]; 3], b: [T; 3]) -> Option<[T; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() <= T::min_positive_value() {
        return None;
    }
    let mut out = [T::zero(); 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut mc = m;
        for r in 0..3 {
            mc[r][c] = b[r];
        }
        let d = mc[0][0] * (mc[1][1] * mc[2][2] - mc[1][2] * mc[2][1])
            - mc[0][1] * (mc[1][0] * mc[2][2] - mc[1][2] * mc[2][0])
            + mc[0][2] * (mc[1][0] * mc[2][1] - mc[1][1] * mc[2][0]);
        *slot = d / det;
    }
    Some(out)
}

/// Damped least squares position IK with seeded random restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IkSolver<T> {
    pub damping: T,
    pub step_clamp: T,
    pub tolerance: T,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl<T: Real> Default for IkSolver<T> {
    fn default() -> Self {
        Self {
            damping: T::lit(0.1),
            step_clamp: T::lit(0.2),
            tolerance: T::lit(1e-3),
            max_iterations: 300,
            restarts: 10,
            seed: 0,
        }
    }
}

impl<T: Real> IkSolver<T> {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Solves for a configuration whose end effector lies within `tolerance`
    /// of `target`. The first attempt starts from `initial` (or mid-limits).
    pub fn solve(
        &self,
        arm: &ArmModel<T>,
        target: Vec3<T>,
        initial: Option<&JointConfig<T>>,
    ) -> Result<JointConfig<T>, IkError> {
        let unreachable = || IkError::Unreachable {
            arm: arm.name.clone(),
            target: [target.x.to_f64_lossy(), target.y.to_f64_lossy(), target.z.to_f64_lossy()],
        };
        if !target.is_finite() || target.distance(arm.base.position) > arm.reach() + self.tolerance {
            return Err(unreachable());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let rel = target - arm.base.position;
        let heading = rel.y.atan2(rel.x) - arm.base.yaw;
        let heading = heading.sin().atan2(heading.cos());
        let mut start = initial.copied().unwrap_or_else(|| {
            let mut q = arm.mid_config();
            q.q[0] = heading;
            q
        });
        arm.clamp(&mut start);
        for attempt in 0..=self.restarts {
            if attempt > 0 {
                // near the yaw axis the yaw column vanishes, so restarts face the target
                start = arm.random_config(&mut rng);
                start.q[0] = heading;
                arm.clamp(&mut start);
            }
            if let Some(q) = self.descend(arm, target, start) {
                return Ok(q);
            }
        }
        Err(unreachable())
    }

    fn descend(&self, arm: &ArmModel<T>, target: Vec3<T>, mut q: JointConfig<T>) -> Option<JointConfig<T>> {
        let lambda2 = self.damping * self.damping;
        for _ in 0..=self.max_iterations {
            let err = target - end_effector(arm, &q);
            if err.norm() <= self.tolerance {
                return Some(q);
            }
            let jac = jacobian(arm, &q);
            let mut jjt = [[T::zero(); 3]; 3];
            for (r, row) in jjt.iter_mut().enumerate() {
                for (c, cell) in row.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for k in 0..DOF {
                        s = s + jac[r][k] * jac[c][k];
                    }
                    *cell = s + if r == c { lambda2 } else { T::zero() };
                }
            }
            let y = solve3(jjt, [err.x, err.y, err.z])?;
            let mut dq = [T::zero(); DOF];
            for (k, d) in dq.iter_mut().enumerate() {
                *d = jac[0][k] * y[0] + jac[1][k] * y[1] + jac[2][k] * y[2];
            }
            let largest = dq.iter().fold(T::zero(), |m, d| m.max(d.abs()));
            let scale = if largest > self.step_clamp { self.step_clamp / largest } else { T::one() };
            for (v, d) in q.q.iter_mut().zip(dq) {
                *v = *v + d * scale;
            }
            arm.clamp(&mut q);
        }
        None
    }
}

/// One colliding pair. Arm-arm pairs are stored with `arm_a < arm_b` by name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contact {
    Arms { arm_a: String, link_a: usize, arm_b: String, link_b: usize },
    Obstacle { arm: String, link: usize, obstacle: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub contacts: Vec<Contact>,
}

impl CollisionReport {
    pub fn is_free(&self) -> bool {
        self.contacts.is_empty()
    }
}

fn arm_capsules<T: Real>(arms: &[ArmModel<T>], x: &CompositeConfig<T>) -> Vec<[Capsule<T>; DOF]> {
    assert_eq!(arms.len(), x.per_arm.len(), "composite config must cover every arm");
    arms.iter().zip(&x.per_arm).map(|(arm, q)| fk_unchecked(arm, q).links).collect()
}

/// Every colliding pair: links of different arms, and links against obstacles.
/// Adjacent links of one arm are chained and never reported.
pub fn collides<T: Real>(arms: &[ArmModel<T>], x: &CompositeConfig<T>, obstacles: &[Obstacle<T>]) -> CollisionReport {
    let caps = arm_capsules(arms, x);
    let mut contacts = Vec::new();
    for i in 0..arms.len() {
        for j in (i + 1)..arms.len() {
            for (li, ca) in caps[i].iter().enumerate() {
                for (lj, cb) in caps[j].iter().enumerate() {
                    if segment_segment_distance(ca.a, ca.b, cb.a, cb.b) < ca.radius + cb.radius {
                        let (a, la, b, lb) = if arms[i].name <= arms[j].name {
                            (&arms[i].name, li, &arms[j].name, lj)
                        } else {
                            (&arms[j].name, lj, &arms[i].name, li)
                        };
                        contacts.push(Contact::Arms { arm_a: a.clone(), link_a: la, arm_b: b.clone(), link_b: lb });
                    }
                }
            }
        }
        for (li, c) in caps[i].iter().enumerate() {
            for obs in obstacles {
                if obs.segment_distance(c.a, c.b) < c.radius {
                    contacts.push(Contact::Obstacle { arm: arms[i].name.clone(), link: li, obstacle: obs.name().to_string() });
                }
            }
        }
    }
    contacts.sort();
    CollisionReport { contacts }
}

/// Boolean collision query with early exit.
pub fn in_collision<T: Real>(arms: &[ArmModel<T>], x: &CompositeConfig<T>, obstacles: &[Obstacle<T>]) -> bool {
    let caps = arm_capsules(arms, x);
    for i in 0..caps.len() {
        for c in &caps[i] {
            if obstacles.iter().any(|o| o.segment_distance(c.a, c.b) < c.radius) {
                return true;
            }
        }
        for j in (i + 1)..caps.len() {
            for ca in &caps[i] {
                for cb in &caps[j] {
                    if segment_segment_distance(ca.a, ca.b, cb.a, cb.b) < ca.radius + cb.radius {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Joint-space edge check: every joint moves at most 0.05 rad between checked samples.
pub fn segment_free<T: Real>(
    arms: &[ArmModel<T>],
    x_a: &CompositeConfig<T>,
    x_b: &CompositeConfig<T>,
    obstacles: &[Obstacle<T>],
) -> bool {
    segment_free_with_step(arms, x_a, x_b, obstacles, T::lit(0.05))
}

pub fn segment_free_with_step<T: Real>(
    arms: &[ArmModel<T>],
    x_a: &CompositeConfig<T>,
    x_b: &CompositeConfig<T>,
    obstacles: &[Obstacle<T>],
    max_step: T,
) -> bool {
    let delta = x_a.max_joint_delta(x_b);
    let steps = (delta / max_step).ceil().to_usize().unwrap_or(0).max(1);
    let n = T::from_usize(steps).expect("step count");
    (0..=steps).all(|i| {
        let t = T::from_usize(i).expect("step index") / n;
        !in_collision(arms, &x_a.interpolate(x_b, t), obstacles)
    })
}
