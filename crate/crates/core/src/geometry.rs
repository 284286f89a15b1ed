//! Quaternions, camera poses and the quaternion-difference orientation metric.
//!
//! Quaternions are scalar-first `(w, x, y, z)` and right-handed. A camera
//! orientation maps camera-frame vectors to world-frame vectors; the camera
//! frame has `x` right, `y` down and `z` forward.

use std::f64::consts::SQRT_2;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|‖q‖ − 1|` accepted by [`nqd`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Scalar-first quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalized();
        let (s, c) = (angle * 0.5).sin_cos();
        Quaternion::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn conjugate(&self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    /// Euclidean norm of the 4-vector difference.
    fn dist(&self, o: &Quaternion) -> f64 {
        let (dw, dx, dy, dz) = (self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z);
        (dw * dw + dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let m = self.to_matrix();
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    /// Row-major rotation matrix. `q` and `-q` give the same matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Quaternion of a proper rotation matrix (row-major).
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Norm of quaternion difference, `min(‖q1 − q2‖, ‖q1 + q2‖)`, in `[0, √2]`.
pub fn nqd(q1: &Quaternion, q2: &Quaternion) -> Result<f64, GeometryError> {
    for q in [q1, q2] {
        if !q.is_unit(UNIT_TOLERANCE) {
            return Err(GeometryError::InvalidArgument(format!(
                "nqd needs unit quaternions, got norm {}",
                q.norm()
            )));
        }
    }
    Ok(q1.dist(q2).min(q1.dist(&-*q2)))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square image with the principal point at the center.
    pub fn from_fov(size: usize, fov_deg: f64) -> Self {
        let half = size as f64 * 0.5;
        Intrinsics {
            focal: half / (fov_deg.to_radians() * 0.5).tan(),
            cx: half,
            cy: half,
            width: size,
            height: size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub orientation: Quaternion,
    pub position: Vec3,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.orientation.is_unit(1e-9) {
            return Err(GeometryError::InvalidArgument("camera orientation is not unit".into()));
        }
        let k = &self.intrinsics;
        if !(k.focal > 0.0) {
            return Err(GeometryError::InvalidArgument("focal length must be positive".into()));
        }
        if k.width < 16 || k.height < 16 {
            return Err(GeometryError::InvalidArgument(format!(
                "image size {}x{} below 16x16",
                k.width, k.height
            )));
        }
        Ok(())
    }

    /// Camera at `position` looking at the world origin, rolled about the
    /// viewing axis by `roll` radians. World up is `+z`.
    pub fn look_at_origin(position: Vec3, roll: f64, intrinsics: Intrinsics) -> Self {
        let forward = (-position).normalized();
        let mut up = Vec3::new(0.0, 0.0, 1.0);
        if forward.cross(up).norm() < 1e-9 {
            up = Vec3::new(1.0, 0.0, 0.0);
        }
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        let (s, c) = roll.sin_cos();
        let r = right * c + down * s;
        let d = down * c - right * s;
        let m = [[r.x, d.x, forward.x], [r.y, d.y, forward.y], [r.z, d.z, forward.z]];
        CameraPose { orientation: Quaternion::from_matrix(&m), position, intrinsics }
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.orientation.conjugate().rotate(p - self.position)
    }

    /// Camera-frame point to pixel coordinates (continuous, pixel centers at
    /// `i + 0.5`).
    pub fn project_camera(&self, pc: Vec3) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.focal * pc.x / pc.z + k.cx, k.focal * pc.y / pc.z + k.cy)
    }

    /// True when both orientation and position coincide.
    pub fn same_pose(&self, other: &CameraPose) -> bool {
        let d = self.orientation.dist(&other.orientation).min(self.orientation.dist(&-other.orientation));
        d <= 1e-12 && self.position == other.position
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.lo + u * (self.hi - self.lo)
    }
}

/// Union of closed intervals. Sampling picks a member proportionally to its
/// length (uniformly when all are points) and then uniformly inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntervalSet(pub Vec<Interval>);

impl IntervalSet {
    pub fn single(lo: f64, hi: f64) -> Self {
        IntervalSet(vec![Interval::new(lo, hi)])
    }

    pub fn contains(&self, v: f64) -> bool {
        self.0.iter().any(|i| i.contains(v))
    }

    pub fn is_valid(&self) -> bool {
        !self.0.is_empty() && self.0.iter().all(|i| i.lo.is_finite() && i.hi.is_finite() && i.lo <= i.hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.0.iter().map(Interval::len).sum();
        let idx = if self.0.len() == 1 {
            0
        } else if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = self.0.len() - 1;
            for (i, iv) in self.0.iter().enumerate() {
                if t < iv.len() {
                    pick = i;
                    break;
                }
                t -= iv.len();
            }
            pick
        } else {
            rng.gen_range(0..self.0.len())
        };
        self.0[idx].sample(rng)
    }
}

/// Camera placement ranges; angles in degrees, distance in scene units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub elevation: IntervalSet,
    pub azimuth: IntervalSet,
    pub distance: IntervalSet,
    pub roll: IntervalSet,
}

impl PoseRange {
    /// Top-side viewing band used for training and seen-pose tests.
    pub fn training() -> Self {
        PoseRange {
            elevation: IntervalSet::single(30.0, 70.0),
            azimuth: IntervalSet::single(-60.0, 60.0),
            distance: IntervalSet::single(3.0, 5.0),
            roll: IntervalSet::single(-10.0, 10.0),
        }
    }

    /// Poses disjoint from [`PoseRange::training`] in elevation and azimuth.
    pub fn novel() -> Self {
        PoseRange {
            elevation: IntervalSet(vec![Interval::new(10.0, 25.0), Interval::new(75.0, 85.0)]),
            azimuth: IntervalSet::single(90.0, 180.0),
            distance: IntervalSet::single(3.0, 5.0),
            roll: IntervalSet::single(-10.0, 10.0),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, set) in [
            ("elevation", &self.elevation),
            ("azimuth", &self.azimuth),
            ("distance", &self.distance),
            ("roll", &self.roll),
        ] {
            if !set.is_valid() {
                return Err(GeometryError::InvalidArgument(format!("{name} range is empty or malformed")));
            }
        }
        if self.elevation.0.iter().any(|i| i.lo < 0.0 || i.hi > 90.0) {
            return Err(GeometryError::InvalidArgument("elevation must lie within [0, 90] degrees".into()));
        }
        if self.distance.0.iter().any(|i| i.lo <= 0.0) {
            return Err(GeometryError::InvalidArgument("distance must be positive".into()));
        }
        Ok(())
    }
}

/// Spherical placement parameters of a look-at-origin camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub distance: f64,
    pub roll_deg: f64,
}

impl PoseParams {
    pub fn to_pose(&self, intrinsics: Intrinsics) -> CameraPose {
        let (el, az) = (self.elevation_deg.to_radians(), self.azimuth_deg.to_radians());
        let position = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * self.distance;
        CameraPose::look_at_origin(position, self.roll_deg.to_radians(), intrinsics)
    }
}

/// Draws placement parameters uniformly over `range`.
pub fn sample_pose_params<R: Rng + ?Sized>(range: &PoseRange, rng: &mut R) -> Result<PoseParams, GeometryError> {
    range.validate()?;
    Ok(PoseParams {
        elevation_deg: range.elevation.sample(rng),
        azimuth_deg: range.azimuth.sample(rng),
        distance: range.distance.sample(rng),
        roll_deg: range.roll.sample(rng),
    })
}

/// Camera pose drawn uniformly over `range`, looking at the assembly origin.
pub fn sample_pose<R: Rng + ?Sized>(
    range: &PoseRange,
    intrinsics: Intrinsics,
    rng: &mut R,
) -> Result<CameraPose, GeometryError> {
    Ok(sample_pose_params(range, rng)?.to_pose(intrinsics))
}

/// Largest rotation angle (radians) whose quaternion difference stays within
/// `max_nqd`: inverse of `nqd = 2 sin(θ/4)`.
pub fn max_angle_for_nqd(max_nqd: f64) -> f64 {
    4.0 * (max_nqd * 0.5).min(1.0).asin()
}

fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Rotates the base orientation by a random axis and an angle uniform in
/// `[0, 4·asin(max_nqd/2)]`, and moves the camera by a uniform offset within
/// `position_frac` of its distance to the origin.
pub fn perturb_pose<R: Rng + ?Sized>(
    base: &CameraPose,
    max_nqd: f64,
    position_frac: f64,
    rng: &mut R,
) -> Result<CameraPose, GeometryError> {
    if !(0.0..=SQRT_2).contains(&max_nqd) {
        return Err(GeometryError::InvalidArgument(format!("max_nqd {max_nqd} outside [0, sqrt 2]")));
    }
    if max_nqd == 0.0 {
        return Ok(*base);
    }
    let axis = random_unit_vector(rng);
    let mut angle = rng.gen::<f64>() * max_angle_for_nqd(max_nqd);
    let mut orientation = (base.orientation * Quaternion::from_axis_angle(axis, angle)).normalized();
    // floating-point slack at the budget edge
    while nqd(&base.orientation, &orientation)? > max_nqd {
        angle *= 0.5;
        orientation = (base.orientation * Quaternion::from_axis_angle(axis, angle)).normalized();
    }
    let radius = position_frac * base.position.norm() * rng.gen::<f64>().cbrt();
    let offset = random_unit_vector(rng) * radius;
    Ok(CameraPose { orientation, position: base.position + offset, intrinsics: base.intrinsics })
}
