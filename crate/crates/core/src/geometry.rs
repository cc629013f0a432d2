//! Directions, frames and the chord distance used by every threshold in the
//! protocol stack.
//!
//! A [`Direction`] carries no frame tag of its own: callers track which frame
//! a set of coordinates is expressed in and convert with [`to_frame`] (or
//! [`Frame::to_global`] / [`Frame::to_local`]) before comparing.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for the unit-norm and orthonormality invariants.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("vector norm {0} is not 1 within tolerance")]
    NotUnit(f64),
    #[error("vector has zero length")]
    ZeroVector,
    #[error("matrix is not orthonormal (max deviation {0})")]
    NotOrthonormal(f64),
    #[error("matrix determinant {0} is not +1")]
    NotProper(f64),
}

/// Plain Cartesian 3-vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {axis} out of range"),
        }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
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

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// A unit 3-vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Direction(Vec3);

impl Direction {
    pub const PLUS_X: Direction = Direction(Vec3::new(1.0, 0.0, 0.0));
    pub const PLUS_Y: Direction = Direction(Vec3::new(0.0, 1.0, 0.0));
    pub const PLUS_Z: Direction = Direction(Vec3::new(0.0, 0.0, 1.0));

    /// Validates the unit-norm invariant without renormalizing.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let v = Vec3::new(x, y, z);
        let norm = v.norm();
        if (norm - 1.0).abs() > TOLERANCE || !norm.is_finite() {
            return Err(GeometryError::NotUnit(norm));
        }
        Ok(Direction(v))
    }

    /// Scales `v` to unit length.
    pub fn normalize(v: Vec3) -> Result<Self, GeometryError> {
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Direction(v * (1.0 / norm)))
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }

    pub fn x(self) -> f64 {
        self.0.x
    }

    pub fn y(self) -> f64 {
        self.0.y
    }

    pub fn z(self) -> f64 {
        self.0.z
    }

    pub fn dot(self, other: Direction) -> f64 {
        self.0.dot(other.0)
    }

    /// Angle in `[0, π]`.
    pub fn angle_to(self, other: Direction) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    /// Rotates by `angle` radians about `axis` (right-hand rule).
    pub fn rotate_about(self, axis: Direction, angle: f64) -> Direction {
        Direction(rodrigues(self.0, axis, angle))
    }

    /// Some unit vector orthogonal to `self`, chosen from the coordinate axis
    /// least aligned with it.
    pub fn any_orthogonal(self) -> Direction {
        let v = self.0;
        let pick = if v.x.abs() <= v.y.abs() && v.x.abs() <= v.z.abs() {
            Vec3::new(1.0, 0.0, 0.0)
        } else if v.y.abs() <= v.z.abs() {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        Direction::normalize(v.cross(pick)).expect("cross with least-aligned axis is nonzero")
    }

    /// Rotates `self` away from itself by `angle` within the plane spanned by
    /// `self` and `toward`. Falls back to [`Direction::any_orthogonal`] when the
    /// two are (anti)parallel.
    pub fn tilt_toward(self, toward: Direction, angle: f64) -> Direction {
        let axis = Direction::normalize(self.0.cross(toward.0))
            .ok()
            .filter(|_| self.0.cross(toward.0).norm() > 1e-12)
            .unwrap_or_else(|| self.any_orthogonal());
        self.rotate_about(axis, angle)
    }
}

impl Neg for Direction {
    type Output = Direction;
    fn neg(self) -> Direction {
        Direction(-self.0)
    }
}

impl TryFrom<[f64; 3]> for Direction {
    type Error = GeometryError;
    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        Direction::new(a[0], a[1], a[2])
    }
}

impl From<Direction> for [f64; 3] {
    fn from(d: Direction) -> Self {
        d.0.to_array()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.0.x, self.0.y, self.0.z)
    }
}

fn rodrigues(v: Vec3, axis: Direction, angle: f64) -> Vec3 {
    let k = axis.0;
    let (s, c) = angle.sin_cos();
    v * c + k.cross(v) * s + k * (k.dot(v) * (1.0 - c))
}

/// A proper rotation: column `k` of `basis` is local axis `k` in global
/// coordinates. Also used as a plain rotation operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Frame {
    // row-major
    m: [[f64; 3]; 3],
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Validates orthonormality and `det = +1`.
    pub fn from_rows(m: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        let frame = Frame { m };
        let prod = frame.transpose().mul_frame(&frame);
        let mut worst = 0.0f64;
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                let dev = (prod.m[r][c] - expect).abs();
                if !dev.is_finite() {
                    return Err(GeometryError::NotOrthonormal(f64::INFINITY));
                }
                worst = worst.max(dev);
            }
        }
        if worst > TOLERANCE {
            return Err(GeometryError::NotOrthonormal(worst));
        }
        let det = frame.determinant();
        if (det - 1.0).abs() > TOLERANCE {
            return Err(GeometryError::NotProper(det));
        }
        Ok(frame)
    }

    /// Rotation by `angle` about `axis`.
    pub fn rotation(axis: Direction, angle: f64) -> Frame {
        let cols = [
            rodrigues(Vec3::new(1.0, 0.0, 0.0), axis, angle),
            rodrigues(Vec3::new(0.0, 1.0, 0.0), axis, angle),
            rodrigues(Vec3::new(0.0, 0.0, 1.0), axis, angle),
        ];
        Frame::from_columns_unchecked(cols)
    }

    fn from_columns_unchecked(cols: [Vec3; 3]) -> Frame {
        let mut m = [[0.0; 3]; 3];
        for (c, col) in cols.iter().enumerate() {
            for (r, row) in m.iter_mut().enumerate() {
                row[c] = col.component(r);
            }
        }
        Frame { m }
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn transpose(&self) -> Frame {
        let m = &self.m;
        Frame {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Matrix product `self · other`.
    pub fn mul_frame(&self, other: &Frame) -> Frame {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        Frame { m: out }
    }

    /// Applies the frame to the whole basis: returns `rotation · self`.
    pub fn rotated_by(&self, rotation: &Frame) -> Frame {
        rotation.mul_frame(self)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn apply_transpose(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z,
        )
    }

    /// Local coordinates → global coordinates.
    pub fn to_global(&self, local: Direction) -> Direction {
        Direction(self.apply(local.0))
    }

    /// Global coordinates → local coordinates.
    pub fn to_local(&self, global: Direction) -> Direction {
        Direction(self.apply_transpose(global.0))
    }

    /// Local axis `k` (0 = x, 1 = y, 2 = z) in global coordinates.
    pub fn axis(&self, k: usize) -> Direction {
        Direction(Vec3::new(self.m[0][k], self.m[1][k], self.m[2][k]))
    }
}

impl TryFrom<[f64; 9]> for Frame {
    type Error = GeometryError;
    fn try_from(a: [f64; 9]) -> Result<Self, Self::Error> {
        Frame::from_rows([[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]])
    }
}

impl From<Frame> for [f64; 9] {
    fn from(f: Frame) -> Self {
        let m = f.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }
}

/// Euclidean (chord) distance, `2·sin(θ/2)`, in `[0, 2]`.
pub fn distance(u: Direction, v: Direction) -> f64 {
    (u.0 - v.0).norm()
}

/// Re-expresses `v` (coordinates in `from`) in frame `to`: `toᵀ·(from·v)`.
pub fn to_frame(v: Direction, from: &Frame, to: &Frame) -> Direction {
    to.to_local(from.to_global(v))
}

/// Uniform direction on the sphere from a normalized Gaussian draw.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Direction {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if v.norm() > 1e-300 {
            if let Ok(d) = Direction::normalize(v) {
                return d;
            }
        }
    }
}

/// Haar-uniform proper rotation, built from a uniform unit quaternion.
pub fn random_frame<R: Rng + ?Sized>(rng: &mut R) -> Frame {
    let (w, x, y, z) = loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 1e-300 {
            break (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
        }
    };
    Frame {
        m: [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ],
    }
}
