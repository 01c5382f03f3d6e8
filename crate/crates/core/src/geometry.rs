//! Rigid-body math for ego and object motion.
//!
//! Poses are stored as a 3×3 rotation plus a translation in double precision.
//! A transform `b_T_a` maps points expressed in frame `a` into frame `b`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;
const DEGENERATE_NORM: f64 = 1e-9;

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !is_rotation(&rotation) {
            return Err(Error::InvalidRotation);
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self {
            rotation: rot_z(yaw),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Heading of the rotated x axis in the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// `self · other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub fn rot_z(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn is_rotation(r: &Matrix3<f64>) -> bool {
    if r.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let rtr = r.transpose() * r;
    let ortho = (rtr - Matrix3::identity()).iter().all(|v| v.abs() <= ORTHO_TOL);
    ortho && (r.determinant() - 1.0).abs() <= ORTHO_TOL
}

/// Estimated object dynamics over one propagation interval.
///
/// `turn_rate` is the heading change applied over one interval, in radians
/// (not a per-second rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectDynamics {
    pub velocity: [f64; 2],
    pub turn_rate: f64,
    pub dt: f64,
}

impl ObjectDynamics {
    pub fn new(velocity: [f64; 2], turn_rate: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidDynamics(format!("dt must be positive, got {dt}")));
        }
        if !turn_rate.is_finite() || velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDynamics("non-finite velocity or turn rate".into()));
        }
        Ok(Self {
            velocity,
            turn_rate,
            dt,
        })
    }

    /// Constant velocity with no heading change.
    pub fn constant_velocity(velocity: [f64; 2], dt: f64) -> Result<Self> {
        Self::new(velocity, 0.0, dt)
    }
}

/// Object motion over one interval: rotation about z by the turn rate and
/// translation by `v · dt` in the ground plane.
pub fn object_motion_transform(d: &ObjectDynamics) -> Se3 {
    let t = Vector3::new(d.velocity[0] * d.dt, d.velocity[1] * d.dt, 0.0);
    if d.turn_rate == 0.0 {
        Se3::from_translation(t)
    } else {
        Se3::from_yaw(d.turn_rate, t)
    }
}

/// Moves a reference point through object motion, then ego motion.
pub fn update_reference(r: &Vector3<f64>, t_obj: &Se3, t_ego: &Se3) -> Vector3<f64> {
    t_ego.apply(&t_obj.apply(r))
}

/// Continuous 6D rotation encoding: the first two columns of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6d {
    pub a1: [f64; 3],
    pub a2: [f64; 3],
}

impl Rot6d {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.a1[0], self.a1[1], self.a1[2], self.a2[0], self.a2[1], self.a2[2],
        ]
    }
}

pub fn to_rot6d(t: &Se3) -> Rot6d {
    let r = &t.rotation;
    Rot6d {
        a1: [r[(0, 0)], r[(1, 0)], r[(2, 0)]],
        a2: [r[(0, 1)], r[(1, 1)], r[(2, 1)]],
    }
}

/// Gram-Schmidt on `(a1, a2)`, third column from their cross product.
pub fn from_rot6d(r6: &Rot6d) -> Result<Matrix3<f64>> {
    let a1 = Vector3::from(r6.a1);
    let a2 = Vector3::from(r6.a2);
    let n1 = a1.norm();
    if !(n1 >= DEGENERATE_NORM) {
        return Err(Error::DegenerateRotationInput);
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 >= DEGENERATE_NORM) {
        return Err(Error::DegenerateRotationInput);
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}
