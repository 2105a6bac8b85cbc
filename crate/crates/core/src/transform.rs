//! SE(3) and SE(2) rigid transforms.

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::cloud::{Point3, PointCloud3};
use crate::scalar::Scalar;

/// Rigid transform in 3D: unit quaternion rotation plus translation.
///
/// The quaternion is canonicalized to `w >= 0` on construction so equality
/// checks are deterministic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform3<T: Scalar> {
    rotation: UnitQuaternion<T>,
    translation: Vector3<T>,
}

impl<T: Scalar> RigidTransform3<T> {
    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        RigidTransform3 {
            rotation: canonicalize(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation about the z axis plus translation.
    pub fn from_yaw_translation(yaw: T, translation: Vector3<T>) -> Self {
        Self::new(
            UnitQuaternion::from_euler_angles(T::zero(), T::zero(), yaw),
            translation,
        )
    }

    pub fn from_euler(roll: T, pitch: T, yaw: T, translation: Vector3<T>) -> Self {
        Self::new(
            UnitQuaternion::from_euler_angles(roll, pitch, yaw),
            translation,
        )
    }

    pub fn rotation(&self) -> UnitQuaternion<T> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<T> {
        self.translation
    }

    pub fn apply_point(&self, p: Point3<T>) -> Point3<T> {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud3<T>) -> PointCloud3<T> {
        PointCloud3 {
            points: cloud.iter().map(|p| self.apply_point(*p)).collect(),
            georef_origin: cloud.georef_origin.map(|o| self.apply_point(o)),
        }
    }

    /// `self` applied after `inner`: `compose(a, b)(p) = a(b(p))`.
    pub fn compose(&self, inner: &RigidTransform3<T>) -> RigidTransform3<T> {
        RigidTransform3::new(
            self.rotation * inner.rotation,
            self.rotation * inner.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform3<T> {
        let inv_rot = self.rotation.inverse();
        RigidTransform3::new(inv_rot, -(inv_rot * self.translation))
    }

    /// (roll, pitch, yaw) of the rotation part.
    pub fn euler_angles(&self) -> (T, T, T) {
        self.rotation.euler_angles()
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> T {
        self.rotation.angle()
    }
}

/// Rigid transform in the X-Y plane: rotation angle in (-pi, pi] plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform2<T: Scalar> {
    angle: T,
    translation: Vector2<T>,
}

impl<T: Scalar> RigidTransform2<T> {
    pub fn new(angle: T, translation: Vector2<T>) -> Self {
        RigidTransform2 {
            angle: normalize_angle(angle),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), Vector2::zeros())
    }

    pub fn angle(&self) -> T {
        self.angle
    }

    pub fn translation(&self) -> Vector2<T> {
        self.translation
    }

    pub fn apply(&self, p: Vector2<T>) -> Vector2<T> {
        let (s, c) = self.angle.sin_cos();
        Vector2::new(c * p.x - s * p.y, s * p.x + c * p.y) + self.translation
    }

    pub fn compose(&self, inner: &RigidTransform2<T>) -> RigidTransform2<T> {
        let (s, c) = self.angle.sin_cos();
        let rotated = Vector2::new(
            c * inner.translation.x - s * inner.translation.y,
            s * inner.translation.x + c * inner.translation.y,
        );
        RigidTransform2::new(self.angle + inner.angle, rotated + self.translation)
    }

    pub fn inverse(&self) -> RigidTransform2<T> {
        let inv = RigidTransform2::new(-self.angle, Vector2::zeros());
        let t = inv.apply(self.translation);
        RigidTransform2::new(-self.angle, -t)
    }

    /// Exact lift into SE(3): yaw-only rotation, zero z translation.
    pub fn lift(&self) -> RigidTransform3<T> {
        RigidTransform3::from_yaw_translation(
            self.angle,
            Vector3::new(self.translation.x, self.translation.y, T::zero()),
        )
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle<T: Scalar>(a: T) -> T {
    let two_pi = T::two_pi();
    let mut r = a - two_pi * ((a + T::pi()) / two_pi).floor();
    if r <= -T::pi() {
        r = T::pi();
    }
    r
}

fn canonicalize<T: Scalar>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    if q.w < T::zero() {
        UnitQuaternion::new_unchecked(Quaternion::new(-q.w, -q.i, -q.j, -q.k))
    } else {
        q
    }
}
