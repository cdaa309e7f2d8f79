//! Rotation encodings, the ground-plane avatar frame and small SO(3) helpers.
//!
//! Conventions: y is the global up axis, angles are radians, matrices act on
//! column vectors. A yaw of `θ` is a rotation by `θ` about +y, so the avatar's
//! local z axis points along `(sin θ, 0, cos θ)` in the world.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ROTATION_NORM_TOLERANCE: f64 = 1e-6;
const MIN_HIP_AXIS: f64 = 1e-6;

/// Continuous 6D rotation encoding: the first two columns of a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    pub a: Vec3,
    pub b: Vec3,
}

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D {
        a: Vector3::new(1.0, 0.0, 0.0),
        b: Vector3::new(0.0, 1.0, 0.0),
    };

    pub fn from_slice(v: &[f64]) -> Self {
        Rotation6D {
            a: Vec3::new(v[0], v[1], v[2]),
            b: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a.x, self.a.y, self.a.z, self.b.x, self.b.y, self.b.z]
    }

    pub fn decode(&self) -> Result<Mat3> {
        decode_rotation_6d(self)
    }
}

/// Returns the first two columns of `r`.
pub fn encode_rotation_6d(r: &Mat3) -> Result<Rotation6D> {
    let deviation = (0..3)
        .map(|c| (r.column(c).norm() - 1.0).abs())
        .fold(0.0, f64::max);
    if !deviation.is_finite() || deviation > ROTATION_NORM_TOLERANCE {
        return Err(Error::NotOrthonormal { deviation });
    }
    Ok(Rotation6D {
        a: r.column(0).into_owned(),
        b: r.column(1).into_owned(),
    })
}

/// Gram–Schmidt decode. Always yields a proper rotation, even for perturbed input.
pub fn decode_rotation_6d(r6: &Rotation6D) -> Result<Mat3> {
    let a_norm = r6.a.norm();
    let b_norm = r6.b.norm();
    if !(a_norm > 1e-12 && b_norm > 1e-12) {
        return Err(Error::DegenerateRotation);
    }
    let c1 = r6.a / a_norm;
    let cross = c1.cross(&r6.b);
    let cross_norm = cross.norm();
    if !(cross_norm > 1e-9 * b_norm) {
        return Err(Error::DegenerateRotation);
    }
    let c3 = cross / cross_norm;
    let c2 = c3.cross(&c1);
    Ok(Mat3::from_columns(&[c1, c2, c3]))
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let wrapped = theta - two_pi * ((theta - PI) / two_pi).ceil();
    // ceil can land one period low for values just above -π after rounding
    if wrapped <= -PI {
        wrapped + two_pi
    } else {
        wrapped
    }
}

/// Rotation by `theta` about the global up axis.
pub fn yaw_matrix(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Heading angle of a horizontal x-axis direction `(x, z)`.
pub fn yaw_from_x_axis(x: f64, z: f64) -> f64 {
    (-z).atan2(x)
}

/// Ground-plane avatar coordinate system: origin under the root, x along the
/// projected left→right hip axis, y up, z = x × y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvatarFrame {
    pub origin: Vec2,
    pub yaw: f64,
}

impl AvatarFrame {
    pub const IDENTITY: AvatarFrame = AvatarFrame {
        origin: Vector2::new(0.0, 0.0),
        yaw: 0.0,
    };

    pub fn new(origin: Vec2, yaw: f64) -> Self {
        AvatarFrame { origin, yaw }
    }

    pub fn from_hips(left_hip: &Vec3, right_hip: &Vec3, root: &Vec3) -> Result<Self> {
        build_avatar_frame(left_hip, right_hip, root)
    }

    pub fn rotation(&self) -> Mat3 {
        yaw_matrix(self.yaw)
    }

    pub fn x_axis(&self) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c, 0.0, -s)
    }

    pub fn z_axis(&self) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(s, 0.0, c)
    }

    fn origin3(&self) -> Vec3 {
        Vec3::new(self.origin.x, 0.0, self.origin.y)
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation().transpose() * (p - self.origin3())
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.origin3()
    }

    pub fn dir_to_local(&self, v: &Vec3) -> Vec3 {
        self.rotation().transpose() * v
    }

    pub fn dir_to_world(&self, v: &Vec3) -> Vec3 {
        self.rotation() * v
    }

    pub fn rot_to_local(&self, r: &Mat3) -> Mat3 {
        self.rotation().transpose() * r
    }

    pub fn rot_to_world(&self, r: &Mat3) -> Mat3 {
        self.rotation() * r
    }

    /// Maps a horizontal world point `(x, z)` into local `(x, z)`.
    pub fn point_xz_to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let l = self.to_local(&Vec3::new(p[0], 0.0, p[1]));
        [l.x, l.z]
    }

    pub fn point_xz_to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let w = self.to_world(&Vec3::new(p[0], 0.0, p[1]));
        [w.x, w.z]
    }

    /// Expresses `other` relative to `self`: the returned frame's origin and yaw
    /// are measured in this frame's coordinates.
    pub fn relative(&self, other: &AvatarFrame) -> AvatarFrame {
        let o = self.point_xz_to_local([other.origin.x, other.origin.y]);
        AvatarFrame::new(Vec2::new(o[0], o[1]), wrap_angle(other.yaw - self.yaw))
    }

    /// Inverse of [`AvatarFrame::relative`]: places a frame given in local
    /// coordinates of `self` into the world.
    pub fn compose(&self, local: &AvatarFrame) -> AvatarFrame {
        let o = self.point_xz_to_world([local.origin.x, local.origin.y]);
        AvatarFrame::new(Vec2::new(o[0], o[1]), wrap_angle(self.yaw + local.yaw))
    }
}

pub fn build_avatar_frame(left_hip: &Vec3, right_hip: &Vec3, root: &Vec3) -> Result<AvatarFrame> {
    let axis = right_hip - left_hip;
    let norm = axis.x.hypot(axis.z);
    if !(norm > MIN_HIP_AXIS) {
        return Err(Error::DegenerateFrame);
    }
    Ok(AvatarFrame {
        origin: Vec2::new(root.x, root.z),
        yaw: yaw_from_x_axis(axis.x / norm, axis.z / norm),
    })
}

/// Facing delta encoded on the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacingInput {
    pub sin: f64,
    pub cos: f64,
}

impl FacingInput {
    pub const FORWARD: FacingInput = FacingInput { sin: 0.0, cos: 1.0 };

    pub fn from_angle(delta: f64) -> Self {
        let (sin, cos) = wrap_angle(delta).sin_cos();
        FacingInput { sin, cos }
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }
}

pub fn encode_facing(target_yaw: f64, current_yaw: f64) -> FacingInput {
    FacingInput::from_angle(target_yaw - current_yaw)
}

/// Rotation about the global vertical axis by the encoded facing delta.
pub fn yaw_rotation(d: &FacingInput) -> Mat3 {
    yaw_matrix(d.angle())
}

/// Axis-angle vector of a rotation matrix.
pub fn rotation_log(r: &Mat3) -> Vec3 {
    let cos_angle = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if angle < 1e-6 {
        return 0.5 * skew;
    }
    if PI - angle < 1e-2 {
        // sin(angle) is tiny: recover the axis from the symmetric part instead
        let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * cos_angle;
        let outer = sym / (1.0 - cos_angle);
        let i = (0..3)
            .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
            .unwrap_or(0);
        let mut axis = outer.column(i).into_owned() / outer[(i, i)].max(0.0).sqrt();
        axis /= axis.norm();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        return axis * angle;
    }
    skew * (angle / (2.0 * angle.sin()))
}

/// Rodrigues' formula, the inverse of [`rotation_log`].
pub fn rotation_exp(v: &Vec3) -> Mat3 {
    let angle = v.norm();
    if angle < 1e-12 {
        return Mat3::identity() + skew_matrix(v);
    }
    let k = skew_matrix(&(v / angle));
    Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

pub fn skew_matrix(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Smallest rotation taking direction `from` onto direction `to`.
pub fn rotation_between(from: &Vec3, to: &Vec3) -> Mat3 {
    let f = from.normalize();
    let t = to.normalize();
    let axis = f.cross(&t);
    let s = axis.norm();
    let c = f.dot(&t).clamp(-1.0, 1.0);
    if s < 1e-12 {
        if c > 0.0 {
            return Mat3::identity();
        }
        // antiparallel: any perpendicular axis works
        let helper = if f.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
        let perp = f.cross(&helper).normalize();
        return rotation_exp(&(perp * PI));
    }
    rotation_exp(&(axis / s * s.atan2(c)))
}

/// Rotation about a principal axis; `axis` is 0 (x), 1 (y) or 2 (z).
pub fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        _ => Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}
