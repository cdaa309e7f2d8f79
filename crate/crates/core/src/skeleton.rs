//! Joint hierarchy, forward kinematics and analytic two-joint leg IK.

use crate::error::{Error, Result};
use crate::geometry::{rotation_exp, Mat3, Rotation6D, Vec3};

/// Reachability margin kept between the target distance and the fully
/// stretched or fully folded leg.
pub const IK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Leg {
    pub hip: usize,
    pub knee: usize,
    pub foot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    legs: [Leg; 2],
}

/// Root position plus parent-relative joint rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_pos: Vec3,
    pub joint_rot: Vec<Rotation6D>,
}

impl Skeleton {
    /// `legs` is `[left, right]`. Parents must precede their children.
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        legs: [Leg; 2],
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 || parents.len() != n || offsets.len() != n {
            return Err(Error::InvalidSkeleton(format!(
                "{} names, {} parents, {} offsets",
                n,
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {j} ({}) has invalid parent {p:?}",
                        names[j]
                    )))
                }
            }
            if !(offsets[j].norm() > 1e-9) {
                return Err(Error::InvalidSkeleton(format!(
                    "joint {j} ({}) has a zero offset",
                    names[j]
                )));
            }
        }
        let ids: Vec<usize> = legs.iter().flat_map(|l| [l.hip, l.knee, l.foot]).collect();
        for (i, a) in ids.iter().enumerate() {
            if *a == 0 || *a >= n || ids[..i].contains(a) {
                return Err(Error::InvalidSkeleton(format!("bad leg joint indices {ids:?}")));
            }
        }
        for leg in &legs {
            if parents[leg.knee] != Some(leg.hip) || parents[leg.foot] != Some(leg.knee) {
                return Err(Error::InvalidSkeleton(
                    "leg joints must form a hip → knee → foot chain".into(),
                ));
            }
        }
        Ok(Skeleton {
            names,
            parents,
            offsets,
            legs,
        })
    }

    /// Builds a skeleton, locating the legs from conventional joint names.
    pub fn with_detected_legs(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
    ) -> Result<Self> {
        let legs = detect_legs(&names, &parents).ok_or_else(|| {
            Error::InvalidSkeleton("could not identify left/right hip, knee and foot joints".into())
        })?;
        Skeleton::new(names, parents, offsets, legs)
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parents[j]
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn offset(&self, j: usize) -> Vec3 {
        self.offsets[j]
    }

    pub fn left_leg(&self) -> Leg {
        self.legs[0]
    }

    pub fn right_leg(&self) -> Leg {
        self.legs[1]
    }

    pub fn legs(&self) -> [Leg; 2] {
        self.legs
    }

    pub fn feet(&self) -> [usize; 2] {
        [self.legs[0].foot, self.legs[1].foot]
    }

    pub fn hips(&self) -> [usize; 2] {
        [self.legs[0].hip, self.legs[1].hip]
    }

    /// Rest-pose offset of each hip relative to the root, in root coordinates.
    /// Only exact under the root rotation when the hips hang directly off the root.
    pub fn hip_offsets_from_root(&self) -> [Vec3; 2] {
        self.hips().map(|h| self.rest_offset_from_root(h))
    }

    fn rest_offset_from_root(&self, mut j: usize) -> Vec3 {
        let mut acc = Vec3::zeros();
        while let Some(p) = self.parents[j] {
            acc += self.offsets[j];
            j = p;
        }
        acc
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.joint_count()).filter(move |&c| self.parents[c] == Some(j))
    }

    /// Joint positions from a root position and *local* (parent-relative) rotations.
    pub fn forward_kinematics(
        &self,
        root_2d: [f64; 2],
        root_height: f64,
        joint_rot: &[Rotation6D],
    ) -> Result<Vec<Vec3>> {
        let pose = Pose {
            root_pos: Vec3::new(root_2d[0], root_height, root_2d[1]),
            joint_rot: joint_rot.to_vec(),
        };
        Ok(self
            .joint_world_transforms(&pose)?
            .into_iter()
            .map(|(_, p)| p)
            .collect())
    }

    pub fn joint_world_transforms(&self, pose: &Pose) -> Result<Vec<(Mat3, Vec3)>> {
        self.check_len(pose.joint_rot.len())?;
        let locals = pose
            .joint_rot
            .iter()
            .map(Rotation6D::decode)
            .collect::<Result<Vec<_>>>()?;
        let globals = self.globals_from_locals(&locals);
        let positions = self.positions_from_globals(&pose.root_pos, &globals);
        Ok(globals.into_iter().zip(positions).collect())
    }

    pub fn globals_from_locals(&self, locals: &[Mat3]) -> Vec<Mat3> {
        let mut globals: Vec<Mat3> = Vec::with_capacity(locals.len());
        for (j, local) in locals.iter().enumerate() {
            let g = match self.parents[j] {
                Some(p) => globals[p] * local,
                None => *local,
            };
            globals.push(g);
        }
        globals
    }

    pub fn locals_from_globals(&self, globals: &[Mat3]) -> Vec<Mat3> {
        globals
            .iter()
            .enumerate()
            .map(|(j, g)| match self.parents[j] {
                Some(p) => globals[p].transpose() * g,
                None => *g,
            })
            .collect()
    }

    /// Joint positions from a root position and *global* joint orientations.
    pub fn positions_from_globals(&self, root_pos: &Vec3, globals: &[Mat3]) -> Vec<Vec3> {
        let mut positions: Vec<Vec3> = Vec::with_capacity(globals.len());
        for j in 0..globals.len() {
            let p = match self.parents[j] {
                Some(p) => positions[p] + globals[p] * self.offsets[j],
                None => *root_pos,
            };
            positions.push(p);
        }
        positions
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.joint_count() {
            return Err(Error::Shape(format!(
                "expected {} joint rotations, got {n}",
                self.joint_count()
            )));
        }
        Ok(())
    }
}

/// Finds `[left, right]` legs by common mocap naming schemes.
pub fn detect_legs(names: &[String], parents: &[Option<usize>]) -> Option<[Leg; 2]> {
    let find = |side: &str| -> Option<Leg> {
        let lower: Vec<String> = names.iter().map(|n| n.to_ascii_lowercase()).collect();
        let hip = lower.iter().position(|n| {
            n.starts_with(side)
                && (n.ends_with("upleg") || n.ends_with("hip") || n.ends_with("thigh"))
        })?;
        let knee = (0..names.len()).find(|&c| parents[c] == Some(hip))?;
        let foot = (0..names.len()).find(|&c| parents[c] == Some(knee))?;
        Some(Leg { hip, knee, foot })
    };
    Some([find("left")?, find("right")?])
}

/// Result of [`two_joint_ik`]: world-space rotation deltas about the hip and
/// knee pivots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    pub hip_delta: Mat3,
    pub knee_delta: Mat3,
    pub clamped: bool,
    pub knee: Vec3,
    pub foot: Vec3,
}

impl IkSolution {
    /// Applies the deltas to the hip and knee global orientations. The foot
    /// keeps its global orientation.
    pub fn apply(&self, hip_global: &Mat3, knee_global: &Mat3) -> (Mat3, Mat3) {
        (
            self.hip_delta * hip_global,
            self.hip_delta * self.knee_delta * knee_global,
        )
    }

    fn identity(knee: Vec3, foot: Vec3, clamped: bool) -> Self {
        IkSolution {
            hip_delta: Mat3::identity(),
            knee_delta: Mat3::identity(),
            clamped,
            knee,
            foot,
        }
    }
}

/// Analytic two-joint IK that keeps the current hip–knee–foot bend plane.
pub fn two_joint_ik(hip: &Vec3, knee: &Vec3, foot: &Vec3, target: &Vec3) -> Result<IkSolution> {
    let upper = knee - hip;
    let lower = foot - knee;
    let (l1, l2) = (upper.norm(), lower.norm());
    if !(l1 > 1e-9 && l2 > 1e-9) {
        return Err(Error::InvalidSkeleton("zero-length leg segment".into()));
    }
    let to_target = target - hip;
    let dist = to_target.norm();
    let lo = (l1 - l2).abs() + IK_MARGIN;
    let hi = l1 + l2 - IK_MARGIN;
    let reach = dist.clamp(lo, hi);
    let clamped = reach != dist;
    let dir = if dist > 1e-12 {
        to_target / dist
    } else {
        (foot - hip).normalize()
    };
    let goal = hip + dir * reach;

    // current and desired interior knee angles
    let cos_now = ((-upper).dot(&lower) / (l1 * l2)).clamp(-1.0, 1.0);
    let angle_now = cos_now.acos();
    let cos_goal = ((l1 * l1 + l2 * l2 - reach * reach) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let angle_goal = cos_goal.acos();

    let mut bend_axis = (-upper).cross(&lower);
    if bend_axis.norm() < 1e-9 * l1 * l2 {
        // straight leg: pick the lateral axis so the knee bends forward
        let u = upper / l1;
        let lateral = if u.x.abs() < 0.9 { -Vec3::x() } else { -Vec3::z() };
        bend_axis = lateral - u * lateral.dot(&u);
    }
    let bend_axis = bend_axis.normalize();
    let knee_delta = rotation_exp(&(bend_axis * (angle_goal - angle_now)));
    let bent_foot = knee + knee_delta * lower;

    let hip_delta = crate::geometry::rotation_between(&(bent_foot - hip), &(goal - hip));
    let new_knee = hip + hip_delta * upper;
    let new_foot = hip + hip_delta * (bent_foot - hip);

    if clamped && (new_foot - target).norm() > (foot - target).norm() {
        return Ok(IkSolution::identity(*knee, *foot, true));
    }
    Ok(IkSolution {
        hip_delta,
        knee_delta,
        clamped,
        knee: new_knee,
        foot: new_foot,
    })
}

/// Interior angle at `b` of the triangle `a`–`b`–`c`.
pub fn interior_angle(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let u = a - b;
    let v = c - b;
    (u.dot(&v) / (u.norm() * v.norm())).clamp(-1.0, 1.0).acos()
}
