//! Procedural skeletons and clips: a parametric walk cycle, a standing pose
//! and IK-based foot edits. Used by tests, benchmarks and the `synth-walk`
//! command.

use std::f64::consts::PI;

use crate::geometry::{axis_rotation, yaw_matrix, Mat3, Vec3};
use crate::motion::MotionClip;
use crate::skeleton::{Leg, Skeleton, IK_MARGIN};

fn build(joints: &[(&str, Option<usize>, [f64; 3])]) -> Skeleton {
    let names = joints.iter().map(|j| j.0.to_string()).collect();
    let parents = joints.iter().map(|j| j.1).collect();
    let offsets = joints.iter().map(|j| Vec3::from(j.2)).collect();
    Skeleton::with_detected_legs(names, parents, offsets).expect("built-in skeleton is valid")
}

/// Eight-joint biped: hips, two three-joint legs and a spine.
pub fn biped_skeleton() -> Skeleton {
    build(&[
        ("Hips", None, [0.0, 0.0, 0.0]),
        ("LeftUpLeg", Some(0), [-0.1, -0.05, 0.0]),
        ("LeftLeg", Some(1), [0.0, -0.42, 0.0]),
        ("LeftFoot", Some(2), [0.0, -0.42, 0.0]),
        ("RightUpLeg", Some(0), [0.1, -0.05, 0.0]),
        ("RightLeg", Some(4), [0.0, -0.42, 0.0]),
        ("RightFoot", Some(5), [0.0, -0.42, 0.0]),
        ("Spine", Some(0), [0.0, 0.3, 0.0]),
    ])
}

/// 22-joint humanoid with the joint layout of common mocap rigs.
pub fn humanoid_skeleton() -> Skeleton {
    build(&[
        ("Hips", None, [0.0, 0.0, 0.0]),
        ("LeftUpLeg", Some(0), [-0.1, -0.05, 0.0]),
        ("LeftLeg", Some(1), [0.0, -0.42, 0.0]),
        ("LeftFoot", Some(2), [0.0, -0.42, 0.0]),
        ("LeftToe", Some(3), [0.0, -0.05, 0.12]),
        ("RightUpLeg", Some(0), [0.1, -0.05, 0.0]),
        ("RightLeg", Some(5), [0.0, -0.42, 0.0]),
        ("RightFoot", Some(6), [0.0, -0.42, 0.0]),
        ("RightToe", Some(7), [0.0, -0.05, 0.12]),
        ("Spine", Some(0), [0.0, 0.1, 0.0]),
        ("Spine1", Some(9), [0.0, 0.12, 0.0]),
        ("Spine2", Some(10), [0.0, 0.12, 0.0]),
        ("Neck", Some(11), [0.0, 0.15, 0.0]),
        ("Head", Some(12), [0.0, 0.1, 0.02]),
        ("LeftShoulder", Some(11), [-0.05, 0.1, 0.0]),
        ("LeftArm", Some(14), [-0.12, 0.0, 0.0]),
        ("LeftForeArm", Some(15), [0.0, -0.28, 0.0]),
        ("LeftHand", Some(16), [0.0, -0.25, 0.0]),
        ("RightShoulder", Some(11), [0.05, 0.1, 0.0]),
        ("RightArm", Some(18), [0.12, 0.0, 0.0]),
        ("RightForeArm", Some(19), [0.0, -0.28, 0.0]),
        ("RightHand", Some(20), [0.0, -0.25, 0.0]),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkParams {
    /// m/s along the heading
    pub speed: f64,
    /// seconds per gait cycle (two steps)
    pub period: f64,
    pub duration: f64,
    /// fraction of the cycle each foot is planted
    pub stance: f64,
    /// swing apex above the ankle height, meters
    pub lift: f64,
    /// foot joint height while planted
    pub ankle: f64,
    pub root_height: f64,
    /// vertical root oscillation amplitude (twice per cycle)
    pub bob: f64,
    /// pelvis yaw oscillation amplitude, radians
    pub yaw_sway: f64,
    /// pelvis roll oscillation amplitude, radians
    pub roll_sway: f64,
    /// heading change, rad/s
    pub turn_rate: f64,
    /// lateral footprint distance from the path centerline
    pub step_width: f64,
    pub frame_rate: f64,
}

impl Default for WalkParams {
    fn default() -> Self {
        WalkParams {
            speed: 1.0,
            period: 1.0,
            duration: 2.0,
            stance: 0.6,
            lift: 0.12,
            ankle: 0.06,
            root_height: 0.86,
            bob: 0.01,
            yaw_sway: 0.05,
            roll_sway: 0.03,
            turn_rate: 0.0,
            step_width: 0.1,
            frame_rate: 30.0,
        }
    }
}

impl WalkParams {
    fn heading(&self, t: f64) -> f64 {
        self.turn_rate * t
    }

    /// Ground-plane position of the path centerline.
    fn path(&self, t: f64) -> Vec3 {
        let w = self.turn_rate;
        if w.abs() < 1e-12 {
            Vec3::new(0.0, 0.0, self.speed * t)
        } else {
            let r = self.speed / w;
            Vec3::new(r * (1.0 - (w * t).cos()), 0.0, r * (w * t).sin())
        }
    }

    fn footprint(&self, side: f64, center: f64) -> Vec3 {
        let h = self.heading(center);
        self.path(center) + Vec3::new(h.cos(), 0.0, -h.sin()) * (side * self.step_width)
    }

    /// World-space foot joint position; `phase_offset` is 0 for the left foot
    /// and 0.5 for the right.
    fn foot(&self, side: f64, phase_offset: f64, t: f64) -> Vec3 {
        let u = t / self.period - phase_offset;
        let n = u.floor();
        let frac = u - n;
        let center = |n: f64| (n + phase_offset + self.stance / 2.0) * self.period;
        let planted = self.footprint(side, center(n));
        if frac < self.stance {
            return planted + Vec3::new(0.0, self.ankle, 0.0);
        }
        let next = self.footprint(side, center(n + 1.0));
        let w = (frac - self.stance) / (1.0 - self.stance);
        let s = w * w * (3.0 - 2.0 * w);
        let mut p = planted.lerp(&next, s);
        p.y = self.ankle + self.lift * (PI * w).sin();
        p
    }
}

/// Rotation taking `rest` to the direction of `world`, with the rest x axis
/// mapped as close to `lateral` as the constraint allows.
fn align(rest: &Vec3, world: &Vec3, lateral: &Vec3) -> Mat3 {
    let frame = |d: &Vec3, side: &Vec3| {
        let e1 = d.normalize();
        let e2 = (side - e1 * e1.dot(side)).normalize();
        Mat3::from_columns(&[e1, e2, e1.cross(&e2)])
    };
    frame(world, lateral) * frame(rest, &Vec3::x()).transpose()
}

/// Poses one leg so the foot joint lands on `target`, bending the knee toward
/// `forward`. Only the hip and knee globals are changed.
fn solve_leg(
    skeleton: &Skeleton,
    leg: Leg,
    hip_pos: &Vec3,
    target: &Vec3,
    forward: &Vec3,
    lateral: &Vec3,
    globals: &mut [Mat3],
) {
    let l1 = skeleton.offset(leg.knee).norm();
    let l2 = skeleton.offset(leg.foot).norm();
    let to = target - hip_pos;
    let d = to
        .norm()
        .clamp((l1 - l2).abs() + IK_MARGIN, l1 + l2 - IK_MARGIN);
    let u = to.normalize();
    let a = (l1 * l1 - l2 * l2 + d * d) / (2.0 * d);
    let h = (l1 * l1 - a * a).max(0.0).sqrt();
    let mut bend = forward - u * u.dot(forward);
    if bend.norm() < 1e-9 {
        bend = lateral.cross(&u);
    }
    let knee = hip_pos + u * a + bend.normalize() * h;
    let foot = hip_pos + u * d;
    globals[leg.hip] = align(&skeleton.offset(leg.knee), &(knee - hip_pos), lateral);
    globals[leg.knee] = align(&skeleton.offset(leg.foot), &(foot - knee), lateral);
}

/// Joints without an explicit global take their parent's orientation.
fn propagate(skeleton: &Skeleton, globals: &mut [Mat3], fixed: &[bool]) {
    for j in 1..globals.len() {
        if !fixed[j] {
            globals[j] = globals[skeleton.parent(j).expect("non-root joint")];
        }
    }
}

/// Globals for a root orientation and world foot targets.
fn pose_frame(
    skeleton: &Skeleton,
    root: &Vec3,
    root_rot: &Mat3,
    yaw: f64,
    feet: [Vec3; 2],
) -> Vec<Mat3> {
    let j = skeleton.joint_count();
    let mut globals = vec![*root_rot; j];
    let mut fixed = vec![false; j];
    fixed[0] = true;
    propagate(skeleton, &mut globals, &fixed);
    let positions = skeleton.positions_from_globals(root, &globals);
    let forward = yaw_matrix(yaw) * Vec3::z();
    let lateral = root_rot.column(0).into_owned();
    for (leg, target) in skeleton.legs().into_iter().zip(feet) {
        solve_leg(skeleton, leg, &positions[leg.hip], &target, &forward, &lateral, &mut globals);
        globals[leg.foot] = yaw_matrix(yaw);
        fixed[leg.hip] = true;
        fixed[leg.knee] = true;
        fixed[leg.foot] = true;
    }
    propagate(skeleton, &mut globals, &fixed);
    globals
}

/// Walk cycle on the eight-joint biped.
pub fn walk_cycle(params: &WalkParams) -> MotionClip {
    walk_cycle_on(&biped_skeleton(), params)
}

pub fn walk_cycle_on(skeleton: &Skeleton, params: &WalkParams) -> MotionClip {
    let frames = (params.duration * params.frame_rate).round().max(1.0) as usize;
    let mut roots = Vec::with_capacity(frames);
    let mut globals = Vec::with_capacity(frames);
    for i in 0..frames {
        let t = i as f64 / params.frame_rate;
        let cycle = 2.0 * PI * t / params.period;
        let yaw = params.heading(t) + params.yaw_sway * cycle.sin();
        let roll = params.roll_sway * cycle.sin();
        let root_rot = yaw_matrix(yaw) * axis_rotation(2, roll);
        let mut root = params.path(t);
        root.y = params.root_height + params.bob * (2.0 * cycle).cos();
        let feet = [params.foot(-1.0, 0.0, t), params.foot(1.0, 0.5, t)];
        globals.push(pose_frame(skeleton, &root, &root_rot, yaw, feet));
        roots.push(root);
    }
    MotionClip::from_world_rotations("walk", skeleton.clone(), params.frame_rate, roots, globals)
        .expect("walk cycle frames are consistent")
}

/// Motionless bent-knee stance at `origin` (ground-plane x, z) facing +z,
/// both feet raised `lift` above ankle height.
pub fn standing_clip(frames: usize, origin: [f64; 2], lift: f64) -> MotionClip {
    let skeleton = biped_skeleton();
    let p = WalkParams::default();
    let root = Vec3::new(origin[0], p.root_height, origin[1]);
    let foot = |side: f64| Vec3::new(origin[0] + side * p.step_width, p.ankle + lift, origin[1]);
    let globals = pose_frame(&skeleton, &root, &Mat3::identity(), 0.0, [foot(-1.0), foot(1.0)]);
    MotionClip::from_world_rotations(
        "stand",
        skeleton,
        p.frame_rate,
        vec![root; frames],
        vec![globals; frames],
    )
    .expect("standing frames are consistent")
}

/// Moves foot `foot` (0 = left) by a world-space `offset` in every frame,
/// re-solving that leg.
pub fn with_foot_offset(clip: &MotionClip, foot: usize, offset: Vec3) -> MotionClip {
    let skeleton = clip.skeleton();
    let leg = skeleton.legs()[foot];
    let mut roots = Vec::with_capacity(clip.len());
    let mut all = Vec::with_capacity(clip.len());
    for i in 0..clip.len() {
        let mut globals = clip.world_rotations(i).to_vec();
        let positions = clip.positions(i);
        let frame = clip.frame(i);
        let target = positions[leg.foot] + offset;
        let lateral = globals[0].column(0).into_owned();
        solve_leg(
            skeleton,
            leg,
            &positions[leg.hip],
            &target,
            &frame.z_axis(),
            &lateral,
            &mut globals,
        );
        roots.push(clip.root_position(i));
        all.push(globals);
    }
    MotionClip::from_world_rotations(clip.name.clone(), skeleton.clone(), clip.frame_rate(), roots, all)
        .expect("edited frames are consistent")
        .with_thresholds(clip.thresholds())
}
