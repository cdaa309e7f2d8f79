//! Avatar-frame features and training sample assembly.
//!
//! Flat vector layouts (all `f64`):
//!
//! * input  = `[f_{t+1-k} .. f_{t+1}]` (10 each) · `d_{t+1}` (2) ·
//!   `[r_{t-k} .. r_t]` (2 each) · `[c_{t-k} .. c_t]` (12·J each)
//! * target = `r_{t+1}` (2) · `o_{t+1}` (6·J) · `h_{t+1}` (1) · `v_{t+1}` (3·J)
//! * aux    = `p_{t+1}` (3·J) · `f_t^p` (4) · `f_t^c` (2) · `f_{t+1}^p` (4) ·
//!   `f_{t+1}^c` (2) · hip offsets from the root (6)
//!
//! Each foot state `f_τ` lives in its own avatar frame `{τ}`; every other
//! spatial quantity of a sample is expressed in `{t}`. The root height `h`
//! stays global.

use std::ops::Range;

use crate::error::Result;
use crate::geometry::{encode_facing, encode_rotation_6d, AvatarFrame, FacingInput, Mat3, Rotation6D, Vec3};
use crate::skeleton::Skeleton;

use super::MotionClip;

pub const FOOT_STATE_DIM: usize = 10;
pub const JOINT_STATE_DIM: usize = 12;

/// Horizontal foot positions, velocities and contact flags of both feet.
/// Layout of `p`/`v`: left `(x, z)` then right `(x, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FootState {
    pub p: [f64; 4],
    pub v: [f64; 4],
    pub c: [f64; 2],
}

impl FootState {
    pub const AIRBORNE: FootState = FootState {
        p: [0.0; 4],
        v: [0.0; 4],
        c: [0.0; 2],
    };

    /// Builds a state from optional per-foot `(position, velocity)` pairs;
    /// `None` marks a swing foot and leaves its entries zero.
    pub fn from_feet(feet: [Option<([f64; 2], [f64; 2])>; 2]) -> Self {
        let mut s = FootState::AIRBORNE;
        for (i, foot) in feet.iter().enumerate() {
            if let Some((p, v)) = foot {
                s.p[2 * i..2 * i + 2].copy_from_slice(p);
                s.v[2 * i..2 * i + 2].copy_from_slice(v);
                s.c[i] = 1.0;
            }
        }
        s
    }

    pub fn in_contact(&self, foot: usize) -> bool {
        self.c[foot] > 0.5
    }

    pub fn position(&self, foot: usize) -> [f64; 2] {
        [self.p[2 * foot], self.p[2 * foot + 1]]
    }

    pub fn to_array(&self) -> [f64; FOOT_STATE_DIM] {
        let mut a = [0.0; FOOT_STATE_DIM];
        a[..4].copy_from_slice(&self.p);
        a[4..8].copy_from_slice(&self.v);
        a[8..].copy_from_slice(&self.c);
        a
    }

    pub fn from_slice(a: &[f64]) -> Self {
        let mut s = FootState::AIRBORNE;
        s.p.copy_from_slice(&a[..4]);
        s.v.copy_from_slice(&a[4..8]);
        s.c.copy_from_slice(&a[8..10]);
        s
    }
}

/// Per-joint 6D orientation, position and velocity in some avatar frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AvatarState {
    pub orient: Vec<Rotation6D>,
    pub pos: Vec<Vec3>,
    pub vel: Vec<Vec3>,
}

impl AvatarState {
    /// Appends `o` (6·J), `p` (3·J), `v` (3·J).
    pub fn write_into(&self, out: &mut Vec<f64>) {
        for o in &self.orient {
            out.extend_from_slice(&o.to_array());
        }
        for p in &self.pos {
            out.extend_from_slice(p.as_slice());
        }
        for v in &self.vel {
            out.extend_from_slice(v.as_slice());
        }
    }

    pub fn from_slice(s: &[f64], joints: usize) -> Self {
        let (o, rest) = s.split_at(6 * joints);
        let (p, v) = rest.split_at(3 * joints);
        let vec3 = |c: &[f64]| Vec3::new(c[0], c[1], c[2]);
        AvatarState {
            orient: o.chunks(6).map(Rotation6D::from_slice).collect(),
            pos: p.chunks(3).map(vec3).collect(),
            vel: v[..3 * joints].chunks(3).map(vec3).collect(),
        }
    }

    /// Re-expresses a state given in some frame `{a}` in `frame`, which is
    /// itself given in `{a}` coordinates.
    pub fn in_frame(&self, frame: &AvatarFrame) -> Result<AvatarState> {
        let orient = self
            .orient
            .iter()
            .map(|o| encode_rotation_6d(&frame.rot_to_local(&o.decode()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AvatarState {
            orient,
            pos: self.pos.iter().map(|p| frame.to_local(p)).collect(),
            vel: self.vel.iter().map(|v| frame.dir_to_local(v)).collect(),
        })
    }

    /// Re-expresses a state given in `frame` coordinates in the parent space
    /// of `frame` (the inverse of [`AvatarState::in_frame`]).
    pub fn out_of_frame(&self, frame: &AvatarFrame) -> Result<AvatarState> {
        let orient = self
            .orient
            .iter()
            .map(|o| encode_rotation_6d(&frame.rot_to_world(&o.decode()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AvatarState {
            orient,
            pos: self.pos.iter().map(|p| frame.to_world(p)).collect(),
            vel: self.vel.iter().map(|v| frame.dir_to_world(v)).collect(),
        })
    }
}

/// A denormalized network target turned into geometry. Everything is in the
/// current frame `{t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedTarget {
    pub root: [f64; 2],
    pub height: f64,
    /// Orientations re-orthonormalized; positions from FK.
    pub state: AvatarState,
    /// `{t+1}` built from the predicted hips.
    pub next_frame: AvatarFrame,
}

pub fn decode_target(skeleton: &Skeleton, layout: &FeatureLayout, target: &[f64]) -> Result<DecodedTarget> {
    let root = [target[0], target[1]];
    let height = target[layout.target_height()];
    let globals = target[layout.target_orient()]
        .chunks(6)
        .map(|c| Rotation6D::from_slice(c).decode())
        .collect::<Result<Vec<Mat3>>>()?;
    let pos = skeleton.positions_from_globals(&Vec3::new(root[0], height, root[1]), &globals);
    let vel = target[layout.target_vel()]
        .chunks(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let [lh, rh] = skeleton.hips();
    let next_frame = AvatarFrame::from_hips(&pos[lh], &pos[rh], &pos[0])?;
    let orient = globals
        .iter()
        .map(encode_rotation_6d)
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodedTarget {
        root,
        height,
        state: AvatarState { orient, pos, vel },
        next_frame,
    })
}

/// Offsets of each block inside the flat sample vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub k: usize,
    pub joints: usize,
}

impl FeatureLayout {
    pub fn new(k: usize, joints: usize) -> Self {
        FeatureLayout { k, joints }
    }

    pub fn steps(&self) -> usize {
        self.k + 1
    }

    pub fn state_dim(&self) -> usize {
        JOINT_STATE_DIM * self.joints
    }

    /// Foot state `i` of the history; `i == k` is `f_{t+1}`.
    pub fn foot(&self, i: usize) -> Range<usize> {
        let s = i * FOOT_STATE_DIM;
        s..s + FOOT_STATE_DIM
    }

    pub fn feet(&self) -> Range<usize> {
        0..self.steps() * FOOT_STATE_DIM
    }

    pub fn facing(&self) -> Range<usize> {
        let s = self.feet().end;
        s..s + 2
    }

    pub fn root(&self, i: usize) -> Range<usize> {
        let s = self.facing().end + 2 * i;
        s..s + 2
    }

    pub fn roots(&self) -> Range<usize> {
        let s = self.facing().end;
        s..s + 2 * self.steps()
    }

    pub fn state(&self, i: usize) -> Range<usize> {
        let s = self.roots().end + i * self.state_dim();
        s..s + self.state_dim()
    }

    pub fn states(&self) -> Range<usize> {
        let s = self.roots().end;
        s..s + self.steps() * self.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.states().end
    }

    pub fn target_root(&self) -> Range<usize> {
        0..2
    }

    /// The reduced state `c̃ = (o, h, v)`.
    pub fn target_state(&self) -> Range<usize> {
        2..self.target_dim()
    }

    pub fn target_orient(&self) -> Range<usize> {
        2..2 + 6 * self.joints
    }

    pub fn target_height(&self) -> usize {
        2 + 6 * self.joints
    }

    pub fn target_vel(&self) -> Range<usize> {
        let s = self.target_height() + 1;
        s..s + 3 * self.joints
    }

    pub fn reduced_state_dim(&self) -> usize {
        9 * self.joints + 1
    }

    pub fn target_dim(&self) -> usize {
        2 + self.reduced_state_dim()
    }

    pub fn aux_positions(&self) -> Range<usize> {
        0..3 * self.joints
    }

    pub fn aux_foot_now_p(&self) -> Range<usize> {
        let s = 3 * self.joints;
        s..s + 4
    }

    pub fn aux_foot_now_c(&self) -> Range<usize> {
        let s = 3 * self.joints + 4;
        s..s + 2
    }

    pub fn aux_foot_next_p(&self) -> Range<usize> {
        let s = 3 * self.joints + 6;
        s..s + 4
    }

    pub fn aux_foot_next_c(&self) -> Range<usize> {
        let s = 3 * self.joints + 10;
        s..s + 2
    }

    pub fn aux_hip_offsets(&self) -> Range<usize> {
        let s = 3 * self.joints + 12;
        s..s + 6
    }

    pub fn aux_dim(&self) -> usize {
        3 * self.joints + 18
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub aux: Vec<f64>,
}

/// Foot state of frame `tau` in `{tau}`, zeroed for swing feet.
pub fn extract_foot_state(clip: &MotionClip, tau: usize) -> FootState {
    let frame = clip.frame(tau);
    let contacts = clip.contacts(tau);
    let feet = clip.skeleton().feet();
    let mut sides = [None, None];
    for (i, &f) in feet.iter().enumerate() {
        if !contacts[i] {
            continue;
        }
        let p = frame.to_local(&clip.positions(tau)[f]);
        let v = frame.dir_to_local(&clip.velocities(tau)[f]);
        sides[i] = Some(([p.x, p.z], [v.x, v.z]));
    }
    FootState::from_feet(sides)
}

/// `d_{t+1}`: heading change from frame `t` to frame `t + 1`.
pub fn extract_facing(clip: &MotionClip, t: usize) -> FacingInput {
    encode_facing(clip.frame(t + 1).yaw, clip.frame(t).yaw)
}

/// Joint state of frame `tau` expressed in `frame`.
pub fn avatar_state_in(clip: &MotionClip, tau: usize, frame: &AvatarFrame) -> AvatarState {
    let orient = clip
        .world_rotations(tau)
        .iter()
        .map(|r| {
            encode_rotation_6d(&frame.rot_to_local(r))
                .expect("world rotations built from proper rotations")
        })
        .collect();
    AvatarState {
        orient,
        pos: clip.positions(tau).iter().map(|p| frame.to_local(p)).collect(),
        vel: clip.velocities(tau).iter().map(|v| frame.dir_to_local(v)).collect(),
    }
}

/// `c_{t-k..t}` expressed in `{t}`.
pub fn build_avatar_state(clip: &MotionClip, t: usize, k: usize) -> Vec<AvatarState> {
    let frame = *clip.frame(t);
    (t - k..=t).map(|tau| avatar_state_in(clip, tau, &frame)).collect()
}

/// One sample per `t` in `[k, len - 2]`.
pub fn build_samples(clip: &MotionClip, k: usize) -> Vec<TrainingSample> {
    if clip.len() < k + 2 {
        log::warn!(
            "clip '{}' has {} frames, need at least {} for k = {k}; no samples",
            clip.name,
            clip.len(),
            k + 2
        );
        return Vec::new();
    }
    let layout = FeatureLayout::new(k, clip.skeleton().joint_count());
    (k..clip.len() - 1).map(|t| build_sample(clip, &layout, t)).collect()
}

pub fn build_sample(clip: &MotionClip, layout: &FeatureLayout, t: usize) -> TrainingSample {
    let k = layout.k;
    let frame = *clip.frame(t);
    let mut input = Vec::with_capacity(layout.input_dim());
    for tau in t + 1 - k..=t + 1 {
        input.extend_from_slice(&extract_foot_state(clip, tau).to_array());
    }
    let d = extract_facing(clip, t);
    input.extend_from_slice(&[d.sin, d.cos]);
    for tau in t - k..=t {
        let r = frame.to_local(&clip.root_position(tau));
        input.extend_from_slice(&[r.x, r.z]);
    }
    for state in build_avatar_state(clip, t, k) {
        state.write_into(&mut input);
    }
    debug_assert_eq!(input.len(), layout.input_dim());

    let next = avatar_state_in(clip, t + 1, &frame);
    let root_next = frame.to_local(&clip.root_position(t + 1));
    let mut target = Vec::with_capacity(layout.target_dim());
    target.extend_from_slice(&[root_next.x, root_next.z]);
    for o in &next.orient {
        target.extend_from_slice(&o.to_array());
    }
    target.push(clip.root_position(t + 1).y);
    for v in &next.vel {
        target.extend_from_slice(v.as_slice());
    }

    let mut aux = Vec::with_capacity(layout.aux_dim());
    for p in &next.pos {
        aux.extend_from_slice(p.as_slice());
    }
    let now = extract_foot_state(clip, t);
    let then = extract_foot_state(clip, t + 1);
    aux.extend_from_slice(&now.p);
    aux.extend_from_slice(&now.c);
    aux.extend_from_slice(&then.p);
    aux.extend_from_slice(&then.c);
    for off in clip.skeleton().hip_offsets_from_root() {
        aux.extend_from_slice(off.as_slice());
    }
    TrainingSample { input, target, aux }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{decode_rotation_6d, Mat3};
    use crate::synth::{self, WalkParams};

    #[test]
    fn eight_frames_give_two_samples() {
        let clip = synth::walk_cycle(&WalkParams::default()).slice(0..8).unwrap();
        let samples = build_samples(&clip, 5);
        assert_eq!(samples.len(), 2);
        let layout = FeatureLayout::new(5, clip.skeleton().joint_count());
        for s in &samples {
            assert_eq!(s.input.len(), layout.input_dim());
            assert_eq!(s.target.len(), layout.target_dim());
            assert_eq!(s.aux.len(), layout.aux_dim());
        }
        assert!(build_samples(&clip.slice(0..6).unwrap(), 5).is_empty());
    }

    #[test]
    fn layout_blocks_tile_the_vectors() {
        let l = FeatureLayout::new(5, 22);
        assert_eq!(l.foot(5).end, l.facing().start);
        assert_eq!(l.root(5).end, l.state(0).start);
        assert_eq!(l.state(5).end, l.input_dim());
        assert_eq!(l.input_dim(), 6 * 10 + 2 + 6 * 2 + 6 * 22 * 12);
        assert_eq!(l.target_vel().end, l.target_dim());
        assert_eq!(l.target_dim() - 2, 22 * 6 + 1 + 22 * 3);
        assert_eq!(l.aux_hip_offsets().end, l.aux_dim());
    }

    #[test]
    fn decoded_ground_truth_matches_clip() {
        let clip = synth::walk_cycle(&WalkParams::default());
        let layout = FeatureLayout::new(2, clip.skeleton().joint_count());
        for t in [2, 20, 50] {
            let s = build_sample(&clip, &layout, t);
            let d = decode_target(clip.skeleton(), &layout, &s.target).unwrap();
            let frame = *clip.frame(t);
            let truth = avatar_state_in(&clip, t + 1, &frame);
            for (a, b) in d.state.pos.iter().zip(&truth.pos) {
                assert!((a - b).norm() < 1e-9);
            }
            let next = frame.relative(clip.frame(t + 1));
            assert!((next.origin - d.next_frame.origin).norm() < 1e-9);
            assert!((next.yaw - d.next_frame.yaw).abs() < 1e-9);
            let back = d.state.in_frame(&d.next_frame).unwrap().out_of_frame(&d.next_frame).unwrap();
            for (a, b) in back.orient.iter().zip(&d.state.orient) {
                for (x, y) in a.to_array().iter().zip(b.to_array()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            let flat = {
                let mut v = Vec::new();
                truth.write_into(&mut v);
                v
            };
            assert_eq!(AvatarState::from_slice(&flat, layout.joints), truth);
        }
    }

    #[test]
    fn walk_in_place_has_no_root_motion() {
        let clip = synth::walk_cycle(&WalkParams {
            speed: 0.0,
            ..WalkParams::default()
        });
        for s in build_samples(&clip, 5) {
            assert!(s.target[0].abs() < 1e-9 && s.target[1].abs() < 1e-9);
        }
    }

    #[test]
    fn straight_walk_faces_forward_and_turning_walk_turns_uniformly() {
        let straight = synth::walk_cycle(&WalkParams {
            yaw_sway: 0.0,
            ..WalkParams::default()
        });
        for t in 0..straight.len() - 1 {
            let d = extract_facing(&straight, t);
            assert!(d.sin.abs() < 1e-12 && (d.cos - 1.0).abs() < 1e-12);
        }
        let deg = 1f64.to_radians();
        let turning = synth::walk_cycle(&WalkParams {
            yaw_sway: 0.0,
            roll_sway: 0.0,
            turn_rate: deg * 30.0,
            ..WalkParams::default()
        });
        for t in 0..turning.len() - 1 {
            let d = extract_facing(&turning, t);
            assert!((d.sin - deg.sin()).abs() < 1e-9, "frame {t}: {d:?}");
            assert!((d.cos - deg.cos()).abs() < 1e-9);
        }
    }

    #[test]
    fn facing_delta_stays_wrapped_across_pi() {
        let deg = 1f64.to_radians();
        let turning = synth::walk_cycle(&WalkParams {
            turn_rate: deg * 30.0 * 7.0,
            duration: 3.0,
            ..WalkParams::default()
        });
        let mut crossed = false;
        for t in 0..turning.len() - 1 {
            let (a, b) = (turning.frame(t).yaw, turning.frame(t + 1).yaw);
            crossed |= (a - b).abs() > std::f64::consts::PI;
            assert!(extract_facing(&turning, t).angle().abs() < std::f64::consts::PI);
        }
        assert!(crossed);
    }

    #[test]
    fn foot_state_zeroes_swing_and_maps_into_frame() {
        let clip = synth::walk_cycle(&WalkParams::default());
        for tau in 0..clip.len() {
            let s = extract_foot_state(&clip, tau);
            for foot in 0..2 {
                if s.c[foot] == 0.0 {
                    assert_eq!(&s.p[2 * foot..2 * foot + 2], &[0.0, 0.0]);
                    assert_eq!(&s.v[2 * foot..2 * foot + 2], &[0.0, 0.0]);
                } else {
                    let f = clip.skeleton().feet()[foot];
                    let local = clip.frame(tau).to_local(&clip.positions(tau)[f]);
                    assert!((local.x - s.p[2 * foot]).abs() < 1e-12);
                    assert!((local.z - s.p[2 * foot + 1]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn standing_feet_under_root_and_ahead() {
        let clip = synth::standing_clip(8, [0.0, 0.0], 0.0);
        let s = extract_foot_state(&clip, 4);
        assert_eq!(s.c, [1.0, 1.0]);
        assert!(s.v.iter().all(|v| v.abs() < 1e-12));
        // feet sit laterally at the hip width, directly beside the root
        assert!(s.p[1].abs() < 1e-12 && s.p[3].abs() < 1e-12);

        // push the left foot 0.3 m forward along local z
        let mut clip2 = clip.clone();
        clip2 = synth::with_foot_offset(&clip2, 0, Vec3::new(0.0, 0.0, 0.3));
        let s = extract_foot_state(&clip2, 4);
        assert!((s.p[1] - 0.3).abs() < 1e-9, "{s:?}");

        let airborne = synth::standing_clip(8, [0.0, 0.0], 0.5);
        assert_eq!(extract_foot_state(&airborne, 3), FootState::AIRBORNE);
    }

    #[test]
    fn static_history_has_zero_velocity_and_aligned_frame_is_identity() {
        let clip = synth::standing_clip(10, [0.0, 0.0], 0.0);
        let states = build_avatar_state(&clip, 7, 5);
        assert_eq!(states.len(), 6);
        for s in &states {
            assert!(s.vel.iter().all(|v| v.norm() < 1e-12));
        }
        // frame aligned with the world at the origin: values equal global ones
        let frame = clip.frame(7);
        assert!(frame.yaw.abs() < 1e-12 && frame.origin.norm() < 1e-12);
        for (p, q) in states[5].pos.iter().zip(clip.positions(7)) {
            assert!((p - q).norm() < 1e-12);
        }
    }

    #[test]
    fn rotating_clip_leaves_avatar_states_unchanged() {
        let clip = synth::walk_cycle(&WalkParams::default());
        let turned = clip.transformed(std::f64::consts::FRAC_PI_2, [0.0, 0.0]).unwrap();
        for t in [5, 20, 40] {
            let a = build_avatar_state(&clip, t, 5);
            let b = build_avatar_state(&turned, t, 5);
            let (mut va, mut vb) = (Vec::new(), Vec::new());
            a.iter().for_each(|s| s.write_into(&mut va));
            b.iter().for_each(|s| s.write_into(&mut vb));
            for (x, y) in va.iter().zip(&vb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn targets_are_consistent_with_fk() {
        let clip = synth::walk_cycle(&WalkParams::default());
        let layout = FeatureLayout::new(5, clip.skeleton().joint_count());
        for s in build_samples(&clip, 5) {
            let globals: Vec<Mat3> = s.target[layout.target_orient()]
                .chunks(6)
                .map(|c| decode_rotation_6d(&Rotation6D::from_slice(c)).unwrap())
                .collect();
            let root = Vec3::new(s.target[0], s.target[layout.target_height()], s.target[1]);
            let fk = clip.skeleton().positions_from_globals(&root, &globals);
            for (j, p) in fk.iter().enumerate() {
                let q = Vec3::from_column_slice(&s.aux[3 * j..3 * j + 3]);
                assert!((p - q).norm() < 1e-6);
            }
        }
    }
}
