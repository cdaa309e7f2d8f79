//! Motion clips, contact labels, per-frame features and training samples.

pub mod bvh;
pub mod dataset;
pub mod features;

pub use dataset::{build_dataset, compute_normalization, load_dataset, serialize_dataset, Dataset, Normalization, Stats};
pub use features::{
    build_avatar_state, build_samples, extract_facing, extract_foot_state, AvatarState,
    FeatureLayout, FootState, TrainingSample,
};

use crate::error::{Error, Result};
use nalgebra::{Rotation3, UnitQuaternion};

use crate::geometry::{AvatarFrame, Mat3, Vec3};
use crate::skeleton::Skeleton;

/// Height/speed thresholds below which a foot counts as planted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactThresholds {
    /// meters
    pub height: f64,
    /// m/s
    pub speed: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        ContactThresholds {
            height: 0.1,
            speed: 0.24,
        }
    }
}

impl ContactThresholds {
    pub fn is_contact(&self, height: f64, speed: f64) -> bool {
        height < self.height && speed < self.speed
    }
}

/// A skeleton animation with world-space caches.
#[derive(Debug, Clone)]
pub struct MotionClip {
    pub name: String,
    skeleton: Skeleton,
    frame_rate: f64,
    root_positions: Vec<Vec3>,
    local_rotations: Vec<Vec<Mat3>>,
    world_rotations: Vec<Vec<Mat3>>,
    positions: Vec<Vec<Vec3>>,
    velocities: Vec<Vec<Vec3>>,
    frames: Vec<AvatarFrame>,
    contacts: Vec<[bool; 2]>,
    thresholds: ContactThresholds,
}

impl MotionClip {
    pub fn new(
        name: impl Into<String>,
        skeleton: Skeleton,
        frame_rate: f64,
        root_positions: Vec<Vec3>,
        local_rotations: Vec<Vec<Mat3>>,
    ) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Format(format!("invalid frame rate {frame_rate}")));
        }
        if root_positions.len() != local_rotations.len() {
            return Err(Error::Shape(format!(
                "{} root positions vs {} rotation frames",
                root_positions.len(),
                local_rotations.len()
            )));
        }
        let j = skeleton.joint_count();
        if let Some(bad) = local_rotations.iter().position(|r| r.len() != j) {
            return Err(Error::Shape(format!(
                "frame {bad} has {} rotations, skeleton has {j} joints",
                local_rotations[bad].len()
            )));
        }
        let world_rotations: Vec<Vec<Mat3>> = local_rotations
            .iter()
            .map(|l| skeleton.globals_from_locals(l))
            .collect();
        let positions: Vec<Vec<Vec3>> = root_positions
            .iter()
            .zip(&world_rotations)
            .map(|(root, g)| skeleton.positions_from_globals(root, g))
            .collect();
        let velocities = finite_difference(&positions, frame_rate);
        let [lh, rh] = skeleton.hips();
        let mut frames = Vec::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            let frame = match AvatarFrame::from_hips(&p[lh], &p[rh], &p[0]) {
                Ok(f) => f,
                Err(_) => {
                    log::warn!("frame {i}: degenerate hip axis, reusing previous heading");
                    let yaw = frames.last().map(|f: &AvatarFrame| f.yaw).unwrap_or(0.0);
                    AvatarFrame::new(crate::geometry::Vec2::new(p[0].x, p[0].z), yaw)
                }
            };
            frames.push(frame);
        }
        let mut clip = MotionClip {
            name: name.into(),
            skeleton,
            frame_rate,
            root_positions,
            local_rotations,
            world_rotations,
            positions,
            velocities,
            frames,
            contacts: Vec::new(),
            thresholds: ContactThresholds::default(),
        };
        clip.contacts = label_contacts(&clip, clip.thresholds);
        Ok(clip)
    }

    /// Builds a clip from global joint orientations.
    pub fn from_world_rotations(
        name: impl Into<String>,
        skeleton: Skeleton,
        frame_rate: f64,
        root_positions: Vec<Vec3>,
        world_rotations: Vec<Vec<Mat3>>,
    ) -> Result<Self> {
        let locals = world_rotations
            .iter()
            .map(|g| skeleton.locals_from_globals(g))
            .collect();
        MotionClip::new(name, skeleton, frame_rate, root_positions, locals)
    }

    pub fn with_thresholds(mut self, thresholds: ContactThresholds) -> Self {
        self.thresholds = thresholds;
        self.contacts = label_contacts(&self, thresholds);
        self
    }

    pub fn len(&self) -> usize {
        self.root_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.root_positions.is_empty()
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn thresholds(&self) -> ContactThresholds {
        self.thresholds
    }

    pub fn root_position(&self, i: usize) -> Vec3 {
        self.root_positions[i]
    }

    pub fn local_rotations(&self, i: usize) -> &[Mat3] {
        &self.local_rotations[i]
    }

    pub fn world_rotations(&self, i: usize) -> &[Mat3] {
        &self.world_rotations[i]
    }

    pub fn positions(&self, i: usize) -> &[Vec3] {
        &self.positions[i]
    }

    pub fn velocities(&self, i: usize) -> &[Vec3] {
        &self.velocities[i]
    }

    pub fn frame(&self, i: usize) -> &AvatarFrame {
        &self.frames[i]
    }

    pub fn contacts(&self, i: usize) -> [bool; 2] {
        self.contacts[i]
    }

    pub fn all_contacts(&self) -> &[[bool; 2]] {
        &self.contacts
    }

    /// Frames `range` as a new clip. Velocities at the new first frame are
    /// recomputed from the slice itself.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<MotionClip> {
        MotionClip::new(
            self.name.clone(),
            self.skeleton.clone(),
            self.frame_rate,
            self.root_positions[range.clone()].to_vec(),
            self.local_rotations[range].to_vec(),
        )
        .map(|c| c.with_thresholds(self.thresholds))
    }

    /// Resamples to `frame_rate` with linear root interpolation and slerped
    /// local rotations. Thresholds are kept.
    pub fn resample(&self, frame_rate: f64) -> Result<MotionClip> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Format(format!("invalid frame rate {frame_rate}")));
        }
        if (frame_rate - self.frame_rate).abs() < 1e-9 || self.len() < 2 {
            let mut c = self.clone();
            c.frame_rate = frame_rate;
            return MotionClip::new(c.name, c.skeleton, frame_rate, c.root_positions, c.local_rotations)
                .map(|c| c.with_thresholds(self.thresholds));
        }
        let duration = (self.len() - 1) as f64 / self.frame_rate;
        let n = (duration * frame_rate + 1e-9).floor() as usize + 1;
        let quat = |m: &Mat3| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        let mut roots = Vec::with_capacity(n);
        let mut locals = Vec::with_capacity(n);
        for i in 0..n {
            let x = i as f64 / frame_rate * self.frame_rate;
            let a = (x.floor() as usize).min(self.len() - 2);
            let w = x - a as f64;
            roots.push(self.root_positions[a].lerp(&self.root_positions[a + 1], w));
            locals.push(
                self.local_rotations[a]
                    .iter()
                    .zip(&self.local_rotations[a + 1])
                    .map(|(p, q)| *quat(p).slerp(&quat(q), w).to_rotation_matrix().matrix())
                    .collect(),
            );
        }
        MotionClip::new(self.name.clone(), self.skeleton.clone(), frame_rate, roots, locals)
            .map(|c| c.with_thresholds(self.thresholds))
    }

    /// Applies a ground-plane rigid transform (yaw about the world origin,
    /// then a horizontal shift) to the whole clip.
    pub fn transformed(&self, yaw: f64, shift: [f64; 2]) -> Result<MotionClip> {
        let r = crate::geometry::yaw_matrix(yaw);
        let t = Vec3::new(shift[0], 0.0, shift[1]);
        let roots = self.root_positions.iter().map(|p| r * p + t).collect();
        let locals = self
            .local_rotations
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l[0] = r * l[0];
                l
            })
            .collect();
        MotionClip::new(self.name.clone(), self.skeleton.clone(), self.frame_rate, roots, locals)
            .map(|c| c.with_thresholds(self.thresholds))
    }
}

/// Backward differences scaled by the frame rate; frame 0 copies frame 1.
pub fn finite_difference(positions: &[Vec<Vec3>], frame_rate: f64) -> Vec<Vec<Vec3>> {
    let n = positions.len();
    let mut vel: Vec<Vec<Vec3>> = Vec::with_capacity(n);
    for i in 1..n {
        vel.push(
            positions[i]
                .iter()
                .zip(&positions[i - 1])
                .map(|(a, b)| (a - b) * frame_rate)
                .collect(),
        );
    }
    match n {
        0 => {}
        1 => vel.push(vec![Vec3::zeros(); positions[0].len()]),
        _ => vel.insert(0, vel[0].clone()),
    }
    vel
}

/// Per-frame `[left, right]` contact flags: foot height and speed both strictly
/// below the thresholds.
pub fn label_contacts(clip: &MotionClip, thresholds: ContactThresholds) -> Vec<[bool; 2]> {
    let feet = clip.skeleton.feet();
    (0..clip.len())
        .map(|i| {
            feet.map(|f| {
                thresholds.is_contact(clip.positions[i][f].y, clip.velocities[i][f].norm())
            })
        })
        .collect()
}

/// Theme and subject parsed from a LaFAN1-style file name such as
/// `walk1_subject5.bvh`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipTag {
    pub theme: String,
    pub subject: Option<u32>,
}

impl ClipTag {
    pub fn from_file_name(name: &str) -> ClipTag {
        let stem = name.rsplit(['/', '\\']).next().unwrap_or(name);
        let stem = stem.strip_suffix(".bvh").unwrap_or(stem);
        let theme: String = stem.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
        let subject = stem.find("subject").and_then(|i| {
            stem[i + "subject".len()..]
                .chars()
                .take_while(|c| c.is_ascii_digit())
                .collect::<String>()
                .parse()
                .ok()
        });
        ClipTag {
            theme: theme.to_ascii_lowercase(),
            subject,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn resampling_keeps_duration_and_end_poses() {
        let clip = synth::walk_cycle(&synth::WalkParams::default());
        let same = clip.resample(30.0).unwrap();
        assert_eq!(same.len(), clip.len());
        let up = clip.resample(60.0).unwrap();
        assert_eq!(up.len(), 2 * (clip.len() - 1) + 1);
        for (a, b) in up.positions(2).iter().zip(clip.positions(1)) {
            assert!((a - b).norm() < 1e-9);
        }
        let down = up.resample(30.0).unwrap();
        for (a, b) in down.positions(17).iter().zip(clip.positions(17)) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(clip.resample(0.0).is_err());
    }

    #[test]
    fn contact_thresholds_are_strict() {
        let t = ContactThresholds::default();
        assert!(t.is_contact(0.05, 0.10));
        assert!(!t.is_contact(0.20, 0.10));
        assert!(!t.is_contact(0.1, 0.0));
        assert!(!t.is_contact(0.0, 0.24));
    }

    #[test]
    fn velocities_are_backward_differences() {
        let clip = synth::walk_cycle(&synth::WalkParams::default());
        for i in 1..clip.len() {
            for j in 0..clip.skeleton().joint_count() {
                let expected = (clip.positions(i)[j] - clip.positions(i - 1)[j]) * clip.frame_rate();
                assert!((clip.velocities(i)[j] - expected).norm() < 1e-12);
            }
        }
        assert_eq!(clip.velocities(0), clip.velocities(1));
    }

    #[test]
    fn contact_labels_match_brute_force() {
        let clip = synth::walk_cycle(&synth::WalkParams::default());
        let feet = clip.skeleton().feet();
        for i in 0..clip.len() {
            for (s, &f) in feet.iter().enumerate() {
                let h = clip.positions(i)[f].y;
                let v = clip.velocities(i)[f];
                let speed = (v.x * v.x + v.y * v.y + v.z * v.z).sqrt();
                assert_eq!(clip.contacts(i)[s], h < 0.1 && speed < 0.24, "frame {i} foot {s}");
            }
        }
        // the walk has both stance and swing phases
        assert!(clip.all_contacts().iter().any(|c| c[0]));
        assert!(clip.all_contacts().iter().any(|c| !c[0]));
    }

    #[test]
    fn tags_from_file_names() {
        assert_eq!(
            ClipTag::from_file_name("data/walk1_subject5.bvh"),
            ClipTag {
                theme: "walk".into(),
                subject: Some(5)
            }
        );
        assert_eq!(ClipTag::from_file_name("custom.bvh").subject, None);
    }
}
