//! Heightfield terrain and the foot/root height adaptation applied to the
//! rendered pose.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::skeleton::{two_joint_ik, Skeleton};

/// Regular heightfield. `heights` is row-major with rows along z and columns
/// along x; points outside the grid have height 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Terrain {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    pub heights: Vec<f64>,
}

impl Terrain {
    pub fn flat() -> Self {
        Terrain {
            origin: [0.0, 0.0],
            cell_size: 1.0,
            rows: 1,
            cols: 1,
            heights: vec![0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config(format!("terrain cell size must be positive, got {}", self.cell_size)));
        }
        if self.rows == 0 || self.cols == 0 || self.heights.len() != self.rows * self.cols {
            return Err(Error::Shape(format!(
                "terrain of {}x{} cells has {} heights",
                self.rows,
                self.cols,
                self.heights.len()
            )));
        }
        if self.heights.iter().any(|h| !h.is_finite()) || self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("terrain heights and origin must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Terrain = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Terrain::from_json(&text)
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.heights[r * self.cols + c]
    }

    /// Bilinear height at ground point `(x, z)`.
    pub fn height(&self, x: f64, z: f64) -> f64 {
        let u = (x - self.origin[0]) / self.cell_size;
        let v = (z - self.origin[1]) / self.cell_size;
        let (max_u, max_v) = ((self.cols - 1) as f64, (self.rows - 1) as f64);
        if !(u >= 0.0 && v >= 0.0 && u <= max_u && v <= max_v) {
            return 0.0;
        }
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.cols - 1), (r0 + 1).min(self.rows - 1));
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let top = self.at(r0, c0) * (1.0 - fu) + self.at(r0, c1) * fu;
        let bottom = self.at(r1, c0) * (1.0 - fu) + self.at(r1, c1) * fu;
        top * (1.0 - fv) + bottom * fv
    }
}

/// Root height reference carried between frames.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeightReference {
    pub value: f64,
}

/// A posed skeleton in world space.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldPose {
    pub root: Vec3,
    pub rotations: Vec<Mat3>,
    pub positions: Vec<Vec3>,
}

impl WorldPose {
    pub fn new(skeleton: &Skeleton, root: Vec3, rotations: Vec<Mat3>) -> Self {
        let positions = skeleton.positions_from_globals(&root, &rotations);
        WorldPose {
            root,
            rotations,
            positions,
        }
    }
}

/// Lifts the pose onto the terrain. Feet are placed at their predicted
/// height above the terrain under them; the body follows the terrain height
/// of the contacting foot (the lower one when both are planted) and, while
/// airborne, eases towards the terrain under the root with time constant
/// `tau`. Legs are re-solved with two-joint IK. Returns per-leg clamp flags.
pub fn adapt_to_terrain(
    skeleton: &Skeleton,
    pose: &mut WorldPose,
    contacts: [bool; 2],
    terrain: &Terrain,
    reference: &mut HeightReference,
    dt: f64,
    tau: f64,
) -> Result<[bool; 2]> {
    let feet = skeleton.feet();
    let ground = feet.map(|f| terrain.height(pose.positions[f].x, pose.positions[f].z));
    let targets = [0, 1].map(|i| {
        let p = pose.positions[feet[i]];
        Vec3::new(p.x, p.y + ground[i], p.z)
    });
    reference.value = match contacts {
        [true, true] => {
            if targets[0].y <= targets[1].y {
                ground[0]
            } else {
                ground[1]
            }
        }
        [true, false] => ground[0],
        [false, true] => ground[1],
        [false, false] => {
            let below = terrain.height(pose.root.x, pose.root.z);
            reference.value + (below - reference.value) * (1.0 - (-dt / tau).exp())
        }
    };
    if reference.value != 0.0 {
        pose.root.y += reference.value;
        for p in &mut pose.positions {
            p.y += reference.value;
        }
    }
    let mut clamped = [false; 2];
    for (i, leg) in skeleton.legs().iter().enumerate() {
        let p = &pose.positions;
        if (p[leg.foot] - targets[i]).norm() < 1e-12 {
            continue;
        }
        let sol = two_joint_ik(&p[leg.hip], &p[leg.knee], &p[leg.foot], &targets[i])?;
        clamped[i] = sol.clamped;
        let (h, k) = sol.apply(&pose.rotations[leg.hip], &pose.rotations[leg.knee]);
        pose.rotations[leg.hip] = h;
        pose.rotations[leg.knee] = k;
    }
    pose.positions = skeleton.positions_from_globals(&pose.root, &pose.rotations);
    Ok(clamped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn uniform(h: f64) -> Terrain {
        Terrain {
            origin: [-50.0, -50.0],
            cell_size: 1.0,
            rows: 101,
            cols: 101,
            heights: vec![h; 101 * 101],
        }
    }

    fn standing() -> (Skeleton, WorldPose) {
        let clip = synth::standing_clip(1, [0.3, -0.2], 0.0);
        let pose = WorldPose::new(clip.skeleton(), clip.root_position(0), clip.world_rotations(0).to_vec());
        (clip.skeleton().clone(), pose)
    }

    #[test]
    fn bilinear_sampling() {
        let t = Terrain {
            origin: [0.0, 0.0],
            cell_size: 2.0,
            rows: 2,
            cols: 2,
            heights: vec![0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(t.height(0.0, 0.0), 0.0);
        assert_eq!(t.height(2.0, 2.0), 3.0);
        assert!((t.height(1.0, 1.0) - 1.5).abs() < 1e-15);
        assert!((t.height(1.0, 0.0) - 0.5).abs() < 1e-15);
        assert_eq!(t.height(-0.1, 1.0), 0.0);
        assert_eq!(t.height(1.0, 2.5), 0.0);
    }

    #[test]
    fn json_and_validation() {
        let t = Terrain::from_json(r#"{"origin":[0,0],"cell_size":0.5,"rows":1,"cols":2,"heights":[0.1,0.2]}"#).unwrap();
        assert!((t.height(0.25, 0.0) - 0.15).abs() < 1e-15);
        assert!(Terrain::from_json(r#"{"origin":[0,0],"cell_size":0,"rows":1,"cols":1,"heights":[0]}"#).is_err());
        assert!(Terrain::from_json(r#"{"origin":[0,0],"cell_size":1,"rows":2,"cols":1,"heights":[0]}"#).is_err());
    }

    #[test]
    fn flat_terrain_leaves_the_pose_unchanged() {
        let (s, pose) = standing();
        let mut p = pose.clone();
        let mut r = HeightReference::default();
        adapt_to_terrain(&s, &mut p, [true, true], &Terrain::flat(), &mut r, 1.0 / 30.0, 0.2).unwrap();
        for (a, b) in p.positions.iter().zip(&pose.positions) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn uniform_rise_lifts_everything() {
        let (s, pose) = standing();
        let mut p = pose.clone();
        let mut r = HeightReference::default();
        adapt_to_terrain(&s, &mut p, [true, false], &uniform(0.3), &mut r, 1.0 / 30.0, 0.2).unwrap();
        assert!((p.root.y - pose.root.y - 0.3).abs() < 1e-12);
        for (a, b) in p.positions.iter().zip(&pose.positions) {
            assert!((a - b - Vec3::new(0.0, 0.3, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn platform_under_the_contact_foot_sets_the_reference() {
        let (s, pose) = standing();
        let left = pose.positions[s.feet()[0]];
        // platform of 0.2 m covering only the left foot
        let mut t = uniform(0.0);
        t.origin = [left.x - 0.05, left.z - 0.05];
        t.cell_size = 0.001;
        t.heights = vec![0.2; 101 * 101];
        let mut p = pose.clone();
        let mut r = HeightReference::default();
        adapt_to_terrain(&s, &mut p, [true, false], &t, &mut r, 1.0 / 30.0, 0.2).unwrap();
        assert!((r.value - 0.2).abs() < 1e-12);
        let f = s.feet();
        assert!((p.positions[f[0]].y - left.y - 0.2).abs() < 1e-6);
        // the right leg reaches down towards the lower ground
        assert!(p.positions[f[1]].y < pose.positions[f[1]].y + 0.15);
    }

    #[test]
    fn airborne_reference_eases_toward_the_ground() {
        let (s, pose) = standing();
        let mut r = HeightReference { value: 0.5 };
        let mut p = pose.clone();
        adapt_to_terrain(&s, &mut p, [false, false], &Terrain::flat(), &mut r, 0.2, 0.2).unwrap();
        assert!((r.value - 0.5 * (-1f64).exp()).abs() < 1e-12);
    }
}
