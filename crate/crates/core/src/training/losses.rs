//! The five training losses, as plain functions and as tape recordings.
//!
//! MSE always averages over the scalar components being compared; the foot
//! terms average each foot's two coordinates and then sum over feet.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{rotation_log, yaw_from_x_axis, yaw_matrix, yaw_rotation, FacingInput, Mat3, Rotation6D, Vec3};
use crate::motion::features::{FeatureLayout, TrainingSample};
use crate::motion::Normalization;
use crate::skeleton::Skeleton;

/// Weights `w1..w5` of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub fk: f64,
    pub dir: f64,
    pub ct: f64,
    pub ct_trans: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            fk: 1.0,
            dir: 1.0,
            ct: 0.5,
            ct_trans: 0.5,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.rec, self.fk, self.dir, self.ct, self.ct_trans]
    }

    pub fn from_array(w: [f64; 5]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(LossWeights {
            rec: w[0],
            fk: w[1],
            dir: w[2],
            ct: w[3],
            ct_trans: w[4],
        })
    }

    /// Parses `"w1,w2,w3,w4,w5"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::Config(format!("expected 5 comma-separated weights, got '{s}'")));
        }
        let mut w = [0.0; 5];
        for (slot, p) in w.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::Config(format!("invalid loss weight '{p}'")))?;
        }
        LossWeights::from_array(w)
    }
}

/// Unweighted values of the five terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub rec: f64,
    pub fk: f64,
    pub dir: f64,
    pub ct: f64,
    pub ct_trans: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [self.rec, self.fk, self.dir, self.ct, self.ct_trans]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        LossTerms {
            rec: a[0],
            fk: a[1],
            dir: a[2],
            ct: a[3],
            ct_trans: a[4],
        }
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    terms
        .as_array()
        .iter()
        .zip(w.as_array())
        .map(|(t, w)| t * w)
        .sum()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn loss_rec(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction of length {} vs truth of length {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(mse(pred, truth))
}

/// FK of a root position (x, z), root height and global joint orientations.
pub fn fk_positions(skeleton: &Skeleton, root: [f64; 2], height: f64, orient: &[Rotation6D]) -> Result<Vec<Vec3>> {
    let globals = orient.iter().map(Rotation6D::decode).collect::<Result<Vec<Mat3>>>()?;
    Ok(skeleton.positions_from_globals(&Vec3::new(root[0], height, root[1]), &globals))
}

pub fn loss_fk(
    skeleton: &Skeleton,
    root: [f64; 2],
    height: f64,
    orient: &[Rotation6D],
    truth: &[Vec3],
) -> Result<f64> {
    let p = fk_positions(skeleton, root, height, orient)?;
    if p.len() != truth.len() {
        return Err(Error::Shape(format!("{} predicted vs {} true joints", p.len(), truth.len())));
    }
    Ok(p.iter().zip(truth).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / (3 * p.len()) as f64)
}

/// MSE between `log(T_t⁻¹ T_{t+1})` and `log(D)` (rotation parts only).
pub fn loss_dir(frame_now: &Mat3, frame_next: &Mat3, d: FacingInput) -> f64 {
    let rel = rotation_log(&(frame_now.transpose() * frame_next));
    let target = rotation_log(&yaw_rotation(&d));
    mse(rel.as_slice(), target.as_slice())
}

fn contact_mask(c_now: [f64; 2], c_next: [f64; 2]) -> [f64; 2] {
    [c_now[0] * c_next[0], c_now[1] * c_next[1]]
}

/// Masked per-foot MSE of predicted foot positions against `f_t^p`, summed
/// over feet.
pub fn loss_contact(pred_feet: [[f64; 2]; 2], foot_now: [f64; 4], c_now: [f64; 2], c_next: [f64; 2]) -> f64 {
    let m = contact_mask(c_now, c_next);
    (0..2)
        .map(|i| m[i] * mse(&pred_feet[i], &foot_now[2 * i..2 * i + 2]))
        .sum()
}

/// Maps `f_{t+1}^p` (in the predicted next frame) into `{t}` and compares it
/// with `f_t^p` under the contact mask.
pub fn loss_contact_transform(
    pred_root: [f64; 2],
    pred_yaw: f64,
    foot_next: [f64; 4],
    foot_now: [f64; 4],
    c_now: [f64; 2],
    c_next: [f64; 2],
) -> f64 {
    let r = yaw_matrix(pred_yaw);
    let mapped = [0, 1].map(|i| {
        let p = r * Vec3::new(foot_next[2 * i], 0.0, foot_next[2 * i + 1]);
        [pred_root[0] + p.x, pred_root[1] + p.z]
    });
    loss_contact(mapped, foot_now, c_now, c_next)
}

fn arr2(s: &[f64]) -> [f64; 2] {
    [s[0], s[1]]
}

fn arr4(s: &[f64]) -> [f64; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Heading of the frame implied by a root orientation and the two hip
/// offsets from the root.
fn predicted_yaw(root_rot: &Mat3, hips: &[f64]) -> f64 {
    let axis = root_rot * Vec3::new(hips[3] - hips[0], hips[4] - hips[1], hips[5] - hips[2]);
    yaw_from_x_axis(axis.x, axis.z)
}

/// Evaluates every term for one sample from a normalized network output,
/// without a tape.
pub fn sample_losses(
    layout: &FeatureLayout,
    skeleton: &Skeleton,
    norm: &Normalization,
    output: &[f64],
    sample: &TrainingSample,
) -> Result<LossTerms> {
    let truth = norm.target.normalize(&sample.target);
    let c = 2..layout.target_dim();
    let rec = loss_rec(&output[c.clone()], &truth[c])?;
    let pred = norm.target.denormalize(output);
    let root = arr2(&pred[layout.target_root()]);
    let height = pred[layout.target_height()];
    let orient: Vec<Rotation6D> = pred[layout.target_orient()].chunks(6).map(Rotation6D::from_slice).collect();
    let truth_pos: Vec<Vec3> = sample.aux[layout.aux_positions()]
        .chunks(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect();
    let fk = loss_fk(skeleton, root, height, &orient, &truth_pos)?;
    let positions = fk_positions(skeleton, root, height, &orient)?;

    let root_rot = orient[0].decode()?;
    let yaw = predicted_yaw(&root_rot, &sample.aux[layout.aux_hip_offsets()]);
    let facing = &sample.input[layout.facing()];
    let d = FacingInput {
        sin: facing[0],
        cos: facing[1],
    };
    let dir = loss_dir(&Mat3::identity(), &yaw_matrix(yaw), d);

    let feet = skeleton.feet().map(|f| [positions[f].x, positions[f].z]);
    let now = arr4(&sample.aux[layout.aux_foot_now_p()]);
    let next = arr4(&sample.aux[layout.aux_foot_next_p()]);
    let c_now = arr2(&sample.aux[layout.aux_foot_now_c()]);
    let c_next = arr2(&sample.aux[layout.aux_foot_next_c()]);
    Ok(LossTerms {
        rec,
        fk,
        dir,
        ct: loss_contact(feet, now, c_now, c_next),
        ct_trans: loss_contact_transform(root, yaw, next, now, c_now, c_next),
    })
}

/// Tape nodes of the five terms and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub rec: Var,
    pub fk: Var,
    pub dir: Var,
    pub ct: Var,
    pub ct_trans: Var,
    pub total: Var,
}

impl LossVars {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        LossTerms {
            rec: tape.scalar(self.rec),
            fk: tape.scalar(self.fk),
            dir: tape.scalar(self.dir),
            ct: tape.scalar(self.ct),
            ct_trans: tape.scalar(self.ct_trans),
        }
    }
}

/// Per-sample constants for the loss graph, precomputed once per dataset.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub target_norm: Vec<f64>,
    pub positions: Vec<f64>,
    pub facing_angle: f64,
    pub hips: Vec<f64>,
    pub foot_now: [f64; 4],
    pub foot_next: [f64; 4],
    pub mask: [f64; 2],
}

impl LossTargets {
    pub fn new(layout: &FeatureLayout, norm: &Normalization, sample: &TrainingSample) -> Self {
        let facing = &sample.input[layout.facing()];
        let c_now = arr2(&sample.aux[layout.aux_foot_now_c()]);
        let c_next = arr2(&sample.aux[layout.aux_foot_next_c()]);
        LossTargets {
            target_norm: norm.target.normalize(&sample.target),
            positions: sample.aux[layout.aux_positions()].to_vec(),
            facing_angle: facing[0].atan2(facing[1]),
            hips: sample.aux[layout.aux_hip_offsets()].to_vec(),
            foot_now: arr4(&sample.aux[layout.aux_foot_now_p()]),
            foot_next: arr4(&sample.aux[layout.aux_foot_next_p()]),
            mask: contact_mask(c_now, c_next),
        }
    }
}

/// Records all five terms on top of a forward pass whose normalized output
/// is `output`.
pub fn record_losses(
    tape: &mut Tape,
    layout: &FeatureLayout,
    skeleton: &Skeleton,
    norm: &Normalization,
    output: Var,
    t: &LossTargets,
    weights: &LossWeights,
) -> LossVars {
    let dim = layout.target_dim();
    let c_dim = dim - 2;

    let reduced = tape.slice(output, 2..dim);
    let rec = tape.squared_error(reduced, &t.target_norm[2..], &vec![1.0 / c_dim as f64; c_dim]);

    let pred = tape.affine(output, &norm.target.std, &norm.target.mean);
    let root3 = tape.gather(pred, &[0, layout.target_height(), 1]);
    let root2 = tape.slice(pred, layout.target_root());
    let orient = layout.target_orient();
    let j = layout.joints;
    let mut rots = Vec::with_capacity(j);
    let mut positions: Vec<Var> = Vec::with_capacity(j);
    for i in 0..j {
        let o = tape.slice(pred, orient.start + 6 * i..orient.start + 6 * i + 6);
        rots.push(tape.decode_6d(o));
        let p = match skeleton.parent(i) {
            None => root3,
            Some(p) => {
                let off = skeleton.offset(i);
                let bone = tape.mat_vec3(rots[p], [off.x, off.y, off.z]);
                tape.add(positions[p], bone)
            }
        };
        positions.push(p);
    }
    let all = tape.concat(&positions);
    let fk = tape.squared_error(all, &t.positions, &vec![1.0 / (3 * j) as f64; 3 * j]);

    let h = &t.hips;
    let axis3 = tape.mat_vec3(rots[0], [h[3] - h[0], h[4] - h[1], h[5] - h[2]]);
    let yaw = tape.yaw_of_axis(axis3);
    // log vectors are (0, yaw, 0) and (0, Δ, 0); the MSE averages three components
    let dir = tape.squared_error(yaw, &[t.facing_angle], &[1.0 / 3.0]);

    let [lf, rf] = skeleton.feet();
    let feet_xz = tape.gather(all, &[3 * lf, 3 * lf + 2, 3 * rf, 3 * rf + 2]);
    let m = t.mask;
    let foot_weights = [m[0] / 2.0, m[0] / 2.0, m[1] / 2.0, m[1] / 2.0];
    let ct = tape.squared_error(feet_xz, &t.foot_now, &foot_weights);

    let axis = tape.normalize_xz(axis3);
    let mapped: Vec<Var> = (0..2)
        .map(|i| tape.frame_point(root2, axis, [t.foot_next[2 * i], t.foot_next[2 * i + 1]]))
        .collect();
    let mapped = tape.concat(&mapped);
    let ct_trans = tape.squared_error(mapped, &t.foot_now, &foot_weights);

    let w = weights;
    let total = tape.weighted_sum(&[
        (rec, w.rec),
        (fk, w.fk),
        (dir, w.dir),
        (ct, w.ct),
        (ct_trans, w.ct_trans),
    ]);
    LossVars {
        rec,
        fk,
        dir,
        ct,
        ct_trans,
        total,
    }
}
