//! Rollout metrics and the ablation harness.
//!
//! All four metrics are reported in centimeters per frame (FCTE in percent)
//! and pool every frame of every clip, so long clips weigh more.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::motion::{Dataset, MotionClip};
use crate::network::{Model, ModelConfig};
use crate::par::{self, Execution};
use crate::runtime::{extract_trace, replay, EngineConfig, InputTrace};
use crate::training::{initial_model, LossWeights, TrainConfig, Trainer};

/// A pooled mean: `sum / count`, undefined when nothing was counted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pooled {
    pub sum: f64,
    pub count: usize,
}

impl Pooled {
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn merge(self, o: Pooled) -> Pooled {
        Pooled {
            sum: self.sum + o.sum,
            count: self.count + o.count,
        }
    }
}

/// Metric value or the explicit "undefined" marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric(pub Option<f64>);

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.4}"),
            None => f.write_str("undefined"),
        }
    }
}

fn check_frames(a: &MotionClip, b_len: usize, range: &Range<usize>) -> Result<()> {
    if a.len() != b_len || range.end > a.len() {
        return Err(Error::Shape(format!(
            "clips of {} and {b_len} frames cannot be compared over frames {range:?}",
            a.len()
        )));
    }
    Ok(())
}

fn check_skeletons(a: &MotionClip, b: &MotionClip) -> Result<()> {
    if a.skeleton() != b.skeleton() {
        return Err(Error::Shape(format!(
            "skeleton of '{}' differs from skeleton of '{}'",
            a.name, b.name
        )));
    }
    Ok(())
}

/// Horizontal distance (m) between each commanded contact position and the
/// generated foot, both in the generated clip's own avatar frame.
pub fn fcpe_sum(generated: &MotionClip, trace: &InputTrace, range: Range<usize>) -> Result<Pooled> {
    check_frames(generated, trace.len(), &range)?;
    let feet = generated.skeleton().feet();
    let mut p = Pooled::default();
    for t in range {
        let f = &trace.feet[t];
        for (i, &j) in feet.iter().enumerate() {
            if f.in_contact(i) {
                let local = generated.frame(t).to_local(&generated.positions(t)[j]);
                let [x, z] = f.position(i);
                p.add((local.x - x).hypot(local.z - z));
            }
        }
    }
    Ok(p)
}

/// Per-foot, per-frame contact-status disagreements.
pub fn fcte_sum(generated: &MotionClip, truth: &MotionClip, range: Range<usize>) -> Result<Pooled> {
    check_frames(generated, truth.len(), &range)?;
    Ok(contact_mismatch(
        &generated.all_contacts()[range.clone()],
        &truth.all_contacts()[range],
    ))
}

pub fn contact_mismatch(a: &[[bool; 2]], b: &[[bool; 2]]) -> Pooled {
    let mut p = Pooled::default();
    for (x, y) in a.iter().zip(b) {
        for i in 0..2 {
            p.add(if x[i] == y[i] { 0.0 } else { 1.0 });
        }
    }
    p
}

/// Per-frame mean joint error (m), each clip in its own avatar frame.
pub fn mpjpe_sum(generated: &MotionClip, truth: &MotionClip, range: Range<usize>) -> Result<Pooled> {
    check_skeletons(generated, truth)?;
    check_frames(generated, truth.len(), &range)?;
    let mut p = Pooled::default();
    for t in range {
        let (fa, fb) = (generated.frame(t), truth.frame(t));
        let err: f64 = generated
            .positions(t)
            .iter()
            .zip(truth.positions(t))
            .map(|(a, b)| (fa.to_local(a) - fb.to_local(b)).norm())
            .sum();
        p.add(err / generated.skeleton().joint_count() as f64);
    }
    Ok(p)
}

/// Horizontal movement (m) of each generated foot over frames where the
/// truth marks that foot planted in this and the previous frame.
pub fn foot_sliding_sum(generated: &MotionClip, truth: &MotionClip, range: Range<usize>) -> Result<Pooled> {
    check_skeletons(generated, truth)?;
    check_frames(generated, truth.len(), &range)?;
    let feet = generated.skeleton().feet();
    let mut p = Pooled::default();
    for t in range.start.max(1)..range.end {
        for (i, &j) in feet.iter().enumerate() {
            if truth.contacts(t)[i] && truth.contacts(t - 1)[i] {
                let d = generated.positions(t)[j] - generated.positions(t - 1)[j];
                p.add(d.x.hypot(d.z));
            }
        }
    }
    Ok(p)
}

fn cm(p: Pooled) -> Metric {
    Metric(p.mean().map(|v| v * 100.0))
}

pub fn fcpe(generated: &MotionClip, trace: &InputTrace) -> Result<Metric> {
    fcpe_sum(generated, trace, 0..generated.len()).map(cm)
}

pub fn fcte(generated: &MotionClip, truth: &MotionClip) -> Result<Metric> {
    fcte_sum(generated, truth, 0..generated.len()).map(cm)
}

pub fn mpjpe(generated: &MotionClip, truth: &MotionClip) -> Result<Metric> {
    mpjpe_sum(generated, truth, 0..generated.len()).map(cm)
}

pub fn foot_sliding(generated: &MotionClip, truth: &MotionClip) -> Result<Metric> {
    foot_sliding_sum(generated, truth, 0..generated.len()).map(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSums {
    pub fcpe: Pooled,
    pub fcte: Pooled,
    pub mpjpe: Pooled,
    pub fs: Pooled,
}

impl MetricSums {
    fn merge(self, o: MetricSums) -> MetricSums {
        MetricSums {
            fcpe: self.fcpe.merge(o.fcpe),
            fcte: self.fcte.merge(o.fcte),
            mpjpe: self.mpjpe.merge(o.mpjpe),
            fs: self.fs.merge(o.fs),
        }
    }

    /// All four metrics over `range` of already generated motion.
    pub fn compute(generated: &MotionClip, truth: &MotionClip, trace: &InputTrace, range: Range<usize>) -> Result<Self> {
        Ok(MetricSums {
            fcpe: fcpe_sum(generated, trace, range.clone())?,
            fcte: fcte_sum(generated, truth, range.clone())?,
            mpjpe: mpjpe_sum(generated, truth, range.clone())?,
            fs: foot_sliding_sum(generated, truth, range)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipReport {
    pub name: String,
    pub frames: usize,
    pub sums: MetricSums,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    /// cm/frame
    pub fcpe: Metric,
    /// percent
    pub fcte: Metric,
    /// cm/frame
    pub mpjpe: Metric,
    /// cm/frame
    pub fs: Metric,
    pub clips: usize,
    pub frames: usize,
    pub per_clip: Vec<ClipReport>,
}

pub const REPORT_CSV_HEADER: &str = "variant,FCPE_cm,FCTE_pct,MPJPE_cm,FS_cm,clips,frames";

impl EvalReport {
    pub fn from_clips(variant: impl Into<String>, per_clip: Vec<ClipReport>) -> Self {
        let total = per_clip
            .iter()
            .fold(MetricSums::default(), |acc, c| acc.merge(c.sums));
        EvalReport {
            variant: variant.into(),
            fcpe: cm(total.fcpe),
            fcte: cm(total.fcte),
            mpjpe: cm(total.mpjpe),
            fs: cm(total.fs),
            clips: per_clip.len(),
            frames: per_clip.iter().map(|c| c.frames).sum(),
            per_clip,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant, self.fcpe, self.fcte, self.mpjpe, self.fs, self.clips, self.frames
        )
    }
}

pub fn write_report_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut text = String::from(REPORT_CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Replays one clip from its own inputs and scores the generated frames.
pub fn evaluate_clip(model: Arc<Model>, clip: &MotionClip, config: EngineConfig) -> Result<(ClipReport, MotionClip)> {
    let trace = extract_trace(clip);
    let rollout = replay(model, clip, &trace, config, None)?;
    let range = rollout.first_generated..clip.len();
    let sums = MetricSums::compute(&rollout.clip, clip, &trace, range.clone())?;
    Ok((
        ClipReport {
            name: clip.name.clone(),
            frames: range.len(),
            sums,
        },
        rollout.clip,
    ))
}

pub fn evaluate(
    model: Arc<Model>,
    clips: &[MotionClip],
    variant: &str,
    config: EngineConfig,
    exec: Execution,
) -> Result<EvalReport> {
    let k = model.config.k;
    let usable: Vec<&MotionClip> = clips.iter().filter(|c| c.len() > k + 1).collect();
    let per_clip = par::map(exec, &usable, |c| evaluate_clip(model.clone(), c, config).map(|r| r.0))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_clips(variant, per_clip))
}

/// A model configuration and loss weighting to train and compare.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
    pub weights: LossWeights,
}

/// The full model, its architectural ablations and one variant per dropped
/// loss term.
pub fn ablation_variants(base: ModelConfig, weights: LossWeights) -> Vec<Variant> {
    let v = |name: &str, config: ModelConfig, weights: LossWeights| Variant {
        name: name.into(),
        config,
        weights,
    };
    let mut out = vec![
        v("full", base, weights),
        v(
            "w/o TransNet&GRU",
            ModelConfig {
                use_transnet: false,
                recurrent: false,
                ..base
            },
            weights,
        ),
        v("w/o TransNet", ModelConfig { use_transnet: false, ..base }, weights),
        v("w/o GRU", ModelConfig { recurrent: false, ..base }, weights),
    ];
    for (i, term) in ["L_rec", "L_FK", "L_dir", "L_ct", "L_ct_trans"].iter().enumerate() {
        let mut w = weights.as_array();
        w[i] = 0.0;
        if let Ok(w) = LossWeights::from_array(w) {
            out.push(v(&format!("w/o {term}"), base, w));
        }
    }
    out
}

/// Trains every variant on `train` with the same seed and evaluates it on
/// `test`.
pub fn run_ablation(
    train: &Dataset,
    test: &[MotionClip],
    variants: &[Variant],
    train_config: &TrainConfig,
    engine: EngineConfig,
) -> Result<Vec<EvalReport>> {
    let skeleton = test
        .first()
        .ok_or_else(|| Error::Config("ablation needs at least one test clip".into()))?
        .skeleton()
        .clone();
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let model = initial_model(train, v.config, skeleton.clone(), train_config.seed)?;
        let config = TrainConfig {
            weights: v.weights,
            ..train_config.clone()
        };
        let mut trainer = Trainer::new(train, model, config)?;
        trainer.run(|_, _| Ok(()))?;
        let model = Arc::new(trainer.model);
        reports.push(evaluate(model, test, &v.name, engine, train_config.execution)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::motion::FootState;
    use crate::skeleton::Skeleton;
    use crate::synth::{self, WalkParams};

    fn walk() -> MotionClip {
        synth::walk_cycle(&WalkParams::default())
    }

    #[test]
    fn identical_clips_score_zero() {
        let c = walk();
        let trace = extract_trace(&c);
        assert!(fcpe(&c, &trace).unwrap().0.unwrap() < 1e-9);
        assert_eq!(fcte(&c, &c).unwrap().0, Some(0.0));
        assert_eq!(mpjpe(&c, &c).unwrap().0, Some(0.0));
        assert_eq!(foot_sliding(&c, &c).unwrap().0.map(|v| v < 0.5), Some(true));
    }

    #[test]
    fn fcpe_constant_offset_is_five_cm() {
        let c = walk();
        let mut trace = extract_trace(&c);
        for f in &mut trace.feet {
            for i in 0..2 {
                if f.in_contact(i) {
                    f.p[2 * i] -= 0.03;
                    f.p[2 * i + 1] -= 0.04;
                }
            }
        }
        let v = fcpe(&c, &trace).unwrap().0.unwrap();
        assert!((v - 5.0).abs() < 1e-6, "{v}");
        let airborne = InputTrace {
            feet: vec![FootState::AIRBORNE; c.len()],
            facing: trace.facing.clone(),
        };
        assert_eq!(fcpe(&c, &airborne).unwrap(), Metric(None));
        assert_eq!(Metric(None).to_string(), "undefined");
    }

    fn clip_from_positions(skeleton: &Skeleton, roots: Vec<Vec3>) -> MotionClip {
        let j = skeleton.joint_count();
        let rot = vec![vec![crate::geometry::Mat3::identity(); j]; roots.len()];
        MotionClip::from_world_rotations("c", skeleton.clone(), 30.0, roots, rot).unwrap()
    }

    #[test]
    fn fcte_counts_foot_frames() {
        let truth = vec![[true, false]; 10];
        let mut gen = truth.clone();
        gen[4][1] = true;
        assert_eq!(cm(contact_mismatch(&gen, &truth)), Metric(Some(5.0)));
        let s = synth::biped_skeleton();
        let standing = clip_from_positions(&s, vec![Vec3::new(0.0, 0.95, 0.0); 10]);
        assert_eq!(fcte(&standing, &standing).unwrap().0, Some(0.0));
        let lifted = clip_from_positions(&s, vec![Vec3::new(0.0, 2.0, 0.0); 10]);
        assert_eq!(fcte(&lifted, &standing).unwrap().0, Some(100.0));
    }

    #[test]
    fn mpjpe_examples() {
        let c = walk();
        let moved = c.transformed(1.3, [4.0, -2.0]).unwrap();
        assert!(mpjpe(&moved, &c).unwrap().0.unwrap() < 1e-9);
        assert!(mpjpe(&c, &synth::standing_clip(c.len(), [0.0, 0.0], 0.0)).is_ok());
        let other = synth::walk_cycle_on(&synth::humanoid_skeleton(), &WalkParams::default());
        assert!(mpjpe(&c, &other).is_err());
    }

    #[test]
    fn foot_sliding_examples() {
        let s = synth::biped_skeleton();
        let standing = clip_from_positions(&s, vec![Vec3::new(0.0, 0.95, 0.0); 10]);
        assert_eq!(foot_sliding(&standing, &standing).unwrap().0, Some(0.0));
        let drifting = clip_from_positions(&s, (0..10).map(|t| Vec3::new(0.01 * t as f64, 0.95, 0.0)).collect());
        let v = foot_sliding(&drifting, &standing).unwrap().0.unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        let lifted = clip_from_positions(&s, vec![Vec3::new(0.0, 2.0, 0.0); 10]);
        assert_eq!(foot_sliding(&standing, &lifted).unwrap(), Metric(None));
    }

    #[test]
    fn report_rows_and_variants() {
        let base = ModelConfig::tiny(8);
        let vs = ablation_variants(base, LossWeights::default());
        assert_eq!(vs.len(), 9);
        assert_eq!(vs[4].name, "w/o L_rec");
        assert_eq!(vs[4].weights.rec, 0.0);
        assert!(!vs[1].config.use_transnet && !vs[1].config.recurrent);
        let r = EvalReport::from_clips("full", vec![]);
        assert_eq!(r.csv_row(), "full,undefined,undefined,undefined,undefined,0,0");
    }
}
