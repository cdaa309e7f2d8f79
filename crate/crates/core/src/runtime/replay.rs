//! Free-running rollouts driven by inputs extracted from a recorded clip.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{FacingInput, Mat3, Vec3};
use crate::motion::{extract_facing, extract_foot_state, FootState, MotionClip};
use crate::network::Model;

use super::{Engine, EngineConfig, Terrain};

/// Per-frame inputs of a clip: `feet[τ]` is `f_τ` in `{τ}` and `facing[τ]`
/// the heading change from `τ − 1` to `τ` (forward for the first frame).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputTrace {
    pub feet: Vec<FootState>,
    pub facing: Vec<FacingInput>,
}

impl InputTrace {
    pub fn len(&self) -> usize {
        self.feet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feet.is_empty()
    }
}

pub fn extract_trace(clip: &MotionClip) -> InputTrace {
    let n = clip.len();
    InputTrace {
        feet: (0..n).map(|t| extract_foot_state(clip, t)).collect(),
        facing: (0..n)
            .map(|t| if t == 0 { FacingInput::FORWARD } else { extract_facing(clip, t - 1) })
            .collect(),
    }
}

/// A generated clip aligned frame-for-frame with its source. Frames before
/// `first_generated` are the warmup copied from the source.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub clip: MotionClip,
    pub first_generated: usize,
}

/// Starts from the first `k + 1` frames of `source` and then lets the model
/// consume its own output for the rest of `trace`.
pub fn replay(
    model: Arc<Model>,
    source: &MotionClip,
    trace: &InputTrace,
    config: EngineConfig,
    terrain: Option<Terrain>,
) -> Result<Rollout> {
    let k = model.config.k;
    let skeleton = model.skeleton.clone();
    if trace.is_empty() {
        let clip = MotionClip::from_world_rotations(format!("{}_replay", source.name), skeleton, source.frame_rate(), vec![], vec![])?;
        return Ok(Rollout {
            clip,
            first_generated: 0,
        });
    }
    if trace.facing.len() != trace.len() || trace.len() > source.len() {
        return Err(Error::Shape(format!(
            "trace of {} frames does not fit clip '{}' of {} frames",
            trace.len(),
            source.name,
            source.len()
        )));
    }
    let mut engine = Engine::from_clip(model, config, source, 0)?;
    engine.terrain = terrain;
    let mut roots: Vec<Vec3> = (0..=k).map(|t| source.root_position(t)).collect();
    let mut rotations: Vec<Vec<Mat3>> = (0..=k).map(|t| source.world_rotations(t).to_vec()).collect();
    for t in k + 1..trace.len() {
        let pose = engine.step_with(trace.feet[t], trace.facing[t])?;
        roots.push(pose.root);
        rotations.push(pose.rotations);
    }
    let clip = MotionClip::from_world_rotations(
        format!("{}_replay", source.name),
        skeleton,
        source.frame_rate(),
        roots,
        rotations,
    )?
    .with_thresholds(source.thresholds());
    Ok(Rollout {
        clip,
        first_generated: k + 1,
    })
}
