//! The per-frame engine: input interpretation, autoregressive prediction,
//! smoothing, frame integration and terrain adaptation.
//!
//! History is kept in world space and re-expressed in the current avatar
//! frame each step, so the network always sees the same features it was
//! trained on.

pub mod input;
pub mod replay;
pub mod terrain;

use std::collections::VecDeque;
use std::sync::Arc;

pub use input::{desired_facing, FacingSettings, Joystick, Touch, TouchFrame, TouchTracker};
pub use replay::{extract_trace, replay, InputTrace, Rollout};
pub use terrain::{adapt_to_terrain, HeightReference, Terrain, WorldPose};

use crate::error::{Error, Result};
use crate::geometry::{AvatarFrame, FacingInput, Mat3, Vec3};
use crate::motion::features::{decode_target, AvatarState, FootState};
use crate::motion::MotionClip;
use crate::network::Model;

/// Height of the ankle joint above the ground in the warmup stance.
pub const STANDING_ANKLE_HEIGHT: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub frame_rate: f64,
    /// meters per region side
    pub region_scale: f64,
    pub facing: FacingSettings,
    /// weight of the new prediction; `None` disables smoothing
    pub smoothing: Option<f64>,
    /// airborne root-height time constant in seconds
    pub airborne_tau: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            frame_rate: 30.0,
            region_scale: 1.5,
            facing: FacingSettings::default(),
            smoothing: Some(0.7),
            airborne_tau: 0.2,
        }
    }
}

impl EngineConfig {
    /// Settings for metric replays: no output smoothing, whose lag would be
    /// scored as foot error.
    pub fn evaluation() -> Self {
        EngineConfig {
            smoothing: None,
            ..EngineConfig::default()
        }
    }
}

/// `β·new + (1 − β)·prev`, elementwise.
pub fn smooth_output(prev: &[f64], new: &[f64], beta: f64) -> Vec<f64> {
    prev.iter().zip(new).map(|(p, n)| beta * n + (1.0 - beta) * p).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct HistoryEntry {
    /// in its own frame
    foot: FootState,
    /// world avatar frame; its origin is the root projection
    frame: AvatarFrame,
    /// world space
    state: AvatarState,
    height: f64,
}

/// Rendered output of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub frame: u64,
    pub root: Vec3,
    pub yaw: f64,
    pub rotations: Vec<Mat3>,
    pub joints: Vec<Vec3>,
    pub contacts: [bool; 2],
    /// facing input clamped, left leg IK clamped, right leg IK clamped
    pub clamped: [bool; 3],
    pub ignored_touches: bool,
    pub gating: Vec<f64>,
}

/// Mutable per-session state.
#[derive(Debug, Clone)]
pub struct EngineState {
    history: VecDeque<HistoryEntry>,
    tracker: TouchTracker,
    reference: HeightReference,
    smoothed: bool,
    frame_index: u64,
}

impl EngineState {
    pub fn frame(&self) -> AvatarFrame {
        self.history.back().expect("history is never empty").frame
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn touch_assignment(&self) -> [Option<u32>; 2] {
        self.tracker.assignment()
    }
}

pub struct Engine {
    model: Arc<Model>,
    pub config: EngineConfig,
    terrain: Option<Terrain>,
    state: EngineState,
}

fn standing_state(model: &Model) -> HistoryEntry {
    let s = &model.skeleton;
    let j = s.joint_count();
    let globals = vec![Mat3::identity(); j];
    let rest = s.positions_from_globals(&Vec3::zeros(), &globals);
    let feet = s.feet();
    let lowest = feet.iter().map(|&f| rest[f].y).fold(f64::INFINITY, f64::min);
    let height = STANDING_ANKLE_HEIGHT - lowest;
    let root = Vec3::new(0.0, height, 0.0);
    let pos = s.positions_from_globals(&root, &globals);
    let foot = FootState::from_feet(feet.map(|f| Some(([pos[f].x, pos[f].z], [0.0, 0.0]))));
    let state = AvatarState {
        orient: vec![crate::geometry::Rotation6D::IDENTITY; j],
        pos,
        vel: vec![Vec3::zeros(); j],
    };
    HistoryEntry {
        foot,
        frame: AvatarFrame::IDENTITY,
        state,
        height,
    }
}

impl Engine {
    /// Engine warmed up with a standing pose at the world origin facing +z,
    /// replicated over the whole history.
    pub fn new(model: Arc<Model>, config: EngineConfig, terrain: Option<Terrain>) -> Result<Self> {
        if let Some(t) = &terrain {
            t.validate()?;
        }
        let entry = standing_state(&model);
        let history = std::iter::repeat(entry).take(model.config.k + 1).collect();
        Ok(Engine {
            model,
            config,
            terrain,
            state: EngineState {
                history,
                tracker: TouchTracker::default(),
                reference: HeightReference::default(),
                smoothed: false,
                frame_index: 0,
            },
        })
    }

    /// Engine whose history is frames `start..=start + k` of `clip`.
    pub fn from_clip(model: Arc<Model>, config: EngineConfig, clip: &MotionClip, start: usize) -> Result<Self> {
        let k = model.config.k;
        if clip.skeleton() != &model.skeleton {
            return Err(Error::Shape(format!("clip '{}' uses a different skeleton than the model", clip.name)));
        }
        if clip.len() < start + k + 1 {
            return Err(Error::Shape(format!(
                "clip '{}' has {} frames, warmup needs {}",
                clip.name,
                clip.len(),
                start + k + 1
            )));
        }
        let history = (start..=start + k)
            .map(|tau| HistoryEntry {
                foot: crate::motion::extract_foot_state(clip, tau),
                frame: *clip.frame(tau),
                state: crate::motion::features::avatar_state_in(clip, tau, &AvatarFrame::IDENTITY),
                height: clip.root_position(tau).y,
            })
            .collect();
        Ok(Engine {
            model,
            config,
            terrain: None,
            state: EngineState {
                history,
                tracker: TouchTracker::default(),
                reference: HeightReference::default(),
                smoothed: true,
                frame_index: 0,
            },
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn reset(&mut self) {
        let fresh = Engine::new(self.model.clone(), self.config, None).expect("warmup never fails");
        self.state = fresh.state;
    }

    /// Network input for the next step given `f_{t+1}` and `d_{t+1}`.
    pub fn build_input(&self, foot_next: &FootState, facing: FacingInput) -> Vec<f64> {
        let l = self.model.layout();
        let now = self.state.frame();
        let mut input = Vec::with_capacity(l.input_dim());
        for e in self.state.history.iter().skip(1) {
            input.extend_from_slice(&e.foot.to_array());
        }
        input.extend_from_slice(&foot_next.to_array());
        input.extend_from_slice(&[facing.sin, facing.cos]);
        for e in &self.state.history {
            input.extend_from_slice(&now.point_xz_to_local([e.frame.origin.x, e.frame.origin.y]));
        }
        for e in &self.state.history {
            let local = e.state.in_frame(&now).expect("history orientations are valid");
            local.write_into(&mut input);
        }
        input
    }

    fn fault(&self, what: &str, input: &[f64]) -> Error {
        let f = self.state.frame();
        let max = input.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Error::EngineFault(format!(
            "{what} at frame {}: avatar at ({:.3}, {:.3}) yaw {:.3}, input max |x| = {max:.3e}",
            self.state.frame_index, f.origin.x, f.origin.y, f.yaw
        ))
    }

    /// Advances one frame from explicit network inputs. `foot_next` is
    /// expected in the next avatar frame.
    pub fn step_with(&mut self, foot_next: FootState, facing: FacingInput) -> Result<PoseFrame> {
        let layout = self.model.layout();
        let input = self.build_input(&foot_next, facing);
        let pred = match self.model.predict(&input) {
            Ok(p) => p,
            Err(Error::NonFinite(m)) => return Err(self.fault(&m, &input)),
            Err(e) => return Err(e),
        };
        let now = self.state.frame();
        let mut target = pred.target;
        if let (Some(beta), true) = (self.config.smoothing, self.state.smoothed) {
            let last = self.state.history.back().expect("history is never empty");
            let local = last.state.in_frame(&now)?;
            let mut prev = Vec::with_capacity(layout.reduced_state_dim());
            for o in &local.orient {
                prev.extend_from_slice(&o.to_array());
            }
            prev.push(last.height);
            for v in &local.vel {
                prev.extend_from_slice(v.as_slice());
            }
            let range = layout.target_state();
            let blended = smooth_output(&prev, &target[range.clone()], beta);
            target[range].copy_from_slice(&blended);
        }
        self.state.smoothed = true;
        let decoded = decode_target(&self.model.skeleton, &layout, &target).map_err(|e| self.fault(&e.to_string(), &input))?;
        let next_frame = now.compose(&decoded.next_frame);
        let world = decoded.state.out_of_frame(&now)?;

        let rotations = world
            .orient
            .iter()
            .map(|o| o.decode())
            .collect::<Result<Vec<Mat3>>>()?;
        let root = world.pos[0];
        let mut pose = WorldPose {
            root,
            rotations,
            positions: world.pos.clone(),
        };
        let contacts = [foot_next.in_contact(0), foot_next.in_contact(1)];
        let mut ik = [false; 2];
        if let Some(t) = &self.terrain {
            ik = adapt_to_terrain(
                &self.model.skeleton,
                &mut pose,
                contacts,
                t,
                &mut self.state.reference,
                1.0 / self.config.frame_rate,
                self.config.airborne_tau,
            )?;
        }

        self.state.history.pop_front();
        self.state.history.push_back(HistoryEntry {
            foot: foot_next,
            frame: next_frame,
            state: world,
            height: decoded.height,
        });
        self.state.frame_index += 1;
        Ok(PoseFrame {
            frame: self.state.frame_index,
            root: pose.root,
            yaw: next_frame.yaw,
            rotations: pose.rotations,
            joints: pose.positions,
            contacts,
            clamped: [false, ik[0], ik[1]],
            ignored_touches: false,
            gating: pred.gating,
        })
    }

    /// Advances one frame from user input.
    pub fn step(&mut self, touch: &TouchFrame) -> Result<PoseFrame> {
        let now = self.state.frame();
        let reading = self
            .state
            .tracker
            .interpret(touch, self.config.region_scale, self.config.frame_rate);
        let (facing, turn_clamped) = desired_facing(now.yaw, touch.joystick, &self.config.facing);
        let foot_next = input::rotate_foot_state(&reading.feet, facing.angle());
        let mut pose = self.step_with(foot_next, facing)?;
        pose.clamped[0] = turn_clamped;
        pose.ignored_touches = reading.ignored_touches;
        Ok(pose)
    }
}

/// Applies `steps` per-frame local transforms to `start`.
pub fn fold_frames(start: AvatarFrame, steps: &[AvatarFrame]) -> AvatarFrame {
    steps.iter().fold(start, |f, s| f.compose(s))
}
