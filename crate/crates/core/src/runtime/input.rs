//! Touch and joystick interpretation.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, yaw_matrix, FacingInput, Vec3};
use crate::motion::FootState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Touch {
    pub id: u32,
    /// normalized region coordinates, x to the right and y down
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joystick {
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TouchFrame {
    #[serde(default)]
    pub touches: Vec<Touch>,
    #[serde(default)]
    pub joystick: Option<Joystick>,
}

impl TouchFrame {
    pub fn empty() -> Self {
        TouchFrame::default()
    }
}

/// Region coordinates to avatar-local ground-plane meters. Screen up is the
/// avatar's forward (+z) direction.
pub fn region_to_local(x: f64, y: f64, region_scale: f64) -> [f64; 2] {
    [(x - 0.5) * region_scale, (0.5 - y) * region_scale]
}

/// Finger-to-foot assignment carried across frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TouchTracker {
    assigned: [Option<u32>; 2],
    last: [Option<[f64; 2]>; 2],
}

/// Result of interpreting one touch frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TouchReading {
    /// foot state in the current avatar frame
    pub feet: FootState,
    /// more than two touches, or a new touch while both feet were held
    pub ignored_touches: bool,
}

impl TouchTracker {
    pub fn assignment(&self) -> [Option<u32>; 2] {
        self.assigned
    }

    /// Maps touches to feet. The first touch takes the foot on its side of the
    /// region, a second touch takes the remaining foot, and a foot whose
    /// finger has lifted is in swing with an all-zero state.
    pub fn interpret(&mut self, frame: &TouchFrame, region_scale: f64, frame_rate: f64) -> TouchReading {
        let mut ignored = frame.touches.len() > 2;
        let touches = &frame.touches[..frame.touches.len().min(2)];
        for slot in 0..2 {
            if let Some(id) = self.assigned[slot] {
                if !touches.iter().any(|t| t.id == id) {
                    self.assigned[slot] = None;
                    self.last[slot] = None;
                }
            }
        }
        for t in touches {
            if self.assigned.contains(&Some(t.id)) {
                continue;
            }
            let slot = match self.assigned {
                [None, None] => usize::from(t.x >= 0.5),
                [None, Some(_)] => 0,
                [Some(_), None] => 1,
                [Some(_), Some(_)] => {
                    ignored = true;
                    continue;
                }
            };
            self.assigned[slot] = Some(t.id);
        }
        let mut sides = [None, None];
        for slot in 0..2 {
            let Some(id) = self.assigned[slot] else { continue };
            let t = touches.iter().find(|t| t.id == id).expect("assigned touches are present");
            let p = region_to_local(t.x, t.y, region_scale);
            let v = match self.last[slot] {
                Some(q) => [(p[0] - q[0]) * frame_rate, (p[1] - q[1]) * frame_rate],
                None => [0.0, 0.0],
            };
            self.last[slot] = Some(p);
            sides[slot] = Some((p, v));
        }
        TouchReading {
            feet: FootState::from_feet(sides),
            ignored_touches: ignored,
        }
    }
}

/// Re-expresses a foot state given in `{t}` in a frame turned by `delta`.
pub fn rotate_foot_state(f: &FootState, delta: f64) -> FootState {
    let r = yaw_matrix(delta).transpose();
    let rot = |a: f64, b: f64| {
        let v = r * Vec3::new(a, 0.0, b);
        [v.x, v.z]
    };
    let mut out = *f;
    for i in 0..2 {
        if f.c[i] > 0.5 {
            let p = rot(f.p[2 * i], f.p[2 * i + 1]);
            let v = rot(f.v[2 * i], f.v[2 * i + 1]);
            out.p[2 * i..2 * i + 2].copy_from_slice(&p);
            out.v[2 * i..2 * i + 2].copy_from_slice(&v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacingSettings {
    pub deadzone: f64,
    /// radians per frame
    pub max_turn: f64,
}

impl Default for FacingSettings {
    fn default() -> Self {
        FacingSettings {
            deadzone: 0.1,
            max_turn: 6f64.to_radians(),
        }
    }
}

/// Facing input from a joystick. The stick gives a desired world heading
/// (`dx` along world x, `dy` along world z); the change from `current_yaw`
/// is wrapped and clamped. Returns the input and whether it was clamped.
pub fn desired_facing(current_yaw: f64, joystick: Option<Joystick>, s: &FacingSettings) -> (FacingInput, bool) {
    let Some(j) = joystick else {
        return (FacingInput::FORWARD, false);
    };
    if !(j.dx.is_finite() && j.dy.is_finite()) || j.dx.hypot(j.dy) < s.deadzone {
        return (FacingInput::FORWARD, false);
    }
    let delta = wrap_angle(j.dx.atan2(j.dy) - current_yaw);
    let clamped = delta.clamp(-s.max_turn, s.max_turn);
    (FacingInput::from_angle(clamped), clamped != delta)
}
