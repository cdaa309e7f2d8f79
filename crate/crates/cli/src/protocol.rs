//! Session messages exchanged with the browser UI as JSON text frames.

use serde::{Deserialize, Serialize};
use touchwalker::runtime::{Joystick, PoseFrame, Touch};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello {
        protocol_version: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        region_scale: Option<f64>,
    },
    TouchFrame {
        seq: u64,
        #[serde(default)]
        touches: Vec<Touch>,
        #[serde(default)]
        joystick: Option<Joystick>,
    },
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootPose {
    pub pos: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPose {
    pub pos: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampedFlags {
    /// the facing change was limited to the per-frame maximum
    pub turn: bool,
    pub ik_left: bool,
    pub ik_right: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    HelloAck {
        protocol_version: u32,
        k: usize,
        #[serde(rename = "J")]
        joints: usize,
        joint_names: Vec<String>,
        /// parent index per joint, `null` for the root
        parents: Vec<Option<usize>>,
        frame_rate: f64,
    },
    PoseFrame {
        /// seq of the touch_frame that produced this pose; 0 for self-ticks
        seq: u64,
        synthetic: bool,
        frame: u64,
        root: RootPose,
        joints: Vec<JointPose>,
        contacts: [bool; 2],
        clamped_flags: ClampedFlags,
        ignored_touches: bool,
        /// foot-to-touch assignment, left then right
        assignment: [Option<u32>; 2],
    },
    Fault {
        code: String,
        message: String,
    },
}

pub mod fault {
    pub const UNSUPPORTED_VERSION: &str = "unsupported_version";
    pub const HANDSHAKE_REQUIRED: &str = "handshake_required";
    pub const BAD_MESSAGE: &str = "bad_message";
    pub const BAD_SEQUENCE: &str = "bad_sequence";
    pub const ENGINE_FAULT: &str = "engine_fault";
}

impl ServerMessage {
    pub fn fault(code: &str, message: impl Into<String>) -> Self {
        ServerMessage::Fault {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn pose(seq: u64, pose: &PoseFrame, assignment: [Option<u32>; 2]) -> Self {
        let v = |p: &touchwalker::geometry::Vec3| [p.x, p.y, p.z];
        ServerMessage::PoseFrame {
            seq,
            synthetic: seq == 0,
            frame: pose.frame,
            root: RootPose {
                pos: v(&pose.root),
                yaw: pose.yaw,
            },
            joints: pose.joints.iter().map(|p| JointPose { pos: v(p) }).collect(),
            contacts: pose.contacts,
            clamped_flags: ClampedFlags {
                turn: pose.clamped[0],
                ik_left: pose.clamped[1],
                ik_right: pose.clamped[2],
            },
            ignored_touches: pose.ignored_touches,
            assignment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn messages_are_tagged_snake_case() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"hello","protocol_version":1}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::Hello {
                protocol_version: 1,
                region_scale: None
            }
        );
        let m: ClientMessage =
            serde_json::from_str(r#"{"type":"touch_frame","seq":3,"touches":[{"id":1,"x":0.2,"y":0.5}],"joystick":null}"#)
                .unwrap();
        assert!(matches!(m, ClientMessage::TouchFrame { seq: 3, ref touches, .. } if touches.len() == 1));
        let m: ClientMessage = serde_json::from_str(r#"{"type":"reset"}"#).unwrap();
        assert_eq!(m, ClientMessage::Reset);
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"dance"}"#).is_err());

        let ack = ServerMessage::HelloAck {
            protocol_version: 1,
            k: 5,
            joints: 2,
            joint_names: vec!["a".into(), "b".into()],
            parents: vec![None, Some(0)],
            frame_rate: 30.0,
        };
        let text = serde_json::to_string(&ack).unwrap();
        assert!(text.starts_with(r#"{"type":"hello_ack""#));
        assert!(text.contains(r#""J":2"#));
        let f = serde_json::to_string(&ServerMessage::fault(fault::HANDSHAKE_REQUIRED, "x")).unwrap();
        assert_eq!(f, r#"{"type":"fault","code":"handshake_required","message":"x"}"#);
    }
}
