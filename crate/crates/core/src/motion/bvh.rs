//! BVH reading and writing.
//!
//! Rotation channels are applied in their declared order, so
//! `Zrotation Xrotation Yrotation` yields `Rz · Rx · Ry`. Position channels on
//! non-root joints are ignored; the hierarchy offsets define bone lengths.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, Mat3, Vec3};
use crate::skeleton::Skeleton;

use super::MotionClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channel {
    Position(usize),
    Rotation(usize),
}

impl Channel {
    fn parse(s: &str) -> Option<Channel> {
        let axis = match s.as_bytes().first()?.to_ascii_lowercase() {
            b'x' => 0,
            b'y' => 1,
            b'z' => 2,
            _ => return None,
        };
        match s[1..].to_ascii_lowercase().as_str() {
            "position" => Some(Channel::Position(axis)),
            "rotation" => Some(Channel::Rotation(axis)),
            _ => None,
        }
    }
}

struct Tokens<'a> {
    tokens: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let tokens = text
            .lines()
            .enumerate()
            .flat_map(|(i, line)| line.split_whitespace().map(move |t| (i + 1, t)))
            .collect();
        Tokens { tokens, pos: 0 }
    }

    fn line(&self) -> usize {
        self.tokens
            .get(self.pos)
            .or(self.tokens.last())
            .map(|t| t.0)
            .unwrap_or(1)
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line(),
            message: message.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self
            .tokens
            .get(self.pos)
            .map(|t| t.1)
            .ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(|t| t.1)
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let line = self.line();
        let t = self.next()?;
        if t.eq_ignore_ascii_case(word) {
            Ok(())
        } else {
            Err(Error::Parse {
                line,
                message: format!("expected '{word}', found '{t}'"),
            })
        }
    }

    fn number(&mut self) -> Result<f64> {
        let line = self.line();
        let t = self.next()?;
        t.parse().map_err(|_| Error::Parse {
            line,
            message: format!("expected a number, found '{t}'"),
        })
    }
}

struct RawJoint {
    name: String,
    parent: Option<usize>,
    offset: Vec3,
    channels: Vec<Channel>,
}

fn parse_joint(tokens: &mut Tokens, parent: Option<usize>, joints: &mut Vec<RawJoint>) -> Result<()> {
    let name = tokens.next()?.to_string();
    tokens.expect("{")?;
    tokens.expect("OFFSET")?;
    let offset = Vec3::new(tokens.number()?, tokens.number()?, tokens.number()?);
    tokens.expect("CHANNELS")?;
    let line = tokens.line();
    let count = tokens.number()?;
    if count < 0.0 || count.fract() != 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("invalid channel count {count}"),
        });
    }
    let mut channels = Vec::with_capacity(count as usize);
    for _ in 0..count as usize {
        let line = tokens.line();
        let t = tokens.next()?;
        channels.push(Channel::parse(t).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown channel '{t}'"),
        })?);
    }
    let index = joints.len();
    joints.push(RawJoint {
        name,
        parent,
        offset,
        channels,
    });
    loop {
        let t = tokens.next()?;
        match t.to_ascii_uppercase().as_str() {
            "JOINT" => parse_joint(tokens, Some(index), joints)?,
            "END" => {
                tokens.expect("Site")?;
                tokens.expect("{")?;
                tokens.expect("OFFSET")?;
                for _ in 0..3 {
                    tokens.number()?;
                }
                tokens.expect("}")?;
            }
            "}" => return Ok(()),
            _ => {
                tokens.pos -= 1;
                return Err(tokens.err(format!("unexpected token '{t}' in joint block")));
            }
        }
    }
}

/// Parses a BVH document. Offsets whose median magnitude exceeds 10 are taken
/// to be centimeters and scaled to meters.
pub fn parse_bvh(name: &str, text: &str) -> Result<MotionClip> {
    let mut tokens = Tokens::new(text);
    tokens.expect("HIERARCHY")?;
    tokens.expect("ROOT")?;
    let mut joints = Vec::new();
    parse_joint(&mut tokens, None, &mut joints)?;
    if tokens.peek().is_some_and(|t| t.eq_ignore_ascii_case("ROOT")) {
        return Err(tokens.err("multiple ROOT joints are not supported"));
    }
    tokens.expect("MOTION")?;
    tokens.expect("Frames:")?;
    let line = tokens.line();
    let frames = tokens.number()?;
    if frames < 0.0 || frames.fract() != 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("invalid frame count {frames}"),
        });
    }
    let frames = frames as usize;
    tokens.expect("Frame")?;
    tokens.expect("Time:")?;
    let time_line = tokens.line();
    let frame_time = tokens.number()?;
    if !(frame_time > 0.0) {
        return Err(Error::Parse {
            line: time_line,
            message: format!("invalid frame time {frame_time}"),
        });
    }

    let mut lengths: Vec<f64> = joints.iter().skip(1).map(|j| j.offset.norm()).collect();
    lengths.sort_by(f64::total_cmp);
    let scale = match lengths.get(lengths.len() / 2) {
        Some(m) if *m > 10.0 => 0.01,
        _ => 1.0,
    };

    let channel_total: usize = joints.iter().map(|j| j.channels.len()).sum();
    // motion rows are line-oriented; resume after the "Frame Time:" line
    let mut rows = text
        .lines()
        .enumerate()
        .skip(time_line)
        .filter(|(_, l)| !l.trim().is_empty());
    let mut root_positions = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    for f in 0..frames {
        let (i, row) = rows.next().ok_or_else(|| Error::Parse {
            line: text.lines().count(),
            message: format!("expected {frames} motion rows, found {f}"),
        })?;
        let values = row
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("motion row {f}: {e}"),
            })?;
        if values.len() != channel_total {
            return Err(Error::Parse {
                line: i + 1,
                message: format!(
                    "motion row {f} has {} values, hierarchy declares {channel_total} channels",
                    values.len()
                ),
            });
        }
        let mut cursor = 0;
        let mut root = joints[0].offset * scale;
        let mut frame_rot = Vec::with_capacity(joints.len());
        for (j, joint) in joints.iter().enumerate() {
            let mut r = Mat3::identity();
            let mut pos = Vec3::zeros();
            for ch in &joint.channels {
                let v = values[cursor];
                cursor += 1;
                match ch {
                    Channel::Rotation(axis) => r *= axis_rotation(*axis, v.to_radians()),
                    Channel::Position(axis) => pos[*axis] = v * scale,
                }
            }
            if j == 0 && joint.channels.iter().any(|c| matches!(c, Channel::Position(_))) {
                root = pos;
            }
            frame_rot.push(r);
        }
        root_positions.push(root);
        rotations.push(frame_rot);
    }
    if let Some((i, _)) = rows.next() {
        return Err(Error::Parse {
            line: i + 1,
            message: format!("more motion rows than the declared {frames} frames"),
        });
    }

    let names = joints.iter().map(|j| j.name.clone()).collect();
    let parents = joints.iter().map(|j| j.parent).collect();
    let offsets = joints
        .iter()
        .enumerate()
        .map(|(i, j)| if i == 0 { Vec3::zeros() } else { j.offset * scale })
        .collect();
    let skeleton = Skeleton::with_detected_legs(names, parents, offsets)?;
    MotionClip::new(name, skeleton, 1.0 / frame_time, root_positions, rotations)
}

/// Euler angles (radians) for `R = Rz(a) · Ry(b) · Rx(c)`.
fn euler_zyx(r: &Mat3) -> [f64; 3] {
    let sb = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        [r[(1, 0)].atan2(r[(0, 0)]), b, r[(2, 1)].atan2(r[(2, 2)])]
    } else {
        [(-r[(0, 1)]).atan2(r[(1, 1)]), b, 0.0]
    }
}

fn write_hierarchy(out: &mut String, skeleton: &Skeleton, j: usize, depth: usize) {
    let pad = "\t".repeat(depth);
    let o = skeleton.offset(j);
    if j == 0 {
        let _ = writeln!(out, "ROOT {}", skeleton.names()[j]);
    } else {
        let _ = writeln!(out, "{pad}JOINT {}", skeleton.names()[j]);
    }
    let _ = writeln!(out, "{pad}{{");
    let _ = writeln!(out, "{pad}\tOFFSET {} {} {}", o.x, o.y, o.z);
    if j == 0 {
        let _ = writeln!(
            out,
            "{pad}\tCHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation"
        );
    } else {
        let _ = writeln!(out, "{pad}\tCHANNELS 3 Zrotation Yrotation Xrotation");
    }
    let children: Vec<usize> = skeleton.children(j).collect();
    if children.is_empty() {
        let _ = writeln!(out, "{pad}\tEnd Site\n{pad}\t{{\n{pad}\t\tOFFSET 0 0 0\n{pad}\t}}");
    }
    for c in children {
        write_hierarchy(out, skeleton, c, depth + 1);
    }
    let _ = writeln!(out, "{pad}}}");
}

/// Joints are written in depth-first order, which must match the skeleton's
/// own ordering for the result to re-parse to the same joint indices.
fn depth_first(skeleton: &Skeleton) -> Vec<usize> {
    let mut order = Vec::new();
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        let mut kids: Vec<usize> = skeleton.children(j).collect();
        kids.reverse();
        stack.extend(kids);
    }
    order
}

/// Serializes a clip as BVH in meters with ZYX rotation channels.
pub fn write_bvh(clip: &MotionClip) -> String {
    let skeleton = clip.skeleton();
    let mut out = String::from("HIERARCHY\n");
    write_hierarchy(&mut out, skeleton, 0, 0);
    let _ = writeln!(out, "MOTION\nFrames: {}", clip.len());
    let _ = writeln!(out, "Frame Time: {}", 1.0 / clip.frame_rate());
    let order = depth_first(skeleton);
    for i in 0..clip.len() {
        let root = clip.root_position(i);
        let mut row = format!("{} {} {}", root.x, root.y, root.z);
        for &j in &order {
            let [a, b, c] = euler_zyx(&clip.local_rotations(i)[j]);
            let _ = write!(row, " {} {} {}", a.to_degrees(), b.to_degrees(), c.to_degrees());
        }
        out.push_str(&row);
        out.push('\n');
    }
    out
}

/// Hierarchy plus a single rest frame; used as the skeleton companion of a
/// dataset file.
pub fn write_skeleton_bvh(skeleton: &Skeleton) -> String {
    let rest = vec![Mat3::identity(); skeleton.joint_count()];
    let clip = MotionClip::new("skeleton", skeleton.clone(), 30.0, vec![Vec3::zeros()], vec![rest])
        .expect("rest pose of a valid skeleton");
    write_bvh(&clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, WalkParams};

    const TWO_JOINT: &str = "HIERARCHY
ROOT Hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Spine
  {
    OFFSET 0 0.3 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0 0.2 0
    }
  }
}
MOTION
Frames: 1
Frame Time: 0.0333333
0 0 0 0 0 0 0 0 0
";

    fn parse_raw(text: &str) -> Result<(Vec<RawJoint>, Vec<Vec<Mat3>>)> {
        // exercises the parser without requiring leg joints
        let mut tokens = Tokens::new(text);
        tokens.expect("HIERARCHY")?;
        tokens.expect("ROOT")?;
        let mut joints = Vec::new();
        parse_joint(&mut tokens, None, &mut joints)?;
        let clip = parse_bvh("x", text);
        match clip {
            Err(Error::InvalidSkeleton(_)) => {}
            Err(e) => return Err(e),
            Ok(_) => {}
        }
        let mut rot = Vec::new();
        for line in text.lines().skip_while(|l| !l.starts_with("Frame Time")).skip(1) {
            let v: Vec<f64> = line.split_whitespace().map(|x| x.parse().unwrap()).collect();
            if v.is_empty() {
                continue;
            }
            let mut cursor = 0;
            let mut frame = Vec::new();
            for j in &joints {
                let mut r = Mat3::identity();
                for ch in &j.channels {
                    if let Channel::Rotation(a) = ch {
                        r *= axis_rotation(*a, v[cursor].to_radians());
                    }
                    cursor += 1;
                }
                frame.push(r);
            }
            rot.push(frame);
        }
        Ok((joints, rot))
    }

    #[test]
    fn minimal_two_joint_identity() {
        let (joints, rot) = parse_raw(TWO_JOINT).unwrap();
        assert_eq!(joints.len(), 2);
        assert_eq!(rot.len(), 1);
        assert!(rot[0].iter().all(|r| *r == Mat3::identity()));
    }

    #[test]
    fn declared_channel_order_is_honored() {
        let text = TWO_JOINT.replace("0 0 0 0 0 0 0 0 0", "0 0 0 0 0 0 90 0 0");
        let (_, rot) = parse_raw(&text).unwrap();
        // hand-built product Rz(90) · Rx(0) · Ry(0)
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((rot[0][1] - expected).norm() < 1e-12);

        let text = TWO_JOINT.replace("0 0 0 0 0 0 0 0 0", "0 0 0 0 0 0 90 90 0");
        let (_, rot) = parse_raw(&text).unwrap();
        let expected = axis_rotation(2, std::f64::consts::FRAC_PI_2)
            * axis_rotation(0, std::f64::consts::FRAC_PI_2);
        assert!((rot[0][1] - expected).norm() < 1e-12);
    }

    #[test]
    fn short_motion_row_names_the_row() {
        let clip = synth::walk_cycle(&WalkParams::default());
        let text = write_bvh(&clip);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let last = lines.len() - 1;
        let mut vals: Vec<&str> = lines[last].split_whitespace().collect();
        vals.pop();
        lines[last] = vals.join(" ");
        match parse_bvh("x", &lines.join("\n")) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, last + 1);
                assert!(message.contains("motion row 59"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_input_errors() {
        assert!(matches!(parse_bvh("x", "HIERARCHY\nROOT"), Err(Error::Parse { .. })));
        assert!(matches!(parse_bvh("x", "MOTION"), Err(Error::Parse { line: 1, .. })));
        let bad = TWO_JOINT.replace("0 0 0 0 0 0 0 0 0", "0 0 0 0 0 a 0 0 0");
        assert!(matches!(parse_raw(&bad), Err(Error::Parse { line: 19, .. })));
        let bad = TWO_JOINT.replace("Zrotation Xrotation Yrotation\n    End", "Zrotation Xrotation Wrotation\n    End");
        assert!(matches!(parse_bvh("x", &bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn write_then_parse_round_trip() {
        let clip = synth::walk_cycle(&WalkParams::default());
        let back = parse_bvh("walk", &write_bvh(&clip)).unwrap();
        assert_eq!(back.len(), clip.len());
        assert!((back.frame_rate() - clip.frame_rate()).abs() < 1e-9);
        assert_eq!(back.skeleton().names(), clip.skeleton().names());
        for i in 0..clip.len() {
            for (a, b) in back.positions(i).iter().zip(clip.positions(i)) {
                assert!((a - b).norm() < 1e-9);
            }
        }
        assert_eq!(back.all_contacts(), clip.all_contacts());
    }

    #[test]
    fn centimeter_files_are_scaled() {
        let clip = synth::walk_cycle(&WalkParams::default());
        let text = write_bvh(&clip);
        // scale every OFFSET and root position by 100
        let mut scaled = String::new();
        let mut in_motion = false;
        for line in text.lines() {
            let t = line.trim_start();
            if t.starts_with("OFFSET") {
                let v: Vec<f64> = t[6..].split_whitespace().map(|x| x.parse().unwrap()).collect();
                let indent = &line[..line.len() - t.len()];
                let _ = writeln!(scaled, "{indent}OFFSET {} {} {}", v[0] * 100.0, v[1] * 100.0, v[2] * 100.0);
            } else if in_motion {
                let mut v: Vec<f64> = t.split_whitespace().map(|x| x.parse().unwrap()).collect();
                v[..3].iter_mut().for_each(|x| *x *= 100.0);
                let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(scaled, "{}", row.join(" "));
            } else {
                let _ = writeln!(scaled, "{line}");
                in_motion |= t.starts_with("Frame Time");
            }
        }
        let back = parse_bvh("cm", &scaled).unwrap();
        for (a, b) in back.skeleton().offsets().iter().zip(clip.skeleton().offsets()) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!((back.positions(10)[3] - clip.positions(10)[3]).norm() < 1e-9);
    }

    #[test]
    fn euler_decomposition_round_trip() {
        for v in [[0.3, -0.2, 1.1], [0.0, std::f64::consts::FRAC_PI_2, 0.4], [-2.0, 0.1, 3.0]] {
            let r = crate::geometry::rotation_exp(&Vec3::from(v));
            let [a, b, c] = euler_zyx(&r);
            let back = axis_rotation(2, a) * axis_rotation(1, b) * axis_rotation(0, c);
            assert!((back - r).norm() < 1e-9);
        }
    }

    #[test]
    fn skeleton_companion_parses() {
        let s = synth::biped_skeleton();
        let clip = parse_bvh("s", &write_skeleton_bvh(&s)).unwrap();
        assert_eq!(clip.skeleton(), &s);
    }
}
