//! BVH motion-capture file parsing and writing.
//!
//! Parsing honors the file's channel order when composing Euler rotations
//! and converts every rotation to 6D form. End Sites become leaf joints
//! named `{parent}_End` with identity rotations; on export such leaves
//! are written back as End Sites (when their rotations are identity), so
//! parse -> write -> parse is the identity on positions and decoded
//! rotation matrices.
//!
//! Export uses `Zrotation Yrotation Xrotation` channels on every joint
//! plus `Xposition Yposition Zposition` on the root. Euler extraction at
//! gimbal lock picks the canonical branch (`Xrotation = 0`).

use nalgebra::Matrix3;
use ndarray::{Array2, Array3};
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::skeleton::{
    matrix_to_rot6d, rot6d_to_matrix, rot_x, rot_y, rot_z, Rotation6D, SkeletonTopology,
    ROT6D_IDENTITY,
};

use super::MotionClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channel {
    Xpos,
    Ypos,
    Zpos,
    Xrot,
    Yrot,
    Zrot,
}

impl Channel {
    fn parse(s: &str, line: usize) -> Result<Self> {
        match s {
            "Xposition" => Ok(Channel::Xpos),
            "Yposition" => Ok(Channel::Ypos),
            "Zposition" => Ok(Channel::Zpos),
            "Xrotation" => Ok(Channel::Xrot),
            "Yrotation" => Ok(Channel::Yrot),
            "Zrotation" => Ok(Channel::Zrot),
            other => Err(Error::Parse { line, msg: format!("unsupported channel name {other:?}") }),
        }
    }
}

struct RawJoint {
    name: String,
    parent: i64,
    offset: [f64; 3],
    channels: Vec<Channel>,
}

struct Tokens<'a> {
    words: Vec<(usize, &'a str)>,
    at: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let mut words = Vec::new();
        for (i, line) in text.lines().enumerate() {
            for w in line.split_whitespace() {
                words.push((i + 1, w));
            }
        }
        Tokens { words, at: 0 }
    }

    fn line(&self) -> usize {
        self.words.get(self.at).or_else(|| self.words.last()).map_or(0, |(l, _)| *l)
    }

    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.at).map(|(_, w)| *w)
    }

    fn next(&mut self) -> Result<&'a str> {
        let w = self
            .words
            .get(self.at)
            .map(|(_, w)| *w)
            .ok_or_else(|| Error::Parse { line: self.line(), msg: "unexpected end of file".into() })?;
        self.at += 1;
        Ok(w)
    }

    fn expect(&mut self, what: &str) -> Result<()> {
        let line = self.line();
        let w = self.next()?;
        if w != what {
            return Err(Error::Parse { line, msg: format!("expected {what:?}, found {w:?}") });
        }
        Ok(())
    }

    fn number(&mut self) -> Result<f64> {
        let line = self.line();
        let w = self.next()?;
        w.parse::<f64>()
            .map_err(|_| Error::Parse { line, msg: format!("expected a number, found {w:?}") })
    }

    fn integer(&mut self) -> Result<usize> {
        let line = self.line();
        let w = self.next()?;
        w.parse::<usize>()
            .map_err(|_| Error::Parse { line, msg: format!("expected an integer, found {w:?}") })
    }
}

fn parse_joint_block(
    toks: &mut Tokens,
    parent: i64,
    name: String,
    joints: &mut Vec<RawJoint>,
) -> Result<()> {
    toks.expect("{")?;
    let me = joints.len();
    joints.push(RawJoint { name, parent, offset: [0.0; 3], channels: Vec::new() });

    loop {
        let line = toks.line();
        match toks.next()? {
            "OFFSET" => {
                for a in 0..3 {
                    joints[me].offset[a] = toks.number()?;
                }
            }
            "CHANNELS" => {
                let n = toks.integer()?;
                for _ in 0..n {
                    let line = toks.line();
                    let ch = Channel::parse(toks.next()?, line)?;
                    joints[me].channels.push(ch);
                }
            }
            "JOINT" => {
                let child = toks.next()?.to_string();
                parse_joint_block(toks, me as i64, child, joints)?;
            }
            "End" => {
                toks.expect("Site")?;
                toks.expect("{")?;
                let mut offset = [0.0; 3];
                loop {
                    match toks.next()? {
                        "OFFSET" => {
                            for a in offset.iter_mut() {
                                *a = toks.number()?;
                            }
                        }
                        "}" => break,
                        other => {
                            return Err(Error::Parse {
                                line,
                                msg: format!("unexpected {other:?} in End Site"),
                            })
                        }
                    }
                }
                let mut end_name = format!("{}_End", joints[me].name);
                let mut k = 2;
                while joints.iter().any(|j| j.name == end_name) {
                    end_name = format!("{}_End{k}", joints[me].name);
                    k += 1;
                }
                joints.push(RawJoint {
                    name: end_name,
                    parent: me as i64,
                    offset,
                    channels: Vec::new(),
                });
            }
            "}" => return Ok(()),
            other => {
                return Err(Error::Parse { line, msg: format!("unexpected token {other:?}") })
            }
        }
    }
}

/// Parses BVH text into a topology and a motion clip.
///
/// `style_id`/`dataset_id` on the returned clip are zero; callers assign
/// them from the manifest.
pub fn parse_bvh(bytes: &[u8]) -> Result<(Arc<SkeletonTopology>, MotionClip)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Parse { line: 0, msg: "file is not valid UTF-8".into() })?;
    let mut toks = Tokens::new(text);
    toks.expect("HIERARCHY")?;
    toks.expect("ROOT")?;
    let root_name = toks.next()?.to_string();
    let mut joints = Vec::new();
    parse_joint_block(&mut toks, -1, root_name, &mut joints)?;

    toks.expect("MOTION")?;
    toks.expect("Frames:")?;
    let frames = toks.integer()?;
    let line = toks.line();
    toks.expect("Frame")?;
    toks.expect("Time:")?;
    let frame_time = toks.number()?;
    if frame_time <= 0.0 {
        return Err(Error::Parse { line, msg: format!("invalid frame time {frame_time}") });
    }
    if frames < 2 {
        return Err(Error::Parse { line, msg: format!("need at least 2 frames, got {frames}") });
    }

    let n_channels: usize = joints.iter().map(|j| j.channels.len()).sum();
    let j = joints.len();
    let mut root_pos = Array2::zeros((frames, 3));
    let mut joint_rot = Array3::zeros((frames, j, 6));
    for f in 0..frames {
        let row_line = toks.line();
        let mut values = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            values.push(toks.number().map_err(|_| Error::Parse {
                line: row_line,
                msg: format!(
                    "frame {f}: expected {n_channels} channel values (channel-count mismatch)"
                ),
            })?);
        }
        let mut cursor = 0;
        for (ji, joint) in joints.iter().enumerate() {
            let mut rot = Matrix3::identity();
            for ch in &joint.channels {
                let v = values[cursor];
                cursor += 1;
                match ch {
                    Channel::Xpos | Channel::Ypos | Channel::Zpos => {
                        if ji == 0 {
                            let axis = match ch {
                                Channel::Xpos => 0,
                                Channel::Ypos => 1,
                                _ => 2,
                            };
                            root_pos[[f, axis]] = v;
                        }
                        // position channels on non-root joints are consumed
                        // but ignored (offsets already carry the bone)
                    }
                    Channel::Xrot => rot *= rot_x(v.to_radians()),
                    Channel::Yrot => rot *= rot_y(v.to_radians()),
                    Channel::Zrot => rot *= rot_z(v.to_radians()),
                }
            }
            let enc = matrix_to_rot6d(&rot).map_err(|e| Error::Parse {
                line: row_line,
                msg: format!("frame {f}, joint {}: {e}", joint.name),
            })?;
            for (i, x) in enc.iter().enumerate() {
                joint_rot[[f, ji, i]] = *x;
            }
        }
    }
    if toks.peek().is_some() {
        return Err(Error::Parse {
            line: toks.line(),
            msg: "trailing values after the declared frame count (channel-count mismatch)".into(),
        });
    }

    let topo = Arc::new(SkeletonTopology::new(
        joints.iter().map(|j| j.name.clone()).collect(),
        joints.iter().map(|j| j.parent).collect(),
        joints.iter().map(|j| j.offset).collect(),
        &[],
    )?);
    let clip = MotionClip::new(topo.clone(), 1.0 / frame_time, root_pos, joint_rot, 0, 0)?;
    Ok((topo, clip))
}

/// ZYX Euler angles (degrees) of `r` such that
/// `r = rot_z(z) * rot_y(y) * rot_x(x)`.
pub(crate) fn matrix_to_euler_zyx_deg(r: &Matrix3<f64>) -> [f64; 3] {
    let sy = -r[(2, 0)];
    if sy.abs() < 1.0 - 1e-9 {
        let y = sy.asin();
        let x = r[(2, 1)].atan2(r[(2, 2)]);
        let z = r[(1, 0)].atan2(r[(0, 0)]);
        [z.to_degrees(), y.to_degrees(), x.to_degrees()]
    } else {
        // gimbal lock: pick x = 0
        let y = if sy > 0.0 { std::f64::consts::FRAC_PI_2 } else { -std::f64::consts::FRAC_PI_2 };
        let z = (-r[(0, 1)]).atan2(r[(1, 1)]);
        [z.to_degrees(), y.to_degrees(), 0.0]
    }
}

fn rotation_is_identity(clip: &MotionClip, j: usize) -> bool {
    (0..clip.frames()).all(|f| {
        (0..6).all(|i| (clip.joint_rot[[f, j, i]] - ROT6D_IDENTITY[i]).abs() < 1e-12)
    })
}

/// Serializes a clip as BVH text.
pub fn write_bvh(topo: &SkeletonTopology, clip: &MotionClip) -> Result<Vec<u8>> {
    if clip.frames() == 0 {
        return Err(Error::Export("clip has no frames".into()));
    }
    if clip.root_pos.iter().any(|v| !v.is_finite())
        || clip.joint_rot.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Export("clip contains non-finite values".into()));
    }
    let j = topo.num_joints();
    if clip.joint_rot.shape()[1] != j {
        return Err(Error::Shape(format!(
            "clip has {} joints, topology has {j}",
            clip.joint_rot.shape()[1]
        )));
    }

    // leaf joints written back as End Sites: identity rotations + marker name
    let as_end_site: Vec<bool> = (0..j)
        .map(|ji| {
            ji > 0 && topo.is_leaf(ji) && topo.joint_names()[ji].contains("_End")
                && rotation_is_identity(clip, ji)
        })
        .collect();

    // BVH channel columns follow the hierarchy's depth-first order, which
    // may differ from the topology's index order.
    let mut dfs_order = Vec::with_capacity(j);
    fn dfs(topo: &SkeletonTopology, ji: usize, out: &mut Vec<usize>) {
        out.push(ji);
        for c in topo.children(ji) {
            dfs(topo, c, out);
        }
    }
    dfs(topo, 0, &mut dfs_order);

    let mut text = String::new();
    text.push_str("HIERARCHY\n");
    fn write_joint(
        text: &mut String,
        topo: &SkeletonTopology,
        as_end_site: &[bool],
        ji: usize,
        depth: usize,
    ) {
        let pad = "  ".repeat(depth);
        let off = topo.rest_offsets()[ji];
        if as_end_site[ji] {
            let _ = writeln!(text, "{pad}End Site");
            let _ = writeln!(text, "{pad}{{");
            let _ = writeln!(text, "{pad}  OFFSET {:.6} {:.6} {:.6}", off[0], off[1], off[2]);
            let _ = writeln!(text, "{pad}}}");
            return;
        }
        let kind = if ji == 0 { "ROOT" } else { "JOINT" };
        let _ = writeln!(text, "{pad}{kind} {}", topo.joint_names()[ji]);
        let _ = writeln!(text, "{pad}{{");
        let _ = writeln!(text, "{pad}  OFFSET {:.6} {:.6} {:.6}", off[0], off[1], off[2]);
        if ji == 0 {
            let _ = writeln!(
                text,
                "{pad}  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation Xrotation"
            );
        } else {
            let _ = writeln!(text, "{pad}  CHANNELS 3 Zrotation Yrotation Xrotation");
        }
        for c in topo.children(ji) {
            write_joint(text, topo, as_end_site, c, depth + 1);
        }
        let _ = writeln!(text, "{pad}}}");
    }
    write_joint(&mut text, topo, &as_end_site, 0, 0);

    text.push_str("MOTION\n");
    let _ = writeln!(text, "Frames: {}", clip.frames());
    let _ = writeln!(text, "Frame Time: {:.8}", 1.0 / clip.frame_rate);
    for f in 0..clip.frames() {
        let mut cols: Vec<String> = Vec::with_capacity(3 + 3 * j);
        for a in 0..3 {
            cols.push(format!("{:.6}", clip.root_pos[[f, a]]));
        }
        for &ji in &dfs_order {
            if as_end_site[ji] {
                continue;
            }
            let v: Rotation6D = std::array::from_fn(|i| clip.joint_rot[[f, ji, i]]);
            let r = rot6d_to_matrix(&v)
                .map_err(|e| Error::Export(format!("frame {f} joint {ji}: {e}")))?;
            let zyx = matrix_to_euler_zyx_deg(&r);
            for a in zyx {
                cols.push(format!("{:.6}", a));
            }
        }
        let _ = writeln!(text, "{}", cols.join(" "));
    }
    Ok(text.into_bytes())
}
