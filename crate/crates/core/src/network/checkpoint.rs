//! Checkpoint file I/O.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TWCK" | u32 version
//!        | config: u32 field_count, then u32 k, K, J, trans_hidden, trans_layers,
//!          gate_hidden, gate_layers, expert_hidden, |c̃|, use_transnet, recurrent
//!        | tensors: u32 count, each u32 name_len, name, u32 rank, u32 dims…, f64 data
//!        | normalization: u32 n, f64 mean[n], f64 std[n] for input then target
//!        | skeleton: u32 J, each u32 name_len, name, i32 parent, f64 offset[3];
//!          u32 legs[6] (left hip, knee, foot, right hip, knee, foot)
//!        | u32 CRC32 of everything before it
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::motion::{Normalization, Stats};
use crate::skeleton::{Leg, Skeleton};

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TWCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_FIELDS: u32 = 11;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("size fits in u32"));
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::Truncated {
            offset: self.bytes.len() as u64,
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("name is not valid UTF-8".into()))
    }

    fn stats(&mut self) -> Result<Stats> {
        let n = self.usize()?;
        Ok(Stats {
            mean: self.f64s(n)?,
            std: self.f64s(n)?,
        })
    }
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let c = &model.config;
    w.u32(CONFIG_FIELDS);
    for v in [
        c.k,
        c.experts,
        c.joints,
        c.trans_hidden,
        c.trans_layers,
        c.gate_hidden,
        c.gate_layers,
        c.expert_hidden,
        c.reduced_dim(),
        c.use_transnet as usize,
        c.recurrent as usize,
    ] {
        w.usize(v);
    }
    let p = &model.params;
    w.usize(p.len());
    for id in 0..p.len() {
        w.str(p.name(id));
        w.usize(p.shape(id).len());
        for d in p.shape(id) {
            w.usize(*d);
        }
        w.f64s(&p.data[id]);
    }
    for s in [&model.normalization.input, &model.normalization.target] {
        w.usize(s.dim());
        w.f64s(&s.mean);
        w.f64s(&s.std);
    }
    let sk = &model.skeleton;
    w.usize(sk.joint_count());
    for j in 0..sk.joint_count() {
        w.str(&sk.names()[j]);
        let parent = sk.parent(j).map(|p| p as i32).unwrap_or(-1);
        w.0.extend_from_slice(&parent.to_le_bytes());
        w.f64s(sk.offset(j).as_slice());
    }
    for leg in sk.legs() {
        for j in [leg.hip, leg.knee, leg.foot] {
            w.usize(j);
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Parses checkpoint bytes. With `expected`, any configuration difference is
/// reported as a shape error instead of silently loading another model.
pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model> {
    if bytes.len() >= 4 && &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };

    let fields = r.u32()?;
    if fields != CONFIG_FIELDS {
        return Err(Error::Format(format!("config block has {fields} fields, expected {CONFIG_FIELDS}")));
    }
    let mut f = [0usize; CONFIG_FIELDS as usize];
    for v in f.iter_mut() {
        *v = r.usize()?;
    }
    let config = ModelConfig {
        k: f[0],
        experts: f[1],
        joints: f[2],
        trans_hidden: f[3],
        trans_layers: f[4],
        gate_hidden: f[5],
        gate_layers: f[6],
        expert_hidden: f[7],
        use_transnet: f[9] != 0,
        recurrent: f[10] != 0,
    };
    if f[8] != config.reduced_dim() {
        return Err(Error::Shape(format!(
            "stored output size {} inconsistent with J = {}",
            f[8], config.joints
        )));
    }
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::Shape(format!(
                "checkpoint configuration {config:?} does not match requested {want:?}"
            )));
        }
    }

    let count = r.usize()?;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.usize()?;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        tensors.push((name, dims, r.f64s(n)?));
    }
    let normalization = Normalization {
        input: r.stats()?,
        target: r.stats()?,
    };

    let joints = r.usize()?;
    let mut names = Vec::with_capacity(joints.min(4096));
    let mut parents = Vec::with_capacity(joints.min(4096));
    let mut offsets = Vec::with_capacity(joints.min(4096));
    for _ in 0..joints {
        names.push(r.str()?);
        let p = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
        parents.push(usize::try_from(p).ok());
        let o = r.f64s(3)?;
        offsets.push(Vec3::new(o[0], o[1], o[2]));
    }
    let mut legs = [0usize; 6];
    for v in legs.iter_mut() {
        *v = r.usize()?;
    }
    let leg = |i: usize| Leg {
        hip: legs[i],
        knee: legs[i + 1],
        foot: legs[i + 2],
    };
    let skeleton = Skeleton::new(names, parents, offsets, [leg(0), leg(3)])?;
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    Model::from_parts(config, skeleton, normalization, tensors)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{build_samples, compute_normalization};
    use crate::synth::{self, WalkParams};

    fn model(experts: usize) -> Model {
        let clip = synth::walk_cycle(&WalkParams::default());
        let config = ModelConfig {
            experts,
            ..ModelConfig::tiny(clip.skeleton().joint_count())
        };
        let norm = compute_normalization(&build_samples(&clip, config.k)).unwrap();
        Model::new(config, clip.skeleton().clone(), norm, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.twck");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path, Some(&m.config)).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.normalization, m.normalization);
        assert_eq!(back.skeleton, m.skeleton);
        let x = vec![0.3; m.layout().input_dim()];
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        assert_eq!(checkpoint_bytes(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn corrupted_crc_is_detected() {
        let mut bytes = checkpoint_bytes(&model(2));
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&bytes, None), Err(Error::Checksum { .. })));
    }

    #[test]
    fn expert_count_mismatch_is_shape_error() {
        let m = model(8);
        let bytes = checkpoint_bytes(&m);
        let want = ModelConfig { experts: 4, ..m.config };
        assert!(matches!(checkpoint_from_bytes(&bytes, Some(&want)), Err(Error::Shape(_))));
        assert!(checkpoint_from_bytes(&bytes, None).is_ok());
    }

    #[test]
    fn header_errors() {
        let bytes = checkpoint_bytes(&model(2));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(checkpoint_from_bytes(&v, None), Err(Error::Version { found: 2, .. })));
        let mut v = bytes.clone();
        v[0] = b'Q';
        assert!(matches!(checkpoint_from_bytes(&v, None), Err(Error::Format(_))));
        assert!(matches!(checkpoint_from_bytes(&bytes[..7], None), Err(Error::Truncated { .. })));
    }
}
