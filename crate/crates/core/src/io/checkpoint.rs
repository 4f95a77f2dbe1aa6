//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IATT" | version u16 | kind u8 | meta_len u32 | meta (JSON) |
//! n_arrays u32 | { name_len u16 | name | rows u64 | cols u64 | f64 x rows*cols }* |
//! sha256 of everything before it (32 bytes)
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{BundleMeta, CriticKind, IWNet, PolicyBundle, ValueNorm, Variant};
use crate::engine::Role;
use crate::error::{Error, Result};
use crate::gradfield::{FieldKind, NoiseSchedule, ScoreNet};
use crate::tensor::{Matrix, ParamStore};

pub const MAGIC: &[u8; 4] = b"IATT";
pub const FORMAT_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 4 + 2 + 1;

/// What a checkpoint file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Policy,
    InverseNet,
    ScoreNet,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Policy => 1,
            CheckpointKind::InverseNet => 2,
            CheckpointKind::ScoreNet => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(CheckpointKind::Policy),
            2 => Ok(CheckpointKind::InverseNet),
            3 => Ok(CheckpointKind::ScoreNet),
            t => Err(Error::checkpoint("variant_tag", format!("unknown tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Policy => "policy",
            CheckpointKind::InverseNet => "inverse_net",
            CheckpointKind::ScoreNet => "score_net",
        }
    }
}

/// A type that can be written to and rebuilt from a checkpoint.
pub trait Checkpointable: Sized {
    const KIND: CheckpointKind;
    type Meta: Serialize + DeserializeOwned;

    fn metadata(&self) -> Self::Meta;
    fn arrays(&self) -> Vec<(String, &Matrix)>;
    fn rebuild(meta: Self::Meta, arrays: Vec<(String, Matrix)>) -> Result<Self>;
}

/// Any checkpoint, as loaded without knowing its kind up front.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Policy(Box<PolicyBundle>),
    InverseNet(IWNet),
    ScoreNet(ScoreNet),
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Checkpoint::Policy(_) => CheckpointKind::Policy,
            Checkpoint::InverseNet(_) => CheckpointKind::InverseNet,
            Checkpoint::ScoreNet(_) => CheckpointKind::ScoreNet,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMeta {
    pub variant: Variant,
    pub critic: CriticKind,
    pub bundle: BundleMeta,
    pub value_norm: ValueNorm,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseMeta {
    pub role: Role,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMeta {
    pub kind: FieldKind,
    pub schedule: NoiseSchedule,
}

fn prefixed<'a>(prefix: &str, store: &'a ParamStore) -> impl Iterator<Item = (String, &'a Matrix)> {
    let prefix = prefix.to_string();
    store
        .named_values()
        .map(move |(n, v)| (format!("{prefix}/{n}"), v))
}

fn store_of(arrays: Vec<(String, Matrix)>) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, value) in arrays {
        store.add(name, value);
    }
    store
}

/// Fails on any array the rebuilt object does not own.
fn check_consumed(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    for (name, _) in got.named_values() {
        if expected.find(name).is_none() {
            return Err(Error::checkpoint(name, "unexpected array"));
        }
    }
    Ok(())
}

impl Checkpointable for PolicyBundle {
    const KIND: CheckpointKind = CheckpointKind::Policy;
    type Meta = PolicyMeta;

    fn metadata(&self) -> PolicyMeta {
        PolicyMeta {
            variant: self.variant,
            critic: self.critic_kind,
            bundle: self.meta.clone(),
            value_norm: self.value_norm,
        }
    }

    fn arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<_> = prefixed("actor", &self.actor)
            .chain(prefixed("critic", &self.critic_store))
            .collect();
        if let Some(iw) = &self.iw {
            out.extend(prefixed("iw", &iw.store));
        }
        out
    }

    fn rebuild(meta: PolicyMeta, arrays: Vec<(String, Matrix)>) -> Result<Self> {
        let mut parts: [Vec<(String, Matrix)>; 3] = Default::default();
        for (name, value) in arrays {
            let (group, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::checkpoint(&name, "array name lacks a group prefix"))?;
            let slot = match group {
                "actor" => 0,
                "critic" => 1,
                "iw" => 2,
                _ => return Err(Error::checkpoint(&name, "unknown array group")),
            };
            parts[slot].push((rest.to_string(), value));
        }
        let [actor, critic, iw] = parts.map(store_of);
        let mut bundle = PolicyBundle::new(meta.variant, meta.critic, meta.bundle, 0)?;
        bundle.load_values(&actor, &critic)?;
        check_consumed(&bundle.actor, &actor)?;
        check_consumed(&bundle.critic_store, &critic)?;
        match &mut bundle.iw {
            Some(net) => {
                net.store.load_values_from(&iw).map_err(|n| {
                    Error::checkpoint(format!("iw/{n}"), "missing or misshapen array")
                })?;
                check_consumed(&net.store, &iw)?;
            }
            None if !iw.is_empty() => {
                return Err(Error::checkpoint(
                    "iw",
                    format!("{} bundle carries no inverse network", meta.variant.name()),
                ))
            }
            None => {}
        }
        bundle.value_norm = meta.value_norm;
        Ok(bundle)
    }
}

impl Checkpointable for IWNet {
    const KIND: CheckpointKind = CheckpointKind::InverseNet;
    type Meta = InverseMeta;

    fn metadata(&self) -> InverseMeta {
        InverseMeta { role: self.role }
    }

    fn arrays(&self) -> Vec<(String, &Matrix)> {
        self.store
            .named_values()
            .map(|(n, v)| (n.to_string(), v))
            .collect()
    }

    fn rebuild(meta: InverseMeta, arrays: Vec<(String, Matrix)>) -> Result<Self> {
        let store = store_of(arrays);
        let net = IWNet::with_values(meta.role, &store)?;
        check_consumed(&net.store, &store)?;
        Ok(net)
    }
}

impl Checkpointable for ScoreNet {
    const KIND: CheckpointKind = CheckpointKind::ScoreNet;
    type Meta = ScoreMeta;

    fn metadata(&self) -> ScoreMeta {
        ScoreMeta {
            kind: self.kind,
            schedule: self.schedule,
        }
    }

    fn arrays(&self) -> Vec<(String, &Matrix)> {
        self.store
            .named_values()
            .map(|(n, v)| (n.to_string(), v))
            .collect()
    }

    fn rebuild(meta: ScoreMeta, arrays: Vec<(String, Matrix)>) -> Result<Self> {
        meta.schedule.validate()?;
        ScoreNet::from_store(meta.kind, meta.schedule, store_of(arrays))
    }
}

pub fn to_bytes<T: Checkpointable>(x: &T) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&x.metadata())?;
    let arrays = x.arrays();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::KIND.tag());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, value) in arrays {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::checkpoint(&name, "array name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
        for v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::checkpoint(field, "unexpected end of data"))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

struct Parsed {
    kind: CheckpointKind,
    meta: serde_json::Value,
    arrays: Vec<(String, Matrix)>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::checkpoint("magic", "not an IATT checkpoint"));
    }
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(Error::checkpoint("checksum", "file truncated"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::checkpoint(
            "checksum",
            "content does not match its SHA-256 digest",
        ));
    }
    let mut r = Reader { buf: body, at: 6 };
    let kind = CheckpointKind::from_tag(r.take(1, "variant_tag")?[0])?;
    let meta_len = r.u32("metadata")? as usize;
    let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::checkpoint("metadata", e.to_string()))?;
    let n = r.u32("arrays")? as usize;
    let mut arrays = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let len = r.u16("arrays")? as usize;
        let name = std::str::from_utf8(r.take(len, "arrays")?)
            .map_err(|_| Error::checkpoint(format!("arrays[{i}]"), "name is not UTF-8"))?
            .to_string();
        let rows = r.u64(&name)? as usize;
        let cols = r.u64(&name)? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::checkpoint(&name, "shape overflows"))?;
        let payload = r.take(count * 8, &name)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::checkpoint(&name, e.to_string()))?;
        arrays.push((name, m));
    }
    if r.at != body.len() {
        return Err(Error::checkpoint(
            "arrays",
            "trailing bytes after last array",
        ));
    }
    Ok(Parsed { kind, meta, arrays })
}

fn rebuild<T: Checkpointable>(p: Parsed) -> Result<T> {
    if p.kind != T::KIND {
        return Err(Error::checkpoint(
            "variant_tag",
            format!("holds a {}, expected a {}", p.kind.name(), T::KIND.name()),
        ));
    }
    let meta =
        serde_json::from_value(p.meta).map_err(|e| Error::checkpoint("metadata", e.to_string()))?;
    T::rebuild(meta, p.arrays)
}

pub fn from_bytes<T: Checkpointable>(bytes: &[u8]) -> Result<T> {
    rebuild(parse(bytes)?)
}

pub fn any_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let p = parse(bytes)?;
    Ok(match p.kind {
        CheckpointKind::Policy => Checkpoint::Policy(Box::new(rebuild(p)?)),
        CheckpointKind::InverseNet => Checkpoint::InverseNet(rebuild(p)?),
        CheckpointKind::ScoreNet => Checkpoint::ScoreNet(rebuild(p)?),
    })
}

/// Writes through a sibling temp file so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint<T: Checkpointable>(x: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(x)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Checkpointable>(path: impl AsRef<Path>) -> Result<T> {
    from_bytes(&std::fs::read(path)?)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<Checkpoint> {
    any_from_bytes(&std::fs::read(path)?)
}
