//! Binary checkpoints and plain-text parameter manifests.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"CVTNCKPT"  u32 version
//! u32 len      config block, UTF-8 `key=value` lines
//! u32 groups   then per group: u32 len, name, u64 len, ParamGroup bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CvtnModel, Group, ModelConfig};
use crate::params::{tensor_sha256, ByteReader, ParamGroup};

pub const MAGIC: &[u8; 8] = b"CVTNCKPT";
pub const VERSION: u32 = 1;

const GROUPS: [(Group, &str); 2] = [(Group::Cve, "cve"), (Group::Cte, "cte")];

/// Flat `key=value` text, one pair per line.
pub fn format_kv<'a>(pairs: impl IntoIterator<Item = &'a (String, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn encode(model: &CvtnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = format_kv(&model.config().to_kv());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(GROUPS.len() as u32).to_le_bytes());
    for (group, name) in GROUPS {
        let bytes = model.group(group).to_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<CvtnModel> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(&parse_kv(text)?)?;
    let mut model = CvtnModel::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != GROUPS.len() {
        return Err(Error::Checkpoint(format!("expected {} groups, found {count}", GROUPS.len())));
    }
    for (group, expected) in GROUPS {
        let len = r.u32()? as usize;
        let name = r.take(len)?;
        if name != expected.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected group '{expected}', found '{}'",
                String::from_utf8_lossy(name)
            )));
        }
        let len = r.u64()? as usize;
        let (params, used) = ParamGroup::from_bytes(r.take(len)?)?;
        if used != len {
            return Err(Error::Checkpoint(format!("group '{expected}' has {} trailing bytes", len - used)));
        }
        model.group_mut(group).load_from(&params)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &CvtnModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CvtnModel> {
    decode(&fs::read(path)?)
}

/// Manifest line per parameter: `group name shape sha256`, plus one
/// `group-hash` line per group with the hash of the whole serialized group.
pub fn write_manifest<W: Write>(model: &CvtnModel, mut w: W) -> Result<()> {
    writeln!(w, "# group name shape sha256")?;
    for (group, gname) in GROUPS {
        let params = model.group(group);
        for (name, t) in params.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "{gname} {name} {} {}", shape.join("x"), tensor_sha256(t))?;
        }
        writeln!(w, "{gname} group-hash - {}", params.sha256())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub group: String,
    pub name: String,
    pub shape: String,
    pub sha256: String,
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f[..] {
                [group, name, shape, sha] => Ok(ManifestEntry {
                    group: group.into(),
                    name: name.into(),
                    shape: shape.into(),
                    sha256: sha.into(),
                }),
                _ => Err(Error::Checkpoint(format!("malformed manifest line '{l}'"))),
            }
        })
        .collect()
}
