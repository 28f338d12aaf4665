//! Checkpoint files: an 8-byte magic, a little-endian `u32` manifest length,
//! a JSON manifest, then each named parameter array as little-endian `f64`s
//! in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, ConditionalField, FieldMode, ModelTriple, PARAM_LAYOUT_VERSION};
use crate::processes::ScheduleConfig;

pub const MAGIC: &[u8; 8] = b"CHATSCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub param_layout_version: u32,
    pub architecture: Architecture,
    pub mode: FieldMode,
    pub data_dim: usize,
    pub cond_dim: usize,
    /// Condition vocabulary, indexed by condition id.
    pub conditions: Vec<String>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    /// Optimizer step count when the checkpoint was written, if any.
    #[serde(default)]
    pub step: Option<u64>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: Vec<Vec<f64>>,
}

fn vocabulary(arch: &Architecture) -> Vec<String> {
    (0..arch.num_conditions).map(|i| format!("cond-{i}")).collect()
}

impl Checkpoint {
    fn empty(arch: &Architecture, mode: FieldMode, schedule: Option<ScheduleConfig>) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                param_layout_version: PARAM_LAYOUT_VERSION,
                architecture: arch.clone(),
                mode,
                data_dim: arch.data_dim,
                cond_dim: arch.cond_dim,
                conditions: vocabulary(arch),
                schedule,
                step: None,
                arrays: Vec::new(),
            },
            arrays: Vec::new(),
        }
    }

    /// Appends a named array (e.g. optimizer moments).
    pub fn push_array(&mut self, name: &str, values: Vec<f64>) {
        self.manifest.arrays.push(ArrayEntry {
            name: name.to_string(),
            len: values.len(),
        });
        self.arrays.push(values);
    }

    pub fn single(field: &ConditionalField, schedule: Option<ScheduleConfig>) -> Self {
        let mut ck = Self::empty(&field.arch, field.mode, schedule);
        ck.push_array("params", field.params.clone());
        ck
    }

    pub fn triple(triple: &ModelTriple, schedule: Option<ScheduleConfig>) -> Self {
        let arch = &triple.reference().arch;
        let mut ck = Self::empty(arch, triple.reference().mode, schedule);
        ck.push_array("preferred", triple.preferred.params.clone());
        ck.push_array("dispreferred", triple.dispreferred.params.clone());
        ck.push_array("reference", triple.reference().params.clone());
        ck
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.manifest
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.arrays[i].as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("no array named `{name}`")))
    }

    pub fn field(&self, name: &str) -> Result<ConditionalField> {
        ConditionalField::from_params(
            self.manifest.architecture.clone(),
            self.manifest.mode,
            self.array(name)?.to_vec(),
        )
    }

    pub fn is_triple(&self) -> bool {
        self.array("reference").is_ok()
    }

    pub fn to_triple(&self) -> Result<ModelTriple> {
        ModelTriple::from_parts(
            self.field("preferred")?,
            self.field("dispreferred")?,
            self.field("reference")?,
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.arrays.iter().map(|a| a.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for a in &self.arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        if manifest.param_layout_version != PARAM_LAYOUT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported parameter layout version {}",
                manifest.param_layout_version
            )));
        }
        let mut pos = 12 + mlen;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in &manifest.arrays {
            let end = pos + entry.len * 8;
            let chunk = bytes
                .get(pos..end)
                .ok_or_else(|| Error::Checkpoint(format!("truncated array `{}`", entry.name)))?;
            arrays.push(
                chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::clone_as_triple;
    use crate::processes::ScheduleKind;

    fn field() -> ConditionalField {
        ConditionalField::new(Architecture::mlp(2, 3, 5, vec![7, 6]), FieldMode::Epsilon, 9).unwrap()
    }

    #[test]
    fn single_round_trip_is_bit_exact() {
        let mut f = field();
        f.params[0] = -0.0;
        f.params[1] = f64::MIN_POSITIVE / 3.0;
        let ck = Checkpoint::single(&f, Some(ScheduleConfig::default()));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let g = back.field("params").unwrap();
        assert!(f.params.iter().zip(&g.params).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.manifest.conditions.len(), 5);
    }

    #[test]
    fn triple_round_trip() {
        let mut t = clone_as_triple(&field()).unwrap();
        t.preferred.params[4] += 0.5;
        let sched = ScheduleConfig {
            kind: ScheduleKind::Flow,
            ..ScheduleConfig::default()
        };
        let ck = Checkpoint::triple(&t, Some(sched.clone()));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_triple().unwrap(), t);
        assert_eq!(back.manifest.schedule, Some(sched));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = Checkpoint::single(&field(), None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT0000").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
