//! Self-describing checkpoint archives.
//!
//! One file carries everything needed to resume or run a stage: the resolved
//! run configuration, the progress counter, and one or more parameter groups
//! (each optionally with its optimizer's moment estimates). Layout:
//!
//! ```text
//! magic "RFCK" | u32 version | u64 header_len | header JSON
//! then per group, in header order:
//!     every parameter tensor as little-endian f32
//!     if the group has optimizer state: all first moments, then all second
//! ```
//!
//! Saving is atomic (temp file + rename) and deterministic: saving, loading,
//! and saving again produces byte-identical files.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rainfuse_core::nn::{Adam, ParamSet};
use rainfuse_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamHeader {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupHeader {
    pub name: String,
    pub params: Vec<ParamHeader>,
    /// Optimizer step counter; present exactly when moment blobs follow.
    pub adam_t: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Which stage this archive belongs to ("clean" or "fusion").
    pub kind: String,
    /// Completed progress units: stage-1 steps or stage-2 epochs.
    pub step: u64,
    /// The resolved configuration the run used.
    pub config: AppConfig,
    pub groups: Vec<GroupHeader>,
}

#[derive(Debug, Clone)]
pub struct GroupState {
    pub params: Vec<Tensor<f32>>,
    /// First moments, second moments, and the step counter.
    pub adam: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>, u64)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub groups: Vec<GroupState>,
}

/// A parameter group to serialize: display name, parameters, and optionally
/// the optimizer whose moments should travel with them.
pub struct GroupRef<'a> {
    pub name: &'a str,
    pub params: &'a ParamSet<f32>,
    pub adam: Option<&'a Adam<f32>>,
}

fn write_tensor(out: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    for v in t.data() {
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_tensor(inp: &mut impl Read, dims: &[usize]) -> Result<Tensor<f32>> {
    let len: usize = dims.iter().product();
    let mut data = vec![0.0f32; len];
    inp.read_f32_into::<LittleEndian>(&mut data)?;
    Ok(Tensor::from_vec(dims.to_vec(), data))
}

pub fn save(
    path: &Path,
    kind: &str,
    step: u64,
    config: &AppConfig,
    groups: &[GroupRef<'_>],
) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        step,
        config: config.clone(),
        groups: groups
            .iter()
            .map(|g| GroupHeader {
                name: g.name.to_string(),
                params: g
                    .params
                    .iter()
                    .map(|(_, name, t)| ParamHeader {
                        name: name.to_string(),
                        dims: t.dims().to_vec(),
                    })
                    .collect(),
                adam_t: g.adam.map(|a| a.step_count()),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)
            .with_context(|| format!("writing checkpoint {}", tmp.display()))?;
        let mut out = BufWriter::new(file);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u64::<LittleEndian>(header_json.len() as u64)?;
        out.write_all(&header_json)?;
        for g in groups {
            for (_, _, t) in g.params.iter() {
                write_tensor(&mut out, t)?;
            }
            if let Some(adam) = g.adam {
                let (m, v, _) = adam.state();
                for t in m {
                    write_tensor(&mut out, t)?;
                }
                for t in v {
                    write_tensor(&mut out, t)?;
                }
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)
        .with_context(|| format!("moving checkpoint into place at {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut inp = BufReader::new(file);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic).context("reading checkpoint magic")?;
    if &magic != MAGIC {
        bail!("{} is not a checkpoint archive (bad magic)", path.display());
    }
    let version = inp.read_u32::<LittleEndian>()?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version} (this build reads {VERSION})");
    }
    let header_len = inp.read_u64::<LittleEndian>()? as usize;
    let mut header_json = vec![0u8; header_len];
    inp.read_exact(&mut header_json).context("reading checkpoint header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).context("parsing checkpoint header")?;

    let mut groups = Vec::with_capacity(header.groups.len());
    for g in &header.groups {
        let mut params = Vec::with_capacity(g.params.len());
        for p in &g.params {
            params.push(read_tensor(&mut inp, &p.dims).with_context(|| {
                format!("reading parameter {:?} of group {:?}", p.name, g.name)
            })?);
        }
        let adam = match g.adam_t {
            Some(t) => {
                let mut m = Vec::with_capacity(g.params.len());
                let mut v = Vec::with_capacity(g.params.len());
                for p in &g.params {
                    m.push(read_tensor(&mut inp, &p.dims)?);
                }
                for p in &g.params {
                    v.push(read_tensor(&mut inp, &p.dims)?);
                }
                Some((m, v, t))
            }
            None => None,
        };
        groups.push(GroupState { params, adam });
    }
    let mut trailing = [0u8; 1];
    if inp.read(&mut trailing)? != 0 {
        bail!("checkpoint {} has trailing bytes after the declared blobs", path.display());
    }
    Ok(Checkpoint { header, groups })
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<(&GroupHeader, &GroupState)> {
        for (h, s) in self.header.groups.iter().zip(&self.groups) {
            if h.name == name {
                return Ok((h, s));
            }
        }
        bail!(
            "checkpoint has no parameter group {:?} (found: {})",
            name,
            self.header
                .groups
                .iter()
                .map(|g| g.name.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }

    /// Copies a group's parameters into a freshly built set, matching by
    /// name. Every stored parameter must exist with identical dimensions,
    /// and every parameter of the set must be covered.
    pub fn apply_group(&self, name: &str, ps: &mut ParamSet<f32>) -> Result<()> {
        let (h, s) = self.group(name)?;
        if h.params.len() != ps.len() {
            bail!(
                "group {:?} stores {} parameters but the model defines {}",
                name,
                h.params.len(),
                ps.len()
            );
        }
        for (p, t) in h.params.iter().zip(&s.params) {
            let id = ps
                .find(&p.name)
                .ok_or_else(|| anyhow::anyhow!("model has no parameter named {:?}", p.name))?;
            if ps.get(id).dims() != p.dims.as_slice() {
                bail!(
                    "parameter {:?} has dims {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    p.dims,
                    ps.get(id).dims()
                );
            }
            *ps.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Restores a group's optimizer moments into an Adam built over the same
    /// parameter set.
    pub fn restore_adam(&self, name: &str, adam: &mut Adam<f32>) -> Result<()> {
        let (_, s) = self.group(name)?;
        let Some((m, v, t)) = &s.adam else {
            bail!("group {:?} was saved without optimizer state", name);
        };
        adam.restore(m.clone(), v.clone(), *t);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AppConfig, Profile};
    use rainfuse_core::nn::AdamConfig;
    use rainfuse_core::rng;

    fn tiny_set(seed: u64) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut r = rng::seeded(seed);
        let mut w = Tensor::<f32>::zeros(vec![2, 3]);
        for v in w.data_mut() {
            *v = rng::gen_range_f32(&mut r, -1.0, 1.0);
        }
        ps.add("layer.weight", w);
        let mut b = Tensor::<f32>::zeros(vec![3]);
        for v in b.data_mut() {
            *v = rng::gen_range_f32(&mut r, -1.0, 1.0);
        }
        ps.add("layer.bias", b);
        ps
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AppConfig::profile_defaults(Profile::Desk);
        let ps = tiny_set(3);
        let adam = Adam::new(AdamConfig::adamw(1e-4, 0.0), &ps);

        let p1 = dir.path().join("a.rfck");
        save(&p1, "clean", 42, &cfg, &[GroupRef { name: "model", params: &ps, adam: Some(&adam) }])
            .unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.header.step, 42);
        assert_eq!(loaded.header.kind, "clean");

        let mut ps2 = ParamSet::new();
        ps2.add("layer.weight", Tensor::<f32>::zeros(vec![2, 3]));
        ps2.add("layer.bias", Tensor::<f32>::zeros(vec![3]));
        loaded.apply_group("model", &mut ps2).unwrap();
        let mut adam2 = Adam::new(AdamConfig::adamw(1e-4, 0.0), &ps2);
        loaded.restore_adam("model", &mut adam2).unwrap();

        let p2 = dir.path().join("b.rfck");
        save(
            &p2,
            &loaded.header.kind,
            loaded.header.step,
            &loaded.header.config,
            &[GroupRef { name: "model", params: &ps2, adam: Some(&adam2) }],
        )
        .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn dims_mismatch_and_missing_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AppConfig::profile_defaults(Profile::Desk);
        let ps = tiny_set(4);
        let path = dir.path().join("c.rfck");
        save(&path, "clean", 0, &cfg, &[GroupRef { name: "model", params: &ps, adam: None }])
            .unwrap();
        let loaded = load(&path).unwrap();

        let mut wrong_dims = ParamSet::new();
        wrong_dims.add("layer.weight", Tensor::<f32>::zeros(vec![3, 2]));
        wrong_dims.add("layer.bias", Tensor::<f32>::zeros(vec![3]));
        assert!(loaded.apply_group("model", &mut wrong_dims).is_err());

        let mut wrong_name = ParamSet::new();
        wrong_name.add("other.weight", Tensor::<f32>::zeros(vec![2, 3]));
        wrong_name.add("layer.bias", Tensor::<f32>::zeros(vec![3]));
        assert!(loaded.apply_group("model", &mut wrong_name).is_err());

        assert!(loaded.group("nope").is_err());
        assert!(loaded.restore_adam("model", &mut Adam::new(AdamConfig::default(), &ps)).is_err());
    }

    #[test]
    fn multi_group_archives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AppConfig::profile_defaults(Profile::Desk);
        let a = tiny_set(5);
        let b = tiny_set(6);
        let adam_b = Adam::new(AdamConfig::adam(3e-4, 3e-4), &b);
        let path = dir.path().join("two.rfck");
        save(
            &path,
            "fusion",
            7,
            &cfg,
            &[
                GroupRef { name: "fusion", params: &a, adam: None },
                GroupRef { name: "refine", params: &b, adam: Some(&adam_b) },
            ],
        )
        .unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.header.groups.len(), 2);
        let (_, ga) = loaded.group("fusion").unwrap();
        assert!(ga.adam.is_none());
        assert_eq!(ga.params[0].data(), a.iter().next().unwrap().2.data());
        let (_, gb) = loaded.group("refine").unwrap();
        assert!(gb.adam.is_some());
    }

    #[test]
    fn truncated_and_corrupt_files_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rfck");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load(&path).is_err());

        let cfg = AppConfig::profile_defaults(Profile::Desk);
        let ps = tiny_set(8);
        let good = dir.path().join("good.rfck");
        save(&good, "clean", 1, &cfg, &[GroupRef { name: "model", params: &ps, adam: None }])
            .unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load(&path).is_err());
        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, &padded).unwrap();
        assert!(load(&path).is_err());
    }
}
