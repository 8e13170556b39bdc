//! Dataset manifest: one JSON record per line describing a visible/infrared
//! pair, its train/test split, and (when available) the rain-free visible
//! target used for stage-1 supervision.
//!
//! Relative paths are resolved against the manifest file's directory, so a
//! dataset folder can be moved or mounted elsewhere without rewriting it.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rainfuse_core::image::Split;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Visible-light input (the degraded image the pipeline starts from).
    pub visible: PathBuf,
    /// Infrared companion of the same scene.
    pub infrared: PathBuf,
    /// Rain-free visible target; required for stage-1 training, optional otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<PathBuf>,
    pub split: Split,
}

impl ManifestEntry {
    /// Resolves the entry's paths against the manifest's directory.
    pub fn resolved(&self, base: &Path) -> ManifestEntry {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        ManifestEntry {
            id: self.id.clone(),
            visible: join(&self.visible),
            infrared: join(&self.infrared),
            clean: self.clean.as_ref().map(join),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Loads and validates a manifest, resolving paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut ids = BTreeSet::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.with_context(|| format!("reading manifest line {}", idx + 1))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .with_context(|| format!("parsing manifest line {}", idx + 1))?;
            if entry.id.is_empty() {
                bail!("manifest line {}: empty pair id", idx + 1);
            }
            if !ids.insert(entry.id.clone()) {
                bail!("manifest line {}: duplicate pair id {:?}", idx + 1, entry.id);
            }
            entries.push(entry.resolved(&base));
        }
        Ok(Manifest { entries })
    }

    /// Writes entries as one JSON record per line.
    pub fn save(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating directory {}", dir.display()))?;
        }
        let mut out = std::fs::File::create(path)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        for entry in entries {
            let line = serde_json::to_string(entry)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data/manifest.jsonl");
        let entries = vec![
            ManifestEntry {
                id: "a".into(),
                visible: "img/a_rain.png".into(),
                infrared: "img/a_ir.png".into(),
                clean: Some("img/a_clean.png".into()),
                split: Split::Train,
            },
            ManifestEntry {
                id: "b".into(),
                visible: "img/b_rain.png".into(),
                infrared: "img/b_ir.png".into(),
                clean: None,
                split: Split::Test,
            },
        ];
        Manifest::save(&path, &entries).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.entries.len(), 2);
        assert_eq!(loaded.entries[0].visible, dir.path().join("data/img/a_rain.png"));
        assert!(loaded.entries[1].clean.is_none());
        assert_eq!(loaded.split(Split::Train).len(), 1);
        assert_eq!(loaded.split(Split::Test)[0].id, "b");
    }

    #[test]
    fn duplicate_ids_are_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let e = ManifestEntry {
            id: "same".into(),
            visible: "v.png".into(),
            infrared: "i.png".into(),
            clean: None,
            split: Split::Train,
        };
        Manifest::save(&path, &[e.clone(), e]).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"id\": \"x\"\n").unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(format!("{err:#}").contains("line 1"));
    }
}
