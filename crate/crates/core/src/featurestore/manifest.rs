use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_record, FeatureSequence, ARM_POINTS_DIM, HAND_SHAPE_DIM, LIP_SHAPE_DIM};
use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u32,
    pub gloss: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub signer: u32,
    pub label: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub hand_shape: usize,
    pub arm_points: usize,
    pub lip_shape: usize,
    pub embedding: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            hand_shape: HAND_SHAPE_DIM,
            arm_points: ARM_POINTS_DIM,
            lip_shape: LIP_SHAPE_DIM,
            embedding: EMBEDDING_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<ClassEntry>,
    pub records: Vec<RecordEntry>,
    /// Embedding table file, relative to the manifest's directory.
    pub embeddings: PathBuf,
    #[serde(default)]
    pub dims: FeatureDims,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn signers(&self, split: Split) -> BTreeSet<u32> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.signer)
            .collect()
    }

    pub fn gloss(&self, class_id: u32) -> Option<&str> {
        self.classes
            .get(class_id as usize)
            .map(|c| c.gloss.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != FeatureDims::default() {
            return Err(Error::Config(format!(
                "unsupported feature dimensions {:?}",
                self.dims
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be dense 0..K-1, found {} at position {i}",
                    c.id
                )));
            }
        }
        let k = self.classes.len() as u32;
        if let Some(r) = self.records.iter().find(|r| r.label >= k) {
            return Err(Error::Config(format!(
                "record {} has label {} but only {k} classes exist",
                r.path.display(),
                r.label
            )));
        }
        let sets = [Split::Train, Split::Val, Split::Test].map(|s| self.signers(s));
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(s) = sets[a].intersection(&sets[b]).next() {
                return Err(Error::Config(format!("signer {s} appears in two splits")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reassigns every record's split from its signer's membership.
pub fn split_by_signer(
    manifest: &DatasetManifest,
    train_ids: &[u32],
    val_ids: &[u32],
    test_ids: &[u32],
) -> Result<DatasetManifest> {
    let sets: [BTreeSet<u32>; 3] =
        [train_ids, val_ids, test_ids].map(|s| s.iter().copied().collect());
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        if let Some(s) = sets[a].intersection(&sets[b]).next() {
            return Err(Error::Config(format!(
                "signer {s} listed in more than one split"
            )));
        }
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = if sets[0].contains(&r.signer) {
            Split::Train
        } else if sets[1].contains(&r.signer) {
            Split::Val
        } else if sets[2].contains(&r.signer) {
            Split::Test
        } else {
            return Err(Error::Config(format!(
                "signer {} is not assigned to any split",
                r.signer
            )));
        };
    }
    Ok(out)
}

/// Target word vectors, indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Vec<Vec<f32>>,
}

impl EmbeddingTable {
    pub fn get(&self, class_id: u32) -> &[f32] {
        &self.vectors[class_id as usize]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.vectors.len() != num_classes {
            return Err(Error::Config(format!(
                "embedding table covers {} classes, manifest has {num_classes}",
                self.vectors.len()
            )));
        }
        for (i, v) in self.vectors.iter().enumerate() {
            if v.len() != EMBEDDING_DIM {
                return Err(Error::Config(format!(
                    "embedding {i} has dimension {}, expected {EMBEDDING_DIM}",
                    v.len()
                )));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::Config(format!("embedding {i} is all zero")));
            }
        }
        Ok(())
    }
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let map: BTreeMap<String, &Vec<f32>> = table
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (i.to_string(), v))
        .collect();
    let text = serde_json::to_string(&map).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>, num_classes: usize) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, Vec<f32>> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let mut vectors = vec![Vec::new(); num_classes];
    for (key, v) in map {
        let id: usize = key.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: format!("embedding key {key:?} is not a class id"),
        })?;
        let slot = vectors.get_mut(id).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("embedding for unknown class {id}"),
        })?;
        *slot = v;
    }
    let table = EmbeddingTable { vectors };
    table.validate(num_classes)?;
    Ok(table)
}

/// A manifest with its records and embeddings loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<FeatureSequence>,
    pub splits: Vec<Split>,
    pub embeddings: EmbeddingTable,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let embeddings = load_embeddings(root.join(&manifest.embeddings), manifest.num_classes())?;
        let mut records = Vec::with_capacity(manifest.records.len());
        for entry in &manifest.records {
            let path = root.join(&entry.path);
            let mut rec = load_record(&path)?;
            if rec.label_id != Some(entry.label) || rec.signer_id != entry.signer {
                return Err(Error::Format {
                    path,
                    msg: "record header disagrees with manifest entry".into(),
                });
            }
            rec.gloss = manifest.gloss(entry.label).map(str::to_owned);
            records.push(rec);
        }
        let splits = manifest.records.iter().map(|r| r.split).collect();
        Ok(Self {
            manifest,
            records,
            splits,
            embeddings,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn split(&self, split: Split) -> Vec<&FeatureSequence> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(r, _)| r)
            .collect()
    }
}
