//! Dataset registry, pretraining corpus assembly and the feature store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, atomic_write, decode_f32, encode_f32, read_json, write_json};
use crate::error::{Error, Result};
use crate::mil::FeatureBag;
use crate::preprocess::PatchMeta;

pub const REGISTRY_FILE: &str = "datasets.json";
pub const FEATURE_STORE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Breast,
    Cervix,
    Thyroid,
    Other,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Binary,
    Multiclass,
    Segmentation,
    None,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pretrain,
    Evaluate,
}

/// Scan magnification, either as objective power or as microns per pixel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum Magnification {
    Objective(f64),
    Mpp(f64),
}

impl Magnification {
    /// Resampling factor that brings this scan to the 40x reference.
    pub fn scale_to_40x(self, mpp_40x: f64) -> f64 {
        match self {
            Magnification::Objective(x) => 40.0 / x,
            Magnification::Mpp(mpp) => mpp / mpp_40x,
        }
    }

    fn is_valid(self) -> bool {
        let v = match self {
            Magnification::Objective(x) | Magnification::Mpp(x) => x,
        };
        v.is_finite() && v > 0.0
    }
}

/// How a dataset used for both pretraining and evaluation is divided at the
/// source-image level. Explicit ids take precedence over a count, which takes
/// precedence over a fraction.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct DisjointSplit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_ids: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub name: String,
    pub organ: Organ,
    pub label_kind: LabelKind,
    pub roles: BTreeSet<Role>,
    pub root_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnification: Option<Magnification>,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<DisjointSplit>,
}

impl DatasetRecord {
    pub fn is_pretrain(&self) -> bool {
        self.roles.contains(&Role::Pretrain)
    }

    pub fn is_evaluate(&self) -> bool {
        self.roles.contains(&Role::Evaluate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("dataset name is empty"));
        }
        if self.roles.is_empty() {
            return Err(Error::invalid(format!("{}: role_flags is empty", self.name)));
        }
        if !self.root_path.exists() {
            return Err(Error::MissingPath(self.root_path.clone()));
        }
        let unique: BTreeSet<_> = self.class_names.iter().collect();
        if unique.len() != self.class_names.len() {
            return Err(Error::invalid(format!("{}: duplicate class names", self.name)));
        }
        if self.label_kind == LabelKind::Binary && self.class_names.len() != 2 {
            return Err(Error::invalid(format!(
                "{}: binary label_kind needs exactly 2 class names, got {}",
                self.name,
                self.class_names.len()
            )));
        }
        if let Some(m) = self.magnification {
            if !m.is_valid() {
                return Err(Error::invalid(format!("{}: bad magnification", self.name)));
            }
        }
        if self.is_pretrain() && self.is_evaluate() && self.split.is_none() {
            return Err(Error::invalid(format!(
                "{}: dataset used for pretraining and evaluation needs a disjoint split",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Registry {
    pub datasets: Vec<DatasetRecord>,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let mut reg: Self = read_json(path)?;
        // relative roots are resolved against the registry's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut reg.datasets {
            if d.root_path.is_relative() {
                d.root_path = base.join(&d.root_path);
            }
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn get(&self, name: &str) -> Option<&DatasetRecord> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// Validates and adds a record in memory.
    pub fn register(&mut self, entry: DatasetRecord) -> Result<&DatasetRecord> {
        entry.validate()?;
        if self.get(&entry.name).is_some() {
            return Err(Error::invalid(format!("duplicate dataset name {}", entry.name)));
        }
        self.datasets.push(entry);
        Ok(self.datasets.last().expect("just pushed"))
    }

    pub fn pretrain_records(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.datasets.iter().filter(|d| d.is_pretrain())
    }
}

/// Validates `entry`, appends it to the registry file and persists the file.
pub fn register_dataset(registry_path: &Path, entry: DatasetRecord) -> Result<DatasetRecord> {
    let mut registry = Registry::load(registry_path)?;
    let rec = registry.register(entry)?.clone();
    registry.save(registry_path)?;
    Ok(rec)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Raster images directly under the record's root, sorted by file name.
pub fn list_source_images(record: &DatasetRecord) -> Result<Vec<(String, PathBuf)>> {
    let dir = &record.root_path;
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for ent in rd {
        let path = ent.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::invalid(format!("bad file name {}", path.display())))?
                .to_string();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DisjointPartition {
    pub pretrain_ids: BTreeSet<String>,
    pub held_out_ids: BTreeSet<String>,
}

fn check_dual_role(record: &DatasetRecord) -> Result<()> {
    if !(record.is_pretrain() && record.is_evaluate()) {
        return Err(Error::invalid(format!(
            "{}: disjoint split requires both pretrain and evaluate roles",
            record.name
        )));
    }
    Ok(())
}

fn partition_by_count(ids: &[String], count: usize, seed: u64) -> DisjointPartition {
    let mut sorted: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let held_out_ids = sorted[..count].iter().cloned().collect();
    let pretrain_ids = sorted[count..].iter().cloned().collect();
    DisjointPartition {
        pretrain_ids,
        held_out_ids,
    }
}

fn unique_count(ids: &[String]) -> usize {
    ids.iter().collect::<BTreeSet<_>>().len()
}

/// Splits source image ids into pretraining and held-out sets. The held-out
/// size is `round(fraction * n)` clamped to `[1, n - 1]`.
pub fn split_dataset_disjoint(
    record: &DatasetRecord,
    image_ids: &[String],
    held_out_fraction: f64,
    seed: u64,
) -> Result<DisjointPartition> {
    check_dual_role(record)?;
    if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "held_out_fraction {held_out_fraction} outside (0, 1)"
        )));
    }
    let n = unique_count(image_ids);
    if n < 2 {
        return Err(Error::invalid(format!(
            "{}: need at least 2 source images to split, got {n}",
            record.name
        )));
    }
    let count = ((held_out_fraction * n as f64).round() as usize).clamp(1, n - 1);
    Ok(partition_by_count(image_ids, count, seed))
}

/// Holds out exactly `count` source images.
pub fn split_dataset_by_count(
    record: &DatasetRecord,
    image_ids: &[String],
    count: usize,
    seed: u64,
) -> Result<DisjointPartition> {
    check_dual_role(record)?;
    let n = unique_count(image_ids);
    if n < 2 {
        return Err(Error::invalid(format!(
            "{}: need at least 2 source images to split, got {n}",
            record.name
        )));
    }
    if count == 0 || count >= n {
        return Err(Error::invalid(format!(
            "held-out count {count} must be in [1, {}]",
            n - 1
        )));
    }
    Ok(partition_by_count(image_ids, count, seed))
}

/// Held-out source images for a record according to its split definition;
/// empty for single-role records.
pub fn held_out_ids(record: &DatasetRecord, image_ids: &[String]) -> Result<BTreeSet<String>> {
    if !(record.is_pretrain() && record.is_evaluate()) {
        return Ok(BTreeSet::new());
    }
    let split = record
        .split
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{}: missing disjoint split", record.name)))?;
    if let Some(ids) = &split.held_out_ids {
        return Ok(ids.iter().cloned().collect());
    }
    if let Some(count) = split.held_out_count {
        return Ok(split_dataset_by_count(record, image_ids, count, split.seed)?.held_out_ids);
    }
    let fraction = split
        .held_out_fraction
        .ok_or_else(|| Error::invalid(format!("{}: split has no held-out size", record.name)))?;
    Ok(split_dataset_disjoint(record, image_ids, fraction, split.seed)?.held_out_ids)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusEntry {
    pub dataset: String,
    pub image_id: String,
    pub grid_row: u32,
    pub grid_col: u32,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
    pub per_dataset: BTreeMap<String, usize>,
    pub seed: u64,
}

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Corpus from a single preprocessed patch directory (no registry).
    pub fn from_patch_dir(dir: &Path, seed: u64) -> Result<Self> {
        let metas = crate::preprocess::read_patch_index(dir)?;
        let name = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("patches")
            .to_string();
        let mut entries: Vec<CorpusEntry> = metas
            .iter()
            .map(|m| CorpusEntry {
                dataset: name.clone(),
                image_id: m.source_image_id.clone(),
                grid_row: m.grid_row,
                grid_col: m.grid_col,
                path: dir.join(&m.file),
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::invalid(format!("no patches in {}", dir.display())));
        }
        entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            per_dataset: BTreeMap::from([(name, entries.len())]),
            entries,
            seed,
        })
    }
}

/// Flattens the patches of every pretrain-flagged dataset, minus held-out
/// source images, into one shuffled index.
///
/// `patches` maps dataset name to its preprocessed patch metadata; `patch_root`
/// is joined with `<dataset>/<file>` to form patch paths.
pub fn build_pretrain_corpus(
    registry: &Registry,
    patches: &BTreeMap<String, Vec<PatchMeta>>,
    patch_root: &Path,
    seed: u64,
) -> Result<CorpusIndex> {
    let mut entries = Vec::new();
    let mut per_dataset = BTreeMap::new();
    for rec in registry.pretrain_records() {
        let metas = patches.get(&rec.name).ok_or_else(|| {
            Error::invalid(format!("dataset {} has not been preprocessed", rec.name))
        })?;
        let image_ids: Vec<String> = metas
            .iter()
            .map(|m| m.source_image_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let excluded = held_out_ids(rec, &image_ids)?;
        let mut count = 0;
        for m in metas {
            if excluded.contains(&m.source_image_id) {
                continue;
            }
            entries.push(CorpusEntry {
                dataset: rec.name.clone(),
                image_id: m.source_image_id.clone(),
                grid_row: m.grid_row,
                grid_col: m.grid_col,
                path: patch_root.join(&rec.name).join(&m.file),
            });
            count += 1;
        }
        per_dataset.insert(rec.name.clone(), count);
    }
    if entries.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(CorpusIndex {
        entries,
        per_dataset,
        seed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FeatureEntry {
    pub image_id: String,
    #[serde(default)]
    pub label: Option<usize>,
    pub rows: usize,
    /// Byte offset of the bag's first row in the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FeatureStoreManifest {
    pub version: u32,
    pub encoder_id: String,
    pub dim: usize,
    pub total_rows: usize,
    pub entries: Vec<FeatureEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub manifest_path: PathBuf,
    pub blob_path: PathBuf,
    pub manifest: FeatureStoreManifest,
}

/// Writes bags as `<stem>.manifest.json` + `<stem>.f32`.
pub fn write_feature_store(bags: &[FeatureBag], stem: &Path, encoder_id: &str) -> Result<FeatureStore> {
    let dim = bags
        .first()
        .map(|b| b.features.ncols())
        .ok_or_else(|| Error::invalid("no bags to write"))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(bags.len());
    let mut total_rows = 0;
    for bag in bags {
        if bag.features.ncols() != dim {
            return Err(Error::shape(format!(
                "bag {} has dim {}, expected {dim}",
                bag.image_id,
                bag.features.ncols()
            )));
        }
        entries.push(FeatureEntry {
            image_id: bag.image_id.clone(),
            label: bag.label,
            rows: bag.features.nrows(),
            offset: blob.len() as u64,
        });
        encode_f32(bag.features.iter().copied(), &mut blob);
        total_rows += bag.features.nrows();
    }
    let manifest = FeatureStoreManifest {
        version: FEATURE_STORE_VERSION,
        encoder_id: encoder_id.to_string(),
        dim,
        total_rows,
        entries,
    };
    let blob_path = container::blob_path(stem, container::Dtype::F32);
    let manifest_path = container::manifest_path(stem);
    atomic_write(&blob_path, &blob)?;
    write_json(&manifest_path, &manifest)?;
    Ok(FeatureStore {
        manifest_path,
        blob_path,
        manifest,
    })
}

pub fn read_feature_store_manifest(stem: &Path) -> Result<FeatureStoreManifest> {
    let path = container::manifest_path(stem);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    read_json(&path)
}

pub fn read_feature_store(stem: &Path) -> Result<Vec<FeatureBag>> {
    let manifest = read_feature_store_manifest(stem)?;
    if manifest.version != FEATURE_STORE_VERSION {
        return Err(Error::Corrupt(format!(
            "unknown feature store version {}",
            manifest.version
        )));
    }
    let sum_rows: usize = manifest.entries.iter().map(|e| e.rows).sum();
    if sum_rows != manifest.total_rows {
        return Err(Error::Corrupt(format!(
            "bag sizes sum to {sum_rows}, manifest total is {}",
            manifest.total_rows
        )));
    }
    let blob_path = container::blob_path(stem, container::Dtype::F32);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = 4 * manifest.dim * manifest.total_rows;
    if blob.len() != expected {
        return Err(Error::Corrupt(format!(
            "blob holds {} bytes, manifest implies {expected} ({} rows x {} dims)",
            blob.len(),
            manifest.total_rows,
            manifest.dim
        )));
    }
    let mut bags = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let start = e.offset as usize;
        let end = start + 4 * manifest.dim * e.rows;
        if end > blob.len() {
            return Err(Error::Corrupt(format!("bag {} runs past the blob", e.image_id)));
        }
        let values = decode_f32(&blob[start..end]);
        let features = Array2::from_shape_vec((e.rows, manifest.dim), values)
            .map_err(|err| Error::Corrupt(format!("bag {}: {err}", e.image_id)))?;
        bags.push(FeatureBag {
            image_id: e.image_id.clone(),
            features,
            label: e.label,
        });
    }
    Ok(bags)
}
