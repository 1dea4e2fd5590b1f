//! Dataset manifests, shape files, ingest normalization and per-part point
//! sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, OrientedBox, PartSignature, Point3, SymmetryGroups, FEATURE_DIM};
use crate::label_tree::{LabelTree, TreeError};
use crate::{PartId, ShapeId};

/// Per-shape point budget.
pub const DEFAULT_POINTS_PER_SHAPE: usize = 8192;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed JSON: {source}")]
    Json {
        file: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{file}: {path}: {message}")]
    Invalid { file: String, path: String, message: String },
    #[error("label tree: {0}")]
    Tree(#[from] TreeError),
    #[error("shape `{shape}` part {part}: empty part")]
    EmptyPart { shape: ShapeId, part: PartId },
}

fn invalid(file: &str, path: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::Invalid {
        file: file.to_string(),
        path: path.into(),
        message: message.into(),
    }
}

/// `dataset.json`. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub category: String,
    pub label_tree: PathBuf,
    pub shapes: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRecord {
    pub id: PartId,
    pub points: Vec<Point3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label: Option<String>,
}

/// Transform applied at ingest: `normalized = (raw - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: Point3,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            scale: 1.0,
            offset: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: ShapeId,
    pub parts: Vec<PartRecord>,
    #[serde(default, skip_serializing)]
    pub normalization: Normalization,
}

impl ShapeRecord {
    pub fn point_count(&self) -> usize {
        self.parts.iter().map(|p| p.points.len()).sum()
    }

    /// Centers the axis-aligned bounding box on the origin and scales its
    /// longest edge to 1. Degenerate (single-point) shapes are only centered.
    pub fn normalize(&mut self) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.parts.iter().flat_map(|p| p.points.iter()) {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if lo[0] > hi[0] {
            return;
        }
        let offset = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        let longest = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let scale = if longest > 0.0 { 1.0 / longest } else { 1.0 };
        for p in self.parts.iter_mut().flat_map(|p| p.points.iter_mut()) {
            for k in 0..3 {
                p[k] = (p[k] - offset[k]) * scale;
            }
        }
        self.normalization = Normalization { scale, offset };
    }

    pub fn validate(&self, tree: &LabelTree, file: &str) -> Result<(), DatasetError> {
        if self.id.is_empty() {
            return Err(invalid(file, "id", "empty shape id"));
        }
        if self.parts.is_empty() {
            return Err(invalid(file, "parts", "shape has no parts"));
        }
        let mut seen = BTreeSet::new();
        for (i, part) in self.parts.iter().enumerate() {
            if !seen.insert(part.id) {
                return Err(invalid(file, format!("parts[{i}].id"), format!("duplicate part id {}", part.id)));
            }
            if part.points.is_empty() {
                return Err(invalid(file, format!("parts[{i}].points"), "part has no points"));
            }
            if part.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid(file, format!("parts[{i}].points"), "non-finite coordinate"));
            }
            if let Some(label) = &part.gt_label {
                match tree.is_leaf(label) {
                    Ok(true) => {}
                    Ok(false) => {
                        return Err(invalid(
                            file,
                            format!("parts[{i}].gt_label"),
                            format!("label `{label}` not a leaf"),
                        ))
                    }
                    Err(_) => {
                        return Err(invalid(
                            file,
                            format!("parts[{i}].gt_label"),
                            format!("label `{label}` not in tree"),
                        ))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Manifest plus everything it references, normalized and sorted by id.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub tree: LabelTree,
    pub shapes: Vec<ShapeRecord>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        file: file.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json { file, source })
}

pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset, DatasetError> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let tree = LabelTree::load(&base.join(&manifest.label_tree))?;
    let mut shapes = Vec::with_capacity(manifest.shapes.len());
    let mut ids = BTreeMap::new();
    for (i, rel) in manifest.shapes.iter().enumerate() {
        let path = base.join(rel);
        let file = path.display().to_string();
        let mut shape: ShapeRecord = read_json(&path)?;
        shape.validate(&tree, &file)?;
        if let Some(prev) = ids.insert(shape.id.clone(), file.clone()) {
            return Err(invalid(
                &manifest_path.display().to_string(),
                format!("shapes[{i}]"),
                format!("duplicate shape id `{}` (also in {prev})", shape.id),
            ));
        }
        shape.normalize();
        shapes.push(shape);
    }
    shapes.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(LoadedDataset { manifest, tree, shapes })
}

/// Writes a manifest, its tree and shape files under `dir`.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    category: &str,
    tree: &LabelTree,
    shapes: &[ShapeRecord],
) -> Result<PathBuf, DatasetError> {
    let io = |path: &Path| {
        let file = path.display().to_string();
        move |source| DatasetError::Io { file, source }
    };
    let shape_dir = dir.join("shapes");
    std::fs::create_dir_all(&shape_dir).map_err(io(&shape_dir))?;
    let tree_path = dir.join("label_tree.json");
    let text = serde_json::to_string_pretty(tree).expect("tree serializes");
    std::fs::write(&tree_path, text).map_err(io(&tree_path))?;
    let mut rels = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let rel = PathBuf::from("shapes").join(format!("{}.json", shape.id));
        let path = dir.join(&rel);
        let text = serde_json::to_string(shape).expect("shape serializes");
        std::fs::write(&path, text).map_err(io(&path))?;
        rels.push(rel);
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        category: category.to_string(),
        label_tree: PathBuf::from("label_tree.json"),
        shapes: rels,
    };
    let path = dir.join("dataset.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

/// Largest-remainder split of `budget` proportional to `counts`, with every
/// part receiving at least one point. Ties go to the lower index. When the
/// budget is smaller than the number of parts the floor rule wins and the
/// total exceeds the budget.
pub fn allocate_budget(counts: &[usize], budget: usize) -> Vec<usize> {
    let n = counts.len();
    if n == 0 {
        return Vec::new();
    }
    if budget <= n {
        return vec![1; n];
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return allocate_budget(&vec![1; n], budget);
    }
    let mut alloc: Vec<usize> = Vec::with_capacity(n);
    let mut rema: Vec<(u128, usize)> = Vec::with_capacity(n);
    for (i, &c) in counts.iter().enumerate() {
        let exact = c as u128 * budget as u128;
        alloc.push((exact / total as u128) as usize);
        rema.push((exact % total as u128, i));
    }
    let left = budget - alloc.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(left) {
        alloc[i] += 1;
    }
    // enforce the floor, paying from the largest allocations
    for i in 0..n {
        while alloc[i] == 0 {
            let donor = (0..n)
                .filter(|&j| alloc[j] > 1)
                .max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(b.cmp(&a)))
                .expect("budget exceeds part count");
            alloc[donor] -= 1;
            alloc[i] += 1;
        }
    }
    alloc
}

/// FNV-1a, used to derive stable per-shape seeds.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministically draws `k` points from `points`: a seeded permutation,
/// cycled when `k` exceeds the source size.
pub fn sample_points(points: &[Point3], k: usize, seed: u64) -> Vec<Point3> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..k).map(|i| points[idx[i % idx.len()]]).collect()
}

/// Samples every part of `shape` so the shape totals `budget` points.
pub fn sample_part_points(shape: &ShapeRecord, budget: usize, seed: u64) -> Result<Vec<Vec<Point3>>, DatasetError> {
    if let Some(p) = shape.parts.iter().find(|p| p.points.is_empty()) {
        return Err(DatasetError::EmptyPart {
            shape: shape.id.clone(),
            part: p.id,
        });
    }
    let counts: Vec<usize> = shape.parts.iter().map(|p| p.points.len()).collect();
    let alloc = allocate_budget(&counts, budget);
    let shape_seed = seed ^ stable_hash(shape.id.as_bytes());
    Ok(shape
        .parts
        .iter()
        .zip(alloc)
        .map(|(part, k)| {
            let s = shape_seed.wrapping_add((part.id as u64).wrapping_mul(0x9E3779B97F4A7C15));
            sample_points(&part.points, k, s)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreparationConfig {
    pub points_per_shape: usize,
    pub symmetry_tolerance: f64,
    pub seed: u64,
}

impl Default for PreparationConfig {
    fn default() -> Self {
        PreparationConfig {
            points_per_shape: DEFAULT_POINTS_PER_SHAPE,
            symmetry_tolerance: geometry::DEFAULT_SYMMETRY_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPart {
    pub id: PartId,
    pub gt_label: Option<String>,
    /// Sampled points in the normalized shape frame.
    pub points: Vec<Point3>,
    pub obb: OrientedBox,
    pub features: [f64; FEATURE_DIM],
}

/// A normalized shape with sampled points, boxes, descriptors and symmetry
/// groups; the unit every other module consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedShape {
    pub id: ShapeId,
    pub category: String,
    pub parts: Vec<PreparedPart>,
    pub symmetry: SymmetryGroups,
}

impl PreparedShape {
    pub fn prepare(record: &ShapeRecord, category: &str, cfg: &PreparationConfig) -> Result<Self, DatasetError> {
        let sampled = sample_part_points(record, cfg.points_per_shape, cfg.seed)?;
        let all: Vec<Point3> = sampled.iter().flatten().copied().collect();
        let shape_box = geometry::compute_obb(&all).map_err(|_| DatasetError::EmptyPart {
            shape: record.id.clone(),
            part: record.parts.first().map(|p| p.id).unwrap_or_default(),
        })?;
        let mut parts: Vec<PreparedPart> = record
            .parts
            .iter()
            .zip(sampled)
            .map(|(rec, points)| {
                // boxes come from the full part so repeated parts compare
                // equal regardless of which points were sampled
                let obb = geometry::compute_obb(&rec.points).expect("part is non-empty");
                let features = geometry::part_features(&points, &shape_box, all.len());
                PreparedPart {
                    id: rec.id,
                    gt_label: rec.gt_label.clone(),
                    points,
                    obb,
                    features,
                }
            })
            .collect();
        parts.sort_by_key(|p| p.id);
        let signatures: Vec<PartSignature> = parts
            .iter()
            .map(|p| PartSignature {
                id: p.id,
                extents: p.obb.extents,
                point_count: p.points.len(),
            })
            .collect();
        let symmetry = geometry::detect_symmetry_groups(&signatures, cfg.symmetry_tolerance);
        Ok(PreparedShape {
            id: record.id.clone(),
            category: category.to_string(),
            parts,
            symmetry,
        })
    }

    pub fn part(&self, id: PartId) -> Option<&PreparedPart> {
        self.parts.binary_search_by_key(&id, |p| p.id).ok().map(|i| &self.parts[i])
    }

    pub fn part_ids(&self) -> Vec<PartId> {
        self.parts.iter().map(|p| p.id).collect()
    }

    pub fn point_count(&self) -> usize {
        self.parts.iter().map(|p| p.points.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub category: String,
    pub tree: LabelTree,
    pub shapes: Vec<Arc<PreparedShape>>,
}

impl PreparedDataset {
    pub fn from_records(
        name: &str,
        category: &str,
        tree: LabelTree,
        records: &[ShapeRecord],
        cfg: &PreparationConfig,
    ) -> Result<Self, DatasetError> {
        let mut shapes = records
            .iter()
            .map(|r| PreparedShape::prepare(r, category, cfg).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        shapes.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(PreparedDataset {
            name: name.to_string(),
            category: category.to_string(),
            tree,
            shapes,
        })
    }

    pub fn load(manifest_path: &Path, cfg: &PreparationConfig) -> Result<Self, DatasetError> {
        let loaded = load_dataset(manifest_path)?;
        Self::from_records(
            &loaded.manifest.name,
            &loaded.manifest.category,
            loaded.tree,
            &loaded.shapes,
            cfg,
        )
    }

    pub fn shape(&self, id: &str) -> Option<&Arc<PreparedShape>> {
        self.shapes
            .binary_search_by(|s| s.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.shapes[i])
    }
}
