//! Oriented bounding boxes, hand-crafted part descriptors and size-based
//! symmetry grouping.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::PartId;

pub type Point3 = [f64; 3];

/// Number of entries in [`part_features`].
pub const FEATURE_DIM: usize = 12;

/// Default relative extent tolerance for symmetry linking.
pub const DEFAULT_SYMMETRY_TOLERANCE: f64 = 0.02;

/// Maximum relative disagreement of sampled point counts for symmetry linking.
pub const SYMMETRY_COUNT_TOLERANCE: f64 = 0.2;

const EXTENT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("empty point set")]
    EmptyPointSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Point3,
    /// Unit axes, one per extent.
    pub axes: [Point3; 3],
    /// Half-lengths, sorted descending.
    pub extents: Point3,
}

impl OrientedBox {
    pub fn volume(&self) -> f64 {
        8.0 * self.extents[0] * self.extents[1] * self.extents[2]
    }
}

/// Principal-axis statistics of a point set.
#[derive(Debug, Clone)]
struct Principal {
    mean: Vector3<f64>,
    /// Eigenvalues of the covariance, descending.
    eigenvalues: [f64; 3],
    axes: [Vector3<f64>; 3],
}

fn principal(points: &[Point3]) -> Result<Principal, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyPointSet);
    }
    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += Vector3::new(p[0], p[1], p[2]);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0], p[1], p[2]) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut eigenvalues = [0.0; 3];
    let mut axes = [Vector3::zeros(); 3];
    for (k, &i) in order.iter().enumerate() {
        eigenvalues[k] = eig.eigenvalues[i].max(0.0);
        axes[k] = canonical_sign(eig.eigenvectors.column(i).normalize());
    }
    Ok(Principal { mean, eigenvalues, axes })
}

// Flip so the largest-magnitude component is positive; makes axes deterministic.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// PCA-aligned box containing every point.
pub fn compute_obb(points: &[Point3]) -> Result<OrientedBox, GeometryError> {
    let pc = principal(points)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let d = Vector3::new(p[0], p[1], p[2]) - pc.mean;
        for k in 0..3 {
            let t = d.dot(&pc.axes[k]);
            lo[k] = lo[k].min(t);
            hi[k] = hi[k].max(t);
        }
    }
    let mut center = pc.mean;
    let mut sides: Vec<(f64, Vector3<f64>)> = Vec::with_capacity(3);
    for k in 0..3 {
        center += pc.axes[k] * (0.5 * (lo[k] + hi[k]));
        sides.push((0.5 * (hi[k] - lo[k]), pc.axes[k]));
    }
    // stable: equal extents keep eigenvalue order
    sides.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(OrientedBox {
        center: [center.x, center.y, center.z],
        axes: [
            [sides[0].1.x, sides[0].1.y, sides[0].1.z],
            [sides[1].1.x, sides[1].1.y, sides[1].1.z],
            [sides[2].1.x, sides[2].1.y, sides[2].1.z],
        ],
        extents: [sides[0].0, sides[1].0, sides[2].0],
    })
}

/// 12-dimensional descriptor of one part inside its (normalized) shape:
///
/// | idx   | value                                              |
/// |-------|----------------------------------------------------|
/// | 0..3  | sorted OBB half-extents                            |
/// | 3..6  | OBB center as (\|x\|, y, \|z\|) in the shape frame  |
/// | 6     | part OBB volume / shape OBB volume                 |
/// | 7     | part point count / shape point count               |
/// | 8, 9  | covariance eigenvalue ratios λ₂/λ₁, λ₃/λ₁          |
/// | 10,11 | min / max height (y) of the part                   |
///
/// Lateral center offsets are taken in absolute value so mirror-image parts
/// across the x = 0 and z = 0 planes share a descriptor.
pub fn part_features(part_points: &[Point3], shape_box: &OrientedBox, shape_point_count: usize) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    if part_points.is_empty() {
        return f;
    }
    let obb = compute_obb(part_points).expect("non-empty");
    let pc = principal(part_points).expect("non-empty");
    f[0..3].copy_from_slice(&obb.extents);
    f[3] = obb.center[0].abs();
    f[4] = obb.center[1];
    f[5] = obb.center[2].abs();
    let shape_vol = shape_box.volume();
    let part_vol = obb.volume();
    f[6] = if shape_vol > 1e-18 {
        part_vol / shape_vol
    } else if (part_vol - shape_vol).abs() <= 1e-18 {
        1.0
    } else {
        0.0
    };
    f[7] = part_points.len() as f64 / shape_point_count.max(1) as f64;
    let l1 = pc.eigenvalues[0];
    if l1 > 0.0 {
        f[8] = pc.eigenvalues[1] / l1;
        f[9] = pc.eigenvalues[2] / l1;
    }
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in part_points {
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    f[10] = ymin;
    f[11] = ymax;
    f
}

/// One symmetry group; `representative` is the lowest member id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryGroup {
    pub representative: PartId,
    pub members: Vec<PartId>,
}

/// Partition of a shape's parts into groups expected to share a label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryGroups {
    pub groups: Vec<SymmetryGroup>,
}

impl SymmetryGroups {
    pub fn singletons(parts: impl IntoIterator<Item = PartId>) -> Self {
        Self::from_members(parts.into_iter().map(|p| vec![p]).collect())
    }

    fn from_members(mut groups: Vec<Vec<PartId>>) -> Self {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.retain(|g| !g.is_empty());
        groups.sort_by_key(|g| g[0]);
        SymmetryGroups {
            groups: groups
                .into_iter()
                .map(|members| SymmetryGroup {
                    representative: members[0],
                    members,
                })
                .collect(),
        }
    }

    pub fn group_of(&self, part: PartId) -> Option<&SymmetryGroup> {
        self.groups.iter().find(|g| g.members.contains(&part))
    }

    /// Groups intersected with `subset`; empty intersections are dropped and
    /// representatives recomputed.
    pub fn restrict(&self, subset: &[PartId]) -> SymmetryGroups {
        let groups = self
            .groups
            .iter()
            .map(|g| g.members.iter().copied().filter(|m| subset.contains(m)).collect())
            .collect();
        Self::from_members(groups)
    }

    pub fn non_trivial(&self) -> impl Iterator<Item = &SymmetryGroup> {
        self.groups.iter().filter(|g| g.members.len() > 1)
    }
}

/// Geometry needed to compare two parts for symmetry.
#[derive(Debug, Clone)]
pub struct PartSignature {
    pub id: PartId,
    pub extents: Point3,
    pub point_count: usize,
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.max(b).max(EXTENT_EPS)
}

pub fn parts_match(a: &PartSignature, b: &PartSignature, tolerance: f64) -> bool {
    let extents = (0..3).all(|k| close(a.extents[k], b.extents[k], tolerance));
    let (na, nb) = (a.point_count as f64, b.point_count as f64);
    extents && (na - nb).abs() <= SYMMETRY_COUNT_TOLERANCE * na.max(nb)
}

/// Connected components of the pairwise size-match relation.
pub fn detect_symmetry_groups(parts: &[PartSignature], tolerance: f64) -> SymmetryGroups {
    let n = parts.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if parts_match(&parts[i], &parts[j], tolerance) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<PartId>> = BTreeMap::new();
    for (i, part) in parts.iter().enumerate() {
        let r = find(&mut parent, i);
        components.entry(r).or_default().push(part.id);
    }
    SymmetryGroups::from_members(components.into_values().collect())
}
