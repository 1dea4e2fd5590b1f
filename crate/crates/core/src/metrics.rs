//! Part label accuracy and point-weighted mIoU.
//!
//! IoU is accumulated globally per label over every evaluated point (not per
//! shape then averaged). Labels with an empty union are left out of the mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PreparedShape;
use crate::{PartId, ShapeId};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape `{shape}` part {part}: missing prediction")]
    MissingPrediction { shape: ShapeId, part: PartId },
    #[error("shape `{shape}` part {part}: missing ground truth")]
    MissingGroundTruth { shape: ShapeId, part: PartId },
    #[error("nothing to evaluate")]
    Empty,
}

/// One evaluated part: its labels and how many sampled points it carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPart<'a> {
    pub predicted: &'a str,
    pub truth: &'a str,
    pub points: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub part_accuracy: f64,
    pub miou: f64,
    pub parts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Documents the averaging convention in emitted reports.
    pub miou_convention: String,
    pub part_accuracy: f64,
    pub miou: f64,
    pub per_label_iou: BTreeMap<String, f64>,
    pub per_category: BTreeMap<String, CategoryScore>,
    pub parts: usize,
    pub shapes: usize,
}

pub const MIOU_CONVENTION: &str = "global per-label point IoU, unweighted mean over labels with non-empty union";

pub fn part_accuracy(parts: &[LabeledPart<'_>]) -> Result<f64, MetricsError> {
    if parts.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = parts.iter().filter(|p| p.predicted == p.truth).count();
    Ok(correct as f64 / parts.len() as f64)
}

/// Returns `(mIoU, per-label IoU)`.
pub fn miou(parts: &[LabeledPart<'_>]) -> Result<(f64, BTreeMap<String, f64>), MetricsError> {
    if parts.is_empty() {
        return Err(MetricsError::Empty);
    }
    // label -> (intersection, predicted, truth)
    let mut acc: BTreeMap<&str, (u64, u64, u64)> = BTreeMap::new();
    for p in parts {
        let n = p.points as u64;
        acc.entry(p.predicted).or_default().1 += n;
        acc.entry(p.truth).or_default().2 += n;
        if p.predicted == p.truth {
            acc.entry(p.truth).or_default().0 += n;
        }
    }
    let mut per_label = BTreeMap::new();
    for (label, (inter, pred, truth)) in acc {
        let union = pred + truth - inter;
        if union > 0 {
            per_label.insert(label.to_string(), inter as f64 / union as f64);
        }
    }
    if per_label.is_empty() {
        return Ok((0.0, per_label));
    }
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok((mean, per_label))
}

/// Evaluates `assignments` (shape id -> part id -> leaf label) against the
/// ground truth carried by `shapes`, weighting IoU by sampled point counts.
pub fn evaluate(
    shapes: &[&PreparedShape],
    assignments: &BTreeMap<ShapeId, BTreeMap<PartId, String>>,
) -> Result<EvalReport, MetricsError> {
    let mut rows: Vec<(&str, LabeledPart<'_>)> = Vec::new();
    for shape in shapes {
        let labels = assignments.get(&shape.id);
        for part in &shape.parts {
            let predicted = labels
                .and_then(|m| m.get(&part.id))
                .ok_or_else(|| MetricsError::MissingPrediction {
                    shape: shape.id.clone(),
                    part: part.id,
                })?;
            let truth = part.gt_label.as_deref().ok_or_else(|| MetricsError::MissingGroundTruth {
                shape: shape.id.clone(),
                part: part.id,
            })?;
            rows.push((
                shape.category.as_str(),
                LabeledPart {
                    predicted,
                    truth,
                    points: part.points.len(),
                },
            ));
        }
    }
    let all: Vec<LabeledPart<'_>> = rows.iter().map(|(_, p)| p.clone()).collect();
    let accuracy = part_accuracy(&all)?;
    let (mean, per_label) = miou(&all)?;
    let mut by_cat: BTreeMap<&str, Vec<LabeledPart<'_>>> = BTreeMap::new();
    for (cat, p) in rows {
        by_cat.entry(cat).or_default().push(p);
    }
    let per_category = by_cat
        .into_iter()
        .map(|(cat, ps)| {
            let score = CategoryScore {
                part_accuracy: part_accuracy(&ps).unwrap_or(0.0),
                miou: miou(&ps).map(|m| m.0).unwrap_or(0.0),
                parts: ps.len(),
            };
            (cat.to_string(), score)
        })
        .collect();
    Ok(EvalReport {
        miou_convention: MIOU_CONVENTION.to_string(),
        part_accuracy: accuracy,
        miou: mean,
        per_label_iou: per_label,
        per_category,
        parts: all.len(),
        shapes: shapes.len(),
    })
}
