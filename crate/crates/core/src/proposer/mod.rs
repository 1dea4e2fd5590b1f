//! Label proposal backends.
//!
//! A proposer sees one taxonomy node at a time. At an AND node it returns one
//! distribution per routed part; at an OR node one distribution for the whole
//! routed part group. One model is kept per internal node.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PreparedShape;
use crate::label_tree::{LabelTree, NodeKind};
use crate::{PartId, ShapeId};

pub mod baseline;
pub mod builtin;
pub mod external;
pub mod mlp;

pub use baseline::{RandomProposer, UniformProposer};
pub use builtin::{BuiltinProposer, ProposerConfig};
pub use external::ExternalProposer;

/// Tolerance on probability vector normalization.
pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProposerError {
    #[error("node `{0}` has no trained model")]
    Untrained(String),
    #[error("node `{0}`: no labeled training data")]
    NoTrainingData(String),
    #[error("shape `{shape}` has {parts} parts, more than p_max = {p_max}")]
    TooManyParts { shape: ShapeId, parts: usize, p_max: usize },
    #[error("invalid proposal for shape `{shape}`: {reason}")]
    InvalidProposal { shape: ShapeId, reason: String },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model decode: {0}")]
    Decode(String),
}

/// The label space of one internal node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    pub children: Vec<String>,
}

impl NodeSpec {
    pub fn from_tree(tree: &LabelTree, id: &str) -> Result<Self, crate::label_tree::TreeError> {
        Ok(NodeSpec {
            id: id.to_string(),
            kind: tree.kind(id)?,
            children: tree.children_labels(id)?.into_iter().map(String::from).collect(),
        })
    }

    pub fn child_index(&self, label: &str) -> Option<usize> {
        self.children.iter().position(|c| c == label)
    }
}

/// The parts of one shape routed to a node.
#[derive(Debug, Clone)]
pub struct NodeItem {
    pub shape: Arc<PreparedShape>,
    pub parts: Vec<PartId>,
}

/// A routed part subset with confirmed child-label indices: one per part at
/// AND nodes, exactly one at OR nodes.
#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub shape: Arc<PreparedShape>,
    pub parts: Vec<PartId>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainingJob {
    pub node: NodeSpec,
    pub items: Vec<LabeledItem>,
}

/// Shared epoch counter so a waiting client can report training progress.
#[derive(Debug, Default)]
pub struct TrainingProgress {
    done: AtomicUsize,
    total: AtomicUsize,
}

impl TrainingProgress {
    pub fn start(&self, total: usize) {
        self.total.store(total, Ordering::SeqCst);
        self.done.store(0, Ordering::SeqCst);
    }

    pub fn tick(&self) {
        self.done.fetch_add(1, Ordering::SeqCst);
    }

    pub fn fraction(&self) -> f64 {
        let total = self.total.load(Ordering::SeqCst);
        if total == 0 {
            0.0
        } else {
            (self.done.load(Ordering::SeqCst) as f64 / total as f64).min(1.0)
        }
    }
}

/// Per-part (AND) or per-group (OR) label distributions for one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub shape: ShapeId,
    pub node: String,
    pub parts: Vec<PartId>,
    pub probabilities: Vec<Vec<f64>>,
    /// Argmax child label per part (OR: the group label repeated).
    pub labels: Vec<String>,
    /// Minimum over parts of the argmax probability.
    pub confidence: f64,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn check_distribution(v: &[f64], classes: usize) -> Result<(), String> {
    if v.len() != classes {
        return Err(format!("expected {classes} probabilities, got {}", v.len()));
    }
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

impl Proposal {
    /// Builds a proposal from raw distributions, validating every invariant.
    pub fn from_distributions(
        node: &NodeSpec,
        shape: &str,
        parts: Vec<PartId>,
        probabilities: Vec<Vec<f64>>,
    ) -> Result<Proposal, ProposerError> {
        let invalid = |reason: String| ProposerError::InvalidProposal {
            shape: shape.to_string(),
            reason,
        };
        let expected = match node.kind {
            NodeKind::And => parts.len(),
            NodeKind::Or => 1,
        };
        if probabilities.len() != expected {
            return Err(invalid(format!(
                "expected {expected} distributions for a {} node, got {}",
                node.kind,
                probabilities.len()
            )));
        }
        for v in &probabilities {
            check_distribution(v, node.children.len()).map_err(invalid)?;
        }
        let winners: Vec<usize> = probabilities.iter().map(|v| argmax(v)).collect();
        let confidence = probabilities
            .iter()
            .zip(&winners)
            .map(|(v, &w)| v[w])
            .fold(f64::INFINITY, f64::min);
        let labels = match node.kind {
            NodeKind::And => winners.iter().map(|&w| node.children[w].clone()).collect(),
            NodeKind::Or => vec![node.children[winners[0]].clone(); parts.len()],
        };
        Ok(Proposal {
            shape: shape.to_string(),
            node: node.id.clone(),
            parts,
            probabilities,
            labels,
            confidence: if confidence.is_finite() { confidence } else { 1.0 },
        })
    }

    /// Argmax probability per part (OR: the group's, repeated).
    pub fn part_confidences(&self) -> Vec<f64> {
        let per: Vec<f64> = self.probabilities.iter().map(|v| v[argmax(v)]).collect();
        if per.len() == self.parts.len() {
            per
        } else {
            vec![per.first().copied().unwrap_or(1.0); self.parts.len()]
        }
    }
}

/// A label proposal backend: one model per internal node.
pub trait Proposer: Send {
    fn name(&self) -> &str;

    fn propose(&self, node: &NodeSpec, items: &[NodeItem]) -> Result<Vec<Proposal>, ProposerError>;

    /// Updates the node model from confirmed labels. An empty job is a no-op.
    fn finetune(&mut self, job: &TrainingJob, progress: &TrainingProgress) -> Result<(), ProposerError>;

    /// Serialized node model, for backends that keep one locally.
    fn checkpoint(&self, _node: &str) -> Option<Vec<u8>> {
        None
    }
}

impl Proposer for Box<dyn Proposer> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn propose(&self, node: &NodeSpec, items: &[NodeItem]) -> Result<Vec<Proposal>, ProposerError> {
        (**self).propose(node, items)
    }

    fn finetune(&mut self, job: &TrainingJob, progress: &TrainingProgress) -> Result<(), ProposerError> {
        (**self).finetune(job, progress)
    }

    fn checkpoint(&self, node: &str) -> Option<Vec<u8>> {
        (**self).checkpoint(node)
    }
}

/// Ground-truth training items for `node`: every shape's parts whose GT leaf
/// lies strictly below the node, labeled with the child on that path. OR
/// groups take the child of their lowest-id part.
pub fn ground_truth_items(tree: &LabelTree, node: &NodeSpec, shapes: &[Arc<PreparedShape>]) -> Vec<LabeledItem> {
    let mut items = Vec::new();
    for shape in shapes {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for part in &shape.parts {
            let Some(gt) = part.gt_label.as_deref() else { continue };
            let Ok(Some(child)) = tree.child_toward(&node.id, gt) else { continue };
            let Some(idx) = node.child_index(child) else { continue };
            parts.push(part.id);
            labels.push(idx);
        }
        if parts.is_empty() {
            continue;
        }
        if node.kind == NodeKind::Or {
            labels.truncate(1);
        }
        items.push(LabeledItem {
            shape: shape.clone(),
            parts,
            labels,
        });
    }
    items
}

/// Child labels never seen in `items`.
pub fn missing_labels(node: &NodeSpec, items: &[LabeledItem]) -> Vec<String> {
    let mut seen = vec![false; node.children.len()];
    for item in items {
        for &l in &item.labels {
            seen[l] = true;
        }
    }
    node.children
        .iter()
        .zip(seen)
        .filter(|(_, s)| !s)
        .map(|(c, _)| c.clone())
        .collect()
}

/// Proposals for every node, keyed by shape id.
pub type ProposalMap = BTreeMap<ShapeId, Proposal>;
