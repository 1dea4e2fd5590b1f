//! Request and response bodies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use partlabel_core::audit::Verdict;
use partlabel_core::geometry::{OrientedBox, SymmetryGroups};
use partlabel_core::label_tree::LabelTree;
use partlabel_core::oracle::OracleConfig;
use partlabel_core::proposer::builtin::ProposerConfig;
use partlabel_core::proposer::NodeSpec;
use partlabel_core::session::Task;
use partlabel_core::synthetic::Family;
use partlabel_core::{PartId, SessionConfig, ShapeId};

/// A dataset manifest path under the dataset root, or a generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Path(String),
    Synthetic { synthetic: SyntheticSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    pub shapes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_symmetric_fraction")]
    pub symmetric_fraction: f64,
}

fn default_symmetric_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Live,
    Simulated,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposerSpec {
    /// Equal scores everywhere; every shape goes to modification.
    #[default]
    Uniform,
    Random {
        #[serde(default)]
        seed: u64,
    },
    /// A model saved by `partlabel pretrain`, by file name in the model store.
    Model { name: String },
    /// Pretrain on a separate labeled dataset before starting.
    Pretrain {
        dataset: DatasetRef,
        #[serde(default)]
        config: Option<ProposerConfig>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub dataset: DatasetRef,
    #[serde(default)]
    pub config: SessionConfig,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub proposer: ProposerSpec,
    /// Simulated mode only.
    #[serde(default)]
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStatus {
    pub id: String,
    pub mode: Mode,
    /// `awaiting_annotation`, `running`, `training`, `complete` or `failed`.
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub dataset: String,
    pub shapes: usize,
    pub hours: f64,
    pub audit_log: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationRequest {
    pub batch_id: String,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModificationRequest {
    pub shape: ShapeId,
    /// Explicit labels; omitted parts keep their proposal or take the label
    /// of a labeled symmetric partner.
    #[serde(default)]
    pub labels: BTreeMap<PartId, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationAccepted {
    pub batch_id: String,
    pub passed: usize,
    pub failed: usize,
    pub replayed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModificationAccepted {
    pub shape: ShapeId,
    pub node: String,
    pub parts: Vec<PartId>,
    pub labels: Vec<String>,
    pub edited: u64,
    pub checked: u64,
    pub replayed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemPayload {
    pub shape: ShapeId,
    pub parts: Vec<PartId>,
    pub labels: Vec<String>,
    pub colors: Vec<[u8; 3]>,
    pub confidence: f64,
}

/// What the annotator should do next.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskEnvelope {
    VerificationBatch {
        batch_id: String,
        node: NodeSpec,
        iteration: u32,
        items: Vec<ItemPayload>,
        palette: BTreeMap<String, [u8; 3]>,
    },
    Modification {
        node: NodeSpec,
        iteration: u32,
        shape: ShapeId,
        parts: Vec<PartId>,
        proposed: Option<Vec<String>>,
        confidence: f64,
        symmetry: SymmetryGroups,
        palette: BTreeMap<String, [u8; 3]>,
    },
    TrainingWait {
        node: String,
        iteration: u32,
        progress: f64,
    },
    Done,
}

fn color(tree: &LabelTree, label: &str) -> [u8; 3] {
    tree.color(label).unwrap_or([128, 128, 128])
}

fn palette(tree: &LabelTree, node: &NodeSpec) -> BTreeMap<String, [u8; 3]> {
    node.children.iter().map(|c| (c.clone(), color(tree, c))).collect()
}

impl TaskEnvelope {
    pub fn from_task(task: Task, tree: &LabelTree) -> Self {
        match task {
            Task::Verify(t) => TaskEnvelope::VerificationBatch {
                palette: palette(tree, &t.node),
                batch_id: t.batch_id,
                node: t.node,
                iteration: t.iteration,
                items: t
                    .items
                    .into_iter()
                    .map(|i| ItemPayload {
                        colors: i.labels.iter().map(|l| color(tree, l)).collect(),
                        shape: i.shape,
                        parts: i.parts,
                        labels: i.labels,
                        confidence: i.confidence,
                    })
                    .collect(),
            },
            Task::Modify(t) => TaskEnvelope::Modification {
                palette: palette(tree, &t.node),
                node: t.node,
                iteration: t.iteration,
                shape: t.shape,
                parts: t.parts,
                proposed: t.proposed,
                confidence: t.confidence,
                symmetry: t.symmetry,
            },
            Task::Training(t) => TaskEnvelope::TrainingWait {
                node: t.node,
                iteration: t.iteration,
                progress: t.progress,
            },
            Task::Done => TaskEnvelope::Done,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartPayload {
    pub id: PartId,
    pub points: Vec<[f64; 3]>,
    pub obb: OrientedBox,
    /// Confirmed labels, root first; empty before the first confirmation.
    pub path: Vec<String>,
    pub label: Option<String>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapePayload {
    pub id: ShapeId,
    pub session: String,
    pub category: String,
    pub parts: Vec<PartPayload>,
    pub symmetry: SymmetryGroups,
    pub palette: BTreeMap<String, [u8; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}
