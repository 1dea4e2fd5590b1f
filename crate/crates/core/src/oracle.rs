//! Simulated annotator answering from ground truth, optionally with noise.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::Verdict;
use crate::dataset::PreparedShape;
use crate::geometry::SymmetryGroups;
use crate::label_tree::{LabelTree, NodeKind};
use crate::proposer::NodeSpec;
use crate::session::{Annotator, ModifyTask, Session, VerifyTask};
use crate::{PartId, ShapeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Probability of a wrong verdict or a wrong modification label.
    pub error_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            error_rate: 0.0,
            seed: 0,
        }
    }
}

pub struct Oracle {
    tree: LabelTree,
    shapes: BTreeMap<ShapeId, Arc<PreparedShape>>,
    error_rate: f64,
    rng: ChaCha8Rng,
}

impl Oracle {
    /// `tree` must be the tree the session runs on, so that ground-truth
    /// leaves map to the right child at every node.
    pub fn new(tree: LabelTree, shapes: &[Arc<PreparedShape>], config: OracleConfig) -> Result<Self, String> {
        if !(0.0..1.0).contains(&config.error_rate) {
            return Err(format!("error rate {} outside [0, 1)", config.error_rate));
        }
        Ok(Oracle {
            tree,
            shapes: shapes.iter().map(|s| (s.id.clone(), s.clone())).collect(),
            error_rate: config.error_rate,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn for_session(session: &Session, config: OracleConfig) -> Result<Self, String> {
        let state = session.state();
        let tree = state.tree.clone().ok_or("session not started")?;
        let shapes: Vec<Arc<PreparedShape>> = state
            .shapes
            .keys()
            .filter_map(|s| session.shape(s).cloned())
            .collect();
        Oracle::new(tree, &shapes, config)
    }

    /// The child of `node` on the path to the part's ground-truth leaf, or
    /// None when the part was routed here by mistake.
    pub fn truth_at(&self, node: &NodeSpec, shape: &str, part: PartId) -> Option<String> {
        let leaf = self.shapes.get(shape)?.part(part)?.gt_label.as_deref()?;
        self.tree.child_toward(&node.id, leaf).ok().flatten().map(String::from)
    }

    fn flip(&mut self) -> bool {
        self.rng.gen::<f64>() < self.error_rate
    }

    /// A uniformly chosen child other than `label`.
    fn wrong_label(&mut self, node: &NodeSpec, label: &str) -> String {
        let others: Vec<&String> = node.children.iter().filter(|c| *c != label).collect();
        if others.is_empty() {
            return label.to_string();
        }
        others[self.rng.gen_range(0..others.len())].clone()
    }

    /// True when every part's proposal matches the ground truth. Parts
    /// without a ground-truth child at this node cannot be judged wrong.
    pub fn is_correct(&self, node: &NodeSpec, shape: &str, parts: &[PartId], labels: &[String]) -> bool {
        parts
            .iter()
            .zip(labels)
            .all(|(&p, l)| self.truth_at(node, shape, p).is_none_or(|t| &t == l))
    }

    /// Target label per part as this (possibly noisy) annotator sees it.
    fn targets(&mut self, task: &ModifyTask) -> Vec<String> {
        let fallback = |i: usize| -> String {
            task.proposed
                .as_ref()
                .map(|p| p[i].clone())
                .unwrap_or_else(|| task.node.children[0].clone())
        };
        let truths: Vec<String> = task
            .parts
            .iter()
            .enumerate()
            .map(|(i, &p)| self.truth_at(&task.node, &task.shape, p).unwrap_or_else(|| fallback(i)))
            .collect();
        match task.node.kind {
            NodeKind::Or => {
                let mut label = truths.first().cloned().unwrap_or_else(|| fallback(0));
                if self.flip() {
                    label = self.wrong_label(&task.node, &label);
                }
                vec![label; task.parts.len()]
            }
            NodeKind::And => truths
                .into_iter()
                .map(|t| if self.flip() { self.wrong_label(&task.node, &t) } else { t })
                .collect(),
        }
    }
}

/// The smallest submission that turns `proposed` into `targets` when
/// omitted parts follow their symmetry group (if `groups` has any).
pub fn minimal_submission(
    kind: NodeKind,
    parts: &[PartId],
    proposed: Option<&[String]>,
    targets: &[String],
    groups: &SymmetryGroups,
) -> BTreeMap<PartId, String> {
    let mut out = BTreeMap::new();
    let wrong = |i: usize| proposed.is_none_or(|p| p[i] != targets[i]);
    if kind == NodeKind::Or {
        if !parts.is_empty() && wrong(0) {
            out.insert(parts[0], targets[0].clone());
        }
        return out;
    }
    let index: BTreeMap<PartId, usize> = parts.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let mut grouped = vec![false; parts.len()];
    for group in &groups.groups {
        let members: Vec<usize> = group.members.iter().filter_map(|m| index.get(m).copied()).collect();
        if members.len() < 2 {
            continue;
        }
        for &i in &members {
            grouped[i] = true;
        }
        let homogeneous = members.iter().all(|&i| targets[i] == targets[members[0]]);
        if homogeneous {
            if let Some(&i) = members.iter().find(|&&i| wrong(i)) {
                out.insert(parts[i], targets[i].clone());
            }
        } else {
            for &i in &members {
                out.insert(parts[i], targets[i].clone());
            }
        }
    }
    for i in 0..parts.len() {
        if !grouped[i] && wrong(i) {
            out.insert(parts[i], targets[i].clone());
        }
    }
    out
}

impl Annotator for Oracle {
    fn verify(&mut self, task: &VerifyTask) -> Result<Vec<Verdict>, String> {
        Ok(task
            .items
            .iter()
            .map(|item| {
                let correct = self.is_correct(&task.node, &item.shape, &item.parts, &item.labels);
                let pass = correct != self.flip();
                Verdict {
                    shape: item.shape.clone(),
                    pass,
                }
            })
            .collect())
    }

    fn modify(&mut self, task: &ModifyTask) -> Result<BTreeMap<PartId, String>, String> {
        let targets = self.targets(task);
        Ok(minimal_submission(
            task.node.kind,
            &task.parts,
            task.proposed.as_deref(),
            &targets,
            &task.symmetry,
        ))
    }
}
