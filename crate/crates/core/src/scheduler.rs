//! Per-node active labeling rules and state.
//!
//! One iteration at a node: propose labels for every unconfirmed shape, sort
//! by confidence, demote symmetry-inconsistent shapes, verify high-confidence
//! shapes in batches until a batch passes too few, send the lowest-confidence
//! rest plus repeat failures to modification, then fine-tune. Once fewer than
//! `pool_stop` shapes remain, they all go to modification and the node ends.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SymmetryGroups;
use crate::label_tree::NodeKind;
use crate::proposer::NodeSpec;
use crate::{PartId, ShapeId};

/// How per-part argmax probabilities collapse to one sort key per shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Min,
    Mean,
    Product,
}

impl Aggregation {
    pub fn apply(&self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return 1.0;
        }
        match self {
            Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Product => values.iter().product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Shapes per verification batch (B).
    pub batch_size: usize,
    /// A full batch with fewer passes than this ends verification.
    pub verify_stop_threshold: usize,
    /// Lowest-confidence LC shapes sent to modification per iteration (Q₁).
    pub modification_quota: usize,
    /// Shapes that failed verification more than this many times go to
    /// modification (H).
    pub failure_cap: u32,
    /// Below this many unconfirmed shapes a node stops iterating.
    pub pool_stop: usize,
    pub symmetry: bool,
    pub hierarchical: bool,
    /// When false no proposals are shown: every part is labeled by hand.
    pub use_proposer: bool,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            batch_size: 10,
            verify_stop_threshold: 4,
            modification_quota: 20,
            failure_cap: 2,
            pool_stop: 40,
            symmetry: true,
            hierarchical: true,
            use_proposer: true,
            aggregation: Aggregation::Min,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError {
                field: "batch_size",
                message: "must be at least 1".into(),
            });
        }
        if self.verify_stop_threshold > self.batch_size {
            return Err(ConfigError {
                field: "verify_stop_threshold",
                message: format!("{} exceeds batch_size {}", self.verify_stop_threshold, self.batch_size),
            });
        }
        Ok(())
    }
}

/// One shape's entry in the confidence ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub shape: ShapeId,
    pub confidence: f64,
    /// False when the proposal splits a symmetry group across labels, or
    /// when there is no proposal at all.
    pub eligible: bool,
}

fn by_confidence_desc(a: &(&ShapeId, f64), b: &(&ShapeId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Orders shapes by confidence (descending, ties by id) and separates out
/// ineligible ones. Returns `(HC, demoted)`, both in that order.
pub fn split_hc_lc(candidates: &[Candidate], symmetry: bool) -> (Vec<ShapeId>, Vec<ShapeId>) {
    let mut order: Vec<(&ShapeId, f64, bool)> = candidates
        .iter()
        .map(|c| (&c.shape, c.confidence, c.eligible))
        .collect();
    order.sort_by(|a, b| by_confidence_desc(&(a.0, a.1), &(b.0, b.1)));
    let mut hc = Vec::new();
    let mut lc = Vec::new();
    for (shape, _, eligible) in order {
        if eligible || !symmetry {
            hc.push(shape.clone());
        } else {
            lc.push(shape.clone());
        }
    }
    (hc, lc)
}

/// Whether a presented batch ends verification for this iteration. Partial
/// batches never do.
pub fn batch_stops(passes: usize, batch_len: usize, config: &SessionConfig) -> bool {
    batch_len == config.batch_size && passes < config.verify_stop_threshold
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerifyOutcome {
    pub passed: Vec<ShapeId>,
    pub failed: Vec<ShapeId>,
    /// Shapes of the HC list never presented.
    pub unpresented: Vec<ShapeId>,
    pub batches: usize,
    pub stopped: bool,
}

/// Runs verification over the sorted HC list, asking `judge` for one verdict
/// per shape of each batch.
pub fn verify_phase<F>(hc: &[ShapeId], config: &SessionConfig, mut judge: F) -> VerifyOutcome
where
    F: FnMut(&[ShapeId]) -> Vec<bool>,
{
    let mut out = VerifyOutcome::default();
    let mut rest = hc;
    while !rest.is_empty() {
        let take = rest.len().min(config.batch_size);
        let (batch, tail) = rest.split_at(take);
        let verdicts = judge(batch);
        let mut passes = 0;
        for (shape, ok) in batch.iter().zip(verdicts) {
            if ok {
                passes += 1;
                out.passed.push(shape.clone());
            } else {
                out.failed.push(shape.clone());
            }
        }
        out.batches += 1;
        rest = tail;
        if batch_stops(passes, batch.len(), config) {
            out.stopped = true;
            break;
        }
    }
    out.unpresented = rest.to_vec();
    out
}

/// Up to `modification_quota` lowest-confidence LC shapes (ascending, ties by
/// id), then every shape whose failure count exceeds the cap (by id).
pub fn select_modification(lc: &[(ShapeId, f64)], failures: &BTreeMap<ShapeId, u32>, config: &SessionConfig) -> Vec<ShapeId> {
    let mut ordered: Vec<(&ShapeId, f64)> = lc.iter().map(|(s, c)| (s, *c)).collect();
    ordered.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let mut chosen: Vec<ShapeId> = ordered
        .into_iter()
        .take(config.modification_quota)
        .map(|(s, _)| s.clone())
        .collect();
    for (shape, &count) in failures {
        if count > config.failure_cap && !chosen.contains(shape) {
            chosen.push(shape.clone());
        }
    }
    chosen
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModifyError {
    #[error("part {0} is not pending modification in this shape")]
    UnknownPart(PartId),
    #[error("label `{0}` is outside the current node's children")]
    OutOfScope(String),
    #[error("conflicting labels submitted for an OR node")]
    ConflictingGroupLabel,
    #[error("part {0} has neither a proposal nor a submitted label")]
    MissingLabel(PartId),
}

/// Applied modification: final labels per part and the cost split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModifyOutcome {
    pub labels: Vec<String>,
    pub edited: u64,
    pub checked: u64,
}

/// Merges a (possibly partial) label submission with the proposal.
///
/// Submitted labels that differ from the proposal count as edits; everything
/// else counts as checked. With symmetry on, an omitted part takes the label
/// of the lowest-id submitted member of its symmetry group.
pub fn resolve_modification(
    node: &NodeSpec,
    parts: &[PartId],
    proposed: Option<&[String]>,
    submitted: &BTreeMap<PartId, String>,
    groups: &SymmetryGroups,
    symmetry: bool,
) -> Result<ModifyOutcome, ModifyError> {
    for (part, label) in submitted {
        if !parts.contains(part) {
            return Err(ModifyError::UnknownPart(*part));
        }
        if node.child_index(label).is_none() {
            return Err(ModifyError::OutOfScope(label.clone()));
        }
    }
    let proposal_of = |i: usize| proposed.map(|p| p[i].as_str());
    if node.kind == NodeKind::Or {
        let mut values = submitted.values();
        let first = values.next();
        if values.any(|v| Some(v) != first) {
            return Err(ModifyError::ConflictingGroupLabel);
        }
        let (label, edited) = match (first, proposal_of(0)) {
            (Some(s), Some(p)) => (s.clone(), u64::from(s != p)),
            (Some(s), None) => (s.clone(), 1),
            (None, Some(p)) => (p.to_string(), 0),
            (None, None) => return Err(ModifyError::MissingLabel(parts.first().copied().unwrap_or_default())),
        };
        return Ok(ModifyOutcome {
            labels: vec![label; parts.len()],
            edited,
            checked: 1 - edited,
        });
    }
    let mut labels = Vec::with_capacity(parts.len());
    let (mut edited, mut checked) = (0, 0);
    for (i, part) in parts.iter().enumerate() {
        if let Some(label) = submitted.get(part) {
            if proposal_of(i) == Some(label.as_str()) {
                checked += 1;
            } else {
                edited += 1;
            }
            labels.push(label.clone());
            continue;
        }
        let propagated = if symmetry {
            groups
                .group_of(*part)
                .and_then(|g| g.members.iter().find_map(|m| submitted.get(m)))
        } else {
            None
        };
        let label = match (propagated, proposal_of(i)) {
            (Some(l), _) => l.clone(),
            (None, Some(p)) => p.to_string(),
            (None, None) => return Err(ModifyError::MissingLabel(*part)),
        };
        checked += 1;
        labels.push(label);
    }
    Ok(ModifyOutcome { labels, edited, checked })
}

/// True when every symmetry group (restricted to `parts`) carries one label.
pub fn symmetry_consistent(parts: &[PartId], labels: &[String], groups: &SymmetryGroups) -> bool {
    let label_of = |p: PartId| parts.iter().position(|&q| q == p).map(|i| &labels[i]);
    groups.groups.iter().all(|g| {
        let mut it = g.members.iter().filter_map(|&m| label_of(m));
        match it.next() {
            Some(first) => it.all(|l| l == first),
            None => true,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodePhase {
    Proposing,
    Verifying,
    Modifying,
    Training,
    Completing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmedVia {
    Verified,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    /// Child label per routed part (OR nodes repeat the group label).
    pub labels: Vec<String>,
    pub via: ConfirmedVia,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub parts: Vec<PartId>,
    pub failures: u32,
    pub confirmed: Option<Confirmation>,
}

/// The proposal data the scheduler keeps per shape and iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeProposal {
    pub shape: ShapeId,
    /// Proposed child label per routed part; absent when proposals are off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    /// Sort key after aggregation.
    pub confidence: f64,
    pub symmetric_consistent: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NodeError {
    #[error("node `{node}` is {phase:?}, cannot {action}")]
    WrongPhase {
        node: String,
        phase: NodePhase,
        action: &'static str,
    },
    #[error("{0}")]
    Mismatch(String),
}

/// Mutable state of the node currently being labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub spec: NodeSpec,
    pub iteration: u32,
    pub phase: NodePhase,
    pub entries: BTreeMap<ShapeId, NodeEntry>,
    pub proposals: BTreeMap<ShapeId, ShapeProposal>,
    pub hc_queue: VecDeque<ShapeId>,
    pub lc: Vec<ShapeId>,
    pub batch_index: u32,
    pub modification_queue: VecDeque<ShapeId>,
    pub pool_stopped: bool,
    pub confirmed_this_iteration: usize,
    /// Shapes passing verification, per iteration.
    pub verified_per_iteration: Vec<usize>,
    /// Shapes confirmed through modification, per iteration.
    pub modified_per_iteration: Vec<usize>,
}

impl NodeState {
    pub fn new(spec: NodeSpec, entries: BTreeMap<ShapeId, Vec<PartId>>) -> Self {
        NodeState {
            spec,
            iteration: 0,
            phase: NodePhase::Proposing,
            entries: entries
                .into_iter()
                .map(|(s, parts)| {
                    (
                        s,
                        NodeEntry {
                            parts,
                            failures: 0,
                            confirmed: None,
                        },
                    )
                })
                .collect(),
            proposals: BTreeMap::new(),
            hc_queue: VecDeque::new(),
            lc: Vec::new(),
            batch_index: 0,
            modification_queue: VecDeque::new(),
            pool_stopped: false,
            confirmed_this_iteration: 0,
            verified_per_iteration: Vec::new(),
            modified_per_iteration: Vec::new(),
        }
    }

    pub fn pool(&self) -> impl Iterator<Item = (&ShapeId, &NodeEntry)> {
        self.entries.iter().filter(|(_, e)| e.confirmed.is_none())
    }

    pub fn pool_size(&self) -> usize {
        self.pool().count()
    }

    pub fn label_count(&self) -> usize {
        self.spec.children.len()
    }

    fn expect_phase(&self, phase: NodePhase, action: &'static str) -> Result<(), NodeError> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(NodeError::WrongPhase {
                node: self.spec.id.clone(),
                phase: self.phase,
                action,
            })
        }
    }

    /// Shapes of the batch that verification presents next.
    pub fn next_batch(&self, config: &SessionConfig) -> Vec<ShapeId> {
        if self.phase != NodePhase::Verifying {
            return Vec::new();
        }
        self.hc_queue.iter().take(config.batch_size).cloned().collect()
    }

    pub fn batch_id(&self) -> String {
        format!("{}/{}/{}", self.spec.id, self.iteration, self.batch_index)
    }

    /// Parts charged when a shape passes: every routed part at AND nodes, one
    /// type decision at OR nodes.
    pub fn pass_charge(&self, shape: &str) -> u64 {
        match self.spec.kind {
            NodeKind::Or => 1,
            NodeKind::And => self.entries.get(shape).map(|e| e.parts.len() as u64).unwrap_or(0),
        }
    }

    fn sort_key(&self, shape: &str) -> f64 {
        self.proposals.get(shape).map(|p| p.confidence).unwrap_or(0.0)
    }

    pub fn apply_proposals(&mut self, proposals: &[ShapeProposal], config: &SessionConfig) -> Result<(), NodeError> {
        self.expect_phase(NodePhase::Proposing, "accept proposals")?;
        let pool: Vec<&ShapeId> = self.pool().map(|(s, _)| s).collect();
        let offered: Vec<&ShapeId> = proposals.iter().map(|p| &p.shape).collect();
        if pool != offered {
            return Err(NodeError::Mismatch(format!(
                "proposals for node `{}` do not cover the unconfirmed pool",
                self.spec.id
            )));
        }
        for p in proposals {
            if let Some(labels) = &p.labels {
                let entry = &self.entries[&p.shape];
                if labels.len() != entry.parts.len() || labels.iter().any(|l| self.spec.child_index(l).is_none()) {
                    return Err(NodeError::Mismatch(format!("malformed proposal for shape `{}`", p.shape)));
                }
            }
        }
        self.proposals = proposals.iter().map(|p| (p.shape.clone(), p.clone())).collect();
        self.hc_queue.clear();
        self.lc.clear();
        self.modification_queue.clear();
        self.batch_index = 0;
        self.confirmed_this_iteration = 0;
        self.verified_per_iteration.push(0);
        self.modified_per_iteration.push(0);

        if proposals.len() < config.pool_stop {
            self.pool_stopped = true;
            let mut all: Vec<(&ShapeId, f64)> = proposals.iter().map(|p| (&p.shape, p.confidence)).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
            self.modification_queue = all.into_iter().map(|(s, _)| s.clone()).collect();
            self.phase = NodePhase::Modifying;
            if self.modification_queue.is_empty() {
                self.end_iteration();
            }
            return Ok(());
        }
        let candidates: Vec<Candidate> = proposals
            .iter()
            .map(|p| Candidate {
                shape: p.shape.clone(),
                confidence: p.confidence,
                eligible: p.symmetric_consistent && p.labels.is_some(),
            })
            .collect();
        // shapes without proposals can never be verified
        let (hc, lc) = split_hc_lc(&candidates, config.symmetry);
        let (hc, mut no_labels): (Vec<_>, Vec<_>) = hc.into_iter().partition(|s| self.proposals[s].labels.is_some());
        no_labels.extend(lc);
        self.hc_queue = hc.into();
        self.lc = no_labels;
        self.phase = NodePhase::Verifying;
        if self.hc_queue.is_empty() {
            self.plan_modification(config);
        }
        Ok(())
    }

    /// Applies one batch of verdicts; returns the shapes that passed.
    pub fn apply_verdicts(&mut self, verdicts: &[(ShapeId, bool)], config: &SessionConfig) -> Result<Vec<ShapeId>, NodeError> {
        self.expect_phase(NodePhase::Verifying, "accept verdicts")?;
        let expected = self.next_batch(config);
        let got: Vec<&ShapeId> = verdicts.iter().map(|(s, _)| s).collect();
        if got != expected.iter().collect::<Vec<_>>() {
            return Err(NodeError::Mismatch(format!(
                "verdicts do not match outstanding batch {}",
                self.batch_id()
            )));
        }
        let mut passed = Vec::new();
        for (shape, ok) in verdicts {
            self.hc_queue.pop_front();
            let labels = self.proposals[shape].labels.clone().unwrap_or_default();
            let iteration = self.iteration;
            let entry = self.entries.get_mut(shape).expect("pool shape");
            if *ok {
                entry.confirmed = Some(Confirmation {
                    labels,
                    via: ConfirmedVia::Verified,
                    iteration,
                });
                passed.push(shape.clone());
            } else {
                entry.failures += 1;
            }
        }
        self.confirmed_this_iteration += passed.len();
        *self.verified_per_iteration.last_mut().expect("iteration started") += passed.len();
        self.batch_index += 1;
        if batch_stops(passed.len(), verdicts.len(), config) {
            self.lc.extend(self.hc_queue.drain(..));
        }
        if self.hc_queue.is_empty() {
            self.plan_modification(config);
        }
        Ok(passed)
    }

    fn plan_modification(&mut self, config: &SessionConfig) {
        let lc: Vec<(ShapeId, f64)> = self.lc.iter().map(|s| (s.clone(), self.sort_key(s))).collect();
        let failures: BTreeMap<ShapeId, u32> = self.pool().map(|(s, e)| (s.clone(), e.failures)).collect();
        let mut chosen = select_modification(&lc, &failures, config);
        if chosen.is_empty() && self.confirmed_this_iteration == 0 {
            // guarantee progress: the least confident unconfirmed shape
            let mut pool: Vec<(&ShapeId, f64)> = self.pool().map(|(s, _)| (s, self.sort_key(s))).collect();
            pool.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
            chosen.extend(pool.first().map(|(s, _)| (*s).clone()));
        }
        self.modification_queue = chosen.into();
        self.phase = NodePhase::Modifying;
        if self.modification_queue.is_empty() {
            self.end_iteration();
        }
    }

    pub fn apply_modification(&mut self, shape: &str, labels: &[String]) -> Result<(), NodeError> {
        self.expect_phase(NodePhase::Modifying, "accept modifications")?;
        if self.modification_queue.front().map(String::as_str) != Some(shape) {
            return Err(NodeError::Mismatch(format!("shape `{shape}` is not pending modification")));
        }
        let entry = &self.entries[shape];
        if labels.len() != entry.parts.len() || labels.iter().any(|l| self.spec.child_index(l).is_none()) {
            return Err(NodeError::Mismatch(format!("malformed labels for shape `{shape}`")));
        }
        let iteration = self.iteration;
        self.entries.get_mut(shape).expect("pending shape").confirmed = Some(Confirmation {
            labels: labels.to_vec(),
            via: ConfirmedVia::Modified,
            iteration,
        });
        self.modification_queue.pop_front();
        self.confirmed_this_iteration += 1;
        *self.modified_per_iteration.last_mut().expect("iteration started") += 1;
        if self.modification_queue.is_empty() {
            self.end_iteration();
        }
        Ok(())
    }

    fn end_iteration(&mut self) {
        self.lc.clear();
        self.hc_queue.clear();
        self.phase = if self.pool_size() == 0 || self.pool_stopped {
            NodePhase::Completing
        } else {
            NodePhase::Training
        };
    }

    pub fn apply_finetune(&mut self) -> Result<(), NodeError> {
        self.expect_phase(NodePhase::Training, "finish training")?;
        self.iteration += 1;
        self.proposals.clear();
        self.phase = NodePhase::Proposing;
        Ok(())
    }

    /// Confirmed shapes with their labels, for fine-tuning.
    pub fn confirmed(&self) -> impl Iterator<Item = (&ShapeId, &NodeEntry, &Confirmation)> {
        self.entries
            .iter()
            .filter_map(|(s, e)| e.confirmed.as_ref().map(|c| (s, e, c)))
    }
}
