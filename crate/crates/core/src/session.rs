//! Labeling sessions.
//!
//! [`SessionState`] is a pure fold over audit events: `apply` is its only
//! mutator, so a replayed log and a live session agree by construction.
//! [`Session`] drives a state forward: it asks the proposer for labels,
//! hands tasks to an annotator, turns answers into events and writes them.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{
    AuditEvent, AuditWriter, Clock, EventBody, FinetuneEvent, ModifyShapeEvent, NodeCompleteEvent, ProposeEvent,
    SessionCompleteEvent, SessionStart, Verdict, VerifyBatchEvent,
};
use crate::cost::{CostCounters, CostReport, SessionLedger};
use crate::dataset::PreparedShape;
use crate::geometry::SymmetryGroups;
use crate::label_tree::{LabelTree, NodeKind, TreeError};
use crate::metrics::{self, EvalReport, MetricsError};
use crate::proposer::builtin::CheckpointStore;
use crate::proposer::{LabeledItem, NodeItem, NodeSpec, Proposer, ProposerError, TrainingJob, TrainingProgress};
use crate::scheduler::{
    resolve_modification, symmetry_consistent, ConfigError, ConfirmedVia, ModifyError, ModifyOutcome, NodeError, NodePhase,
    NodeState, SessionConfig, ShapeProposal,
};
use crate::{PartId, ShapeId};

/// The tree a session runs on: pruned, or flattened for flat runs.
pub fn working_tree(tree: &LabelTree, hierarchical: bool) -> LabelTree {
    if hierarchical {
        tree.prune()
    } else {
        tree.flatten()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("session not started")]
    NotStarted,
    #[error("session already started")]
    AlreadyStarted,
    #[error("session already complete")]
    Complete,
    #[error("expected seq {expected}, got {got}")]
    Sequence { expected: u64, got: u64 },
    #[error("event for session `{got}` in session `{expected}`")]
    WrongSession { expected: String, got: String },
    #[error("{0}")]
    Node(#[from] NodeError),
    #[error("{0}")]
    Tree(String),
    #[error("{0}")]
    Mismatch(String),
}

/// Per-node outcome kept after the node completes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: String,
    pub kind: NodeKind,
    pub label_count: usize,
    pub shapes: usize,
    pub iterations: u32,
    pub verified_per_iteration: Vec<usize>,
    pub modified_per_iteration: Vec<usize>,
    /// How and when each shape was confirmed at this node.
    pub confirmed: BTreeMap<ShapeId, ConfirmationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmationRecord {
    pub iteration: u32,
    pub via: ConfirmedVia,
}

impl NodeSummary {
    fn of(node: &NodeState) -> Self {
        NodeSummary {
            node: node.spec.id.clone(),
            kind: node.spec.kind,
            label_count: node.label_count(),
            shapes: node.entries.len(),
            iterations: node.verified_per_iteration.len() as u32,
            verified_per_iteration: node.verified_per_iteration.clone(),
            modified_per_iteration: node.modified_per_iteration.clone(),
            confirmed: node
                .confirmed()
                .map(|(s, _, c)| {
                    let record = ConfirmationRecord {
                        iteration: c.iteration,
                        via: c.via,
                    };
                    (s.clone(), record)
                })
                .collect(),
        }
    }
}

/// What the state needs next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    NotStarted,
    Propose,
    Verify,
    Modify,
    Train,
    CompleteNode,
    CompleteSession,
    Done,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session: String,
    pub dataset: String,
    pub proposer: String,
    pub config: SessionConfig,
    pub tree: Option<LabelTree>,
    pub shapes: BTreeMap<ShapeId, Vec<PartId>>,
    /// Confirmed child labels per part, root first.
    pub paths: BTreeMap<ShapeId, BTreeMap<PartId, Vec<String>>>,
    /// Nodes still to visit; the last entry is visited next.
    pub pending: Vec<String>,
    pub current: Option<NodeState>,
    pub completed: Vec<NodeSummary>,
    pub ledger: SessionLedger,
    pub next_seq: u64,
    pub complete: bool,
}

impl SessionState {
    pub fn started(&self) -> bool {
        self.tree.is_some()
    }

    fn tree(&self) -> Result<&LabelTree, StateError> {
        self.tree.as_ref().ok_or(StateError::NotStarted)
    }

    pub fn step(&self) -> Step {
        if !self.started() {
            return Step::NotStarted;
        }
        if self.complete {
            return Step::Done;
        }
        match &self.current {
            None => Step::CompleteSession,
            Some(node) => match node.phase {
                NodePhase::Proposing => Step::Propose,
                NodePhase::Verifying => Step::Verify,
                NodePhase::Modifying => Step::Modify,
                NodePhase::Training => Step::Train,
                NodePhase::Completing => Step::CompleteNode,
            },
        }
    }

    pub fn apply(&mut self, event: &AuditEvent) -> Result<(), StateError> {
        if event.seq != self.next_seq {
            return Err(StateError::Sequence {
                expected: self.next_seq,
                got: event.seq,
            });
        }
        if self.started() && event.session != self.session {
            return Err(StateError::WrongSession {
                expected: self.session.clone(),
                got: event.session.clone(),
            });
        }
        if self.complete {
            return Err(StateError::Complete);
        }
        match &event.body {
            EventBody::SessionStart(start) => self.start(&event.session, start)?,
            EventBody::Propose(ev) => {
                let config = self.config.clone();
                let node = self.node_at(&ev.node, ev.iteration)?;
                node.apply_proposals(&ev.proposals, &config)?;
            }
            EventBody::VerifyBatch(ev) => {
                let config = self.config.clone();
                let node = self.node_at(&ev.node, ev.iteration)?;
                if node.batch_index != ev.batch {
                    return Err(StateError::Mismatch(format!("expected batch {}, got {}", node.batch_index, ev.batch)));
                }
                let counters = verify_counters(node, &ev.verdicts);
                if counters != ev.counters {
                    return Err(StateError::Mismatch("verification counters disagree with verdicts".into()));
                }
                let verdicts: Vec<(ShapeId, bool)> = ev.verdicts.iter().map(|v| (v.shape.clone(), v.pass)).collect();
                node.apply_verdicts(&verdicts, &config)?;
                let (id, l) = (node.spec.id.clone(), node.label_count());
                self.ledger.charge(&id, l, &counters);
            }
            EventBody::ModifyShape(ev) => {
                let node = self.node_at(&ev.node, ev.iteration)?;
                let decisions = match node.spec.kind {
                    NodeKind::Or => 1,
                    NodeKind::And => ev.labels.len() as u64,
                };
                let c = &ev.counters;
                if c.verify_correct_parts != 0
                    || c.verify_failed_shapes != 0
                    || c.modify_checked_parts + c.modify_edited_parts != decisions
                {
                    return Err(StateError::Mismatch(format!("modification counters for `{}` do not add up", ev.shape)));
                }
                node.apply_modification(&ev.shape, &ev.labels)?;
                let (id, l) = (node.spec.id.clone(), node.label_count());
                self.ledger.charge(&id, l, &ev.counters);
            }
            EventBody::Finetune(ev) => {
                self.node_at(&ev.node, ev.iteration)?.apply_finetune()?;
            }
            EventBody::NodeComplete(ev) => {
                let node = self.current.as_ref().ok_or_else(|| StateError::Mismatch("no active node".into()))?;
                if node.spec.id != ev.node || node.phase != NodePhase::Completing {
                    return Err(StateError::Mismatch(format!("node `{}` is not ready to complete", ev.node)));
                }
                self.finish_node()?;
            }
            EventBody::SessionComplete(_) => {
                if self.current.is_some() {
                    return Err(StateError::Mismatch("nodes still pending".into()));
                }
                self.complete = true;
            }
        }
        self.next_seq += 1;
        Ok(())
    }

    fn start(&mut self, session: &str, start: &SessionStart) -> Result<(), StateError> {
        if self.started() {
            return Err(StateError::AlreadyStarted);
        }
        start.config.validate().map_err(|e| StateError::Mismatch(e.to_string()))?;
        self.session = session.to_string();
        self.dataset = start.dataset.clone();
        self.proposer = start.proposer.clone();
        self.config = start.config.clone();
        self.shapes = start.shapes.clone();
        self.paths = start
            .shapes
            .iter()
            .map(|(s, parts)| (s.clone(), parts.iter().map(|&p| (p, Vec::new())).collect()))
            .collect();
        self.pending = vec![start.tree.root_id().to_string()];
        self.tree = Some(start.tree.clone());
        self.next_node()
    }

    fn node_at(&mut self, id: &str, iteration: u32) -> Result<&mut NodeState, StateError> {
        match self.current.as_mut() {
            Some(node) if node.spec.id == id && node.iteration == iteration => Ok(node),
            Some(node) => Err(StateError::Mismatch(format!(
                "event for `{id}` iteration {iteration}, active is `{}` iteration {}",
                node.spec.id, node.iteration
            ))),
            None => Err(StateError::Mismatch(format!("event for `{id}` with no active node"))),
        }
    }

    /// Parts currently routed to `node`, grouped by shape.
    pub fn routed_parts(&self, node: &str) -> BTreeMap<ShapeId, Vec<PartId>> {
        let is_root = self.tree.as_ref().map(|t| t.root_id() == node).unwrap_or(false);
        let mut out = BTreeMap::new();
        for (shape, parts) in &self.paths {
            let routed: Vec<PartId> = parts
                .iter()
                .filter(|(_, path)| if is_root { path.is_empty() } else { path.last().map(String::as_str) == Some(node) })
                .map(|(&p, _)| p)
                .collect();
            if !routed.is_empty() {
                out.insert(shape.clone(), routed);
            }
        }
        out
    }

    fn next_node(&mut self) -> Result<(), StateError> {
        self.current = None;
        while let Some(id) = self.pending.pop() {
            let entries = self.routed_parts(&id);
            if entries.is_empty() {
                continue;
            }
            let spec = NodeSpec::from_tree(self.tree()?, &id).map_err(tree_err)?;
            self.current = Some(NodeState::new(spec, entries));
            break;
        }
        Ok(())
    }

    fn finish_node(&mut self) -> Result<(), StateError> {
        let node = self.current.take().expect("checked by caller");
        for (shape, entry, confirmation) in node.confirmed() {
            let paths = self.paths.get_mut(shape).expect("known shape");
            for (part, label) in entry.parts.iter().zip(&confirmation.labels) {
                paths.get_mut(part).expect("known part").push(label.clone());
            }
        }
        let tree = self.tree()?;
        let mut internal: Vec<String> = Vec::new();
        for child in &node.spec.children {
            if !tree.is_leaf(child).map_err(tree_err)? {
                internal.push(child.clone());
            }
        }
        self.pending.extend(internal.into_iter().rev());
        self.completed.push(NodeSummary::of(&node));
        self.next_node()
    }

    /// Deepest confirmed label of every part labeled so far.
    pub fn final_labels(&self) -> BTreeMap<ShapeId, BTreeMap<PartId, String>> {
        self.paths
            .iter()
            .map(|(s, parts)| {
                let labels = parts
                    .iter()
                    .filter_map(|(&p, path)| path.last().map(|l| (p, l.clone())))
                    .collect();
                (s.clone(), labels)
            })
            .collect()
    }

    /// Per-node verified/modified counts by iteration, the active node last.
    pub fn series(&self) -> Vec<NodeSummary> {
        let mut out = self.completed.clone();
        out.extend(self.current.as_ref().map(NodeSummary::of));
        out
    }
}

fn tree_err(e: TreeError) -> StateError {
    StateError::Tree(e.to_string())
}

fn verify_counters(node: &NodeState, verdicts: &[Verdict]) -> CostCounters {
    let mut c = CostCounters::default();
    for v in verdicts {
        if v.pass {
            c.verify_correct_parts += node.pass_charge(&v.shape);
        } else {
            c.verify_failed_shapes += 1;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub shape: ShapeId,
    pub parts: Vec<PartId>,
    pub labels: Vec<String>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyTask {
    pub batch_id: String,
    pub node: NodeSpec,
    pub iteration: u32,
    pub items: Vec<TaskItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifyTask {
    pub node: NodeSpec,
    pub iteration: u32,
    pub shape: ShapeId,
    pub parts: Vec<PartId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed: Option<Vec<String>>,
    pub confidence: f64,
    /// Symmetry groups among `parts`; empty when symmetry is off.
    pub symmetry: SymmetryGroups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStatus {
    pub node: String,
    pub iteration: u32,
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Task {
    Verify(VerifyTask),
    Modify(ModifyTask),
    Training(TrainingStatus),
    Done,
}

/// Anything that can answer verification and modification tasks.
pub trait Annotator {
    fn verify(&mut self, task: &VerifyTask) -> Result<Vec<Verdict>, String>;
    /// Returns the labels the annotator sets explicitly; omitted parts keep
    /// their proposal or take a symmetric partner's label.
    fn modify(&mut self, task: &ModifyTask) -> Result<BTreeMap<PartId, String>, String>;
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("state: {0}")]
    State(#[from] StateError),
    #[error("proposer: {0}")]
    Proposer(#[from] ProposerError),
    #[error("modification: {0}")]
    Modify(#[from] ModifyError),
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
    #[error("stale batch `{got}`, outstanding is `{expected}`")]
    StaleBatch { expected: String, got: String },
    #[error("{0}")]
    Invalid(String),
    #[error("training in progress")]
    Training,
    #[error("annotator: {0}")]
    Annotator(String),
    #[error("evaluation: {0}")]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    pub id: String,
    pub dataset: String,
    pub config: SessionConfig,
    pub clock: Clock,
    pub audit_path: Option<PathBuf>,
    pub checkpoints: Option<CheckpointStore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: String,
    pub dataset: String,
    pub proposer: String,
    pub config: SessionConfig,
    pub complete: bool,
    pub shapes: usize,
    pub cost: CostReport,
    pub nodes: Vec<NodeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalReport>,
}

pub struct Session {
    state: SessionState,
    shapes: BTreeMap<ShapeId, Arc<PreparedShape>>,
    proposer: Option<Box<dyn Proposer>>,
    log: Option<AuditWriter>,
    clock: Clock,
    checkpoints: Option<CheckpointStore>,
    progress: Arc<TrainingProgress>,
    events: Vec<AuditEvent>,
    keep_events: bool,
}

impl Session {
    /// Starts a session over `shapes` on `tree` (pruned or flattened here
    /// according to the config) and runs it up to the first human task.
    pub fn start(
        options: SessionOptions,
        tree: &LabelTree,
        shapes: &[Arc<PreparedShape>],
        proposer: Box<dyn Proposer>,
    ) -> Result<Self, SessionError> {
        options.config.validate()?;
        let tree = working_tree(tree, options.config.hierarchical);
        let log = match &options.audit_path {
            Some(p) => Some(AuditWriter::create(p)?),
            None => None,
        };
        let mut session = Session {
            state: SessionState::default(),
            shapes: shapes.iter().map(|s| (s.id.clone(), s.clone())).collect(),
            proposer: None,
            log,
            clock: options.clock,
            checkpoints: options.checkpoints,
            progress: Arc::new(TrainingProgress::default()),
            events: Vec::new(),
            keep_events: false,
        };
        let start = SessionStart {
            dataset: options.dataset,
            proposer: proposer.name().to_string(),
            config: options.config,
            tree,
            shapes: shapes.iter().map(|s| (s.id.clone(), s.part_ids())).collect(),
        };
        session.proposer = Some(proposer);
        session.state.session = options.id;
        session.emit(EventBody::SessionStart(start))?;
        session.advance()?;
        Ok(session)
    }

    /// Reattaches to a logged session. The proposer should be in the state it
    /// had when the log ends (for example restored from checkpoints).
    pub fn resume(
        audit_path: &std::path::Path,
        shapes: &[Arc<PreparedShape>],
        proposer: Box<dyn Proposer>,
        clock: Clock,
        checkpoints: Option<CheckpointStore>,
    ) -> Result<Self, SessionError> {
        let state = crate::audit::replay_audit(audit_path).map_err(|e| SessionError::Invalid(e.to_string()))?;
        if !state.started() {
            return Err(StateError::NotStarted.into());
        }
        let mut session = Session {
            state,
            shapes: shapes.iter().map(|s| (s.id.clone(), s.clone())).collect(),
            proposer: Some(proposer),
            log: Some(AuditWriter::append_to(audit_path)?),
            clock,
            checkpoints,
            progress: Arc::new(TrainingProgress::default()),
            events: Vec::new(),
            keep_events: false,
        };
        for shape in session.state.shapes.keys() {
            if !session.shapes.contains_key(shape) {
                return Err(SessionError::Invalid(format!("shape `{shape}` from the log is not loaded")));
            }
        }
        session.advance()?;
        Ok(session)
    }

    /// Keeps a copy of every event emitted from now on.
    pub fn record_events(&mut self) {
        self.keep_events = true;
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn id(&self) -> &str {
        &self.state.session
    }

    pub fn shape(&self, id: &str) -> Option<&Arc<PreparedShape>> {
        self.shapes.get(id)
    }

    pub fn progress(&self) -> Arc<TrainingProgress> {
        self.progress.clone()
    }

    pub fn is_complete(&self) -> bool {
        self.state.complete
    }

    fn emit(&mut self, body: EventBody) -> Result<(), SessionError> {
        let before = self.state.ledger.total_seconds();
        let mut event = AuditEvent {
            seq: self.state.next_seq,
            timestamp: self.clock.timestamp(before),
            session: self.state.session.clone(),
            body,
            simulated_cost_seconds: 0.0,
        };
        let mut next = self.state.clone();
        next.apply(&event)?;
        let after = next.ledger.total_seconds();
        event.simulated_cost_seconds = after - before;
        event.timestamp = self.clock.timestamp(after);
        if let Some(log) = self.log.as_mut() {
            log.write(&event)?;
        }
        self.state = next;
        if self.keep_events {
            self.events.push(event);
        }
        Ok(())
    }

    /// Emits every event that needs no human input.
    fn advance(&mut self) -> Result<(), SessionError> {
        loop {
            match self.state.step() {
                Step::Propose => self.propose()?,
                Step::CompleteNode => {
                    let node = self.state.current.as_ref().expect("active node");
                    let body = EventBody::NodeComplete(NodeCompleteEvent {
                        node: node.spec.id.clone(),
                        iterations: node.verified_per_iteration.len() as u32,
                    });
                    self.emit(body)?;
                }
                Step::CompleteSession => {
                    let total_seconds = self.state.ledger.total_seconds();
                    self.emit(EventBody::SessionComplete(SessionCompleteEvent { total_seconds }))?;
                }
                _ => return Ok(()),
            }
        }
    }

    fn node(&self) -> Result<&NodeState, SessionError> {
        self.state
            .current
            .as_ref()
            .ok_or_else(|| SessionError::Invalid("no active node".into()))
    }

    fn propose(&mut self) -> Result<(), SessionError> {
        let node = self.node()?;
        let spec = node.spec.clone();
        let iteration = node.iteration;
        let items: Vec<NodeItem> = node
            .pool()
            .map(|(s, e)| NodeItem {
                shape: self.shapes[s].clone(),
                parts: e.parts.clone(),
            })
            .collect();
        let config = &self.state.config;
        let proposals: Vec<ShapeProposal> = if config.use_proposer {
            let proposer = self.proposer.as_ref().ok_or(SessionError::Training)?;
            let raw = proposer.propose(&spec, &items)?;
            if raw.len() != items.len() || raw.iter().zip(&items).any(|(p, i)| p.shape != i.shape.id) {
                return Err(ProposerError::InvalidProposal {
                    shape: spec.id.clone(),
                    reason: "proposals do not match the requested shapes".into(),
                }.into());
            }
            raw.iter()
                .zip(&items)
                .map(|(p, item)| {
                    let confidence = match spec.kind {
                        NodeKind::Or => p.confidence,
                        NodeKind::And => config.aggregation.apply(&p.part_confidences()),
                    };
                    let consistent = spec.kind == NodeKind::Or
                        || symmetry_consistent(&item.parts, &p.labels, &item.shape.symmetry.restrict(&item.parts));
                    ShapeProposal {
                        shape: p.shape.clone(),
                        labels: Some(p.labels.clone()),
                        confidence,
                        symmetric_consistent: consistent,
                    }
                })
                .collect()
        } else {
            items
                .iter()
                .map(|i| ShapeProposal {
                    shape: i.shape.id.clone(),
                    labels: None,
                    confidence: 0.0,
                    symmetric_consistent: false,
                })
                .collect()
        };
        self.emit(EventBody::Propose(ProposeEvent {
            node: spec.id,
            iteration,
            proposals,
        }))
    }

    pub fn next_task(&self) -> Task {
        let Some(node) = self.state.current.as_ref() else {
            return Task::Done;
        };
        match node.phase {
            NodePhase::Verifying => {
                let items = node
                    .next_batch(&self.state.config)
                    .into_iter()
                    .map(|s| {
                        let p = &node.proposals[&s];
                        TaskItem {
                            parts: node.entries[&s].parts.clone(),
                            labels: p.labels.clone().unwrap_or_default(),
                            confidence: p.confidence,
                            shape: s,
                        }
                    })
                    .collect();
                Task::Verify(VerifyTask {
                    batch_id: node.batch_id(),
                    node: node.spec.clone(),
                    iteration: node.iteration,
                    items,
                })
            }
            NodePhase::Modifying => {
                let shape = node.modification_queue.front().expect("non-empty in modifying phase").clone();
                let parts = node.entries[&shape].parts.clone();
                let proposal = &node.proposals[&shape];
                let symmetry = if self.state.config.symmetry {
                    self.shapes[&shape].symmetry.restrict(&parts)
                } else {
                    SymmetryGroups::default()
                };
                Task::Modify(ModifyTask {
                    node: node.spec.clone(),
                    iteration: node.iteration,
                    proposed: proposal.labels.clone(),
                    confidence: proposal.confidence,
                    shape,
                    parts,
                    symmetry,
                })
            }
            _ => Task::Training(TrainingStatus {
                node: node.spec.id.clone(),
                iteration: node.iteration,
                progress: if self.proposer.is_none() { self.progress.fraction() } else { 0.0 },
            }),
        }
    }

    /// Records verdicts for the outstanding batch. Verdicts may come in any
    /// order but must cover the batch exactly.
    pub fn submit_verdicts(&mut self, batch_id: &str, verdicts: &[Verdict]) -> Result<(), SessionError> {
        let node = self.node()?;
        if node.phase != NodePhase::Verifying || node.batch_id() != batch_id {
            let expected = if node.phase == NodePhase::Verifying { node.batch_id() } else { "none".into() };
            return Err(SessionError::StaleBatch {
                expected,
                got: batch_id.to_string(),
            });
        }
        let expected = node.next_batch(&self.state.config);
        let by_shape: BTreeMap<&str, bool> = verdicts.iter().map(|v| (v.shape.as_str(), v.pass)).collect();
        if by_shape.len() != verdicts.len() || by_shape.len() != expected.len() {
            return Err(SessionError::Invalid(format!(
                "batch {batch_id} has {} shapes, got {} distinct verdicts",
                expected.len(),
                by_shape.len()
            )));
        }
        let ordered = expected
            .iter()
            .map(|s| {
                by_shape
                    .get(s.as_str())
                    .map(|&pass| Verdict { shape: s.clone(), pass })
                    .ok_or_else(|| SessionError::Invalid(format!("no verdict for shape `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let body = EventBody::VerifyBatch(VerifyBatchEvent {
            node: node.spec.id.clone(),
            iteration: node.iteration,
            batch: node.batch_index,
            counters: verify_counters(node, &ordered),
            verdicts: ordered,
        });
        self.emit(body)?;
        self.advance()
    }

    /// Applies a label submission to the shape awaiting modification.
    pub fn submit_modification(
        &mut self,
        shape: &str,
        submission: &BTreeMap<PartId, String>,
    ) -> Result<ModifyOutcome, SessionError> {
        let node = self.node()?;
        if node.phase != NodePhase::Modifying || node.modification_queue.front().map(String::as_str) != Some(shape) {
            return Err(SessionError::Invalid(format!("shape `{shape}` is not awaiting modification")));
        }
        let parts = &node.entries[shape].parts;
        let groups = self.shapes[shape].symmetry.restrict(parts);
        let outcome = resolve_modification(
            &node.spec,
            parts,
            node.proposals[shape].labels.as_deref(),
            submission,
            &groups,
            self.state.config.symmetry,
        )?;
        let body = EventBody::ModifyShape(ModifyShapeEvent {
            node: node.spec.id.clone(),
            iteration: node.iteration,
            shape: shape.to_string(),
            labels: outcome.labels.clone(),
            counters: CostCounters {
                modify_checked_parts: outcome.checked,
                modify_edited_parts: outcome.edited,
                ..CostCounters::default()
            },
        });
        self.emit(body)?;
        self.advance()?;
        Ok(outcome)
    }

    /// All confirmations at the active node, as a fine-tuning job.
    pub fn training_job(&self) -> Result<TrainingJob, SessionError> {
        let node = self.node()?;
        let items = node
            .confirmed()
            .map(|(s, e, c)| {
                let mut labels: Vec<usize> = c
                    .labels
                    .iter()
                    .map(|l| node.spec.child_index(l).expect("validated label"))
                    .collect();
                if node.spec.kind == NodeKind::Or {
                    labels.truncate(1);
                }
                LabeledItem {
                    shape: self.shapes[s].clone(),
                    parts: e.parts.clone(),
                    labels,
                }
            })
            .collect();
        Ok(TrainingJob {
            node: node.spec.clone(),
            items,
        })
    }

    /// Hands the proposer out for training elsewhere (for example on a
    /// background thread). `next_task` reports training until it returns.
    pub fn take_proposer(&mut self) -> Result<Box<dyn Proposer>, SessionError> {
        if self.state.step() != Step::Train {
            return Err(SessionError::Invalid("no training pending".into()));
        }
        self.proposer.take().ok_or(SessionError::Training)
    }

    /// Takes back a proposer after fine-tuning and moves to the next
    /// iteration.
    pub fn finish_training(&mut self, proposer: Box<dyn Proposer>) -> Result<(), SessionError> {
        if self.state.step() != Step::Train {
            return Err(SessionError::Invalid("no training pending".into()));
        }
        let node = self.node()?;
        let (id, iteration) = (node.spec.id.clone(), node.iteration);
        let confirmed_shapes = node.confirmed().count();
        let checkpoint = match (&self.checkpoints, proposer.checkpoint(&id)) {
            (Some(store), Some(bytes)) => Some(store.save(&self.state.session, &id, iteration, &bytes)?),
            _ => None,
        };
        self.proposer = Some(proposer);
        self.emit(EventBody::Finetune(FinetuneEvent {
            node: id,
            iteration,
            confirmed_shapes,
            checkpoint,
        }))?;
        self.advance()
    }

    /// Fine-tunes in place on the calling thread.
    pub fn train(&mut self) -> Result<(), SessionError> {
        let job = self.training_job()?;
        let mut proposer = self.take_proposer()?;
        if self.state.config.use_proposer {
            if let Err(e) = proposer.finetune(&job, &self.progress) {
                self.proposer = Some(proposer);
                return Err(e.into());
            }
        }
        self.finish_training(proposer)
    }

    /// Runs to completion against an annotator.
    pub fn run(&mut self, annotator: &mut dyn Annotator) -> Result<(), SessionError> {
        loop {
            match self.next_task() {
                Task::Done => return Ok(()),
                Task::Training(_) => self.train()?,
                Task::Verify(task) => {
                    let verdicts = annotator.verify(&task).map_err(SessionError::Annotator)?;
                    self.submit_verdicts(&task.batch_id, &verdicts)?;
                }
                Task::Modify(task) => {
                    let submission = annotator.modify(&task).map_err(SessionError::Annotator)?;
                    self.submit_modification(&task.shape, &submission)?;
                }
            }
        }
    }

    pub fn final_labels(&self) -> BTreeMap<ShapeId, BTreeMap<PartId, String>> {
        self.state.final_labels()
    }

    /// Cost report, node series and, once complete and when ground truth is
    /// available, the accuracy of the final labels.
    pub fn report(&self) -> SessionReport {
        let evaluation = if self.state.complete {
            let shapes: Vec<&PreparedShape> = self.state.shapes.keys().map(|s| self.shapes[s].as_ref()).collect();
            metrics::evaluate(&shapes, &self.final_labels()).ok()
        } else {
            None
        };
        SessionReport {
            session: self.state.session.clone(),
            dataset: self.state.dataset.clone(),
            proposer: self.state.proposer.clone(),
            config: self.state.config.clone(),
            complete: self.state.complete,
            shapes: self.state.shapes.len(),
            cost: self.state.ledger.report(),
            nodes: self.state.series(),
            evaluation,
        }
    }
}
