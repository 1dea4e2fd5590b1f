//! Built-in proposer: hand-crafted part descriptors, mean-pooled global
//! context and a small MLP per taxonomy node.
//!
//! AND nodes classify each part from `[part descriptor, pooled descriptor]`;
//! OR nodes classify the routed group from the pooled descriptor alone. Part
//! descriptors are laid out in a zero-padded `p_max x FEATURE_DIM` matrix with
//! a row mask so pooling never sees padding.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mlp::{self, Mlp, OptimizerKind, Schedule, TrainOptions};
use super::{
    ground_truth_items, missing_labels, LabeledItem, NodeItem, NodeSpec, Proposal, Proposer, ProposerError,
    TrainingJob, TrainingProgress,
};
use crate::dataset::{stable_hash, PreparedShape, DEFAULT_POINTS_PER_SHAPE};
use crate::geometry::FEATURE_DIM;
use crate::label_tree::{LabelTree, NodeKind};
use crate::PartId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub n_sample_points: usize,
    pub feature_dim: usize,
    pub p_max: usize,
    pub hidden: Vec<usize>,
    pub pretrain: Schedule,
    pub finetune: Schedule,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig {
            n_sample_points: DEFAULT_POINTS_PER_SHAPE,
            feature_dim: FEATURE_DIM,
            p_max: 150,
            hidden: vec![64, 64],
            pretrain: Schedule {
                epochs: 250,
                learning_rate: 0.001,
                decay: 0.8,
                decay_every: 25,
            },
            finetune: Schedule {
                epochs: 125,
                learning_rate: 0.0001,
                decay: 1.0,
                decay_every: 0,
            },
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_sample_points == 0 || self.p_max == 0 || self.batch_size == 0 {
            return Err("n_sample_points, p_max and batch_size must be positive".into());
        }
        if self.feature_dim != FEATURE_DIM {
            return Err(format!("built-in descriptors have dimension {FEATURE_DIM}"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("hidden widths must be positive".into());
        }
        for s in [&self.pretrain, &self.finetune] {
            if s.learning_rate <= 0.0 || s.decay <= 0.0 {
                return Err("learning rates and decay must be positive".into());
            }
        }
        Ok(())
    }
}

/// Per-feature standardization fitted on pretraining inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs.first().map(|x| x.len()).unwrap_or(0);
        let n = xs.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for k in 0..d {
                mean[k] += x[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for x in xs {
            for k in 0..d {
                var[k] += (x[k] - mean[k]).powi(2);
            }
        }
        let scale = var.into_iter().map(|v| 1.0 / (v / n).sqrt().max(1e-6)).collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) * s;
        }
    }
}

/// Classifier inputs for one routed part subset: one row per part (AND, in
/// the order of `parts`) or a single pooled row (OR).
pub fn node_inputs(
    kind: NodeKind,
    shape: &PreparedShape,
    parts: &[PartId],
    p_max: usize,
) -> Result<Vec<Vec<f64>>, ProposerError> {
    if parts.len() > p_max {
        return Err(ProposerError::TooManyParts {
            shape: shape.id.clone(),
            parts: parts.len(),
            p_max,
        });
    }
    // padded descriptor matrix in part-id order, so pooling is order-free
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by_key(|&i| parts[i]);
    let mut matrix = vec![[0.0; FEATURE_DIM]; p_max];
    let mut mask = vec![0.0; p_max];
    for (row, &i) in order.iter().enumerate() {
        let part = shape.part(parts[i]).ok_or_else(|| ProposerError::InvalidProposal {
            shape: shape.id.clone(),
            reason: format!("unknown part {}", parts[i]),
        })?;
        matrix[row] = part.features;
        mask[row] = 1.0;
    }
    let count: f64 = mask.iter().sum();
    let mut pooled = [0.0; FEATURE_DIM];
    for (row, m) in matrix.iter().zip(&mask) {
        if *m == 0.0 {
            continue;
        }
        for k in 0..FEATURE_DIM {
            pooled[k] += row[k];
        }
    }
    if count > 0.0 {
        pooled.iter_mut().for_each(|v| *v /= count);
    }
    Ok(match kind {
        NodeKind::Or => vec![pooled.to_vec()],
        NodeKind::And => {
            let mut rows = vec![Vec::new(); parts.len()];
            for (row, &i) in order.iter().enumerate() {
                let mut x = Vec::with_capacity(2 * FEATURE_DIM);
                x.extend_from_slice(&matrix[row]);
                x.extend_from_slice(&pooled);
                rows[i] = x;
            }
            rows
        }
    })
}

fn input_dim(kind: NodeKind) -> usize {
    match kind {
        NodeKind::And => 2 * FEATURE_DIM,
        NodeKind::Or => FEATURE_DIM,
    }
}

fn flatten_items(kind: NodeKind, items: &[LabeledItem], p_max: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>), ProposerError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for item in items {
        let rows = node_inputs(kind, &item.shape, &item.parts, p_max)?;
        for (x, &y) in rows.into_iter().zip(&item.labels) {
            xs.push(x);
            ys.push(y);
        }
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    pub spec: NodeSpec,
    pub standardizer: Standardizer,
    pub mlp: Mlp,
    /// Raw pretraining inputs, mixed into every fine-tuning round.
    pub base_inputs: Vec<Vec<f64>>,
    pub base_labels: Vec<usize>,
    pub pretrain_losses: Vec<f64>,
    pub warnings: Vec<String>,
    pub finetune_rounds: u32,
}

impl NodeModel {
    fn standardized(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter()
            .map(|x| {
                let mut x = x.clone();
                self.standardizer.apply(&mut x);
                x
            })
            .collect()
    }

    fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        self.mlp.accuracy(&refs, ys)
    }
}

/// The default proposer: one [`NodeModel`] per internal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltinProposer {
    pub config: ProposerConfig,
    pub models: BTreeMap<String, NodeModel>,
}

fn node_seed(seed: u64, node: &str, round: u32) -> u64 {
    seed ^ stable_hash(node.as_bytes()) ^ (round as u64).wrapping_mul(0x9E3779B97F4A7C15)
}

impl BuiltinProposer {
    pub fn new(config: ProposerConfig) -> Self {
        BuiltinProposer {
            config,
            models: BTreeMap::new(),
        }
    }

    /// Pretrains a model for every internal node of `tree` from the ground
    /// truth carried by `shapes`.
    pub fn pretrain(tree: &LabelTree, shapes: &[Arc<PreparedShape>], config: ProposerConfig) -> Result<Self, ProposerError> {
        config.validate().map_err(ProposerError::Protocol)?;
        let mut proposer = BuiltinProposer::new(config);
        for node in tree.internal_nodes() {
            let spec = NodeSpec::from_tree(tree, node).expect("internal node");
            let items = ground_truth_items(tree, &spec, shapes);
            proposer.pretrain_node(spec, &items, None)?;
        }
        Ok(proposer)
    }

    pub fn pretrain_node(
        &mut self,
        spec: NodeSpec,
        items: &[LabeledItem],
        progress: Option<&TrainingProgress>,
    ) -> Result<&NodeModel, ProposerError> {
        if items.is_empty() {
            return Err(ProposerError::NoTrainingData(spec.id.clone()));
        }
        let warnings = missing_labels(&spec, items)
            .into_iter()
            .map(|l| format!("node `{}`: label `{l}` absent from training data", spec.id))
            .collect();
        let (raw, ys) = flatten_items(spec.kind, items, self.config.p_max)?;
        let standardizer = Standardizer::fit(&raw);
        let seed = node_seed(self.config.seed, &spec.id, 0);
        let mut model = NodeModel {
            mlp: Mlp::new(input_dim(spec.kind), &self.config.hidden, spec.children.len(), seed),
            spec,
            standardizer,
            base_inputs: raw,
            base_labels: ys,
            pretrain_losses: Vec::new(),
            warnings,
            finetune_rounds: 0,
        };
        let xs = model.standardized(&model.base_inputs);
        let opts = TrainOptions {
            schedule: self.config.pretrain,
            batch_size: self.config.batch_size,
            optimizer: self.config.optimizer,
            seed,
        };
        model.pretrain_losses = mlp::train(&mut model.mlp, &xs, &model.base_labels, &opts, progress);
        let id = model.spec.id.clone();
        self.models.insert(id.clone(), model);
        Ok(&self.models[&id])
    }

    pub fn model(&self, node: &str) -> Option<&NodeModel> {
        self.models.get(node)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.models.values().flat_map(|m| m.warnings.iter().cloned()).collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self, ProposerError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ProposerError::Decode(format!("{}: {e}", path.display())))
    }

    /// Probability vectors for one routed subset, before validation.
    pub fn distributions(&self, node: &NodeSpec, shape: &PreparedShape, parts: &[PartId]) -> Result<Vec<Vec<f64>>, ProposerError> {
        self.distributions_with_pmax(node, shape, parts, self.config.p_max)
    }

    pub fn distributions_with_pmax(
        &self,
        node: &NodeSpec,
        shape: &PreparedShape,
        parts: &[PartId],
        p_max: usize,
    ) -> Result<Vec<Vec<f64>>, ProposerError> {
        let model = self.models.get(&node.id).ok_or_else(|| ProposerError::Untrained(node.id.clone()))?;
        let rows = node_inputs(node.kind, shape, parts, p_max)?;
        let mut ws = mlp::Workspace::default();
        Ok(rows
            .into_iter()
            .map(|mut x| {
                model.standardizer.apply(&mut x);
                model.mlp.predict_proba_with(&x, &mut ws)
            })
            .collect())
    }

    /// Binary checkpoint of one node model.
    pub fn checkpoint(&self, node: &str) -> Option<Vec<u8>> {
        self.models.get(node).map(encode_checkpoint)
    }
}

impl Proposer for BuiltinProposer {
    fn name(&self) -> &str {
        "builtin"
    }

    fn propose(&self, node: &NodeSpec, items: &[NodeItem]) -> Result<Vec<Proposal>, ProposerError> {
        items
            .iter()
            .map(|item| {
                let dist = self.distributions(node, &item.shape, &item.parts)?;
                Proposal::from_distributions(node, &item.shape.id, item.parts.clone(), dist)
            })
            .collect()
    }

    /// Trains on confirmed items plus the node's pretraining set. The update
    /// is kept only if accuracy on the confirmed items does not drop.
    fn finetune(&mut self, job: &TrainingJob, progress: &TrainingProgress) -> Result<(), ProposerError> {
        if job.items.is_empty() {
            return Ok(());
        }
        let config = self.config.clone();
        let model = self
            .models
            .get_mut(&job.node.id)
            .ok_or_else(|| ProposerError::Untrained(job.node.id.clone()))?;
        let (raw, ys) = flatten_items(model.spec.kind, &job.items, config.p_max)?;
        let confirmed = model.standardized(&raw);
        let before = model.accuracy(&confirmed, &ys);

        let mut xs = confirmed.clone();
        xs.extend(model.standardized(&model.base_inputs));
        let mut all_ys = ys.clone();
        all_ys.extend_from_slice(&model.base_labels);
        model.finetune_rounds += 1;
        let opts = TrainOptions {
            schedule: config.finetune,
            batch_size: config.batch_size,
            optimizer: config.optimizer,
            seed: node_seed(config.seed, &model.spec.id, model.finetune_rounds),
        };
        let mut candidate = model.mlp.clone();
        mlp::train(&mut candidate, &xs, &all_ys, &opts, Some(progress));
        let refs: Vec<&[f64]> = confirmed.iter().map(|x| x.as_slice()).collect();
        if candidate.accuracy(&refs, &ys) >= before {
            model.mlp = candidate;
        }
        Ok(())
    }

    fn checkpoint(&self, node: &str) -> Option<Vec<u8>> {
        BuiltinProposer::checkpoint(self, node)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PLCK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: NodeSpec,
    standardizer: Standardizer,
    sizes: Vec<usize>,
    finetune_rounds: u32,
    base_inputs: Vec<Vec<f64>>,
    base_labels: Vec<usize>,
}

/// `PLCK | u16 version | u32 header length | JSON header | f64 LE weights`.
pub fn encode_checkpoint(model: &NodeModel) -> Vec<u8> {
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        standardizer: model.standardizer.clone(),
        sizes: model.mlp.sizes.clone(),
        finetune_rounds: model.finetune_rounds,
        base_inputs: model.base_inputs.clone(),
        base_labels: model.base_labels.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + header.len() + 8 * model.mlp.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &model.mlp.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NodeModel, ProposerError> {
    let bad = |m: &str| ProposerError::Decode(m.to_string());
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let weights = &bytes[10 + hlen..];
    if !weights.len().is_multiple_of(8) {
        return Err(bad("truncated weights"));
    }
    let params: Vec<f64> = weights
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mlp = Mlp {
        sizes: header.sizes,
        params,
    };
    let expected: usize = mlp.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if expected != mlp.params.len() {
        return Err(bad("weight count does not match layer sizes"));
    }
    Ok(NodeModel {
        spec: header.spec,
        standardizer: header.standardizer,
        mlp,
        base_inputs: header.base_inputs,
        base_labels: header.base_labels,
        pretrain_losses: Vec::new(),
        warnings: Vec::new(),
        finetune_rounds: header.finetune_rounds,
    })
}

/// Checkpoints on disk, keyed by (session, node, iteration).
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointStore { root: root.into() }
    }

    pub fn path(&self, session: &str, node: &str, iteration: u32) -> PathBuf {
        self.root.join(session).join(node).join(format!("{iteration:04}.ckpt"))
    }

    pub fn save(&self, session: &str, node: &str, iteration: u32, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let path = self.path(session, node, iteration);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
        Ok(path)
    }

    pub fn load(&self, session: &str, node: &str, iteration: u32) -> Result<NodeModel, ProposerError> {
        decode_checkpoint(&std::fs::read(self.path(session, node, iteration))?)
    }
}
