//! The five-row ablation: each row is a config switch over one simulated
//! session with a zero-error oracle.

use std::collections::BTreeSet;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::CostCounters;
use crate::dataset::{PreparationConfig, PreparedDataset, PreparedShape};
use crate::label_tree::LabelTree;
use crate::oracle::{Oracle, OracleConfig};
use crate::proposer::baseline::UniformProposer;
use crate::proposer::builtin::{BuiltinProposer, ProposerConfig};
use crate::proposer::Proposer;
use crate::scheduler::{ConfirmedVia, SessionConfig};
use crate::session::{working_tree, NodeSummary, Session, SessionError, SessionOptions};
use crate::synthetic::{generate_dataset, Family, SyntheticConfig};
use crate::ShapeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    /// Every part labeled by hand, no proposals.
    ModifyEverything,
    /// Flat proposals, every shape sent to modification.
    ProposerModifyAll,
    /// Flat active labeling with symmetry.
    FlatActive,
    /// Hierarchical active labeling without symmetry.
    NoSym,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::ModifyEverything,
        AblationRow::ProposerModifyAll,
        AblationRow::FlatActive,
        AblationRow::NoSym,
        AblationRow::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationRow::ModifyEverything => "modify-everything",
            AblationRow::ProposerModifyAll => "proposer+modify-all",
            AblationRow::FlatActive => "flat-active",
            AblationRow::NoSym => "no-sym",
            AblationRow::Full => "full",
        }
    }

    pub fn config(&self, base: &SessionConfig) -> SessionConfig {
        let mut c = base.clone();
        match self {
            AblationRow::ModifyEverything => {
                c.use_proposer = false;
                c.hierarchical = false;
                c.symmetry = false;
                c.pool_stop = usize::MAX;
            }
            AblationRow::ProposerModifyAll => {
                c.hierarchical = false;
                c.symmetry = false;
                c.pool_stop = usize::MAX;
            }
            AblationRow::FlatActive => {
                c.hierarchical = false;
                c.symmetry = true;
            }
            AblationRow::NoSym => {
                c.hierarchical = true;
                c.symmetry = false;
            }
            AblationRow::Full => {
                c.hierarchical = true;
                c.symmetry = true;
            }
        }
        c
    }

    /// Parses row names; an empty list means all rows.
    pub fn from_grid(grid: &[String]) -> Result<Vec<AblationRow>, String> {
        if grid.is_empty() {
            return Ok(Self::ALL.to_vec());
        }
        grid.iter().map(|g| g.parse()).collect()
    }
}

impl FromStr for AblationRow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationRow::ALL
            .iter()
            .find(|r| r.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown ablation row `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seed: u64,
    pub hours: f64,
    pub counters: CostCounters,
    pub part_accuracy: f64,
    pub miou: f64,
    pub nodes: Vec<NodeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub family: Family,
    pub train_shapes: usize,
    pub test_shapes: usize,
    pub points_per_shape: usize,
    pub symmetric_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            family: Family::Chair,
            train_shapes: 50,
            test_shapes: 200,
            points_per_shape: 2048,
            symmetric_fraction: 0.8,
        }
    }
}

/// Disjoint pretraining and labeling sets for one seed.
pub fn benchmark_datasets(config: &BenchmarkConfig, seed: u64) -> Result<(PreparedDataset, PreparedDataset), String> {
    let prep = PreparationConfig {
        points_per_shape: config.points_per_shape,
        seed,
        ..Default::default()
    };
    let make = |prefix: &str, shapes: usize, s: u64| {
        generate_dataset(
            &SyntheticConfig {
                family: config.family,
                shapes,
                seed: s,
                symmetric_fraction: config.symmetric_fraction,
                id_prefix: format!("{}_{prefix}", config.family.name()),
                ..Default::default()
            },
            &prep,
        )
        .map_err(|e| e.to_string())
    };
    Ok((
        make("train", config.train_shapes, seed)?,
        make("test", config.test_shapes, seed.wrapping_add(1_000_003))?,
    ))
}

/// Runs one simulated session to completion and summarizes it.
pub fn simulate(
    id: &str,
    tree: &LabelTree,
    shapes: &[Arc<PreparedShape>],
    config: SessionConfig,
    proposer: Box<dyn Proposer>,
    oracle: OracleConfig,
) -> Result<Session, SessionError> {
    let options = SessionOptions {
        id: id.to_string(),
        dataset: "synthetic".into(),
        config,
        clock: crate::audit::Clock::Simulated,
        ..Default::default()
    };
    let mut session = Session::start(options, tree, shapes, proposer)?;
    let mut annotator = Oracle::for_session(&session, oracle).map_err(SessionError::Invalid)?;
    session.run(&mut annotator)?;
    Ok(session)
}

/// Runs the selected rows for one seed. Flat and hierarchical proposers are
/// pretrained once each on the training set and cloned per row.
pub fn run_ablation(
    rows: &[AblationRow],
    train: &PreparedDataset,
    test: &PreparedDataset,
    seed: u64,
    proposer: &ProposerConfig,
    base: &SessionConfig,
) -> Result<Vec<AblationResult>, String> {
    let pcfg = ProposerConfig {
        seed,
        ..proposer.clone()
    };
    let mut flat: Option<BuiltinProposer> = None;
    let mut hier: Option<BuiltinProposer> = None;
    let mut out = Vec::new();
    for &row in rows {
        let config = SessionConfig {
            seed,
            ..row.config(base)
        };
        let model: Box<dyn Proposer> = if !config.use_proposer {
            Box::new(UniformProposer)
        } else {
            let slot = if config.hierarchical { &mut hier } else { &mut flat };
            if slot.is_none() {
                let tree = working_tree(&train.tree, config.hierarchical);
                *slot = Some(BuiltinProposer::pretrain(&tree, &train.shapes, pcfg.clone()).map_err(|e| e.to_string())?);
            }
            Box::new(slot.clone().expect("pretrained above"))
        };
        let session = simulate(row.name(), &test.tree, &test.shapes, config, model, OracleConfig::default())
            .map_err(|e| format!("{}: {e}", row.name()))?;
        let report = session.report();
        let eval = report.evaluation.as_ref().ok_or("session did not complete")?;
        out.push(AblationResult {
            row,
            seed,
            hours: report.cost.hours,
            counters: report.cost.counters,
            part_accuracy: eval.part_accuracy,
            miou: eval.miou,
            nodes: report.nodes.clone(),
        });
    }
    Ok(out)
}

/// First-iteration comparison for one seed: for every non-root internal
/// node of the hierarchical run, shapes verified in its first iteration
/// versus shapes of that node verified in the flat run's first iteration.
/// Both slices are node summaries in completion order (root first).
/// Returns `(node, hierarchical, flat)`.
pub fn first_iteration_comparison(hier: &[NodeSummary], flat: &[NodeSummary]) -> Vec<(String, usize, usize)> {
    let (Some(hier_root), Some(flat_root)) = (hier.first(), flat.first()) else {
        return Vec::new();
    };
    let flat_first: BTreeSet<&ShapeId> = flat_root
        .confirmed
        .iter()
        .filter(|(_, c)| c.iteration == 0 && c.via == ConfirmedVia::Verified)
        .map(|(s, _)| s)
        .collect();
    hier.iter()
        .filter(|n| n.node != hier_root.node)
        .map(|n| {
            let h = n.verified_per_iteration.first().copied().unwrap_or(0);
            let f = n.confirmed.keys().filter(|s| flat_first.contains(s)).count();
            (n.node.clone(), h, f)
        })
        .collect()
}
