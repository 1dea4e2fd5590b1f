use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeItem, NodeSpec, Proposal, Proposer, ProposerError, TrainingJob, TrainingProgress};
use crate::dataset::stable_hash;
use crate::label_tree::NodeKind;

fn vectors_needed(node: &NodeSpec, item: &NodeItem) -> usize {
    match node.kind {
        NodeKind::And => item.parts.len(),
        NodeKind::Or => 1,
    }
}

/// Uniform distributions everywhere; argmax falls on the first child.
#[derive(Debug, Clone, Default)]
pub struct UniformProposer;

impl Proposer for UniformProposer {
    fn name(&self) -> &str {
        "uniform"
    }

    fn propose(&self, node: &NodeSpec, items: &[NodeItem]) -> Result<Vec<Proposal>, ProposerError> {
        let c = node.children.len();
        items
            .iter()
            .map(|item| {
                let dist = vec![vec![1.0 / c as f64; c]; vectors_needed(node, item)];
                Proposal::from_distributions(node, &item.shape.id, item.parts.clone(), dist)
            })
            .collect()
    }

    fn finetune(&mut self, _job: &TrainingJob, _progress: &TrainingProgress) -> Result<(), ProposerError> {
        Ok(())
    }
}

/// Uniform-random distributions, reseeded after every fine-tuning call so
/// successive iterations see fresh noise. Deterministic given the seed.
#[derive(Debug, Clone)]
pub struct RandomProposer {
    seed: u64,
    round: u64,
}

impl RandomProposer {
    pub fn new(seed: u64) -> Self {
        RandomProposer { seed, round: 0 }
    }

    /// The state after `round` fine-tuning calls, for resuming from a log.
    pub fn at_round(seed: u64, round: u64) -> Self {
        RandomProposer { seed, round }
    }
}

impl Proposer for RandomProposer {
    fn name(&self) -> &str {
        "random"
    }

    fn propose(&self, node: &NodeSpec, items: &[NodeItem]) -> Result<Vec<Proposal>, ProposerError> {
        let c = node.children.len();
        items
            .iter()
            .map(|item| {
                let key = stable_hash(format!("{}/{}/{}", node.id, item.shape.id, self.round).as_bytes());
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key);
                let dist = (0..vectors_needed(node, item))
                    .map(|_| {
                        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                        let sum: f64 = raw.iter().sum();
                        raw.into_iter().map(|v| v / sum).collect()
                    })
                    .collect();
                Proposal::from_distributions(node, &item.shape.id, item.parts.clone(), dist)
            })
            .collect()
    }

    fn finetune(&mut self, _job: &TrainingJob, _progress: &TrainingProgress) -> Result<(), ProposerError> {
        self.round += 1;
        Ok(())
    }
}
