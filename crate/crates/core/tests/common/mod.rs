//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and a reason on failure.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use partlabel_core::audit::{replay_audit, Clock};
use partlabel_core::cost::{CostCounters, CostLedger};
use partlabel_core::dataset::{PreparationConfig, PreparedDataset, PreparedShape};
use partlabel_core::geometry::{SymmetryGroup, SymmetryGroups};
use partlabel_core::label_tree::NodeKind;
use partlabel_core::metrics::{miou, part_accuracy, LabeledPart};
use partlabel_core::oracle::{Oracle, OracleConfig};
use partlabel_core::proposer::baseline::{RandomProposer, UniformProposer};
use partlabel_core::proposer::builtin::{BuiltinProposer, ProposerConfig};
use partlabel_core::proposer::mlp::{softmax_in_place, Mlp, Schedule, Workspace};
use partlabel_core::proposer::{ground_truth_items, NodeSpec, Proposer};
use partlabel_core::scheduler::{symmetry_consistent, Aggregation, NodePhase, NodeState, SessionConfig, ShapeProposal};
use partlabel_core::session::{working_tree, Session, SessionOptions};
use partlabel_core::synthetic::{generate_dataset, Family, SyntheticConfig};
use partlabel_core::{PartId, ShapeId};

pub type Check = Result<String, String>;

// ---------------------------------------------------------------- cost

pub fn check_cost_exactness() -> Check {
    let ledger = CostLedger {
        label_count: 12,
        counters: CostCounters {
            verify_correct_parts: 100,
            verify_failed_shapes: 5,
            modify_checked_parts: 30,
            modify_edited_parts: 10,
        },
    };
    let b = ledger.breakdown();
    let expect = [
        ("verify_correct", b.verify_correct, 67.0),
        ("verify_fail", b.verify_fail, 10.35),
        ("modify_check", b.modify_check, 20.1),
        ("modify_edit", b.modify_edit, 80.4),
        ("total", partlabel_core::cost::total_time(&ledger), 177.85),
    ];
    for (name, got, want) in expect {
        if (got - want).abs() > 1e-9 {
            return Err(format!("{name}: {got} != {want}"));
        }
    }
    Ok(format!("total {:.2} s, terms 67.0/10.35/20.1/80.4", b.total))
}

// ------------------------------------------------------------ scheduler

/// One randomized node instance: shapes with parts, symmetry groups and
/// ground truth at a 3-child AND node.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: NodeSpec,
    pub parts: BTreeMap<ShapeId, Vec<PartId>>,
    pub groups: BTreeMap<ShapeId, SymmetryGroups>,
    pub truth: BTreeMap<ShapeId, Vec<String>>,
    pub config: SessionConfig,
    /// Chance that a symmetry group is proposed correctly.
    pub accuracy: f64,
    pub seed: u64,
}

pub fn random_instance(seed: u64, shapes: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let children: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut parts = BTreeMap::new();
    let mut groups = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for i in 0..shapes {
        let id = format!("s{i:02}");
        let n = rng.gen_range(1..=6u32);
        let ids: Vec<PartId> = (0..n).collect();
        // random partition into groups of consecutive ids
        let mut g = Vec::new();
        let mut start = 0;
        while start < n {
            let len = rng.gen_range(1..=(n - start).min(4));
            let members: Vec<PartId> = (start..start + len).collect();
            g.push(SymmetryGroup {
                representative: members[0],
                members,
            });
            start += len;
        }
        let mut labels = vec![String::new(); n as usize];
        for group in &g {
            let l = children.choose(&mut rng).unwrap();
            for &m in &group.members {
                labels[m as usize] = l.clone();
            }
        }
        parts.insert(id.clone(), ids);
        groups.insert(id.clone(), SymmetryGroups { groups: g });
        truth.insert(id, labels);
    }
    let pool_stop = *[0usize, 5, 12, 25, 40].choose(&mut rng).unwrap();
    let config = SessionConfig {
        pool_stop,
        modification_quota: *[3usize, 8, 20].choose(&mut rng).unwrap(),
        symmetry: rng.gen_bool(0.7),
        use_proposer: rng.gen_bool(0.9),
        ..SessionConfig::default()
    };
    Instance {
        spec: NodeSpec {
            id: "node".into(),
            kind: NodeKind::And,
            children,
        },
        parts,
        groups,
        truth,
        config,
        accuracy: rng.gen_range(0.2..0.95),
        seed,
    }
}

/// Deterministic proposals for `pool` at `iteration`. Confidences are
/// quantized so ties occur.
pub fn instance_proposals(inst: &Instance, iteration: u32, pool: &[ShapeId]) -> Vec<ShapeProposal> {
    pool.iter()
        .map(|s| {
            if !inst.config.use_proposer {
                return ShapeProposal {
                    shape: s.clone(),
                    labels: None,
                    confidence: 0.0,
                    symmetric_consistent: false,
                };
            }
            let key = partlabel_core::dataset::stable_hash(format!("{s}/{iteration}").as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ key);
            let truth = &inst.truth[s];
            let mut labels = truth.clone();
            for group in &inst.groups[s].groups {
                if !rng.gen_bool(inst.accuracy) {
                    for &m in &group.members {
                        labels[m as usize] = inst.spec.children.choose(&mut rng).unwrap().clone();
                    }
                }
            }
            let confidence = (rng.gen_range(0..20) as f64) / 20.0;
            let consistent = symmetry_consistent(&inst.parts[s], &labels, &inst.groups[s]);
            ShapeProposal {
                shape: s.clone(),
                labels: Some(labels),
                confidence,
                symmetric_consistent: consistent,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    pub pool_stopped: bool,
    pub batches: Vec<Vec<ShapeId>>,
    pub verdicts: Vec<Vec<bool>>,
    pub modified: Vec<ShapeId>,
}

fn passes(inst: &Instance, proposal: &ShapeProposal) -> bool {
    proposal.labels.as_ref() == Some(&inst.truth[&proposal.shape])
}

/// Runs the node state machine over an instance with a perfect annotator.
pub fn drive_node(inst: &Instance) -> Result<Vec<IterationTrace>, String> {
    let cfg = &inst.config;
    let mut node = NodeState::new(inst.spec.clone(), inst.parts.clone());
    let mut traces: Vec<IterationTrace> = Vec::new();
    for _ in 0..100_000 {
        match node.phase {
            NodePhase::Proposing => {
                let pool: Vec<ShapeId> = node.pool().map(|(s, _)| s.clone()).collect();
                let props = instance_proposals(inst, node.iteration, &pool);
                node.apply_proposals(&props, cfg).map_err(|e| e.to_string())?;
                traces.push(IterationTrace {
                    pool_stopped: node.pool_stopped,
                    ..Default::default()
                });
            }
            NodePhase::Verifying => {
                let batch = node.next_batch(cfg);
                let verdicts: Vec<(ShapeId, bool)> =
                    batch.iter().map(|s| (s.clone(), passes(inst, &node.proposals[s]))).collect();
                node.apply_verdicts(&verdicts, cfg).map_err(|e| e.to_string())?;
                let t = traces.last_mut().unwrap();
                t.verdicts.push(verdicts.iter().map(|v| v.1).collect());
                t.batches.push(batch);
            }
            NodePhase::Modifying => {
                let shape = node.modification_queue.front().unwrap().clone();
                node.apply_modification(&shape, &inst.truth[&shape]).map_err(|e| e.to_string())?;
                traces.last_mut().unwrap().modified.push(shape);
            }
            NodePhase::Training => node.apply_finetune().map_err(|e| e.to_string())?,
            NodePhase::Completing => return Ok(traces),
        }
    }
    Err("node did not complete".into())
}

/// Straight-line restatement of the selection rules, independent of the
/// state machine.
pub fn reference_node(inst: &Instance) -> Vec<IterationTrace> {
    let cfg = &inst.config;
    let mut confirmed: BTreeSet<ShapeId> = BTreeSet::new();
    let mut failures: BTreeMap<ShapeId, u32> = inst.parts.keys().map(|s| (s.clone(), 0)).collect();
    let mut traces = Vec::new();
    let mut iteration = 0;
    loop {
        let pool: Vec<ShapeId> = inst.parts.keys().filter(|s| !confirmed.contains(*s)).cloned().collect();
        let props: BTreeMap<ShapeId, ShapeProposal> = instance_proposals(inst, iteration, &pool)
            .into_iter()
            .map(|p| (p.shape.clone(), p))
            .collect();
        let conf = |s: &ShapeId| props[s].confidence;
        let mut t = IterationTrace::default();
        if pool.len() < cfg.pool_stop {
            t.pool_stopped = true;
            let mut order = pool.clone();
            order.sort_by(|a, b| conf(a).total_cmp(&conf(b)).then(a.cmp(b)));
            t.modified = order;
            traces.push(t);
            return traces;
        }
        let eligible = |s: &ShapeId| props[s].labels.is_some() && (!cfg.symmetry || props[s].symmetric_consistent);
        let mut hc: Vec<ShapeId> = pool.iter().filter(|s| eligible(s)).cloned().collect();
        hc.sort_by(|a, b| conf(b).total_cmp(&conf(a)).then(a.cmp(b)));
        let mut lc: Vec<ShapeId> = pool.iter().filter(|s| !eligible(s)).cloned().collect();
        let mut verified = 0;
        let mut i = 0;
        while i < hc.len() {
            let end = (i + cfg.batch_size).min(hc.len());
            let batch = hc[i..end].to_vec();
            let verdicts: Vec<bool> = batch.iter().map(|s| passes(inst, &props[s])).collect();
            let n_pass = verdicts.iter().filter(|v| **v).count();
            for (s, &ok) in batch.iter().zip(&verdicts) {
                if ok {
                    confirmed.insert(s.clone());
                } else {
                    *failures.get_mut(s).unwrap() += 1;
                }
            }
            verified += n_pass;
            i = end;
            let full = batch.len() == cfg.batch_size;
            t.batches.push(batch);
            t.verdicts.push(verdicts);
            if full && n_pass < cfg.verify_stop_threshold {
                lc.extend(hc[i..].iter().cloned());
                break;
            }
        }
        lc.sort_by(|a, b| conf(a).total_cmp(&conf(b)).then(a.cmp(b)));
        let mut mods: Vec<ShapeId> = lc.into_iter().take(cfg.modification_quota).collect();
        for s in &pool {
            if !confirmed.contains(s) && failures[s] > cfg.failure_cap && !mods.contains(s) {
                mods.push(s.clone());
            }
        }
        if mods.is_empty() && verified == 0 {
            let mut rest: Vec<&ShapeId> = pool.iter().filter(|s| !confirmed.contains(*s)).collect();
            rest.sort_by(|a, b| conf(a).total_cmp(&conf(b)).then(a.cmp(b)));
            mods.extend(rest.first().map(|s| (*s).clone()));
        }
        confirmed.extend(mods.iter().cloned());
        t.modified = mods;
        traces.push(t);
        if confirmed.len() == inst.parts.len() {
            return traces;
        }
        iteration += 1;
    }
}

/// Rule-level assertions on a trace, beyond equality with the reference.
fn check_rules(inst: &Instance, traces: &[IterationTrace]) -> Result<(), String> {
    let cfg = &inst.config;
    for (it, t) in traces.iter().enumerate() {
        for (k, (batch, verdicts)) in t.batches.iter().zip(&t.verdicts).enumerate() {
            let n_pass = verdicts.iter().filter(|v| **v).count();
            let stops = batch.len() == cfg.batch_size && n_pass < cfg.verify_stop_threshold;
            let last = k + 1 == t.batches.len();
            if stops && !last {
                return Err(format!("iteration {it}: verification continued after a stopping batch"));
            }
            if cfg.symmetry && cfg.use_proposer {
                for s in batch {
                    let p = instance_proposals(inst, it as u32, std::slice::from_ref(s)).remove(0);
                    if !p.symmetric_consistent {
                        return Err(format!("iteration {it}: symmetry-inconsistent `{s}` was verified"));
                    }
                }
            }
        }
        if t.pool_stopped && !t.batches.is_empty() {
            return Err(format!("iteration {it}: pool-stopped node still verified"));
        }
    }
    Ok(())
}

pub fn check_scheduler(instances: usize, seed: u64) -> Check {
    let mut iterations = 0;
    let mut stops = 0;
    let mut pool_stops = 0;
    for i in 0..instances {
        let inst = random_instance(seed.wrapping_add(i as u64), 30);
        let got = drive_node(&inst).map_err(|e| format!("instance {i}: {e}"))?;
        let want = reference_node(&inst);
        if got != want {
            return Err(format!(
                "instance {i} (seed {}): state machine diverges from reference\n got {got:?}\nwant {want:?}",
                inst.seed
            ));
        }
        check_rules(&inst, &got).map_err(|e| format!("instance {i}: {e}"))?;
        iterations += got.len();
        pool_stops += got.iter().filter(|t| t.pool_stopped).count();
        stops += got
            .iter()
            .filter(|t| {
                t.batches.last().zip(t.verdicts.last()).is_some_and(|(b, v)| {
                    b.len() == inst.config.batch_size && v.iter().filter(|x| **x).count() < inst.config.verify_stop_threshold
                })
            })
            .count();
    }
    Ok(format!(
        "{instances} instances, {iterations} iterations, {stops} adaptive stops, {pool_stops} pool stops"
    ))
}

// ------------------------------------------------------------ sessions

pub fn small_dataset(family: Family, shapes: usize, seed: u64, prefix: &str) -> PreparedDataset {
    generate_dataset(
        &SyntheticConfig {
            family,
            shapes,
            seed,
            density: 400.0,
            id_prefix: prefix.to_string(),
            ..Default::default()
        },
        &PreparationConfig {
            points_per_shape: 256,
            seed,
            ..Default::default()
        },
    )
    .expect("synthetic data is valid")
}

pub fn run_simulated(
    tree: &partlabel_core::label_tree::LabelTree,
    shapes: &[Arc<PreparedShape>],
    config: SessionConfig,
    proposer: Box<dyn Proposer>,
    oracle: OracleConfig,
    audit: Option<std::path::PathBuf>,
) -> Result<Session, String> {
    let options = SessionOptions {
        id: "sim".into(),
        dataset: "synthetic".into(),
        config,
        clock: Clock::Simulated,
        audit_path: audit,
        ..Default::default()
    };
    let mut session = Session::start(options, tree, shapes, proposer).map_err(|e| e.to_string())?;
    let mut oracle = Oracle::for_session(&session, oracle)?;
    session.run(&mut oracle).map_err(|e| e.to_string())?;
    Ok(session)
}

/// Every labeled part: the final label descends from every label confirmed
/// for it on the way down, and is a leaf.
pub fn consistency_violations(session: &Session) -> Result<usize, String> {
    let state = session.state();
    let tree = state.tree.as_ref().ok_or("not started")?;
    let mut violations = 0;
    for (shape, parts) in &state.shapes {
        let paths = state.paths.get(shape);
        for part in parts {
            let Some(path) = paths.and_then(|p| p.get(part)) else {
                violations += 1;
                continue;
            };
            let Some(last) = path.last() else {
                violations += 1;
                continue;
            };
            if !tree.is_leaf(last).unwrap_or(false) {
                violations += 1;
            }
            for label in path {
                if !tree.is_descendant(last, label).unwrap_or(false) {
                    violations += 1;
                }
            }
        }
    }
    Ok(violations)
}

pub fn random_fuzz_config(rng: &mut ChaCha8Rng) -> SessionConfig {
    let batch_size = rng.gen_range(1..=10);
    SessionConfig {
        batch_size,
        verify_stop_threshold: rng.gen_range(0..=batch_size),
        modification_quota: rng.gen_range(1..=20),
        failure_cap: rng.gen_range(0..=3),
        pool_stop: *[0usize, 2, 4, 40].choose(rng).unwrap(),
        symmetry: rng.gen_bool(0.5),
        hierarchical: rng.gen_bool(0.8),
        use_proposer: rng.gen_bool(0.9),
        aggregation: *[Aggregation::Min, Aggregation::Mean, Aggregation::Product].choose(rng).unwrap(),
        seed: rng.gen(),
    }
}

pub fn check_consistency_fuzz(sessions: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_violations = 0;
    let mut parts = 0;
    for i in 0..sessions {
        let family = *[Family::Chair, Family::Table, Family::Lamp].choose(&mut rng).unwrap();
        let n = rng.gen_range(3..=10);
        let data = small_dataset(family, n, rng.gen(), &format!("f{i}"));
        let config = random_fuzz_config(&mut rng);
        let proposer: Box<dyn Proposer> = if rng.gen_bool(0.8) {
            Box::new(RandomProposer::new(rng.gen()))
        } else {
            Box::new(UniformProposer)
        };
        let oracle = OracleConfig {
            error_rate: *[0.0, 0.1, 0.3].choose(&mut rng).unwrap(),
            seed: rng.gen(),
        };
        let session = run_simulated(&data.tree, &data.shapes, config.clone(), proposer, oracle, None)
            .map_err(|e| format!("session {i} ({config:?}): {e}"))?;
        if !session.is_complete() {
            return Err(format!("session {i} did not complete"));
        }
        let v = consistency_violations(&session)?;
        if v > 0 {
            return Err(format!("session {i} ({config:?}): {v} violations"));
        }
        total_violations += v;
        parts += data.shapes.iter().map(|s| s.parts.len()).sum::<usize>();
    }
    Ok(format!("{sessions} sessions, {parts} parts, {total_violations} violations"))
}

// -------------------------------------------------------------- metrics

/// Point-by-point confusion matrix: mIoU over labels with non-empty union
/// and part accuracy.
pub fn brute_force_metrics(parts: &[(String, String, usize)]) -> (f64, f64) {
    let labels: BTreeSet<&str> = parts.iter().flat_map(|(p, t, _)| [p.as_str(), t.as_str()]).collect();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let k = labels.len();
    // confusion[truth][pred], one increment per point
    let mut confusion = vec![vec![0u64; k]; k];
    for (pred, truth, n) in parts {
        for _ in 0..*n {
            confusion[index[truth.as_str()]][index[pred.as_str()]] += 1;
        }
    }
    let mut ious = Vec::new();
    for l in 0..k {
        let inter = confusion[l][l];
        let truth_total: u64 = confusion[l].iter().sum();
        let pred_total: u64 = confusion.iter().map(|row| row[l]).sum();
        let union = truth_total + pred_total - inter;
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    let correct = parts.iter().filter(|(p, t, _)| p == t).count();
    (correct as f64 / parts.len() as f64, miou)
}

pub fn check_metrics(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet = ["A", "B", "C", "D", "E"];
    for i in 0..instances {
        let n = rng.gen_range(1..=12);
        let k = rng.gen_range(1..=alphabet.len());
        let parts: Vec<(String, String, usize)> = (0..n)
            .map(|_| {
                (
                    alphabet[rng.gen_range(0..k)].to_string(),
                    alphabet[rng.gen_range(0..k)].to_string(),
                    rng.gen_range(0..=30),
                )
            })
            .collect();
        let rows: Vec<LabeledPart<'_>> = parts
            .iter()
            .map(|(p, t, n)| LabeledPart {
                predicted: p,
                truth: t,
                points: *n,
            })
            .collect();
        let (acc, m) = brute_force_metrics(&parts);
        let got_acc = part_accuracy(&rows).map_err(|e| e.to_string())?;
        let (got_m, _) = miou(&rows).map_err(|e| e.to_string())?;
        if got_acc != acc || got_m != m {
            return Err(format!("instance {i}: accuracy {got_acc} vs {acc}, mIoU {got_m} vs {m}"));
        }
    }
    // hand example: A never predicted, B half right
    let hand = [
        LabeledPart {
            predicted: "B",
            truth: "A",
            points: 10,
        },
        LabeledPart {
            predicted: "B",
            truth: "B",
            points: 10,
        },
    ];
    let (m, per) = miou(&hand).map_err(|e| e.to_string())?;
    if m != 0.25 || per.get("A") != Some(&0.0) || per.get("B") != Some(&0.5) {
        return Err(format!("hand example: mIoU {m}, per-label {per:?}"));
    }
    Ok(format!("{instances} random instances exact, hand example mIoU 0.25"))
}

// ------------------------------------------------------------- numerics

/// Largest relative error between analytic and central-difference
/// gradients over random small classifier heads.
pub fn gradient_check(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let input = rng.gen_range(2..8);
        let classes = rng.gen_range(2..5);
        let mut mlp = Mlp::new(input, &[rng.gen_range(3..8), rng.gen_range(3..8)], classes, seed + t as u64);
        // nonzero biases keep pre-activations off the ReLU kink at exactly 0,
        // where the derivative is undefined
        for p in mlp.params.iter_mut() {
            *p += rng.gen_range(-0.2..0.2);
        }
        let n = rng.gen_range(1..6);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..input).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut grad = vec![0.0; mlp.params.len()];
        let mut ws = Workspace::default();
        mlp.loss_and_grad(&refs, &ys, &mut grad, &mut ws);
        // about cbrt(eps): balances truncation against cancellation error
        let h = 1e-5;
        for (k, &analytic) in grad.iter().enumerate() {
            let mut plus = mlp.clone();
            plus.params[k] += h;
            let mut minus = mlp.clone();
            minus.params[k] -= h;
            let numeric = (plus.loss(&refs, &ys) - minus.loss(&refs, &ys)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            // absolute floor for parameters with (near-)zero gradient
            let err = if scale < 1e-7 { (analytic - numeric).abs() } else { (analytic - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

/// Largest deviation of a softmax sum from 1 over random logits, including
/// extreme magnitudes; `Err` on any negative or non-finite output.
pub fn softmax_check(trials: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(1..20);
        let scale = *[1.0, 50.0, 800.0].choose(&mut rng).unwrap();
        let mut z: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        softmax_in_place(&mut z);
        if z.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(format!("bad softmax output {z:?}"));
        }
        worst = worst.max((z.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(worst)
}

pub fn quick_proposer_config(seed: u64) -> ProposerConfig {
    ProposerConfig {
        pretrain: Schedule {
            epochs: 30,
            learning_rate: 0.001,
            decay: 0.8,
            decay_every: 25,
        },
        seed,
        ..ProposerConfig::default()
    }
}

/// Compares predictions with `p_max = 150` against `p_max` equal to the
/// routed part count, bit for bit, at every node of a trained proposer.
pub fn padding_check(seed: u64) -> Result<usize, String> {
    let data = small_dataset(Family::Chair, 24, seed, "pad");
    let tree = working_tree(&data.tree, true);
    let proposer = BuiltinProposer::pretrain(&tree, &data.shapes, quick_proposer_config(seed)).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for node in tree.internal_nodes() {
        let spec = NodeSpec::from_tree(&tree, node).map_err(|e| e.to_string())?;
        for item in ground_truth_items(&tree, &spec, &data.shapes) {
            let padded = proposer
                .distributions_with_pmax(&spec, &item.shape, &item.parts, 150)
                .map_err(|e| e.to_string())?;
            let exact = proposer
                .distributions_with_pmax(&spec, &item.shape, &item.parts, item.parts.len())
                .map_err(|e| e.to_string())?;
            let same = padded.len() == exact.len()
                && padded
                    .iter()
                    .flatten()
                    .zip(exact.iter().flatten())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("node {node}, shape {}: padded and exact predictions differ", item.shape.id));
            }
            compared += 1;
        }
    }
    Ok(compared)
}

pub fn check_numerics() -> Check {
    let grad = gradient_check(25, 11);
    if grad > 1e-4 {
        return Err(format!("gradient relative error {grad:e} > 1e-4"));
    }
    let soft = softmax_check(2000, 12)?;
    if soft > 1e-6 {
        return Err(format!("softmax sum off by {soft:e}"));
    }
    let padded = padding_check(13)?;
    Ok(format!(
        "gradient rel err {grad:.1e}, softmax err {soft:.1e}, {padded} padded subsets bit-identical"
    ))
}

// ---------------------------------------------------------------- audit

pub fn check_audit_determinism(seed: u64) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = small_dataset(Family::Chair, 20, seed, "train");
    let test = small_dataset(Family::Chair, 60, seed + 1, "test");
    let config = SessionConfig {
        seed,
        ..SessionConfig::default()
    };
    let mut logs = Vec::new();
    let mut ledgers = Vec::new();
    for run in 0..2 {
        let tree = working_tree(&train.tree, true);
        let proposer = BuiltinProposer::pretrain(&tree, &train.shapes, quick_proposer_config(seed)).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{run}.jsonl"));
        let oracle = OracleConfig {
            error_rate: 0.05,
            seed,
        };
        let session = run_simulated(&test.tree, &test.shapes, config.clone(), Box::new(proposer), oracle, Some(path.clone()))?;
        let replayed = replay_audit(&path).map_err(|e| e.to_string())?;
        if &replayed != session.state() {
            return Err(format!("run {run}: replayed state differs from live state"));
        }
        if replayed.ledger.total_seconds().to_bits() != session.state().ledger.total_seconds().to_bits() {
            return Err(format!("run {run}: replayed ledger total differs"));
        }
        ledgers.push(replayed.ledger);
        logs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    if logs[0] != logs[1] {
        return Err("audit logs of identical runs differ".into());
    }
    let lines = logs[0].iter().filter(|b| **b == b'\n').count();
    Ok(format!(
        "{lines} events byte-identical across runs, replayed ledger {:.1} s exact",
        ledgers[0].total_seconds()
    ))
}
