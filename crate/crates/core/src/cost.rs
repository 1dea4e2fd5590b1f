//! Human interaction time model.
//!
//! Total time is the sum of four linear terms in the number of processed
//! parts/shapes, each with a per-item rate that grows linearly with the
//! number of candidate labels `L`:
//!
//! ```text
//! t = Tv(P_v, L) + Tf(S_v, L) + Tv(Pc_m, L) + Tm(Pw_m, L)
//! Tv(n, L) = (0.31 + 0.03 L) n     checking a correctly labeled part
//! Tf(n, L) = (1.47 + 0.05 L) n     rejecting a shape in verification
//! Tm(n, L) = (5.28 + 0.23 L) n     editing a part label
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("negative count {0}")]
    NegativeCount(i64),
    #[error("label count must be at least 1")]
    NoLabels,
}

fn check(count: i64, labels: usize) -> Result<f64, CostError> {
    if count < 0 {
        return Err(CostError::NegativeCount(count));
    }
    if labels == 0 {
        return Err(CostError::NoLabels);
    }
    Ok(count as f64)
}

fn check_rate(labels: usize) -> f64 {
    0.31 + 0.03 * labels as f64
}

fn fail_rate(labels: usize) -> f64 {
    1.47 + 0.05 * labels as f64
}

fn edit_rate(labels: usize) -> f64 {
    5.28 + 0.23 * labels as f64
}

/// Seconds spent confirming `parts` correctly labeled parts.
pub fn t_verify_correct(parts: i64, labels: usize) -> Result<f64, CostError> {
    Ok(check_rate(labels) * check(parts, labels)?)
}

/// Seconds spent rejecting `shapes` shapes during verification.
pub fn t_verify_fail(shapes: i64, labels: usize) -> Result<f64, CostError> {
    Ok(fail_rate(labels) * check(shapes, labels)?)
}

/// Seconds spent editing `parts` part labels.
pub fn t_modify_wrong(parts: i64, labels: usize) -> Result<f64, CostError> {
    Ok(edit_rate(labels) * check(parts, labels)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    /// P_v: correct parts checked in verification.
    pub verify_correct_parts: u64,
    /// S_v: shapes rejected in verification.
    pub verify_failed_shapes: u64,
    /// P^c_m: parts checked but left unchanged (or auto-filled) in modification.
    pub modify_checked_parts: u64,
    /// P^w_m: parts whose label the user edited.
    pub modify_edited_parts: u64,
}

impl CostCounters {
    pub fn add(&mut self, other: &CostCounters) {
        self.verify_correct_parts += other.verify_correct_parts;
        self.verify_failed_shapes += other.verify_failed_shapes;
        self.modify_checked_parts += other.modify_checked_parts;
        self.modify_edited_parts += other.modify_edited_parts;
    }

    pub fn is_zero(&self) -> bool {
        *self == CostCounters::default()
    }
}

/// Counters for one labeling task with a fixed label count `L`. Seconds are
/// always derived from the counters, so a ledger is a pure function of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub label_count: usize,
    pub counters: CostCounters,
}

/// Seconds per term, as reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub verify_correct: f64,
    pub verify_fail: f64,
    pub modify_check: f64,
    pub modify_edit: f64,
    pub total: f64,
}

impl CostBreakdown {
    fn from_terms(verify_correct: f64, verify_fail: f64, modify_check: f64, modify_edit: f64) -> Self {
        CostBreakdown {
            verify_correct,
            verify_fail,
            modify_check,
            modify_edit,
            total: verify_correct + verify_fail + modify_check + modify_edit,
        }
    }
}

impl CostLedger {
    pub fn new(label_count: usize) -> Self {
        CostLedger {
            label_count,
            counters: CostCounters::default(),
        }
    }

    pub fn charge(&mut self, delta: &CostCounters) {
        self.counters.add(delta);
    }

    pub fn breakdown(&self) -> CostBreakdown {
        let l = self.label_count.max(1);
        let c = &self.counters;
        CostBreakdown::from_terms(
            check_rate(l) * c.verify_correct_parts as f64,
            fail_rate(l) * c.verify_failed_shapes as f64,
            check_rate(l) * c.modify_checked_parts as f64,
            edit_rate(l) * c.modify_edited_parts as f64,
        )
    }

    pub fn total_seconds(&self) -> f64 {
        self.breakdown().total
    }
}

/// Free-function form of the total for arbitrary counters.
pub fn total_time(ledger: &CostLedger) -> f64 {
    ledger.total_seconds()
}

/// Per-node ledgers of one session. Each node has its own `L`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionLedger {
    pub nodes: BTreeMap<String, CostLedger>,
}

impl SessionLedger {
    pub fn charge(&mut self, node: &str, label_count: usize, delta: &CostCounters) {
        self.nodes
            .entry(node.to_string())
            .or_insert_with(|| CostLedger::new(label_count))
            .charge(delta);
    }

    pub fn counters(&self) -> CostCounters {
        let mut c = CostCounters::default();
        for ledger in self.nodes.values() {
            c.add(&ledger.counters);
        }
        c
    }

    pub fn breakdown(&self) -> CostBreakdown {
        let mut terms = [0.0; 4];
        for ledger in self.nodes.values() {
            let b = ledger.breakdown();
            terms[0] += b.verify_correct;
            terms[1] += b.verify_fail;
            terms[2] += b.modify_check;
            terms[3] += b.modify_edit;
        }
        CostBreakdown::from_terms(terms[0], terms[1], terms[2], terms[3])
    }

    pub fn total_seconds(&self) -> f64 {
        self.breakdown().total
    }

    pub fn report(&self) -> CostReport {
        CostReport {
            nodes: self
                .nodes
                .iter()
                .map(|(id, l)| NodeCost {
                    node: id.clone(),
                    label_count: l.label_count,
                    counters: l.counters,
                    seconds: l.breakdown(),
                })
                .collect(),
            counters: self.counters(),
            seconds: self.breakdown(),
            hours: self.total_seconds() / 3600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: String,
    pub label_count: usize,
    pub counters: CostCounters,
    pub seconds: CostBreakdown,
}

/// Cost report JSON: per node and total breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub nodes: Vec<NodeCost>,
    pub counters: CostCounters,
    pub seconds: CostBreakdown,
    pub hours: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-9;

    #[test]
    fn single_item_rates() {
        assert!((t_verify_correct(1, 10).unwrap() - 0.61).abs() < TOL);
        assert!((t_verify_fail(1, 10).unwrap() - 1.97).abs() < TOL);
        assert!((t_modify_wrong(1, 10).unwrap() - 7.58).abs() < TOL);
    }

    #[test]
    fn zero_counts_cost_nothing() {
        assert_eq!(t_verify_correct(0, 7).unwrap(), 0.0);
        assert_eq!(t_verify_fail(0, 50).unwrap(), 0.0);
        assert_eq!(t_modify_wrong(0, 3).unwrap(), 0.0);
        assert_eq!(CostLedger::new(12).total_seconds(), 0.0);
    }

    #[test]
    fn hand_arithmetic() {
        assert!((t_verify_correct(100, 12).unwrap() - 67.0).abs() < TOL);
        assert!((t_verify_fail(5, 12).unwrap() - 10.35).abs() < TOL);
        assert!((t_modify_wrong(10, 12).unwrap() - 80.4).abs() < TOL);
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(t_verify_correct(-1, 3), Err(CostError::NegativeCount(-1)));
        assert_eq!(t_modify_wrong(1, 0), Err(CostError::NoLabels));
    }

    #[test]
    fn session_ledger_sums_node_ledgers() {
        let mut s = SessionLedger::default();
        let d = CostCounters {
            verify_correct_parts: 10,
            verify_failed_shapes: 1,
            modify_checked_parts: 2,
            modify_edited_parts: 3,
        };
        s.charge("a", 3, &d);
        s.charge("b", 5, &d);
        let expected = CostLedger { label_count: 3, counters: d }.total_seconds()
            + CostLedger { label_count: 5, counters: d }.total_seconds();
        assert!((s.total_seconds() - expected).abs() < TOL);
        assert_eq!(s.counters().verify_correct_parts, 20);
        let report = s.report();
        assert_eq!(report.nodes.len(), 2);
        assert_eq!(report.seconds.total, s.total_seconds());
    }
}
