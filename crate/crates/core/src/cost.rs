//! Step accounting and branching-gain decisions.
//!
//! Work is measured in solver step invocations. Each node carries three
//! counters: `fresh` (steps computed by the solver), `replay` (steps
//! re-executed from a checkpoint to reach a branch start) and `reused`
//! (steps satisfied by a stored suffix).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{NodeId, NodeStatus, ScenarioTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Fresh,
    Replay,
    Reused,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub fresh: u64,
    pub replay: u64,
    pub reused: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    nodes: BTreeMap<NodeId, NodeCost>,
}

impl CostLedger {
    pub fn register(&mut self, node: NodeId) {
        self.nodes.entry(node).or_default();
    }

    pub fn get(&self, node: NodeId) -> Result<NodeCost> {
        self.nodes.get(&node).copied().ok_or(Error::UnknownNode(node))
    }

    pub fn record_step(&mut self, node: NodeId, kind: StepKind) -> Result<&mut Self> {
        self.record_steps(node, kind, 1)
    }

    pub fn record_steps(&mut self, node: NodeId, kind: StepKind, count: u64) -> Result<&mut Self> {
        let c = self.nodes.get_mut(&node).ok_or(Error::UnknownNode(node))?;
        match kind {
            StepKind::Fresh => c.fresh += count,
            StepKind::Replay => c.replay += count,
            StepKind::Reused => c.reused += count,
        }
        Ok(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeCost)> + '_ {
        self.nodes.iter().map(|(k, v)| (*k, *v))
    }
}

/// True iff branching gives no gain over linear simulation: every
/// trajectory is equivalent both before and after the branch point.
pub fn branching_no_gain(prefix_classes: usize, suffix_classes: usize) -> Result<bool> {
    check_counts(prefix_classes, suffix_classes)?;
    Ok(prefix_classes == 1 && suffix_classes == 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// At least two non-equivalent trajectories after the branch point.
    #[serde(rename = "BranchSavesTime_CaseA")]
    BranchSavesTimeCaseA,
    /// Suffixes all equivalent but prefixes differ: store the suffix once.
    #[serde(rename = "BranchSavesTime_CaseB")]
    BranchSavesTimeCaseB,
    NoGain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchAdvice {
    pub verdict: Verdict,
    pub prefix_classes: usize,
    pub suffix_classes: usize,
}

pub fn branch_advice(prefix_classes: usize, suffix_classes: usize) -> Result<BranchAdvice> {
    check_counts(prefix_classes, suffix_classes)?;
    let verdict = if suffix_classes >= 2 {
        Verdict::BranchSavesTimeCaseA
    } else if prefix_classes >= 2 {
        Verdict::BranchSavesTimeCaseB
    } else {
        Verdict::NoGain
    };
    Ok(BranchAdvice { verdict, prefix_classes, suffix_classes })
}

fn check_counts(prefix: usize, suffix: usize) -> Result<()> {
    if prefix == 0 || suffix == 0 {
        return Err(Error::InvalidClassCount { prefix, suffix });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSavings {
    pub id: NodeId,
    pub fresh: u64,
    pub replay: u64,
    pub reused: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub steps_linear: u64,
    pub steps_branching: u64,
    pub ratio: f64,
    pub nodes: Vec<NodeSavings>,
}

/// Compares actual solver work against re-simulating every scenario from
/// its root's start step.
pub fn savings_report<'a>(
    trees: impl IntoIterator<Item = &'a ScenarioTree>,
    ledger: &CostLedger,
) -> Result<SavingsReport> {
    let mut steps_linear = 0;
    let mut steps_branching = 0;
    let mut nodes = Vec::new();
    for tree in trees {
        let root = tree.root().ok_or_else(|| Error::Config("tree without root".into()))?;
        let t0 = tree.get(root)?.window.start;
        for id in tree.scenario_ends() {
            let n = tree.get(id)?;
            if !matches!(n.status, NodeStatus::Complete | NodeStatus::Reused) {
                return Err(Error::TreeIncomplete(id));
            }
            steps_linear += n.window.end - t0;
        }
        for &id in tree.nodes.keys() {
            let c = ledger.get(id)?;
            steps_branching += c.fresh + c.replay;
            nodes.push(NodeSavings { id, fresh: c.fresh, replay: c.replay, reused: c.reused });
        }
    }
    let ratio = if steps_linear == 0 { 1.0 } else { steps_branching as f64 / steps_linear as f64 };
    Ok(SavingsReport { steps_linear, steps_branching, ratio, nodes })
}
