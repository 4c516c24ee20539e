//! Scenario configuration documents and the batch workflows built on them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{branch_advice, BranchAdvice, SavingsReport};
use crate::engine::{Engine, RunRequest, RunTreeOutcome};
use crate::equivalence::{partition_classes, trajectory_digest, EquivalenceClass, ObservationSpec};
use crate::error::{Error, Result};
use crate::history::History;
use crate::sim::{init_state, ParamOverrides, ParamSet, SimulatorSpec};
use crate::store::{Digest, DEFAULT_CHECKPOINT_INTERVAL};
use crate::tree::{Annotation, NodeId, NodeStatus, Violation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredBranch {
    pub at_step: u64,
    #[serde(default)]
    pub overrides: ParamOverrides,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectionConfig {
    #[serde(default)]
    pub node: Option<NodeId>,
    pub from_step: u64,
    pub to_step: u64,
    #[serde(default)]
    pub overrides: ParamOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrospectionConfig {
    #[serde(default)]
    pub node: Option<NodeId>,
    pub at_step: u64,
    #[serde(default)]
    pub overrides: ParamOverrides,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub spec: SimulatorSpec,
    pub params: ParamSet,
    #[serde(default)]
    pub seeds: BTreeMap<usize, f64>,
    pub horizon: u64,
    #[serde(default)]
    pub branches: Vec<DeclaredBranch>,
    #[serde(default)]
    pub observation: ObservationSpec,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: u64,
    #[serde(default = "default_workers")]
    pub max_workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrospection: Option<RetrospectionConfig>,
}

fn default_interval() -> u64 {
    DEFAULT_CHECKPOINT_INTERVAL
}

fn default_workers() -> usize {
    1
}

impl ScenarioConfig {
    /// Parses and validates a JSON config. Parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.params.check(&self.spec)?;
        self.observation.check(&self.spec)?;
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        if self.max_workers == 0 {
            return Err(Error::InvalidWorkerCount);
        }
        for b in &self.branches {
            if b.at_step > self.horizon {
                return Err(Error::Config(format!("branch at {} beyond horizon {}", b.at_step, self.horizon)));
            }
            b.overrides.apply(&self.params)?.check(&self.spec)?;
            b.annotations.iter().try_for_each(Annotation::check)?;
        }
        if let Some(r) = &self.retrospection {
            r.annotations.iter().try_for_each(Annotation::check)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    pub root: NodeId,
    pub branches: Vec<NodeId>,
    pub run: RunTreeOutcome,
}

/// Creates the root, simulates it up to the last declared branch point,
/// attaches every declared branch and runs the tree to the horizon.
pub fn predict(engine: &Engine, cfg: &ScenarioConfig) -> Result<PredictOutcome> {
    let root = create_simulation(engine, cfg)?;
    develop(engine, cfg, root)
}

/// Validates `cfg` and adds its root to `engine` without stepping.
pub fn create_simulation(engine: &Engine, cfg: &ScenarioConfig) -> Result<NodeId> {
    cfg.validate()?;
    if cfg.checkpoint_interval != engine.checkpoint_interval() {
        return Err(Error::Config(format!(
            "checkpoint_interval {} differs from the store's {}",
            cfg.checkpoint_interval,
            engine.checkpoint_interval()
        )));
    }
    let initial = init_state(&cfg.spec, &cfg.seeds)?;
    engine.create_root(&cfg.spec, cfg.params.clone(), &initial)
}

/// The stepping half of [`predict`] for a root made by [`create_simulation`].
pub fn develop(engine: &Engine, cfg: &ScenarioConfig, root: NodeId) -> Result<PredictOutcome> {
    let prefix_end = cfg.branches.iter().map(|b| b.at_step).max().unwrap_or(cfg.horizon);
    if prefix_end > 0 {
        engine.run(RunRequest { node: root, until_step: prefix_end, incremental: true })?;
    }
    let mut branches = Vec::new();
    for b in &cfg.branches {
        let id = engine.branch_at(root, b.at_step, b.overrides.clone())?.id();
        for a in &b.annotations {
            engine.annotate(id, a.kind, a.text.clone())?;
        }
        branches.push(id);
    }
    let run = engine.run_tree(cfg.horizon, cfg.max_workers)?;
    Ok(PredictOutcome { root, branches, run })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectOutcome {
    pub node: NodeId,
    pub reflected: NodeId,
    pub window: (u64, u64),
    pub original_digest: Digest,
    pub reflected_digest: Digest,
    pub unchanged: bool,
}

/// Re-runs the configured window of a node under the reflection overrides
/// and compares observed trajectories over that window.
pub fn reflect(engine: &Engine, cfg: &ScenarioConfig, node: Option<NodeId>) -> Result<ReflectOutcome> {
    let r = cfg.reflection.as_ref().ok_or_else(|| Error::Config("config has no reflection section".into()))?;
    let node = resolve_node(engine, node.or(r.node))?;
    let window = (r.from_step, r.to_step);
    let reflected = engine.reflect_update(node, r.overrides.clone(), window)?.id;
    let original_digest = trajectory_digest(engine, node, window, &cfg.observation)?.combined;
    let reflected_digest = trajectory_digest(engine, reflected, window, &cfg.observation)?.combined;
    Ok(ReflectOutcome {
        node,
        reflected,
        window,
        original_digest,
        reflected_digest,
        unchanged: original_digest == reflected_digest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrospectOutcome {
    pub parent: NodeId,
    pub child: NodeId,
    pub at_step: u64,
    pub until_step: u64,
    pub status: NodeStatus,
}

/// Branches from a stored past step of a node and runs the alternative up
/// to `until` (default: the parent's current end).
pub fn retrospect(
    engine: &Engine,
    cfg: &ScenarioConfig,
    node: Option<NodeId>,
    until: Option<u64>,
) -> Result<RetrospectOutcome> {
    let r = cfg.retrospection.as_ref().ok_or_else(|| Error::Config("config has no retrospection section".into()))?;
    let parent = resolve_node(engine, node.or(r.node))?;
    let (start, end) = engine.lineage_window(parent)?;
    if r.at_step < start || r.at_step > end {
        return Err(Error::StepNotStored { step: r.at_step, start, end });
    }
    let child = engine.branch_at(parent, r.at_step, r.overrides.clone())?.id();
    for a in &r.annotations {
        engine.annotate(child, a.kind, a.text.clone())?;
    }
    let until_step = until.unwrap_or(end).max(r.at_step);
    let n = engine.run(RunRequest { node: child, until_step, incremental: true })?;
    Ok(RetrospectOutcome { parent, child, at_step: r.at_step, until_step, status: n.status })
}

/// `node`, or the first root in the engine.
fn resolve_node(engine: &Engine, node: Option<NodeId>) -> Result<NodeId> {
    if let Some(id) = node {
        engine.node(id)?;
        return Ok(id);
    }
    engine
        .trees()
        .iter()
        .filter_map(|t| t.root())
        .min()
        .ok_or_else(|| Error::Config("store holds no simulation".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub branch_step: u64,
    pub prefix_interval: (u64, u64),
    pub suffix_interval: (u64, u64),
    pub prefix_classes: Vec<EquivalenceClass>,
    pub suffix_classes: Vec<EquivalenceClass>,
    pub advice: BranchAdvice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub savings: SavingsReport,
    pub equivalence: Vec<SplitSummary>,
    pub violations: Vec<Violation>,
}

/// Savings plus, for every branch step, the equivalence classes of all
/// scenario trajectories before and after it.
pub fn report(engine: &Engine, obs: &ObservationSpec) -> Result<Report> {
    let savings = engine.savings_report()?;
    let trees = engine.trees();
    let ends: Vec<NodeId> = trees.iter().flat_map(|t| t.scenario_ends()).collect();
    let mut equivalence = Vec::new();
    if let Some(t_f) =
        ends.iter().map(|&n| engine.node(n).map(|n| n.window.end)).collect::<Result<Vec<_>>>()?.into_iter().min()
    {
        let t0 = trees
            .iter()
            .filter_map(|t| t.root().and_then(|r| t.get(r).ok()).map(|r| r.window.start))
            .max()
            .unwrap_or(0);
        let mut steps: Vec<u64> = trees
            .iter()
            .flat_map(|t| t.nodes.values().filter_map(|n| n.branch_step()))
            .filter(|&b| b >= t0 && b <= t_f)
            .collect();
        steps.sort_unstable();
        steps.dedup();
        for b in steps {
            let prefix_classes = partition_classes(engine, &ends, (t0, b), obs)?;
            let suffix_classes = partition_classes(engine, &ends, (b, t_f), obs)?;
            let advice = branch_advice(prefix_classes.len(), suffix_classes.len())?;
            equivalence.push(SplitSummary {
                branch_step: b,
                prefix_interval: (t0, b),
                suffix_interval: (b, t_f),
                prefix_classes,
                suffix_classes,
                advice,
            });
        }
    }
    let violations = engine.validate().into_iter().flat_map(|(_, v)| v).collect();
    Ok(Report { savings, equivalence, violations })
}
