//! Branching execution engine.
//!
//! The engine owns a [`Store`], a forest of scenario trees (one per
//! simulation), the cost ledger and the suffix memo table. Runs look up a
//! [`SuffixKey`] before stepping: on a hit the node links to a stored donor
//! suffix and no solver step executes.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::cost::{savings_report, CostLedger, SavingsReport, StepKind};
use crate::error::{Error, Result};
use crate::history::History;
use crate::sim::{
    affected_cells, initial_dirty, step_full, step_incremental, AffectedCells, DirtySet, FieldState, ParamOverrides,
    ParamSet, SimulatorId, SimulatorSpec,
};
use crate::store::{digest_state, Digest, StateDelta, Store, SuffixLink, DEFAULT_CHECKPOINT_INTERVAL};
use crate::tree::{AnnotationKind, BranchOutcome, NodeId, NodeStatus, ScenarioNode, ScenarioTree, Violation};

/// Identity of a run: equal keys produce bit-identical suffixes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SuffixKey {
    pub simulator_id: SimulatorId,
    pub params_digest: Digest,
    pub state_digest: Digest,
    /// Absent for time-invariant simulators.
    pub step: Option<u64>,
    pub horizon: u64,
}

impl SuffixKey {
    pub fn new(spec: &SimulatorSpec, params: &ParamSet, state: &FieldState, horizon: u64) -> Self {
        SuffixKey {
            simulator_id: spec.simulator_id,
            params_digest: Digest::of(&params.canonical_bytes()),
            state_digest: digest_state(spec, state),
            step: (!spec.time_invariant).then_some(state.step_index),
            horizon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Donor {
    pub node: NodeId,
    pub start_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemoEntry {
    key: SuffixKey,
    donor: Donor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunRequest {
    pub node: NodeId,
    pub until_step: u64,
    pub incremental: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunTreeOutcome {
    pub completed: Vec<NodeId>,
    pub failed: Vec<(NodeId, String)>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Forest {
    next_id: u64,
    trees: Vec<ScenarioTree>,
}

impl Forest {
    fn tree_index(&self, id: NodeId) -> Result<usize> {
        self.trees.iter().position(|t| t.contains(id)).ok_or(Error::UnknownNode(id))
    }

    fn tree(&self, id: NodeId) -> Result<&ScenarioTree> {
        Ok(&self.trees[self.tree_index(id)?])
    }

    fn tree_mut(&mut self, id: NodeId) -> Result<&mut ScenarioTree> {
        let i = self.tree_index(id)?;
        Ok(&mut self.trees[i])
    }

    fn node(&self, id: NodeId) -> Result<&ScenarioNode> {
        self.tree(id)?.get(id)
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut ScenarioNode> {
        self.tree_mut(id)?.get_mut(id)
    }

    fn alloc(&mut self) -> NodeId {
        self.next_id += 1;
        NodeId(self.next_id)
    }
}

#[derive(Serialize, Deserialize)]
struct PersistedState {
    checkpoint_interval: u64,
    forest: Forest,
    ledger: CostLedger,
    memo: Vec<MemoEntry>,
}

pub struct Engine {
    store: Store,
    checkpoint_interval: u64,
    forest: RwLock<Forest>,
    ledger: Mutex<CostLedger>,
    memo: Mutex<BTreeMap<SuffixKey, Donor>>,
    running: Mutex<BTreeSet<NodeId>>,
    faults: Mutex<BTreeMap<NodeId, u64>>,
}

impl Engine {
    pub fn new(store: Store, checkpoint_interval: u64) -> Self {
        Engine {
            store,
            checkpoint_interval: checkpoint_interval.max(1),
            forest: RwLock::new(Forest::default()),
            ledger: Mutex::new(CostLedger::default()),
            memo: Mutex::new(BTreeMap::new()),
            running: Mutex::new(BTreeSet::new()),
            faults: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn in_memory(checkpoint_interval: u64) -> Self {
        Engine::new(Store::in_memory(None), checkpoint_interval)
    }

    /// Restores engine state persisted in the store's manifest.
    pub fn load(store: Store) -> Result<Self> {
        let app = store.app_state();
        if app.is_null() {
            return Ok(Engine::new(store, DEFAULT_CHECKPOINT_INTERVAL));
        }
        let state: PersistedState =
            serde_json::from_value(app).map_err(|e| Error::CorruptStore(format!("engine state: {e}")))?;
        let engine = Engine::new(store, state.checkpoint_interval);
        *engine.forest.write().unwrap() = state.forest;
        *engine.ledger.lock().unwrap() = state.ledger;
        *engine.memo.lock().unwrap() = state.memo.into_iter().map(|e| (e.key, e.donor)).collect();
        Ok(engine)
    }

    /// Writes engine state into the store manifest and flushes to disk.
    pub fn save(&self) -> Result<()> {
        let forest = self.forest.read().unwrap();
        let state = PersistedState {
            checkpoint_interval: self.checkpoint_interval,
            forest: Forest { next_id: forest.next_id, trees: forest.trees.clone() },
            ledger: self.ledger(),
            memo: self.memo.lock().unwrap().iter().map(|(k, d)| MemoEntry { key: k.clone(), donor: *d }).collect(),
        };
        drop(forest);
        self.store.set_app_state(serde_json::to_value(state)?);
        self.store.flush()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_interval
    }

    pub fn trees(&self) -> Vec<ScenarioTree> {
        self.forest.read().unwrap().trees.clone()
    }

    pub fn tree_of(&self, id: NodeId) -> Result<ScenarioTree> {
        self.forest.read().unwrap().tree(id).cloned()
    }

    pub fn node(&self, id: NodeId) -> Result<ScenarioNode> {
        self.forest.read().unwrap().node(id).cloned()
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().unwrap().clone()
    }

    pub fn memo_len(&self) -> usize {
        self.memo.lock().unwrap().len()
    }

    /// Makes `node` fail with a numeric fault when it is about to produce
    /// `step`. Used to exercise failure isolation.
    pub fn inject_fault(&self, node: NodeId, step: u64) {
        self.faults.lock().unwrap().insert(node, step);
    }

    /// Creates a new simulation: a single-root tree whose root starts at
    /// `initial_state`.
    pub fn create_root(&self, spec: &SimulatorSpec, params: ParamSet, initial_state: &FieldState) -> Result<NodeId> {
        spec.validate()?;
        self.store.bind_spec(spec)?;
        let mut forest = self.forest.write().unwrap();
        let id = NodeId(forest.next_id + 1);
        let tree = ScenarioTree::create_root(id, spec, params, initial_state)?;
        self.store.create_segment(id, initial_state, self.checkpoint_interval)?;
        forest.alloc();
        forest.trees.push(tree);
        self.ledger.lock().unwrap().register(id);
        Ok(id)
    }

    pub fn branch_at(&self, parent: NodeId, branch_step: u64, overrides: ParamOverrides) -> Result<BranchOutcome> {
        let mut forest = self.forest.write().unwrap();
        let p = forest.node(parent)?;
        if branch_step > p.window.end {
            return Err(Error::NotYetSimulated { node: parent, step: branch_step, end: p.window.end });
        }
        let digest = self.digest_with(&forest, parent, branch_step)?;
        let id = NodeId(forest.next_id + 1);
        let spec = self.spec()?;
        let outcome = forest.tree_mut(parent)?.branch_at(&spec, id, parent, branch_step, overrides, digest)?;
        if let BranchOutcome::Created(id) = outcome {
            forest.alloc();
            self.ledger.lock().unwrap().register(id);
        }
        Ok(outcome)
    }

    pub fn annotate(&self, node: NodeId, kind: AnnotationKind, text: impl Into<String>) -> Result<ScenarioNode> {
        let mut forest = self.forest.write().unwrap();
        forest.tree_mut(node)?.annotate(node, kind, text).cloned()
    }

    /// Violations per tree, keyed by the tree's first node.
    pub fn validate(&self) -> Vec<(NodeId, Vec<Violation>)> {
        let forest = self.forest.read().unwrap();
        forest
            .trees
            .iter()
            .map(|t| {
                let key = t.root().or_else(|| t.nodes.keys().next().copied()).unwrap_or(NodeId(0));
                let v = t.validate(|n, s| self.store.digest_at(n, s).ok());
                (key, v)
            })
            .collect()
    }

    pub fn savings_report(&self) -> Result<SavingsReport> {
        let forest = self.forest.read().unwrap();
        let ledger = self.ledger.lock().unwrap();
        savings_report(&forest.trees, &ledger)
    }

    /// Reconstructs the start state of a branch child from its parent's
    /// stored lineage, verifying the branch-point digest. Delta applications
    /// needed to reach the branch step are charged as replay.
    pub fn materialize_branch_start(&self, child: NodeId) -> Result<FieldState> {
        if self.store.has_segment(child) {
            let (start, _) = self.store.window(child)?;
            return self.store.get_state_at(child, start);
        }
        let forest = self.forest.read().unwrap();
        let node = forest.node(child)?;
        let (Some(parent), Some(bp)) = (node.parent, node.branch_point.clone()) else {
            return Err(Error::CorruptLineage { node: child, reason: "root has no stored segment".into() });
        };
        let owner = self.segment_owner(&forest, parent, bp.branch_step)?;
        drop(forest);
        let (state, applied) = self.store.state_at_counted(owner, bp.branch_step)?;
        let spec = self.spec()?;
        if digest_state(&spec, &state) != bp.parent_state_digest {
            return Err(Error::CorruptLineage {
                node: child,
                reason: format!("state at step {} does not match branch digest", bp.branch_step),
            });
        }
        self.ledger.lock().unwrap().record_steps(child, StepKind::Replay, applied)?;
        self.store.create_segment(child, &state, self.checkpoint_interval)?;
        Ok(state)
    }

    pub fn run(&self, request: RunRequest) -> Result<ScenarioNode> {
        let id = request.node;
        if !self.running.lock().unwrap().insert(id) {
            return Err(Error::NodeBusy(id));
        }
        let result = self.run_claimed(request);
        self.running.lock().unwrap().remove(&id);
        if let Err(e) = &result {
            let mut forest = self.forest.write().unwrap();
            if let Ok(node) = forest.node_mut(id) {
                node.status = NodeStatus::Failed;
                node.failure = Some(e.to_string());
            }
        }
        result
    }

    fn run_claimed(&self, request: RunRequest) -> Result<ScenarioNode> {
        let id = request.node;
        let spec = self.spec()?;
        let node = self.node(id)?;
        if request.until_step <= node.window.end {
            return Ok(node);
        }
        node.effective_params.check(&spec)?;
        let start = if self.store.has_segment(id) {
            if self.store.unlink(id)? > 0 {
                self.forest.write().unwrap().node_mut(id)?.donor = None;
            }
            self.store.tail(id)?
        } else {
            self.materialize_branch_start(id)?
        };
        let horizon = request.until_step - start.step_index;
        let key = SuffixKey::new(&spec, &node.effective_params, &start, horizon);

        let hit = self.memo.lock().unwrap().get(&key).copied();
        if let Some(donor) = hit {
            let link = SuffixLink {
                donor: donor.node,
                donor_start: donor.start_step,
                local_start: start.step_index,
                len: horizon,
            };
            self.store.set_link(id, link)?;
            self.ledger.lock().unwrap().record_steps(id, StepKind::Reused, horizon)?;
            let mut forest = self.forest.write().unwrap();
            let n = forest.node_mut(id)?;
            n.window.end = request.until_step;
            n.status = NodeStatus::Reused;
            n.donor = Some(donor.node);
            n.failure = None;
            return Ok(n.clone());
        }

        {
            let mut forest = self.forest.write().unwrap();
            let n = forest.node_mut(id)?;
            n.status = NodeStatus::Running;
            n.failure = None;
        }
        let params = node.effective_params.clone();
        let fault = self.faults.lock().unwrap().get(&id).copied();
        let mut dirty = if request.incremental { Some(self.initial_dirty_for(id, &params, &start)?) } else { None };
        let mut state = start.clone();
        while state.step_index < request.until_step {
            if fault == Some(state.step_index + 1) {
                return Err(Error::NumericFault { step: state.step_index, cell: 0 });
            }
            let next = match dirty.take() {
                Some(d) => {
                    let (next, d) = step_incremental(&spec, &params, &state, &d)?;
                    dirty = Some(d);
                    next
                }
                None => step_full(&spec, &params, &state)?,
            };
            self.store.append_step(id, &state, &next)?;
            self.ledger.lock().unwrap().record_step(id, StepKind::Fresh)?;
            self.forest.write().unwrap().node_mut(id)?.window.end = next.step_index;
            state = next;
        }

        self.memo.lock().unwrap().entry(key).or_insert(Donor { node: id, start_step: start.step_index });
        let mut forest = self.forest.write().unwrap();
        let n = forest.node_mut(id)?;
        n.status = NodeStatus::Complete;
        Ok(n.clone())
    }

    /// Runs every pending node to `until_step` on up to `max_workers`
    /// threads. Nodes that share a suffix key are deduplicated in id order
    /// before execution, so results do not depend on the worker count.
    pub fn run_tree(&self, until_step: u64, max_workers: usize) -> Result<RunTreeOutcome> {
        if max_workers == 0 {
            return Err(Error::InvalidWorkerCount);
        }
        let spec = self.spec()?;
        let pending: Vec<ScenarioNode> = {
            let forest = self.forest.read().unwrap();
            forest
                .trees
                .iter()
                .flat_map(|t| t.nodes.values())
                .filter(|n| n.status == NodeStatus::Pending && n.window.end < until_step)
                .cloned()
                .collect()
        };
        let mut outcome = RunTreeOutcome::default();
        let mut runners = Vec::new();
        let mut followers = Vec::new();
        let mut claimed = BTreeSet::new();
        for node in pending {
            let start = if self.store.has_segment(node.id) {
                self.store.tail(node.id)
            } else {
                self.materialize_branch_start(node.id)
            };
            match start {
                Ok(start) => {
                    let key = SuffixKey::new(&spec, &node.effective_params, &start, until_step - start.step_index);
                    if claimed.insert(key) {
                        runners.push(node.id);
                    } else {
                        followers.push(node.id);
                    }
                }
                Err(e) => {
                    self.mark_failed(node.id, &e);
                    outcome.failed.push((node.id, e.to_string()));
                }
            }
        }

        let next = AtomicUsize::new(0);
        let results = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..max_workers.min(runners.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&id) = runners.get(i) else { break };
                    let r = self.run(RunRequest { node: id, until_step, incremental: true });
                    results.lock().unwrap().push((id, r.map(|_| ()).map_err(|e| e.to_string())));
                });
            }
        });
        let mut results = results.into_inner().unwrap();
        for id in followers {
            let r = self.run(RunRequest { node: id, until_step, incremental: true });
            results.push((id, r.map(|_| ()).map_err(|e| e.to_string())));
        }
        results.sort_by_key(|(id, _)| *id);
        for (id, r) in results {
            match r {
                Ok(()) => outcome.completed.push(id),
                Err(e) => outcome.failed.push((id, e)),
            }
        }
        outcome.failed.sort();
        Ok(outcome)
    }

    /// Re-runs `window` of `node` under new overrides as a new branch at the
    /// window start, stepping incrementally from the cells the parameter
    /// change touches.
    pub fn reflect_update(&self, node: NodeId, overrides: ParamOverrides, window: (u64, u64)) -> Result<ScenarioNode> {
        let (w0, w1) = window;
        if w0 > w1 {
            return Err(Error::InvalidRange { from: w0, to: w1 });
        }
        let n = self.node(node)?;
        if w1 > n.window.end {
            return Err(Error::NotYetSimulated { node, step: w1, end: n.window.end });
        }
        if w0 < n.window.start {
            return Err(Error::StepNotStored { step: w0, start: n.window.start, end: n.window.end });
        }
        let child = self.branch_at(node, w0, overrides)?.id();
        self.run(RunRequest { node: child, until_step: w1, incremental: true })
    }

    fn mark_failed(&self, id: NodeId, e: &Error) {
        if let Ok(n) = self.forest.write().unwrap().node_mut(id) {
            n.status = NodeStatus::Failed;
            n.failure = Some(e.to_string());
        }
    }

    fn spec(&self) -> Result<SimulatorSpec> {
        self.store.spec().ok_or_else(|| Error::InvalidSpec("no simulation created yet".into()))
    }

    /// Dirty set valid for the first step taken from `start` under `params`.
    fn initial_dirty_for(&self, id: NodeId, params: &ParamSet, start: &FieldState) -> Result<DirtySet> {
        let forest = self.forest.read().unwrap();
        let step = start.step_index;
        let Some(owner) = self.delta_owner(&forest, id, step)? else {
            return Ok(initial_dirty(params, start));
        };
        let owner_params = &forest.node(owner)?.effective_params;
        let delta = self.store.delta_at(owner, step)?;
        let base = delta.entries.iter().map(|&(i, _)| i as usize);
        Ok(match affected_cells(owner_params, params) {
            AffectedCells::All => DirtySet::all(&self.spec()?),
            AffectedCells::Some(extra) => DirtySet::from_indices(base.chain(extra)),
        })
    }

    /// Lineage node holding a stored segment that contains `step`.
    fn segment_owner(&self, forest: &Forest, id: NodeId, step: u64) -> Result<NodeId> {
        let mut cur = forest.node(id)?;
        loop {
            if self.store.has_segment(cur.id) {
                let (start, end) = self.store.window(cur.id)?;
                if step >= start && step <= end {
                    return Ok(cur.id);
                }
                if step > end {
                    return Err(Error::StepNotStored { step, start: self.lineage_start(forest, id)?, end });
                }
            }
            match cur.parent {
                Some(p) => cur = forest.node(p)?,
                None => {
                    let end = forest.node(id)?.window.end;
                    return Err(Error::StepNotStored { step, start: cur.window.start, end });
                }
            }
        }
    }

    /// Lineage node whose stored delta produced `step`; `None` when `step`
    /// is the lineage's first step.
    fn delta_owner(&self, forest: &Forest, id: NodeId, step: u64) -> Result<Option<NodeId>> {
        let mut cur = forest.node(id)?;
        loop {
            if self.store.has_segment(cur.id) {
                let (start, end) = self.store.window(cur.id)?;
                if step > start && step <= end {
                    return Ok(Some(cur.id));
                }
            }
            match cur.parent {
                Some(p) => cur = forest.node(p)?,
                None => return Ok(None),
            }
        }
    }

    fn lineage_start(&self, forest: &Forest, id: NodeId) -> Result<u64> {
        let tree = forest.tree(id)?;
        let root = tree.lineage(id)?[0];
        Ok(tree.get(root)?.window.start)
    }

    fn digest_with(&self, forest: &Forest, id: NodeId, step: u64) -> Result<Digest> {
        let owner = self.segment_owner(forest, id, step)?;
        self.store.digest_at(owner, step)
    }

    fn checked_step(&self, forest: &Forest, id: NodeId, step: u64) -> Result<()> {
        let start = self.lineage_start(forest, id)?;
        let end = forest.node(id)?.window.end;
        if step < start || step > end {
            return Err(Error::StepNotStored { step, start, end });
        }
        Ok(())
    }
}

impl History for Engine {
    fn spec(&self) -> Result<SimulatorSpec> {
        Engine::spec(self)
    }

    fn lineage_window(&self, node: NodeId) -> Result<(u64, u64)> {
        let forest = self.forest.read().unwrap();
        Ok((self.lineage_start(&forest, node)?, forest.node(node)?.window.end))
    }

    fn state_at(&self, node: NodeId, step: u64) -> Result<FieldState> {
        let forest = self.forest.read().unwrap();
        self.checked_step(&forest, node, step)?;
        let owner = self.segment_owner(&forest, node, step)?;
        drop(forest);
        self.store.get_state_at(owner, step)
    }

    fn digest_at(&self, node: NodeId, step: u64) -> Result<Digest> {
        let forest = self.forest.read().unwrap();
        self.checked_step(&forest, node, step)?;
        self.digest_with(&forest, node, step)
    }

    fn delta_at(&self, node: NodeId, step: u64) -> Result<StateDelta> {
        let forest = self.forest.read().unwrap();
        self.checked_step(&forest, node, step)?;
        match self.delta_owner(&forest, node, step)? {
            Some(owner) => {
                drop(forest);
                self.store.delta_at(owner, step)
            }
            None => {
                let end = forest.node(node)?.window.end;
                Err(Error::StepNotStored { step, start: step + 1, end })
            }
        }
    }
}
