//! Scenario trees: rooted trees of trajectory segments joined at branch points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{FieldState, ParamOverrides, ParamSet, SimulatorSpec};
use crate::store::Digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Pending,
    Running,
    Complete,
    Reused,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    /// What is expected to happen.
    Descriptive,
    /// What should be done.
    Prescriptive,
    /// How good or bad an outcome is.
    Evaluative,
    /// An outcome together with the action prescribed for it.
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub kind: AnnotationKind,
    pub text: String,
}

impl Annotation {
    pub fn check(&self) -> Result<()> {
        if self.kind == AnnotationKind::Conditional && self.text.trim().is_empty() {
            return Err(Error::InvalidAnnotation("conditional annotations need the prescribed action".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub branch_step: u64,
    pub parent_state_digest: Digest,
    #[serde(default)]
    pub overrides: ParamOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioNode {
    pub id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_point: Option<BranchPoint>,
    pub effective_params: ParamSet,
    pub window: Window,
    pub status: NodeStatus,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    /// Node whose stored suffix this node links to (status `reused`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub donor: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ScenarioNode {
    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    pub fn branch_step(&self) -> Option<u64> {
        self.branch_point.as_ref().map(|b| b.branch_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchOutcome {
    Created(NodeId),
    /// A child with the same branch step and overrides already exists.
    Existing(NodeId),
}

impl BranchOutcome {
    pub fn id(self) -> NodeId {
        match self {
            BranchOutcome::Created(id) | BranchOutcome::Existing(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoRoot,
    MultipleRoots { roots: Vec<NodeId> },
    MissingParent { node: NodeId, parent: NodeId },
    Cycle { node: NodeId },
    MissingBranchPoint { node: NodeId },
    DigestMismatch { node: NodeId, step: u64 },
    WindowInconsistent { node: NodeId, reason: String },
    DuplicateBranch { node: NodeId, existing: NodeId },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub nodes: BTreeMap<NodeId, ScenarioNode>,
}

impl ScenarioTree {
    /// Creates a tree holding a single pending root at `initial_state.step_index`.
    pub fn create_root(id: NodeId, spec: &SimulatorSpec, params: ParamSet, initial_state: &FieldState) -> Result<Self> {
        spec.validate()?;
        params.check(spec)?;
        initial_state.validate(spec)?;
        let step = initial_state.step_index;
        let root = ScenarioNode {
            id,
            parent: None,
            branch_point: None,
            effective_params: params,
            window: Window { start: step, end: step },
            status: NodeStatus::Pending,
            annotations: Vec::new(),
            donor: None,
            failure: None,
        };
        Ok(ScenarioTree { nodes: BTreeMap::from([(id, root)]) })
    }

    pub fn root(&self) -> Option<NodeId> {
        self.nodes.values().find(|n| n.is_root()).map(|n| n.id)
    }

    pub fn get(&self, id: NodeId) -> Result<&ScenarioNode> {
        self.nodes.get(&id).ok_or(Error::UnknownNode(id))
    }

    pub fn get_mut(&mut self, id: NodeId) -> Result<&mut ScenarioNode> {
        self.nodes.get_mut(&id).ok_or(Error::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &ScenarioNode> {
        self.nodes.values().filter(move |n| n.parent == Some(id))
    }

    /// Node ids from the root down to `id`.
    pub fn lineage(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut out = vec![id];
        let mut cur = self.get(id)?;
        while let Some(p) = cur.parent {
            if out.contains(&p) || out.len() > self.nodes.len() {
                return Err(Error::CorruptLineage { node: id, reason: "cycle in parent links".into() });
            }
            out.push(p);
            cur = self.get(p)?;
        }
        out.reverse();
        Ok(out)
    }

    /// The node on `id`'s lineage whose window owns `step`, preferring the
    /// deepest node.
    pub fn owner_of(&self, id: NodeId, step: u64) -> Result<NodeId> {
        let mut cur = self.get(id)?;
        loop {
            if step >= cur.window.start {
                return Ok(cur.id);
            }
            match cur.parent {
                Some(p) => cur = self.get(p)?,
                None => return Ok(cur.id),
            }
        }
    }

    /// Adds a child of `parent` at `branch_step`. `parent_digest` must be the
    /// digest of the parent's stored state at that step.
    pub fn branch_at(
        &mut self,
        spec: &SimulatorSpec,
        new_id: NodeId,
        parent: NodeId,
        branch_step: u64,
        overrides: ParamOverrides,
        parent_digest: Digest,
    ) -> Result<BranchOutcome> {
        let p = self.get(parent)?;
        if branch_step > p.window.end {
            return Err(Error::NotYetSimulated { node: parent, step: branch_step, end: p.window.end });
        }
        if branch_step < p.window.start {
            return Err(Error::StepNotStored { step: branch_step, start: p.window.start, end: p.window.end });
        }
        let key = overrides.canonical_bytes();
        if let Some(existing) = self.children(parent).find(|c| {
            c.branch_step() == Some(branch_step) && c.branch_point.as_ref().unwrap().overrides.canonical_bytes() == key
        }) {
            return Ok(BranchOutcome::Existing(existing.id));
        }
        let effective_params = overrides.apply(&p.effective_params)?;
        effective_params.check(spec)?;
        let child = ScenarioNode {
            id: new_id,
            parent: Some(parent),
            branch_point: Some(BranchPoint { branch_step, parent_state_digest: parent_digest, overrides }),
            effective_params,
            window: Window { start: branch_step, end: branch_step },
            status: NodeStatus::Pending,
            annotations: Vec::new(),
            donor: None,
            failure: None,
        };
        self.nodes.insert(new_id, child);
        Ok(BranchOutcome::Created(new_id))
    }

    pub fn annotate(&mut self, id: NodeId, kind: AnnotationKind, text: impl Into<String>) -> Result<&ScenarioNode> {
        let annotation = Annotation { kind, text: text.into() };
        annotation.check()?;
        let node = self.get_mut(id)?;
        node.annotations.push(annotation);
        Ok(node)
    }

    /// Nodes that end a distinct scenario: leaves, and inner nodes whose
    /// window runs past all of their children's branch steps.
    pub fn scenario_ends(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| match self.children(n.id).filter_map(|c| c.branch_step()).max() {
                None => true,
                Some(last) => n.window.end > last,
            })
            .map(|n| n.id)
            .collect()
    }

    /// Structural and lineage checks. `digest_at(node, step)` yields the
    /// stored state digest of `node` at `step`, if stored.
    pub fn validate(&self, digest_at: impl Fn(NodeId, u64) -> Option<Digest>) -> Vec<Violation> {
        let mut out = Vec::new();
        let roots: Vec<NodeId> = self.nodes.values().filter(|n| n.is_root()).map(|n| n.id).collect();
        match roots.len() {
            0 => out.push(Violation::NoRoot),
            1 => {}
            _ => out.push(Violation::MultipleRoots { roots }),
        }
        let mut seen_branches: BTreeMap<(NodeId, u64, Vec<u8>), NodeId> = BTreeMap::new();
        for node in self.nodes.values() {
            if node.window.end < node.window.start {
                out.push(Violation::WindowInconsistent { node: node.id, reason: "end before start".into() });
            }
            let Some(parent_id) = node.parent else { continue };
            let mut visited = BTreeSet::from([node.id]);
            let mut cur = Some(parent_id);
            let mut cyclic = false;
            while let Some(c) = cur {
                if !visited.insert(c) {
                    cyclic = true;
                    break;
                }
                cur = self.nodes.get(&c).and_then(|n| n.parent);
            }
            if cyclic {
                out.push(Violation::Cycle { node: node.id });
                continue;
            }
            let Some(parent) = self.nodes.get(&parent_id) else {
                out.push(Violation::MissingParent { node: node.id, parent: parent_id });
                continue;
            };
            let Some(bp) = &node.branch_point else {
                out.push(Violation::MissingBranchPoint { node: node.id });
                continue;
            };
            if node.window.start != bp.branch_step {
                out.push(Violation::WindowInconsistent {
                    node: node.id,
                    reason: "start differs from branch step".into(),
                });
            }
            if bp.branch_step < parent.window.start || bp.branch_step > parent.window.end {
                out.push(Violation::WindowInconsistent {
                    node: node.id,
                    reason: "branch step outside parent window".into(),
                });
            }
            if digest_at(parent_id, bp.branch_step) != Some(bp.parent_state_digest) {
                out.push(Violation::DigestMismatch { node: node.id, step: bp.branch_step });
            }
            let key = (parent_id, bp.branch_step, bp.overrides.canonical_bytes());
            if let Some(&existing) = seen_branches.get(&key) {
                out.push(Violation::DuplicateBranch { node: node.id, existing });
            } else {
                seen_branches.insert(key, node.id);
            }
        }
        out
    }
}
