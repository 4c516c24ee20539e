//! Read access to stored trajectories, resolved along a node's lineage.

use crate::error::Result;
use crate::sim::{FieldState, SimulatorSpec};
use crate::store::{Digest, StateDelta};
use crate::tree::NodeId;

/// A trajectory store viewed through scenario lineage: a step before a
/// node's branch point resolves to the ancestor that owns it.
pub trait History {
    fn spec(&self) -> Result<SimulatorSpec>;

    /// First and last step reachable from `node` (root start to node end).
    fn lineage_window(&self, node: NodeId) -> Result<(u64, u64)>;

    fn state_at(&self, node: NodeId, step: u64) -> Result<FieldState>;

    fn digest_at(&self, node: NodeId, step: u64) -> Result<Digest>;

    /// Changed cells between `step - 1` and `step`.
    fn delta_at(&self, node: NodeId, step: u64) -> Result<StateDelta>;
}
