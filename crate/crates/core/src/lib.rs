//! Branching simulation.
//!
//! A tree of alternative simulation trajectories is developed concurrently.
//! Shared prefixes are stored once and branches start from checkpoints;
//! identical suffixes are linked through state-digest memoization; unchanged
//! cells are skipped through dirty-set stepping. A cost ledger compares the
//! work done against re-simulating every scenario from scratch.

pub mod cost;
pub mod engine;
pub mod equivalence;
pub mod error;
pub mod history;
pub mod probe;
pub mod scenario;
pub mod sim;
pub mod store;
pub mod tree;

pub use cost::{
    branch_advice, branching_no_gain, BranchAdvice, CostLedger, NodeCost, SavingsReport, StepKind, Verdict,
};
pub use engine::{Engine, RunRequest, RunTreeOutcome, SuffixKey};
pub use equivalence::{observe, partition_classes, trajectory_digest, EquivalenceClass, ObservationSpec, Roi};
pub use error::{Error, Result};
pub use history::History;
pub use probe::{extract_frame, frame_deltas, sample_point, Frame, FrameDelta, ProbeQuery};
pub use scenario::ScenarioConfig;
pub use sim::{
    canonical_bytes, init_state, step_full, step_incremental, Cells, DirtySet, FieldState, ParamOverrides, ParamSet,
    SimulatorId, SimulatorSpec, VesselParams,
};
pub use store::{digest_state, Digest, Manifest, StateDelta, Store};
pub use tree::{Annotation, AnnotationKind, BranchOutcome, NodeId, NodeStatus, ScenarioNode, ScenarioTree};
