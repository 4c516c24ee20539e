//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;

use branchsim::{
    init_state, Engine, FieldState, NodeId, ParamOverrides, ParamSet, RunRequest, SimulatorSpec, VesselParams,
};

pub fn grid(n: usize) -> SimulatorSpec {
    SimulatorSpec::vesselgrid(n, n, 1.0).expect("valid grid")
}

/// Diffusion with a 3×3 source block in the middle of the grid.
pub fn localized_source(spec: &SimulatorSpec) -> ParamSet {
    let c = spec.width / 2;
    let source_cells: BTreeSet<usize> =
        (c - 1..=c + 1).flat_map(|y| (c - 1..=c + 1).map(move |x| y * spec.width + x)).collect();
    ParamSet::Vesselgrid(VesselParams {
        diffusion: 0.5,
        vx: 0.2,
        vy: 0.0,
        dt: 0.1,
        source_cells,
        source_amp: 1.0,
        source_period: 16,
    })
}

pub fn zero_state(spec: &SimulatorSpec) -> FieldState {
    init_state(spec, &Default::default()).expect("valid state")
}

/// Root simulated to `branch_step` with `branches` distinct diffusion
/// variants attached there, none of them run yet.
pub fn pending_tree(n: usize, branch_step: u64, branches: usize) -> (Engine, NodeId) {
    let spec = grid(n);
    let engine = Engine::in_memory(10);
    let root = engine.create_root(&spec, localized_source(&spec), &zero_state(&spec)).expect("root");
    engine.run(RunRequest { node: root, until_step: branch_step, incremental: true }).expect("prefix");
    for i in 0..branches {
        let o = ParamOverrides { diffusion: Some(0.3 + 0.1 * i as f64), ..Default::default() };
        engine.branch_at(root, branch_step, o).expect("branch");
    }
    (engine, root)
}
