#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use branchsim::{
    digest_state, init_state, step_full, Digest, FieldState, ParamOverrides, ParamSet, SimulatorSpec, VesselParams,
};

pub fn vessel(diffusion: f64, vx: f64, vy: f64, sources: impl IntoIterator<Item = usize>, amp: f64) -> ParamSet {
    ParamSet::Vesselgrid(VesselParams {
        diffusion,
        vx,
        vy,
        dt: 0.1,
        source_cells: sources.into_iter().collect::<BTreeSet<_>>(),
        source_amp: amp,
        source_period: 16,
    })
}

/// Cells of the `k`×`k` block whose top-left corner is `(x, y)`.
pub fn block(spec: &SimulatorSpec, x: usize, y: usize, k: usize) -> Vec<usize> {
    (y..y + k).flat_map(|r| (x..x + k).map(move |c| r * spec.width + c)).collect()
}

pub fn seeds(pairs: &[(usize, f64)]) -> BTreeMap<usize, f64> {
    pairs.iter().copied().collect()
}

pub fn overrides_diffusion(d: f64) -> ParamOverrides {
    ParamOverrides { diffusion: Some(d), ..Default::default() }
}

/// Reference trajectory computed with full steps only: `phases` lists
/// `(params, until_step)` in order. Returns every state from the start.
pub fn linear_run(spec: &SimulatorSpec, start: &FieldState, phases: &[(ParamSet, u64)]) -> Vec<FieldState> {
    let mut out = vec![start.clone()];
    let mut cur = start.clone();
    for (params, until) in phases {
        while cur.step_index < *until {
            cur = step_full(spec, params, &cur).unwrap();
            out.push(cur.clone());
        }
    }
    out
}

pub fn linear_digest(spec: &SimulatorSpec, seeds: &BTreeMap<usize, f64>, phases: &[(ParamSet, u64)]) -> Digest {
    let start = init_state(spec, seeds).unwrap();
    let states = linear_run(spec, &start, phases);
    digest_state(spec, states.last().unwrap())
}
