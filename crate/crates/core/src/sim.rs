//! Deterministic step simulators.
//!
//! Two reference systems are provided:
//!
//! * `vesselgrid`: a 2D advection-diffusion field with a pulsatile source,
//!   integrated with explicit Euler, a 5-point Laplacian, first-order upwind
//!   advection and copy-edge (no-flux) boundaries.
//! * `maxca`: an 8-bit cellular automaton where every cell takes the maximum
//!   of itself and its 4-neighbourhood.
//!
//! Both support a full step and an incremental step that only recomputes
//! cells whose stencil touches the previous step's dirty set. The two paths
//! share the same per-cell kernel, so their outputs are bit-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulatorId {
    Vesselgrid,
    Maxca,
}

impl SimulatorId {
    pub fn as_str(self) -> &'static str {
        match self {
            SimulatorId::Vesselgrid => "vesselgrid",
            SimulatorId::Maxca => "maxca",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSpec {
    pub simulator_id: SimulatorId,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_cell_size")]
    pub cell_size_h: f64,
    pub time_invariant: bool,
}

fn default_cell_size() -> f64 {
    1.0
}

impl SimulatorSpec {
    pub fn vesselgrid(width: usize, height: usize, cell_size_h: f64) -> Result<Self> {
        let spec =
            SimulatorSpec { simulator_id: SimulatorId::Vesselgrid, width, height, cell_size_h, time_invariant: false };
        spec.validate()?;
        Ok(spec)
    }

    pub fn maxca(width: usize, height: usize) -> Result<Self> {
        let spec =
            SimulatorSpec { simulator_id: SimulatorId::Maxca, width, height, cell_size_h: 1.0, time_invariant: true };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidSpec(format!(
                "width and height must be >= 2 (got {}x{})",
                self.width, self.height
            )));
        }
        if self.width.checked_mul(self.height).is_none_or(|n| n > u32::MAX as usize) {
            return Err(Error::InvalidSpec("grid too large".into()));
        }
        match self.simulator_id {
            SimulatorId::Vesselgrid => {
                if !(self.cell_size_h.is_finite() && self.cell_size_h > 0.0) {
                    return Err(Error::InvalidSpec("cell_size_h must be positive and finite".into()));
                }
                if self.time_invariant {
                    return Err(Error::InvalidSpec("vesselgrid is time-variant".into()));
                }
            }
            SimulatorId::Maxca => {
                if !self.time_invariant {
                    return Err(Error::InvalidSpec("maxca is time-invariant".into()));
                }
            }
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    /// Bytes per cell in the canonical layout.
    pub fn cell_width(&self) -> usize {
        match self.simulator_id {
            SimulatorId::Vesselgrid => 8,
            SimulatorId::Maxca => 1,
        }
    }

    /// In-grid 4-neighbours of `i`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> {
        let (w, h) = (self.width, self.height);
        let (x, y) = (i % w, i / w);
        [(y > 0).then(|| i - w), (x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)]
            .into_iter()
            .flatten()
    }
}

/// Parameters of the vesselgrid simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselParams {
    pub diffusion: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
    pub dt: f64,
    #[serde(default)]
    pub source_cells: BTreeSet<usize>,
    #[serde(default)]
    pub source_amp: f64,
    #[serde(default = "default_period")]
    pub source_period: u64,
}

fn default_period() -> u64 {
    1
}

impl VesselParams {
    /// Source forcing at `step`. Steps before zero carry no forcing.
    pub fn forcing(&self, step: Option<u64>) -> f64 {
        match step {
            None => 0.0,
            Some(step) => {
                let phase = 2.0 * PI * step as f64 / self.source_period as f64;
                self.source_amp * (1.0 + phase.sin())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "simulator", rename_all = "lowercase")]
pub enum ParamSet {
    Vesselgrid(VesselParams),
    Maxca,
}

impl ParamSet {
    pub fn simulator_id(&self) -> SimulatorId {
        match self {
            ParamSet::Vesselgrid(_) => SimulatorId::Vesselgrid,
            ParamSet::Maxca => SimulatorId::Maxca,
        }
    }

    /// Stable byte encoding; feeds the parameter digest of suffix keys.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        match self {
            ParamSet::Maxca => vec![0],
            ParamSet::Vesselgrid(p) => {
                let mut out = vec![1];
                for v in [p.diffusion, p.vx, p.vy, p.dt, p.source_amp] {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                out.extend_from_slice(&p.source_period.to_le_bytes());
                out.extend_from_slice(&(p.source_cells.len() as u64).to_le_bytes());
                for c in &p.source_cells {
                    out.extend_from_slice(&(*c as u64).to_le_bytes());
                }
                out
            }
        }
    }

    /// Checks domain and stability bounds against `spec`.
    pub fn check(&self, spec: &SimulatorSpec) -> Result<()> {
        if self.simulator_id() != spec.simulator_id {
            return Err(Error::UnstableParams(format!(
                "params are for {} but simulator is {}",
                self.simulator_id().as_str(),
                spec.simulator_id.as_str()
            )));
        }
        let ParamSet::Vesselgrid(p) = self else {
            return Ok(());
        };
        let unstable = |msg: String| Err(Error::UnstableParams(msg));
        for (name, v) in
            [("diffusion", p.diffusion), ("vx", p.vx), ("vy", p.vy), ("dt", p.dt), ("source_amp", p.source_amp)]
        {
            if !v.is_finite() {
                return unstable(format!("{name} must be finite"));
            }
        }
        if p.diffusion < 0.0 {
            return unstable("diffusion must be nonnegative".into());
        }
        if p.dt <= 0.0 {
            return unstable("dt must be positive".into());
        }
        if p.source_amp < 0.0 {
            return unstable("source_amp must be nonnegative".into());
        }
        if p.source_period == 0 {
            return unstable("source_period must be positive".into());
        }
        if let Some(&c) = p.source_cells.iter().next_back() {
            if c >= spec.cell_count() {
                return unstable(format!("source cell {c} outside grid"));
            }
        }
        let h = spec.cell_size_h;
        let diffusion_number = p.dt * p.diffusion / (h * h);
        if diffusion_number > 0.25 {
            return unstable(format!("dt*D/h^2 = {diffusion_number} exceeds 0.25"));
        }
        let courant = p.dt * (p.vx.abs() + p.vy.abs()) / h;
        if courant > 1.0 {
            return unstable(format!("dt*(|vx|+|vy|)/h = {courant} exceeds 1"));
        }
        Ok(())
    }
}

/// Partial parameter set applied on top of a parent's parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_cells: Option<BTreeSet<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_amp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_period: Option<u64>,
}

impl ParamOverrides {
    pub fn is_empty(&self) -> bool {
        *self == ParamOverrides::default()
    }

    pub fn apply(&self, base: &ParamSet) -> Result<ParamSet> {
        match base {
            ParamSet::Maxca if self.is_empty() => Ok(ParamSet::Maxca),
            ParamSet::Maxca => Err(Error::UnstableParams("maxca takes no parameters".into())),
            ParamSet::Vesselgrid(p) => {
                let mut p = p.clone();
                if let Some(v) = self.diffusion {
                    p.diffusion = v;
                }
                if let Some(v) = self.vx {
                    p.vx = v;
                }
                if let Some(v) = self.vy {
                    p.vy = v;
                }
                if let Some(v) = self.dt {
                    p.dt = v;
                }
                if let Some(v) = &self.source_cells {
                    p.source_cells = v.clone();
                }
                if let Some(v) = self.source_amp {
                    p.source_amp = v;
                }
                if let Some(v) = self.source_period {
                    p.source_period = v;
                }
                Ok(ParamSet::Vesselgrid(p))
            }
        }
    }

    /// Stable byte encoding used for duplicate-branch detection.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut real = |tag: u8, v: Option<f64>| {
            if let Some(v) = v {
                out.push(tag);
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        };
        real(1, self.diffusion);
        real(2, self.vx);
        real(3, self.vy);
        real(4, self.dt);
        real(6, self.source_amp);
        if let Some(cells) = &self.source_cells {
            out.push(5);
            out.extend_from_slice(&(cells.len() as u64).to_le_bytes());
            for c in cells {
                out.extend_from_slice(&(*c as u64).to_le_bytes());
            }
        }
        if let Some(p) = self.source_period {
            out.push(7);
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }
}

/// Cells whose update rule differs between two parameter sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AffectedCells {
    All,
    Some(BTreeSet<usize>),
}

pub fn affected_cells(old: &ParamSet, new: &ParamSet) -> AffectedCells {
    match (old, new) {
        (ParamSet::Vesselgrid(a), ParamSet::Vesselgrid(b)) => {
            let bits = |v: f64| v.to_bits();
            if bits(a.diffusion) != bits(b.diffusion)
                || bits(a.vx) != bits(b.vx)
                || bits(a.vy) != bits(b.vy)
                || bits(a.dt) != bits(b.dt)
            {
                return AffectedCells::All;
            }
            if a.source_cells != b.source_cells
                || bits(a.source_amp) != bits(b.source_amp)
                || a.source_period != b.source_period
            {
                return AffectedCells::Some(a.source_cells.union(&b.source_cells).copied().collect());
            }
            AffectedCells::Some(BTreeSet::new())
        }
        (ParamSet::Maxca, ParamSet::Maxca) => AffectedCells::Some(BTreeSet::new()),
        _ => AffectedCells::All,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cells {
    Real(Vec<f64>),
    Byte(Vec<u8>),
}

impl Cells {
    pub fn zeros(spec: &SimulatorSpec) -> Self {
        match spec.simulator_id {
            SimulatorId::Vesselgrid => Cells::Real(vec![0.0; spec.cell_count()]),
            SimulatorId::Maxca => Cells::Byte(vec![0; spec.cell_count()]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Cells::Real(v) => v.len(),
            Cells::Byte(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raw bit pattern of cell `i`.
    pub fn bits(&self, i: usize) -> u64 {
        match self {
            Cells::Real(v) => v[i].to_bits(),
            Cells::Byte(v) => v[i] as u64,
        }
    }

    pub fn set_bits(&mut self, i: usize, bits: u64) {
        match self {
            Cells::Real(v) => v[i] = f64::from_bits(bits),
            Cells::Byte(v) => v[i] = bits as u8,
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        match self {
            Cells::Real(v) => v[i],
            Cells::Byte(v) => v[i] as f64,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }

    pub fn width(&self) -> usize {
        match self {
            Cells::Real(_) => 8,
            Cells::Byte(_) => 1,
        }
    }

    /// Canonical little-endian, row-major layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Cells::Real(v) => {
                let mut out = Vec::with_capacity(v.len() * 8);
                for x in v {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
                out
            }
            Cells::Byte(v) => v.clone(),
        }
    }

    pub fn from_bytes(spec: &SimulatorSpec, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != spec.cell_count() * spec.cell_width() {
            return None;
        }
        Some(match spec.simulator_id {
            SimulatorId::Vesselgrid => Cells::Real(
                bytes.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect(),
            ),
            SimulatorId::Maxca => Cells::Byte(bytes.to_vec()),
        })
    }

    /// Indices where `self` and `other` differ bitwise, ascending.
    pub fn diff_indices(&self, other: &Cells) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bits(i) != other.bits(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub step_index: u64,
    pub cells: Cells,
}

impl FieldState {
    pub fn validate(&self, spec: &SimulatorSpec) -> Result<()> {
        let ok_kind = matches!(
            (&self.cells, spec.simulator_id),
            (Cells::Real(_), SimulatorId::Vesselgrid) | (Cells::Byte(_), SimulatorId::Maxca)
        );
        if !ok_kind || self.cells.len() != spec.cell_count() {
            return Err(Error::InvalidSpec("state does not match simulator spec".into()));
        }
        if let Cells::Real(v) = &self.cells {
            if let Some(cell) = v.iter().position(|x| x.is_nan()) {
                return Err(Error::NumericFault { step: self.step_index, cell });
            }
        }
        Ok(())
    }
}

/// Cells that changed at the most recent step, ascending and unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirtySet(Vec<usize>);

impl DirtySet {
    pub fn empty() -> Self {
        DirtySet(Vec::new())
    }

    pub fn all(spec: &SimulatorSpec) -> Self {
        DirtySet((0..spec.cell_count()).collect())
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        DirtySet(v)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn union(&self, other: impl IntoIterator<Item = usize>) -> Self {
        DirtySet::from_indices(self.0.iter().copied().chain(other))
    }
}

/// Dirty set for a state that was not produced by stepping: every non-zero
/// cell plus the forced cells. The all-zero unforced field is a fixed point
/// of both simulators, so no other cell can change on the first step.
pub fn initial_dirty(params: &ParamSet, state: &FieldState) -> DirtySet {
    let nonzero = (0..state.cells.len()).filter(|&i| state.cells.bits(i) != 0);
    match params {
        ParamSet::Vesselgrid(p) => DirtySet::from_indices(nonzero.chain(p.source_cells.iter().copied())),
        ParamSet::Maxca => DirtySet::from_indices(nonzero),
    }
}

pub fn init_state(spec: &SimulatorSpec, seed_cells: &BTreeMap<usize, f64>) -> Result<FieldState> {
    spec.validate()?;
    let mut cells = Cells::zeros(spec);
    for (&i, &v) in seed_cells {
        if i >= spec.cell_count() {
            return Err(Error::InvalidSeed(format!("cell index {i} outside {}x{} grid", spec.width, spec.height)));
        }
        match &mut cells {
            Cells::Real(c) => {
                if !v.is_finite() {
                    return Err(Error::InvalidSeed(format!("cell {i}: value {v} is not finite")));
                }
                c[i] = v;
            }
            Cells::Byte(c) => {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::InvalidSeed(format!("cell {i}: value {v} outside 0..=255")));
                }
                c[i] = v as u8;
            }
        }
    }
    Ok(FieldState { step_index: 0, cells })
}

fn check_inputs(spec: &SimulatorSpec, params: &ParamSet, state: &FieldState) -> Result<()> {
    params.check(spec)?;
    state.validate(spec)
}

#[inline]
fn vessel_cell(spec: &SimulatorSpec, p: &VesselParams, prev: &[f64], i: usize, forcing: f64) -> f64 {
    let (w, h) = (spec.width, spec.height);
    let (x, y) = (i % w, i / w);
    let u = prev[i];
    let west = if x > 0 { prev[i - 1] } else { u };
    let east = if x + 1 < w { prev[i + 1] } else { u };
    let north = if y > 0 { prev[i - w] } else { u };
    let south = if y + 1 < h { prev[i + w] } else { u };
    let dx = spec.cell_size_h;
    let lap = (east + west + north + south - 4.0 * u) / (dx * dx);
    let adv_x = if p.vx > 0.0 { p.vx * (u - west) / dx } else { p.vx * (east - u) / dx };
    let adv_y = if p.vy > 0.0 { p.vy * (u - north) / dx } else { p.vy * (south - u) / dx };
    let s = if p.source_cells.contains(&i) { forcing } else { 0.0 };
    u + p.dt * (p.diffusion * lap - (adv_x + adv_y) + s)
}

#[inline]
fn maxca_cell(spec: &SimulatorSpec, prev: &[u8], i: usize) -> u8 {
    spec.neighbors(i).fold(prev[i], |m, j| m.max(prev[j]))
}

fn fault_check(step: u64, cell: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericFault { step, cell })
    }
}

pub fn step_full(spec: &SimulatorSpec, params: &ParamSet, state: &FieldState) -> Result<FieldState> {
    check_inputs(spec, params, state)?;
    let step = state.step_index;
    let cells = match (&state.cells, params) {
        (Cells::Real(prev), ParamSet::Vesselgrid(p)) => {
            let forcing = p.forcing(Some(step));
            let mut next = Vec::with_capacity(prev.len());
            for i in 0..prev.len() {
                next.push(fault_check(step, i, vessel_cell(spec, p, prev, i, forcing))?);
            }
            Cells::Real(next)
        }
        (Cells::Byte(prev), ParamSet::Maxca) => {
            Cells::Byte((0..prev.len()).map(|i| maxca_cell(spec, prev, i)).collect())
        }
        _ => unreachable!("checked by check_inputs"),
    };
    Ok(FieldState { step_index: step + 1, cells })
}

/// Incremental step that also reports how many cells were recomputed.
pub fn step_incremental_counted(
    spec: &SimulatorSpec,
    params: &ParamSet,
    state: &FieldState,
    dirty: &DirtySet,
) -> Result<(FieldState, DirtySet, usize)> {
    check_inputs(spec, params, state)?;
    let n = spec.cell_count();
    if let Some(&bad) = dirty.indices().last() {
        if bad >= n {
            return Err(Error::InvalidSeed(format!("dirty index {bad} outside grid")));
        }
    }
    let step = state.step_index;
    let mut touched: Vec<usize> = Vec::with_capacity(dirty.len() * 5);
    for &i in dirty.indices() {
        touched.push(i);
        touched.extend(spec.neighbors(i));
    }
    let mut forcing = 0.0;
    if let ParamSet::Vesselgrid(p) = params {
        forcing = p.forcing(Some(step));
        let before = p.forcing(step.checked_sub(1));
        if forcing.to_bits() != before.to_bits() {
            touched.extend(p.source_cells.iter().copied());
        }
    }
    touched.sort_unstable();
    touched.dedup();

    let mut next = state.cells.clone();
    let mut changed = Vec::new();
    match (&state.cells, &mut next, params) {
        (Cells::Real(prev), Cells::Real(out), ParamSet::Vesselgrid(p)) => {
            for &i in &touched {
                let v = fault_check(step, i, vessel_cell(spec, p, prev, i, forcing))?;
                if v.to_bits() != prev[i].to_bits() {
                    changed.push(i);
                }
                out[i] = v;
            }
        }
        (Cells::Byte(prev), Cells::Byte(out), ParamSet::Maxca) => {
            for &i in &touched {
                let v = maxca_cell(spec, prev, i);
                if v != prev[i] {
                    changed.push(i);
                }
                out[i] = v;
            }
        }
        _ => unreachable!("checked by check_inputs"),
    }
    let recomputed = touched.len();
    Ok((FieldState { step_index: step + 1, cells: next }, DirtySet(changed), recomputed))
}

/// Recomputes only cells whose stencil intersects `dirty` (plus source cells
/// whose forcing changed). `dirty` must be exactly the set of cells that
/// changed on the step that produced `state`, under the same parameters.
pub fn step_incremental(
    spec: &SimulatorSpec,
    params: &ParamSet,
    state: &FieldState,
    dirty: &DirtySet,
) -> Result<(FieldState, DirtySet)> {
    step_incremental_counted(spec, params, state, dirty).map(|(s, d, _)| (s, d))
}

pub fn canonical_bytes(_spec: &SimulatorSpec, state: &FieldState) -> Vec<u8> {
    state.cells.to_bytes()
}
