//! Trajectory equivalence: two trajectories are equivalent on an interval
//! when an observation of their states yields identical bytes at every step.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::History;
use crate::sim::{canonical_bytes, Cells, FieldState, SimulatorSpec};
use crate::store::Digest;
use crate::tree::NodeId;

/// Rectangle of cells, in cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    #[default]
    FullState,
    RegionOfInterest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub mode: ObservationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Roi>,
}

impl ObservationSpec {
    pub fn full_state() -> Self {
        ObservationSpec { mode: ObservationMode::FullState, roi: None }
    }

    pub fn region(roi: Roi) -> Self {
        ObservationSpec { mode: ObservationMode::RegionOfInterest, roi: Some(roi) }
    }

    pub fn check(&self, spec: &SimulatorSpec) -> Result<()> {
        if self.mode == ObservationMode::FullState {
            return Ok(());
        }
        let roi = self.roi.ok_or_else(|| Error::InvalidObservation("region_of_interest requires roi".into()))?;
        if roi.width == 0 || roi.height == 0 {
            return Err(Error::InvalidObservation("roi must be non-empty".into()));
        }
        if roi.x + roi.width > spec.width || roi.y + roi.height > spec.height {
            return Err(Error::InvalidObservation(format!(
                "roi {}x{} at ({}, {}) exceeds {}x{} grid",
                roi.width, roi.height, roi.x, roi.y, spec.width, spec.height
            )));
        }
        Ok(())
    }
}

pub fn observe(spec: &SimulatorSpec, state: &FieldState, obs: &ObservationSpec) -> Result<Vec<u8>> {
    obs.check(spec)?;
    let Some(roi) = obs.roi.filter(|_| obs.mode == ObservationMode::RegionOfInterest) else {
        return Ok(canonical_bytes(spec, state));
    };
    let mut out = Vec::with_capacity(roi.width * roi.height * spec.cell_width());
    for y in roi.y..roi.y + roi.height {
        let row = y * spec.width;
        for x in roi.x..roi.x + roi.width {
            match &state.cells {
                Cells::Real(v) => out.extend_from_slice(&v[row + x].to_bits().to_le_bytes()),
                Cells::Byte(v) => out.push(v[row + x]),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDigest {
    pub node_id: NodeId,
    pub interval: (u64, u64),
    pub per_step_digests: Vec<Digest>,
    pub combined: Digest,
}

impl TrajectoryDigest {
    pub fn recompute_combined(&self) -> Digest {
        Digest::combine(&self.per_step_digests)
    }
}

pub fn trajectory_digest(
    history: &impl History,
    node: NodeId,
    interval: (u64, u64),
    obs: &ObservationSpec,
) -> Result<TrajectoryDigest> {
    let (t0, t1) = interval;
    if t0 > t1 {
        return Err(Error::InvalidRange { from: t0, to: t1 });
    }
    let spec = history.spec()?;
    obs.check(&spec)?;
    let (start, end) = history.lineage_window(node)?;
    if t0 < start || t1 > end {
        let step = if t0 < start { t0 } else { t1 };
        return Err(Error::StepNotStored { step, start, end });
    }
    let per_step_digests = (t0..=t1)
        .map(|t| {
            if obs.mode == ObservationMode::FullState {
                history.digest_at(node, t)
            } else {
                Ok(Digest::of(&observe(&spec, &history.state_at(node, t)?, obs)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = Digest::combine(&per_step_digests);
    Ok(TrajectoryDigest { node_id: node, interval, per_step_digests, combined })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceClass {
    pub representative_digest: Digest,
    pub members: BTreeSet<NodeId>,
}

/// Groups `nodes` by combined trajectory digest, sorted by digest.
pub fn partition_classes(
    history: &impl History,
    nodes: &[NodeId],
    interval: (u64, u64),
    obs: &ObservationSpec,
) -> Result<Vec<EquivalenceClass>> {
    let mut groups: BTreeMap<Digest, BTreeSet<NodeId>> = BTreeMap::new();
    for &n in nodes {
        let td = trajectory_digest(history, n, interval, obs)?;
        groups.entry(td.combined).or_default().insert(n);
    }
    Ok(groups
        .into_iter()
        .map(|(representative_digest, members)| EquivalenceClass { representative_digest, members })
        .collect())
}
