//! Space-time queries over stored trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::History;
use crate::sim::{Cells, SimulatorSpec};
use crate::store::{write_delta_block, write_header, write_snapshot_block, StateDelta};
use crate::tree::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub node: NodeId,
    pub x: f64,
    pub y: f64,
    pub step: u64,
}

/// Bilinear sample of the field at continuous cell coordinates. Integer
/// coordinates return the stored cell value; steps are never interpolated.
pub fn sample_point(history: &impl History, q: &ProbeQuery) -> Result<f64> {
    history.lineage_window(q.node)?;
    let spec = history.spec()?;
    let (max_x, max_y) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
    if !(q.x.is_finite() && q.y.is_finite()) || q.x < 0.0 || q.y < 0.0 || q.x > max_x || q.y > max_y {
        return Err(Error::InvalidProbe(format!("({}, {}) outside [0, {max_x}] x [0, {max_y}]", q.x, q.y)));
    }
    let state = history.state_at(q.node, q.step)?;
    Ok(bilinear(&spec, &state.cells, q.x, q.y))
}

fn bilinear(spec: &SimulatorSpec, cells: &Cells, x: f64, y: f64) -> f64 {
    let x0 = (x.floor() as usize).min(spec.width - 1);
    let y0 = (y.floor() as usize).min(spec.height - 1);
    let x1 = (x0 + 1).min(spec.width - 1);
    let y1 = (y0 + 1).min(spec.height - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |cx: usize, cy: usize| cells.value(cy * spec.width + cx);
    let (a, b, c, d) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
    let lerp = |p: f64, q: f64, t: f64| if t == 0.0 { p } else { p + t * (q - p) };
    let top = lerp(a, b, fx);
    let bottom = lerp(c, d, fx);
    let v = lerp(top, bottom, fy);
    let lo = a.min(b).min(c).min(d);
    let hi = a.max(b).max(c).max(d);
    v.clamp(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U8,
}

impl Dtype {
    fn of(cells: &Cells) -> Self {
        match cells {
            Cells::Real(_) => Dtype::F64,
            Cells::Byte(_) => Dtype::U8,
        }
    }

    fn bits_of(self, v: f64) -> u64 {
        match self {
            Dtype::F64 => v.to_bits(),
            Dtype::U8 => v as u8 as u64,
        }
    }

    fn value_of(self, bits: u64) -> f64 {
        match self {
            Dtype::F64 => f64::from_bits(bits),
            Dtype::U8 => bits as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FrameWire", try_from = "FrameWire")]
pub struct Frame {
    pub step: u64,
    pub cells: Cells,
}

#[derive(Serialize, Deserialize)]
struct FrameWire {
    step: u64,
    dtype: Dtype,
    cells: Vec<f64>,
}

impl From<Frame> for FrameWire {
    fn from(f: Frame) -> Self {
        FrameWire { step: f.step, dtype: Dtype::of(&f.cells), cells: f.cells.values() }
    }
}

impl TryFrom<FrameWire> for Frame {
    type Error = String;

    fn try_from(w: FrameWire) -> std::result::Result<Self, String> {
        let cells = match w.dtype {
            Dtype::F64 => Cells::Real(w.cells),
            Dtype::U8 => Cells::Byte(
                w.cells
                    .into_iter()
                    .map(|v| if (0.0..=255.0).contains(&v) { Ok(v as u8) } else { Err(format!("{v} is not a byte")) })
                    .collect::<std::result::Result<_, _>>()?,
            ),
        };
        Ok(Frame { step: w.step, cells })
    }
}

/// Cells that changed relative to the previous frame, ascending by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FrameDeltaWire", from = "FrameDeltaWire")]
pub struct FrameDelta {
    pub step: u64,
    pub dtype: Dtype,
    pub entries: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
struct FrameDeltaWire {
    step: u64,
    dtype: Dtype,
    entries: Vec<(u32, f64)>,
}

impl From<FrameDelta> for FrameDeltaWire {
    fn from(d: FrameDelta) -> Self {
        let entries = d.entries.iter().map(|&(i, b)| (i, d.dtype.value_of(b))).collect();
        FrameDeltaWire { step: d.step, dtype: d.dtype, entries }
    }
}

impl From<FrameDeltaWire> for FrameDelta {
    fn from(w: FrameDeltaWire) -> Self {
        let entries = w.entries.iter().map(|&(i, v)| (i, w.dtype.bits_of(v))).collect();
        FrameDelta { step: w.step, dtype: w.dtype, entries }
    }
}

impl FrameDelta {
    pub fn apply(&self, frame: &mut Frame) {
        for &(i, bits) in &self.entries {
            frame.cells.set_bits(i as usize, bits);
        }
        frame.step = self.step;
    }
}

pub fn extract_frame(history: &impl History, node: NodeId, step: u64) -> Result<Frame> {
    let state = history.state_at(node, step)?;
    Ok(Frame { step, cells: state.cells })
}

/// Deltas for `from + 1 ..= to`, each relative to the frame before it.
pub fn frame_deltas(history: &impl History, node: NodeId, from: u64, to: u64) -> Result<Vec<FrameDelta>> {
    if from >= to {
        return Err(Error::InvalidRange { from, to });
    }
    let (start, end) = history.lineage_window(node)?;
    if from < start || to > end {
        let step = if from < start { from } else { to };
        return Err(Error::StepNotStored { step, start, end });
    }
    let dtype = match history.spec()?.cell_width() {
        8 => Dtype::F64,
        _ => Dtype::U8,
    };
    (from + 1..=to)
        .map(|s| {
            let StateDelta { entries, .. } = history.delta_at(node, s)?;
            Ok(FrameDelta { step: s, dtype, entries })
        })
        .collect()
}

/// Folds `deltas` over `first`, returning every frame including `first`.
pub fn fold_frames(first: Frame, deltas: &[FrameDelta]) -> Vec<Frame> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut cur = first;
    out.push(cur.clone());
    for d in deltas {
        d.apply(&mut cur);
        out.push(cur.clone());
    }
    out
}

/// Bulk-transfer encoding: BSIM1 header, one snapshot block for `first`,
/// then one delta block per entry of `deltas`.
pub fn encode_frames_binary(spec: &SimulatorSpec, first: &Frame, deltas: &[FrameDelta]) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out);
    write_snapshot_block(&mut out, first.step, &first.cells);
    for d in deltas {
        let delta = StateDelta { step_index: d.step, entries: d.entries.clone() };
        write_delta_block(&mut out, &delta, spec.cell_width());
    }
    out
}
