//! Content-digested segment storage.
//!
//! Every scenario node owns one segment: a full snapshot at its start step and
//! every `checkpoint_interval` steps after it, plus one delta per step. A node
//! may additionally carry a [`SuffixLink`] that serves the tail of its window
//! from another node's segment.
//!
//! On disk a store is a directory holding `manifest.json` and one
//! `segments/<node>.seg` file per segment in the BSIM1 block layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::sim::{canonical_bytes, Cells, FieldState, SimulatorSpec};
use crate::tree::NodeId;

pub const MAGIC: &[u8; 6] = b"BSIM1\0";
pub const FORMAT_VERSION: u16 = 1;
pub const DIGEST_ALGORITHM: &str = "sha256";
pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 10;

const TAG_SNAPSHOT: u8 = b'S';
const TAG_DELTA: u8 = b'D';

/// SHA-256 over canonical bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn algorithm(&self) -> &'static str {
        DIGEST_ALGORITHM
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest(out))
    }

    /// Digest of the concatenation of `parts`.
    pub fn combine<'a>(parts: impl IntoIterator<Item = &'a Digest>) -> Self {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.0);
        }
        Digest(h.finalize().into())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

pub fn digest_state(spec: &SimulatorSpec, state: &FieldState) -> Digest {
    Digest::of(&canonical_bytes(spec, state))
}

/// Changed cells of one step, as raw bit patterns, ascending by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDelta {
    pub step_index: u64,
    pub entries: Vec<(u32, u64)>,
}

impl StateDelta {
    pub fn between(prev: &Cells, next: &Cells, step_index: u64) -> Self {
        let entries = prev.diff_indices(next).into_iter().map(|i| (i as u32, next.bits(i))).collect();
        StateDelta { step_index, entries }
    }

    pub fn apply(&self, cells: &mut Cells) {
        for &(i, bits) in &self.entries {
            cells.set_bits(i as usize, bits);
        }
    }
}

/// One node's own trajectory segment.
#[derive(Debug, Clone)]
pub struct SegmentRecord {
    pub node_id: NodeId,
    pub start_step: u64,
    pub end_step: u64,
    pub checkpoint_interval: u64,
    snapshots: BTreeMap<u64, Cells>,
    deltas: Vec<StateDelta>,
    step_digests: Vec<Digest>,
    tail: Cells,
    spec: SimulatorSpec,
}

impl SegmentRecord {
    pub fn new(spec: &SimulatorSpec, node_id: NodeId, start: &FieldState, checkpoint_interval: u64) -> Self {
        let interval = checkpoint_interval.max(1);
        SegmentRecord {
            node_id,
            start_step: start.step_index,
            end_step: start.step_index,
            checkpoint_interval: interval,
            snapshots: BTreeMap::from([(start.step_index, start.cells.clone())]),
            deltas: Vec::new(),
            step_digests: vec![digest_state(spec, start)],
            tail: start.cells.clone(),
            spec: spec.clone(),
        }
    }

    pub fn final_digest(&self) -> Digest {
        *self.step_digests.last().expect("segment has a start digest")
    }

    pub fn tail(&self) -> FieldState {
        FieldState { step_index: self.end_step, cells: self.tail.clone() }
    }

    pub fn snapshot_steps(&self) -> impl Iterator<Item = u64> + '_ {
        self.snapshots.keys().copied()
    }

    pub fn deltas(&self) -> &[StateDelta] {
        &self.deltas
    }

    pub fn append_step(&mut self, prev: &FieldState, next: &FieldState) -> Result<()> {
        if prev.step_index != self.end_step || next.step_index != self.end_step + 1 {
            return Err(Error::OutOfOrderAppend { expected: self.end_step, got: prev.step_index });
        }
        let delta = StateDelta::between(&self.tail, &next.cells, next.step_index);
        self.push_delta(delta);
        debug_assert_eq!(self.tail, next.cells);
        Ok(())
    }

    fn push_delta(&mut self, delta: StateDelta) {
        delta.apply(&mut self.tail);
        self.end_step = delta.step_index;
        self.deltas.push(delta);
        if (self.end_step - self.start_step).is_multiple_of(self.checkpoint_interval) {
            self.snapshots.insert(self.end_step, self.tail.clone());
        }
        let state = FieldState { step_index: self.end_step, cells: self.tail.clone() };
        self.step_digests.push(digest_state(&self.spec, &state));
    }

    fn check_range(&self, step: u64) -> Result<()> {
        if step < self.start_step || step > self.end_step {
            return Err(Error::StepNotStored { step, start: self.start_step, end: self.end_step });
        }
        Ok(())
    }

    /// Reconstructs the state at `step` and reports how many deltas were applied.
    pub fn state_at_counted(&self, step: u64) -> Result<(FieldState, u64)> {
        self.check_range(step)?;
        let (&snap_step, snap) = self.snapshots.range(..=step).next_back().expect("start snapshot present");
        let mut cells = snap.clone();
        let from = (snap_step - self.start_step) as usize;
        let to = (step - self.start_step) as usize;
        for d in &self.deltas[from..to] {
            d.apply(&mut cells);
        }
        Ok((FieldState { step_index: step, cells }, step - snap_step))
    }

    pub fn get_state_at(&self, step: u64) -> Result<FieldState> {
        self.state_at_counted(step).map(|(s, _)| s)
    }

    pub fn digest_at(&self, step: u64) -> Result<Digest> {
        self.check_range(step)?;
        Ok(self.step_digests[(step - self.start_step) as usize])
    }

    /// The delta that produced `step`; requires `start_step < step <= end_step`.
    pub fn delta_at(&self, step: u64) -> Result<&StateDelta> {
        if step <= self.start_step || step > self.end_step {
            return Err(Error::StepNotStored { step, start: self.start_step + 1, end: self.end_step });
        }
        Ok(&self.deltas[(step - self.start_step - 1) as usize])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.node_id.0.to_le_bytes());
        out.extend_from_slice(&self.start_step.to_le_bytes());
        out.extend_from_slice(&self.end_step.to_le_bytes());
        out.extend_from_slice(&self.checkpoint_interval.to_le_bytes());
        out.push(self.spec.cell_width() as u8);
        out.extend_from_slice(&(self.spec.cell_count() as u32).to_le_bytes());
        for (&step, cells) in &self.snapshots {
            write_snapshot_block(&mut out, step, cells);
        }
        for d in &self.deltas {
            write_delta_block(&mut out, d, self.spec.cell_width());
        }
        out
    }

    /// Decodes a segment file and rebuilds digests by replaying its deltas.
    /// Stored snapshots must agree with the delta chain.
    pub fn decode(spec: &SimulatorSpec, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        check_header(&mut r)?;
        let node_id = NodeId(r.u64()?);
        let start_step = r.u64()?;
        let end_step = r.u64()?;
        let interval = r.u64()?;
        let width = r.u8()? as usize;
        let count = r.u32()? as usize;
        if width != spec.cell_width() || count != spec.cell_count() || interval == 0 || end_step < start_step {
            return Err(Error::CorruptStore(format!("segment {node_id}: header does not match store spec")));
        }
        let mut snapshots = BTreeMap::new();
        let mut deltas = Vec::new();
        while !r.is_empty() {
            match read_block(&mut r, spec)? {
                Block::Snapshot(step, cells) => {
                    snapshots.insert(step, cells);
                }
                Block::Delta(d) => deltas.push(d),
            }
        }
        let start = snapshots
            .get(&start_step)
            .cloned()
            .ok_or_else(|| Error::CorruptStore(format!("segment {node_id}: missing start snapshot")))?;
        let mut seg = SegmentRecord::new(spec, node_id, &FieldState { step_index: start_step, cells: start }, interval);
        for d in deltas {
            if d.step_index != seg.end_step + 1 || d.entries.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::CorruptStore(format!("segment {node_id}: malformed delta at {}", d.step_index)));
            }
            seg.push_delta(d);
        }
        if seg.end_step != end_step {
            return Err(Error::CorruptStore(format!("segment {node_id}: truncated")));
        }
        if seg.snapshots != snapshots {
            return Err(Error::CorruptStore(format!("segment {node_id}: snapshots disagree with deltas")));
        }
        Ok(seg)
    }
}

pub fn write_header(out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

pub fn write_snapshot_block(out: &mut Vec<u8>, step: u64, cells: &Cells) {
    let body = cells.to_bytes();
    out.push(TAG_SNAPSHOT);
    out.extend_from_slice(&((8 + body.len()) as u32).to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&body);
}

pub fn write_delta_block(out: &mut Vec<u8>, delta: &StateDelta, cell_width: usize) {
    let len = 8 + 4 + delta.entries.len() * (4 + cell_width);
    out.push(TAG_DELTA);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&delta.step_index.to_le_bytes());
    out.extend_from_slice(&(delta.entries.len() as u32).to_le_bytes());
    for &(i, bits) in &delta.entries {
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes()[..cell_width]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Snapshot(u64, Cells),
    Delta(StateDelta),
}

/// Decodes a header followed by snapshot and delta blocks.
pub fn decode_blocks(spec: &SimulatorSpec, bytes: &[u8]) -> Result<Vec<Block>> {
    let mut r = Reader::new(bytes);
    check_header(&mut r)?;
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(read_block(&mut r, spec)?);
    }
    Ok(out)
}

fn check_header(r: &mut Reader<'_>) -> Result<()> {
    if r.take(6)? != MAGIC {
        return Err(Error::CorruptStore("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptStore(format!("unsupported version {version}")));
    }
    Ok(())
}

fn read_block(r: &mut Reader<'_>, spec: &SimulatorSpec) -> Result<Block> {
    let tag = r.u8()?;
    let len = r.u32()? as usize;
    let mut body = Reader::new(r.take(len)?);
    let step = body.u64()?;
    let width = spec.cell_width();
    let block = match tag {
        TAG_SNAPSHOT => {
            let cells = Cells::from_bytes(spec, body.take(body.remaining())?)
                .ok_or_else(|| Error::CorruptStore("snapshot size mismatch".into()))?;
            Block::Snapshot(step, cells)
        }
        TAG_DELTA => {
            let n = body.u32()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let i = body.u32()?;
                if i as usize >= spec.cell_count() {
                    return Err(Error::CorruptStore(format!("delta index {i} out of range")));
                }
                let mut raw = [0u8; 8];
                raw[..width].copy_from_slice(body.take(width)?);
                entries.push((i, u64::from_le_bytes(raw)));
            }
            Block::Delta(StateDelta { step_index: step, entries })
        }
        other => return Err(Error::CorruptStore(format!("unknown block tag {other:#x}"))),
    };
    if !body.is_empty() {
        return Err(Error::CorruptStore("trailing bytes in block".into()));
    }
    Ok(block)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    fn remaining(&self) -> usize {
        self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::CorruptStore("unexpected end of data".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serves `[local_start, local_start + len]` of a node from a donor node's
/// window starting at `donor_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixLink {
    pub donor: NodeId,
    pub donor_start: u64,
    pub local_start: u64,
    pub len: u64,
}

impl SuffixLink {
    pub fn end(&self) -> u64 {
        self.local_start + self.len
    }

    fn donor_step(&self, step: u64) -> u64 {
        self.donor_start + (step - self.local_start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentIndexEntry {
    pub node_id: NodeId,
    pub file: String,
    pub start_step: u64,
    pub end_step: u64,
    pub checkpoint_interval: u64,
    pub final_digest: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<SuffixLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u16,
    pub digest_algorithm: String,
    pub spec: Option<SimulatorSpec>,
    #[serde(default)]
    pub segments: Vec<SegmentIndexEntry>,
    /// Engine state (scenario forest, ledger, memo table).
    #[serde(default)]
    pub app: serde_json::Value,
}

impl Manifest {
    pub fn new(spec: Option<SimulatorSpec>) -> Self {
        Manifest {
            format: "BSIM1".into(),
            format_version: FORMAT_VERSION,
            digest_algorithm: DIGEST_ALGORITHM.into(),
            spec,
            segments: Vec::new(),
            app: serde_json::Value::Null,
        }
    }
}

type SharedSegment = Arc<RwLock<SegmentRecord>>;

/// Segment store. Each segment sits behind its own lock: readers of one
/// segment never block appends to another.
#[derive(Debug)]
pub struct Store {
    path: Option<PathBuf>,
    spec: RwLock<Option<SimulatorSpec>>,
    app: RwLock<serde_json::Value>,
    segments: RwLock<BTreeMap<NodeId, SharedSegment>>,
    links: RwLock<BTreeMap<NodeId, SuffixLink>>,
}

const MANIFEST_FILE: &str = "manifest.json";
const SEGMENT_DIR: &str = "segments";

impl Store {
    pub fn in_memory(spec: Option<SimulatorSpec>) -> Self {
        Store {
            path: None,
            spec: RwLock::new(spec),
            app: RwLock::new(serde_json::Value::Null),
            segments: RwLock::new(BTreeMap::new()),
            links: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn create(path: impl AsRef<Path>, manifest: Manifest) -> Result<Self> {
        let path = path.as_ref();
        if path.exists() && fs::read_dir(path)?.next().is_some() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} is not empty", path.display()),
            )));
        }
        if !manifest.segments.is_empty() {
            return Err(Error::CorruptStore("new store manifest must not list segments".into()));
        }
        fs::create_dir_all(path.join(SEGMENT_DIR))?;
        let store = Store { path: Some(path.to_path_buf()), ..Store::in_memory(manifest.spec) };
        *store.app.write().unwrap() = manifest.app;
        store.flush()?;
        Ok(store)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read(path.join(MANIFEST_FILE))
            .map_err(|e| Error::CorruptStore(format!("cannot read manifest in {}: {e}", path.display())))?;
        let manifest: Manifest =
            serde_json::from_slice(&raw).map_err(|e| Error::CorruptStore(format!("manifest: {e}")))?;
        if manifest.format != "BSIM1" || manifest.format_version != FORMAT_VERSION {
            return Err(Error::CorruptStore(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.format_version
            )));
        }
        if manifest.digest_algorithm != DIGEST_ALGORITHM {
            return Err(Error::CorruptStore(format!("unsupported digest {}", manifest.digest_algorithm)));
        }
        let store = Store { path: Some(path.to_path_buf()), ..Store::in_memory(manifest.spec.clone()) };
        *store.app.write().unwrap() = manifest.app;
        if !manifest.segments.is_empty() {
            let spec =
                manifest.spec.clone().ok_or_else(|| Error::CorruptStore("segments present without spec".into()))?;
            let mut segs = store.segments.write().unwrap();
            let mut links = store.links.write().unwrap();
            for entry in &manifest.segments {
                let bytes = fs::read(path.join(SEGMENT_DIR).join(&entry.file))
                    .map_err(|e| Error::CorruptStore(format!("segment {}: {e}", entry.file)))?;
                let seg = SegmentRecord::decode(&spec, &bytes)?;
                if seg.node_id != entry.node_id
                    || seg.start_step != entry.start_step
                    || seg.end_step != entry.end_step
                    || seg.final_digest() != entry.final_digest
                {
                    return Err(Error::CorruptStore(format!("segment {} disagrees with manifest", entry.file)));
                }
                if let Some(link) = entry.link {
                    links.insert(entry.node_id, link);
                }
                segs.insert(entry.node_id, Arc::new(RwLock::new(seg)));
            }
        }
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn spec(&self) -> Option<SimulatorSpec> {
        self.spec.read().unwrap().clone()
    }

    /// Sets the store's spec on first use; later calls must agree.
    pub fn bind_spec(&self, spec: &SimulatorSpec) -> Result<()> {
        let mut cur = self.spec.write().unwrap();
        match &*cur {
            Some(existing) if existing != spec => {
                Err(Error::InvalidSpec("store already holds a different simulator spec".into()))
            }
            Some(_) => Ok(()),
            None => {
                *cur = Some(spec.clone());
                Ok(())
            }
        }
    }

    pub fn app_state(&self) -> serde_json::Value {
        self.app.read().unwrap().clone()
    }

    pub fn set_app_state(&self, value: serde_json::Value) {
        *self.app.write().unwrap() = value;
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(self.spec());
        let links = self.links.read().unwrap();
        for (id, seg) in self.segments.read().unwrap().iter() {
            let seg = seg.read().unwrap();
            m.segments.push(SegmentIndexEntry {
                node_id: *id,
                file: format!("{}.seg", id.0),
                start_step: seg.start_step,
                end_step: seg.end_step,
                checkpoint_interval: seg.checkpoint_interval,
                final_digest: seg.final_digest(),
                link: links.get(id).copied(),
            });
        }
        m.app = self.app_state();
        m
    }

    /// Writes every segment and the manifest. No-op for in-memory stores.
    pub fn flush(&self) -> Result<()> {
        let Some(root) = &self.path else { return Ok(()) };
        let dir = root.join(SEGMENT_DIR);
        fs::create_dir_all(&dir)?;
        for (id, seg) in self.segments.read().unwrap().iter() {
            let bytes = seg.read().unwrap().encode();
            write_atomic(&dir.join(format!("{}.seg", id.0)), &bytes)?;
        }
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        write_atomic(&root.join(MANIFEST_FILE), &manifest)
    }

    pub fn create_segment(&self, node: NodeId, start: &FieldState, checkpoint_interval: u64) -> Result<()> {
        let spec = self.spec().ok_or_else(|| Error::InvalidSpec("store has no spec".into()))?;
        start.validate(&spec)?;
        let seg = SegmentRecord::new(&spec, node, start, checkpoint_interval);
        self.segments.write().unwrap().insert(node, Arc::new(RwLock::new(seg)));
        Ok(())
    }

    pub fn has_segment(&self, node: NodeId) -> bool {
        self.segments.read().unwrap().contains_key(&node)
    }

    pub fn segment(&self, node: NodeId) -> Result<SharedSegment> {
        self.segments.read().unwrap().get(&node).cloned().ok_or(Error::UnknownNode(node))
    }

    pub fn link(&self, node: NodeId) -> Option<SuffixLink> {
        self.links.read().unwrap().get(&node).copied()
    }

    pub fn set_link(&self, node: NodeId, link: SuffixLink) -> Result<()> {
        let own_end = self.segment(node)?.read().unwrap().end_step;
        if link.local_start != own_end {
            return Err(Error::OutOfOrderAppend { expected: own_end, got: link.local_start });
        }
        self.links.write().unwrap().insert(node, link);
        Ok(())
    }

    /// Copies a linked suffix into the node's own segment and drops the link,
    /// so the node can be extended. Returns the number of steps copied.
    pub fn unlink(&self, node: NodeId) -> Result<u64> {
        let Some(link) = self.link(node) else { return Ok(0) };
        let seg = self.segment(node)?;
        loop {
            let own_end = seg.read().unwrap().end_step;
            if own_end >= link.end() {
                break;
            }
            let delta = self.delta_at(node, own_end + 1)?;
            seg.write().unwrap().push_delta(delta);
        }
        self.links.write().unwrap().remove(&node);
        Ok(link.len)
    }

    /// Start and end of a node's window, including any linked suffix.
    pub fn window(&self, node: NodeId) -> Result<(u64, u64)> {
        let seg = self.segment(node)?;
        let seg = seg.read().unwrap();
        let end = self.link(node).map_or(seg.end_step, |l| l.end());
        Ok((seg.start_step, end))
    }

    pub fn append_step(&self, node: NodeId, prev: &FieldState, next: &FieldState) -> Result<()> {
        if self.link(node).is_some() {
            return Err(Error::OutOfOrderAppend { expected: self.window(node)?.1, got: prev.step_index });
        }
        let seg = self.segment(node)?;
        let mut seg = seg.write().unwrap();
        seg.append_step(prev, next)
    }

    /// Reconstructs `step` of `node`, following a suffix link when needed.
    /// The second value counts delta applications.
    pub fn state_at_counted(&self, node: NodeId, step: u64) -> Result<(FieldState, u64)> {
        let seg = self.segment(node)?;
        let own_end = seg.read().unwrap().end_step;
        if step > own_end {
            if let Some(link) = self.link(node).filter(|l| step <= l.end()) {
                let (mut state, n) = self.state_at_counted(link.donor, link.donor_step(step))?;
                state.step_index = step;
                return Ok((state, n));
            }
        }
        let seg = seg.read().unwrap();
        seg.state_at_counted(step).map_err(|e| self.widen(node, e))
    }

    pub fn get_state_at(&self, node: NodeId, step: u64) -> Result<FieldState> {
        self.state_at_counted(node, step).map(|(s, _)| s)
    }

    pub fn digest_at(&self, node: NodeId, step: u64) -> Result<Digest> {
        let seg = self.segment(node)?;
        let seg = seg.read().unwrap();
        if step > seg.end_step {
            if let Some(link) = self.link(node).filter(|l| step <= l.end()) {
                drop(seg);
                return self.digest_at(link.donor, link.donor_step(step));
            }
        }
        seg.digest_at(step).map_err(|e| self.widen(node, e))
    }

    /// Delta producing `step`, with its step index rewritten to `step`.
    pub fn delta_at(&self, node: NodeId, step: u64) -> Result<StateDelta> {
        let seg = self.segment(node)?;
        let seg = seg.read().unwrap();
        if step > seg.end_step {
            if let Some(link) = self.link(node).filter(|l| step <= l.end()) {
                drop(seg);
                let mut d = self.delta_at(link.donor, link.donor_step(step))?;
                d.step_index = step;
                return Ok(d);
            }
        }
        seg.delta_at(step).cloned().map_err(|e| self.widen(node, e))
    }

    /// Final live state of a node (end of window).
    pub fn tail(&self, node: NodeId) -> Result<FieldState> {
        match self.link(node) {
            Some(l) => self.get_state_at(node, l.end()),
            None => Ok(self.segment(node)?.read().unwrap().tail()),
        }
    }

    fn widen(&self, node: NodeId, e: Error) -> Error {
        match e {
            Error::StepNotStored { step, start, .. } => {
                let end = self.window(node).map(|w| w.1).unwrap_or(start);
                Error::StepNotStored { step, start, end }
            }
            e => e,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}
