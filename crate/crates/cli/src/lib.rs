//! Operator surface for the branching simulation engine: batch commands
//! over a store directory and an HTTP/JSON service.

pub mod commands;
pub mod render;
pub mod service;

use std::path::Path;

use branchsim::{Engine, Manifest, Result, Store};

/// Opens the engine persisted at `path`, creating an empty store there if
/// none exists. Without a path the engine lives in memory.
pub fn open_engine(path: Option<&Path>, checkpoint_interval: u64) -> Result<Engine> {
    match path {
        None => Ok(Engine::in_memory(checkpoint_interval)),
        Some(p) if p.join("manifest.json").exists() => Engine::load(Store::open(p)?),
        Some(p) => Ok(Engine::new(Store::create(p, Manifest::new(None))?, checkpoint_interval)),
    }
}
