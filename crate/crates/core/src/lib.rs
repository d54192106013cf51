//! Core engine for memory-augmented navigation on viewpoint graphs.
//!
//! An agent navigates a graph of viewpoints (nodes with positions, landmark
//! tokens and panoramic image references) by following natural-language
//! instructions. Around that sits a continual-learning loop:
//!
//! - [`env`] holds the graph world, episodes and the standard navigation
//!   metrics (NE, SR, OSR, SPL).
//! - [`embedding`] provides pluggable text/image embedders, instruction-aware
//!   attention fusion of candidate views, and cosine similarity.
//! - [`memory`] stores per-viewpoint experience units behind an exact flat
//!   cosine index with bidirectional unit/index lookup, plus the experience
//!   filter that keeps the store compact.
//! - [`ragp`] runs the per-step loop: observe, expand the topological map,
//!   fuse, retrieve, synthesize a navigation rule, assemble the prompt,
//!   parse the backend's decision, move or stop.
//! - [`reflection`] classifies finished episodes (success, MRD, FGR, PGC),
//!   extracts the first wrong step, and commits memory updates.
//! - [`policy`] implements decision backends behind one contract: a scripted
//!   oracle, a deterministic greedy embedding policy, and an HTTP chat client.
//! - [`fixtures`] builds small deterministic worlds used by tests and demos.

pub mod embedding;
pub mod env;
pub mod fixtures;
pub mod memory;
pub mod policy;
pub mod ragp;
pub mod reflection;
