//! Command-line harness over the navigation engine: build memory files, run
//! episode batches (one-shot or continual), and rescore recorded traces.

pub mod commands;
pub mod report;

pub use commands::{
    cmd_build_memory, cmd_run, cmd_score, scene_description, BackendChoice, BuildConfig,
    RunConfig, ScoreConfig, CHAT_TOKEN_ENV, EMBED_TOKEN_ENV,
};
pub use report::{EpisodeRow, RunReport, Summary};
