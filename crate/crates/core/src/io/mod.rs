//! Configuration files, checkpoints, metrics logs and human-play sessions.

mod checkpoint;
mod config;
mod metrics;
pub mod play;

pub use checkpoint::{
    any_from_bytes, from_bytes, load_any, load_checkpoint, save_checkpoint, to_bytes, Checkpoint,
    CheckpointKind, Checkpointable, InverseMeta, PolicyMeta, ScoreMeta, FORMAT_VERSION, MAGIC,
};
pub use config::{parse_config, RunConfig, ScenarioConfig};
pub use metrics::{read_jsonl, JsonlWriter};
pub use play::{
    replay, ClientMsg, EntityView, EpisodeLog, Key, Mailbox, PlayConfig, PlaySession, PlaySetup,
    ServerMsg, SessionLog, PROTOCOL_VERSION,
};
