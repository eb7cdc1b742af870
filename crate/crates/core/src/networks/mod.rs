//! Toy encoder with probe points, depth decoder, pose net, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use self::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Stage};
pub use self::config::{DecoderSpec, EncoderSpec, ModelConfig, PoseSpec, PROBE_IDS};
pub use self::model::{EncoderOutput, Model, ProbeActivations, DEPTH_DECODER, ENCODER, MASK_TOKEN, MP_HEAD, POSE};
