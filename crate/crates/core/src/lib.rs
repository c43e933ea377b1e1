//! Pyramidal multimodal transformer for video question answering.
//!
//! A clip is encoded into a `T × H × W × D` feature map and a question into
//! token features. The bottom-up pathway decomposes the map into spatial and
//! temporal streams at several resolutions and lets each attend to the
//! language; the top-down pathway fuses coarse context back into the fine
//! levels, and every level is read out and decoded into an answer.

pub mod bottom_up;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod top_down;
pub mod train;

pub use config::{ModelConfig, RunConfig, Task, TopDown};
pub use error::{Error, Result};
pub use graph::Graph;
pub use model::{Example, Forward, Pmt, Prediction};
