//! Two cooperative dialog agents describing an unseen video.
//!
//! Q-BOT sees only the first and last frame of a video plus the running
//! dialog; A-BOT sees the full visual features, the audio features and the
//! caption. After ten question-answer rounds Q-BOT emits a natural-language
//! description of the video. The crate covers data ingestion and synthesis,
//! the full model, cooperative training with dynamic history fusion, rollout
//! and metric evaluation.

pub mod tensor;
pub mod nn;
pub mod data;
pub mod attention;
pub mod encoders;
pub mod agents;
pub mod dialog;
pub mod training;
pub mod metrics;
