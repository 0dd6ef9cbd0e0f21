//! Pipeline driver behind the `sqlcomment` binary.

pub mod annotation;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod stages;
