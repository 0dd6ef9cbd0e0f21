//! Annotation backend: expert review of draft comments, validation of
//! preference pairs and blind Likert rating.
//!
//! All state lives in [`Store`]; the axum layer in [`server`] only maps
//! requests and errors onto it.

pub mod server;
mod store;

pub use store::{
    Clock, Export, ItemState, KindProgress, ManualClock, Payload, Rater, RatingTask, Store, StoreError, StoreInputs,
    Submission, SubmissionBody, SystemClock, WorkItem, WorkKind,
};

pub const DEFAULT_LEASE_MS: u64 = 30 * 60 * 1000;
