//! Building blocks for a SQL comment generation pipeline.
//!
//! * [`corpus`]: SQL ingestion and near-duplicate elimination (exact and MinHash/LSH).
//! * [`analysis`]: tolerant SQL scanning, structural features, difficulty strata.
//! * [`forge`]: SFT prompts, the negative-strategy sampler and DPO triple assembly.
//! * [`policy`]: a tabular softmax policy with exact LM, SFT and DPO objectives.
//! * [`metrics`]: BLEU-4, METEOR and ROUGE-L.
//! * [`review`]: human-evaluation statistics (rating aggregation, Fleiss' kappa).

pub mod analysis;
pub mod corpus;
pub mod forge;
pub mod hashing;
pub mod jsonl;
pub mod metrics;
pub mod policy;
pub mod review;
