//! Tolerant SQL scanning and structural feature extraction.
//!
//! Nothing here builds an AST. The scanner is keyword and parenthesis driven so
//! that it copes with MySQL, PostgreSQL and T-SQL flavoured input alike, and it
//! never fails: fragments it cannot make sense of simply contribute nothing.

mod features;
pub mod lexer;
mod strata;

pub use features::{extract_features, FeatureVector};
pub use strata::{
    classify_difficulty, construct_tags, stratified_sample, DifficultyStratum, DifficultyWeights, SampleError,
    TaxonomyTag,
};
