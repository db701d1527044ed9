//! Tooling for teaching and evaluating answer-or-search behavior in
//! closed-book question answering.
//!
//! The pipeline collects a base model's own predictions ([`inference`]),
//! masks the wrong ones with a search token to build training targets
//! ([`labeler`]), and evaluates answer/hallucinate/search policies against
//! the base model ([`evaluator`]), including a perplexity-threshold baseline
//! ([`ppl_baseline`]) and trade-off analyses ([`analysis`]).

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod hashing;
pub mod inference;
pub mod io;
pub mod labeler;
pub mod mock_service;
pub mod ppl_baseline;

pub use corpus::{Corpus, NormalizationProfile, QaRecord, Split};
pub use error::{Error, ErrorKind, Result};
pub use evaluator::{EvalReport, Judgment};
pub use inference::Prediction;
pub use labeler::{MaskedDataset, MaskedExample, SearchToken};
