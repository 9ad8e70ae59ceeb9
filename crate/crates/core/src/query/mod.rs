//! A small declarative language for defining feature families from metric
//! records: `FAMILY BY <key> [WHERE <predicate>] SELECT <aggregates>`.

pub mod ast;
mod eval;
mod hypotheses;
mod parser;

use thiserror::Error;

pub use ast::{Aggregate, KeyExpr, Predicate, QueryAst, RangeSpec, SelectExpr};
pub use eval::{evaluate_query, lag_series, query_id, to_family_table, union_results, QueryResult, QueryRow};
pub use hypotheses::{generate_hypotheses, Exclusion, FamilyFilter, HypothesisSet};
pub use parser::{parse_queries, parse_query};

use crate::ingest::IngestError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("unknown function `{name}` at {line}:{col}")]
    UnknownFunction { name: String, line: usize, col: usize },
    #[error("family `{0}` is defined by more than one query")]
    DuplicateFamilyKey(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}
