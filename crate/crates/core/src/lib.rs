//! k-median coresets over dynamic geometric data streams.
//!
//! The library maintains, in one pass over a stream of point insertions and
//! deletions from the integer grid `[1, delta]^d`, a small weighted point
//! set whose k-median cost `(1 +/- eps)`-approximates the cost of the live
//! point set for every candidate center set. Two constructions are
//! provided: a generally weighted one (weights may be negative) and a
//! non-negative-weight one that plugs directly into offline solvers, plus
//! the supporting machinery: randomly shifted nested grids, an exact-
//! retrieval K-Set sketch, an l2 heavy-hitters sketch, sparse-cell point
//! recovery, and exact verification oracles.

pub mod coreset_general;
pub mod coreset_positive;
pub mod eval;
pub mod grid;
pub mod hashing;
pub mod heavy_hitter;
pub mod kset;
pub mod model;
pub mod stream;

pub use coreset_general::{
    cost_points, offline_construct, weights_from_values, Coreset, CoresetEntry, GeneralStream,
    Provenance, QueryError, QueryOutcome,
};
pub use coreset_positive::{HeavyScheme, PositiveStream};
pub use eval::{
    bicriterion, exact_kmedian, lemma22_check, verify_coreset, weighted_local_search, VerifyMode,
};
pub use grid::{CellId, GridSystem};
pub use model::{CandidateCenters, Params, Point, StreamOp, StreamUpdate};
pub use stream::{generate, GeneratorKind, StreamFile};
