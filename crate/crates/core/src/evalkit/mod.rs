//! Desk-scale evaluation: synthetic corpus, correspondence retrieval,
//! linear probe and ablation grids.

pub mod ablation;
pub mod corpus;
pub mod correspondence;
pub mod probe;
