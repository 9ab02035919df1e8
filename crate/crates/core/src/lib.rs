//! Align a source set of embedding vectors onto a target set with discrete
//! entropic optimal transport.
//!
//! The crate is organised bottom-up:
//!
//! * [`embio`] reads and writes the `EMB1` binary matrix format (and a CSV
//!   sidecar used for fixtures).
//! * [`cost`] builds pairwise cosine or squared-Euclidean cost matrices.
//! * [`sinkhorn`] solves the entropic OT problem in the log domain and
//!   provides a brute-force permutation oracle for small instances.
//! * [`mapping`] turns either cosine similarity (kNN regression) or a
//!   coupling (top-k average, top-k barycentric projection) into mapped
//!   embeddings.
//! * [`frechet`] fits Gaussians to embedding sets and measures the Frechet
//!   distance between them.
//! * [`pipeline`] wires the above into file-level `convert`, `sweep` and
//!   `plan` jobs.
//!
//! Row-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Every parallel loop writes whole rows with a fixed reduction order, so
//! results are bit-identical across thread counts.

pub mod cost;
pub mod embio;
pub mod exec;
pub mod frechet;
pub mod mapping;
pub mod pipeline;
pub mod sinkhorn;
pub mod synthetic;

pub use cost::{cosine_cost, squared_euclidean_cost, CostKind, CostMatrix};
pub use embio::{load_embeddings, save_embeddings, EmbeddingMatrix};
pub use frechet::{frechet_distance, gaussian_stats, GaussianStats};
pub use mapping::{knn_map, ot_ave_map, ot_bar_map, MapMethod, MappingResult};
pub use sinkhorn::{
    exact_small_ot, solve_entropic, transport_cost, Coupling, Marginals, SinkhornParams,
};
