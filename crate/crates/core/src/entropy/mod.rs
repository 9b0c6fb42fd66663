//! k-nearest-neighbour entropy machinery: neighbour queries, the digamma
//! function, the condition-aware intrinsic reward and a buffer-entropy
//! monitor.

mod digamma;
mod intrinsic;
mod knn;

pub use digamma::digamma;
pub use intrinsic::{
    buffer_entropy_estimate, kozachenko_leonenko, modify_rewards, qcse_intrinsic, ConditionMode,
    EntropyConfig, IntrinsicBatch, DEFAULT_KNN, DUPLICATE_FLOOR, KNN_SWEEP,
};
pub use knn::{euclidean, knn_by, knn_query, Neighbor};
