//! Attention kernels over k-nearest-neighbour patches.

mod kernels;
mod neighborhood;
mod probe;

pub use kernels::{
    gather_pairs, matrix_aggregate, matrix_attention, matrix_attention_with, normalize_weights, point_conv,
    point_conv_weights, scaled_dot_attention, vector_aggregate, vector_attention, AttentionKind, AttentionLayer,
    MatrixNorm, WeightLayout,
};
pub use neighborhood::{Neighborhood, SelfPolicy};
pub use probe::{complexity_probe, fit_slope, ProbeConfig, ProbeRow, ProbeSummary};
