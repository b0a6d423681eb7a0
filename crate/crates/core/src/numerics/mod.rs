//! Dense kernels, keyed random streams, and the analytic-gradient
//! building blocks used by the prompt/head path.

pub mod kernels;
pub mod mat;
pub mod rng;

pub use kernels::{
    attention_backward, attention_with_weights, cosine_sim, cosine_sim_grad_v, cross_entropy,
    scaled_dot_attention, softmax, softmax_rows, softmax_rows_backward,
};
pub use mat::{dot, mat_vec, norm, vec_mat, Mat};
pub use rng::{RngStream, StreamKey};
