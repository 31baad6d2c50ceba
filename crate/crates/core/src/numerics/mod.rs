//! Dense linear algebra and differentiable ops with hand-written backward
//! rules. No external ML framework; everything is row-major `Real`.

pub mod gradcheck;
mod matrix;
pub mod ops;
pub mod tape;

pub use matrix::{Matrix, Real};
pub use ops::{
    gather_rows, log_sum_exp_rows, matmul, matmul_at, matmul_backward, matmul_bt, scatter_add,
    scatter_add_into, silu, silu_backward, softmax_rows, softmax_rows_backward, stable_argsort,
    stable_argsort_bins, topk_rows, TieBreak, TopK,
};
pub use tape::{GradTape, Gradients, NodeId};
