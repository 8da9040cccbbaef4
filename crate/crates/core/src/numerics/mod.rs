//! Dense and sparse kernels plus the reverse-mode tape the model trains on.

pub mod sparse;
pub mod tape;
pub mod tensor;

pub use sparse::{spmm, spmm_transpose, SparseRowMatrix};
pub use tape::{AttentionLayout, Gradients, Tape, Var};
pub use tensor::{
    add, concat_cols, hadamard, matmul, matmul_nt, matmul_tn, row_l2_normalize, rowwise_softmax,
    scale, sigmoid, sign, DenseTensor,
};
