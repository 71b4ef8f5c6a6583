//! Dense matrices with a reverse-mode tape over them, checked by a
//! finite-difference oracle.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GroupReport};
pub use layers::{
    bind_params, count_params, dense_apply, mlp_apply, named_matrices, AttentionWeights, Dense,
    Mlp, ParamTree,
};
pub use matrix::{cosine, dot, Matrix};
pub use tape::{Gradients, Tape, Var, NORM_EPSILON};
