//! Dense arrays, reverse-mode differentiation and the gradient oracle.

mod array;
mod funcs;
mod gradcheck;
mod tape;

pub use array::DenseArray;
pub use funcs::{cosine_sim_matrix, row_softmax, symmetric_kl, FloorMode, KL_FLOOR};
pub use gradcheck::{grad_check, ScalarFn, TapeFn, DEFAULT_STEP};
pub use tape::{Gradients, NodeId, Tape};
