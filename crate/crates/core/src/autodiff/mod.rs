//! Dense tensor kernels with reverse-mode differentiation.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{
    check_triplet_batch, BatchStats, Gradients, Mode, PoolKind, RunningStats, Tape, Var,
    DEGREE_GUARD,
};
