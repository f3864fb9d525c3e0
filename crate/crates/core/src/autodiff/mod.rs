mod grad_check;
mod tape;

pub use grad_check::{grad_check, weighted_sum, GradCheckConfig, GradCheckReport};
pub use tape::{Grads, Mode, ReduceKind, Tape, Var};
