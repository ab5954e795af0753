//! Reverse-mode automatic differentiation over rank-2 f64 tensors.
//!
//! Ops record onto an implicit per-thread graph. Every backward rule is
//! itself built from recorded primitives, so `grad` with `create_graph`
//! yields adjoints that can be differentiated again (double backprop).
//! That property is what the second-order meta gradient relies on.

mod func;
mod grad;
mod optim;
mod tensor;

pub use func::{
    cross_entropy_row, gelu, layer_norm_rows, log_softmax_rows, mean_all, softmax_rows,
};
pub use grad::{finite_diff_grad, grad};
pub use optim::{adamw_step, lr_schedule, AdamWConfig, AdamWState, Schedule};
pub use tensor::{concat_rows, no_record, NoRecordGuard, Tensor};
