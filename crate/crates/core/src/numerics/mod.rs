//! Dense f64 linear algebra, activations, AdamW and a finite-difference
//! gradient oracle.

mod adamw;
pub mod gradcheck;
pub mod ops;
mod tensor;

pub use adamw::{adamw_step, AdamWState};
pub use gradcheck::{finite_diff_grad, relative_error, DEFAULT_FD_EPS};
pub use ops::{gelu, gelu_grad, gelu_tensor, layer_norm, matmul, matmul_nt, matmul_tn, matvec, softmax_rows};
pub use tensor::{Parameter, Tensor};
