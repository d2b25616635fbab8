//! Minimal reverse-mode automatic differentiation.
//!
//! Tensors record the primitive that produced them. [`grad`] walks that
//! graph backwards; because each backward rule is itself built from the
//! same primitives, asking for `create_graph = true` yields gradients that
//! can be differentiated again (needed for second-order meta-gradients).
//!
//! ```
//! use mevf_core::autodiff::{grad, Tensor};
//!
//! let p = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//! let loss = p.square().unwrap().sum().unwrap();
//! let g = grad(&loss, &[p.clone()], true).unwrap().remove(0);
//! assert_eq!(g.values(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod params;
mod tensor;

pub use backward::{backward, grad, GradientMap};
pub use gradcheck::numeric_grad_check;
pub use params::Params;
pub use tensor::{set_allow_non_finite, Tensor};
