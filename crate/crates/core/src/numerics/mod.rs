//! Dense linear algebra, symmetric eigensolving, finite differences,
//! least-squares fits, and the pinned PRNG used by every other module.

pub mod eig;
pub mod fit;
pub mod matrix;
pub mod rng;

pub use eig::{sym_eig, EigDecomposition};
pub use fit::{default_step, finite_diff_grad, fit_line, LineFit};
pub use matrix::Matrix;
pub use rng::RngState;
