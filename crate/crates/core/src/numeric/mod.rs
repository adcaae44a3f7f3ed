//! Dense linear algebra, seeded randomness and finite-difference gradient
//! checks shared by every other module.

mod gradcheck;
mod matrix;
mod rng;
mod vector;

pub use gradcheck::{check_gradient, GradCheckReport, DEFAULT_FD_STEP};
pub use matrix::Matrix;
pub use rng::{splitmix64, SeededRng};
pub use vector::{
    dot, l2_normalize, log_sum_exp, norm, normalize_backward, softmax, softmax_backward,
    EPSILON_NORM,
};
