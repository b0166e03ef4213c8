//! Dense linear algebra, the symmetric eigensolver, seeded randomness and the
//! gradient-evaluation contract.

mod eigen;
mod grad;
mod matrix;
mod rng;

pub use eigen::{
    eigh_sym, singular_triplets, singular_values, SingularTriplet, Spectrum, CONVERGENCE_TOL,
    DEGENERACY_GAP, MAX_SWEEPS,
};
pub use grad::{
    central_differences, check_gradient, compare_gradients, differences_resolved, value_and_grad,
    GradCheck, GradRecord, Objective, FD_MIN_MAGNITUDE, FD_REL_TOL, FD_STEP,
};
pub use matrix::{cholesky, dot, frobenius_norm, norm, Matrix};
pub use rng::{streams, Rng};
