//! Numerical analysis of normally elliptic singularly perturbed systems
//! `ẋ = Ax + f(x,y,t,ε)`, `ẏ = (J/ε)y + g(x,y,t,ε)` with antisymmetric `J`.

pub mod diagonalize;
pub mod error;
pub mod integrate;
pub mod linalg;
pub mod manifold;
pub mod melnikov;
pub mod model;
pub mod quadrature;
pub mod slowlimit;
pub mod sysdsl;
pub mod systems;

pub use error::{NespError, Result};
pub use manifold::{default_split, GraphPoint, LpConfig, LpSolution, ManifoldGraph, ManifoldKind};
pub use melnikov::{HomoclinicOrbit, MelnikovConfig, MelnikovProfile, SectionFrame, SplittingConfig};
pub use linalg::{expm, solve_sylvester, spectral_dichotomy, DichotomySplit, Gaps, RotationFactor};
pub use model::{
    eval_rhs, jacobian_blocks, state_jacobian, validate, Field, Flags, Hints, Invariant, InvariantExpansion, JacobianBlocks,
    SlowFastSystem, ValidationReport,
};
