//! Random walks in i.i.d. random environments on `Z^d`: lazy environments,
//! walk simulation, regeneration structure, two-walk intersection statistics,
//! quenched/annealed estimators and exact small-instance oracles.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod intersection;
pub mod lattice;
pub mod oracle;
pub mod pathio;
pub mod regeneration;
pub mod scalar;
pub mod seeding;
pub mod walk;

pub use error::{Error, Result};
pub use lattice::{
    make_coupled_triple, sample_kernel, validate_ellipticity, CoupledTriple, CouplingSeeds, EnvDistribution,
    Family, LazyEnvironment, PerturbationRule, Site, TransitionKernel,
};
pub use scalar::{Real, Scalar};
pub use walk::{simulate_pair, simulate_path, step, PairMode, PairSeeds, WalkPath};

/// Exact rational scalar.
pub type Rational = num_rational::BigRational;

pub type Kernel = TransitionKernel<f64>;
pub type ExactKernel = TransitionKernel<Rational>;
pub type Distribution = EnvDistribution<f64>;
pub type ExactDistribution = EnvDistribution<Rational>;
pub type Environment = LazyEnvironment<f64>;
pub type Scaled = estimators::ScaledPath<f64>;
pub type ExactEnvironment = LazyEnvironment<Rational>;
