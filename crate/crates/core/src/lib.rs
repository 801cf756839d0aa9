//! Schrödinger semigroups on finite state spaces.
//!
//! A finite-state Markov generator `Q` together with a potential `V` defines the
//! Schrödinger semigroup `exp(t(Q + diag V))`. This crate computes its principal
//! eigenvalue and the associated ground state, ground measure and equilibrium
//! measure, evaluates the Donsker–Varadhan rate function and its dual
//! variational problems, builds non-interacting multi-particle systems, and
//! checks and inverts the map from a separable external potential to the
//! one-particle marginal of the equilibrium measure (Hohenberg–Kohn).
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`generator`] | validated rate matrices, potentials, carré du champ, structural conditions |
//! | [`semigroup`] | matrix exponential, `P_t^V`, Duhamel and sandwich checks, growth bound |
//! | [`spectral`] | Perron pair, ground data, Doob transform, time-averaged ground measure |
//! | [`rate_function`] | `I(μ)`, `I^V(μ)`, dual formulas, relative entropy |
//! | [`multiparticle`] | Kronecker-sum generators, separable/pairwise potentials, marginals |
//! | [`hohenberg_kohn`] | marginal-to-potential checks, inversion, reduced functional |
//! | [`feynman_kac`] | Gillespie paths and a Monte Carlo estimate of the eigenvalue |
//! | [`cli`] | scenario files, task dispatch and JSON reports |

pub mod cli;
pub mod feynman_kac;
pub mod generator;
pub mod hohenberg_kohn;
pub mod measure;
pub mod multiparticle;
pub mod optim;
pub mod rate_function;
pub mod semigroup;
pub mod spectral;

pub use generator::{validate_generator, Generator, GeneratorError, Potential};
pub use measure::{MeasureError, ProbMeasure};
pub use semigroup::{SchrodingerOperator, SemigroupError};
pub use spectral::{principal_eigen, GroundData, SpectralError};

/// Library version reported in CLI output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
