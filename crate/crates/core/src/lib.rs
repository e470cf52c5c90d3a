//! Particle gradient flows for minimizing the squared maximum mean discrepancy
//! to an empirical target.
//!
//! The main scheme, [`flows::run_ift`], splits each iteration into a
//! transport step that moves particles along the negative witness gradient
//! and a weight step that solves a simplex-constrained quadratic program.
//! Mass can therefore leave particles stuck far from the target and move to
//! particles near it. Fixed-weight MMD descent and a Wasserstein-Fisher-Rao
//! splitting are included as baselines, along with closed-form references for
//! the pure reaction flow.
//!
//! Kernels are Gaussian with `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))` by
//! default; [`kernels::BandwidthConvention`] selects other parametrizations.
//! The builtin experiments use `exp(-|x - y|^2 / sigma)` together with
//! [`flows::TransportScaling::PerParticleMass`].

pub mod energy;
pub mod error;
pub mod flows;
pub mod harness;
pub mod kernels;
pub mod measures;
pub mod oracle;
pub mod points;
pub mod solvers;

pub use energy::MmdEnergy;
pub use error::{Error, Result};
pub use flows::{FlowConfig, FlowError, MmdStepMode, ProxAnchor, Trace, TransportScaling};
pub use harness::{ExperimentSpec, Method, RunSummary};
pub use kernels::{BandwidthConvention, GramBundle, KernelSpec};
pub use measures::{ParticleMeasure, TargetSpec};
pub use points::PointCloud;
pub use solvers::SimplexQp;
