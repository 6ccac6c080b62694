//! Numerical laboratory for singular-hyperbolic flows.
//!
//! The crate builds the full tool chain from raw vector fields to statistics:
//! adaptive integration with dense output ([`ode`]), tangent dynamics and
//! Lyapunov spectra ([`flow`]), Lorenz-like singular models ([`models`]),
//! Poincare sections with cone and quotient analysis ([`sections`]),
//! piecewise-monotone interval maps ([`map1d`]) with Ulam transfer operators
//! ([`acim`]), hyperbolic-time diagnostics ([`hyptimes`]), suspension
//! semiflows and lifted measures ([`suspension`]), physical-measure and
//! entropy checks ([`ergodic`]), expansiveness and sensitivity probes
//! ([`expansive`]), and a reproducible CLI harness ([`harness`]).

pub mod acim;
pub mod ergodic;
pub mod expansive;
pub mod flow;
pub mod harness;
pub mod hyptimes;
pub mod map1d;
pub mod models;
pub mod numerics;
pub mod ode;
pub mod sections;
pub mod suspension;
