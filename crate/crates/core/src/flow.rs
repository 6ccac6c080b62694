//! Three-dimensional vector fields with tangent dynamics.
//!
//! [`FlowSystem`] bundles a right-hand side with its Jacobian and the list of
//! equilibria. On top of the [`crate::ode`] kernel it provides recorded
//! trajectories, tangent-frame evolution, wedge-area growth along
//! center-unstable planes, and QR (Benettin) Lyapunov spectra.

use crate::numerics;
use crate::ode::{self, DenseStep, OdeError, StepControl, Trajectory};
use nalgebra::{Complex, Matrix3, SVector, Vector3};
use thiserror::Error;

pub type State = Vector3<f64>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("tangent plane is degenerate: |v1 ^ v2| = {wedge_norm:.3e}")]
    DegeneratePlane { wedge_norm: f64 },
    #[error("renormalization interval {renorm_step} must be positive and at most T = {t}")]
    BadRenormStep { renorm_step: f64, t: f64 },
}

/// An equilibrium point with the eigenvalues of the linearization.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub state: State,
    pub eigenvalues: [Complex<f64>; 3],
}

impl Equilibrium {
    /// Eigenvalues sorted by descending real part.
    pub fn sorted_eigenvalues(&self) -> [Complex<f64>; 3] {
        let mut ev = self.eigenvalues;
        ev.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
        ev
    }
}

type Rhs = dyn Fn(&State) -> State + Send + Sync;
type Jac = dyn Fn(&State) -> Matrix3<f64> + Send + Sync;

/// A smooth vector field on R^3.
pub struct FlowSystem {
    pub name: String,
    pub params: Vec<(String, f64)>,
    rhs: Box<Rhs>,
    jac: Box<Jac>,
    pub equilibria: Vec<Equilibrium>,
}

impl std::fmt::Debug for FlowSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowSystem")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("equilibria", &self.equilibria.len())
            .finish()
    }
}

/// Result of evolving a frame of tangent vectors without renormalization.
#[derive(Debug, Clone)]
pub struct TangentFrame {
    pub base: State,
    pub vectors: Vec<State>,
    pub t: f64,
}

/// Benettin QR estimate of the Lyapunov spectrum.
#[derive(Debug, Clone)]
pub struct LyapunovEstimate {
    /// Exponents sorted descending.
    pub exponents: [f64; 3],
    pub t: f64,
    pub renorm_count: usize,
}

impl FlowSystem {
    pub fn new(
        name: impl Into<String>,
        params: Vec<(String, f64)>,
        rhs: Box<Rhs>,
        jac: Box<Jac>,
        equilibria: Vec<Equilibrium>,
    ) -> Self {
        Self {
            name: name.into(),
            params,
            rhs,
            jac,
            equilibria,
        }
    }

    /// Diagonal linear field `x' = diag(a, b, c) x`; exact flows for tests
    /// and calibration.
    pub fn linear_diag(a: f64, b: f64, c: f64) -> Self {
        let eig = [
            Complex::new(a, 0.0),
            Complex::new(b, 0.0),
            Complex::new(c, 0.0),
        ];
        Self::new(
            "linear_diag",
            vec![("a".into(), a), ("b".into(), b), ("c".into(), c)],
            Box::new(move |x: &State| State::new(a * x[0], b * x[1], c * x[2])),
            Box::new(move |_x: &State| Matrix3::from_diagonal(&Vector3::new(a, b, c))),
            vec![Equilibrium {
                state: State::zeros(),
                eigenvalues: eig,
            }],
        )
    }

    pub fn rhs(&self, x: &State) -> State {
        (self.rhs)(x)
    }

    pub fn jacobian(&self, x: &State) -> Matrix3<f64> {
        (self.jac)(x)
    }

    pub fn jacobian_vec(&self, x: &State, v: &State) -> State {
        self.jacobian(x) * v
    }

    /// Divergence of the field (trace of the Jacobian).
    pub fn divergence(&self, x: &State) -> f64 {
        self.jacobian(x).trace()
    }

    /// Record the orbit of `x0` over `[0, t]` with dense output.
    pub fn flow(&self, x0: State, t: f64, ctrl: &StepControl) -> Result<Trajectory<3>, FlowError> {
        let mut c = *ctrl;
        c.guard_dims = 3;
        Ok(Trajectory::record(
            |_t, y: &Vector3<f64>| self.rhs(y),
            0.0,
            x0,
            t,
            &c,
        )?)
    }

    /// Endpoint of the orbit without recording (streaming).
    pub fn flow_to(&self, x0: State, t: f64, ctrl: &StepControl) -> Result<State, FlowError> {
        let mut c = *ctrl;
        c.guard_dims = 3;
        Ok(ode::integrate(
            |_t, y: &Vector3<f64>| self.rhs(y),
            0.0,
            x0,
            t,
            &c,
            |_| {},
        )?)
    }

    /// Evolve the base point together with up to three tangent vectors.
    /// No renormalization is applied; use short horizons or renormalize
    /// between calls.
    pub fn tangent_flow(
        &self,
        x0: State,
        vs: &[State],
        t: f64,
        ctrl: &StepControl,
    ) -> Result<TangentFrame, FlowError> {
        assert!(
            (1..=3).contains(&vs.len()),
            "tangent_flow carries 1..=3 vectors"
        );
        let mut c = *ctrl;
        c.guard_dims = 3;
        let frame = match vs.len() {
            1 => {
                let y = pack::<6>(&x0, vs);
                let out = ode::integrate(|_t, y| self.tangent_rhs::<6>(y), 0.0, y, t, &c, |_| {})?;
                unpack::<6>(&out, 1)
            }
            2 => {
                let y = pack::<9>(&x0, vs);
                let out = ode::integrate(|_t, y| self.tangent_rhs::<9>(y), 0.0, y, t, &c, |_| {})?;
                unpack::<9>(&out, 2)
            }
            _ => {
                let y = pack::<12>(&x0, vs);
                let out =
                    ode::integrate(|_t, y| self.tangent_rhs::<12>(y), 0.0, y, t, &c, |_| {})?;
                unpack::<12>(&out, 3)
            }
        };
        Ok(TangentFrame {
            base: frame.0,
            vectors: frame.1,
            t,
        })
    }

    fn tangent_rhs<const N: usize>(&self, y: &SVector<f64, N>) -> SVector<f64, N> {
        let x = State::new(y[0], y[1], y[2]);
        let j = self.jacobian(&x);
        let mut out = SVector::<f64, N>::zeros();
        let dx = self.rhs(&x);
        out[0] = dx[0];
        out[1] = dx[1];
        out[2] = dx[2];
        let k = (N - 3) / 3;
        for b in 0..k {
            let v = State::new(y[3 + 3 * b], y[4 + 3 * b], y[5 + 3 * b]);
            let dv = j * v;
            out[3 + 3 * b] = dv[0];
            out[4 + 3 * b] = dv[1];
            out[5 + 3 * b] = dv[2];
        }
        out
    }

    /// Log of the area growth of the plane spanned by `v1, v2` transported by
    /// the tangent flow over `[0, t]`: `log(|Dv1 ^ Dv2| / |v1 ^ v2|)`.
    /// Renormalizes every `renorm_step` so long horizons stay representable.
    pub fn cu_area_growth(
        &self,
        x0: State,
        v1: State,
        v2: State,
        t: f64,
        renorm_step: f64,
        ctrl: &StepControl,
    ) -> Result<f64, FlowError> {
        let w0 = v1.cross(&v2).norm();
        if w0 < 1e-8 * v1.norm() * v2.norm() || w0 == 0.0 {
            return Err(FlowError::DegeneratePlane { wedge_norm: w0 });
        }
        if renorm_step <= 0.0 || renorm_step > t {
            return Err(FlowError::BadRenormStep {
                renorm_step,
                t,
            });
        }
        let mut x = x0;
        let mut a = v1;
        let mut b = v2;
        let mut acc = numerics::NeumaierSum::new();
        let mut remaining = t;
        while remaining > 1e-12 {
            let seg = renorm_step.min(remaining);
            let before = a.cross(&b).norm();
            let frame = self.tangent_flow(x, &[a, b], seg, ctrl)?;
            x = frame.base;
            a = frame.vectors[0];
            b = frame.vectors[1];
            let after = a.cross(&b).norm();
            acc.add((after / before).ln());
            // renormalize the pair, keeping the plane
            let na = a.norm();
            a /= na;
            b -= a * b.dot(&a);
            let nb = b.norm();
            if nb < 1e-300 {
                return Err(FlowError::DegeneratePlane { wedge_norm: nb });
            }
            b /= nb;
            remaining -= seg;
        }
        Ok(acc.value())
    }

    /// Benettin QR Lyapunov spectrum over `[0, t]` with modified Gram-Schmidt
    /// renormalization every `renorm_step`.
    pub fn qr_lyapunov(
        &self,
        x0: State,
        t: f64,
        renorm_step: f64,
        ctrl: &StepControl,
    ) -> Result<LyapunovEstimate, FlowError> {
        if renorm_step <= 0.0 || renorm_step > t {
            return Err(FlowError::BadRenormStep { renorm_step, t });
        }
        let mut x = x0;
        let mut frame = [
            State::new(1.0, 0.0, 0.0),
            State::new(0.0, 1.0, 0.0),
            State::new(0.0, 0.0, 1.0),
        ];
        let mut sums = [
            numerics::NeumaierSum::new(),
            numerics::NeumaierSum::new(),
            numerics::NeumaierSum::new(),
        ];
        let mut elapsed = 0.0;
        let mut renorms = 0usize;
        while elapsed < t - 1e-12 {
            let seg = renorm_step.min(t - elapsed);
            let out = self.tangent_flow(x, &frame, seg, ctrl)?;
            x = out.base;
            let mut v = out.vectors;
            // modified Gram-Schmidt; diagonal entries are the local growth factors
            for i in 0..3 {
                for j in 0..i {
                    let proj = v[i].dot(&frame[j]);
                    v[i] -= frame[j] * proj;
                }
                let r = v[i].norm();
                sums[i].add(r.ln());
                frame[i] = v[i] / r;
            }
            elapsed += seg;
            renorms += 1;
        }
        let mut exps = [
            sums[0].value() / elapsed,
            sums[1].value() / elapsed,
            sums[2].value() / elapsed,
        ];
        exps.sort_by(|a, b| b.partial_cmp(a).unwrap());
        Ok(LyapunovEstimate {
            exponents: exps,
            t: elapsed,
            renorm_count: renorms,
        })
    }

    /// Time average of `phi` along the orbit using per-step Simpson weights on
    /// the dense output. Streams, so arbitrarily long horizons are fine.
    pub fn time_average(
        &self,
        x0: State,
        t: f64,
        ctrl: &StepControl,
        phi: impl Fn(&State) -> f64,
    ) -> Result<(f64, State), FlowError> {
        let mut c = *ctrl;
        c.guard_dims = 3;
        let mut acc = numerics::NeumaierSum::new();
        let end = ode::integrate(
            |_t, y: &Vector3<f64>| self.rhs(y),
            0.0,
            x0,
            t,
            &c,
            |s: &DenseStep<3>| {
                let mid = s.eval(s.t0 + 0.5 * s.h);
                let simpson =
                    s.h / 6.0 * (phi(&s.y0()) + 4.0 * phi(&mid) + phi(&s.y1()));
                acc.add(simpson);
            },
        )?;
        Ok((acc.value() / t, end))
    }
}

fn pack<const N: usize>(x: &State, vs: &[State]) -> SVector<f64, N> {
    let mut y = SVector::<f64, N>::zeros();
    y[0] = x[0];
    y[1] = x[1];
    y[2] = x[2];
    for (b, v) in vs.iter().enumerate() {
        y[3 + 3 * b] = v[0];
        y[4 + 3 * b] = v[1];
        y[5 + 3 * b] = v[2];
    }
    y
}

fn unpack<const N: usize>(y: &SVector<f64, N>, k: usize) -> (State, Vec<State>) {
    let x = State::new(y[0], y[1], y[2]);
    let vs = (0..k)
        .map(|b| State::new(y[3 + 3 * b], y[4 + 3 * b], y[5 + 3 * b]))
        .collect();
    (x, vs)
}
