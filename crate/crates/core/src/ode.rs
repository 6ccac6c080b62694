//! Embedded Dormand-Prince 4(5) integration with a continuous extension.
//!
//! The stepper is generic over the state dimension so the same kernel drives
//! plain orbits (N = 3) and orbit-plus-tangent systems (N = 6, 9, 12). Every
//! accepted step carries interpolation coefficients, so trajectories can be
//! sampled at arbitrary times and section crossings can be located by
//! bisection inside a single step.

use nalgebra::SVector;
use thiserror::Error;

/// Butcher tableau nodes for the Dormand-Prince 4(5) pair.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights (also the last stage row: first-same-as-last pair).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Error weights `b5 - b4`.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
/// Fourth-order continuous-extension weights.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Step-size and safety controls for the adaptive integrator.
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    /// Mixed absolute/relative local error tolerance per step.
    pub tol: f64,
    pub max_step: f64,
    pub min_step: f64,
    /// Divergence guard: integration aborts when the guarded prefix of the
    /// state exceeds this norm.
    pub guard_norm: f64,
    /// Number of leading components the guard applies to (0 = all). Tangent
    /// blocks are renormalized by callers, so guards usually watch the base
    /// state only.
    pub guard_dims: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_step: 0.25,
            min_step: 1e-13,
            guard_norm: 1e6,
            guard_dims: 0,
        }
    }
}

impl StepControl {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("state norm exceeded {guard:.3e} at t = {t:.6}; last valid time {t_last:.6}")]
    Diverged { t: f64, t_last: f64, guard: f64 },
    #[error("step size underflow ({h:.3e}) at t = {t:.6}")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t:.6}")]
    NonFinite { t: f64 },
}

/// One accepted step together with its quartic interpolation coefficients.
#[derive(Debug, Clone)]
pub struct DenseStep<const N: usize> {
    pub t0: f64,
    pub h: f64,
    cont: [SVector<f64, N>; 5],
}

impl<const N: usize> DenseStep<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Interpolated state at `t` in `[t0, t1]` (extrapolates smoothly just
    /// outside; callers clamp).
    pub fn eval(&self, t: f64) -> SVector<f64, N> {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        self.cont[0]
            + (self.cont[1] + (self.cont[2] + (self.cont[3] + self.cont[4] * th1) * th) * th1) * th
    }

    pub fn y0(&self) -> SVector<f64, N> {
        self.cont[0]
    }

    pub fn y1(&self) -> SVector<f64, N> {
        self.cont[0] + self.cont[1]
    }
}

fn error_norm<const N: usize>(
    err: &SVector<f64, N>,
    y0: &SVector<f64, N>,
    y1: &SVector<f64, N>,
    tol: f64,
) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let scale = tol + tol * y0[i].abs().max(y1[i].abs());
        let e = err[i] / scale;
        acc += e * e;
    }
    (acc / N as f64).sqrt()
}

/// Integrate `y' = f(t, y)` from `t0` to `t1 >= t0`, invoking `on_step` for
/// every accepted step. Returns the final state.
pub fn integrate<const N: usize, F, S>(
    f: F,
    t0: f64,
    y0: SVector<f64, N>,
    t1: f64,
    ctrl: &StepControl,
    mut on_step: S,
) -> Result<SVector<f64, N>, OdeError>
where
    F: Fn(f64, &SVector<f64, N>) -> SVector<f64, N>,
    S: FnMut(&DenseStep<N>),
{
    let (_, y) = integrate_until(f, t0, y0, t1, ctrl, |s| {
        on_step(s);
        true
    })?;
    Ok(y)
}

/// Like [`integrate`], but `on_step` may return `false` to stop after the step
/// it just saw (event location: the caller bisects inside that dense step).
/// Returns the time and state where integration ended.
pub fn integrate_until<const N: usize, F, S>(
    f: F,
    t0: f64,
    y0: SVector<f64, N>,
    t1: f64,
    ctrl: &StepControl,
    mut on_step: S,
) -> Result<(f64, SVector<f64, N>), OdeError>
where
    F: Fn(f64, &SVector<f64, N>) -> SVector<f64, N>,
    S: FnMut(&DenseStep<N>) -> bool,
{
    assert!(t1 >= t0, "integrate runs forward in time");
    if t1 == t0 {
        return Ok((t0, y0));
    }
    let guard = |y: &SVector<f64, N>, t: f64, t_last: f64| -> Result<(), OdeError> {
        let dims = if ctrl.guard_dims == 0 {
            N
        } else {
            ctrl.guard_dims.min(N)
        };
        let mut norm2 = 0.0;
        for i in 0..dims {
            if !y[i].is_finite() {
                return Err(OdeError::NonFinite { t });
            }
            norm2 += y[i] * y[i];
        }
        for i in dims..N {
            if !y[i].is_finite() {
                return Err(OdeError::NonFinite { t });
            }
        }
        if norm2.sqrt() > ctrl.guard_norm {
            return Err(OdeError::Diverged {
                t,
                t_last,
                guard: ctrl.guard_norm,
            });
        }
        Ok(())
    };

    guard(&y0, t0, t0)?;
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let mut h = ctrl.max_step.min(t1 - t0);

    while t < t1 {
        h = h.min(t1 - t);
        if h < ctrl.min_step {
            // Within roundoff of the endpoint: finish with one explicit step.
            if t1 - t < ctrl.min_step {
                break;
            }
            return Err(OdeError::StepUnderflow { t, h });
        }

        let k2 = f(t + C[1] * h, &(y + k1 * (A2[0] * h)));
        let k3 = f(t + C[2] * h, &(y + (k1 * A3[0] + k2 * A3[1]) * h));
        let k4 = f(
            t + C[3] * h,
            &(y + (k1 * A4[0] + k2 * A4[1] + k3 * A4[2]) * h),
        );
        let k5 = f(
            t + C[4] * h,
            &(y + (k1 * A5[0] + k2 * A5[1] + k3 * A5[2] + k4 * A5[3]) * h),
        );
        let k6 = f(
            t + C[5] * h,
            &(y + (k1 * A6[0] + k2 * A6[1] + k3 * A6[2] + k4 * A6[3] + k5 * A6[4]) * h),
        );
        let y1 = y + (k1 * B5[0] + k3 * B5[2] + k4 * B5[3] + k5 * B5[4] + k6 * B5[5]) * h;
        let k7 = f(t + h, &y1);
        let err = (k1 * E[0] + k3 * E[2] + k4 * E[3] + k5 * E[4] + k6 * E[5] + k7 * E[6]) * h;
        let en = error_norm(&err, &y, &y1, ctrl.tol);

        if en <= 1.0 && y1.iter().all(|v| v.is_finite()) {
            let ydiff = y1 - y;
            let bspl = k1 * h - ydiff;
            let cont4 = ydiff - k7 * h - bspl;
            let cont5 = (k1 * D[0] + k3 * D[2] + k4 * D[3] + k5 * D[4] + k6 * D[5] + k7 * D[6]) * h;
            let step = DenseStep {
                t0: t,
                h,
                cont: [y, ydiff, bspl, cont4, cont5],
            };
            t += h;
            y = y1;
            k1 = k7; // first-same-as-last
            guard(&y, t, step.t0)?;
            if !on_step(&step) {
                return Ok((t, y));
            }
            let factor = if en == 0.0 {
                5.0
            } else {
                (0.9 * en.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (h * factor).min(ctrl.max_step);
        } else if en.is_finite() {
            h *= (0.9 * en.powf(-0.2)).clamp(0.1, 0.9);
        } else {
            h *= 0.1;
        }
    }
    Ok((t, y))
}

/// A recorded trajectory: accepted steps with dense coefficients.
#[derive(Debug, Clone)]
pub struct Trajectory<const N: usize> {
    steps: Vec<DenseStep<N>>,
    t0: f64,
    t1: f64,
    y1: SVector<f64, N>,
}

impl<const N: usize> Trajectory<N> {
    /// Degree of accuracy of the continuous extension between steps.
    pub const INTERPOLATION_ORDER: usize = 4;

    pub fn record<F>(
        f: F,
        t0: f64,
        y0: SVector<f64, N>,
        t1: f64,
        ctrl: &StepControl,
    ) -> Result<Self, OdeError>
    where
        F: Fn(f64, &SVector<f64, N>) -> SVector<f64, N>,
    {
        let mut steps = Vec::new();
        let y1 = integrate(f, t0, y0, t1, ctrl, |s| steps.push(s.clone()))?;
        Ok(Self { steps, t0, t1, y1 })
    }

    pub fn t_start(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t1
    }

    pub fn end_state(&self) -> SVector<f64, N> {
        self.y1
    }

    pub fn steps(&self) -> &[DenseStep<N>] {
        &self.steps
    }

    /// Dense evaluation at `t` within `[t_start, t_end]` (clamped).
    pub fn eval(&self, t: f64) -> SVector<f64, N> {
        if self.steps.is_empty() {
            return self.y1;
        }
        let t = t.clamp(self.t0, self.t1);
        // binary search for the step containing t
        let idx = self
            .steps
            .partition_point(|s| s.t1() < t)
            .min(self.steps.len() - 1);
        self.steps[idx].eval(t)
    }

    /// Sample on a uniform grid of spacing `dt` including both endpoints.
    pub fn sample(&self, dt: f64) -> Vec<(f64, SVector<f64, N>)> {
        assert!(dt > 0.0);
        let n = ((self.t1 - self.t0) / dt).round() as usize;
        (0..=n)
            .map(|i| {
                let t = (self.t0 + i as f64 * dt).min(self.t1);
                (t, self.eval(t))
            })
            .collect()
    }
}
