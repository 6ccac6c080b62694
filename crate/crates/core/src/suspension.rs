//! Suspension semiflows over a base map with a roof function: canonical
//! representatives, lifted measures, invariance and bracket diagnostics, and
//! flow-time Birkhoff averages.

use crate::map1d::BranchMap1D;
use crate::numerics::{unit_hash, NeumaierSum};
use crate::sections::{SectionPoint, SectionedSystem};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SuspError {
    #[error("base orbit terminated with {remaining:.6} time units left")]
    OrbitTerminated { remaining: f64 },
    #[error("roof value {tau} invalid at a base point (declared infimum {inf})")]
    BadRoof { tau: f64, inf: f64 },
}

/// Base dynamical system of a suspension. `step` returns `None` when the
/// orbit leaves the domain of definition.
pub trait BaseMap: Sync {
    type Point: Copy + Send + Sync;
    fn step(&self, p: &Self::Point) -> Option<Self::Point>;
}

/// Interval map as a base; exact arithmetic, no dither.
pub struct Map1dBase<'a> {
    pub map: &'a BranchMap1D,
}

impl BaseMap for Map1dBase<'_> {
    type Point = f64;
    fn step(&self, p: &f64) -> Option<f64> {
        self.map.eval(*p).ok()
    }
}

/// Poincare return map of a sectioned system as a base.
pub struct SectionReturnBase<'a, S: SectionedSystem> {
    pub sys: &'a S,
    pub t_min: f64,
}

impl<S: SectionedSystem> BaseMap for SectionReturnBase<'_, S> {
    type Point = SectionPoint;
    fn step(&self, p: &SectionPoint) -> Option<SectionPoint> {
        self.sys.first_return(p, self.t_min).ok().map(|r| r.end)
    }
}

/// Roof function with its declared positive infimum.
pub struct Roof<'a, P> {
    pub eval: Box<dyn Fn(&P) -> f64 + Send + Sync + 'a>,
    pub inf: f64,
}

impl<'a, P> Roof<'a, P> {
    pub fn constant(c: f64) -> Self {
        assert!(c > 0.0);
        Roof {
            eval: Box::new(move |_| c),
            inf: c,
        }
    }

    pub fn from_fn<F: Fn(&P) -> f64 + Send + Sync + 'a>(f: F, inf: f64) -> Self {
        assert!(inf > 0.0);
        Roof {
            eval: Box::new(f),
            inf,
        }
    }
}

/// Return time of a sectioned system as a roof over its return-map base.
pub fn return_time_roof<'a, S: SectionedSystem>(
    sys: &'a S,
    t_min: f64,
    inf: f64,
) -> Roof<'a, SectionPoint> {
    Roof::from_fn(
        move |p: &SectionPoint| match sys.first_return(p, t_min) {
            Ok(r) => r.tau,
            Err(_) => f64::INFINITY,
        },
        inf,
    )
}

/// Point of the suspension space: base point plus height below the roof.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuspensionPoint<P> {
    pub base: P,
    pub s: f64,
}

pub struct Suspension<'a, B: BaseMap> {
    pub base: &'a B,
    pub roof: Roof<'a, B::Point>,
}

impl<'a, B: BaseMap> Suspension<'a, B> {
    pub fn new(base: &'a B, roof: Roof<'a, B::Point>) -> Self {
        Self { base, roof }
    }

    pub fn roof_at(&self, p: &B::Point) -> f64 {
        (self.roof.eval)(p)
    }

    /// Advance time `t >= 0`, applying the identification
    /// `(x, tau(x)) ~ (F(x), 0)` as often as needed; the result is the
    /// canonical representative with `0 <= s < tau(base)`.
    pub fn semiflow(
        &self,
        p: SuspensionPoint<B::Point>,
        t: f64,
    ) -> Result<SuspensionPoint<B::Point>, SuspError> {
        assert!(t >= 0.0, "semiflow runs forward");
        let mut x = p.base;
        let mut s = p.s + t;
        // crossing budget from the declared infimum guards against a roof
        // dipping below its certificate
        let budget = (s / self.roof.inf).ceil() as usize + 8;
        for _ in 0..budget {
            let tau = self.roof_at(&x);
            if !(tau > 0.0) {
                return Err(SuspError::BadRoof {
                    tau,
                    inf: self.roof.inf,
                });
            }
            if s < tau {
                return Ok(SuspensionPoint { base: x, s });
            }
            s -= tau;
            x = self
                .base
                .step(&x)
                .ok_or(SuspError::OrbitTerminated { remaining: s })?;
        }
        Err(SuspError::BadRoof {
            tau: self.roof.inf,
            inf: self.roof.inf,
        })
    }
}

/// Quadrature rule in the fiber direction.
#[derive(Debug, Clone, Copy)]
pub enum Quadrature {
    /// Composite midpoint, 64 nodes per unit roof. Deterministic, exact for
    /// fiber-linear integrands.
    Midpoint,
    /// Stratified nodes with a hash jitter per cell: unbiased for any
    /// integrable observable, so compositions with the semiflow keep the
    /// Monte-Carlo convergence rate.
    Jittered(u64),
}

pub const NODES_PER_UNIT: usize = 64;

/// Lifted measure evaluator: weighted base samples, each carrying a fiber
/// quadrature up to its (possibly truncated) roof value.
pub struct LiftedMeasure<P: Copy> {
    /// (base point, weight, truncated roof value)
    pub samples: Vec<(P, f64, f64)>,
    /// Normalizer: sampled integral of the truncated roof.
    pub mu_tau: f64,
    /// Sampled integral of the full roof over finite-roof samples.
    pub mu_tau_full: f64,
    /// Roof mass beyond the cap, dropped from quadrature.
    pub truncated_mass: f64,
    /// Samples with non-finite roof, excluded (must be measure-zero).
    pub excluded: usize,
    pub quadrature: Quadrature,
}

/// Truncation cap for roof values; exit times near the singular set are
/// unbounded but integrable.
pub const ROOF_CAP: f64 = 50.0;

pub fn lift_measure<P: Copy + Send + Sync>(
    base_samples: &[(P, f64)],
    roof: &Roof<P>,
    cap: f64,
    quadrature: Quadrature,
) -> LiftedMeasure<P> {
    let mut samples = Vec::with_capacity(base_samples.len());
    let mut mu_tau = NeumaierSum::new();
    let mut mu_full = NeumaierSum::new();
    let mut truncated = NeumaierSum::new();
    let mut excluded = 0usize;
    for &(p, w) in base_samples {
        let tau = (roof.eval)(&p);
        if !tau.is_finite() || tau <= 0.0 {
            excluded += 1;
            continue;
        }
        let t = tau.min(cap);
        samples.push((p, w, t));
        mu_tau.add(w * t);
        mu_full.add(w * tau);
        truncated.add(w * (tau - t));
    }
    LiftedMeasure {
        samples,
        mu_tau: mu_tau.value(),
        mu_tau_full: mu_full.value(),
        truncated_mass: truncated.value(),
        excluded,
        quadrature,
    }
}

impl<P: Copy + Send + Sync> LiftedMeasure<P> {
    fn fiber_integral(&self, idx: usize, phi: &(dyn Fn(&P, f64) -> f64 + Sync)) -> f64 {
        let (p, _, tau) = self.samples[idx];
        let n = (NODES_PER_UNIT as f64 * tau).ceil().max(1.0) as usize;
        let h = tau / n as f64;
        let mut acc = NeumaierSum::new();
        for k in 0..n {
            let xi = match self.quadrature {
                Quadrature::Midpoint => 0.5,
                Quadrature::Jittered(salt) => {
                    unit_hash(idx as f64 + k as f64 * 1e-9, salt)
                }
            };
            acc.add(phi(&p, (k as f64 + xi) * h));
        }
        acc.value() * h
    }

    /// `mu_X(phi) = (1/mu_F(tau)) sum_i w_i int_0^{tau_i} phi(x_i, s) ds`.
    pub fn eval(&self, phi: &(dyn Fn(&P, f64) -> f64 + Sync)) -> f64 {
        let vals: Vec<f64> = (0..self.samples.len())
            .into_par_iter()
            .map(|i| self.samples[i].1 * self.fiber_integral(i, phi))
            .collect();
        let mut acc = NeumaierSum::new();
        for v in vals {
            acc.add(v);
        }
        acc.value() / self.mu_tau
    }

    /// Estimate plus a weighted between-sample standard error.
    pub fn eval_with_stderr(&self, phi: &(dyn Fn(&P, f64) -> f64 + Sync)) -> (f64, f64) {
        // per-sample fiber means of phi relative to the estimate
        let vals: Vec<f64> = (0..self.samples.len())
            .into_par_iter()
            .map(|i| self.fiber_integral(i, phi))
            .collect();
        let w_tau: Vec<f64> = self.samples.iter().map(|&(_, w, t)| w * t).collect();
        let est: f64 = vals
            .iter()
            .zip(&self.samples)
            .map(|(v, &(_, w, _))| w * v)
            .sum::<f64>()
            / self.mu_tau;
        // fiber means m_i = integral / tau_i, weighted by w_i tau_i
        let mut var = 0.0;
        let mut wsum = 0.0;
        for (i, &wt) in w_tau.iter().enumerate() {
            let m = vals[i] / self.samples[i].2;
            var += wt * (m - est) * (m - est);
            wsum += wt;
        }
        let n_eff = wsum * wsum / w_tau.iter().map(|w| w * w).sum::<f64>().max(1e-300);
        let stderr = (var / wsum / n_eff.max(1.0)).sqrt();
        (est, stderr)
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Max over observables and times of `|mu_X(phi o X^t) - mu_X(phi)|`.
pub fn invariance_test<B: BaseMap>(
    susp: &Suspension<B>,
    lifted: &LiftedMeasure<B::Point>,
    phis: &[&(dyn Fn(&B::Point, f64) -> f64 + Sync)],
    ts: &[f64],
) -> Result<f64, SuspError> {
    let mut worst = 0.0_f64;
    for phi in phis {
        let direct = lifted.eval(*phi);
        for &t in ts {
            let composed = lifted.eval(&|p: &B::Point, s: f64| {
                match susp.semiflow(SuspensionPoint { base: *p, s }, t) {
                    Ok(q) => phi(&q.base, q.s),
                    Err(_) => 0.0,
                }
            });
            worst = worst.max((composed - direct).abs());
        }
    }
    Ok(worst)
}

/// Nested quotient-measure brackets `[sum w inf_leaf psi o F^n, sum w sup_leaf psi o F^n]`.
#[derive(Debug, Clone)]
pub struct BracketReport {
    pub brackets: Vec<(f64, f64)>,
    /// Midpoint of the last bracket: the quotient-lift estimate of `mu(psi)`.
    pub midpoint: f64,
    /// Width shrinks by <= 0.6 per step once n >= 5.
    pub shrink_ok: bool,
    /// Samples whose leaf orbits terminated before n_max.
    pub dropped_samples: usize,
}

/// Inset applied to the leaf-sample range so exact boundary leaves are not
/// probed.
const LEAF_INSET: f64 = 0.01;

pub fn quotient_measure_bracket<S: SectionedSystem>(
    sys: &S,
    samples: &[(f64, f64)],
    psi: &(dyn Fn(&SectionPoint) -> f64 + Sync),
    n_max: usize,
    leaf_samples: usize,
) -> BracketReport {
    assert!(leaf_samples >= 1);
    let ingoing = sys.ingoing();
    // per sample: inf/sup of psi along the leaf image at each n, or death step
    let rows: Vec<(Vec<(f64, f64)>, usize)> = samples
        .par_iter()
        .map(|&(x, _)| {
            let comp = (x.floor() as usize).min(ingoing.len() - 1);
            let v = x - comp as f64;
            let section = ingoing[comp];
            let mut pts: Vec<SectionPoint> = (0..leaf_samples)
                .map(|k| {
                    let u = if leaf_samples == 1 {
                        0.5
                    } else {
                        LEAF_INSET
                            + (1.0 - 2.0 * LEAF_INSET) * k as f64 / (leaf_samples - 1) as f64
                    };
                    SectionPoint { section, u, v }
                })
                .collect();
            let mut row = Vec::with_capacity(n_max + 1);
            for n in 0..=n_max {
                let lo = pts.iter().map(psi).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(psi).fold(f64::NEG_INFINITY, f64::max);
                row.push((lo, hi));
                if n == n_max {
                    break;
                }
                for p in pts.iter_mut() {
                    match sys.first_return(p, 0.0) {
                        Ok(r) => *p = r.end,
                        Err(_) => return (row, n + 1),
                    }
                }
            }
            (row, n_max + 1)
        })
        .collect();

    let survivors: Vec<usize> = (0..samples.len())
        .filter(|&i| rows[i].1 == n_max + 1)
        .collect();
    let dropped_samples = samples.len() - survivors.len();
    let w_total: f64 = survivors.iter().map(|&i| samples[i].1).sum();
    let mut brackets = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let mut lo = NeumaierSum::new();
        let mut hi = NeumaierSum::new();
        for &i in &survivors {
            let w = samples[i].1 / w_total;
            lo.add(w * rows[i].0[n].0);
            hi.add(w * rows[i].0[n].1);
        }
        brackets.push((lo.value(), hi.value()));
    }
    let mut shrink_ok = true;
    for n in 5..n_max {
        let w0 = brackets[n].1 - brackets[n].0;
        let w1 = brackets[n + 1].1 - brackets[n + 1].0;
        if w0 > 1e-12 && w1 > 0.6 * w0 {
            shrink_ok = false;
        }
    }
    let midpoint = 0.5 * (brackets[n_max].0 + brackets[n_max].1);
    BracketReport {
        brackets,
        midpoint,
        shrink_ok,
        dropped_samples,
    }
}

/// Flow-time Birkhoff average along one suspension orbit.
#[derive(Debug, Clone, Copy)]
pub struct FlowAverage {
    pub value: f64,
    /// Time actually integrated; < T only when the orbit terminated.
    pub elapsed: f64,
    pub terminated: bool,
}

pub fn flow_time_average<B: BaseMap>(
    susp: &Suspension<B>,
    start: SuspensionPoint<B::Point>,
    phi: &(dyn Fn(&B::Point, f64) -> f64 + Sync),
    t_total: f64,
) -> FlowAverage {
    assert!(t_total > 0.0);
    let mut x = start.base;
    let mut s = start.s;
    let mut remaining = t_total;
    let mut acc = NeumaierSum::new();
    let mut terminated = false;
    loop {
        let tau = susp.roof_at(&x);
        if !(tau > 0.0) {
            terminated = true;
            break;
        }
        let end = tau.min(s + remaining);
        let len = end - s;
        if len > 0.0 {
            let n = (NODES_PER_UNIT as f64 * len).ceil().max(1.0) as usize;
            let h = len / n as f64;
            for k in 0..n {
                acc.add(phi(&x, s + (k as f64 + 0.5) * h) * h);
            }
            remaining -= len;
        }
        if remaining <= 1e-14 {
            remaining = 0.0;
            break;
        }
        match susp.base.step(&x) {
            Some(next) => {
                x = next;
                s = 0.0;
            }
            None => {
                terminated = true;
                break;
            }
        }
    }
    let elapsed = t_total - remaining;
    FlowAverage {
        value: acc.value() / elapsed.max(1e-300),
        elapsed,
        terminated,
    }
}
