//! Flow-level physical-measure diagnostics.
//!
//! Five instruments around one theme: a singular-hyperbolic attractor
//! carries a unique physical measure, and everything observable about it
//! must agree across independent estimation routes. Birkhoff averages over
//! seed ensembles test uniqueness, the Lyapunov spectrum tests the
//! splitting structure, three estimators of the positive exponent test the
//! entropy formula, section-hit histograms test conditional-density
//! boundedness, and grid visitation tests that one orbit already fills the
//! support.

use crate::acim::{build_ulam, stationary_density, ulam_lyapunov, AcimError};
use crate::flow::{FlowError, FlowSystem};
use crate::map1d::BranchMap1D;
use crate::models::{exit_time, geometric_lorenz_map, GeometricLorenzSystem, ModelError};
use crate::numerics::{unit_hash, NeumaierSum};
use crate::ode::{self, StepControl};
use crate::sections::{ReturnError, SectionPoint, SectionedSystem};
use nalgebra::Vector3;
use rayon::prelude::*;
use std::collections::HashSet;
use thiserror::Error;

type State = Vector3<f64>;

#[derive(Debug, Error)]
pub enum ErgodicError {
    #[error("all {0} seeds escaped the integration guard")]
    AllSeedsEscaped(usize),
    #[error("undersampled: collected {got} section hits, need {want}")]
    Undersampled { got: usize, want: usize },
    #[error("unstable-direction estimation failed: {reason}")]
    DirectionEstimation { reason: String },
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("return error: {0}")]
    Return(#[from] ReturnError),
    #[error("transfer operator error: {0}")]
    Acim(#[from] AcimError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
}

/// Middle exponent must sit inside this band for a flow-direction
/// classification to pass.
pub const LAMBDA0_TOL: f64 = 5e-3;

fn default_ctrl() -> StepControl {
    StepControl {
        tol: 1e-9,
        max_step: 0.25,
        ..StepControl::default()
    }
}

// ---------------------------------------------------------------------------
// Birkhoff uniqueness
// ---------------------------------------------------------------------------

/// Named observable evaluated pointwise on state space.
pub type Observable<'a> = (&'a str, &'a (dyn Fn(&State) -> f64 + Sync));

#[derive(Debug, Clone, Copy)]
pub struct BirkhoffParams {
    /// Transient discarded before averaging starts.
    pub burn: f64,
    /// Cluster split threshold as a fraction of the observable's dynamic
    /// range along the sampled orbits.
    pub cluster_frac: f64,
    pub ctrl: StepControl,
}

impl Default for BirkhoffParams {
    fn default() -> Self {
        Self {
            burn: 50.0,
            cluster_frac: 0.01,
            ctrl: default_ctrl(),
        }
    }
}

/// Ensemble statistics for one observable.
#[derive(Debug, Clone)]
pub struct ObservableReport {
    pub name: String,
    /// Birkhoff average per surviving seed, in seed order.
    pub values: Vec<f64>,
    pub mean: f64,
    /// max - min over seeds at the full horizon.
    pub spread: f64,
    /// Same spread measured at the quarter horizon of the same orbits.
    pub quarter_spread: f64,
    /// Dynamic range of the observable along all sampled orbits.
    pub obs_range: f64,
    /// Seed indices (into `values`) grouped by single-linkage clustering
    /// with gap threshold `cluster_frac * obs_range`.
    pub clusters: Vec<Vec<usize>>,
}

impl ObservableReport {
    /// quarter_spread / spread; the CLT predicts 2 for a T x4 horizon jump.
    pub fn halving_ratio(&self) -> f64 {
        if self.spread == 0.0 {
            return 1.0;
        }
        self.quarter_spread / self.spread
    }
}

#[derive(Debug, Clone)]
pub struct BirkhoffReport {
    pub observables: Vec<ObservableReport>,
    /// Indices of seeds whose orbits stayed inside the guard.
    pub survivors: Vec<usize>,
    pub escaped: usize,
    pub t: f64,
    pub t_quarter: f64,
}

struct MultiAverage {
    averages: Vec<f64>,
    quarter_averages: Vec<f64>,
    t_quarter: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// One streaming pass: Simpson accumulation of every observable, with a
/// snapshot at the first step boundary past t/4 for the convergence-rate
/// fit, and running min/max for the dynamic range.
fn multi_time_average(
    flow: &FlowSystem,
    x0: State,
    t: f64,
    ctrl: &StepControl,
    phis: &[&(dyn Fn(&State) -> f64 + Sync)],
) -> Result<MultiAverage, FlowError> {
    let k = phis.len();
    let mut acc: Vec<NeumaierSum> = (0..k).map(|_| NeumaierSum::new()).collect();
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    let mut quarter: Vec<f64> = vec![0.0; k];
    let mut t_quarter = 0.0;
    let mut c = *ctrl;
    c.guard_dims = 3;
    ode::integrate(
        |_t, y: &Vector3<f64>| flow.rhs(y),
        0.0,
        x0,
        t,
        &c,
        |s| {
            let mid = s.eval(s.t0 + 0.5 * s.h);
            let (y0, y1) = (s.y0(), s.y1());
            for (i, phi) in phis.iter().enumerate() {
                let (a, b, m) = (phi(&y0), phi(&y1), phi(&mid));
                acc[i].add(s.h / 6.0 * (a + 4.0 * m + b));
                lo[i] = lo[i].min(a).min(m).min(b);
                hi[i] = hi[i].max(a).max(m).max(b);
            }
            let end = s.t0 + s.h;
            if t_quarter == 0.0 && end >= 0.25 * t {
                t_quarter = end;
                for i in 0..k {
                    quarter[i] = acc[i].value() / end;
                }
            }
        },
    )?;
    Ok(MultiAverage {
        averages: acc.iter().map(|a| a.value() / t).collect(),
        quarter_averages: quarter,
        t_quarter,
        lo,
        hi,
    })
}

/// Single-linkage clustering of scalar values: sort, split at gaps larger
/// than `threshold`. Returns groups of original indices ordered by value.
fn split_clusters(values: &[f64], threshold: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut clusters: Vec<Vec<usize>> = vec![];
    for &i in &order {
        match clusters.last_mut() {
            Some(c) if values[i] - values[*c.last().unwrap()] <= threshold => c.push(i),
            _ => clusters.push(vec![i]),
        }
    }
    clusters
}

/// Birkhoff averages of `observables` over a seed ensemble. Uniqueness of
/// the physical measure shows up as a single tight cluster per observable;
/// a multi-basin flow shows up as several.
pub fn birkhoff_uniqueness(
    flow: &FlowSystem,
    observables: &[Observable],
    seeds: &[State],
    t: f64,
    params: &BirkhoffParams,
) -> Result<BirkhoffReport, ErgodicError> {
    assert!(t >= 1e3, "horizon too short for ensemble statistics");
    assert!(!seeds.is_empty() && !observables.is_empty());
    let phis: Vec<&(dyn Fn(&State) -> f64 + Sync)> =
        observables.iter().map(|(_, f)| *f).collect();
    let runs: Vec<Option<MultiAverage>> = seeds
        .par_iter()
        .map(|s| {
            let x = flow.flow_to(*s, params.burn, &params.ctrl).ok()?;
            multi_time_average(flow, x, t, &params.ctrl, &phis).ok()
        })
        .collect();
    let survivors: Vec<usize> = (0..seeds.len()).filter(|&i| runs[i].is_some()).collect();
    if survivors.is_empty() {
        return Err(ErgodicError::AllSeedsEscaped(seeds.len()));
    }
    let escaped = seeds.len() - survivors.len();
    let mut reports = vec![];
    let mut t_quarter = 0.0;
    for (i, (name, _)) in observables.iter().enumerate() {
        let values: Vec<f64> = survivors
            .iter()
            .map(|&s| runs[s].as_ref().unwrap().averages[i])
            .collect();
        let quarter: Vec<f64> = survivors
            .iter()
            .map(|&s| runs[s].as_ref().unwrap().quarter_averages[i])
            .collect();
        t_quarter = runs[survivors[0]].as_ref().unwrap().t_quarter;
        let lo = survivors
            .iter()
            .map(|&s| runs[s].as_ref().unwrap().lo[i])
            .fold(f64::INFINITY, f64::min);
        let hi = survivors
            .iter()
            .map(|&s| runs[s].as_ref().unwrap().hi[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        let quarter_spread = quarter.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - quarter.iter().cloned().fold(f64::INFINITY, f64::min);
        let obs_range = hi - lo;
        // absolute floor so quadrature-roundoff ulps never split a cluster
        let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let clusters = split_clusters(&values, params.cluster_frac * obs_range + 1e-9 * scale);
        reports.push(ObservableReport {
            name: name.to_string(),
            values,
            mean,
            spread,
            quarter_spread,
            obs_range,
            clusters,
        });
    }
    Ok(BirkhoffReport {
        observables: reports,
        survivors,
        escaped,
        t,
        t_quarter,
    })
}

/// Hash-deterministic seed cloud in a box around the Lorenz attractor,
/// inside the trapping region once a short transient is discarded.
pub fn lorenz_seed_box(n: usize, salt: u64) -> Vec<State> {
    (0..n)
        .map(|i| {
            let a = unit_hash(i as f64, salt);
            let b = unit_hash(i as f64 + 0.5, salt ^ 0x9e37);
            let c = unit_hash(i as f64 + 0.25, salt ^ 0x79b9);
            State::new(-15.0 + 30.0 * a, -15.0 + 30.0 * b, 5.0 + 35.0 * c)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lyapunov spectrum structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SeedSpectrum {
    pub seed: State,
    /// Exponents sorted descending.
    pub exponents: [f64; 3],
    pub sum: f64,
    /// Orbit average of the Jacobian trace over the same horizon.
    pub div_avg: f64,
    /// lambda+ > 0 > lambda- with the middle exponent inside LAMBDA0_TOL.
    pub classified: bool,
}

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub per_seed: Vec<SeedSpectrum>,
    pub escaped: usize,
    /// Componentwise mean over surviving seeds.
    pub mean: [f64; 3],
    pub all_classified: bool,
}

/// Benettin spectrum per seed plus the divergence identity
/// `sum of exponents = orbit average of trace DX`.
pub fn spectrum_structure(
    flow: &FlowSystem,
    seeds: &[State],
    t: f64,
    burn: f64,
) -> Result<SpectrumReport, ErgodicError> {
    assert!(!seeds.is_empty());
    let ctrl = default_ctrl();
    let per_seed: Vec<Option<SeedSpectrum>> = seeds
        .par_iter()
        .map(|s| {
            let x = flow.flow_to(*s, burn, &ctrl).ok()?;
            let est = flow.qr_lyapunov(x, t, 1.0, &ctrl).ok()?;
            let (div_avg, _) = flow.time_average(x, t, &ctrl, |y| flow.divergence(y)).ok()?;
            let e = est.exponents;
            let classified = e[0] > 0.0 && e[2] < 0.0 && e[1].abs() < LAMBDA0_TOL;
            Some(SeedSpectrum {
                seed: *s,
                exponents: e,
                sum: e[0] + e[1] + e[2],
                div_avg,
                classified,
            })
        })
        .collect();
    let kept: Vec<SeedSpectrum> = per_seed.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(ErgodicError::AllSeedsEscaped(seeds.len()));
    }
    let escaped = seeds.len() - kept.len();
    let mut mean = [0.0; 3];
    for s in &kept {
        for j in 0..3 {
            mean[j] += s.exponents[j] / kept.len() as f64;
        }
    }
    let all_classified = kept.iter().all(|s| s.classified);
    Ok(SpectrumReport {
        per_seed: kept,
        escaped,
        mean,
        all_classified,
    })
}

// ---------------------------------------------------------------------------
// Entropy formula
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EntropySeed {
    pub seed: State,
    pub exponents: [f64; 3],
    /// Birkhoff average of the one-step log-expansion of the normal-bundle
    /// cocycle along the estimated unstable direction.
    pub unstable_rate: f64,
    /// 1 minus the mean flow-direction contamination of the pushed vector;
    /// low quality means the direction estimate kept falling into the flow
    /// line.
    pub quality: f64,
    /// Area growth rate of the transported cu-plane.
    pub cu_rate: f64,
}

#[derive(Debug, Clone)]
pub struct EntropyReport {
    pub per_seed: Vec<EntropySeed>,
    pub excluded: usize,
    /// Ensemble means of the three routes to the positive exponent:
    /// QR, unstable-direction Birkhoff, cu-determinant minus the middle
    /// exponent.
    pub qr: f64,
    pub unstable: f64,
    pub cu_minus_l0: f64,
    pub max_pairwise_rel: f64,
}

/// Power iteration of the tangent cocycle on the normal bundle: push one
/// vector, strip the flow component, renormalize. The accumulated log
/// growth converges to the top normal exponent, which is the positive
/// exponent of the splitting.
fn normal_bundle_rate(
    flow: &FlowSystem,
    x0: State,
    t: f64,
    ctrl: &StepControl,
) -> Result<(f64, f64), ErgodicError> {
    let h = 1.0;
    let n = (t / h).round() as usize;
    let burn = 50usize;
    let unit_flow = |x: &State| -> Result<State, ErgodicError> {
        let v = flow.rhs(x);
        let s = v.norm();
        if s < 1e-12 {
            return Err(ErgodicError::DirectionEstimation {
                reason: format!("stalled orbit, speed {s:.3e}"),
            });
        }
        Ok(v / s)
    };
    let mut x = x0;
    let mut u = {
        // generic start so every non-flow direction is represented
        let xh = unit_flow(&x)?;
        let g = State::new(1.0, 1.0, 1.0).normalize();
        let w = g - xh * g.dot(&xh);
        if w.norm() < 1e-8 {
            return Err(ErgodicError::DirectionEstimation {
                reason: "start vector parallel to the flow".into(),
            });
        }
        w.normalize()
    };
    let mut acc = NeumaierSum::new();
    let mut contamination = 0.0;
    for k in 0..burn + n {
        let frame = flow.tangent_flow(x, &[u], h, ctrl)?;
        x = frame.base;
        let w = frame.vectors[0];
        let xh = unit_flow(&x)?;
        let c = w.dot(&xh);
        let wp = w - xh * c;
        let g = wp.norm();
        if g < 1e-300 {
            return Err(ErgodicError::DirectionEstimation {
                reason: "pushed vector collapsed onto the flow direction".into(),
            });
        }
        if k >= burn {
            acc.add(g.ln());
            contamination += c.abs() / w.norm();
        }
        u = wp / g;
    }
    Ok((
        acc.value() / (n as f64 * h),
        1.0 - contamination / n as f64,
    ))
}

/// Area growth rate of the cu-plane: burn a generic plane onto the
/// dominated 2D subbundle, then measure wedge growth per unit time.
fn cu_plane_rate(
    flow: &FlowSystem,
    x0: State,
    t: f64,
    ctrl: &StepControl,
) -> Result<f64, ErgodicError> {
    let mut x = x0;
    let v = flow.rhs(&x);
    if v.norm() < 1e-12 {
        return Err(ErgodicError::DirectionEstimation {
            reason: "stalled orbit".into(),
        });
    }
    let mut a = v.normalize();
    let mut b = {
        let g = State::new(0.3, -0.7, 1.0).normalize();
        let w = g - a * g.dot(&a);
        w.normalize()
    };
    for _ in 0..50 {
        let frame = flow.tangent_flow(x, &[a, b], 1.0, ctrl)?;
        x = frame.base;
        a = frame.vectors[0].normalize();
        b = frame.vectors[1] - a * frame.vectors[1].dot(&a);
        b = b.normalize();
    }
    Ok(flow.cu_area_growth(x, a, b, t, 1.0, ctrl)? / t)
}

/// Three estimates of the positive exponent that the entropy formula makes
/// equal: the QR exponent, the normal-bundle Birkhoff average, and the
/// cu-plane determinant rate minus the middle exponent.
pub fn entropy_formula_check(
    flow: &FlowSystem,
    seeds: &[State],
    t: f64,
    burn: f64,
) -> Result<EntropyReport, ErgodicError> {
    assert!(!seeds.is_empty());
    let ctrl = default_ctrl();
    let per_seed: Vec<Option<EntropySeed>> = seeds
        .par_iter()
        .map(|s| {
            let x = flow.flow_to(*s, burn, &ctrl).ok()?;
            let est = flow.qr_lyapunov(x, t, 1.0, &ctrl).ok()?;
            let (unstable_rate, quality) = normal_bundle_rate(flow, x, t, &ctrl).ok()?;
            let cu_rate = cu_plane_rate(flow, x, t, &ctrl).ok()?;
            Some(EntropySeed {
                seed: *s,
                exponents: est.exponents,
                unstable_rate,
                quality,
                cu_rate,
            })
        })
        .collect();
    let kept: Vec<EntropySeed> = per_seed.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(ErgodicError::AllSeedsEscaped(seeds.len()));
    }
    let excluded = seeds.len() - kept.len();
    let n = kept.len() as f64;
    let qr = kept.iter().map(|s| s.exponents[0]).sum::<f64>() / n;
    let unstable = kept.iter().map(|s| s.unstable_rate).sum::<f64>() / n;
    let cu_minus_l0 = kept
        .iter()
        .map(|s| s.cu_rate - s.exponents[1])
        .sum::<f64>()
        / n;
    let scale = qr.abs().max(1e-12);
    let max_pairwise_rel = [
        (qr - unstable).abs(),
        (qr - cu_minus_l0).abs(),
        (unstable - cu_minus_l0).abs(),
    ]
    .into_iter()
    .fold(0.0_f64, f64::max)
        / scale;
    Ok(EntropyReport {
        per_seed: kept,
        excluded,
        qr,
        unstable,
        cu_minus_l0,
        max_pairwise_rel,
    })
}

// ---------------------------------------------------------------------------
// Abramov cross-check on the geometric model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AbramovReport {
    /// Transfer-operator route: integral of log|f'| against the Ulam
    /// stationary density.
    pub map_exponent_ulam: f64,
    /// Orbit route: sum of log|f'| divided by summed flight time along one
    /// long section orbit.
    pub flow_exponent: f64,
    /// Mean return time under the Ulam density.
    pub mean_tau_ulam: f64,
    /// Mean return time along the sampled orbit (diagnostic).
    pub mean_tau_orbit: f64,
    /// flow_exponent * mean_tau_ulam, to be compared with
    /// map_exponent_ulam.
    pub product: f64,
    pub rel_gap: f64,
    pub restarts: usize,
}

fn log_deriv(map: &BranchMap1D, x: f64) -> Option<f64> {
    let i = map.branch_index(x)?;
    Some(map.branches[i].deriv(x).abs().ln())
}

/// Abramov relation between the quotient map exponent and the semiflow
/// exponent: the per-return expansion integral must equal the per-time
/// exponent times the mean return time. The two sides here come from
/// independent routes (Ulam density vs orbit sampling).
pub fn abramov_check(
    sys: &GeometricLorenzSystem,
    n_returns: usize,
    ulam_bins: usize,
    burn: usize,
) -> Result<AbramovReport, ErgodicError> {
    assert!(n_returns >= 1000);
    let map = geometric_lorenz_map(&sys.spec)?;
    let chain = build_ulam(&map, ulam_bins)?;
    let dec = stationary_density(&chain, 1e-12)?;
    assert_eq!(dec.densities.len(), 1, "geometric quotient is ergodic");
    let density = &dec.densities[0];
    let edges = &dec.edges;
    let map_exponent_ulam = ulam_lyapunov(&map, edges, density);
    let lambda1 = sys.spec.eigenvalues.lambda1;
    let mut tau_int = NeumaierSum::new();
    for j in 0..density.len() {
        let w = edges[j + 1] - edges[j];
        let mid = 0.5 * (edges[j] + edges[j + 1]);
        let tau = sys.t_loop + exit_time(lambda1, mid.abs());
        tau_int.add(tau * density[j] * w);
    }
    let mean_tau_ulam = tau_int.value();

    let mut p = SectionPoint {
        section: 0,
        u: 0.31,
        v: 0.6180339887498949,
    };
    let mut logs = NeumaierSum::new();
    let mut taus = NeumaierSum::new();
    let mut kept = 0usize;
    let mut restarts = 0usize;
    let mut k = 0usize;
    while kept < n_returns {
        let x1 = 2.0 * p.v - 1.0;
        match (log_deriv(&map, x1), sys.first_return(&p, 1e-9)) {
            (Some(ld), Ok(r)) => {
                if k >= burn {
                    logs.add(ld);
                    taus.add(r.tau);
                    kept += 1;
                }
                p = r.end;
                k += 1;
            }
            _ => {
                // exact singular hit; nudge off the stable leaf
                restarts += 1;
                if restarts > 8 {
                    return Err(ErgodicError::Undersampled {
                        got: kept,
                        want: n_returns,
                    });
                }
                p.v += 1e-11 * restarts as f64;
            }
        }
    }
    let flow_exponent = logs.value() / taus.value();
    let mean_tau_orbit = taus.value() / kept as f64;
    let product = flow_exponent * mean_tau_ulam;
    let rel_gap = (product - map_exponent_ulam).abs() / map_exponent_ulam.abs();
    Ok(AbramovReport {
        map_exponent_ulam,
        flow_exponent,
        mean_tau_ulam,
        mean_tau_orbit,
        product,
        rel_gap,
        restarts,
    })
}

// ---------------------------------------------------------------------------
// Unstable conditional-density profile
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ProfileParams {
    /// Hits to collect after the burn-in, before the strip filter.
    pub n_hits: usize,
    pub burn: usize,
    /// Stable-direction quantile bands.
    pub n_bands: usize,
    /// Histogram bins along the expanding coordinate.
    pub bins: usize,
    /// Analyzed v-range (closed).
    pub strip: (f64, f64),
    pub t_min: f64,
    /// Minimum in-strip hits; fewer is an undersampled error.
    pub min_hits: usize,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            n_hits: 20_000,
            burn: 200,
            n_bands: 8,
            bins: 32,
            strip: (0.0, 1.0),
            t_min: 1e-9,
            min_hits: 10_000,
        }
    }
}

/// Conditional v-histogram over one stable-coordinate band.
#[derive(Debug, Clone)]
pub struct BandProfile {
    pub u_lo: f64,
    pub u_hi: f64,
    pub n_hits: usize,
    /// Density normalized to integrate to 1 over the strip.
    pub density: Vec<f64>,
    pub sup: f64,
}

#[derive(Debug, Clone)]
pub struct DensityProfile {
    pub v_edges: Vec<f64>,
    pub bands: Vec<BandProfile>,
    /// All-band pooled density, same normalization.
    pub pooled: Vec<f64>,
    /// Mean incoming flight time per v-bin (0 where empty). Flight times
    /// are attributed to the landing hit, so the blowup marks where orbits
    /// that grazed the singularity land.
    pub mean_tau: Vec<f64>,
    /// Landing coordinate of the longest observed flight; None when the
    /// flight times are flat (no singular blowup in the system).
    pub gamma_v: Option<f64>,
    /// Pooled density at the bin containing gamma_v.
    pub near_gamma_density: f64,
    /// Median of the populated pooled bins.
    pub median_density: f64,
    pub sup_density: f64,
    pub n_hits_used: usize,
    pub restarts: usize,
}

/// Histogram the section-hit cloud along the expanding coordinate within
/// narrow stable-coordinate bands. Bounded per-band densities are the
/// section shadow of the bounded cu-conditional densities; the vanishing
/// density near the singular-leaf image is the shadow of densities tending
/// to zero near the singularity.
pub fn unstable_density_profile<S: SectionedSystem>(
    sys: &S,
    start: SectionPoint,
    params: &ProfileParams,
) -> Result<DensityProfile, ErgodicError> {
    assert!(params.bins >= 4 && params.n_bands >= 1);
    assert!(params.strip.1 > params.strip.0);
    let mut p = start;
    let mut hits: Vec<(f64, f64, f64)> = Vec::with_capacity(params.n_hits);
    let mut restarts = 0usize;
    let mut k = 0usize;
    while hits.len() < params.n_hits {
        match sys.first_return(&p, params.t_min) {
            Ok(r) => {
                p = r.end;
                if k >= params.burn {
                    hits.push((p.u, p.v, r.tau));
                }
                k += 1;
            }
            Err(_) => {
                restarts += 1;
                if restarts > 8 {
                    break;
                }
                p.v += 1e-9 * restarts as f64;
                p.u = (p.u + 0.37).rem_euclid(1.0);
            }
        }
    }
    let strip = params.strip;
    let in_strip: Vec<(f64, f64, f64)> = hits
        .into_iter()
        .filter(|h| h.1 >= strip.0 && h.1 <= strip.1)
        .collect();
    if in_strip.len() < params.min_hits {
        return Err(ErgodicError::Undersampled {
            got: in_strip.len(),
            want: params.min_hits,
        });
    }

    let bins = params.bins;
    let width = (strip.1 - strip.0) / bins as f64;
    let v_edges: Vec<f64> = (0..=bins).map(|j| strip.0 + j as f64 * width).collect();
    let bin_of = |v: f64| (((v - strip.0) / width) as usize).min(bins - 1);

    // equal-count stable bands keep every band resolvable even when the
    // stable coordinate concentrates on a thin Cantor set; duplicate
    // quantile edges merge, so a zero-thickness attractor yields one band
    let mut us: Vec<f64> = in_strip.iter().map(|h| h.0).collect();
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut band_edges: Vec<f64> = (0..=params.n_bands)
        .map(|j| {
            if j == 0 {
                us[0]
            } else if j == params.n_bands {
                us[us.len() - 1]
            } else {
                us[j * us.len() / params.n_bands]
            }
        })
        .collect();
    band_edges.dedup();
    if band_edges.len() < 2 {
        band_edges.push(band_edges[0]);
    }
    let nb = band_edges.len() - 1;
    let band_of = |u: f64| {
        let mut b = band_edges.partition_point(|&e| e <= u);
        b = b.saturating_sub(1);
        b.min(nb - 1)
    };

    let mut band_counts = vec![vec![0usize; bins]; nb];
    let mut pooled_counts = vec![0usize; bins];
    let mut tau_sum = vec![0.0f64; bins];
    let (mut tau_min, mut tau_max, mut tau_tot) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    let mut max_tau_hit = (0.0f64, 0.0f64);
    for &(u, v, tau) in &in_strip {
        let j = bin_of(v);
        band_counts[band_of(u)][j] += 1;
        pooled_counts[j] += 1;
        tau_sum[j] += tau;
        tau_min = tau_min.min(tau);
        tau_max = tau_max.max(tau);
        tau_tot += tau;
        if tau > max_tau_hit.0 {
            max_tau_hit = (tau, v);
        }
    }
    let n_used = in_strip.len();
    let to_density = |counts: &[usize], total: usize| -> Vec<f64> {
        counts
            .iter()
            .map(|&c| c as f64 / (total as f64 * width))
            .collect()
    };
    let bands: Vec<BandProfile> = (0..nb)
        .map(|b| {
            let n = band_counts[b].iter().sum::<usize>();
            let density = to_density(&band_counts[b], n.max(1));
            let sup = density.iter().cloned().fold(0.0, f64::max);
            BandProfile {
                u_lo: band_edges[b],
                u_hi: band_edges[b + 1],
                n_hits: n,
                density,
                sup,
            }
        })
        .collect();
    let pooled = to_density(&pooled_counts, n_used);
    let mean_tau: Vec<f64> = (0..bins)
        .map(|j| {
            if pooled_counts[j] > 0 {
                tau_sum[j] / pooled_counts[j] as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut populated: Vec<f64> = pooled.iter().cloned().filter(|&d| d > 0.0).collect();
    populated.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_density = populated[populated.len() / 2];
    let sup_density = populated[populated.len() - 1];
    let tau_mean = tau_tot / n_used as f64;
    let gamma_v = if tau_max - tau_min > 0.05 * tau_mean {
        Some(max_tau_hit.1)
    } else {
        None
    };
    let near_gamma_density = gamma_v.map_or(f64::NAN, |g| pooled[bin_of(g)]);
    Ok(DensityProfile {
        v_edges,
        bands,
        pooled,
        mean_tau,
        gamma_v,
        near_gamma_density,
        median_density,
        sup_density,
        n_hits_used: n_used,
        restarts,
    })
}

// ---------------------------------------------------------------------------
// Support coverage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CoverageSweep {
    /// (horizon, covered fraction, cells visited by then) per requested
    /// mark, in increasing horizon order.
    pub marks: Vec<(f64, f64, usize)>,
    pub union_cells: usize,
    pub h: f64,
}

type Cell = (i64, i64, i64);

fn mark_cells(
    flow: &FlowSystem,
    x0: State,
    t: f64,
    h: f64,
    ctrl: &StepControl,
    marks: &[f64],
) -> Result<(HashSet<Cell>, Vec<usize>), FlowError> {
    let mut cells: HashSet<Cell> = HashSet::new();
    let mut snapshots = vec![0usize; marks.len()];
    let mut next_mark = 0usize;
    let mut c = *ctrl;
    c.guard_dims = 3;
    let cell = |y: &State| -> Cell {
        (
            (y[0] / h).floor() as i64,
            (y[1] / h).floor() as i64,
            (y[2] / h).floor() as i64,
        )
    };
    ode::integrate(
        |_t, y: &Vector3<f64>| flow.rhs(y),
        0.0,
        x0,
        t,
        &c,
        |s| {
            // chord-length subsampling so no cell is skipped over
            let d = (s.y1() - s.y0()).norm();
            let k = ((d / (0.45 * h)).ceil() as usize).max(1);
            for i in 0..=k {
                let y = s.eval(s.t0 + s.h * i as f64 / k as f64);
                cells.insert(cell(&y));
            }
            let end = s.t0 + s.h;
            while next_mark < marks.len() && end >= marks[next_mark] {
                snapshots[next_mark] = cells.len();
                next_mark += 1;
            }
        },
    )?;
    while next_mark < marks.len() {
        snapshots[next_mark] = cells.len();
        next_mark += 1;
    }
    Ok((cells, snapshots))
}

/// Covered fraction of grid cells: one orbit's visitation, at every mark in
/// `t_marks`, against the union cloud of all seed orbits run to `t_union`.
/// The first seed's own marks are prefixes of its union run, so fractions
/// are non-decreasing by construction.
pub fn support_coverage(
    flow: &FlowSystem,
    seeds: &[State],
    t_marks: &[f64],
    t_union: f64,
    h: f64,
    burn: f64,
) -> Result<CoverageSweep, ErgodicError> {
    assert!(!seeds.is_empty() && !t_marks.is_empty());
    assert!(h > 0.0);
    let mut marks = t_marks.to_vec();
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(
        *marks.last().unwrap() <= t_union,
        "marks must lie inside the union horizon"
    );
    let ctrl = StepControl {
        tol: 1e-8,
        max_step: 0.25,
        ..StepControl::default()
    };
    let x0 = flow.flow_to(seeds[0], burn, &ctrl)?;
    let (first_cells, snapshots) = mark_cells(flow, x0, t_union, h, &ctrl, &marks)?;
    let others: Vec<HashSet<Cell>> = seeds[1..]
        .par_iter()
        .map(|s| {
            let x = flow.flow_to(*s, burn, &ctrl)?;
            Ok(mark_cells(flow, x, t_union, h, &ctrl, &[])?.0)
        })
        .collect::<Result<_, ErgodicError>>()?;
    let mut union = first_cells;
    for set in others {
        union.extend(set);
    }
    let union_cells = union.len();
    let marks_out = marks
        .iter()
        .zip(&snapshots)
        .map(|(&t, &n)| (t, n as f64 / union_cells as f64, n))
        .collect();
    Ok(CoverageSweep {
        marks: marks_out,
        union_cells,
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{lorenz_field, GeometricLorenzSpec};
    use crate::sections::CrossSection;
    use nalgebra::Matrix3;

    fn lorenz() -> FlowSystem {
        lorenz_field(10.0, 28.0, 8.0 / 3.0)
    }

    /// Attracting unit cycle in the xy-plane, pure exponential rate
    /// `lam_z` transverse to it: exponents (lam_z, 0, -2) for lam_z > 0.
    fn hopf_cylinder(lam_z: f64) -> FlowSystem {
        let rhs = move |x: &State| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            State::new(
                -x[1] + x[0] * (1.0 - r2),
                x[0] + x[1] * (1.0 - r2),
                lam_z * x[2],
            )
        };
        let jac = move |x: &State| {
            let (a, b) = (x[0], x[1]);
            Matrix3::new(
                1.0 - 3.0 * a * a - b * b,
                -1.0 - 2.0 * a * b,
                0.0,
                1.0 - 2.0 * a * b,
                1.0 - a * a - 3.0 * b * b,
                0.0,
                0.0,
                0.0,
                lam_z,
            )
        };
        FlowSystem::new("hopf_cylinder", vec![], Box::new(rhs), Box::new(jac), vec![])
    }

    /// Double-well gradient in x with a damped rotation in (y, z): two
    /// attracting points at x = +-1, basins split by the sign of x.
    fn double_well_rotation() -> FlowSystem {
        let rhs = |x: &State| {
            State::new(
                x[0] - x[0] * x[0] * x[0],
                -x[2] - 0.1 * x[1],
                x[1] - 0.1 * x[2],
            )
        };
        let jac = |x: &State| {
            Matrix3::new(
                1.0 - 3.0 * x[0] * x[0],
                0.0,
                0.0,
                0.0,
                -0.1,
                -1.0,
                0.0,
                1.0,
                -0.1,
            )
        };
        FlowSystem::new("double_well", vec![], Box::new(rhs), Box::new(jac), vec![])
    }

    #[test]
    fn constant_observable_has_zero_spread() {
        let flow = lorenz();
        let seeds = lorenz_seed_box(5, 11);
        let obs: Vec<Observable> = vec![("one", &|_: &State| 1.0)];
        let rep = birkhoff_uniqueness(&flow, &obs, &seeds, 1e3, &BirkhoffParams::default())
            .unwrap();
        let o = &rep.observables[0];
        assert!(o.spread.abs() < 1e-12, "spread {}", o.spread);
        assert_eq!(o.clusters.len(), 1);
        assert_eq!(rep.escaped, 0);
    }

    #[test]
    fn lorenz_averages_form_one_tight_cluster() {
        let flow = lorenz();
        let seeds = lorenz_seed_box(16, 23);
        let obs: Vec<Observable> = vec![("x3", &|y: &State| y[2])];
        let rep = birkhoff_uniqueness(&flow, &obs, &seeds, 2000.0, &BirkhoffParams::default())
            .unwrap();
        let o = &rep.observables[0];
        assert_eq!(rep.escaped, 0);
        assert!(
            o.spread < 0.01 * o.mean.abs(),
            "spread {} mean {}",
            o.spread,
            o.mean
        );
        assert_eq!(o.clusters.len(), 1, "clusters {:?}", o.clusters.len());
        // quarter-horizon spread should be roughly twice the full spread
        let ratio = o.halving_ratio();
        assert!((1.3..=3.2).contains(&ratio), "halving ratio {ratio}");
    }

    #[test]
    fn double_well_flags_two_clusters() {
        let flow = double_well_rotation();
        let mut seeds = vec![];
        for i in 0..10 {
            let s = 0.3 + i as f64 * 0.1;
            seeds.push(State::new(s, 0.4, -0.3));
            seeds.push(State::new(-s, -0.2, 0.5));
        }
        let obs: Vec<Observable> = vec![("x1", &|y: &State| y[0])];
        let rep = birkhoff_uniqueness(&flow, &obs, &seeds, 1e3, &BirkhoffParams::default())
            .unwrap();
        let o = &rep.observables[0];
        assert_eq!(o.clusters.len(), 2, "expected the two wells to separate");
        assert_eq!(o.clusters[0].len(), 10);
        assert_eq!(o.clusters[1].len(), 10);
        assert!((o.values[o.clusters[1][0]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn escaping_seeds_are_excluded_and_counted() {
        let flow = FlowSystem::linear_diag(1.0, -1.0, -1.0);
        let seeds = vec![
            State::new(0.0, 1.0, 1.0),
            State::new(2.0, 0.0, 0.0),
            State::new(0.0, -0.5, 0.2),
            State::new(-3.0, 1.0, 0.0),
        ];
        let obs: Vec<Observable> = vec![("y", &|y: &State| y[1])];
        let mut params = BirkhoffParams::default();
        params.burn = 0.0;
        let rep = birkhoff_uniqueness(&flow, &obs, &seeds, 1e3, &params).unwrap();
        assert_eq!(rep.escaped, 2);
        assert_eq!(rep.survivors, vec![0, 2]);
    }

    #[test]
    fn cycle_spectrum_is_exact_and_classified() {
        let flow = hopf_cylinder(0.9);
        let seeds = vec![State::new(1.3, 0.0, 0.0), State::new(0.2, -0.8, 0.0)];
        let rep = spectrum_structure(&flow, &seeds, 300.0, 30.0).unwrap();
        assert!(rep.all_classified);
        for s in &rep.per_seed {
            assert!((s.exponents[0] - 0.9).abs() < 2e-3, "{:?}", s.exponents);
            // the middle estimate converges like 1/T toward the exact 0
            assert!(s.exponents[1].abs() < LAMBDA0_TOL, "{:?}", s.exponents);
            assert!((s.exponents[2] + 2.0).abs() < 2e-2, "{:?}", s.exponents);
        }
    }

    #[test]
    fn diagonal_saddle_rates_are_exact_but_unclassified() {
        let flow = FlowSystem::linear_diag(0.7, -0.4, -1.2);
        let seeds = vec![State::new(1e-3, 1e-3, 1e-3)];
        let rep = spectrum_structure(&flow, &seeds, 10.0, 0.0).unwrap();
        let e = rep.per_seed[0].exponents;
        assert!((e[0] - 0.7).abs() < 1e-7, "{e:?}");
        assert!((e[1] + 0.4).abs() < 1e-7, "{e:?}");
        assert!((e[2] + 1.2).abs() < 1e-7, "{e:?}");
        // the middle rate is a genuine -0.4, not a flow-direction zero
        assert!(!rep.all_classified);
    }

    #[test]
    fn lorenz_spectrum_signs_and_divergence_identity() {
        let flow = lorenz();
        let seeds = lorenz_seed_box(4, 37);
        let rep = spectrum_structure(&flow, &seeds, 600.0, 50.0).unwrap();
        assert_eq!(rep.escaped, 0);
        assert!(rep.all_classified, "spectra {:?}", rep.mean);
        let trace = -(10.0 + 1.0 + 8.0 / 3.0);
        for s in &rep.per_seed {
            assert!(s.exponents[0] + s.exponents[1] > 0.0, "volume expanding cu");
            assert!((s.div_avg - trace).abs() < 1e-6, "constant divergence");
            assert!(
                (s.sum - s.div_avg).abs() < 0.01 * trace.abs(),
                "sum {} trace {}",
                s.sum,
                s.div_avg
            );
        }
    }

    #[test]
    fn cycle_entropy_routes_all_equal_the_transverse_rate() {
        let flow = hopf_cylinder(0.9);
        let seeds = vec![State::new(1.1, 0.2, 0.0)];
        let rep = entropy_formula_check(&flow, &seeds, 150.0, 30.0).unwrap();
        assert!((rep.qr - 0.9).abs() < 5e-3, "qr {}", rep.qr);
        assert!((rep.unstable - 0.9).abs() < 5e-3, "unstable {}", rep.unstable);
        assert!(
            (rep.cu_minus_l0 - 0.9).abs() < 5e-3,
            "cu {}",
            rep.cu_minus_l0
        );
        assert!(rep.per_seed[0].quality > 0.9);
    }

    #[test]
    fn lorenz_entropy_triple_is_consistent() {
        let flow = lorenz();
        let seeds = lorenz_seed_box(3, 91);
        let rep = entropy_formula_check(&flow, &seeds, 500.0, 50.0).unwrap();
        assert_eq!(rep.excluded, 0);
        assert!(
            rep.max_pairwise_rel < 0.06,
            "triple ({}, {}, {}) rel {}",
            rep.qr,
            rep.unstable,
            rep.cu_minus_l0,
            rep.max_pairwise_rel
        );
    }

    #[test]
    fn abramov_relation_closes_on_the_geometric_model() {
        let sys = GeometricLorenzSystem::new(GeometricLorenzSpec::default()).unwrap();
        let rep = abramov_check(&sys, 200_000, 4096, 200).unwrap();
        assert!(
            rep.rel_gap < 0.05,
            "ulam {} vs product {} (gap {})",
            rep.map_exponent_ulam,
            rep.product,
            rep.rel_gap
        );
        assert!(rep.mean_tau_ulam > sys.t_loop);
        assert!((rep.mean_tau_orbit - rep.mean_tau_ulam).abs() < 0.05 * rep.mean_tau_ulam);
    }

    #[test]
    fn geometric_profile_refines_stably_and_vanishes_near_gamma() {
        let sys = GeometricLorenzSystem::new(GeometricLorenzSpec::default()).unwrap();
        let start = SectionPoint {
            section: 0,
            u: 0.31,
            v: 0.618,
        };
        let mut params = ProfileParams {
            n_hits: 200_000,
            ..ProfileParams::default()
        };
        let coarse = unstable_density_profile(&sys, start, &params).unwrap();
        params.bins = 64;
        let fine = unstable_density_profile(&sys, start, &params).unwrap();
        for (b32, b64) in coarse.bands.iter().zip(&fine.bands) {
            assert!(
                (b32.sup - b64.sup).abs() <= 0.25 * b32.sup.max(b64.sup),
                "band sup {} vs {}",
                b32.sup,
                b64.sup
            );
        }
        let g = coarse.gamma_v.expect("flight-time blowup is detectable");
        assert!(
            g < 0.02 || g > 0.98,
            "blowup lands on the singular-leaf image, got v = {g}"
        );
        assert!(
            coarse.near_gamma_density < 0.5 * coarse.median_density,
            "near gamma {} median {}",
            coarse.near_gamma_density,
            coarse.median_density
        );
        assert!(coarse.sup_density.is_finite() && coarse.sup_density < 5.0);
        // per-leaf normalization
        let width = coarse.v_edges[1] - coarse.v_edges[0];
        for b in &coarse.bands {
            let mass: f64 = b.density.iter().map(|d| d * width).sum();
            assert!((mass - 1.0).abs() < 1e-9);
        }
    }

    /// Area-preserving baker map under a constant roof: the product measure
    /// is uniform, so every band profile is flat and no flight-time blowup
    /// exists.
    struct BakerSystem {
        sections: Vec<CrossSection>,
        ingoing: Vec<usize>,
    }

    impl BakerSystem {
        fn new() -> Self {
            let sec = CrossSection::new(
                "base",
                State::new(0.0, 0.0, 0.0),
                State::new(1.0, 0.0, 0.0),
                State::new(0.0, 1.0, 0.0),
                1.0,
                0.0,
            )
            .unwrap();
            Self {
                sections: vec![sec],
                ingoing: vec![0],
            }
        }
    }

    impl SectionedSystem for BakerSystem {
        fn sections(&self) -> &[CrossSection] {
            &self.sections
        }
        fn ingoing(&self) -> &[usize] {
            &self.ingoing
        }
        fn first_hit(&self, p: &SectionPoint) -> Result<(SectionPoint, f64), ReturnError> {
            let half = if p.v < 0.5 { 0.0 } else { 1.0 };
            // exact binary doubling collapses to 0 in f64; dither keeps
            // the orbit generic without moving the histogram
            let v = ((2.0 * p.v).fract() + 1e-9 * unit_hash(p.v, 0xBAC4)).fract();
            Ok((
                SectionPoint {
                    section: 0,
                    u: 0.5 * (p.u + half),
                    v,
                },
                1.0,
            ))
        }
    }

    #[test]
    fn baker_toy_profile_is_flat_with_no_blowup() {
        let sys = BakerSystem::new();
        let start = SectionPoint {
            section: 0,
            u: 0.2341,
            v: 0.71234,
        };
        let params = ProfileParams {
            n_hits: 400_000,
            bins: 16,
            ..ProfileParams::default()
        };
        let prof = unstable_density_profile(&sys, start, &params).unwrap();
        assert!(prof.gamma_v.is_none(), "constant roof has no blowup");
        for b in &prof.bands {
            for &d in &b.density {
                assert!((d - 1.0).abs() < 0.12, "flat profile, got {d}");
            }
        }
    }

    #[test]
    fn undersampled_profile_is_an_error() {
        let sys = GeometricLorenzSystem::new(GeometricLorenzSpec::default()).unwrap();
        let start = SectionPoint {
            section: 0,
            u: 0.31,
            v: 0.618,
        };
        let params = ProfileParams {
            n_hits: 500,
            min_hits: 10_000,
            ..ProfileParams::default()
        };
        match unstable_density_profile(&sys, start, &params) {
            Err(ErgodicError::Undersampled { got, want }) => {
                assert!(got < want);
            }
            other => panic!("expected undersampled, got {other:?}"),
        }
    }

    #[test]
    fn periodic_toy_covers_its_own_support() {
        let flow = hopf_cylinder(-0.5);
        // same z sign: the cycle hugs the z = 0 cell boundary from one side
        let seeds = vec![State::new(1.2, 0.0, 0.3), State::new(0.0, -1.1, 0.2)];
        let sweep = support_coverage(&flow, &seeds, &[40.0], 40.0, 0.2, 30.0).unwrap();
        let (_, frac, _) = sweep.marks[0];
        assert!((frac - 1.0).abs() < 1e-12, "single loop covers all, {frac}");
    }

    #[test]
    fn lorenz_coverage_is_high_and_monotone() {
        let flow = lorenz();
        let seeds = lorenz_seed_box(4, 57);
        let sweep =
            support_coverage(&flow, &seeds, &[100.0, 400.0, 1200.0], 1200.0, 1.0, 30.0)
                .unwrap();
        let fr: Vec<f64> = sweep.marks.iter().map(|m| m.1).collect();
        assert!(fr[0] <= fr[1] && fr[1] <= fr[2], "monotone {fr:?}");
        assert!(fr[2] > 0.9, "one long orbit fills the union, {}", fr[2]);
    }
}
