//! Cross-sections and Poincaré return maps.
//!
//! A [`CrossSection`] is an affine square chart transverse to the flow; a
//! [`SectionedSystem`] bundles several charts with a first-hit map between
//! them, either closed-form (geometric models) or by event-located ODE
//! integration ([`OdeSectionedSystem`]). On top of the return maps live the
//! stable-direction estimator, the unstable-cone verifier with its flight-time
//! calibration, and the projection to a one-dimensional quotient map.

use crate::flow::{FlowSystem, State};
use crate::map1d::{BranchKind, BranchMap1D, MonotoneHermite};
use crate::numerics;
use crate::ode::{self, OdeError, StepControl};
use nalgebra::{Matrix2, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReturnError {
    #[error("orbit converges toward an equilibrium (stable-manifold point) at t = {t:.6}")]
    StableManifold { t: f64 },
    #[error("no section return within t_max = {t_max}")]
    Escaped { t_max: f64 },
    #[error("more than {cap} section crossings before a valid return")]
    TooManyCrossings { cap: u32 },
    #[error("finite-difference stencil straddles a branch boundary")]
    FdStraddlesBoundary,
    #[error("only {got} successful returns, need at least 2")]
    InsufficientReturns { got: usize },
    #[error("section chart is degenerate: {reason}")]
    ChartDegenerate { reason: String },
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Affine square chart `(u, v) -> origin + u e_u + v e_v` on `[0,1]^2`.
///
/// The `v` coordinate indexes stable leaves; `u` runs along a leaf. The
/// cu-boundary (the leaf-end edges `u = 0` and `u = 1`) is what the
/// adaptedness margin `delta` keeps attractor hits away from.
#[derive(Debug, Clone)]
pub struct CrossSection {
    pub name: String,
    pub origin: State,
    pub e_u: State,
    pub e_v: State,
    normal: State,
    basis_inv: Matrix3<f64>,
    /// Sign of `<X, normal>` at a registered crossing.
    pub crossing_sign: f64,
    /// Adaptedness margin: hits of the attractor stay further than this from
    /// the leaf-end edges, in ambient distance units.
    pub delta: f64,
}

/// Chart membership slack, in chart units.
const UV_SLACK: f64 = 1e-9;

impl CrossSection {
    pub fn new(
        name: impl Into<String>,
        origin: State,
        e_u: State,
        e_v: State,
        crossing_sign: f64,
        delta: f64,
    ) -> Result<Self, ReturnError> {
        let cross = e_u.cross(&e_v);
        if cross.norm() <= 1e-10 * e_u.norm() * e_v.norm() {
            return Err(ReturnError::ChartDegenerate {
                reason: "e_u and e_v are (near) collinear".into(),
            });
        }
        let normal = cross.normalize();
        let basis = Matrix3::from_columns(&[e_u, e_v, normal]);
        let basis_inv = basis.try_inverse().ok_or(ReturnError::ChartDegenerate {
            reason: "chart basis is singular".into(),
        })?;
        Ok(Self {
            name: name.into(),
            origin,
            e_u,
            e_v,
            normal,
            basis_inv,
            crossing_sign,
            delta,
        })
    }

    pub fn chart(&self, u: f64, v: f64) -> State {
        self.origin + self.e_u * u + self.e_v * v
    }

    /// Chart coordinates plus the off-plane component (normal units).
    pub fn uvw(&self, x: &State) -> (f64, f64, f64) {
        let c = self.basis_inv * (x - self.origin);
        (c[0], c[1], c[2])
    }

    /// Signed distance off the section plane.
    pub fn g(&self, x: &State) -> f64 {
        (x - self.origin).dot(&self.normal)
    }

    pub fn normal(&self) -> &State {
        &self.normal
    }

    pub fn contains_uv(&self, u: f64, v: f64) -> bool {
        (-UV_SLACK..=1.0 + UV_SLACK).contains(&u) && (-UV_SLACK..=1.0 + UV_SLACK).contains(&v)
    }

    /// Min of `|<X, n>| / |X|` over an `n x n` chart grid.
    pub fn transversality_min(&self, flow: &FlowSystem, n: usize) -> f64 {
        let mut worst = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                let u = (i as f64 + 0.5) / n as f64;
                let v = (j as f64 + 0.5) / n as f64;
                let x = self.flow_ratio(flow, u, v);
                worst = worst.min(x);
            }
        }
        worst
    }

    fn flow_ratio(&self, flow: &FlowSystem, u: f64, v: f64) -> f64 {
        let xdot = flow.rhs(&self.chart(u, v));
        let speed = xdot.norm();
        if speed == 0.0 {
            return 0.0;
        }
        xdot.dot(&self.normal).abs() / speed
    }

    /// Min pairwise image distance over an `n x n` grid (injectivity check;
    /// affine charts only fail it when the basis is degenerate).
    pub fn injectivity_min_gap(&self, n: usize) -> f64 {
        let pts: Vec<State> = (0..n * n)
            .map(|k| self.chart((k / n) as f64 / (n - 1) as f64, (k % n) as f64 / (n - 1) as f64))
            .collect();
        let mut gap = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                gap = gap.min((pts[i] - pts[j]).norm());
            }
        }
        gap
    }
}

/// A point on a section, in chart coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionPoint {
    pub section: usize,
    pub u: f64,
    pub v: f64,
}

/// One located return: source, image, flight time, crossing count.
#[derive(Debug, Clone, Copy)]
pub struct ReturnSample {
    pub start: SectionPoint,
    pub end: SectionPoint,
    pub tau: f64,
    pub crossings: u32,
}

/// Global bound on section crossings per return.
pub const MAX_CROSSINGS: u32 = 64;

/// A flow equipped with cross-sections and a one-hit Poincaré map.
pub trait SectionedSystem: Sync {
    fn sections(&self) -> &[CrossSection];

    /// Indices of the sections on which returns are measured.
    fn ingoing(&self) -> &[usize];

    fn ambient(&self, p: &SectionPoint) -> State {
        self.sections()[p.section].chart(p.u, p.v)
    }

    /// Next crossing of any registered section, with its flight time.
    fn first_hit(&self, p: &SectionPoint) -> Result<(SectionPoint, f64), ReturnError>;

    /// First hit on an ingoing section with accumulated flight time >= t_min.
    fn first_return(&self, from: &SectionPoint, t_min: f64) -> Result<ReturnSample, ReturnError> {
        let mut p = *from;
        let mut tau = 0.0;
        let mut crossings = 0u32;
        loop {
            let (q, dt) = self.first_hit(&p)?;
            tau += dt;
            crossings += 1;
            if crossings > MAX_CROSSINGS {
                return Err(ReturnError::TooManyCrossings { cap: MAX_CROSSINGS });
            }
            p = q;
            if tau >= t_min && self.ingoing().contains(&p.section) {
                return Ok(ReturnSample {
                    start: *from,
                    end: p,
                    tau,
                    crossings,
                });
            }
        }
    }
}

/// Quotient coordinate of a point on an ingoing section: ingoing index plus
/// the stable-leaf coordinate `v`. `None` off the ingoing sections.
pub fn global_coord<S: SectionedSystem + ?Sized>(sys: &S, p: &SectionPoint) -> Option<f64> {
    sys.ingoing()
        .iter()
        .position(|&s| s == p.section)
        .map(|k| k as f64 + p.v)
}

/// Sections attached to a vector field; hits are event-located on dense
/// integrator output.
pub struct OdeSectionedSystem {
    pub flow: FlowSystem,
    sections: Vec<CrossSection>,
    ingoing: Vec<usize>,
    pub ctrl: StepControl,
    /// Escape horizon per hit.
    pub t_max: f64,
    /// Crossing-time bisection tolerance.
    pub event_tol: f64,
    /// Speeds below this signal convergence toward an equilibrium.
    pub stall_speed: f64,
}

/// Hits located earlier than this are re-detections of the start point.
const HIT_T_EPS: f64 = 1e-6;

impl OdeSectionedSystem {
    pub fn new(flow: FlowSystem, sections: Vec<CrossSection>, ingoing: Vec<usize>) -> Self {
        assert!(!sections.is_empty());
        assert!(ingoing.iter().all(|&i| i < sections.len()));
        let ctrl = StepControl {
            tol: 1e-10,
            max_step: 0.1,
            guard_dims: 3,
            ..StepControl::default()
        };
        Self {
            flow,
            sections,
            ingoing,
            ctrl,
            t_max: 50.0,
            event_tol: 1e-10,
            stall_speed: 1e-8,
        }
    }

    pub fn sections_vec(&self) -> &Vec<CrossSection> {
        &self.sections
    }
}

impl SectionedSystem for OdeSectionedSystem {
    fn sections(&self) -> &[CrossSection] {
        &self.sections
    }

    fn ingoing(&self) -> &[usize] {
        &self.ingoing
    }

    fn first_hit(&self, p: &SectionPoint) -> Result<(SectionPoint, f64), ReturnError> {
        let x0 = self.ambient(p);
        // (section, t*, u, v) of the earliest valid crossing
        let mut found: Option<(usize, f64, f64, f64)> = None;
        let mut stalled: Option<f64> = None;
        const SUBS: usize = 4;

        ode::integrate_until(
            |_t, y| self.flow.rhs(y),
            0.0,
            x0,
            self.t_max,
            &self.ctrl,
            |step| {
                if self.flow.rhs(&step.y1()).norm() < self.stall_speed {
                    stalled = Some(step.t1());
                    return false;
                }
                let mut best: Option<(usize, f64, f64, f64)> = None;
                for (si, sec) in self.sections.iter().enumerate() {
                    let mut ta = step.t0;
                    let mut ga = sec.g(&step.eval(ta));
                    'subs: for k in 1..=SUBS {
                        let tb = step.t0 + step.h * k as f64 / SUBS as f64;
                        let gb = sec.g(&step.eval(tb));
                        let crossed = ga * gb < 0.0 || (gb == 0.0 && ga != 0.0);
                        if crossed {
                            let t_star = if gb == 0.0 {
                                tb
                            } else {
                                match numerics::bisect_root(
                                    |t| sec.g(&step.eval(t)),
                                    ta,
                                    tb,
                                    self.event_tol,
                                ) {
                                    Some(t) => t,
                                    None => {
                                        ta = tb;
                                        ga = gb;
                                        continue;
                                    }
                                }
                            };
                            if t_star > HIT_T_EPS {
                                let x_star = step.eval(t_star);
                                let outward = self.flow.rhs(&x_star).dot(sec.normal());
                                if outward * sec.crossing_sign > 0.0 {
                                    let (u, v, _) = sec.uvw(&x_star);
                                    if sec.contains_uv(u, v)
                                        && best.is_none_or(|(_, tb0, _, _)| t_star < tb0)
                                    {
                                        best = Some((
                                            si,
                                            t_star,
                                            u.clamp(0.0, 1.0),
                                            v.clamp(0.0, 1.0),
                                        ));
                                        // later sub-intervals of this section
                                        // cannot beat an earlier hit
                                        break 'subs;
                                    }
                                }
                            }
                        }
                        ta = tb;
                        ga = gb;
                    }
                }
                if let Some(hit) = best {
                    found = Some(hit);
                    return false;
                }
                true
            },
        )?;

        if let Some(t) = stalled {
            return Err(ReturnError::StableManifold { t });
        }
        match found {
            Some((section, t, u, v)) => Ok((SectionPoint { section, u, v }, t)),
            None => Err(ReturnError::Escaped { t_max: self.t_max }),
        }
    }
}

/// Finite-difference Jacobian of the `t_min`-return map at `p`, plus the
/// unperturbed return. The stencil must stay on one branch: all five returns
/// have to land on the same section with the same crossing count.
pub fn fd_return_jacobian<S: SectionedSystem + ?Sized>(
    sys: &S,
    p: &SectionPoint,
    t_min: f64,
    h: f64,
) -> Result<(Matrix2<f64>, ReturnSample), ReturnError> {
    let base = sys.first_return(p, t_min)?;
    let probe = |u: f64, v: f64| -> Result<SectionPoint, ReturnError> {
        let s = sys.first_return(
            &SectionPoint {
                section: p.section,
                u,
                v,
            },
            t_min,
        )?;
        if s.end.section != base.end.section || s.crossings != base.crossings {
            return Err(ReturnError::FdStraddlesBoundary);
        }
        Ok(s.end)
    };
    let up = (p.u + h).min(1.0);
    let um = (p.u - h).max(0.0);
    let vp = (p.v + h).min(1.0);
    let vm = (p.v - h).max(0.0);
    let r_up = probe(up, p.v)?;
    let r_um = probe(um, p.v)?;
    let r_vp = probe(p.u, vp)?;
    let r_vm = probe(p.u, vm)?;
    let du = up - um;
    let dv = vp - vm;
    let j = Matrix2::new(
        (r_up.u - r_um.u) / du,
        (r_vp.u - r_vm.u) / dv,
        (r_up.v - r_um.v) / du,
        (r_vp.v - r_vm.v) / dv,
    );
    Ok((j, base))
}

/// Most-contracted direction of the composed return derivative at a point.
#[derive(Debug, Clone, Copy)]
pub struct StableDirection {
    /// Unit `(du, dv)` in the chart of the starting section.
    pub direction: [f64; 2],
    /// Geometric-mean contraction factor per return along the direction.
    pub contraction: f64,
    pub returns_used: usize,
}

/// Estimate the stable direction inside the section at `p` by composing
/// finite-difference return Jacobians along the orbit and taking the smallest
/// right-singular direction.
pub fn estimate_stable_direction<S: SectionedSystem + ?Sized>(
    sys: &S,
    p: &SectionPoint,
    n_iters: usize,
    t_min: f64,
    fd_h: f64,
) -> Result<StableDirection, ReturnError> {
    let mut q = *p;
    let mut m = Matrix2::identity();
    let mut log_scale = 0.0_f64;
    let mut used = 0;
    for _ in 0..n_iters {
        let Ok((j, samp)) = fd_return_jacobian(sys, &q, t_min, fd_h) else {
            break;
        };
        m = j * m;
        // rescale so the composition tracks direction without under/overflow
        let s = m.abs().max();
        if s == 0.0 {
            break;
        }
        m /= s;
        log_scale += s.ln();
        q = samp.end;
        used += 1;
    }
    if used < 2 {
        return Err(ReturnError::InsufficientReturns { got: used });
    }
    let (_, s_min, _, v_min) = numerics::svd2(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let sigma_min = s_min * log_scale.exp();
    let mut dir = v_min;
    if dir[0] < 0.0 || (dir[0] == 0.0 && dir[1] < 0.0) {
        dir = [-dir[0], -dir[1]];
    }
    Ok(StableDirection {
        direction: dir,
        contraction: sigma_min.powf(1.0 / used as f64),
        returns_used: used,
    })
}

/// Image-cone statistics for return maps over one flight-time threshold.
#[derive(Debug, Clone, Copy)]
pub struct ConeReport {
    pub rho: f64,
    pub t_min: f64,
    pub max_width: f64,
    pub min_expansion: f64,
    pub samples: usize,
    pub failures: usize,
}

/// Push sampled cone vectors `|du| <= rho |dv|` through finite-difference
/// return Jacobians. Expansion is measured in the ambient metric, width in
/// chart coordinates of the image section.
pub fn cone_check<S: SectionedSystem>(
    sys: &S,
    n_samples: usize,
    rho: f64,
    t_min: f64,
    fd_h: f64,
    seed: u64,
) -> ConeReport {
    assert!(rho > 0.0 && rho < 1.0);
    let ingoing = sys.ingoing();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_width: f64 = 0.0;
    let mut min_expansion = f64::INFINITY;
    let mut ok = 0;
    let mut failures = 0;
    while ok < n_samples && failures < 10 * n_samples {
        let p = SectionPoint {
            section: ingoing[rng.gen_range(0..ingoing.len())],
            u: rng.gen_range(0.01..0.99),
            v: rng.gen_range(0.01..0.99),
        };
        let a = rho * rng.gen_range(-1.0..1.0);
        match fd_return_jacobian(sys, &p, t_min, fd_h) {
            Ok((j, samp)) => {
                let w = j * nalgebra::Vector2::new(a, 1.0);
                let s_in = &sys.sections()[p.section];
                let s_out = &sys.sections()[samp.end.section];
                let len_in = (s_in.e_u * a + s_in.e_v).norm();
                let len_out = (s_out.e_u * w[0] + s_out.e_v * w[1]).norm();
                if len_in == 0.0 {
                    failures += 1;
                    continue;
                }
                min_expansion = min_expansion.min(len_out / len_in);
                let width = if w[1] == 0.0 {
                    f64::INFINITY
                } else {
                    (w[0] / w[1]).abs()
                };
                max_width = max_width.max(width);
                ok += 1;
            }
            Err(_) => failures += 1,
        }
    }
    ConeReport {
        rho,
        t_min,
        max_width,
        min_expansion,
        samples: ok,
        failures,
    }
}

/// Flight-time thresholds tried by [`calibrate_t2`], ascending.
pub const T2_LADDER: [f64; 10] = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 24.0, 32.0];

/// Cone-check pass thresholds for the lambda = 1/3 calibration.
pub const CONE_MIN_EXPANSION: f64 = 2.5;

/// Smallest ladder flight time whose cone report has image width <= rho/2 and
/// min expansion >= 2.5, with the report. `None` when no rung passes.
pub fn calibrate_t2<S: SectionedSystem>(
    sys: &S,
    n_samples: usize,
    rho: f64,
    fd_h: f64,
    seed: u64,
) -> Option<(f64, ConeReport)> {
    for &t2 in T2_LADDER.iter() {
        let rep = cone_check(sys, n_samples, rho, t2, fd_h, seed);
        if rep.samples >= n_samples
            && rep.max_width <= rho / 2.0
            && rep.min_expansion >= CONE_MIN_EXPANSION
        {
            return Some((t2, rep));
        }
    }
    None
}

/// Contraction statistics over sampled same-leaf pairs.
#[derive(Debug, Clone, Copy)]
pub struct LeafReport {
    pub max_factor: f64,
    pub mean_factor: f64,
    pub pairs: usize,
    pub failures: usize,
}

/// Ratio of image distance to source distance for pairs on one stable leaf
/// (same `v`, different `u`), under the `t_min`-return.
pub fn leaf_contraction_check<S: SectionedSystem>(
    sys: &S,
    n_pairs: usize,
    t_min: f64,
    seed: u64,
) -> LeafReport {
    let ingoing = sys.ingoing();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_factor: f64 = 0.0;
    let mut sum = 0.0;
    let mut ok = 0;
    let mut failures = 0;
    while ok < n_pairs && failures < 10 * n_pairs {
        let section = ingoing[rng.gen_range(0..ingoing.len())];
        let v = rng.gen_range(0.01..0.99);
        let u1 = rng.gen_range(0.0..1.0);
        let du = rng.gen_range(0.05..0.4);
        let u2 = if u1 + du <= 1.0 { u1 + du } else { u1 - du };
        let p1 = SectionPoint { section, u: u1, v };
        let p2 = SectionPoint { section, u: u2, v };
        let d0 = (sys.ambient(&p1) - sys.ambient(&p2)).norm();
        match (sys.first_return(&p1, t_min), sys.first_return(&p2, t_min)) {
            (Ok(r1), Ok(r2)) if r1.end.section == r2.end.section => {
                let d1 = (sys.ambient(&r1.end) - sys.ambient(&r2.end)).norm();
                let f = d1 / d0;
                max_factor = max_factor.max(f);
                sum += f;
                ok += 1;
            }
            _ => failures += 1,
        }
    }
    LeafReport {
        max_factor,
        mean_factor: if ok > 0 { sum / ok as f64 } else { f64::NAN },
        pairs: ok,
        failures,
    }
}

/// Tabulation controls for [`quotient_map`].
#[derive(Debug, Clone, Copy)]
pub struct QuotientParams {
    pub grid_n: usize,
    /// Minimum flight time of the underlying return.
    pub t_min: f64,
    /// `u` coordinate of the cu-edge on which leaves are sampled.
    pub u_edge: f64,
    /// Jump in `f` between adjacent grid nodes that flags a branch boundary.
    pub jump_tol: f64,
}

impl Default for QuotientParams {
    fn default() -> Self {
        Self {
            grid_n: 256,
            t_min: 0.0,
            u_edge: 0.5,
            jump_tol: 0.08,
        }
    }
}

/// One tabulated return, in quotient coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ReturnRow {
    pub branch_id: usize,
    pub x: f64,
    pub f_x: f64,
    pub tau: f64,
    pub r: u32,
}

/// Quotient of the return map to the stable-leaf coordinate.
#[derive(Debug)]
pub struct QuotientResult {
    pub map: BranchMap1D,
    pub rows: Vec<ReturnRow>,
    /// Branch boundaries, component endpoints included.
    pub gamma0: Vec<f64>,
    /// Intervals whose orbits escape (excluded from branches).
    pub holes: Vec<(f64, f64)>,
    /// Fitted local exponents of `f` approaching each interior boundary,
    /// one entry per (boundary, side) with enough valid samples.
    pub beta_fits: Vec<f64>,
    pub mean_tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NodeOut {
    Val { f: f64, tau: f64, r: u32 },
    /// Exact stable-manifold hit: the node IS a branch boundary.
    Gamma,
    /// Escape or integration failure: hole material.
    Dead,
}

fn same_side(a: &NodeOut, b: &NodeOut, jump_tol: f64) -> bool {
    match (a, b) {
        (NodeOut::Val { f: fa, r: ra, .. }, NodeOut::Val { f: fb, r: rb, .. }) => {
            ra == rb && (fa - fb).abs() <= jump_tol
        }
        (NodeOut::Dead, NodeOut::Dead) => true,
        _ => false,
    }
}

/// Width at which boundary bisection stops.
const GAMMA_TOL: f64 = 1e-10;

/// Tabulate the quotient map on the ingoing sections. The quotient coordinate
/// is `ingoing index + v`, so the domain is `[0, #ingoing]` with component
/// seams at the integers.
pub fn quotient_map<S: SectionedSystem>(
    sys: &S,
    params: &QuotientParams,
) -> Result<QuotientResult, ReturnError> {
    let m = sys.ingoing().len();
    assert!(m >= 1, "quotient needs at least one ingoing section");
    assert!(params.grid_n >= 16);
    let eval_node = |x: f64| -> NodeOut {
        let k = (x.floor() as usize).min(m - 1);
        let p = SectionPoint {
            section: sys.ingoing()[k],
            u: params.u_edge,
            v: x - k as f64,
        };
        match sys.first_return(&p, params.t_min) {
            Ok(s) => match global_coord(sys, &s.end) {
                Some(g) => NodeOut::Val {
                    f: g,
                    tau: s.tau,
                    r: s.crossings,
                },
                None => NodeOut::Dead,
            },
            Err(ReturnError::StableManifold { .. }) => NodeOut::Gamma,
            Err(_) => NodeOut::Dead,
        }
    };

    // base grid, component ends inset off the exact seam
    let n = params.grid_n;
    let mut xs: Vec<f64> = Vec::with_capacity(m * (n + 1));
    for k in 0..m {
        for j in 0..=n {
            let x = k as f64 + j as f64 / n as f64;
            xs.push(x.clamp(k as f64 + 1e-9, (k + 1) as f64 - 1e-9));
        }
    }
    let outs: Vec<NodeOut> = xs.par_iter().map(|&x| eval_node(x)).collect();

    let bisect_boundary = |mut lo: (f64, NodeOut), mut hi: (f64, NodeOut)| -> f64 {
        while hi.0 - lo.0 > GAMMA_TOL {
            let xm = 0.5 * (lo.0 + hi.0);
            let vm = eval_node(xm);
            if vm == NodeOut::Gamma {
                return xm;
            }
            let to_lo = match (&vm, &lo.1, &hi.1) {
                (NodeOut::Val { f, r, .. }, NodeOut::Val { f: fl, r: rl, .. }, NodeOut::Val { f: fh, r: rh, .. }) => {
                    if (r == rl) != (r == rh) {
                        r == rl
                    } else {
                        (f - fl).abs() <= (f - fh).abs()
                    }
                }
                (NodeOut::Val { .. }, NodeOut::Val { .. }, _) => true,
                (NodeOut::Val { .. }, _, _) => false,
                (NodeOut::Dead, NodeOut::Dead, _) => true,
                (NodeOut::Dead, _, _) => false,
                (NodeOut::Gamma, _, _) => unreachable!(),
            };
            if to_lo {
                lo = (xm, vm);
            } else {
                hi = (xm, vm);
            }
        }
        0.5 * (lo.0 + hi.0)
    };

    let mut gamma0: Vec<f64> = Vec::new();
    let mut holes: Vec<(f64, f64)> = Vec::new();
    let mut branch_ivals: Vec<(f64, f64)> = Vec::new();
    let mut pieces: Vec<(f64, f64, BranchKind)> = Vec::new();
    let mut rows: Vec<ReturnRow> = Vec::new();
    let mut beta_fits: Vec<f64> = Vec::new();
    let mut tau_sum = 0.0;
    let mut tau_count = 0usize;

    for k in 0..m {
        let base = k * (n + 1);
        let comp: Vec<(f64, NodeOut)> = (0..=n).map(|j| (xs[base + j], outs[base + j])).collect();
        let mut bounds: Vec<f64> = vec![k as f64];
        for w in comp.windows(2) {
            let (xl, vl) = w[0];
            let (xr, vr) = w[1];
            if vl == NodeOut::Gamma {
                continue; // already a boundary, pushed below
            }
            if vr == NodeOut::Gamma {
                bounds.push(xr);
                continue;
            }
            if !same_side(&vl, &vr, params.jump_tol) {
                bounds.push(bisect_boundary((xl, vl), (xr, vr)));
            }
        }
        if comp[0].1 == NodeOut::Gamma {
            bounds.push(comp[0].0);
        }
        bounds.push((k + 1) as f64);
        bounds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bounds.dedup_by(|a, b| (*a - *b).abs() < 2.0 * GAMMA_TOL);

        for pair in bounds.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let inside: Vec<&(f64, NodeOut)> = comp
                .iter()
                .filter(|(x, _)| *x > a + GAMMA_TOL && *x < b - GAMMA_TOL)
                .collect();
            if inside.is_empty() {
                continue; // sliver between close boundaries
            }
            let n_val = inside
                .iter()
                .filter(|(_, o)| matches!(o, NodeOut::Val { .. }))
                .count();
            if n_val * 2 < inside.len() {
                holes.push((a, b));
                continue;
            }
            branch_ivals.push((a, b));
        }
        gamma0.extend(bounds);
    }
    gamma0.sort_by(|a, b| a.partial_cmp(b).unwrap());
    gamma0.dedup_by(|a, b| (*a - *b).abs() < 2.0 * GAMMA_TOL);

    // tabulate each branch: reuse base nodes, densify toward the ends where
    // the return map behaves like a power of the distance
    for &(a, b) in &branch_ivals {
        let len = b - a;
        let mut node_xs: Vec<f64> = xs
            .iter()
            .zip(&outs)
            .filter(|(x, o)| **x > a + GAMMA_TOL && **x < b - GAMMA_TOL && matches!(o, NodeOut::Val { .. }))
            .map(|(x, _)| *x)
            .collect();
        for j in 0..9 {
            let d = len * 10f64.powf(-2.0 - 0.5 * j as f64);
            node_xs.push(a + d);
            node_xs.push(b - d);
        }
        node_xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        node_xs.dedup_by(|p, q| (*p - *q).abs() < 1e-11);
        let evals: Vec<(f64, NodeOut)> = node_xs
            .par_iter()
            .map(|&x| (x, eval_node(x)))
            .collect();
        let mut txs = Vec::with_capacity(evals.len());
        let mut tys = Vec::with_capacity(evals.len());
        let mut trows = Vec::with_capacity(evals.len());
        for (x, o) in &evals {
            if let NodeOut::Val { f, tau, r } = o {
                txs.push(*x);
                tys.push(*f);
                trows.push((*x, *f, *tau, *r));
            }
        }
        let (txs, tys) = monotone_filter(&txs, &tys);
        if txs.len() < 4 {
            holes.push((a, b));
            continue;
        }
        pieces.push((a, b, BranchKind::Table(MonotoneHermite::new(txs, tys))));
        let branch_id = pieces.len() - 1;
        for (x, f, tau, r) in trows {
            rows.push(ReturnRow {
                branch_id,
                x,
                f_x: f,
                tau,
                r,
            });
            tau_sum += tau;
            tau_count += 1;
        }
    }
    holes.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());

    // local exponent of f approaching each interior boundary, per side:
    // |f(d) - f(d/2)| ~ d^beta under a power law, so the log-log slope of
    // consecutive differences over a dyadic ladder is beta
    for &g in &gamma0 {
        if (g - g.round()).abs() < 2.0 * GAMMA_TOL {
            continue; // component seam, not a stable-leaf boundary
        }
        for side in [-1.0, 1.0] {
            let nb = branch_ivals
                .iter()
                .any(|&(a, b)| (side < 0.0 && (b - g).abs() < 1e-8) || (side > 0.0 && (a - g).abs() < 1e-8));
            if !nb {
                continue;
            }
            let d0 = 0.01;
            let mut ds = Vec::new();
            let mut fs = Vec::new();
            for i in 0..14 {
                let d = d0 * 0.5f64.powi(i);
                if let NodeOut::Val { f, .. } = eval_node(g + side * d) {
                    ds.push(d);
                    fs.push(f);
                } else {
                    break;
                }
            }
            if ds.len() < 8 {
                continue;
            }
            let mut lx = Vec::new();
            let mut ly = Vec::new();
            for i in 0..ds.len() - 1 {
                let diff = (fs[i + 1] - fs[i]).abs();
                if diff > 0.0 {
                    lx.push(ds[i].ln());
                    ly.push(diff.ln());
                }
            }
            if lx.len() >= 6 {
                let (slope, _) = numerics::linear_fit(&lx, &ly);
                beta_fits.push(slope);
            }
        }
    }

    rows.sort_by(|p, q| p.x.partial_cmp(&q.x).unwrap());
    let map = BranchMap1D::new((0.0, m as f64), pieces, gamma0.clone(), None);
    Ok(QuotientResult {
        map,
        rows,
        gamma0,
        holes,
        beta_fits,
        mean_tau: if tau_count > 0 {
            tau_sum / tau_count as f64
        } else {
            f64::NAN
        },
    })
}

/// Drop nodes that break the majority monotone trend (integration noise near
/// branch ends).
fn monotone_filter(xs: &[f64], ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let inc = ys.windows(2).filter(|w| w[1] > w[0]).count();
    let dec = ys.windows(2).filter(|w| w[1] < w[0]).count();
    let up = inc >= dec;
    let mut kx: Vec<f64> = Vec::with_capacity(xs.len());
    let mut ky: Vec<f64> = Vec::with_capacity(ys.len());
    for (&x, &y) in xs.iter().zip(ys) {
        if let Some(&last) = ky.last() {
            let ok = if up { y > last } else { y < last };
            if !ok {
                continue;
            }
        }
        kx.push(x);
        ky.push(y);
    }
    (kx, ky)
}

/// Sup of `|p(R(x)) - f(p(x))|` over random section points with random `u`,
/// testing that the tabulated quotient really is a quotient. Samples stay
/// within `u_band` of the tabulation edge and `gamma_margin` away from the
/// detected boundaries: where the stable foliation is only numerically
/// estimated, leaves straddling a boundary genuinely split.
pub fn semi_conjugacy_sup<S: SectionedSystem>(
    sys: &S,
    quot: &QuotientResult,
    n_samples: usize,
    t_min: f64,
    u_edge: f64,
    u_band: f64,
    gamma_margin: f64,
    seed: u64,
) -> f64 {
    let ingoing = sys.ingoing();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sup: f64 = 0.0;
    let mut done = 0;
    let mut tries = 0;
    while done < n_samples && tries < 40 * n_samples {
        tries += 1;
        let k = rng.gen_range(0..ingoing.len());
        let p = SectionPoint {
            section: ingoing[k],
            u: (u_edge + u_band * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0),
            v: rng.gen_range(0.001..0.999),
        };
        let x = k as f64 + p.v;
        if quot.gamma0.iter().any(|g| (x - g).abs() < gamma_margin) {
            continue;
        }
        let Ok(fx) = quot.map.eval(x) else {
            continue;
        };
        let Ok(samp) = sys.first_return(&p, t_min) else {
            continue;
        };
        let Some(y) = global_coord(sys, &samp.end) else {
            continue;
        };
        sup = sup.max((y - fx).abs());
        done += 1;
    }
    sup
}

/// Mean return time over Lebesgue-random points on the ingoing sections.
pub fn mean_return_time<S: SectionedSystem>(
    sys: &S,
    n_samples: usize,
    t_min: f64,
    u_edge: f64,
    seed: u64,
) -> f64 {
    let ingoing = sys.ingoing();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut ok = 0;
    let mut tries = 0;
    while ok < n_samples && tries < 20 * n_samples {
        tries += 1;
        let p = SectionPoint {
            section: ingoing[rng.gen_range(0..ingoing.len())],
            u: u_edge,
            v: rng.gen_range(0.0..1.0),
        };
        if let Ok(s) = sys.first_return(&p, t_min) {
            sum += s.tau;
            ok += 1;
        }
    }
    sum / ok as f64
}

/// Where the wing charts come from: a long orbit's plane crossings.
#[derive(Debug, Clone)]
pub struct WingSectionReport {
    pub hits: [usize; 2],
    pub transversality: [f64; 2],
    pub delta_witness: [f64; 2],
    pub stable_contraction: [f64; 2],
}

/// Build two adapted wing sections on the plane `z = z_plane` for a
/// Lorenz-like field: collect down-crossings of a long orbit, split them by
/// the sign of `x`, seed a chart from each cloud's principal axes, then
/// realign the `u` axis with the estimated stable direction so `v` indexes
/// stable leaves.
pub fn lorenz_wing_sections(
    flow: FlowSystem,
    z_plane: f64,
    burn: f64,
    t_orbit: f64,
) -> Result<(OdeSectionedSystem, WingSectionReport), ReturnError> {
    let ctrl = StepControl {
        tol: 1e-9,
        max_step: 0.1,
        guard_dims: 3,
        ..StepControl::default()
    };
    let x0 = State::new(1.0, 1.0, z_plane - 7.0);
    let x0 = ode::integrate(|_t, y| flow.rhs(y), 0.0, x0, burn, &ctrl, |_| {})
        .map_err(ReturnError::Ode)?;

    // down-crossings of z = z_plane along one long orbit
    let mut hits: Vec<State> = Vec::new();
    ode::integrate(
        |_t, y| flow.rhs(y),
        0.0,
        x0,
        t_orbit,
        &ctrl,
        |step| {
            const SUBS: usize = 4;
            let mut ta = step.t0;
            let mut ga = step.eval(ta)[2] - z_plane;
            for k in 1..=SUBS {
                let tb = step.t0 + step.h * k as f64 / SUBS as f64;
                let gb = step.eval(tb)[2] - z_plane;
                if ga > 0.0 && gb <= 0.0 {
                    if let Some(t) =
                        numerics::bisect_root(|t| step.eval(t)[2] - z_plane, ta, tb, 1e-10)
                    {
                        hits.push(step.eval(t));
                    }
                }
                ta = tb;
                ga = gb;
            }
        },
    )
    .map_err(ReturnError::Ode)?;

    let wings: [Vec<State>; 2] = {
        let (r, l): (Vec<State>, Vec<State>) = hits.iter().partition(|p| p[0] > 0.0);
        [r, l]
    };
    for w in &wings {
        if w.len() < 50 {
            return Err(ReturnError::ChartDegenerate {
                reason: format!("only {} crossings on one wing", w.len()),
            });
        }
    }

    let chart_from_axes = |cloud: &[State], dir_u: [f64; 2], name: &str| {
        let n = cloud.len() as f64;
        let center = cloud.iter().sum::<State>() / n;
        let eu = State::new(dir_u[0], dir_u[1], 0.0).normalize();
        let ev = State::new(-dir_u[1], dir_u[0], 0.0).normalize();
        let (mut ulo, mut uhi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut vlo, mut vhi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in cloud {
            let d = p - center;
            let pu = d.dot(&eu);
            let pv = d.dot(&ev);
            ulo = ulo.min(pu);
            uhi = uhi.max(pu);
            vlo = vlo.min(pv);
            vhi = vhi.max(pv);
        }
        // pads: generous along leaves (u) so the cu-edges stay clear of the
        // attractor, slim across (v)
        let pu = 0.15 * (uhi - ulo).max(1.0);
        let pv = 0.05 * (vhi - vlo).max(1.0);
        let (ulo, uhi) = (ulo - pu, uhi + pu);
        let (vlo, vhi) = (vlo - pv, vhi + pv);
        let origin = center + eu * ulo + ev * vlo;
        CrossSection::new(
            name,
            origin,
            eu * (uhi - ulo),
            ev * (vhi - vlo),
            0.0, // crossing sign fixed below
            0.0,
        )
    };

    let principal_minor = |cloud: &[State]| -> [f64; 2] {
        let n = cloud.len() as f64;
        let cx = cloud.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = cloud.iter().map(|p| p[1]).sum::<f64>() / n;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        let mut syy = 0.0;
        for p in cloud {
            let dx = p[0] - cx;
            let dy = p[1] - cy;
            sxx += dx * dx;
            sxy += dx * dy;
            syy += dy * dy;
        }
        // covariance is symmetric PSD, so its singular directions are its
        // principal axes; the minor axis seeds the provisional u direction
        let (_, _, _, v_min) = numerics::svd2(sxx / n, sxy / n, sxy / n, syy / n);
        v_min
    };

    let fix_crossing_sign = |sec: &mut CrossSection, cloud: &[State], flow: &FlowSystem| {
        let s: f64 = cloud
            .iter()
            .map(|p| flow.rhs(p).dot(sec.normal()).signum())
            .sum();
        sec.crossing_sign = if s >= 0.0 { 1.0 } else { -1.0 };
    };

    let build = |dirs: [[f64; 2]; 2], flow: FlowSystem| -> Result<OdeSectionedSystem, ReturnError> {
        let mut secs = Vec::new();
        for (i, name) in ["wing_pos", "wing_neg"].iter().enumerate() {
            let mut sec = chart_from_axes(&wings[i], dirs[i], name)?;
            fix_crossing_sign(&mut sec, &wings[i], &flow);
            secs.push(sec);
        }
        Ok(OdeSectionedSystem::new(flow, secs, vec![0, 1]))
    };

    // bootstrap: provisional charts from cloud axes, then re-seed u from the
    // estimated stable direction
    let provisional = build([principal_minor(&wings[0]), principal_minor(&wings[1])], flow)?;
    let mut final_dirs = [[0.0; 2]; 2];
    let mut contraction = [0.0; 2];
    for wi in 0..2 {
        let sec = &provisional.sections()[wi];
        let center_hit = wings[wi][wings[wi].len() / 2];
        let (u, v, _) = sec.uvw(&center_hit);
        let mut est = None;
        for attempt in 0..5 {
            let p = SectionPoint {
                section: wi,
                u: (u + 0.03 * attempt as f64).clamp(0.05, 0.95),
                v: (v + 0.05 * attempt as f64).clamp(0.05, 0.95),
            };
            if let Ok(e) = estimate_stable_direction(&provisional, &p, 6, 0.0, 1e-5) {
                est = Some(e);
                break;
            }
        }
        let est = est.ok_or(ReturnError::InsufficientReturns { got: 0 })?;
        let d = sec.e_u * est.direction[0] + sec.e_v * est.direction[1];
        let d = State::new(d[0], d[1], 0.0).normalize();
        final_dirs[wi] = [d[0], d[1]];
        contraction[wi] = est.contraction;
    }
    let sys = build(final_dirs, provisional.flow)?;

    let mut report = WingSectionReport {
        hits: [wings[0].len(), wings[1].len()],
        transversality: [0.0; 2],
        delta_witness: [0.0; 2],
        stable_contraction: contraction,
    };
    let mut witnessed = sys;
    for wi in 0..2 {
        let sec = &witnessed.sections[wi];
        let tr = sec.transversality_min(&witnessed.flow, 12);
        if tr <= 0.1 {
            return Err(ReturnError::ChartDegenerate {
                reason: format!("transversality {tr:.3} <= 0.1 on {}", sec.name),
            });
        }
        let eu_len = sec.e_u.norm();
        let mut witness = f64::INFINITY;
        for p in &wings[wi] {
            let (u, v, _) = sec.uvw(p);
            if !(0.0..=1.0).contains(&v) {
                continue;
            }
            witness = witness.min(u.min(1.0 - u) * eu_len);
        }
        if !(witness > 0.0) {
            return Err(ReturnError::ChartDegenerate {
                reason: format!("attractor hits reach the cu-edges of {}", sec.name),
            });
        }
        report.transversality[wi] = tr;
        report.delta_witness[wi] = witness;
        witnessed.sections[wi].delta = 0.5 * witness;
    }
    Ok((witnessed, report))
}
