//! Absolutely continuous invariant measures for piecewise expanding interval
//! maps via Ulam discretization of the transfer operator.
//!
//! Bin images are assembled per monotone branch with pinned endpoints, so a
//! row's mass telescopes to the branch-overlap length exactly and the
//! stochasticity defect stays at roundoff level. Stationary densities come
//! from the recurrent communicating classes of the chain, one ergodic
//! component each.

use crate::map1d::{BranchMap1D, Map1dError};
use crate::numerics::{unit_hash, NeumaierSum};
use petgraph::graph::DiGraph;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcimError {
    #[error("invalid map for Ulam discretization: {reason}")]
    InvalidMap { reason: String },
    #[error("power iteration stalled at residual {residual:.3e} (target {target:.3e})")]
    NoConvergence { residual: f64, target: f64 },
    #[error(transparent)]
    Map(#[from] Map1dError),
}

/// Ulam discretization of the transfer operator: row i holds the normalized
/// Lebesgue distribution of `f(bin_i)` over bins.
#[derive(Debug)]
pub struct UlamChain {
    /// Bin edges, ascending; bins split exactly at singular points and
    /// branch endpoints.
    pub edges: Vec<f64>,
    /// Sparse rows `(target bin, probability)`, normalized to sum 1.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Bins covered by some branch; holes of tabulated maps are dead.
    pub live: Vec<bool>,
    /// Worst pre-normalization row-sum defect over live bins.
    pub max_row_defect: f64,
}

impl UlamChain {
    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn bin_width(&self, j: usize) -> f64 {
        self.edges[j + 1] - self.edges[j]
    }

    /// Coordinate-list view `(row, col, p)` for export.
    pub fn coo(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, p)| (i, j, p)))
    }

    /// Mass vector -> mass vector product `pi P`.
    fn apply(&self, pi: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in self.rows.iter().enumerate() {
            let m = pi[i];
            if m == 0.0 {
                continue;
            }
            for &(j, p) in row {
                out[j] += m * p;
            }
        }
    }
}

/// Build the Ulam chain with `n` base bins (before exact splits at singular
/// points and branch endpoints).
pub fn build_ulam(map: &BranchMap1D, n: usize) -> Result<UlamChain, AcimError> {
    assert!(n >= 16, "Ulam discretization needs at least 16 bins");
    let (lo, hi) = map.domain;
    let mut edges: Vec<f64> = (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect();
    for &s in map
        .singular
        .iter()
        .chain(map.branches.iter().flat_map(|b| [&b.lo, &b.hi]))
    {
        if s > lo && s < hi {
            edges.push(s);
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();
    let n_bins = edges.len() - 1;

    let rows: Vec<(Vec<(usize, f64)>, f64, bool)> = (0..n_bins)
        .into_par_iter()
        .map(|i| {
            let (a, b) = (edges[i], edges[i + 1]);
            let w = b - a;
            let mut acc = vec![0.0; 0];
            let mut dense: Vec<(usize, f64)> = Vec::new();
            let mut total = NeumaierSum::new();
            for br in &map.branches {
                let (xa, xb) = (a.max(br.lo), b.min(br.hi));
                if xb <= xa {
                    continue;
                }
                // image interval, walked in ascending y with x endpoints
                // pinned to the overlap so lengths telescope exactly
                let (ya, yb) = (br.eval(xa), br.eval(xb));
                let (y0, y1) = (ya.min(yb), ya.max(yb));
                let inc = br.increasing();
                let (x_start, x_end) = if inc { (xa, xb) } else { (xb, xa) };
                let j_first = edges.partition_point(|&e| e <= y0).saturating_sub(1);
                let j_last = edges
                    .partition_point(|&e| e < y1)
                    .saturating_sub(1)
                    .min(n_bins - 1);
                let (rmin, rmax) = br.range();
                let mut x_prev = x_start;
                for j in j_first..=j_last {
                    let x_next = if j == j_last {
                        x_end
                    } else {
                        let y = edges[j + 1].clamp(rmin, rmax);
                        let x = br.invert(y).unwrap_or(x_end);
                        // keep the walk monotone so the telescoped total is exact
                        if inc {
                            x.clamp(x_prev, x_end)
                        } else {
                            x.clamp(x_end, x_prev)
                        }
                    };
                    let len = (x_next - x_prev).abs();
                    if len > 0.0 {
                        dense.push((j, len / w));
                        total.add(len / w);
                    }
                    x_prev = x_next;
                }
            }
            acc.clear();
            let sum = total.value();
            let live = sum > 0.5;
            let defect = if live { (sum - 1.0).abs() } else { 0.0 };
            if live {
                // merge duplicate targets, then normalize away the roundoff
                dense.sort_by_key(|&(j, _)| j);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(dense.len());
                for (j, p) in dense {
                    match merged.last_mut() {
                        Some((jl, pl)) if *jl == j => *pl += p,
                        _ => merged.push((j, p)),
                    }
                }
                for (_, p) in merged.iter_mut() {
                    *p /= sum;
                }
                (merged, defect, true)
            } else {
                (Vec::new(), defect, false)
            }
        })
        .collect();

    let max_row_defect = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    if max_row_defect > 1e-9 {
        return Err(AcimError::InvalidMap {
            reason: format!("row mass defect {max_row_defect:.3e} exceeds 1e-9"),
        });
    }
    let live = rows.iter().map(|r| r.2).collect();
    let rows = rows.into_iter().map(|r| r.0).collect();
    Ok(UlamChain {
        edges,
        rows,
        live,
        max_row_defect,
    })
}

/// Stationary densities of the chain, one per recurrent communicating class.
#[derive(Debug)]
pub struct ErgodicDecomposition {
    pub edges: Vec<f64>,
    /// Piecewise-constant densities over the bins, zero off their component.
    pub densities: Vec<Vec<f64>>,
    /// Recurrent component id per bin; transient and dead bins get `None`.
    pub labels: Vec<Option<usize>>,
    /// Final stationarity residual (L1) per component.
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl ErgodicDecomposition {
    /// Bin masses `rho_j w_j` of one component.
    pub fn masses(&self, c: usize) -> Vec<f64> {
        self.densities[c]
            .iter()
            .enumerate()
            .map(|(j, rho)| rho * (self.edges[j + 1] - self.edges[j]))
            .collect()
    }
}

const POWER_ITER_CAP: usize = 100_000;

/// Recurrent classes by SCC condensation, then lazy power iteration on each
/// class to the L1 residual `tol` (deflation is structural: classes are
/// disjoint, so no fixed vector leaks into another class's iteration).
pub fn stationary_density(
    chain: &UlamChain,
    tol: f64,
) -> Result<ErgodicDecomposition, AcimError> {
    let n = chain.n_bins();
    let mut graph = DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for (i, j, p) in chain.coo() {
        if p > 0.0 {
            graph.add_edge(nodes[i], nodes[j], ());
        }
    }
    let sccs = petgraph::algo::tarjan_scc(&graph);
    let mut scc_of = vec![usize::MAX; n];
    for (k, scc) in sccs.iter().enumerate() {
        for &v in scc {
            scc_of[v.index()] = k;
        }
    }
    // recurrent = no edge out of the class, and the class is live
    let mut recurrent = vec![true; sccs.len()];
    for (i, j, _) in chain.coo() {
        if scc_of[i] != scc_of[j] {
            recurrent[scc_of[i]] = false;
        }
    }
    for (k, scc) in sccs.iter().enumerate() {
        if scc.iter().any(|&v| !chain.live[v.index()]) {
            recurrent[k] = false;
        }
        // an SCC that is a single bin without a self-loop is not invariant
        if scc.len() == 1 {
            let i = scc[0].index();
            if !chain.rows[i].iter().any(|&(j, p)| j == i && p > 0.0) {
                recurrent[k] = false;
            }
        }
    }

    let mut classes: Vec<Vec<usize>> = sccs
        .iter()
        .enumerate()
        .filter(|&(k, _)| recurrent[k])
        .map(|(_, scc)| {
            let mut bins: Vec<usize> = scc.iter().map(|v| v.index()).collect();
            bins.sort_unstable();
            bins
        })
        .collect();
    // deterministic component order: by leftmost bin
    classes.sort_by_key(|bins| bins[0]);

    let mut labels = vec![None; n];
    let mut densities = Vec::with_capacity(classes.len());
    let mut residuals = Vec::with_capacity(classes.len());
    let mut iterations = Vec::with_capacity(classes.len());
    for (c, bins) in classes.iter().enumerate() {
        for &j in bins {
            labels[j] = Some(c);
        }
        let member = |j: usize| labels[j] == Some(c);
        // start proportional to Lebesgue on the class
        let mut pi = vec![0.0; n];
        let w_total: f64 = bins.iter().map(|&j| chain.bin_width(j)).sum();
        for &j in bins {
            pi[j] = chain.bin_width(j) / w_total;
        }
        let mut next = vec![0.0; n];
        let mut resid = f64::INFINITY;
        let mut iters = 0;
        for it in 0..POWER_ITER_CAP {
            chain.apply(&pi, &mut next);
            // recurrence keeps mass inside; clear stray roundoff anyway
            for j in 0..n {
                if !member(j) {
                    next[j] = 0.0;
                }
            }
            resid = bins.iter().map(|&j| (next[j] - pi[j]).abs()).sum();
            // lazy step kills period-2 oscillation without moving fixed points
            let mut mass = 0.0;
            for &j in bins.iter() {
                pi[j] = 0.5 * (pi[j] + next[j]);
                mass += pi[j];
            }
            for &j in bins.iter() {
                pi[j] /= mass;
            }
            iters = it + 1;
            if resid < tol {
                break;
            }
        }
        if resid >= tol {
            return Err(AcimError::NoConvergence {
                residual: resid,
                target: tol,
            });
        }
        let rho: Vec<f64> = (0..n)
            .map(|j| {
                if member(j) {
                    (pi[j] / chain.bin_width(j)).max(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        densities.push(rho);
        residuals.push(resid);
        iterations.push(iters);
    }
    Ok(ErgodicDecomposition {
        edges: chain.edges.clone(),
        densities,
        labels,
        residuals,
        iterations,
    })
}

/// Essential sup estimate and support intervals of a bin density.
#[derive(Debug, Clone)]
pub struct DensityReport {
    pub sup: f64,
    /// Maximal intervals where the density exceeds the threshold.
    pub support: Vec<(f64, f64)>,
    /// Longest support interval measured in bins.
    pub max_run_bins: usize,
}

pub fn density_diagnostics(edges: &[f64], density: &[f64], threshold: f64) -> DensityReport {
    let sup = density.iter().cloned().fold(0.0, f64::max);
    let mut support = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    let mut max_run_bins = 0;
    for (j, &rho) in density.iter().enumerate() {
        if rho > threshold {
            run = match run {
                Some((s, _)) => Some((s, j)),
                None => Some((j, j)),
            };
        } else if let Some((s, e)) = run.take() {
            support.push((edges[s], edges[e + 1]));
            max_run_bins = max_run_bins.max(e - s + 1);
        }
    }
    if let Some((s, e)) = run {
        support.push((edges[s], edges[e + 1]));
        max_run_bins = max_run_bins.max(e - s + 1);
    }
    DensityReport {
        sup,
        support,
        max_run_bins,
    }
}

/// L1 distance between two piecewise-constant densities on (possibly
/// different) edge grids, integrated over the merged grid.
pub fn l1_density_distance(
    edges_a: &[f64],
    rho_a: &[f64],
    edges_b: &[f64],
    rho_b: &[f64],
) -> f64 {
    let mut merged: Vec<f64> = edges_a.iter().chain(edges_b.iter()).cloned().collect();
    merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
    merged.dedup();
    let value = |edges: &[f64], rho: &[f64], x: f64| -> f64 {
        if x < edges[0] || x >= edges[edges.len() - 1] {
            return 0.0;
        }
        let j = edges.partition_point(|&e| e <= x).saturating_sub(1);
        rho[j.min(rho.len() - 1)]
    };
    let mut acc = NeumaierSum::new();
    for k in 0..merged.len() - 1 {
        let (a, b) = (merged[k], merged[k + 1]);
        let mid = 0.5 * (a + b);
        acc.add((value(edges_a, rho_a, mid) - value(edges_b, rho_b, mid)).abs() * (b - a));
    }
    acc.value()
}

/// Transfer-operator duality defect: worst `|pi(P phi) - pi(phi)|` over
/// `n_obs` hash-generated observables bounded in [0, 1].
pub fn duality_defect(chain: &UlamChain, density: &[f64], n_obs: usize, salt: u64) -> f64 {
    let n = chain.n_bins();
    let pi: Vec<f64> = (0..n).map(|j| density[j] * chain.bin_width(j)).collect();
    let mut worst = 0.0_f64;
    for t in 0..n_obs {
        let phi: Vec<f64> = (0..n)
            .map(|j| unit_hash(j as f64 + 0.5, salt.wrapping_add(t as u64)))
            .collect();
        let mut lhs = NeumaierSum::new();
        for (i, row) in chain.rows.iter().enumerate() {
            if pi[i] == 0.0 {
                continue;
            }
            let mut pphi = 0.0;
            for &(j, p) in row {
                pphi += p * phi[j];
            }
            lhs.add(pi[i] * pphi);
        }
        let mut rhs = NeumaierSum::new();
        for j in 0..n {
            rhs.add(pi[j] * phi[j]);
        }
        worst = worst.max((lhs.value() - rhs.value()).abs());
    }
    worst
}

/// `int log|f'| d(rho dx)` by midpoint quadrature over live bins.
pub fn ulam_lyapunov(map: &BranchMap1D, edges: &[f64], density: &[f64]) -> f64 {
    let mut acc = NeumaierSum::new();
    for j in 0..density.len() {
        if density[j] == 0.0 {
            continue;
        }
        let mid = 0.5 * (edges[j] + edges[j + 1]);
        if let Ok(df) = map.deriv(mid) {
            acc.add(density[j] * (edges[j + 1] - edges[j]) * df.abs().ln());
        }
    }
    acc.value()
}

/// Orbitwise average of `log|f'|` along a dithered orbit.
pub fn orbit_lyapunov(map: &BranchMap1D, seed: f64, n_iter: usize, salt: u64) -> f64 {
    let eps = 1e-9 * (map.domain.1 - map.domain.0);
    let orbit = map.orbit_dithered(seed, n_iter, eps, salt);
    let mut acc = NeumaierSum::new();
    let mut count = 0usize;
    for &x in orbit.iter().take(n_iter) {
        if let Ok(df) = map.deriv(x) {
            acc.add(df.abs().ln());
            count += 1;
        }
    }
    acc.value() / count.max(1) as f64
}

/// Basin classification of seeds by L1-nearest orbit histogram.
#[derive(Debug, Clone)]
pub struct BasinReport {
    /// Fraction of (non-discarded) seeds matched to each density.
    pub fractions: Vec<f64>,
    pub unclassified_fraction: f64,
    /// Seeds sitting exactly on the singular set.
    pub discarded: usize,
    /// Worst matched L1 distance among classified seeds.
    pub worst_match: f64,
}

/// L1 threshold for accepting a histogram match.
pub const BASIN_MATCH_TOL: f64 = 5e-2;

/// Number of coarse histogram cells used for classification; orbit
/// histograms at feasible lengths are too noisy on the full Ulam grid.
const BASIN_CELLS: usize = 64;

pub fn basin_coverage(
    map: &BranchMap1D,
    decomp: &ErgodicDecomposition,
    seeds: &[f64],
    n_iter: usize,
) -> BasinReport {
    assert!(n_iter >= 10_000, "basin classification needs long orbits");
    let n = decomp.edges.len() - 1;
    // coarse grid: every k-th fine edge, so candidate densities re-bin exactly
    let stride = n.div_ceil(BASIN_CELLS);
    let mut coarse: Vec<f64> = decomp.edges.iter().step_by(stride).cloned().collect();
    if *coarse.last().unwrap() != *decomp.edges.last().unwrap() {
        coarse.push(*decomp.edges.last().unwrap());
    }
    let nc = coarse.len() - 1;
    let coarse_of = |j: usize| (j / stride).min(nc - 1);
    let candidates: Vec<Vec<f64>> = (0..decomp.densities.len())
        .map(|c| {
            let masses = decomp.masses(c);
            let mut m = vec![0.0; nc];
            for (j, mass) in masses.iter().enumerate() {
                m[coarse_of(j)] += mass;
            }
            (0..nc)
                .map(|k| m[k] / (coarse[k + 1] - coarse[k]))
                .collect()
        })
        .collect();

    let eps = 1e-9 * (map.domain.1 - map.domain.0);
    let results: Vec<Option<(usize, f64)>> = seeds
        .par_iter()
        .enumerate()
        .map(|(s, &x0)| {
            if map.distance_to_singular(x0) == 0.0 {
                return None; // measure-zero exact hit, discarded
            }
            let orbit = map.orbit_dithered(x0, n_iter, eps, s as u64);
            let mut counts = vec![0.0_f64; nc];
            for &x in orbit.iter().skip(1) {
                let k = coarse
                    .partition_point(|&e| e <= x)
                    .saturating_sub(1)
                    .min(nc - 1);
                counts[k] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            let hist: Vec<f64> = (0..nc)
                .map(|k| counts[k] / total / (coarse[k + 1] - coarse[k]))
                .collect();
            let mut best = (usize::MAX, f64::INFINITY);
            for (c, cand) in candidates.iter().enumerate() {
                let d: f64 = (0..nc)
                    .map(|k| (hist[k] - cand[k]).abs() * (coarse[k + 1] - coarse[k]))
                    .sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            Some(best)
        })
        .collect();

    let mut discarded = 0usize;
    let mut matched = vec![0usize; decomp.densities.len()];
    let mut unmatched = 0usize;
    let mut worst_match = 0.0_f64;
    for r in results {
        match r {
            None => discarded += 1,
            Some((c, d)) if d < BASIN_MATCH_TOL => {
                matched[c] += 1;
                worst_match = worst_match.max(d);
            }
            Some(_) => unmatched += 1,
        }
    }
    let denom = (seeds.len() - discarded).max(1) as f64;
    BasinReport {
        fractions: matched.iter().map(|&m| m as f64 / denom).collect(),
        unclassified_fraction: unmatched as f64 / denom,
        discarded,
        worst_match,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map1d::{doubling, tent, BranchKind, BranchMap1D};
    use crate::models::{geometric_lorenz_map, GeometricLorenzSpec};
    use approx::assert_relative_eq;

    fn geometric() -> BranchMap1D {
        geometric_lorenz_map(&GeometricLorenzSpec::default()).unwrap()
    }

    /// Two uncoupled full-branch linear systems on [0, 0.4] and [0.4, 1].
    fn glued_two_component() -> BranchMap1D {
        let lin = |a: f64, b: f64, c: f64, d: f64| -> BranchKind {
            // maps [a, b] affinely onto [c, d]
            let slope = (d - c) / (b - a);
            BranchKind::Analytic {
                f: Box::new(move |x: f64| c + slope * (x - a)),
                df: Box::new(move |_| slope),
                inverse: Some(Box::new(move |y: f64| a + (y - c) / slope)),
            }
        };
        BranchMap1D::new(
            (0.0, 1.0),
            vec![
                (0.0, 0.2, lin(0.0, 0.2, 0.0, 0.4)),
                (0.2, 0.4, lin(0.2, 0.4, 0.0, 0.4)),
                (0.4, 0.7, lin(0.4, 0.7, 0.4, 1.0)),
                (0.7, 1.0, lin(0.7, 1.0, 0.4, 1.0)),
            ],
            vec![],
            None,
        )
    }

    fn uniform_seeds(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64)
            .collect()
    }

    #[test]
    fn doubling_rows_are_two_halves() {
        let chain = build_ulam(&doubling(), 16).unwrap();
        assert_eq!(chain.n_bins(), 16);
        for row in &chain.rows {
            assert_eq!(row.len(), 2);
            for &(_, p) in row {
                assert_eq!(p, 0.5, "dyadic geometry is exact");
            }
        }
        assert!(chain.max_row_defect < 1e-15);
    }

    #[test]
    fn tent_rows_are_two_halves() {
        let chain = build_ulam(&tent(), 16).unwrap();
        for row in &chain.rows {
            assert_eq!(row.len(), 2);
            for &(_, p) in row {
                assert_eq!(p, 0.5);
            }
        }
    }

    #[test]
    fn doubling_density_is_lebesgue() {
        let chain = build_ulam(&doubling(), 1024).unwrap();
        let decomp = stationary_density(&chain, 1e-12).unwrap();
        assert_eq!(decomp.densities.len(), 1);
        let rho = &decomp.densities[0];
        let l1: f64 = (0..chain.n_bins())
            .map(|j| (rho[j] - 1.0).abs() * chain.bin_width(j))
            .sum();
        assert!(l1 < 1e-10, "L1 distance to Lebesgue = {l1:.3e}");
        let report = density_diagnostics(&decomp.edges, rho, 1e-6);
        assert_relative_eq!(report.sup, 1.0, epsilon = 1e-9);
        assert_eq!(report.support.len(), 1);
        assert_relative_eq!(report.support[0].0, 0.0);
        assert_relative_eq!(report.support[0].1, 1.0);
    }

    #[test]
    fn duality_holds_for_random_observables() {
        let chain = build_ulam(&geometric(), 1024).unwrap();
        let decomp = stationary_density(&chain, 1e-13).unwrap();
        let defect = duality_defect(&chain, &decomp.densities[0], 100, 0xACBD);
        assert!(defect < 1e-8, "duality defect {defect:.3e}");
    }

    #[test]
    fn geometric_rows_are_stochastic_and_sparse() {
        let map = geometric();
        let chain = build_ulam(&map, 1024).unwrap();
        assert!(chain.max_row_defect < 1e-12);
        for (i, row) in chain.rows.iter().enumerate() {
            if !chain.live[i] {
                continue;
            }
            let sum: f64 = row.iter().map(|&(_, p)| p).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // sparsity: image length <= max|f'| on bin * width
            let (a, b) = (chain.edges[i], chain.edges[i + 1]);
            let dfm = map
                .deriv(a + 1e-12 * (b - a))
                .unwrap_or(f64::INFINITY)
                .abs()
                .max(map.deriv(b - 1e-12 * (b - a)).unwrap_or(f64::INFINITY).abs());
            if dfm.is_finite() {
                assert!(
                    row.len() as f64 <= dfm + 2.0,
                    "row {i}: {} entries vs bound {}",
                    row.len(),
                    dfm + 2.0
                );
            }
        }
    }

    #[test]
    fn geometric_density_stable_under_refinement() {
        let map = geometric();
        let mut sups = Vec::new();
        let mut grids = Vec::new();
        for n in [2048usize, 4096, 8192] {
            let chain = build_ulam(&map, n).unwrap();
            let decomp = stationary_density(&chain, 1e-12).unwrap();
            assert_eq!(decomp.densities.len(), 1, "single ergodic component");
            sups.push(density_diagnostics(&decomp.edges, &decomp.densities[0], 1e-6).sup);
            grids.push((decomp.edges.clone(), decomp.densities[0].clone()));
        }
        let d = l1_density_distance(&grids[1].0, &grids[1].1, &grids[2].0, &grids[2].1);
        assert!(d < 2e-2, "refinement L1 drift {d:.3e}");
        for s in &sups {
            assert!(
                (s - sups[2]).abs() <= 0.1 * sups[2],
                "sup unstable: {sups:?}"
            );
        }
    }

    #[test]
    fn glued_map_has_two_ergodic_components() {
        let map = glued_two_component();
        for n in [100usize, 200] {
            let chain = build_ulam(&map, n).unwrap();
            let decomp = stationary_density(&chain, 1e-12).unwrap();
            assert_eq!(decomp.densities.len(), 2, "component count at n = {n}");
            // each density is uniform on its component
            for (c, (lo, hi)) in [(0usize, (0.0, 0.4)), (1usize, (0.4, 1.0))] {
                let rho = &decomp.densities[c];
                let expect = 1.0 / (hi - lo);
                for j in 0..chain.n_bins() {
                    let mid = 0.5 * (chain.edges[j] + chain.edges[j + 1]);
                    if mid > lo && mid < hi {
                        assert_relative_eq!(rho[j], expect, epsilon = 1e-9);
                    } else {
                        assert_eq!(rho[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn glued_basin_fractions_match_component_lengths() {
        let map = glued_two_component();
        let chain = build_ulam(&map, 200).unwrap();
        let decomp = stationary_density(&chain, 1e-12).unwrap();
        let seeds = uniform_seeds(500, 0.0, 1.0);
        let report = basin_coverage(&map, &decomp, &seeds, 50_000);
        assert_eq!(report.discarded, 0);
        // finite-orbit histogram noise can push an odd seed past the match
        // threshold; coverage itself must stay essentially total
        assert!(report.unclassified_fraction <= 0.002);
        assert!((report.fractions[0] - 0.4).abs() < 0.05);
        assert!((report.fractions[1] - 0.6).abs() < 0.05);
    }

    #[test]
    fn doubling_basin_all_seeds_match_lebesgue() {
        let map = doubling();
        let chain = build_ulam(&map, 1024).unwrap();
        let decomp = stationary_density(&chain, 1e-12).unwrap();
        let seeds = uniform_seeds(150, 0.0, 1.0);
        let report = basin_coverage(&map, &decomp, &seeds, 100_000);
        assert_eq!(report.discarded, 0);
        assert_eq!(report.unclassified_fraction, 0.0);
        assert!(report.worst_match < BASIN_MATCH_TOL);
    }

    #[test]
    fn geometric_basin_covers_interval() {
        let map = geometric();
        let chain = build_ulam(&map, 1024).unwrap();
        let decomp = stationary_density(&chain, 1e-12).unwrap();
        let seeds = uniform_seeds(200, -1.0, 1.0);
        let report = basin_coverage(&map, &decomp, &seeds, 30_000);
        assert!(
            report.unclassified_fraction < 0.01,
            "unclassified {}",
            report.unclassified_fraction
        );
    }

    #[test]
    fn ulam_and_orbit_lyapunov_agree() {
        let map = geometric();
        let chain = build_ulam(&map, 4096).unwrap();
        let decomp = stationary_density(&chain, 1e-12).unwrap();
        let lam_ulam = ulam_lyapunov(&map, &decomp.edges, &decomp.densities[0]);
        let seeds = uniform_seeds(20, -0.9, 0.9);
        let lam_orbit: f64 = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| orbit_lyapunov(&map, s, 100_000, i as u64))
            .sum::<f64>()
            / seeds.len() as f64;
        assert!(
            (lam_ulam - lam_orbit).abs() <= 0.01 * lam_orbit.abs(),
            "Ulam {lam_ulam:.5} vs orbit {lam_orbit:.5}"
        );
    }

    #[test]
    fn ergodic_count_stable_under_refinement() {
        let map = geometric();
        for (na, nb) in [(512usize, 1024usize)] {
            let a = stationary_density(&build_ulam(&map, na).unwrap(), 1e-12).unwrap();
            let b = stationary_density(&build_ulam(&map, nb).unwrap(), 1e-12).unwrap();
            assert_eq!(a.densities.len(), b.densities.len());
        }
        let glued = glued_two_component();
        let a = stationary_density(&build_ulam(&glued, 100).unwrap(), 1e-12).unwrap();
        let b = stationary_density(&build_ulam(&glued, 200).unwrap(), 1e-12).unwrap();
        assert_eq!(a.densities.len(), b.densities.len());
    }

    #[test]
    fn support_intervals_are_wide() {
        let map = geometric();
        let chain = build_ulam(&map, 2048).unwrap();
        let decomp = stationary_density(&chain, 1e-12).unwrap();
        let report = density_diagnostics(&decomp.edges, &decomp.densities[0], 1e-6);
        assert!(
            report.max_run_bins >= 10,
            "support run of {} bins",
            report.max_run_bins
        );
    }

    #[test]
    #[should_panic(expected = "at least 16 bins")]
    fn tiny_bin_count_is_rejected() {
        let _ = build_ulam(&doubling(), 8);
    }
}
