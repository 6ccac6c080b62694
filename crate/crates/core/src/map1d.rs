//! Piecewise-monotone interval maps with a marked singular set.
//!
//! A [`BranchMap1D`] is a finite collection of monotone branches covering an
//! interval, plus the list of singular points (discontinuities with unbounded
//! or degenerate derivative nearby). Branches are either closed-form
//! ([`BranchKind::Analytic`]) or tabulated through monotone cubic Hermite
//! interpolation ([`BranchKind::Table`]), so maps extracted numerically from
//! flows plug into the same analysis as explicit models.

use crate::numerics;
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum Map1dError {
    #[error("x = {x} is a singular point of the map")]
    OnSingular { x: f64 },
    #[error("x = {x} is outside the domain [{lo}, {hi}]")]
    OutsideDomain { x: f64, lo: f64, hi: f64 },
}

/// Monotone cubic Hermite interpolant (Fritsch-Carlson limited tangents).
#[derive(Debug, Clone)]
pub struct MonotoneHermite {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ms: Vec<f64>,
}

impl MonotoneHermite {
    /// Build from strictly increasing `xs` and monotone `ys`.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert!(xs.len() >= 2 && xs.len() == ys.len());
        assert!(
            xs.windows(2).all(|w| w[1] > w[0]),
            "nodes must be strictly increasing"
        );
        let n = xs.len();
        let d: Vec<f64> = (0..n - 1)
            .map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]))
            .collect();
        let mut ms = vec![0.0; n];
        ms[0] = d[0];
        ms[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            ms[i] = if d[i - 1] * d[i] <= 0.0 {
                0.0
            } else {
                0.5 * (d[i - 1] + d[i])
            };
        }
        // Fritsch-Carlson limiter keeps the interpolant monotone per interval
        for i in 0..n - 1 {
            if d[i] == 0.0 {
                ms[i] = 0.0;
                ms[i + 1] = 0.0;
                continue;
            }
            let a = ms[i] / d[i];
            let b = ms[i + 1] / d[i];
            let s = a * a + b * b;
            if s > 9.0 {
                let tau = 3.0 / s.sqrt();
                ms[i] = tau * a * d[i];
                ms[i + 1] = tau * b * d[i];
            }
        }
        Self { xs, ys, ms }
    }

    fn segment(&self, x: f64) -> usize {
        self.xs
            .partition_point(|&xi| xi <= x)
            .clamp(1, self.xs.len() - 1)
            - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.ms[i] + h01 * self.ys[i + 1] + h11 * h * self.ms[i + 1]
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let t2 = t * t;
        let dh00 = 6.0 * t2 - 6.0 * t;
        let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
        let dh01 = -6.0 * t2 + 6.0 * t;
        let dh11 = 3.0 * t2 - 2.0 * t;
        (dh00 * self.ys[i] + dh01 * self.ys[i + 1]) / h
            + dh10 * self.ms[i]
            + dh11 * self.ms[i + 1]
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }
}

pub enum BranchKind {
    Analytic {
        f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
        df: Box<dyn Fn(f64) -> f64 + Send + Sync>,
        /// Closed-form inverse, when one exists.
        inverse: Option<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
    },
    Table(MonotoneHermite),
}

impl std::fmt::Debug for BranchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BranchKind::Analytic { inverse, .. } => f
                .debug_struct("Analytic")
                .field("has_inverse", &inverse.is_some())
                .finish(),
            BranchKind::Table(h) => f.debug_struct("Table").field("nodes", &h.xs.len()).finish(),
        }
    }
}

/// One monotone branch on `[lo, hi]`. Values at singular endpoints are
/// one-sided limits approximated with a relative inset of 1e-12, which only
/// shaves a negligible sliver off the recorded range.
#[derive(Debug)]
pub struct Branch {
    pub lo: f64,
    pub hi: f64,
    pub kind: BranchKind,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Branch {
    pub fn eval(&self, x: f64) -> f64 {
        match &self.kind {
            BranchKind::Analytic { f, .. } => f(x),
            BranchKind::Table(h) => h.eval(x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match &self.kind {
            BranchKind::Analytic { df, .. } => df(x),
            BranchKind::Table(h) => h.deriv(x),
        }
    }

    pub fn increasing(&self) -> bool {
        self.y_hi > self.y_lo
    }

    /// Range of the branch as a sorted pair.
    pub fn range(&self) -> (f64, f64) {
        if self.increasing() {
            (self.y_lo, self.y_hi)
        } else {
            (self.y_hi, self.y_lo)
        }
    }

    /// Preimage of `y` under this branch, `None` when `y` is outside the
    /// branch range. Uses the closed-form inverse when available, bisection
    /// to 1e-14 otherwise. The result is clamped into `[lo, hi]`.
    pub fn invert(&self, y: f64) -> Option<f64> {
        let (rmin, rmax) = self.range();
        if y < rmin || y > rmax {
            return None;
        }
        let x = match &self.kind {
            BranchKind::Analytic {
                inverse: Some(inv), ..
            } => inv(y),
            _ => {
                let sign = if self.increasing() { 1.0 } else { -1.0 };
                let g = |x: f64| sign * (self.eval(x) - y);
                numerics::bisect_root(g, self.lo, self.hi, 1e-14)?
            }
        };
        Some(x.clamp(self.lo, self.hi))
    }
}

/// Declared power-law envelope for the derivative near the singular set:
/// `(1/b) d(x)^beta <= |f'(x)| <= b d(x)^{-beta}` with `d` the distance to
/// the singular set.
#[derive(Debug, Clone, Copy)]
pub struct PowerLaw {
    pub b: f64,
    pub beta: f64,
}

/// A piecewise-monotone map of an interval with marked singular set.
#[derive(Debug)]
pub struct BranchMap1D {
    pub domain: (f64, f64),
    pub branches: Vec<Branch>,
    /// Singular set, sorted ascending. Empty when the map is uniformly
    /// expanding with bounded derivative (doubling, tent).
    pub singular: Vec<f64>,
    /// Power-law derivative envelope near the singular set, when the model
    /// declares one.
    pub power_law: Option<PowerLaw>,
}

impl BranchMap1D {
    pub fn new(
        domain: (f64, f64),
        pieces: Vec<(f64, f64, BranchKind)>,
        mut singular: Vec<f64>,
        power_law: Option<PowerLaw>,
    ) -> Self {
        assert!(domain.1 > domain.0);
        singular.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut branches: Vec<Branch> = pieces
            .into_iter()
            .map(|(lo, hi, kind)| {
                assert!(lo < hi && lo >= domain.0 - 1e-12 && hi <= domain.1 + 1e-12);
                let inset = 1e-12 * (hi - lo);
                let x_lo = if singular.contains(&lo) { lo + inset } else { lo };
                let x_hi = if singular.contains(&hi) { hi - inset } else { hi };
                let (y_lo, y_hi) = match &kind {
                    BranchKind::Analytic { f, .. } => (f(x_lo), f(x_hi)),
                    BranchKind::Table(h) => (h.eval(x_lo), h.eval(x_hi)),
                };
                Branch {
                    lo,
                    hi,
                    kind,
                    y_lo,
                    y_hi,
                }
            })
            .collect();
        branches.sort_by(|a, b| a.lo.partial_cmp(&b.lo).unwrap());
        Self {
            domain,
            branches,
            singular,
            power_law,
        }
    }

    /// Index of the branch whose interval contains `x`. Interior branch
    /// boundaries resolve to the right branch, so the doubling map sends
    /// 1/2 to 0 as usual.
    pub fn branch_index(&self, x: f64) -> Option<usize> {
        self.branches
            .iter()
            .rposition(|b| x >= b.lo && x <= b.hi)
    }

    pub fn eval(&self, x: f64) -> Result<f64, Map1dError> {
        self.check(x)?;
        let i = self
            .branch_index(x)
            .ok_or(Map1dError::OutsideDomain {
                x,
                lo: self.domain.0,
                hi: self.domain.1,
            })?;
        Ok(self.branches[i].eval(x))
    }

    /// Derivative of the branch containing `x`.
    pub fn deriv(&self, x: f64) -> Result<f64, Map1dError> {
        self.check(x)?;
        let i = self
            .branch_index(x)
            .ok_or(Map1dError::OutsideDomain {
                x,
                lo: self.domain.0,
                hi: self.domain.1,
            })?;
        Ok(self.branches[i].deriv(x))
    }

    fn check(&self, x: f64) -> Result<(), Map1dError> {
        if !(self.domain.0..=self.domain.1).contains(&x) {
            return Err(Map1dError::OutsideDomain {
                x,
                lo: self.domain.0,
                hi: self.domain.1,
            });
        }
        if self.singular.binary_search_by(|s| s.partial_cmp(&x).unwrap()).is_ok() {
            return Err(Map1dError::OnSingular { x });
        }
        Ok(())
    }

    /// Distance from `x` to the singular set; infinite when the set is empty.
    pub fn distance_to_singular(&self, x: f64) -> f64 {
        self.singular
            .iter()
            .map(|s| (x - s).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Length of the shortest branch interval.
    pub fn min_branch_length(&self) -> f64 {
        self.branches
            .iter()
            .map(|b| b.hi - b.lo)
            .fold(f64::INFINITY, f64::min)
    }

    /// Check the declared power-law envelope on `grid_n` interior points per
    /// branch. Returns `None` when no envelope is declared, otherwise the
    /// worst (smallest) margin of the two bounds in log units.
    pub fn power_law_margin(&self, grid_n: usize) -> Option<f64> {
        let pl = self.power_law?;
        let mut worst = f64::INFINITY;
        for br in &self.branches {
            for i in 0..grid_n {
                let x = br.lo + (br.hi - br.lo) * (i as f64 + 0.5) / grid_n as f64;
                if self.check(x).is_err() {
                    continue;
                }
                let d = self.distance_to_singular(x).min(1.0);
                let fp = br.deriv(x).abs();
                let lower = fp.ln() - (d.powf(pl.beta) / pl.b).ln();
                let upper = (pl.b * d.powf(-pl.beta)).ln() - fp.ln();
                worst = worst.min(lower).min(upper);
            }
        }
        Some(worst)
    }

    /// Plain orbit `x0, f(x0), ..., f^n(x0)`. Fails if an iterate lands
    /// exactly on the singular set or escapes the domain.
    pub fn orbit(&self, x0: f64, n: usize) -> Result<Vec<f64>, Map1dError> {
        let mut xs = Vec::with_capacity(n + 1);
        let mut x = x0;
        xs.push(x);
        for _ in 0..n {
            x = self.eval(x)?;
            xs.push(x);
        }
        Ok(xs)
    }

    /// Orbit with a stateless hash dither of amplitude `eps` applied after
    /// every step. The dither is a pure function of the iterate's bit pattern
    /// and `salt`, so runs are reproducible while dyadic orbits (doubling map
    /// in binary floating point) keep full-entropy trailing bits instead of
    /// collapsing onto a fixed point.
    pub fn orbit_dithered(&self, x0: f64, n: usize, eps: f64, salt: u64) -> Vec<f64> {
        let (lo, hi) = self.domain;
        let nudge = |mut x: f64, tag: u64| -> f64 {
            x += eps * (2.0 * numerics::unit_hash(x, salt ^ tag) - 1.0);
            x = x.clamp(lo, hi);
            // exact singular hits after clamping get pushed inward
            let mut tries = 0;
            while self.check(x).is_err() && tries < 8 {
                x = (x + eps * (tries + 1) as f64).clamp(lo, hi - eps);
                tries += 1;
            }
            x
        };
        let mut xs = Vec::with_capacity(n + 1);
        let mut x = nudge(x0, 0x9d);
        xs.push(x);
        for _ in 0..n {
            x = match self.eval(x) {
                Ok(y) => nudge(y, 0x51),
                Err(_) => nudge(x, 0xe3),
            };
            xs.push(x);
        }
        xs
    }
}

/// Doubling map `x -> 2x mod 1` on `[0, 1]` as two affine branches.
/// The singular set is empty: the derivative is 2 everywhere.
pub fn doubling() -> BranchMap1D {
    let b1 = BranchKind::Analytic {
        f: Box::new(|x| 2.0 * x),
        df: Box::new(|_| 2.0),
        inverse: Some(Box::new(|y| 0.5 * y)),
    };
    let b2 = BranchKind::Analytic {
        f: Box::new(|x| 2.0 * x - 1.0),
        df: Box::new(|_| 2.0),
        inverse: Some(Box::new(|y| 0.5 * (y + 1.0))),
    };
    BranchMap1D::new(
        (0.0, 1.0),
        vec![(0.0, 0.5, b1), (0.5, 1.0, b2)],
        vec![],
        None,
    )
}

/// Tent map on `[0, 1]`: `2x` then `2 - 2x`.
pub fn tent() -> BranchMap1D {
    let b1 = BranchKind::Analytic {
        f: Box::new(|x| 2.0 * x),
        df: Box::new(|_| 2.0),
        inverse: Some(Box::new(|y| 0.5 * y)),
    };
    let b2 = BranchKind::Analytic {
        f: Box::new(|x| 2.0 - 2.0 * x),
        df: Box::new(|_| -2.0),
        inverse: Some(Box::new(|y| 1.0 - 0.5 * y)),
    };
    BranchMap1D::new(
        (0.0, 1.0),
        vec![(0.0, 0.5, b1), (0.5, 1.0, b2)],
        vec![],
        None,
    )
}
