//! Concrete model systems: the classical Lorenz equations, the linearized
//! Lorenz-like singularity with its flow-box crossing map, and the explicit
//! geometric model whose one-dimensional quotient is analytically known.

use crate::flow::{Equilibrium, FlowSystem, State};
use crate::map1d::{BranchKind, BranchMap1D, PowerLaw};
use crate::numerics;
use crate::sections::{CrossSection, ReturnError, SectionPoint, SectionedSystem};
use nalgebra::{Complex, Matrix3};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum ModelError {
    #[error("x1 = {x1} is on the stable manifold: the orbit never crosses the flow box")]
    StableManifold { x1: f64 },
    #[error("eigenvalue triple ({l1}, {l2}, {l3}) is not Lorenz-like: {reason}")]
    BadEigenvalues {
        l1: f64,
        l2: f64,
        l3: f64,
        reason: &'static str,
    },
    #[error("geometric model spec invalid: {reason}")]
    BadSpec { reason: &'static str },
}

/// Eigenvalue triple of a Lorenz-like singularity.
///
/// Ordered `lambda1 > 0 > lambda2 > lambda3` with `lambda1 + lambda2 > 0`
/// (so the weak contraction loses to the expansion) and `lambda1 + lambda3 <
/// 0` (so the crossing exponent of the strongly contracted coordinate
/// exceeds 1; without it the flow box would not contract sections).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzLikeEigenvalues {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LorenzLikeEigenvalues {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self, ModelError> {
        let this = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        this.validate()?;
        Ok(this)
    }

    fn bad(&self, reason: &'static str) -> ModelError {
        ModelError::BadEigenvalues {
            l1: self.lambda1,
            l2: self.lambda2,
            l3: self.lambda3,
            reason,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.lambda1 > 0.0 && 0.0 > self.lambda2 && self.lambda2 > self.lambda3) {
            return Err(self.bad("need lambda1 > 0 > lambda2 > lambda3"));
        }
        if self.lambda1 + self.lambda2 <= 0.0 {
            return Err(self.bad("need lambda1 + lambda2 > 0"));
        }
        if self.lambda1 + self.lambda3 >= 0.0 {
            return Err(self.bad("need lambda1 + lambda3 < 0"));
        }
        Ok(())
    }

    /// Expanding-coordinate crossing exponent, in (0, 1).
    pub fn beta(&self) -> f64 {
        -self.lambda2 / self.lambda1
    }

    /// Strong-stable crossing exponent, > 1.
    pub fn ss_exponent(&self) -> f64 {
        -self.lambda3 / self.lambda1
    }

    /// The triple at the origin of the classical Lorenz system.
    pub fn from_lorenz_origin(sigma: f64, r: f64, b: f64) -> Result<Self, ModelError> {
        let disc = ((sigma + 1.0) * (sigma + 1.0) + 4.0 * sigma * (r - 1.0)).sqrt();
        let plus = 0.5 * (-(sigma + 1.0) + disc);
        let minus = 0.5 * (-(sigma + 1.0) - disc);
        Self::new(plus, -b, minus)
    }

    /// Default triple: beta = 0.52, strong-stable exponent 2.
    pub fn default_triple() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: -0.52,
            lambda3: -2.0,
        }
    }
}

/// Classical Lorenz vector field with analytic Jacobian and equilibria.
pub fn lorenz_field(sigma: f64, r: f64, b: f64) -> FlowSystem {
    assert!(sigma > 0.0 && r > 0.0 && b > 0.0);
    let rhs = move |x: &State| {
        State::new(
            sigma * (x[1] - x[0]),
            r * x[0] - x[1] - x[0] * x[2],
            x[0] * x[1] - b * x[2],
        )
    };
    let jac = move |x: &State| {
        Matrix3::new(
            -sigma, sigma, 0.0, //
            r - x[2], -1.0, -x[0], //
            x[1], x[0], -b,
        )
    };
    let mut equilibria = vec![Equilibrium {
        state: State::zeros(),
        eigenvalues: origin_eigenvalues(sigma, r, b),
    }];
    if r > 1.0 {
        let s = (b * (r - 1.0)).sqrt();
        // char poly at the wings: l^3 + (sigma+b+1) l^2 + b(sigma+r) l + 2 sigma b (r-1)
        let ev = numerics::cubic_roots(sigma + b + 1.0, b * (sigma + r), 2.0 * sigma * b * (r - 1.0));
        for sign in [1.0, -1.0] {
            equilibria.push(Equilibrium {
                state: State::new(sign * s, sign * s, r - 1.0),
                eigenvalues: ev,
            });
        }
    }
    FlowSystem::new(
        "lorenz",
        vec![("sigma".into(), sigma), ("r".into(), r), ("b".into(), b)],
        Box::new(rhs),
        Box::new(jac),
        equilibria,
    )
}

fn origin_eigenvalues(sigma: f64, r: f64, b: f64) -> [Complex<f64>; 3] {
    // z decouples at the origin; the xy block is a 2x2 with trace -(sigma+1)
    // and determinant sigma(1-r)
    let disc = (sigma + 1.0) * (sigma + 1.0) + 4.0 * sigma * (r - 1.0);
    let half = Complex::new(disc, 0.0).sqrt() * 0.5;
    let mid = Complex::new(-0.5 * (sigma + 1.0), 0.0);
    [mid + half, Complex::new(-b, 0.0), mid - half]
}

/// Flow-box crossing map of the linearized singularity.
///
/// A point `(x1, x2)` on the ingoing section (unit-normalized coordinates,
/// `0 < x1 <= 1`) exits the box at `(y2, y3) = (x2 * x1^{-l3/l1},
/// x1^{-l2/l1})`; the second component is `x1^beta`.
pub fn singularity_crossing_map(
    eig: &LorenzLikeEigenvalues,
    x1: f64,
    x2: f64,
) -> Result<(f64, f64), ModelError> {
    if x1 <= 0.0 {
        return Err(ModelError::StableManifold { x1 });
    }
    Ok((x2 * x1.powf(eig.ss_exponent()), x1.powf(eig.beta())))
}

/// Time spent inside the flow box before exiting: `-log(x1)/lambda1`.
/// Infinite on the stable manifold (`x1 <= 0`), which downstream code treats
/// as a membership signal rather than an error.
pub fn exit_time(lambda1: f64, x1: f64) -> f64 {
    assert!(lambda1 > 0.0);
    if x1 <= 0.0 {
        return f64::INFINITY;
    }
    -x1.ln() / lambda1
}

/// Geometric Lorenz model specification.
#[derive(Debug, Clone, Copy)]
pub struct GeometricLorenzSpec {
    pub eigenvalues: LorenzLikeEigenvalues,
    /// Branch gain of the quotient map, in (1, 2].
    pub mu: f64,
    /// Half-width of the square sections in manifold units; section
    /// coordinates are normalized by it.
    pub half_width: f64,
}

impl Default for GeometricLorenzSpec {
    fn default() -> Self {
        Self {
            eigenvalues: LorenzLikeEigenvalues::default_triple(),
            mu: 1.95,
            half_width: 1.0,
        }
    }
}

impl GeometricLorenzSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.eigenvalues.validate()?;
        if !(self.mu > 1.0 && self.mu <= 2.0) {
            return Err(ModelError::BadSpec {
                reason: "mu must lie in (1, 2]",
            });
        }
        if !(self.half_width > 0.0) {
            return Err(ModelError::BadSpec {
                reason: "half-width must be positive",
            });
        }
        // |f'| = mu*beta*|x|^{beta-1} > mu*beta for |x| < 1, so the map is
        // expanding on open branch interiors exactly when mu*beta >= 1
        if self.mu * self.eigenvalues.beta() < 1.0 {
            return Err(ModelError::BadSpec {
                reason: "mu * beta must be at least 1 so |f'| > 1 on branch interiors",
            });
        }
        Ok(())
    }
}

/// The analytic quotient map `f(x) = sign(x) (mu |x|^beta - 1)` on `[-1, 1]`
/// with singular set `{0, -1, 1}` and exact branch inverses.
pub fn geometric_lorenz_map(spec: &GeometricLorenzSpec) -> Result<BranchMap1D, ModelError> {
    spec.validate()?;
    let (mu, beta) = (spec.mu, spec.eigenvalues.beta());
    let right = BranchKind::Analytic {
        f: Box::new(move |x: f64| mu * x.powf(beta) - 1.0),
        df: Box::new(move |x: f64| mu * beta * x.powf(beta - 1.0)),
        inverse: Some(Box::new(move |y: f64| ((y + 1.0) / mu).powf(1.0 / beta))),
    };
    let left = BranchKind::Analytic {
        f: Box::new(move |x: f64| -(mu * (-x).powf(beta) - 1.0)),
        df: Box::new(move |x: f64| mu * beta * (-x).powf(beta - 1.0)),
        inverse: Some(Box::new(move |y: f64| -((1.0 - y) / mu).powf(1.0 / beta))),
    };
    Ok(BranchMap1D::new(
        (-1.0, 1.0),
        vec![(-1.0, 0.0, left), (0.0, 1.0, right)],
        vec![-1.0, 0.0, 1.0],
        Some(PowerLaw { b: 2.0, beta }),
    ))
}

/// Geometric Lorenz model as a sectioned flow: the flow-box crossing from the
/// ingoing top section to the outgoing side sections, closed up by affine
/// wing maps back to the top.
///
/// Sections (chart coordinates `(u, v)`, `v` indexing stable leaves):
///   0: top, `(u, v) -> (2v-1, 2u-1, 1)`, the single ingoing section
///   1: right exit `x1 = 1`, `(u, v) -> (1, 2u-1, v)`
///   2: left exit `x1 = -1`, `(u, v) -> (-1, 2u-1, v)`
///
/// The wing maps send `(±1, a, b)` to `(±(mu b - 1), ±nu a, 1)` in constant
/// time `t_loop`, so the composed top return is
/// `F(x1, x2) = (sign(x1)(mu |x1|^beta - 1), sign(x1) nu x2 |x1|^{ss})`.
#[derive(Debug)]
pub struct GeometricLorenzSystem {
    pub spec: GeometricLorenzSpec,
    /// Wing contraction applied to the leaf coordinate per loop.
    pub nu: f64,
    /// Flight time of each wing loop.
    pub t_loop: f64,
    sections: Vec<CrossSection>,
    ingoing: Vec<usize>,
}

impl GeometricLorenzSystem {
    pub fn new(spec: GeometricLorenzSpec) -> Result<Self, ModelError> {
        Self::with_wing(spec, 0.25, 1.0)
    }

    pub fn with_wing(spec: GeometricLorenzSpec, nu: f64, t_loop: f64) -> Result<Self, ModelError> {
        spec.validate()?;
        if !(nu > 0.0 && nu < 0.5) {
            return Err(ModelError::BadSpec {
                reason: "wing contraction nu must lie in (0, 1/2)",
            });
        }
        if !(t_loop > 0.0) {
            return Err(ModelError::BadSpec {
                reason: "loop time must be positive",
            });
        }
        let hw = spec.half_width;
        let err = |_| ModelError::BadSpec {
            reason: "degenerate section chart",
        };
        let top = CrossSection::new(
            "top",
            State::new(-hw, -hw, hw),
            State::new(0.0, 2.0 * hw, 0.0),
            State::new(2.0 * hw, 0.0, 0.0),
            1.0,
            0.0,
        )
        .map_err(err)?;
        let right = CrossSection::new(
            "exit_pos",
            State::new(hw, -hw, 0.0),
            State::new(0.0, 2.0 * hw, 0.0),
            State::new(0.0, 0.0, hw),
            1.0,
            0.0,
        )
        .map_err(err)?;
        let left = CrossSection::new(
            "exit_neg",
            State::new(-hw, -hw, 0.0),
            State::new(0.0, 2.0 * hw, 0.0),
            State::new(0.0, 0.0, hw),
            1.0,
            0.0,
        )
        .map_err(err)?;
        Ok(Self {
            spec,
            nu,
            t_loop,
            sections: vec![top, right, left],
            ingoing: vec![0],
        })
    }

    /// Composed top-section return `F(x1, x2)` in `[-1, 1]^2` coordinates.
    pub fn section_composition(&self, x1: f64, x2: f64) -> (f64, f64) {
        let (mu, eig) = (self.spec.mu, &self.spec.eigenvalues);
        let s = x1.signum();
        (
            s * (mu * x1.abs().powf(eig.beta()) - 1.0),
            s * self.nu * x2 * x1.abs().powf(eig.ss_exponent()),
        )
    }
}

impl SectionedSystem for GeometricLorenzSystem {
    fn sections(&self) -> &[CrossSection] {
        &self.sections
    }

    fn ingoing(&self) -> &[usize] {
        &self.ingoing
    }

    fn first_hit(&self, p: &SectionPoint) -> Result<(SectionPoint, f64), ReturnError> {
        let eig = &self.spec.eigenvalues;
        match p.section {
            0 => {
                let x1 = 2.0 * p.v - 1.0;
                let x2 = 2.0 * p.u - 1.0;
                if x1 == 0.0 {
                    return Err(ReturnError::StableManifold { t: 0.0 });
                }
                let (y2, y3) = singularity_crossing_map(eig, x1.abs(), x2)
                    .expect("|x1| > 0 by the branch above");
                let section = if x1 > 0.0 { 1 } else { 2 };
                Ok((
                    SectionPoint {
                        section,
                        u: (y2 + 1.0) / 2.0,
                        v: y3,
                    },
                    exit_time(eig.lambda1, x1.abs()),
                ))
            }
            1 => {
                // (1, a, b) -> (mu b - 1, nu a, 1)
                let a = 2.0 * p.u - 1.0;
                let b = p.v;
                Ok((
                    SectionPoint {
                        section: 0,
                        u: (self.nu * a + 1.0) / 2.0,
                        v: (self.spec.mu * b - 1.0 + 1.0) / 2.0,
                    },
                    self.t_loop,
                ))
            }
            2 => {
                // (-1, a, b) -> (-(mu b - 1), -nu a, 1)
                let a = 2.0 * p.u - 1.0;
                let b = p.v;
                Ok((
                    SectionPoint {
                        section: 0,
                        u: (-self.nu * a + 1.0) / 2.0,
                        v: (-(self.spec.mu * b - 1.0) + 1.0) / 2.0,
                    },
                    self.t_loop,
                ))
            }
            other => panic!("no section {other}"),
        }
    }
}
