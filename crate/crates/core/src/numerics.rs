//! Small numerical building blocks shared across the crate: compensated
//! summation, root finding, quadrature, cubic roots, and least-squares fits.

use nalgebra::Complex;

/// Neumaier-compensated accumulator. Keeps a running correction term so long
/// alternating sums retain roughly twice the working precision.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sum of a slice with Neumaier compensation.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut acc = NeumaierSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Bisection for a root of `f` on `[a, b]`; requires a sign change. Returns
/// the midpoint of the final bracket of width `<= xtol`.
pub fn bisect_root(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, xtol: f64) -> Option<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (b - a).abs() <= xtol {
            return Some(m);
        }
        let fm = f(m);
        if fm == 0.0 {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            return left + right + err / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Roots of `x^3 + a2 x^2 + a1 x + a0` with real coefficients, as complex
/// numbers. Uses the trigonometric form when all roots are real.
pub fn cubic_roots(a2: f64, a1: f64, a0: f64) -> [Complex<f64>; 3] {
    // depressed cubic t^3 + p t + q, x = t - a2/3
    let shift = a2 / 3.0;
    let p = a1 - a2 * a2 / 3.0;
    let q = 2.0 * a2 * a2 * a2 / 27.0 - a2 * a1 / 3.0 + a0;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);
    let c = |re: f64| Complex::new(re - shift, 0.0);
    if disc > 0.0 {
        // one real root, complex pair
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        let real = u + v;
        let re = -real / 2.0 - shift;
        let im = (u - v) * 3.0_f64.sqrt() / 2.0;
        [c(real), Complex::new(re, im), Complex::new(re, -im)]
    } else if p == 0.0 && q == 0.0 {
        [c(0.0), c(0.0), c(0.0)]
    } else {
        // three real roots
        let r = (-p / 3.0).sqrt();
        let arg = (3.0 * q / (2.0 * p * r)).clamp(-1.0, 1.0);
        let phi = arg.acos();
        let mut out = [Complex::new(0.0, 0.0); 3];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = c(2.0 * r * ((phi - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos());
        }
        out
    }
}

/// Least-squares line through `(x, y)` pairs; returns `(slope, intercept)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "linear_fit needs at least two points");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Median of a slice (averages the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// SVD of a 2x2 real matrix `[[a, b], [c, d]]`: returns
/// `(s_max, s_min, v_max, v_min)` with right singular vectors normalized.
pub fn svd2(a: f64, b: f64, c: f64, d: f64) -> (f64, f64, [f64; 2], [f64; 2]) {
    // Eigen-decomposition of M^T M (symmetric positive semidefinite).
    let e = a * a + c * c;
    let f = a * b + c * d;
    let g = b * b + d * d;
    let tr = e + g;
    let det = e * g - f * f;
    let gap = ((tr * tr / 4.0 - det).max(0.0)).sqrt();
    let l1 = tr / 2.0 + gap;
    let l2 = (tr / 2.0 - gap).max(0.0);
    let v1 = if f.abs() > 1e-300 {
        let v = [f, l1 - e];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    } else if e >= g {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let v2 = [-v1[1], v1[0]];
    (l1.sqrt(), l2.sqrt(), v1, v2)
}

/// Deterministic 64-bit hash of an `f64`'s bit pattern (splitmix64 finisher).
/// Used for stateless sub-rounding dither in orbit iteration.
pub fn hash_f64(x: f64, salt: u64) -> u64 {
    let mut z = x.to_bits() ^ salt;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` derived from [`hash_f64`].
pub fn unit_hash(x: f64, salt: u64) -> f64 {
    (hash_f64(x, salt) >> 11) as f64 / (1u64 << 53) as f64
}
