//! One-dimensional quadrature and differentiation kernels.
//!
//! Fixed-order interpolatory panel rules on uniform grids (plain and with
//! exponential kernels, for the radial Green's function sweeps), Gauss-Legendre
//! rules, Fornberg finite-difference weights on scattered nodes, and an
//! adaptive Simpson fallback for integrands with endpoint singularities.
//! All reductions are serial and deterministic.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use std::sync::OnceLock;
use thiserror::Error;

/// Order of the sliding panel rule used by the radial integrators.
pub const PANEL_ORDER: usize = 10;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("quad: adaptive rule did not converge on [{a}, {b}] (reached depth {depth})")]
    NonConvergence { a: f64, b: f64, depth: usize },
}

/// Gauss-Legendre nodes and weights on [-1, 1], Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Recurrence for P_n(x) and P_n'(x).
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Fornberg weights for derivatives 0..=m at `x0` from arbitrary distinct `nodes`.
/// Returned as `w[order][node]`.
pub fn fd_weights(x0: f64, nodes: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    assert!(n > m, "need more nodes than derivative order");
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=m.min(i)).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=m.min(i)).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    let mut out = vec![vec![0.0; n]; m + 1];
    for (j, cj) in c.iter().enumerate() {
        for k in 0..=m {
            out[k][j] = cj[k];
        }
    }
    out
}

/// ∫₀¹ tᵏ e^{-at} dt for k = 0..=kmax, a ≥ 0.
///
/// Series in the regime where the upward recursion cancels; upward recursion
/// (stable, no overflow) for large a.
pub fn exp_moments(a: f64, kmax: usize) -> Vec<f64> {
    assert!(a >= 0.0);
    let mut m = vec![0.0; kmax + 1];
    if a == 0.0 {
        for (k, mk) in m.iter_mut().enumerate() {
            *mk = 1.0 / (k as f64 + 1.0);
        }
        return m;
    }
    if a >= 2.0 * kmax as f64 + 28.0 {
        let ea = (-a).exp();
        m[0] = (1.0 - ea) / a;
        for k in 1..=kmax {
            m[k] = (k as f64 * m[k - 1] - ea) / a;
        }
        return m;
    }
    // M_k(a) = e^{-a} Σ_m a^m k! / (k+m+1)!  (positive terms).
    let ea = (-a).exp();
    for (k, mk) in m.iter_mut().enumerate() {
        let mut term = 1.0 / (k as f64 + 1.0); // m = 0: k!/(k+1)!
        let mut sum = term;
        let mut mm = 1.0;
        loop {
            term *= a / (k as f64 + mm + 1.0);
            sum += term;
            if term < 1e-18 * sum && mm > a {
                break;
            }
            mm += 1.0;
            assert!(mm < 10_000.0);
        }
        *mk = ea * sum;
    }
    m
}

/// ∫₀¹ tᵏ e^{-a(1-t)} dt for k = 0..=kmax, a ≥ 0.
pub fn exp_moments_rev(a: f64, kmax: usize) -> Vec<f64> {
    assert!(a >= 0.0);
    let mut m = vec![0.0; kmax + 1];
    if a == 0.0 {
        for (k, mk) in m.iter_mut().enumerate() {
            *mk = 1.0 / (k as f64 + 1.0);
        }
        return m;
    }
    // e^{-a} Σ_m a^m / (m! (k+m+1))  (positive terms), switching to the
    // complementary recursion for large a to avoid the long series.
    if a >= 2.0 * kmax as f64 + 28.0 {
        // Mrev_k = (1 - k Mrev_{k-1} ... ) derive from integration by parts:
        // ∫ t^k e^{-a(1-t)} dt = 1/a - (k/a) Mrev_{k-1}, Mrev_0 = (1 - e^{-a})/a.
        let ea = (-a).exp();
        m[0] = (1.0 - ea) / a;
        for k in 1..=kmax {
            m[k] = (1.0 - k as f64 * m[k - 1]) / a;
        }
        return m;
    }
    let ea = (-a).exp();
    for (k, mk) in m.iter_mut().enumerate() {
        let mut sum = 1.0 / (k as f64 + 1.0); // m = 0
        let mut fact_ratio = 1.0;
        let mut mm = 1.0;
        loop {
            fact_ratio *= a / mm;
            let t = fact_ratio / (k as f64 + mm + 1.0);
            sum += t;
            if t < 1e-18 * sum && mm > a {
                break;
            }
            mm += 1.0;
            assert!(mm < 10_000.0);
        }
        *mk = ea * sum;
    }
    m
}

/// Sliding interpolatory panel rule of fixed order on a uniform grid.
///
/// `shifted[x0][j][k]` are the monomial coefficients (in the panel-local
/// variable t ∈ [0,1]) of the Lagrange basis function of stencil node j when
/// the integration interval starts at stencil offset x0.
#[derive(Debug, Clone)]
pub struct PanelRule {
    p: usize,
    shifted: Vec<Vec<Vec<f64>>>,
}

static STANDARD_RULE: OnceLock<PanelRule> = OnceLock::new();

impl PanelRule {
    pub fn new(p: usize) -> PanelRule {
        assert!((2..=16).contains(&p));
        let int = |v: i64| BigRational::from_integer(BigInt::from(v));
        // Monomial coefficients of the Lagrange basis on nodes 0..p-1,
        // exact rationals so that the panel-local tables carry full precision.
        let mut basis: Vec<Vec<BigRational>> = Vec::with_capacity(p);
        for j in 0..p {
            let mut coeff = vec![BigRational::one()];
            let mut denom = BigRational::one();
            for i in 0..p {
                if i == j {
                    continue;
                }
                // multiply by (x - i)
                let mut next = vec![BigRational::zero(); coeff.len() + 1];
                for (k, c) in coeff.iter().enumerate() {
                    next[k] -= c * int(i as i64);
                    next[k + 1] += c;
                }
                coeff = next;
                denom *= int(j as i64) - int(i as i64);
            }
            for c in coeff.iter_mut() {
                *c /= &denom;
            }
            basis.push(coeff);
        }
        // Shift each basis polynomial to x = x0 + t via binomial expansion.
        let mut binom = vec![vec![BigRational::zero(); p]; p];
        for k in 0..p {
            binom[k][0] = BigRational::one();
            for m in 1..=k {
                binom[k][m] = &binom[k][m - 1] * int((k - m + 1) as i64) / int(m as i64);
            }
        }
        let mut shifted = vec![vec![vec![0.0; p]; p]; p];
        for x0 in 0..p {
            for j in 0..p {
                for m in 0..p {
                    let mut s = BigRational::zero();
                    for k in m..p {
                        let pow = num_traits::pow::pow(int(x0 as i64), k - m);
                        s += &basis[j][k] * &binom[k][m] * pow;
                    }
                    shifted[x0][j][m] = s.to_f64().unwrap();
                }
            }
        }
        PanelRule { p, shifted }
    }

    pub fn standard() -> &'static PanelRule {
        STANDARD_RULE.get_or_init(|| PanelRule::new(PANEL_ORDER))
    }

    fn order_for(n: usize) -> usize {
        PANEL_ORDER.min(n)
    }

    /// Stencil start for the interval [i, i+1] on an n-node grid.
    fn start(&self, i: usize, n: usize) -> usize {
        let half = self.p / 2 - 1;
        i.saturating_sub(half).min(n - self.p)
    }

    fn interval_sum(&self, f: &[f64], i: usize, moments: &[f64]) -> f64 {
        let n = f.len();
        let s = self.start(i, n);
        let x0 = i - s;
        let mut acc = 0.0;
        for j in 0..self.p {
            let mut basis_int = 0.0;
            for (k, &mk) in moments.iter().enumerate() {
                basis_int += self.shifted[x0][j][k] * mk;
            }
            acc += f[s + j] * basis_int;
        }
        acc
    }

    /// ∫ f over the whole uniform grid with spacing h.
    pub fn integrate(&self, h: f64, f: &[f64]) -> f64 {
        let n = f.len();
        assert!(n >= self.p);
        let plain: Vec<f64> = (0..self.p).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        let mut acc = 0.0;
        for i in 0..n - 1 {
            acc += self.interval_sum(f, i, &plain);
        }
        acc * h
    }

    /// Node weights w with Σ w_i f_i = ∫ f for the full grid.
    pub fn node_weights(&self, n: usize, h: f64) -> Vec<f64> {
        assert!(n >= self.p);
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let s = self.start(i, n);
            let x0 = i - s;
            for j in 0..self.p {
                let mut basis_int = 0.0;
                for k in 0..self.p {
                    basis_int += self.shifted[x0][j][k] / (k as f64 + 1.0);
                }
                w[s + j] += h * basis_int;
            }
        }
        w
    }

    /// T[i] = ∫ from node i to the top node; T[n-1] = tail.
    pub fn cum_from_top(&self, h: f64, f: &[f64], tail: f64) -> Vec<f64> {
        let n = f.len();
        assert!(n >= self.p);
        let plain: Vec<f64> = (0..self.p).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        let mut t = vec![0.0; n];
        t[n - 1] = tail;
        for i in (0..n - 1).rev() {
            t[i] = t[i + 1] + h * self.interval_sum(f, i, &plain);
        }
        t
    }

    /// I[i] = ∫_{-∞}^{u_i} e^{-(a/h)(u_i - v)} f(v) dv with I[0] = init.
    pub fn exp_cum_lower(&self, h: f64, a: f64, f: &[f64], init: f64) -> Vec<f64> {
        let n = f.len();
        assert!(n >= self.p);
        let moments = exp_moments_rev(a, self.p - 1);
        let decay = (-a).exp();
        let mut out = vec![0.0; n];
        out[0] = init;
        for i in 1..n {
            out[i] = decay * out[i - 1] + h * self.interval_sum(f, i - 1, &moments);
        }
        out
    }

    /// I[i] = ∫_{u_i}^{+∞} e^{-(a/h)(v - u_i)} f(v) dv with I[n-1] = tail.
    pub fn exp_cum_upper(&self, h: f64, a: f64, f: &[f64], tail: f64) -> Vec<f64> {
        let n = f.len();
        assert!(n >= self.p);
        let moments = exp_moments(a, self.p - 1);
        let decay = (-a).exp();
        let mut out = vec![0.0; n];
        out[n - 1] = tail;
        for i in (0..n - 1).rev() {
            out[i] = decay * out[i + 1] + h * self.interval_sum(f, i, &moments);
        }
        out
    }
}

/// Rule of the standard order, degraded if the grid is shorter than the stencil.
pub fn rule_for(n: usize) -> PanelRule {
    let p = PanelRule::order_for(n);
    if p == PANEL_ORDER {
        PanelRule::standard().clone()
    } else {
        PanelRule::new(p)
    }
}

fn simpson(f0: f64, fm: f64, f1: f64, h: f64) -> f64 {
    h / 6.0 * (f0 + 4.0 * fm + f1)
}

fn adaptive_step<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    evals: &mut usize,
) -> Result<f64, QuadError> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    *evals += 2;
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let err = left + right - whole;
    if err.abs() <= 15.0 * tol || (b - a) < 1e-300 {
        return Ok(left + right + err / 15.0);
    }
    if depth == 0 || *evals > 4_000_000 {
        return Err(QuadError::NonConvergence { a, b, depth });
    }
    // The tolerance is deliberately not halved per level: with integrable
    // endpoint singularities the halved scheme never terminates.
    let l = adaptive_step(f, a, m, fa, flm, fm, left, tol, depth - 1, evals)?;
    let r = adaptive_step(f, m, b, fm, frm, fb, right, tol, depth - 1, evals)?;
    Ok(l + r)
}

/// Adaptive Simpson on [a, b]; tolerance is relative to the integral scale,
/// with `abs_floor` guarding near-zero integrals.
pub fn adaptive_quad<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let mut evals = 3usize;
    let whole = simpson(fa, fm, fb, b - a);
    let scale = whole.abs().max(abs_floor);
    adaptive_step(&mut f, a, b, fa, fm, fb, whole, rel_tol * scale, 80, &mut evals)
}
