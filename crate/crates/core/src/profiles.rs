//! Approximate steady profiles of the rescaled equations.
//!
//! The leading 1D pair (Omega*, eta*) = (3z/(1+z)^2, 6z/(1+z)^3), the full
//! grid triple (Omega_bar, eta_bar, xi_bar) with its analytic derivative
//! caches, the reconstructed theta_bar, and smooth radial truncations.

use crate::field::ScalarField;
use crate::grid::Grid;
use crate::quad::{adaptive_quad, QuadError};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profiles: quadrature for {context} failed: {source}")]
    Quadrature {
        context: &'static str,
        source: QuadError,
    },
    #[error("profiles: truncation radius 2*lambda = {0} exceeds r_max = {1}")]
    TruncationBeyondGrid(f64, f64),
    #[error("profiles: lambda must be at least 1, got {0}")]
    BadLambda(f64),
}

/// (Omega*, eta*) at z.
pub fn leading_profile(z: f64) -> (f64, f64) {
    let d = 1.0 + z;
    (3.0 * z / (d * d), 6.0 * z / (d * d * d))
}

/// Max residual of the stationary leading system at c_l = 1/alpha, c_omega = -1,
/// relative to the local term scale.
pub fn verify_leading_residual(alpha: f64, samples: &[f64]) -> f64 {
    let a_cl = alpha * (1.0 / alpha);
    let mut worst = 0.0f64;
    for &z in samples {
        let d = 1.0 + z;
        let (omega, eta) = leading_profile(z);
        // z d/dz of the pair, closed form
        let z_d_omega = 3.0 * z * (1.0 - z) / (d * d * d);
        let z_d_eta = 6.0 * z * (1.0 - 2.0 * z) / (d * d * d * d);
        // K(Omega*)(z) = ∫_z^∞ Omega*/s ds = 3/(1+z)
        let k = 3.0 / d;
        let res1 = -a_cl * z_d_omega - omega + eta;
        let res2 = -a_cl * z_d_eta - 2.0 * eta + k * eta;
        let scale1 = z_d_omega.abs().max(omega.abs()).max(eta.abs()).max(1e-30);
        let scale2 = z_d_eta.abs().max(eta.abs()).max(1e-30);
        worst = worst.max(res1.abs() / scale1).max(res2.abs() / scale2);
    }
    worst
}

/// c(alpha) = (2/pi) ∫ Gamma sin(2 beta) dbeta in closed form.
pub fn c_closed(alpha: f64) -> f64 {
    4.0 / (std::f64::consts::PI * (2.0 + alpha))
}

/// theta_bar(x, y) reconstructed from eta_bar by integration along x.
pub fn theta_bar(x: f64, y: f64, alpha: f64) -> Result<f64, ProfileError> {
    assert!(x >= 0.0 && y >= 0.0);
    if x == 0.0 {
        return Ok(0.0);
    }
    let c = c_closed(alpha);
    let v = adaptive_quad(
        |z| {
            let s = (z * z + y * y).powf(0.5 * alpha);
            z.powf(alpha) / (1.0 + s).powi(3)
        },
        0.0,
        x,
        1e-10,
        1e-300,
    )
    .map_err(|source| ProfileError::Quadrature { context: "theta_bar", source })?;
    Ok(6.0 * alpha / c * v)
}

/// eta_bar as a function of Cartesian coordinates, same closed-form c.
pub fn eta_bar_xy(x: f64, y: f64, alpha: f64) -> f64 {
    let c = c_closed(alpha);
    let r = x.hypot(y);
    let big_r = r.powf(alpha);
    let gamma = (x / r).powf(alpha);
    alpha / c * gamma * 6.0 * big_r / (1.0 + big_r).powi(3)
}

fn s_kernel(r: f64) -> f64 {
    let d = 1.0 + r;
    r * r / (d * d * d * d)
}

fn d_r_s_kernel(r: f64) -> f64 {
    let d = 1.0 + r;
    2.0 * r * r * (1.0 - r) / (d * d * d * d * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GammaMode {
    CosPower,
    Flat,
}

/// Approximate steady state on the grid with analytic derivative caches.
#[derive(Debug, Clone)]
pub struct SteadyProfile {
    pub alpha: f64,
    /// (2/pi) ∫ Gamma sin(2 beta) dbeta by the grid's angular quadrature.
    pub c: f64,
    pub c_l: f64,
    pub c_omega: f64,
    pub omega: ScalarField,
    pub eta: ScalarField,
    pub xi: ScalarField,
    pub d_r_omega: ScalarField,
    pub d_b_omega: ScalarField,
    pub d_r_eta: ScalarField,
    pub d_b_eta: ScalarField,
    /// Radial derivative of xi_bar by the order-4 stencils.
    pub d_r_xi: ScalarField,
    /// sin(2 beta) ∂_beta xi_bar: analytic boundary term plus 2 alpha cos^2(beta) D_R xi_bar.
    pub d_b_xi: ScalarField,
    /// J(eta_bar) = theta_bar / x on the grid nodes.
    pub j_eta: ScalarField,
    gamma_mode: GammaMode,
}

pub fn approx_steady_state(grid: &Grid) -> Result<SteadyProfile, ProfileError> {
    build_profile(grid, GammaMode::CosPower)
}

/// Diagnostic variant with the angular factor frozen to 1.
pub fn approx_steady_state_flat_gamma(grid: &Grid) -> Result<SteadyProfile, ProfileError> {
    build_profile(grid, GammaMode::Flat)
}

fn build_profile(grid: &Grid, mode: GammaMode) -> Result<SteadyProfile, ProfileError> {
    let alpha = grid.alpha;
    let gamma = |b: f64| match mode {
        GammaMode::CosPower => grid.gamma(b),
        GammaMode::Flat => 1.0,
    };
    let gs: Vec<f64> = grid.b_nodes.iter().map(|&b| gamma(b)).collect();
    let integrand: Vec<f64> = grid
        .b_nodes
        .iter()
        .zip(&gs)
        .map(|(&b, &g)| g * (2.0 * b).sin())
        .collect();
    let c = 2.0 / std::f64::consts::PI * grid.integrate_angular(&integrand);

    let amp = alpha / c;
    let w_omega = |r: f64| 3.0 * r / (1.0 + r).powi(2);
    let d_w_omega = |r: f64| 3.0 * r * (1.0 - r) / (1.0 + r).powi(3);
    let w_eta = |r: f64| 6.0 * r / (1.0 + r).powi(3);
    let d_w_eta = |r: f64| 6.0 * r * (1.0 - 2.0 * r) / (1.0 + r).powi(4);

    let omega = grid.field(|r, b| amp * gamma(b) * w_omega(r));
    let eta = grid.field(|r, b| amp * gamma(b) * w_eta(r));
    let d_r_omega = grid.field(|r, b| amp * gamma(b) * d_w_omega(r));
    let d_r_eta = grid.field(|r, b| amp * gamma(b) * d_w_eta(r));
    // D_beta Gamma = -2 alpha sin^2 Gamma (zero in the flat variant)
    let ang_factor = |b: f64| match mode {
        GammaMode::CosPower => -2.0 * alpha * b.sin() * b.sin(),
        GammaMode::Flat => 0.0,
    };
    let d_b_omega = grid.field(|r, b| amp * gamma(b) * ang_factor(b) * w_omega(r));
    let d_b_eta = grid.field(|r, b| amp * gamma(b) * ang_factor(b) * w_eta(r));

    // xi_bar(R, beta) = -(18 alpha^2 / c) ∫_beta^{pi/2} Gamma(b') S(R') db',
    // R' = R (sin beta / sin b')^alpha.
    let half_pi = std::f64::consts::FRAC_PI_2;
    let xi_scale = -18.0 * alpha * alpha / c;
    let rows: Result<Vec<Vec<f64>>, ProfileError> = grid
        .r_nodes
        .par_iter()
        .map(|&r| {
            grid.b_nodes
                .iter()
                .map(|&b| {
                    let sb = b.sin();
                    let v = adaptive_quad(
                        |bp| {
                            let rp = r * (sb / bp.sin()).powf(alpha);
                            gamma(bp) * s_kernel(rp)
                        },
                        b,
                        half_pi,
                        1e-9,
                        1e-300,
                    )
                    .map_err(|source| ProfileError::Quadrature { context: "xi_bar", source })?;
                    Ok(xi_scale * v)
                })
                .collect()
        })
        .collect();
    let rows = rows?;
    let mut xi = ScalarField::zeros(grid.nr(), grid.nb());
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            xi.set(i, j, v);
        }
    }

    let d_r_xi = grid.d_r4(&xi);
    // D_beta xi_bar = -(alpha^2/c) sin(2b) Gamma (D_R W - W)(R) + 2 alpha cos^2 b D_R xi_bar,
    // with W = 6R/(1+R)^3; the bracket equals -18 R^2/(1+R)^4.
    let mut d_b_xi = ScalarField::zeros(grid.nr(), grid.nb());
    for (i, &r) in grid.r_nodes.iter().enumerate() {
        for (j, &b) in grid.b_nodes.iter().enumerate() {
            let boundary = 18.0 * alpha * alpha / c * (2.0 * b).sin() * gamma(b) * s_kernel(r);
            let cb = b.cos();
            d_b_xi.set(i, j, boundary + 2.0 * alpha * cb * cb * d_r_xi.get(i, j));
        }
    }

    // J(eta_bar)(R, beta) = (6 alpha / c) R Gamma(beta) ∫₀¹ t^alpha (1+R_t)^{-3} dt
    let j_rows: Result<Vec<Vec<f64>>, ProfileError> = grid
        .r_nodes
        .par_iter()
        .map(|&r| {
            grid.b_nodes
                .iter()
                .map(|&b| {
                    let cb2 = b.cos() * b.cos();
                    let sb2 = b.sin() * b.sin();
                    let v = adaptive_quad(
                        |t| {
                            let rt = r * (t * t * cb2 + sb2).powf(0.5 * alpha);
                            t.powf(alpha) / (1.0 + rt).powi(3)
                        },
                        0.0,
                        1.0,
                        1e-10,
                        1e-300,
                    )
                    .map_err(|source| ProfileError::Quadrature { context: "j_eta", source })?;
                    Ok(6.0 * alpha / c * r * gamma(b) * v)
                })
                .collect()
        })
        .collect();
    let j_rows = j_rows?;
    let mut j_eta = ScalarField::zeros(grid.nr(), grid.nb());
    for (i, row) in j_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            j_eta.set(i, j, v);
        }
    }

    Ok(SteadyProfile {
        alpha,
        c,
        c_l: 1.0 / alpha + 3.0,
        c_omega: -1.0,
        omega,
        eta,
        xi,
        d_r_omega,
        d_b_omega,
        d_r_eta,
        d_b_eta,
        d_r_xi,
        d_b_xi,
        j_eta,
        gamma_mode: mode,
    })
}

impl SteadyProfile {
    fn gamma_of(&self, b: f64) -> f64 {
        match self.gamma_mode {
            GammaMode::CosPower => b.cos().powf(self.alpha),
            GammaMode::Flat => 1.0,
        }
    }

    /// Omega_bar at an arbitrary point, from the closed formula.
    pub fn omega_value(&self, r: f64, b: f64) -> f64 {
        self.alpha / self.c * self.gamma_of(b) * 3.0 * r / (1.0 + r).powi(2)
    }

    pub fn eta_value(&self, r: f64, b: f64) -> f64 {
        self.alpha / self.c * self.gamma_of(b) * 6.0 * r / (1.0 + r).powi(3)
    }

    /// D_R xi_bar by direct quadrature of the differentiated integrand
    /// (cross-check for the stencil-based cache).
    pub fn d_r_xi_quadrature(&self, r: f64, b: f64) -> Result<f64, ProfileError> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let sb = b.sin();
        let alpha = self.alpha;
        let v = adaptive_quad(
            |bp| {
                let rp = r * (sb / bp.sin()).powf(alpha);
                self.gamma_of(bp) * d_r_s_kernel(rp)
            },
            b,
            half_pi,
            1e-10,
            1e-300,
        )
        .map_err(|source| ProfileError::Quadrature { context: "d_r_xi", source })?;
        Ok(-18.0 * alpha * alpha / self.c * v)
    }
}

/// Sine-series coefficients gamma_n = (4/pi) ∫ cos^alpha(b) sin(2n b) db of the
/// angular factor, n = 1..=n_max.
///
/// With M_k = ∫ cos^{alpha-1}(b) sin(k b) db one has M_1 = 1/alpha,
/// M_{2n+1} = (1 - (n - alpha/2) M_{2n-1}) / (n + alpha/2), and the coefficient
/// is the average of consecutive M's. The recursion is exact; the alternating
/// M's stay O(1/alpha) and the averaging cancellation costs a few digits at
/// worst.
pub fn gamma_sine_coeffs(alpha: f64, n_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max);
    let mut m_lo = 1.0 / alpha;
    for n in 1..=n_max {
        let nf = n as f64;
        let m_hi = (1.0 - (nf - 0.5 * alpha) * m_lo) / (nf + 0.5 * alpha);
        out.push(4.0 / std::f64::consts::PI * 0.5 * (m_hi + m_lo));
        m_lo = m_hi;
    }
    out
}

impl SteadyProfile {
    /// Sine coefficients of this profile's angular factor.
    pub fn angular_sine_coeffs(&self, n_max: usize) -> Vec<f64> {
        match self.gamma_mode {
            GammaMode::CosPower => gamma_sine_coeffs(self.alpha, n_max),
            GammaMode::Flat => (1..=n_max)
                .map(|n| {
                    if n % 2 == 1 {
                        4.0 / (std::f64::consts::PI * n as f64)
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    /// Radial factor of Omega_bar including the alpha/c amplitude.
    pub fn omega_radial(&self, r: f64) -> f64 {
        self.alpha / self.c * 3.0 * r / (1.0 + r).powi(2)
    }
}

/// Quintic smoothstep cutoff: 1 on [0, 1], 0 on [2, ∞).
pub fn cutoff(s: f64) -> f64 {
    if s <= 1.0 {
        1.0
    } else if s >= 2.0 {
        0.0
    } else {
        let t = 2.0 - s;
        t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

/// s d/ds of the cutoff.
pub fn cutoff_log_deriv(s: f64) -> f64 {
    if !(1.0..2.0).contains(&s) {
        0.0
    } else {
        let t = 2.0 - s;
        -s * 30.0 * t * t * (1.0 - t) * (1.0 - t)
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedProfile {
    pub lambda: f64,
    pub omega: ScalarField,
    pub eta: ScalarField,
    pub xi: ScalarField,
}

/// Radial truncation at scale lambda: fields of the cut-off stream data,
/// with the commutator corrections from differentiating the cutoff.
pub fn truncate_profile(
    profile: &SteadyProfile,
    lambda: f64,
    grid: &Grid,
) -> Result<TruncatedProfile, ProfileError> {
    if lambda < 1.0 {
        return Err(ProfileError::BadLambda(lambda));
    }
    if 2.0 * lambda > grid.r_max {
        return Err(ProfileError::TruncationBeyondGrid(2.0 * lambda, grid.r_max));
    }
    let alpha = profile.alpha;
    let nr = grid.nr();
    let nb = grid.nb();
    let mut omega = ScalarField::zeros(nr, nb);
    let mut eta = ScalarField::zeros(nr, nb);
    let mut xi = ScalarField::zeros(nr, nb);
    for (i, &r) in grid.r_nodes.iter().enumerate() {
        let chi = cutoff(r / lambda);
        let dchi = cutoff_log_deriv(r / lambda);
        for (j, &b) in grid.b_nodes.iter().enumerate() {
            let jv = profile.j_eta.get(i, j);
            let (sb, cb) = (b.sin(), b.cos());
            omega.set(i, j, chi * profile.omega.get(i, j));
            eta.set(i, j, chi * profile.eta.get(i, j) + alpha * cb * cb * dchi * jv);
            xi.set(i, j, chi * profile.xi.get(i, j) + alpha * sb * cb * dchi * jv);
        }
    }
    Ok(TruncatedProfile { lambda, omega, eta, xi })
}

/// Envelope constants for xi_bar, reported rather than asserted.
#[derive(Debug, Clone)]
pub struct XiBoundsReport {
    /// max |xi_bar| / (alpha^2 * branch envelope)
    pub k_envelope: f64,
    /// max (-xi_bar) / (alpha^2 cos beta); xi_bar must be nonpositive
    pub k_cos: f64,
    pub min_xi: f64,
    pub max_xi: f64,
}

pub fn check_xi_bounds(grid: &Grid, profile: &SteadyProfile) -> XiBoundsReport {
    let alpha = profile.alpha;
    let a2 = alpha * alpha;
    let mut k_env = 0.0f64;
    let mut k_cos = 0.0f64;
    let mut min_xi = f64::INFINITY;
    let mut max_xi = f64::NEG_INFINITY;
    for (i, &r) in grid.r_nodes.iter().enumerate() {
        for (j, &b) in grid.b_nodes.iter().enumerate() {
            let v = profile.xi.get(i, j);
            min_xi = min_xi.min(v);
            max_xi = max_xi.max(v);
            let env = if b < std::f64::consts::FRAC_PI_4 {
                let sa = b.sin().powf(alpha);
                sa / (1.0 + r * sa).powi(3)
            } else {
                b.cos().powf(alpha + 1.0) / (1.0 + r).powi(3)
            };
            let env = a2 * r * r / (1.0 + r) * env;
            if env > 0.0 {
                k_env = k_env.max(v.abs() / env);
            }
            k_cos = k_cos.max(-v / (a2 * b.cos()));
        }
    }
    XiBoundsReport { k_envelope: k_env, k_cos, min_xi, max_xi }
}
