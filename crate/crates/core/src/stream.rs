//! Modal solver for the stream relation and the velocity fields built from it.
//!
//! In u = ln R each sine mode of the source satisfies a constant-coefficient
//! ODE whose decaying Green's kernel splits into one integral growing down
//! from +infinity and one growing up from -infinity. Both are accumulated
//! with the exponential-moment panel rule, so the discrete solution inherits
//! the order of the quadrature rather than that of a difference scheme.

use crate::field::ScalarField;
use crate::grid::{Grid, Spacing};
use crate::profiles::SteadyProfile;
use crate::quad::rule_for;
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("stream: the modal solver needs the geometric radial spacing")]
    MappedUniformUnsupported,
    #[error("stream: mode count must be positive")]
    EmptyModes,
}

/// Closure model for the part of L12 beyond the last node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum L12Tail {
    Zero,
    /// g(s)/s ~ C (1+s)^{-(p+1)} beyond the grid; p = 1 is exact for the
    /// steady profile.
    PowerLaw { p: f64 },
}

/// Closure model for the mode integrals beyond the first and last nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeTail {
    Zero,
    /// Two-node exponential fit of the source at the boundary.
    Fitted,
}

#[derive(Debug, Clone, Copy)]
pub struct StreamOpts {
    /// Angular modes to carry; default min(nb/2, 32) for grid sources.
    pub n_modes: Option<usize>,
    pub l12_tail: L12Tail,
    pub mode_tail: ModeTail,
}

impl Default for StreamOpts {
    fn default() -> Self {
        StreamOpts {
            n_modes: None,
            l12_tail: L12Tail::Zero,
            mode_tail: ModeTail::Fitted,
        }
    }
}

impl StreamOpts {
    /// Options for solves on perturbation sources: a short mode budget is
    /// enough because perturbations vanish at beta = pi/2 and carry no 1/n
    /// sine tail, and the zero tail keeps the solve linear in the field.
    pub fn for_perturbation(nb: usize) -> StreamOpts {
        StreamOpts {
            n_modes: Some((nb / 4).clamp(1, 16)),
            l12_tail: L12Tail::Zero,
            mode_tail: ModeTail::Fitted,
        }
    }
}

/// Per-mode radial data; index k holds mode n = k+1, derivatives are d/du.
#[derive(Debug, Clone)]
pub struct ModalData {
    pub psi_n: Vec<Vec<f64>>,
    pub dpsi_n: Vec<Vec<f64>>,
    pub d2psi_n: Vec<Vec<f64>>,
    pub omega_n: Vec<Vec<f64>>,
    /// n = 1 coefficient of psi_star.
    pub psi_star1: Vec<f64>,
}

impl ModalData {
    pub fn n_modes(&self) -> usize {
        self.psi_n.len()
    }
}

#[derive(Debug, Clone)]
pub struct StreamSolution {
    pub psi: ScalarField,
    pub psi_star: ScalarField,
    /// L12 at the radial nodes.
    pub l12: Vec<f64>,
    /// L12 continued to R = 0.
    pub l12_zero: f64,
    /// The radial correction -psi_star's n=1 coefficient.
    pub g_bar: Vec<f64>,
    pub modes: ModalData,
}

/// Solve for the stream data of a grid source.
pub fn solve_stream(
    grid: &Grid,
    omega: &ScalarField,
    opts: &StreamOpts,
) -> Result<StreamSolution, StreamError> {
    if grid.spacing == Spacing::MappedUniform {
        return Err(StreamError::MappedUniformUnsupported);
    }
    let n_modes = opts.n_modes.unwrap_or_else(|| (grid.nb() / 2).min(32));
    if n_modes == 0 {
        return Err(StreamError::EmptyModes);
    }
    let nr = grid.nr();
    let omega_n: Vec<Vec<f64>> = (1..=n_modes)
        .map(|n| {
            let sines: Vec<f64> = grid
                .b_nodes
                .iter()
                .zip(&grid.b_quad)
                .map(|(&b, &q)| (2.0 * n as f64 * b).sin() * q)
                .collect();
            (0..nr)
                .map(|i| {
                    let mut acc = 0.0;
                    for (j, s) in sines.iter().enumerate() {
                        acc += omega.get(i, j) * s;
                    }
                    4.0 / PI * acc
                })
                .collect()
        })
        .collect();
    Ok(solve_modal(grid, omega_n, opts))
}

/// Stream data of the steady profile, with the angular projections taken from
/// the exact sine-coefficient recursion instead of the grid quadrature.
pub fn profile_stream(
    grid: &Grid,
    profile: &SteadyProfile,
    opts: &StreamOpts,
) -> Result<StreamSolution, StreamError> {
    if grid.spacing == Spacing::MappedUniform {
        return Err(StreamError::MappedUniformUnsupported);
    }
    let n_modes = opts.n_modes.unwrap_or(200);
    if n_modes == 0 {
        return Err(StreamError::EmptyModes);
    }
    let coeffs = profile.angular_sine_coeffs(n_modes);
    let radial: Vec<f64> = grid.r_nodes.iter().map(|&r| profile.omega_radial(r)).collect();
    let omega_n: Vec<Vec<f64>> = coeffs
        .iter()
        .map(|&g| radial.iter().map(|&v| g * v).collect())
        .collect();
    Ok(solve_modal(grid, omega_n, opts))
}

fn fit_growth(f0: f64, f1: f64, du: f64) -> Option<f64> {
    if f0 == 0.0 || f1 == 0.0 {
        return None;
    }
    let ratio = f1 / f0;
    if ratio <= 0.0 {
        return None;
    }
    let q = ratio.ln() / du;
    q.is_finite().then_some(q)
}

fn l12_from_g(grid: &Grid, g: &[f64], tail: L12Tail) -> (Vec<f64>, f64) {
    let nr = grid.nr();
    let du = grid.dw;
    let top = match tail {
        L12Tail::Zero => 0.0,
        L12Tail::PowerLaw { p } => {
            let rn = grid.r_nodes[nr - 1];
            g[nr - 1] * (1.0 + rn) / (p * rn)
        }
    };
    let l12 = rule_for(nr).cum_from_top(du, g, top);
    // below the first node g is modeled as g(R_0) (R/R_0)^q
    let q0 = fit_growth(g[0], g[1], du).filter(|&q| q > 0.0).unwrap_or(1.0);
    let l12_zero = l12[0] + g[0] / q0;
    (l12, l12_zero)
}

/// L12 of a grid source at the radial nodes and at R = 0, by the angular
/// quadrature alone; no modal solve.
pub fn l12_radial(grid: &Grid, omega: &ScalarField, tail: L12Tail) -> (Vec<f64>, f64) {
    let sines: Vec<f64> = grid
        .b_nodes
        .iter()
        .zip(&grid.b_quad)
        .map(|(&b, &q)| (2.0 * b).sin() * q)
        .collect();
    let g: Vec<f64> = (0..grid.nr())
        .map(|i| {
            let mut acc = 0.0;
            for (j, s) in sines.iter().enumerate() {
                acc += omega.get(i, j) * s;
            }
            acc
        })
        .collect();
    l12_from_g(grid, &g, tail)
}

fn solve_modal(grid: &Grid, omega_n: Vec<Vec<f64>>, opts: &StreamOpts) -> StreamSolution {
    let alpha = grid.alpha;
    let nr = grid.nr();
    let du = grid.dw;
    let rule = rule_for(nr);

    // L12 from the n = 1 projection: g = (pi/4) omega_1, L12 = ∫_u^∞ g dv.
    let g: Vec<f64> = omega_n[0].iter().map(|&v| PI / 4.0 * v).collect();
    let (l12, l12_zero) = l12_from_g(grid, &g, opts.l12_tail);

    let n_modes = omega_n.len();
    let mode_sol: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = omega_n
        .par_iter()
        .enumerate()
        .map(|(k, om)| {
            let n = (k + 1) as f64;
            let m_plus = 2.0 * (n - 1.0) / alpha;
            let m_minus = -2.0 * (n + 1.0) / alpha;

            let i_minus_init = match opts.mode_tail {
                ModeTail::Zero => 0.0,
                ModeTail::Fitted => {
                    let q = fit_growth(om[0], om[1], du).unwrap_or(0.0);
                    if q + m_minus.abs() > 0.0 {
                        om[0] / (q + m_minus.abs())
                    } else {
                        om[0] / m_minus.abs()
                    }
                }
            };
            let i_minus = rule.exp_cum_lower(du, m_minus.abs() * du, om, i_minus_init);

            let i_plus = if k == 0 {
                // m_plus = 0; the upper integral is (4/pi) L12 including its tail
                l12.iter().map(|&v| 4.0 / PI * v).collect::<Vec<f64>>()
            } else {
                let tail = match opts.mode_tail {
                    ModeTail::Zero => 0.0,
                    ModeTail::Fitted => {
                        let q = fit_growth(om[nr - 1], om[nr - 2], du).unwrap_or(0.0);
                        if m_plus + q > 0.0 {
                            om[nr - 1] / (m_plus + q)
                        } else {
                            om[nr - 1] / m_plus
                        }
                    }
                };
                rule.exp_cum_upper(du, m_plus * du, om, tail)
            };

            let denom = 4.0 * n * alpha;
            let mut psi = vec![0.0; nr];
            let mut dpsi = vec![0.0; nr];
            let mut d2psi = vec![0.0; nr];
            for i in 0..nr {
                psi[i] = (i_plus[i] + i_minus[i]) / denom;
                dpsi[i] = (m_plus * i_plus[i] + m_minus * i_minus[i]) / denom;
                d2psi[i] = (m_plus * m_plus * i_plus[i]
                    + m_minus * m_minus * i_minus[i]
                    + (m_minus - m_plus) * om[i])
                    / denom;
            }
            (psi, dpsi, d2psi)
        })
        .collect();

    let mut psi_n = Vec::with_capacity(n_modes);
    let mut dpsi_n = Vec::with_capacity(n_modes);
    let mut d2psi_n = Vec::with_capacity(n_modes);
    for (p, d, d2) in mode_sol {
        psi_n.push(p);
        dpsi_n.push(d);
        d2psi_n.push(d2);
    }

    // star coefficient of n = 1 and the radial correction
    let psi_star1: Vec<f64> = (0..nr)
        .map(|i| psi_n[0][i] - l12[i] / (PI * alpha))
        .collect();
    let g_bar: Vec<f64> = psi_star1.iter().map(|&v| -v).collect();

    let mut psi = ScalarField::zeros(nr, grid.nb());
    let mut psi_star = ScalarField::zeros(nr, grid.nb());
    for j in 0..grid.nb() {
        let b = grid.b_nodes[j];
        for i in 0..nr {
            let mut acc = 0.0;
            for (k, pk) in psi_n.iter().enumerate() {
                acc += pk[i] * (2.0 * (k + 1) as f64 * b).sin();
            }
            psi.set(i, j, acc);
            psi_star.set(i, j, acc - (2.0 * b).sin() * l12[i] / (PI * alpha));
        }
    }

    StreamSolution {
        psi,
        psi_star,
        l12,
        l12_zero,
        g_bar,
        modes: ModalData { psi_n, dpsi_n, d2psi_n, omega_n, psi_star1 },
    }
}

/// Residual of the n = 1 mode equation under order-8 differencing of the
/// stored coefficient; interior nodes only. The zero-order term drops out for
/// n = 1, so this checks the accumulated integrals and the L12 splice at once.
pub fn orthogonality_residual(grid: &Grid, sol: &StreamSolution) -> f64 {
    let alpha = grid.alpha;
    let p1 = &sol.modes.psi_n[0];
    let d1 = grid.d_w_radial(p1);
    let d2 = grid.d_w_radial(&d1);
    let mut worst = 0.0f64;
    for i in 4..grid.nr() - 4 {
        let res = -alpha * alpha * (d2[i] - d1[i]) - alpha * (4.0 + alpha) * d1[i]
            - sol.modes.omega_n[0][i];
        worst = worst.max(res.abs());
    }
    worst
}

/// Max residual of every mode equation under order-8 differencing, interior
/// nodes only; index k is mode n = k+1.
pub fn mode_residuals(grid: &Grid, sol: &StreamSolution) -> Vec<f64> {
    let alpha = grid.alpha;
    (0..sol.modes.n_modes())
        .map(|k| {
            let n = (k + 1) as f64;
            let pk = &sol.modes.psi_n[k];
            let d1 = grid.d_w_radial(pk);
            let d2 = grid.d_w_radial(&d1);
            let mut worst = 0.0f64;
            for i in 4..grid.nr() - 4 {
                let res = -alpha * alpha * (d2[i] - d1[i])
                    - alpha * (4.0 + alpha) * d1[i]
                    + (4.0 * n * n - 4.0) * pk[i]
                    - sol.modes.omega_n[k][i];
                worst = worst.max(res.abs());
            }
            worst
        })
        .collect()
}

/// Pointwise velocity data assembled from a stream solution.
///
/// The pure second angular derivative is not summed mode by mode; it is
/// recovered from the defining relation with the nodal source, which keeps the
/// slowly decaying part of the source spectrum out of the assembly.
#[derive(Debug, Clone)]
pub struct VelocityPack {
    pub u_tilde: ScalarField,
    pub v_tilde: ScalarField,
    pub u_x: ScalarField,
    pub u_y: ScalarField,
    pub v_x: ScalarField,
    pub v_y: ScalarField,
    /// u_x plus (2/(pi alpha)) L12: the part beyond the leading column.
    pub u_x_lower: ScalarField,
    pub u_tilde_star: ScalarField,
    pub v_tilde_star: ScalarField,
    pub l12: Vec<f64>,
}

struct ModeSums {
    p: f64,
    dp: f64,
    d2p: f64,
    b: f64,
    db: f64,
}

fn sums_at(modes: &ModalData, i: usize, b: f64) -> ModeSums {
    let mut s = ModeSums { p: 0.0, dp: 0.0, d2p: 0.0, b: 0.0, db: 0.0 };
    for k in 0..modes.n_modes() {
        let tn = 2.0 * (k + 1) as f64;
        let (sin_n, cos_n) = (tn * b).sin_cos();
        s.p += modes.psi_n[k][i] * sin_n;
        s.dp += modes.dpsi_n[k][i] * sin_n;
        s.d2p += modes.d2psi_n[k][i] * sin_n;
        s.b += tn * modes.psi_n[k][i] * cos_n;
        s.db += tn * modes.dpsi_n[k][i] * cos_n;
    }
    s
}

pub fn velocity(grid: &Grid, omega: &ScalarField, sol: &StreamSolution) -> VelocityPack {
    let alpha = grid.alpha;
    let nr = grid.nr();
    let nb = grid.nb();
    let mut pack = VelocityPack {
        u_tilde: ScalarField::zeros(nr, nb),
        v_tilde: ScalarField::zeros(nr, nb),
        u_x: ScalarField::zeros(nr, nb),
        u_y: ScalarField::zeros(nr, nb),
        v_x: ScalarField::zeros(nr, nb),
        v_y: ScalarField::zeros(nr, nb),
        u_x_lower: ScalarField::zeros(nr, nb),
        u_tilde_star: ScalarField::zeros(nr, nb),
        v_tilde_star: ScalarField::zeros(nr, nb),
        l12: sol.l12.clone(),
    };
    for j in 0..nb {
        let beta = grid.b_nodes[j];
        let (sb, cb) = beta.sin_cos();
        let (s2, c2) = (2.0 * beta).sin_cos();
        for i in 0..nr {
            let s = sums_at(&sol.modes, i, beta);
            let lead = sol.l12[i] / (PI * alpha);
            // ∂_bb psi from the stream relation and the nodal source
            let p2 = -omega.get(i, j) - 4.0 * s.p
                - alpha * alpha * (s.d2p - s.dp)
                - alpha * (4.0 + alpha) * s.dp;
            let p_star = s.p - s2 * lead;
            let b_star = s.b - 2.0 * c2 * lead;
            let p2_star = p2 + 4.0 * s2 * lead;

            pack.u_tilde
                .set(i, j, -2.0 * sb * s.p - alpha * sb * s.dp - cb * s.b);
            pack.v_tilde
                .set(i, j, 2.0 * cb * s.p + alpha * cb * s.dp - sb * s.b);
            let ux = -0.5 * alpha * alpha * s2 * s.d2p
                - alpha * s2 * s.dp
                - c2 * s.b
                - alpha * c2 * s.db
                + 0.5 * s2 * p2;
            pack.u_x.set(i, j, ux);
            pack.v_y.set(i, j, -ux);
            pack.u_y.set(
                i,
                j,
                -alpha * (1.0 + 2.0 * sb * sb) * s.dp
                    - alpha * s2 * s.db
                    - s2 * s.b
                    - 2.0 * s.p
                    - alpha * alpha * sb * sb * s.d2p
                    - cb * cb * p2,
            );
            pack.v_x.set(
                i,
                j,
                alpha * (1.0 + 2.0 * cb * cb) * s.dp
                    - alpha * s2 * s.db
                    - s2 * s.b
                    + 2.0 * s.p
                    + alpha * alpha * cb * cb * s.d2p
                    + sb * sb * p2,
            );
            pack.u_x_lower.set(
                i,
                j,
                -0.5 * alpha * alpha * s2 * s.d2p
                    - alpha * s2 * s.dp
                    - alpha * c2 * s.db
                    - c2 * b_star
                    + 0.5 * s2 * p2_star,
            );
            pack.u_tilde_star
                .set(i, j, -2.0 * sb * p_star - cb * b_star - alpha * sb * s.dp);
            pack.v_tilde_star
                .set(i, j, 2.0 * cb * p_star - sb * b_star + alpha * cb * s.dp);
        }
    }
    pack
}

/// Coefficients of the advection operator in (D_R, D_beta) form, with the
/// leading column split off.
#[derive(Debug, Clone)]
pub struct TransportCoeffs {
    pub alpha: f64,
    /// Coefficient of D_R.
    pub a_r: ScalarField,
    /// Coefficient of D_beta: (2 psi + alpha D_R psi) / sin(2 beta), summed in
    /// the Chebyshev form that never divides by the sine.
    pub t_db: ScalarField,
    /// Radial leading factor: 2 L12 / (pi alpha) multiplying D_beta.
    pub lead: Vec<f64>,
    /// D_R coefficient of the remainder operator.
    pub star_dr: ScalarField,
    /// D_beta coefficient of the remainder operator.
    pub star_db: ScalarField,
}

pub fn transport_coeffs(grid: &Grid, sol: &StreamSolution) -> TransportCoeffs {
    let alpha = grid.alpha;
    let nr = grid.nr();
    let nb = grid.nb();
    let n_modes = sol.modes.n_modes();
    let mut a_r = ScalarField::zeros(nr, nb);
    let mut t_db = ScalarField::zeros(nr, nb);
    let mut star_dr = ScalarField::zeros(nr, nb);
    let mut star_db = ScalarField::zeros(nr, nb);
    for j in 0..nb {
        let beta = grid.b_nodes[j];
        let x = (2.0 * beta).cos();
        for i in 0..nr {
            let lead = sol.l12[i] / (PI * alpha);
            // Chebyshev U_{n-1}(cos 2b) recurrence alongside the mode loop
            let mut u_prev = 0.0;
            let mut u_cur = 1.0;
            let mut b_sum = 0.0;
            let mut t_sum = 0.0;
            let mut t_star_sum = 0.0;
            for k in 0..n_modes {
                let tn = 2.0 * (k + 1) as f64;
                let cos_n = (tn * beta).cos();
                b_sum += tn * sol.modes.psi_n[k][i] * cos_n;
                let coef = 2.0 * sol.modes.psi_n[k][i] + alpha * sol.modes.dpsi_n[k][i];
                t_sum += coef * u_cur;
                let star_coef = if k == 0 {
                    2.0 * sol.modes.psi_star1[i] + alpha * sol.modes.dpsi_n[k][i]
                } else {
                    coef
                };
                t_star_sum += star_coef * u_cur;
                let u_next = 2.0 * x * u_cur - u_prev;
                u_prev = u_cur;
                u_cur = u_next;
            }
            a_r.set(i, j, -alpha * b_sum);
            t_db.set(i, j, t_sum);
            star_dr.set(i, j, -alpha * (b_sum - 2.0 * x * lead) - 2.0 * x / PI * sol.l12[i]);
            star_db.set(i, j, t_star_sum);
        }
    }
    TransportCoeffs {
        alpha,
        a_r,
        t_db,
        lead: sol.l12.iter().map(|&v| 2.0 * v / (PI * alpha)).collect(),
        star_dr,
        star_db,
    }
}

impl TransportCoeffs {
    /// u·∇f from the derivative pair (D_R f, D_beta f).
    pub fn apply(&self, d_r_f: &ScalarField, d_b_f: &ScalarField) -> ScalarField {
        let mut out = ScalarField::zeros(d_r_f.nr, d_r_f.nb);
        for i in 0..out.nr {
            for j in 0..out.nb {
                out.set(
                    i,
                    j,
                    self.a_r.get(i, j) * d_r_f.get(i, j) + self.t_db.get(i, j) * d_b_f.get(i, j),
                );
            }
        }
        out
    }

    /// The remainder operator applied to the derivative pair.
    pub fn apply_star(&self, d_r_f: &ScalarField, d_b_f: &ScalarField) -> ScalarField {
        let mut out = ScalarField::zeros(d_r_f.nr, d_r_f.nb);
        for i in 0..out.nr {
            for j in 0..out.nb {
                out.set(
                    i,
                    j,
                    self.star_dr.get(i, j) * d_r_f.get(i, j)
                        + self.star_db.get(i, j) * d_b_f.get(i, j),
                );
            }
        }
        out
    }

    /// The leading column: (2/(pi alpha)) L12 D_beta f.
    pub fn apply_lead(&self, d_b_f: &ScalarField) -> ScalarField {
        let mut out = ScalarField::zeros(d_b_f.nr, d_b_f.nb);
        for i in 0..out.nr {
            for j in 0..out.nb {
                out.set(i, j, self.lead[i] * d_b_f.get(i, j));
            }
        }
        out
    }

    /// Raw angular advection speed (coefficient of ∂_beta), for step control.
    pub fn beta_speed(&self, grid: &Grid) -> ScalarField {
        let mut out = ScalarField::zeros(self.t_db.nr, self.t_db.nb);
        for i in 0..out.nr {
            for j in 0..out.nb {
                out.set(i, j, self.t_db.get(i, j) * (2.0 * grid.b_nodes[j]).sin());
            }
        }
        out
    }
}
