//! Time integration in the dynamic-rescaling frame: the leading-order system,
//! the full system in (R, beta) with its normalization conditions, the
//! residual of the approximate steady state, and blowup-time reconstruction
//! from a trajectory of scaling exponents.
//!
//! Two evolution forms are offered. The total form steps (Omega, eta, xi)
//! directly with frozen scaling exponents, which is the right tool for
//! unrescaled runs and scaling checks. The perturbation form steps the
//! deviation from the steady profile with the exponents recomputed from the
//! normalization condition; it keeps the small fields small instead of
//! recovering them from a cancellation of order-one totals.

use crate::field::ScalarField;
use crate::grid::Grid;
use crate::linop::{
    self, apply_linearized, apply_linearized_upwind, energy_at_c, nonlocal_terms, EnergyParams,
    FieldBundle, LinState, LinopError, ProfileOperator,
};
use crate::profiles::{c_closed, SteadyProfile};
use crate::quad::gauss_legendre;
use crate::stream::{
    l12_radial, solve_stream, transport_coeffs, velocity, L12Tail, ModeTail, StreamError,
    StreamOpts, TransportCoeffs,
};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynError {
    #[error("dynamics: {0}")]
    BadParam(&'static str),
    #[error("dynamics: non-finite state at tau = {0}")]
    NonFinite(f64),
    #[error("dynamics: step {dt:.3e} exceeds the transport limit {limit:.3e} at tau = {tau:.3}")]
    Cfl { dt: f64, limit: f64, tau: f64 },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Linop(#[from] LinopError),
}

/// Stencil family for the transport derivatives. The upwind-biased stencils
/// are the stable choice for stepping; the centered order-8 stencils match
/// the diagnostic operator applications exactly and are fine on short
/// horizons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Upwind,
    Central,
}

fn fill(nr: usize, nb: usize, f: impl Fn(usize, usize) -> f64) -> ScalarField {
    let mut out = ScalarField::zeros(nr, nb);
    for i in 0..nr {
        for j in 0..nb {
            out.set(i, j, f(i, j));
        }
    }
    out
}

fn bundle(grid: &Grid, f: &ScalarField, scheme: Scheme) -> FieldBundle {
    match scheme {
        Scheme::Central => FieldBundle::numeric(grid, f.clone()),
        Scheme::Upwind => {
            FieldBundle::analytic(f.clone(), grid.d_r_upwind(f), grid.d_beta_upwind(f))
        }
    }
}

/// Stream options shared by every solve on a profile-bearing source: full
/// mode budget and the power-law tail the profile decays with.
fn profile_stream_opts() -> StreamOpts {
    StreamOpts {
        n_modes: None,
        l12_tail: L12Tail::PowerLaw { p: 1.0 },
        mode_tail: ModeTail::Fitted,
    }
}

/// Fields in the rescaled frame together with the scaling exponents applied
/// to them. The theta slot is an optional transported scalar riding the same
/// velocity, used to check conservation under pure transport.
#[derive(Debug, Clone)]
pub struct RescaledState {
    pub omega: ScalarField,
    pub eta: ScalarField,
    pub xi: ScalarField,
    pub theta: Option<ScalarField>,
    pub tau: f64,
    pub c_omega: f64,
    pub c_l: f64,
}

impl RescaledState {
    pub fn new(
        omega: ScalarField,
        eta: ScalarField,
        xi: ScalarField,
        c_omega: f64,
        c_l: f64,
    ) -> Result<RescaledState, DynError> {
        if omega.nr != eta.nr || omega.nb != eta.nb || omega.nr != xi.nr || omega.nb != xi.nb {
            return Err(DynError::BadParam("component shapes differ"));
        }
        if !(omega.all_finite() && eta.all_finite() && xi.all_finite()) {
            return Err(DynError::NonFinite(0.0));
        }
        if !(c_omega.is_finite() && c_l.is_finite()) {
            return Err(DynError::BadParam("scaling exponents must be finite"));
        }
        Ok(RescaledState { omega, eta, xi, theta: None, tau: 0.0, c_omega, c_l })
    }

    /// The unrescaled frame: both exponents zero.
    pub fn unrescaled(
        omega: ScalarField,
        eta: ScalarField,
        xi: ScalarField,
    ) -> Result<RescaledState, DynError> {
        RescaledState::new(omega, eta, xi, 0.0, 0.0)
    }

    /// The temperature exponent is not free: c_theta = c_l + 2 c_omega.
    pub fn c_theta(&self) -> f64 {
        self.c_l + 2.0 * self.c_omega
    }

    pub fn max_abs(&self) -> f64 {
        self.omega.max_abs().max(self.eta.max_abs()).max(self.xi.max_abs())
    }

    fn all_finite(&self) -> bool {
        self.omega.all_finite()
            && self.eta.all_finite()
            && self.xi.all_finite()
            && self.theta.as_ref().map_or(true, |t| t.all_finite())
    }

    fn axpy(&mut self, c: f64, d: &FullDeriv) {
        self.omega.axpy(c, &d.d_omega);
        self.eta.axpy(c, &d.d_eta);
        self.xi.axpy(c, &d.d_xi);
        if let (Some(t), Some(dt)) = (self.theta.as_mut(), d.d_theta.as_ref()) {
            t.axpy(c, dt);
        }
    }
}

/// Normalization condition fixing the scaling exponents from the
/// perturbation vorticity: c_omega = -(2/(pi alpha)) L12(Omega)(0) and
/// c_l = ((1 - alpha)/alpha) c_omega. Uses the same radial integral as the
/// linearized operator so every consumer sees one value.
pub fn normalization(grid: &Grid, pert_omega: &ScalarField) -> (f64, f64) {
    let nl = nonlocal_terms(grid, pert_omega, L12Tail::Zero);
    (nl.c_omega, nl.c_l(grid.alpha))
}

/// Right-hand side of the leading-order system. With `rescale = None` this is
/// the physical form Omega_t = eta, eta_t = (2/(pi alpha)) L12(Omega) eta;
/// with exponents supplied it picks up the reaction and radial stretching of
/// the rescaled frame.
pub fn leading_rhs(
    grid: &Grid,
    omega: &ScalarField,
    eta: &ScalarField,
    rescale: Option<(f64, f64)>,
    tail: L12Tail,
    scheme: Scheme,
) -> (ScalarField, ScalarField) {
    let alpha = grid.alpha;
    let (l12, _) = l12_radial(grid, omega, tail);
    let k: Vec<f64> = l12.iter().map(|&v| 2.0 / (PI * alpha) * v).collect();
    match rescale {
        None => {
            let d_eta = fill(eta.nr, eta.nb, |i, j| k[i] * eta.get(i, j));
            (eta.clone(), d_eta)
        }
        Some((c_omega, c_l)) => {
            let (dro, dre) = match scheme {
                Scheme::Central => (grid.d_r(omega), grid.d_r(eta)),
                Scheme::Upwind => (grid.d_r_upwind(omega), grid.d_r_upwind(eta)),
            };
            let acl = alpha * c_l;
            let d_omega = fill(omega.nr, omega.nb, |i, j| {
                c_omega * omega.get(i, j) + eta.get(i, j) - acl * dro.get(i, j)
            });
            let d_eta = fill(eta.nr, eta.nb, |i, j| {
                (2.0 * c_omega + k[i]) * eta.get(i, j) - acl * dre.get(i, j)
            });
            (d_omega, d_eta)
        }
    }
}

/// Fixed-step RK4 on the leading-order system.
pub fn evolve_leading(
    grid: &Grid,
    omega: &ScalarField,
    eta: &ScalarField,
    rescale: Option<(f64, f64)>,
    tail: L12Tail,
    scheme: Scheme,
    t_end: f64,
    dt: f64,
) -> Result<(ScalarField, ScalarField), DynError> {
    if !(dt > 0.0) || !(t_end >= dt) {
        return Err(DynError::BadParam("need 0 < dt <= t_end"));
    }
    let steps = (t_end / dt).round() as usize;
    let mut om = omega.clone();
    let mut et = eta.clone();
    let arg = |f: &ScalarField, d: &ScalarField, c: f64| {
        let mut g = f.clone();
        g.axpy(c, d);
        g
    };
    for k in 0..steps {
        let (o1, e1) = leading_rhs(grid, &om, &et, rescale, tail, scheme);
        let (o2, e2) = leading_rhs(
            grid,
            &arg(&om, &o1, 0.5 * dt),
            &arg(&et, &e1, 0.5 * dt),
            rescale,
            tail,
            scheme,
        );
        let (o3, e3) = leading_rhs(
            grid,
            &arg(&om, &o2, 0.5 * dt),
            &arg(&et, &e2, 0.5 * dt),
            rescale,
            tail,
            scheme,
        );
        let (o4, e4) =
            leading_rhs(grid, &arg(&om, &o3, dt), &arg(&et, &e3, dt), rescale, tail, scheme);
        for (f, k1, k2, k3, k4) in [(&mut om, o1, o2, o3, o4), (&mut et, e1, e2, e3, e4)] {
            f.axpy(dt / 6.0, &k1);
            f.axpy(dt / 3.0, &k2);
            f.axpy(dt / 3.0, &k3);
            f.axpy(dt / 6.0, &k4);
        }
        if !(om.all_finite() && et.all_finite()) {
            return Err(DynError::NonFinite((k + 1) as f64 * dt));
        }
    }
    Ok((om, et))
}

/// Assembly options for the total-field right-hand side.
#[derive(Debug, Clone, Copy)]
pub struct FullOpts {
    pub scheme: Scheme,
    pub l12_tail: L12Tail,
    /// Angular modes for the stream solve; None takes the solver default.
    pub n_modes: Option<usize>,
}

impl Default for FullOpts {
    fn default() -> Self {
        FullOpts {
            scheme: Scheme::Upwind,
            l12_tail: L12Tail::PowerLaw { p: 1.0 },
            n_modes: None,
        }
    }
}

impl FullOpts {
    fn stream_opts(&self) -> StreamOpts {
        StreamOpts {
            n_modes: self.n_modes,
            l12_tail: self.l12_tail,
            mode_tail: ModeTail::Fitted,
        }
    }
}

/// Derivative fields of a total-form evaluation plus the step-control data
/// extracted from the same velocity.
#[derive(Debug, Clone)]
pub struct FullDeriv {
    pub d_omega: ScalarField,
    pub d_eta: ScalarField,
    pub d_xi: ScalarField,
    pub d_theta: Option<ScalarField>,
    /// Largest stable step: min over nodes of spacing / |advection speed|.
    pub cfl_limit: f64,
}

fn cfl_limit_from(
    grid: &Grid,
    radial_speed: impl Fn(usize, usize) -> f64,
    beta_speed: &ScalarField,
) -> f64 {
    let mut limit = f64::INFINITY;
    let nb = grid.nb();
    for i in 0..grid.nr() {
        for j in 0..nb {
            let wr = radial_speed(i, j).abs();
            if wr > 0.0 {
                limit = limit.min(grid.dw / wr);
            }
            let below = if j == 0 {
                grid.b_nodes[0]
            } else {
                grid.b_nodes[j] - grid.b_nodes[j - 1]
            };
            let above = if j + 1 == nb {
                PI / 2.0 - grid.b_nodes[j]
            } else {
                grid.b_nodes[j + 1] - grid.b_nodes[j]
            };
            let db = below.min(above);
            let bs = beta_speed.get(i, j).abs();
            if bs > 0.0 {
                limit = limit.min(db / bs);
            }
        }
    }
    limit
}

/// Right-hand side of the full system on total fields with frozen exponents:
///
///   Omega_tau = c_omega Omega + eta - alpha c_l D_R Omega - u.grad Omega
///   eta_tau   = (2 c_omega - u_x) eta - v_x xi - alpha c_l D_R eta - u.grad eta
///   xi_tau    = (2 c_omega - v_y) xi - u_y eta - alpha c_l D_R xi - u.grad xi
///
/// and theta, when present, advected with reaction c_theta theta. One stream
/// solve per call.
pub fn full_rhs(
    grid: &Grid,
    state: &RescaledState,
    opts: &FullOpts,
) -> Result<FullDeriv, DynError> {
    let alpha = grid.alpha;
    let sol = solve_stream(grid, &state.omega, &opts.stream_opts())?;
    let pack = velocity(grid, &state.omega, &sol);
    let tc = transport_coeffs(grid, &sol);
    let acl = alpha * state.c_l;
    let cw = state.c_omega;
    let (nr, nb) = (state.omega.nr, state.omega.nb);

    let ob = bundle(grid, &state.omega, opts.scheme);
    let eb = bundle(grid, &state.eta, opts.scheme);
    let xb = bundle(grid, &state.xi, opts.scheme);
    let adv_o = tc.apply(&ob.d_r, &ob.d_b);
    let adv_e = tc.apply(&eb.d_r, &eb.d_b);
    let adv_x = tc.apply(&xb.d_r, &xb.d_b);

    let d_omega = fill(nr, nb, |i, j| {
        cw * state.omega.get(i, j) + state.eta.get(i, j) - acl * ob.d_r.get(i, j)
            - adv_o.get(i, j)
    });
    let d_eta = fill(nr, nb, |i, j| {
        (2.0 * cw - pack.u_x.get(i, j)) * state.eta.get(i, j)
            - pack.v_x.get(i, j) * state.xi.get(i, j)
            - acl * eb.d_r.get(i, j)
            - adv_e.get(i, j)
    });
    let d_xi = fill(nr, nb, |i, j| {
        (2.0 * cw - pack.v_y.get(i, j)) * state.xi.get(i, j)
            - pack.u_y.get(i, j) * state.eta.get(i, j)
            - acl * xb.d_r.get(i, j)
            - adv_x.get(i, j)
    });
    let d_theta = state.theta.as_ref().map(|theta| {
        let tb = bundle(grid, theta, opts.scheme);
        let adv_t = tc.apply(&tb.d_r, &tb.d_b);
        let ct = state.c_theta();
        fill(nr, nb, |i, j| ct * theta.get(i, j) - acl * tb.d_r.get(i, j) - adv_t.get(i, j))
    });

    let bs = tc.beta_speed(grid);
    let cfl_limit = cfl_limit_from(grid, |i, j| acl + tc.a_r.get(i, j), &bs);
    Ok(FullDeriv { d_omega, d_eta, d_xi, d_theta, cfl_limit })
}

/// Residual report of the approximate steady state: what the full right-hand
/// side leaves behind at the profile with its exact exponents.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub f_omega: ScalarField,
    pub f_eta: ScalarField,
    pub f_xi: ScalarField,
    /// H^3 norms: phi family for the vorticity pair, psi family for xi.
    pub h3_omega: f64,
    pub h3_eta: f64,
    pub h3_xi: f64,
    /// Log-log slope of max_beta |F_Omega| against R over the fit window.
    pub small_r_slope: f64,
}

/// Radial window of the small-R slope fit.
pub const SLOPE_FIT_WINDOW: (f64, f64) = (1e-3, 0.1);

/// Steady-state residual, assembled in the cancelled form so the order-one
/// pieces that drop analytically never enter:
///
///   F_Omega = -3 alpha D_R Omega_bar - ubar.grad Omega_bar
///   F_eta   = -(u_x_bar + 3/(1+R)) eta_bar - v_x_bar xi_bar
///             - 3 alpha D_R eta_bar - ubar.grad eta_bar
///   F_xi    = (-2 - 3/(1+R) + (u_x_bar + 3/(1+R))) xi_bar - u_y_bar eta_bar
///             - (1 + 3 alpha) D_R xi_bar - ubar.grad xi_bar
///
/// with the stored analytic profile derivatives throughout.
pub fn residual(grid: &Grid, profile: &SteadyProfile) -> Result<ResidualReport, DynError> {
    let alpha = grid.alpha;
    let (nr, nb) = (grid.nr(), grid.nb());
    let sol = solve_stream(grid, &profile.omega, &profile_stream_opts())?;
    let pack = velocity(grid, &profile.omega, &sol);
    let tc = transport_coeffs(grid, &sol);

    let adv_o = tc.apply(&profile.d_r_omega, &profile.d_b_omega);
    let adv_e = tc.apply(&profile.d_r_eta, &profile.d_b_eta);
    let adv_x = tc.apply(&profile.d_r_xi, &profile.d_b_xi);

    let f_omega = fill(nr, nb, |i, j| {
        -3.0 * alpha * profile.d_r_omega.get(i, j) - adv_o.get(i, j)
    });
    let f_eta = fill(nr, nb, |i, j| {
        -pack.u_x_lower.get(i, j) * profile.eta.get(i, j)
            - pack.v_x.get(i, j) * profile.xi.get(i, j)
            - 3.0 * alpha * profile.d_r_eta.get(i, j)
            - adv_e.get(i, j)
    });
    let f_xi = fill(nr, nb, |i, j| {
        let r = grid.r_nodes[i];
        (-2.0 - 3.0 / (1.0 + r) + pack.u_x_lower.get(i, j)) * profile.xi.get(i, j)
            - pack.u_y.get(i, j) * profile.eta.get(i, j)
            - (1.0 + 3.0 * alpha) * profile.d_r_xi.get(i, j)
            - adv_x.get(i, j)
    });
    for f in [&f_omega, &f_eta, &f_xi] {
        if !f.all_finite() {
            return Err(DynError::NonFinite(0.0));
        }
    }

    let h3 =
        |f: &ScalarField, family| linop::norm(grid, f, linop::NormKind::Hm { m: 3, family });
    let h3_omega = h3(&f_omega, linop::WeightFamily::Phi);
    let h3_eta = h3(&f_eta, linop::WeightFamily::Phi);
    let h3_xi = h3(&f_xi, linop::WeightFamily::Psi);

    let mut pts = Vec::new();
    for i in 0..nr {
        let r = grid.r_nodes[i];
        if r < SLOPE_FIT_WINDOW.0 || r > SLOPE_FIT_WINDOW.1 {
            continue;
        }
        let m = (0..nb).map(|j| f_omega.get(i, j).abs()).fold(0.0f64, f64::max);
        if m > 0.0 {
            pts.push((r.ln(), m.ln()));
        }
    }
    let small_r_slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        f64::NAN
    };

    Ok(ResidualReport { f_omega, f_eta, f_xi, h3_omega, h3_eta, h3_xi, small_r_slope })
}

/// Frozen data for stepping the perturbation form: the linearization around
/// the profile, its residual forcing, and the profile advection speeds for
/// step control.
#[derive(Debug)]
pub struct PerturbationSystem {
    pub op: ProfileOperator,
    pub residual: ResidualReport,
    bar_tc: TransportCoeffs,
}

impl PerturbationSystem {
    pub fn build(grid: &Grid, profile: &SteadyProfile) -> Result<PerturbationSystem, DynError> {
        let op = ProfileOperator::build(grid, profile)?;
        let res = residual(grid, profile)?;
        let sol = solve_stream(grid, &profile.omega, &profile_stream_opts())?;
        let bar_tc = transport_coeffs(grid, &sol);
        Ok(PerturbationSystem { op, residual: res, bar_tc })
    }
}

/// Scaling data of one perturbation-form evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PertInfo {
    /// Total exponents: profile values plus the normalization response.
    pub c_omega_total: f64,
    pub c_l_total: f64,
    pub cfl_limit: f64,
}

/// Right-hand side of the perturbation form: linearized operator plus the
/// steady-state residual plus the quadratic terms of the perturbation's own
/// velocity and exponents.
pub fn perturbation_rhs(
    grid: &Grid,
    profile: &SteadyProfile,
    sys: &PerturbationSystem,
    pert: &LinState,
    scheme: Scheme,
) -> Result<(LinState, PertInfo), DynError> {
    let alpha = grid.alpha;
    let mut out = match scheme {
        Scheme::Central => apply_linearized(grid, profile, &sys.op, pert)?,
        Scheme::Upwind => apply_linearized_upwind(grid, profile, &sys.op, pert)?,
    };

    let nl = nonlocal_terms(grid, &pert.omega, L12Tail::Zero);
    let cw = nl.c_omega;
    let cl = nl.c_l(alpha);
    let acl = alpha * cl;
    let sol = solve_stream(grid, &pert.omega, &StreamOpts::for_perturbation(grid.nb()))?;
    let pack = velocity(grid, &pert.omega, &sol);
    let tc = transport_coeffs(grid, &sol);

    let ob = bundle(grid, &pert.omega, scheme);
    let eb = bundle(grid, &pert.eta, scheme);
    let xb = bundle(grid, &pert.xi, scheme);
    let adv_o = tc.apply(&ob.d_r, &ob.d_b);
    let adv_e = tc.apply(&eb.d_r, &eb.d_b);
    let adv_x = tc.apply(&xb.d_r, &xb.d_b);

    for i in 0..grid.nr() {
        for j in 0..grid.nb() {
            let n1 = cw * pert.omega.get(i, j) - acl * ob.d_r.get(i, j) - adv_o.get(i, j);
            let n2 = (2.0 * cw - pack.u_x.get(i, j)) * pert.eta.get(i, j)
                - pack.v_x.get(i, j) * pert.xi.get(i, j)
                - acl * eb.d_r.get(i, j)
                - adv_e.get(i, j);
            let n3 = (2.0 * cw - pack.v_y.get(i, j)) * pert.xi.get(i, j)
                - pack.u_y.get(i, j) * pert.eta.get(i, j)
                - acl * xb.d_r.get(i, j)
                - adv_x.get(i, j);
            out.omega.set(i, j, out.omega.get(i, j) + sys.residual.f_omega.get(i, j) + n1);
            out.eta.set(i, j, out.eta.get(i, j) + sys.residual.f_eta.get(i, j) + n2);
            out.xi.set(i, j, out.xi.get(i, j) + sys.residual.f_xi.get(i, j) + n3);
        }
    }
    if !out.all_finite() {
        return Err(DynError::NonFinite(0.0));
    }

    let acl_total = alpha * (profile.c_l + cl);
    let bar_bs = sys.bar_tc.beta_speed(grid);
    let pert_bs = tc.beta_speed(grid);
    let bs = fill(grid.nr(), grid.nb(), |i, j| bar_bs.get(i, j) + pert_bs.get(i, j));
    let cfl_limit = cfl_limit_from(
        grid,
        |i, j| acl_total + sys.bar_tc.a_r.get(i, j) + tc.a_r.get(i, j),
        &bs,
    );
    Ok((
        out,
        PertInfo {
            c_omega_total: profile.c_omega + cw,
            c_l_total: profile.c_l + cl,
            cfl_limit,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Safety factor against the measured transport limit.
    pub cfl: f64,
    /// Row cadence in tau.
    pub output_every: f64,
    pub scheme: Scheme,
    pub l12_tail: L12Tail,
    pub n_modes: Option<usize>,
    pub energy: EnergyParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dt: 0.02,
            t_end: 20.0,
            cfl: 0.5,
            output_every: 0.1,
            scheme: Scheme::Upwind,
            l12_tail: L12Tail::PowerLaw { p: 1.0 },
            n_modes: None,
            energy: EnergyParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunStatus {
    Completed,
    /// A step produced a non-finite value; the trajectory and returned state
    /// stop at the last good step.
    AbortedNonFinite { tau: f64 },
}

#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub tau: f64,
    pub c_omega: f64,
    pub c_l: f64,
    pub e0: f64,
    pub e3: f64,
    pub l12_zero: f64,
    /// Largest radius where any field still exceeds 1e-10 of its sup.
    pub support_radius: f64,
    /// exp(int_0^tau c_omega).
    pub c_omega_factor: f64,
    /// exp(-int_0^tau c_l).
    pub c_l_factor: f64,
    /// Physical time t(tau) = int_0^tau C_omega.
    pub t_of_tau: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    pub status: RunStatus,
}

impl Trajectory {
    /// (tau, c_omega) samples for blowup-time reconstruction.
    pub fn c_samples(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.tau, r.c_omega)).collect()
    }

    /// Worst relative gap between the stored integrated factors and a
    /// recomputation from the stored exponent rows.
    pub fn factor_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        let mut a_cw = 0.0;
        let mut a_cl = 0.0;
        for k in 1..self.rows.len() {
            let p = &self.rows[k - 1];
            let q = &self.rows[k];
            let h = q.tau - p.tau;
            a_cw += 0.5 * h * (p.c_omega + q.c_omega);
            a_cl += 0.5 * h * (p.c_l + q.c_l);
            worst = worst.max((a_cw.exp() - q.c_omega_factor).abs() / q.c_omega_factor);
            worst = worst.max(((-a_cl).exp() - q.c_l_factor).abs() / q.c_l_factor);
        }
        worst
    }

    /// Columnar text: tau, c_omega, c_l, E0, E3, l12_zero, t_of_tau.
    pub fn emit(&self) -> String {
        let mut s = String::from("# tau c_omega c_l e0 e3 l12_zero t_of_tau\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
                r.tau, r.c_omega, r.c_l, r.e0, r.e3, r.l12_zero, r.t_of_tau
            ));
        }
        s
    }
}

fn support_radius(grid: &Grid, fields: [&ScalarField; 3]) -> f64 {
    let sup = fields.iter().map(|f| f.max_abs()).fold(0.0f64, f64::max);
    if sup == 0.0 {
        return 0.0;
    }
    let mut out = 0.0;
    for i in 0..grid.nr() {
        let row_max = fields
            .iter()
            .flat_map(|f| (0..grid.nb()).map(move |j| f.get(i, j).abs()))
            .fold(0.0f64, f64::max);
        if row_max > 1e-10 * sup {
            out = grid.r_nodes[i];
        }
    }
    out
}

/// One step of the factor accumulators. The exponent runs linearly from cw0
/// to cw1 over the step, so its integral is quadratic in the substep time;
/// the physical-time increment integrates exp of that quadratic with a
/// 5-point Gauss rule.
fn advance_factors(a_cw: f64, cw0: f64, cw1: f64, h: f64) -> (f64, f64) {
    let slope = (cw1 - cw0) / h;
    let (nodes, weights) = gauss_legendre(5);
    let mut t_inc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        let s = 0.5 * h * (x + 1.0);
        let a = a_cw + cw0 * s + 0.5 * slope * s * s;
        t_inc += w * 0.5 * h * a.exp();
    }
    (a_cw + 0.5 * h * (cw0 + cw1), t_inc)
}

/// Integrate the full system. With a profile the state holds perturbation
/// fields and the exponents are recomputed from the normalization each
/// evaluation; without one the state holds total fields and the exponents
/// stay frozen at their initial values. Returns the trajectory and the final
/// state (the last good state on abort).
pub fn run(
    grid: &Grid,
    profile: Option<&SteadyProfile>,
    init: &RescaledState,
    cfg: &RunConfig,
) -> Result<(Trajectory, RescaledState), DynError> {
    if !(cfg.dt > 0.0) || !(cfg.t_end >= cfg.dt) {
        return Err(DynError::BadParam("need 0 < dt <= t_end"));
    }
    if !(cfg.cfl > 0.0) {
        return Err(DynError::BadParam("cfl factor must be positive"));
    }
    if profile.is_some() && init.theta.is_some() {
        return Err(DynError::BadParam(
            "theta transport is only available on total-field runs",
        ));
    }
    let full_opts =
        FullOpts { scheme: cfg.scheme, l12_tail: cfg.l12_tail, n_modes: cfg.n_modes };
    let sys = match profile {
        Some(p) => Some(PerturbationSystem::build(grid, p)?),
        None => None,
    };
    let energy_c = profile.map(|p| p.c).unwrap_or_else(|| c_closed(grid.alpha));

    // derivative plus (c_omega, c_l) at a state; the limit rides the deriv
    let eval = |s: &RescaledState| -> Result<(FullDeriv, f64, f64), DynError> {
        match (profile, sys.as_ref()) {
            (Some(p), Some(sy)) => {
                let pert = LinState::new(s.omega.clone(), s.eta.clone(), s.xi.clone())?;
                let (d, info) = perturbation_rhs(grid, p, sy, &pert, cfg.scheme)?;
                let fd = FullDeriv {
                    d_omega: d.omega,
                    d_eta: d.eta,
                    d_xi: d.xi,
                    d_theta: None,
                    cfl_limit: info.cfl_limit,
                };
                Ok((fd, info.c_omega_total, info.c_l_total))
            }
            _ => {
                let d = full_rhs(grid, s, &full_opts)?;
                Ok((d, s.c_omega, s.c_l))
            }
        }
    };

    let steps = (cfg.t_end / cfg.dt).round().max(1.0) as usize;
    let mut state = init.clone();
    state.tau = 0.0;
    let mut status = RunStatus::Completed;
    let mut rows = Vec::new();
    let mut a_cw = 0.0f64;
    let mut a_cl = 0.0f64;
    let mut t_of_tau = 0.0f64;

    let make_row =
        |s: &RescaledState, a_cw: f64, a_cl: f64, t: f64| -> Result<TrajectoryRow, DynError> {
            let lin = LinState::new(s.omega.clone(), s.eta.clone(), s.xi.clone())?;
            let rep = energy_at_c(grid, energy_c, &lin, &cfg.energy)?;
            Ok(TrajectoryRow {
                tau: s.tau,
                c_omega: s.c_omega,
                c_l: s.c_l,
                e0: rep.e0,
                e3: rep.e3,
                l12_zero: rep.l12_zero,
                support_radius: support_radius(grid, [&s.omega, &s.eta, &s.xi]),
                c_omega_factor: a_cw.exp(),
                c_l_factor: (-a_cl).exp(),
                t_of_tau: t,
            })
        };

    let mut pending = eval(&state)?;
    state.c_omega = pending.1;
    state.c_l = pending.2;
    rows.push(make_row(&state, a_cw, a_cl, t_of_tau)?);
    let mut next_out = cfg.output_every.max(cfg.dt);

    for k in 0..steps {
        let (k1, cw0, cl0) = pending;
        if cfg.dt > cfg.cfl * k1.cfl_limit {
            return Err(DynError::Cfl {
                dt: cfg.dt,
                limit: cfg.cfl * k1.cfl_limit,
                tau: state.tau,
            });
        }
        let h = cfg.dt;
        let mut s2 = state.clone();
        s2.axpy(0.5 * h, &k1);
        let (k2, ..) = eval(&s2)?;
        let mut s3 = state.clone();
        s3.axpy(0.5 * h, &k2);
        let (k3, ..) = eval(&s3)?;
        let mut s4 = state.clone();
        s4.axpy(h, &k3);
        let (k4, ..) = eval(&s4)?;

        let mut next = state.clone();
        next.axpy(h / 6.0, &k1);
        next.axpy(h / 3.0, &k2);
        next.axpy(h / 3.0, &k3);
        next.axpy(h / 6.0, &k4);
        next.tau = (k + 1) as f64 * h;
        if !next.all_finite() {
            status = RunStatus::AbortedNonFinite { tau: next.tau };
            break;
        }
        pending = eval(&next)?;
        next.c_omega = pending.1;
        next.c_l = pending.2;
        let (a_new, t_inc) = advance_factors(a_cw, cw0, next.c_omega, h);
        a_cw = a_new;
        t_of_tau += t_inc;
        a_cl += 0.5 * h * (cl0 + next.c_l);
        state = next;

        if state.tau + 1e-12 >= next_out || k + 1 == steps {
            rows.push(make_row(&state, a_cw, a_cl, t_of_tau)?);
            while next_out <= state.tau + 1e-12 {
                next_out += cfg.output_every.max(cfg.dt);
            }
        }
    }
    if rows.last().map(|r| r.tau) != Some(state.tau) {
        rows.push(make_row(&state, a_cw, a_cl, t_of_tau)?);
    }
    Ok((Trajectory { rows, status }, state))
}

/// Blowup-time reconstruction from sampled scaling exponents.
#[derive(Debug, Clone)]
pub struct BlowupReport {
    /// Finite blowup time when the exponent stays negative; None is the
    /// no-blowup diagnosis.
    pub t_star: Option<f64>,
    pub sup_c_omega: f64,
    /// Exponent used for the tail beyond the last sample.
    pub tail_rate: f64,
    /// The quadrature part up to the last sample.
    pub truncated: f64,
    /// Rescaled-amplitude growth alpha int_0^tau C_omega^{-1}.
    pub m_of_tau: Vec<(f64, f64)>,
}

/// T* = int_0^infty exp(int_0^tau c_omega) dtau from samples of c_omega:
/// per-segment Gauss quadrature on the exact piecewise-linear exponent plus
/// an exponential tail at the trailing rate.
pub fn blowup_time(samples: &[(f64, f64)], alpha: f64) -> Result<BlowupReport, DynError> {
    if samples.len() < 2 {
        return Err(DynError::BadParam("need at least two exponent samples"));
    }
    for w in samples.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(DynError::BadParam("sample times must increase"));
        }
    }
    let sup = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let (nodes, weights) = gauss_legendre(5);
    let mut a = 0.0f64;
    let mut forward = 0.0f64;
    let mut inverse = 0.0f64;
    let mut m_of_tau = vec![(samples[0].0, 0.0)];
    for w in samples.windows(2) {
        let (_, c0) = w[0];
        let (t1, c1) = w[1];
        let h = t1 - w[0].0;
        let slope = (c1 - c0) / h;
        for (x, wt) in nodes.iter().zip(&weights) {
            let s = 0.5 * h * (x + 1.0);
            let e = a + c0 * s + 0.5 * slope * s * s;
            forward += wt * 0.5 * h * e.exp();
            inverse += wt * 0.5 * h * (-e).exp();
        }
        a += 0.5 * h * (c0 + c1);
        m_of_tau.push((t1, alpha * inverse));
    }
    if sup >= 0.0 {
        return Ok(BlowupReport {
            t_star: None,
            sup_c_omega: sup,
            tail_rate: sup,
            truncated: forward,
            m_of_tau,
        });
    }
    let n_tail = (samples.len() / 10).max(2);
    let tail_rate =
        samples[samples.len() - n_tail..].iter().map(|s| s.1).sum::<f64>() / n_tail as f64;
    let remainder = a.exp() * (-1.0 / tail_rate);
    Ok(BlowupReport {
        t_star: Some(forward + remainder),
        sup_c_omega: sup,
        tail_rate,
        truncated: forward,
        m_of_tau,
    })
}
