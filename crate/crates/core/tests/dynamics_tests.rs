use rblab_core::dynamics::{
    blowup_time, evolve_leading, full_rhs, leading_rhs, normalization, perturbation_rhs,
    residual, run, DynError, FullOpts, PerturbationSystem, RescaledState, RunConfig, RunStatus,
    Scheme,
};
use rblab_core::field::ScalarField;
use rblab_core::grid::{build_grid, Grid, Spacing};
use rblab_core::linop::{apply_full, l12_at_origin, LinState};
use rblab_core::profiles::{approx_steady_state, approx_steady_state_flat_gamma};
use rblab_core::stream::{
    solve_stream, transport_coeffs, velocity, L12Tail, ModeTail, StreamOpts,
};

fn envelope(r: f64) -> f64 {
    let v = r / (1.0 + r);
    v * v * (1.0 - v) * (1.0 - v)
}

/// Smooth low-mode perturbation triple: angular content within the first
/// four sine modes so short-mode stream solves carry it exactly.
fn low_mode_state(grid: &Grid, amp: f64) -> LinState {
    let omega =
        grid.field(|r, b| amp * envelope(r) * ((2.0 * b).sin() + 0.4 * (6.0 * b).sin()));
    let eta = grid.field(|r, b| amp * envelope(r) * ((4.0 * b).sin() + 0.5 * (2.0 * b).sin()));
    let xi = grid.field(|r, b| amp * envelope(r) * (b.cos() + 0.2 * (3.0 * b).cos()));
    LinState::new(omega, eta, xi).unwrap()
}

fn sup_gap(a: &ScalarField, b: &ScalarField) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        worst = worst.max((x - y).abs());
    }
    worst
}

#[test]
fn leading_physical_matches_closed_form() {
    let grid = build_grid(0.1, 1e6, 256, 32, Spacing::Geometric).unwrap();
    let profile = approx_steady_state(&grid).unwrap();
    let t = 0.5;
    let (om, et) = evolve_leading(
        &grid,
        &profile.omega,
        &profile.eta,
        None,
        L12Tail::PowerLaw { p: 1.0 },
        Scheme::Central,
        t,
        0.005,
    )
    .unwrap();
    // the profile pair rides the exact self-similar collapse of the leading
    // system: Omega(R, t) = Omega_0(R/(1-t))/(1-t) and eta with the square
    let s = 1.0 / (1.0 - t);
    let pref = grid.alpha / profile.c;
    let exact_om = grid.field(|r, b| {
        let z = s * r;
        pref * grid.gamma(b) * s * 3.0 * z / ((1.0 + z) * (1.0 + z))
    });
    let exact_et = grid.field(|r, b| {
        let z = s * r;
        pref * grid.gamma(b) * s * s * 6.0 * z / ((1.0 + z) * (1.0 + z) * (1.0 + z))
    });
    let eo = sup_gap(&om, &exact_om) / exact_om.max_abs();
    let ee = sup_gap(&et, &exact_et) / exact_et.max_abs();
    eprintln!("closed-form gaps: omega {eo:.3e} eta {ee:.3e}");
    assert!(eo < 1e-4, "omega drifted from the closed form by {eo:.3e}");
    assert!(ee < 1e-4, "eta drifted from the closed form by {ee:.3e}");
}

#[test]
fn zero_eta_freezes_omega() {
    let grid = build_grid(0.1, 1e4, 64, 16, Spacing::Geometric).unwrap();
    let omega = grid.field(|r, b| envelope(r) * (2.0 * b).sin());
    let eta = ScalarField::zeros(grid.nr(), grid.nb());
    let (om, et) = evolve_leading(
        &grid,
        &omega,
        &eta,
        None,
        L12Tail::Zero,
        Scheme::Central,
        1.0,
        0.05,
    )
    .unwrap();
    assert_eq!(sup_gap(&om, &omega), 0.0);
    assert_eq!(et.max_abs(), 0.0);
}

#[test]
fn rescaled_leading_stationary_at_profile() {
    let mut sups = Vec::new();
    for alpha in [0.05, 0.1] {
        let grid = build_grid(alpha, 1e6, 192, 32, Spacing::Geometric).unwrap();
        let profile = approx_steady_state(&grid).unwrap();
        let (d_om, d_et) = leading_rhs(
            &grid,
            &profile.omega,
            &profile.eta,
            Some((profile.c_omega, profile.c_l)),
            L12Tail::PowerLaw { p: 1.0 },
            Scheme::Central,
        );
        let sup = d_om.max_abs().max(d_et.max_abs());
        eprintln!("alpha {alpha}: stationarity defect {sup:.3e} ({:.3e} per alpha^2)", sup / (alpha * alpha));
        assert!(
            sup < 3.0 * alpha * alpha,
            "leading defect {sup:.3e} too large for alpha {alpha}"
        );
        sups.push(sup);
    }
    let ratio = sups[1] / sups[0];
    eprintln!("defect ratio across alpha doubling: {ratio:.3}");
    assert!(
        (3.3..5.0).contains(&ratio),
        "defect did not scale like alpha^2: ratio {ratio:.3}"
    );
}

#[test]
fn normalization_pins_the_profile_exponent() {
    let grid = build_grid(0.1, 1e6, 256, 32, Spacing::Geometric).unwrap();
    let profile = approx_steady_state(&grid).unwrap();
    let (cw, cl) = normalization(&grid, &profile.omega);
    eprintln!("c_omega(profile) = {cw:.10} (gap {:.3e})", (cw + 3.0).abs());
    assert!(
        (cw + 3.0).abs() < 1e-4,
        "profile normalization off: c_omega = {cw:.8}"
    );
    assert!((cl - (1.0 - 0.1) / 0.1 * cw).abs() < 1e-14);

    let zero = ScalarField::zeros(grid.nr(), grid.nb());
    let (cw0, cl0) = normalization(&grid, &zero);
    assert_eq!(cw0, 0.0);
    assert_eq!(cl0, 0.0);

    let bump = grid.field(|r, b| envelope(r) * (2.0 * b).sin());
    let (cwb, _) = normalization(&grid, &bump);
    assert!(cwb < 0.0, "positive vorticity must contract: c_omega = {cwb:.3e}");
}

#[test]
fn residual_matches_uncancelled_assembly() {
    // the residual routine evaluates a cancelled form of the steady defect;
    // rebuild the raw right-hand side from the velocity pack and the stored
    // profile derivative fields and check the cancellation identities held
    let grid = build_grid(0.05, 1e6, 256, 64, Spacing::Geometric).unwrap();
    let profile = approx_steady_state(&grid).unwrap();
    let res = residual(&grid, &profile).unwrap();

    let opts = StreamOpts {
        n_modes: None,
        l12_tail: L12Tail::PowerLaw { p: 1.0 },
        mode_tail: ModeTail::Fitted,
    };
    let sol = solve_stream(&grid, &profile.omega, &opts).unwrap();
    let pack = velocity(&grid, &profile.omega, &sol);
    let tc = transport_coeffs(&grid, &sol);
    let acl = grid.alpha * profile.c_l;
    let adv_om = tc.apply(&profile.d_r_omega, &profile.d_b_omega);
    let adv_et = tc.apply(&profile.d_r_eta, &profile.d_b_eta);
    let adv_xi = tc.apply(&profile.d_r_xi, &profile.d_b_xi);
    let (nr, nb) = (grid.nr(), grid.nb());
    let mut raw_om = ScalarField::zeros(nr, nb);
    let mut raw_et = ScalarField::zeros(nr, nb);
    let mut raw_xi = ScalarField::zeros(nr, nb);
    for i in 0..nr {
        for j in 0..nb {
            let om = profile.omega.get(i, j);
            let et = profile.eta.get(i, j);
            let xi = profile.xi.get(i, j);
            raw_om.set(
                i,
                j,
                profile.c_omega * om + et - acl * profile.d_r_omega.get(i, j) - adv_om.get(i, j),
            );
            raw_et.set(
                i,
                j,
                (2.0 * profile.c_omega - pack.u_x.get(i, j)) * et
                    - pack.v_x.get(i, j) * xi
                    - acl * profile.d_r_eta.get(i, j)
                    - adv_et.get(i, j),
            );
            raw_xi.set(
                i,
                j,
                (2.0 * profile.c_omega - pack.v_y.get(i, j)) * xi
                    - pack.u_y.get(i, j) * et
                    - acl * profile.d_r_xi.get(i, j)
                    - adv_xi.get(i, j),
            );
        }
    }
    let scale = profile
        .omega
        .max_abs()
        .max(profile.eta.max_abs())
        .max(profile.xi.max_abs());
    let go = sup_gap(&raw_om, &res.f_omega) / scale;
    let ge = sup_gap(&raw_et, &res.f_eta) / scale;
    let gx = sup_gap(&raw_xi, &res.f_xi) / scale;
    eprintln!("cancelled-vs-raw gaps over field scale: {go:.3e} {ge:.3e} {gx:.3e}");
    for (name, g) in [("omega", go), ("eta", ge), ("xi", gx)] {
        assert!(g < 1e-7, "{name} cancellation defect {g:.3e}");
    }

    eprintln!(
        "small-R slope {:.3}, H3 norms {:.3e} {:.3e} {:.3e}",
        res.small_r_slope, res.h3_omega, res.h3_eta, res.h3_xi
    );
    assert!(res.small_r_slope >= 1.9, "small-R slope {:.3}", res.small_r_slope);
    for h in [res.h3_omega, res.h3_eta, res.h3_xi] {
        assert!(h.is_finite() && h > 0.0);
    }

    // without the angular factor the residual loses one power of R
    let flat = approx_steady_state_flat_gamma(&grid).unwrap();
    let res_flat = residual(&grid, &flat).unwrap();
    eprintln!("flat-gamma small-R slope {:.3}", res_flat.small_r_slope);
    assert!(
        (0.5..1.5).contains(&res_flat.small_r_slope),
        "flat-gamma slope {:.3}",
        res_flat.small_r_slope
    );
}

#[test]
fn full_rhs_matches_residual_at_profile() {
    // the total form differentiates its fields with grid stencils, while the
    // residual uses the profile's closed-form derivatives; the two routes
    // separate at the edges, where the profile is not smooth in beta:
    //   - cos(beta)^alpha has unbounded derivatives at the top edge, felt by
    //     omega and eta and decaying into the grid like h^8 cos(b)^(alpha-9)
    //   - xi_bar's line integral maps radii through (sin beta)^alpha, leaving
    //     a beta^alpha cusp at the bottom edge that only xi sees
    // so the comparison is tight away from the affected edge and pinned at
    // the measured stencil cost globally
    let grid = build_grid(0.05, 1e6, 256, 64, Spacing::Geometric).unwrap();
    let profile = approx_steady_state(&grid).unwrap();
    let res = residual(&grid, &profile).unwrap();
    let state = RescaledState::new(
        profile.omega.clone(),
        profile.eta.clone(),
        profile.xi.clone(),
        profile.c_omega,
        profile.c_l,
    )
    .unwrap();
    let opts = FullOpts { scheme: Scheme::Central, ..FullOpts::default() };
    let d = full_rhs(&grid, &state, &opts).unwrap();

    let nb = grid.nb();
    let scale = profile
        .omega
        .max_abs()
        .max(profile.eta.max_abs())
        .max(profile.xi.max_abs());
    let band_gap = |a: &ScalarField, b: &ScalarField, lo: usize, hi: usize| {
        let mut worst = 0.0f64;
        for i in 0..grid.nr() {
            for j in lo..hi {
                worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
            }
        }
        worst / scale
    };
    // (band, tight tol) chosen per field by which edge its cusp lives at
    let pairs = [
        ("omega", &d.d_omega, &res.f_omega, 0, nb - nb / 8, 1e-4),
        ("eta", &d.d_eta, &res.f_eta, 0, nb - nb / 8, 1e-4),
        ("xi", &d.d_xi, &res.f_xi, nb / 8, nb, 1e-4),
    ];
    for (name, left, right, lo, hi, tol) in pairs {
        let g_band = band_gap(left, right, lo, hi);
        let g_all = band_gap(left, right, 0, nb);
        eprintln!("{name}: off-edge gap {g_band:.3e}, global gap {g_all:.3e} (field scale)");
        assert!(g_band < tol, "{name} off-edge assembly gap {g_band:.3e}");
        assert!(g_all < 1e-1, "{name} global assembly gap {g_all:.3e}");
    }

    // the stored closed-form angular derivatives agree with the stencils
    // wherever the stencils converge, pinning each against the other
    for (name, f, ana, lo, hi, tol) in [
        ("omega", &profile.omega, &profile.d_b_omega, 0, nb - nb / 8, 1e-4),
        ("eta", &profile.eta, &profile.d_b_eta, 0, nb - nb / 8, 1e-4),
        ("xi", &profile.xi, &profile.d_b_xi, nb / 8, nb - nb / 8, 1e-5),
    ] {
        let num = grid.d_beta(f);
        let g = band_gap(&num, ana, lo, hi);
        eprintln!("d_beta({name}) stencil-vs-closed-form gap {g:.3e}");
        assert!(g < tol, "d_beta({name}) gap {g:.3e}");
    }
    for (name, f, ana) in [
        ("omega", &profile.omega, &profile.d_r_omega),
        ("eta", &profile.eta, &profile.d_r_eta),
    ] {
        let num = grid.d_r(f);
        let g = sup_gap(&num, ana) / scale;
        eprintln!("d_r({name}) stencil-vs-closed-form gap {g:.3e}");
        assert!(g < 1e-7, "d_r({name}) gap {g:.3e}");
    }
}

/// Scale map of the exact symmetry: a radial shift by whole nodes with the
/// matching amplitude factors.
fn shift_scale(f: &ScalarField, k: usize, factor: f64) -> ScalarField {
    let mut out = ScalarField::zeros(f.nr, f.nb);
    for i in k..f.nr {
        for j in 0..f.nb {
            out.set(i, j, factor * f.get(i - k, j));
        }
    }
    out
}

#[test]
fn scaling_symmetry_commutes_with_evolution() {
    let grid = build_grid(0.1, 1e6, 128, 32, Spacing::Geometric).unwrap();
    let (nr, nb) = (grid.nr(), grid.nb());
    let k = 8usize;
    let tau_tilde = 2.0;
    let lambda = (k as f64 * grid.dw / grid.alpha).exp();

    // compact bump in the middle of the log-radial grid
    let w_mid = grid.w_nodes[nr / 2 - 10];
    let bump = |w: f64| (-((w - w_mid) / (3.0 * grid.dw)).powi(2)).exp();
    let omega = grid.field(|r, b| 0.3 * bump(r.ln()) * (2.0 * b).sin());
    let eta = grid.field(|r, b| 0.2 * bump(r.ln()) * (4.0 * b).sin());
    let xi = grid.field(|r, b| 0.1 * bump(r.ln()) * b.cos());
    let theta = grid.field(|r, b| 0.25 * bump(r.ln()) * b.cos() * b.cos());

    let dt = 0.01;
    let n_steps = 8usize;
    let cfg_a = RunConfig {
        dt,
        t_end: dt * n_steps as f64,
        output_every: dt * n_steps as f64,
        l12_tail: L12Tail::Zero,
        ..RunConfig::default()
    };
    let mut init_a = RescaledState::unrescaled(omega.clone(), eta.clone(), xi.clone()).unwrap();
    init_a.theta = Some(theta.clone());
    let (_, end_a) = run(&grid, None, &init_a, &cfg_a).unwrap();

    let cfg_b = RunConfig {
        dt: tau_tilde * dt,
        t_end: tau_tilde * dt * n_steps as f64,
        output_every: tau_tilde * dt * n_steps as f64,
        ..cfg_a.clone()
    };
    let mut init_b = RescaledState::unrescaled(
        shift_scale(&omega, k, 1.0 / tau_tilde),
        shift_scale(&eta, k, 1.0 / (tau_tilde * tau_tilde)),
        shift_scale(&xi, k, 1.0 / (tau_tilde * tau_tilde)),
    )
    .unwrap();
    init_b.theta = Some(shift_scale(&theta, k, lambda / (tau_tilde * tau_tilde)));
    let (_, end_b) = run(&grid, None, &init_b, &cfg_b).unwrap();

    let scale_o = end_b.omega.max_abs();
    let go = sup_gap(&shift_scale(&end_a.omega, k, 1.0 / tau_tilde), &end_b.omega) / scale_o;
    let ge = sup_gap(
        &shift_scale(&end_a.eta, k, 1.0 / (tau_tilde * tau_tilde)),
        &end_b.eta,
    ) / end_b.eta.max_abs();
    let gx = sup_gap(
        &shift_scale(&end_a.xi, k, 1.0 / (tau_tilde * tau_tilde)),
        &end_b.xi,
    ) / end_b.xi.max_abs();
    let gt = sup_gap(
        &shift_scale(
            end_a.theta.as_ref().unwrap(),
            k,
            lambda / (tau_tilde * tau_tilde),
        ),
        end_b.theta.as_ref().unwrap(),
    ) / end_b.theta.as_ref().unwrap().max_abs();
    eprintln!("commutation gaps: omega {go:.3e} eta {ge:.3e} xi {gx:.3e} theta {gt:.3e}");
    for (name, g) in [("omega", go), ("eta", ge), ("xi", gx), ("theta", gt)] {
        assert!(g < 1e-9, "{name} breaks the scaling symmetry by {g:.3e}");
    }
    let _ = nb;
}

#[test]
fn finite_difference_matches_linearization() {
    // the flat-gamma profile keeps the base state smooth up to the top edge,
    // so the stencil derivatives in the total form and the closed-form
    // derivatives in the linearized operator agree and the comparison tests
    // the linearization algebra alone (the cos^alpha edge cost is pinned in
    // full_rhs_matches_residual_at_profile)
    let grid = build_grid(0.1, 1e6, 128, 32, Spacing::Geometric).unwrap();
    let profile = approx_steady_state_flat_gamma(&grid).unwrap();
    let sys = PerturbationSystem::build(&grid, &profile).unwrap();
    let d = low_mode_state(&grid, 1.0);
    let (cw_d, cl_d) = normalization(&grid, &d.omega);
    let lin = rblab_core::linop::apply_linearized(&grid, &profile, &sys.op, &d).unwrap();
    let lin_scale = lin.max_abs();

    let opts = FullOpts { scheme: Scheme::Central, ..FullOpts::default() };
    let mut errs = Vec::new();
    for eps in [1e-3, 1e-4] {
        let side = |sign: f64| -> (ScalarField, ScalarField, ScalarField) {
            let mk = |bar: &ScalarField, pert: &ScalarField| {
                let mut f = bar.clone();
                f.axpy(sign * eps, pert);
                f
            };
            (mk(&profile.omega, &d.omega), mk(&profile.eta, &d.eta), mk(&profile.xi, &d.xi))
        };
        let (op, ep, xp) = side(1.0);
        let plus = RescaledState::new(
            op,
            ep,
            xp,
            profile.c_omega + eps * cw_d,
            profile.c_l + eps * cl_d,
        )
        .unwrap();
        let (om, em, xm) = side(-1.0);
        let minus = RescaledState::new(
            om,
            em,
            xm,
            profile.c_omega - eps * cw_d,
            profile.c_l - eps * cl_d,
        )
        .unwrap();
        let dp = full_rhs(&grid, &plus, &opts).unwrap();
        let dm = full_rhs(&grid, &minus, &opts).unwrap();
        let fd = |a: &ScalarField, b: &ScalarField| {
            let mut f = a.clone();
            f.axpy(-1.0, b);
            f.scale(1.0 / (2.0 * eps));
            f
        };
        let fo = fd(&dp.d_omega, &dm.d_omega);
        let fe = fd(&dp.d_eta, &dm.d_eta);
        let fx = fd(&dp.d_xi, &dm.d_xi);
        // xi_bar keeps a beta^alpha cusp at the bottom edge even in the flat
        // variant (the line-integral geometry, not the angular weight), so
        // the stencil side of the xi row is compared away from that edge
        let nb = grid.nb();
        let band_gap = |a: &ScalarField, b: &ScalarField, lo: usize| {
            let mut worst = 0.0f64;
            for i in 0..grid.nr() {
                for j in lo..nb {
                    worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
                }
            }
            worst
        };
        let err = sup_gap(&fo, &lin.omega)
            .max(sup_gap(&fe, &lin.eta))
            .max(band_gap(&fx, &lin.xi, nb / 8))
            / lin_scale;
        let err_xi_edge = band_gap(&fx, &lin.xi, 0) / lin_scale;
        eprintln!("eps {eps:.1e}: fd-vs-linearization gap {err:.3e}, xi with edge {err_xi_edge:.3e}");
        errs.push((err, err_xi_edge));
    }
    assert!(errs[1].0 < 1e-6, "linearization mismatch {:.3e}", errs[1].0);
    assert!(errs[1].1 < 1e-2, "xi edge mismatch {:.3e}", errs[1].1);
    assert!(errs[0].0 < 1e-4, "quadratic remainder too large at coarse eps: {:.3e}", errs[0].0);
}

#[test]
fn perturbation_and_total_forms_agree() {
    // flat-gamma base state for the same reason as in
    // finite_difference_matches_linearization: the split into profile plus
    // perturbation is exact linear algebra, and a smooth base keeps the two
    // differentiation routes identical so the algebra is what gets measured
    let grid = build_grid(0.1, 1e6, 128, 32, Spacing::Geometric).unwrap();
    let profile = approx_steady_state_flat_gamma(&grid).unwrap();
    let sys = PerturbationSystem::build(&grid, &profile).unwrap();
    let pert = low_mode_state(&grid, 0.02);
    let (cw, cl) = normalization(&grid, &pert.omega);

    let (d_pert, info) = perturbation_rhs(&grid, &profile, &sys, &pert, Scheme::Central).unwrap();
    assert!((info.c_omega_total - (profile.c_omega + cw)).abs() < 1e-15);

    let mk = |bar: &ScalarField, p: &ScalarField| {
        let mut f = bar.clone();
        f.axpy(1.0, p);
        f
    };
    let total = RescaledState::new(
        mk(&profile.omega, &pert.omega),
        mk(&profile.eta, &pert.eta),
        mk(&profile.xi, &pert.xi),
        profile.c_omega + cw,
        profile.c_l + cl,
    )
    .unwrap();
    let opts = FullOpts { scheme: Scheme::Central, ..FullOpts::default() };
    let d_total = full_rhs(&grid, &total, &opts).unwrap();

    let scale = d_total
        .d_omega
        .max_abs()
        .max(d_total.d_eta.max_abs())
        .max(d_total.d_xi.max_abs());
    // the total form differentiates xi_bar with stencils across its bottom
    // beta^alpha cusp while the perturbation form carries the closed form, so
    // the xi row is held tight away from that edge and pinned loosely on it
    let nb = grid.nb();
    let band_gap = |a: &ScalarField, b: &ScalarField, lo: usize| {
        let mut worst = 0.0f64;
        for i in 0..grid.nr() {
            for j in lo..nb {
                worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
            }
        }
        worst / scale
    };
    let go = sup_gap(&d_total.d_omega, &d_pert.omega) / scale;
    let ge = sup_gap(&d_total.d_eta, &d_pert.eta) / scale;
    let gx = band_gap(&d_total.d_xi, &d_pert.xi, nb / 8);
    let gx_edge = band_gap(&d_total.d_xi, &d_pert.xi, 0);
    eprintln!("form-agreement gaps: {go:.3e} {ge:.3e} {gx:.3e} (xi with edge {gx_edge:.3e})");
    for (name, g) in [("omega", go), ("eta", ge), ("xi", gx)] {
        assert!(g < 1e-5, "{name} forms disagree by {g:.3e}");
    }
    assert!(gx_edge < 1e-1, "xi edge disagreement {gx_edge:.3e}");
}

#[test]
fn transport_preserves_theta_sup() {
    let grid = build_grid(0.1, 1e4, 96, 32, Spacing::Geometric).unwrap();
    let omega = grid.field(|r, b| 0.3 * envelope(r) * (2.0 * b).sin());
    let zeros = ScalarField::zeros(grid.nr(), grid.nb());
    let theta = grid.field(|r, b| envelope(2.0 * r) * b.cos() * b.cos());
    let mut init = RescaledState::unrescaled(omega.clone(), zeros.clone(), zeros).unwrap();
    init.theta = Some(theta.clone());
    let cfg = RunConfig {
        dt: 0.01,
        t_end: 0.5,
        output_every: 0.5,
        ..RunConfig::default()
    };
    let (traj, end) = run(&grid, None, &init, &cfg).unwrap();
    assert_eq!(traj.status, RunStatus::Completed);
    // eta stays identically zero, so omega is transported and its sup moves
    // no more than theta's
    assert_eq!(end.eta.max_abs(), 0.0);
    let sup0 = theta.max_abs();
    let sup1 = end.theta.as_ref().unwrap().max_abs();
    let drift = (sup1 - sup0).abs() / sup0;
    let om_drift = (end.omega.max_abs() - omega.max_abs()).abs() / omega.max_abs();
    eprintln!("sup drift over t = 0.5: theta {drift:.3e} omega {om_drift:.3e}");
    assert!(drift < 1e-3, "theta sup drifted by {drift:.3e}");
    assert!(om_drift < 1e-3, "omega sup drifted by {om_drift:.3e}");
}

#[test]
fn trajectory_factors_integrate_constant_exponents() {
    let grid = build_grid(0.1, 1e4, 48, 16, Spacing::Geometric).unwrap();
    let omega = grid.field(|r, b| 1e-3 * envelope(r) * (2.0 * b).sin());
    let zeros = ScalarField::zeros(grid.nr(), grid.nb());
    let init = RescaledState::new(omega, zeros.clone(), zeros, -1.0, 1.0).unwrap();
    let cfg = RunConfig {
        dt: 0.02,
        t_end: 2.0,
        output_every: 0.2,
        ..RunConfig::default()
    };
    let (traj, end) = run(&grid, None, &init, &cfg).unwrap();
    assert_eq!(traj.status, RunStatus::Completed);
    let last = traj.rows.last().unwrap();
    assert!((last.tau - 2.0).abs() < 1e-12);
    // constant c_omega = -1: t(tau) = 1 - exp(-tau) exactly
    let t_exact = 1.0 - (-2.0f64).exp();
    assert!(
        (last.t_of_tau - t_exact).abs() < 1e-10,
        "t(tau) off by {:.3e}",
        (last.t_of_tau - t_exact).abs()
    );
    assert!((last.c_omega_factor - (-2.0f64).exp()).abs() < 1e-12);
    assert!((last.c_l_factor - (-2.0f64).exp()).abs() < 1e-12);
    assert!(traj.factor_residual() < 1e-12);
    for w in traj.rows.windows(2) {
        assert!(w[1].t_of_tau >= w[0].t_of_tau, "t(tau) must not decrease");
    }
    assert!(end.tau > 1.999);
    let text = traj.emit();
    assert!(text.starts_with("# tau"));
    assert_eq!(text.lines().count(), traj.rows.len() + 1);
}

#[test]
fn blowup_time_reconstruction() {
    // constant contraction at rate 1: the physical time saturates at 1
    let samples: Vec<(f64, f64)> = (0..=80).map(|i| (0.5 * i as f64, -1.0)).collect();
    let rep = blowup_time(&samples, 0.1).unwrap();
    let t = rep.t_star.unwrap();
    assert!((t - 1.0).abs() < 1e-10, "T* = {t:.15}");

    // half the rate doubles the horizon
    let samples: Vec<(f64, f64)> = (0..=80).map(|i| (0.5 * i as f64, -0.5)).collect();
    let t = blowup_time(&samples, 0.1).unwrap().t_star.unwrap();
    assert!((t - 2.0).abs() < 1e-9, "T* = {t:.15}");

    // decaying transient on top of the constant rate
    let h = 0.002;
    let samples: Vec<(f64, f64)> = (0..=20000)
        .map(|i| {
            let tau = h * i as f64;
            (tau, -1.0 - (-tau).exp())
        })
        .collect();
    let t = blowup_time(&samples, 0.1).unwrap().t_star.unwrap();
    let exact = 1.0 - (-1.0f64).exp();
    assert!(
        (t - exact).abs() < 1e-6,
        "transient case: T* = {t:.10} vs {exact:.10}"
    );

    // an expanding exponent never reaches a finite time
    let samples: Vec<(f64, f64)> = (0..=40).map(|i| (0.5 * i as f64, 0.1)).collect();
    let rep = blowup_time(&samples, 0.1).unwrap();
    assert!(rep.t_star.is_none());
    assert!(rep.sup_c_omega > 0.0);

    // growth of the rescaled amplitude under constant contraction: alpha
    // times (exp(tau) - 1)
    let samples: Vec<(f64, f64)> = (0..=100).map(|i| (0.01 * i as f64, -1.0)).collect();
    let rep = blowup_time(&samples, 0.1).unwrap();
    let (tau_m, m) = *rep.m_of_tau.last().unwrap();
    assert!((m - 0.1 * (tau_m.exp() - 1.0)).abs() < 1e-10);

    assert!(blowup_time(&[(0.0, -1.0)], 0.1).is_err());
    assert!(blowup_time(&[(0.0, -1.0), (0.0, -1.0)], 0.1).is_err());
}

#[test]
fn l12_origin_obeys_its_evolution_identity() {
    let grid = build_grid(0.1, 1e6, 96, 32, Spacing::Geometric).unwrap();
    let profile = approx_steady_state(&grid).unwrap();
    let mut state = low_mode_state(&grid, 1.0);
    let h = 0.005;
    let n_steps = 60usize;
    let mut l_samples = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::new();
    let checks = [20usize, 30, 40];
    l_samples.push(l12_at_origin(&grid, &state.omega));
    let rhs = |s: &LinState| apply_full(&grid, &profile, s).unwrap().0;
    for step in 0..n_steps {
        if checks.contains(&step) {
            states.push((step, state.clone()));
        }
        let k1 = rhs(&state);
        let mut s2 = state.clone();
        s2.axpy(0.5 * h, &k1);
        let k2 = rhs(&s2);
        let mut s3 = state.clone();
        s3.axpy(0.5 * h, &k2);
        let k3 = rhs(&s3);
        let mut s4 = state.clone();
        s4.axpy(h, &k3);
        let k4 = rhs(&s4);
        state.axpy(h / 6.0, &k1);
        state.axpy(h / 3.0, &k2);
        state.axpy(h / 3.0, &k3);
        state.axpy(h / 6.0, &k4);
        l_samples.push(l12_at_origin(&grid, &state.omega));
    }

    // dL/dt = -4 L + <eta, sin(2b)/R> - 3 <sin(2b)/((1+R)R), D_beta Omega>
    let mu = grid.field(|r, b| (2.0 * b).sin() / r);
    let nu = grid.field(|r, b| (2.0 * b).sin() / ((1.0 + r) * r));
    let mut worst = 0.0f64;
    for (m, s) in &states {
        let dl = (-l_samples[m + 2] + 8.0 * l_samples[m + 1] - 8.0 * l_samples[m - 1]
            + l_samples[m - 2])
            / (12.0 * h);
        let predicted = -4.0 * l_samples[*m] + grid.inner(&s.eta, &mu)
            - 3.0 * grid.inner(&grid.d_beta(&s.omega), &nu);
        let scale = dl.abs().max(l_samples[*m].abs());
        worst = worst.max((dl - predicted).abs() / scale);
    }
    eprintln!("evolution identity residual: {worst:.3e}");
    assert!(worst < 1e-4, "identity residual {worst:.3e}");
}

#[test]
fn run_aborts_on_overflow() {
    let grid = build_grid(0.1, 1e4, 48, 8, Spacing::Geometric).unwrap();
    let omega = grid.field(|r, b| envelope(r) * (2.0 * b).sin());
    let zeros = ScalarField::zeros(grid.nr(), grid.nb());
    let init = RescaledState::new(omega, zeros.clone(), zeros, 400.0, 0.0).unwrap();
    // an infinite cfl factor disables the step guard entirely, so the blowup
    // runs into non-finite values instead of a Cfl rejection
    let cfg = RunConfig {
        dt: 0.05,
        t_end: 10.0,
        cfl: f64::INFINITY,
        output_every: 10.0,
        ..RunConfig::default()
    };
    let (traj, end) = run(&grid, None, &init, &cfg).unwrap();
    match traj.status {
        RunStatus::AbortedNonFinite { tau } => assert!(tau > 0.0 && tau < 10.0),
        RunStatus::Completed => panic!("exponential growth should overflow"),
    }
    assert!(end.omega.all_finite(), "returned state must be the last good one");
    assert!(!traj.rows.is_empty());
}

#[test]
fn leading_stepper_is_fourth_order() {
    let grid = build_grid(0.1, 1e5, 96, 16, Spacing::Geometric).unwrap();
    let profile = approx_steady_state(&grid).unwrap();
    let t = 0.2;
    let sol = |dt: f64| {
        evolve_leading(
            &grid,
            &profile.omega,
            &profile.eta,
            None,
            L12Tail::PowerLaw { p: 1.0 },
            Scheme::Central,
            t,
            dt,
        )
        .unwrap()
    };
    let reference = sol(0.0025);
    let err = |s: &(ScalarField, ScalarField)| {
        sup_gap(&s.0, &reference.0).max(sup_gap(&s.1, &reference.1))
    };
    let e1 = err(&sol(0.02));
    let e2 = err(&sol(0.01));
    let ratio = e1 / e2;
    eprintln!("step-halving errors {e1:.3e} {e2:.3e}, ratio {ratio:.2}");
    assert!(
        (10.0..26.0).contains(&ratio),
        "expected fourth-order step ratio, got {ratio:.2}"
    );
}

#[test]
fn oversized_step_is_rejected() {
    let grid = build_grid(0.1, 1e4, 48, 16, Spacing::Geometric).unwrap();
    let omega = grid.field(|r, b| 5.0 * envelope(r) * (2.0 * b).sin());
    let zeros = ScalarField::zeros(grid.nr(), grid.nb());
    let init = RescaledState::unrescaled(omega, zeros.clone(), zeros).unwrap();
    let cfg = RunConfig { dt: 50.0, t_end: 100.0, ..RunConfig::default() };
    match run(&grid, None, &init, &cfg) {
        Err(DynError::Cfl { dt, limit, .. }) => {
            assert_eq!(dt, 50.0);
            assert!(limit < 50.0);
        }
        other => panic!("expected a step-size rejection, got {other:?}"),
    }

    let bad = RunConfig { dt: 0.0, ..RunConfig::default() };
    let omega = grid.field(|r, b| envelope(r) * (2.0 * b).sin());
    let zeros = ScalarField::zeros(grid.nr(), grid.nb());
    let init = RescaledState::unrescaled(omega, zeros.clone(), zeros).unwrap();
    assert!(matches!(run(&grid, None, &init, &bad), Err(DynError::BadParam(_))));
}

#[test]
fn zero_perturbation_reduces_to_the_residual() {
    let grid = build_grid(0.1, 1e5, 96, 32, Spacing::Geometric).unwrap();
    let profile = approx_steady_state(&grid).unwrap();
    let sys = PerturbationSystem::build(&grid, &profile).unwrap();
    let zero = LinState::zeros(grid.nr(), grid.nb());
    let (out, info) = perturbation_rhs(&grid, &profile, &sys, &zero, Scheme::Upwind).unwrap();
    assert_eq!(sup_gap(&out.omega, &sys.residual.f_omega), 0.0);
    assert_eq!(sup_gap(&out.eta, &sys.residual.f_eta), 0.0);
    assert_eq!(sup_gap(&out.xi, &sys.residual.f_xi), 0.0);
    assert_eq!(info.c_omega_total, profile.c_omega);
    assert_eq!(info.c_l_total, profile.c_l);
}
