//! Polar grids in the slowed radial variable R = r^alpha with the angular
//! coordinate beta, together with the singular weights of the energy norms.
//!
//! The radial direction is uniform either in ln R ("geometric") or in
//! R/(1+R) ("mapped-uniform"). The angular direction uses dyadically refined
//! Gauss-Legendre panels accumulating at beta = 0 and beta = pi/2, where the
//! weights are singular.

use crate::field::ScalarField;
use crate::quad::{self, fd_weights};
use thiserror::Error;

pub const SIGMA: f64 = 0.99;
pub const DEFAULT_R_FLOOR: f64 = 1e-6;

/// gamma = 1 + alpha/10, the angular exponent paired with sigma.
pub fn gamma_exponent(alpha: f64) -> f64 {
    1.0 + alpha / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Geometric,
    MappedUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Phi0,
    Phi1,
    Phi2,
    Psi0,
    Psi1,
    Psi2,
    Rho,
    C1Phi1,
    C1Phi2,
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid: alpha must lie in (0, 1/10], got {0}")]
    BadAlpha(f64),
    #[error("grid: need at least 8 radial nodes, got {0}")]
    BadRadialCount(usize),
    #[error("grid: angular node count must be a multiple of 8 and at least 8, got {0}")]
    BadAngularCount(usize),
    #[error("grid: r_max must be at least 10, got {0}")]
    BadRMax(f64),
    #[error("grid: r_floor must lie in (0, 1), got {0}")]
    BadFloor(f64),
    #[error("grid: polar coordinates undefined at the origin")]
    Origin,
    #[error("grid: point ({0}, {1}) lies outside the closed first quadrant")]
    OutsideQuadrant(f64, f64),
}

/// Precomputed first-derivative stencils, one row per node.
#[derive(Debug, Clone)]
pub struct StencilTable {
    pub starts: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

impl StencilTable {
    fn uniform(n: usize, width: usize, h: f64) -> StencilTable {
        let w = width.min(n);
        let half = (w - 1) / 2;
        let nodes: Vec<f64> = (0..w).map(|k| k as f64).collect();
        let mut starts = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let s = i.saturating_sub(half).min(n - w);
            let table = fd_weights((i - s) as f64, &nodes, 1);
            starts.push(s);
            weights.push(table[1].iter().map(|&c| c / h).collect());
        }
        StencilTable { starts, weights }
    }

    fn scattered(nodes: &[f64], width: usize) -> StencilTable {
        let n = nodes.len();
        let w = width.min(n);
        let half = (w - 1) / 2;
        let mut starts = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let s = i.saturating_sub(half).min(n - w);
            let table = fd_weights(nodes[i], &nodes[s..s + w], 1);
            starts.push(s);
            weights.push(table[1].clone());
        }
        StencilTable { starts, weights }
    }

    /// Third-order biased stencils for rightward characteristics on the
    /// uniform stretch grid. The two bottom rows keep the interior weights and
    /// drop the nodes below the grid, which treats the field as zero there;
    /// the top row goes fully one-sided from inside.
    fn upwind_uniform(n: usize, h: f64) -> StencilTable {
        let nodes = [0.0, 1.0, 2.0, 3.0];
        let interior: Vec<f64> = fd_weights(2.0, &nodes, 1)[1].iter().map(|&c| c / h).collect();
        let top: Vec<f64> = fd_weights(3.0, &nodes, 1)[1].iter().map(|&c| c / h).collect();
        let mut starts = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            if i + 1 == n {
                starts.push(n - 4);
                weights.push(top.clone());
            } else if i >= 2 {
                starts.push(i - 2);
                weights.push(interior.clone());
            } else {
                starts.push(0);
                weights.push(interior[2 - i..].to_vec());
            }
        }
        StencilTable { starts, weights }
    }

    /// Third-order left-biased stencils on scattered nodes; the first rows
    /// shift into range, which is harmless where the advection speed carries
    /// the sin(2 beta) factor.
    fn upwind_scattered(nodes: &[f64]) -> StencilTable {
        let n = nodes.len();
        let mut starts = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let s = i.saturating_sub(2).min(n - 4);
            let table = fd_weights(nodes[i], &nodes[s..s + 4], 1);
            starts.push(s);
            weights.push(table[1].clone());
        }
        StencilTable { starts, weights }
    }

    #[inline]
    pub fn apply_at(&self, f: &[f64], i: usize) -> f64 {
        let s = self.starts[i];
        self.weights[i].iter().zip(&f[s..]).map(|(&w, &v)| w * v).sum()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..f.len()).map(|i| self.apply_at(f, i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub alpha: f64,
    pub r_max: f64,
    pub r_floor: f64,
    pub spacing: Spacing,
    /// Radial nodes R, strictly increasing in (0, r_max].
    pub r_nodes: Vec<f64>,
    /// Node weights for ∫ f dR over [r_floor, r_max].
    pub r_quad: Vec<f64>,
    /// Angular nodes in (0, pi/2), strictly increasing.
    pub b_nodes: Vec<f64>,
    /// Node weights for ∫ f dbeta over [0, pi/2]; sums to pi/2.
    pub b_quad: Vec<f64>,
    /// The uniform stretch coordinate: ln R (geometric) or R/(1+R) (mapped).
    pub w_nodes: Vec<f64>,
    pub dw: f64,
    /// d(stretch)/d(ln R) per node: D_R f = radial_factor * df/dw.
    radial_factor: Vec<f64>,
    d_w_hi: StencilTable,
    d_w_lo: StencilTable,
    d_b_hi: StencilTable,
    d_b_lo: StencilTable,
    d_w_up: StencilTable,
    d_b_up: StencilTable,
}

pub fn build_grid(
    alpha: f64,
    r_max: f64,
    n_r: usize,
    n_beta: usize,
    spacing: Spacing,
) -> Result<Grid, GridError> {
    build_grid_with_floor(alpha, r_max, n_r, n_beta, spacing, DEFAULT_R_FLOOR)
}

pub fn build_grid_with_floor(
    alpha: f64,
    r_max: f64,
    n_r: usize,
    n_beta: usize,
    spacing: Spacing,
    r_floor: f64,
) -> Result<Grid, GridError> {
    if !(alpha > 0.0 && alpha <= 0.1) {
        return Err(GridError::BadAlpha(alpha));
    }
    if n_r < 8 {
        return Err(GridError::BadRadialCount(n_r));
    }
    if n_beta < 8 || n_beta % 8 != 0 {
        return Err(GridError::BadAngularCount(n_beta));
    }
    if r_max < 10.0 {
        return Err(GridError::BadRMax(r_max));
    }
    if !(r_floor > 0.0 && r_floor < 1.0) {
        return Err(GridError::BadFloor(r_floor));
    }

    let (w_lo, w_hi) = match spacing {
        Spacing::Geometric => (r_floor.ln(), r_max.ln()),
        Spacing::MappedUniform => (r_floor / (1.0 + r_floor), r_max / (1.0 + r_max)),
    };
    let dw = (w_hi - w_lo) / (n_r - 1) as f64;
    let w_nodes: Vec<f64> = (0..n_r).map(|i| w_lo + i as f64 * dw).collect();
    let r_nodes: Vec<f64> = match spacing {
        Spacing::Geometric => w_nodes.iter().map(|&u| u.exp()).collect(),
        Spacing::MappedUniform => w_nodes.iter().map(|&v| v / (1.0 - v)).collect(),
    };
    let radial_factor: Vec<f64> = match spacing {
        Spacing::Geometric => vec![1.0; n_r],
        // D_R = R dR^{-1}... R d/dR = v(1-v) d/dv.
        Spacing::MappedUniform => w_nodes.iter().map(|&v| v * (1.0 - v)).collect(),
    };
    // ∫ f dR = ∫ f (dR/dw) dw.
    let rule = quad::rule_for(n_r);
    let w_weights = rule.node_weights(n_r, dw);
    let r_quad: Vec<f64> = match spacing {
        Spacing::Geometric => {
            w_weights.iter().zip(&r_nodes).map(|(&w, &r)| w * r).collect()
        }
        Spacing::MappedUniform => w_weights
            .iter()
            .zip(&w_nodes)
            .map(|(&w, &v)| w / ((1.0 - v) * (1.0 - v)))
            .collect(),
    };

    let (b_nodes, b_quad) = angular_panels(n_beta);

    let d_w_hi = StencilTable::uniform(n_r, 9, dw);
    let d_w_lo = StencilTable::uniform(n_r, 5, dw);
    let d_b_hi = StencilTable::scattered(&b_nodes, 9);
    let d_b_lo = StencilTable::scattered(&b_nodes, 5);
    let d_w_up = StencilTable::upwind_uniform(n_r, dw);
    let d_b_up = StencilTable::upwind_scattered(&b_nodes);

    Ok(Grid {
        alpha,
        r_max,
        r_floor,
        spacing,
        r_nodes,
        r_quad,
        b_nodes,
        b_quad,
        w_nodes,
        dw,
        radial_factor,
        d_w_hi,
        d_w_lo,
        d_b_hi,
        d_b_lo,
        d_w_up,
        d_b_up,
    })
}

/// Gauss-Legendre panels: nb/8 panels per half, dyadically refined toward
/// both endpoints with a uniformly refined interior, 4 nodes per panel,
/// mirror-symmetric about pi/4.
fn angular_panels(nb: usize) -> (Vec<f64>, Vec<f64>) {
    let panels = nb / 8;
    let quarter = std::f64::consts::FRAC_PI_4;
    let (gx, gw) = quad::gauss_legendre(4);
    // Half the panels form a dyadic cascade into the endpoint, the rest tile
    // the remainder uniformly, so that endpoint clustering and interior
    // resolution both improve with nb.
    let dyadic = (panels / 2).max(1);
    let uniform = panels - dyadic;
    let s = quarter / (uniform + 1) as f64;
    let mut breaks = Vec::with_capacity(panels + 1);
    breaks.push(0.0);
    for k in 1..=dyadic {
        breaks.push(s * 2f64.powi(k as i32 - dyadic as i32));
    }
    for k in 1..=uniform {
        breaks.push(s + (quarter - s) * k as f64 / uniform as f64);
    }
    let mut nodes = Vec::with_capacity(nb);
    let mut weights = Vec::with_capacity(nb);
    for k in 0..panels {
        let (a, b) = (breaks[k], breaks[k + 1]);
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for m in 0..4 {
            nodes.push(mid + half * gx[m]);
            weights.push(half * gw[m]);
        }
    }
    // Mirror about pi/4.
    for i in (0..nb / 2).rev() {
        nodes.push(std::f64::consts::FRAC_PI_2 - nodes[i]);
        weights.push(weights[i]);
    }
    (nodes, weights)
}

impl Grid {
    pub fn nr(&self) -> usize {
        self.r_nodes.len()
    }

    pub fn nb(&self) -> usize {
        self.b_nodes.len()
    }

    /// Gamma(beta) = cos(beta)^alpha.
    pub fn gamma(&self, beta: f64) -> f64 {
        beta.cos().powf(self.alpha)
    }

    /// D_beta Gamma = -2 alpha sin^2(beta) Gamma.
    pub fn gamma_d_beta(&self, beta: f64) -> f64 {
        let s = beta.sin();
        -2.0 * self.alpha * s * s * self.gamma(beta)
    }

    pub fn field(&self, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField::from_nodes(&self.r_nodes, &self.b_nodes, f)
    }

    pub fn weight_at(&self, kind: WeightKind, r: f64, beta: f64) -> f64 {
        let g = gamma_exponent(self.alpha);
        let q4 = (1.0 + r).powi(4) / r.powi(4);
        let s2b = (2.0 * beta).sin();
        match kind {
            WeightKind::Phi0 => (1.0 + r).powi(3) / r.powi(3) * s2b,
            WeightKind::Phi1 => q4 * s2b.powf(-SIGMA),
            WeightKind::Phi2 => q4 * s2b.powf(-g),
            WeightKind::Psi0 => {
                3.0 / 16.0
                    * ((1.0 + r).powi(3) / r.powi(4) + 1.5 * (1.0 + r).powi(4) / r.powi(3))
                    / self.gamma(beta)
            }
            WeightKind::Psi1 => q4 * (beta.sin() * beta.cos()).powf(-SIGMA),
            WeightKind::Psi2 => q4 * beta.sin().powf(-SIGMA) * beta.cos().powf(-g),
            WeightKind::Rho => 1.0 / r.powi(3) + 1.0 / r.powi(2),
            WeightKind::C1Phi1 => (1.0 + r) / r,
            WeightKind::C1Phi2 => 1.0 + (r * s2b.powf(self.alpha)).powf(-1.0 / 40.0),
        }
    }

    pub fn weight_field(&self, kind: WeightKind) -> ScalarField {
        self.field(|r, b| self.weight_at(kind, r, b))
    }

    /// (R, beta) from first-quadrant Cartesian coordinates.
    pub fn to_polar(&self, x: f64, y: f64) -> Result<(f64, f64), GridError> {
        if x < 0.0 || y < 0.0 {
            return Err(GridError::OutsideQuadrant(x, y));
        }
        if x == 0.0 && y == 0.0 {
            return Err(GridError::Origin);
        }
        let r = x.hypot(y);
        let big_r = (self.alpha * r.ln()).exp();
        let beta = y.atan2(x);
        Ok((big_r, beta))
    }

    pub fn from_polar(&self, big_r: f64, beta: f64) -> Result<(f64, f64), GridError> {
        if big_r <= 0.0 {
            return Err(GridError::Origin);
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&beta) {
            return Err(GridError::OutsideQuadrant(beta.cos(), beta.sin()));
        }
        let r = (big_r.ln() / self.alpha).exp();
        Ok((r * beta.cos(), r * beta.sin()))
    }

    /// D_R f = R ∂_R f, order-8 stencils in the stretch coordinate.
    pub fn d_r(&self, f: &ScalarField) -> ScalarField {
        self.d_r_table(f, &self.d_w_hi)
    }

    /// D_R f with the short order-4 stencils used inside time steppers.
    pub fn d_r4(&self, f: &ScalarField) -> ScalarField {
        self.d_r_table(f, &self.d_w_lo)
    }

    /// D_R f with third-order stencils biased for outward characteristics;
    /// the field is taken as zero below the grid. For the advective terms of
    /// time steppers, where the central stencils feed unstable modes.
    pub fn d_r_upwind(&self, f: &ScalarField) -> ScalarField {
        self.d_r_table(f, &self.d_w_up)
    }

    fn d_r_table(&self, f: &ScalarField, table: &StencilTable) -> ScalarField {
        let (nr, nb) = (f.nr, f.nb);
        assert_eq!((nr, nb), (self.nr(), self.nb()));
        let mut out = ScalarField::zeros(nr, nb);
        for j in 0..nb {
            let col = f.radial_slice(j);
            for i in 0..nr {
                let v = table.apply_at(&col, i) * self.radial_factor[i];
                out.set(i, j, v);
            }
        }
        out
    }

    /// D_beta f = sin(2 beta) ∂_beta f, order-8 scattered stencils.
    pub fn d_beta(&self, f: &ScalarField) -> ScalarField {
        self.d_b_table(f, &self.d_b_hi, true)
    }

    pub fn d_beta4(&self, f: &ScalarField) -> ScalarField {
        self.d_b_table(f, &self.d_b_lo, true)
    }

    /// D_beta f with third-order stencils biased for characteristics moving
    /// toward pi/2, the direction of the leading angular advection.
    pub fn d_beta_upwind(&self, f: &ScalarField) -> ScalarField {
        self.d_b_table(f, &self.d_b_up, true)
    }

    /// Plain ∂_beta f.
    pub fn d_beta_raw(&self, f: &ScalarField) -> ScalarField {
        self.d_b_table(f, &self.d_b_hi, false)
    }

    fn d_b_table(&self, f: &ScalarField, table: &StencilTable, sin_factor: bool) -> ScalarField {
        let (nr, nb) = (f.nr, f.nb);
        assert_eq!((nr, nb), (self.nr(), self.nb()));
        let mut out = ScalarField::zeros(nr, nb);
        for i in 0..nr {
            let row = f.row(i);
            for j in 0..nb {
                let mut v = table.apply_at(row, j);
                if sin_factor {
                    v *= (2.0 * self.b_nodes[j]).sin();
                }
                out.set(i, j, v);
            }
        }
        out
    }

    /// d/dw of a radial profile (w = ln R geometric, R/(1+R) mapped), order 8.
    pub fn d_w_radial(&self, f: &[f64]) -> Vec<f64> {
        self.d_w_hi.apply(f)
    }

    /// D_R of a radial profile.
    pub fn d_r_radial(&self, f: &[f64]) -> Vec<f64> {
        self.d_w_hi
            .apply(f)
            .into_iter()
            .zip(&self.radial_factor)
            .map(|(d, &c)| d * c)
            .collect()
    }

    pub fn d_r_radial4(&self, f: &[f64]) -> Vec<f64> {
        self.d_w_lo
            .apply(f)
            .into_iter()
            .zip(&self.radial_factor)
            .map(|(d, &c)| d * c)
            .collect()
    }

    /// ∫ f dR over the truncated radial domain.
    pub fn integrate_radial(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.r_quad).map(|(&v, &w)| v * w).sum()
    }

    /// Value of a radial profile at r, 9-point Lagrange interpolation in the
    /// stretched coordinate. r must lie inside the node range.
    pub fn interp_radial(&self, f: &[f64], r: f64) -> f64 {
        assert_eq!(f.len(), self.nr());
        assert!(r >= self.r_nodes[0] && r <= self.r_nodes[self.nr() - 1]);
        let w = match self.spacing {
            Spacing::Geometric => r.ln(),
            Spacing::MappedUniform => r / (1.0 + r),
        };
        let k = ((w - self.w_nodes[0]) / self.dw).floor() as usize;
        let k = k.min(self.nr() - 1);
        let p = 9usize.min(self.nr());
        let start = k.saturating_sub(p / 2).min(self.nr() - p);
        let nodes = &self.w_nodes[start..start + p];
        let tables = crate::quad::fd_weights(w, nodes, 0);
        nodes
            .iter()
            .enumerate()
            .map(|(m, _)| tables[0][m] * f[start + m])
            .sum()
    }

    /// ∫ f dbeta over [0, pi/2].
    pub fn integrate_angular(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.b_quad).map(|(&v, &w)| v * w).sum()
    }

    /// ∬ f g dR dbeta.
    pub fn inner(&self, f: &ScalarField, g: &ScalarField) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.nr() {
            let mut row = 0.0;
            for j in 0..self.nb() {
                row += f.get(i, j) * g.get(i, j) * self.b_quad[j];
            }
            acc += row * self.r_quad[i];
        }
        acc
    }

    /// ∬ f² w dR dbeta.
    pub fn weighted_sq(&self, f: &ScalarField, w: &ScalarField) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.nr() {
            let mut row = 0.0;
            for j in 0..self.nb() {
                let v = f.get(i, j);
                row += v * v * w.get(i, j) * self.b_quad[j];
            }
            acc += row * self.r_quad[i];
        }
        acc
    }
}
