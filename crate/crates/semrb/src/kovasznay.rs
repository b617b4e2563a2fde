//! Kovasznay flow: a closed-form steady Navier-Stokes solution used as the
//! verification benchmark. Dirichlet data is taken from the exact solution
//! on all four sides and the H1 velocity error is measured against it under
//! p-refinement.

use crate::assembly::BoundaryData;
use crate::basis::{Basis2d, BasisSpec};
use crate::error::Result;
use crate::mesh::{build_channel_mesh, BoundaryTag, BoundaryTags, QuadMesh};
use crate::solver::{solve_steady, Discretization, IterationConfig};

/// Exact solution at Reynolds number `re` (viscosity 1/re), shifted so the
/// usual window around the origin maps into [0,1]^2.
#[derive(Debug, Clone, Copy)]
pub struct Kovasznay {
    pub re: f64,
    lambda: f64,
    shift: (f64, f64),
}

impl Kovasznay {
    pub fn new(re: f64) -> Self {
        let lambda = 0.5 * re - (0.25 * re * re + 4.0 * std::f64::consts::PI.powi(2)).sqrt();
        Kovasznay {
            re,
            lambda,
            shift: (0.5, 0.5),
        }
    }

    pub fn viscosity(&self) -> f64 {
        1.0 / self.re
    }

    pub fn velocity(&self, x: f64, y: f64) -> (f64, f64) {
        let two_pi = 2.0 * std::f64::consts::PI;
        let (xs, ys) = (x - self.shift.0, y - self.shift.1);
        let e = (self.lambda * xs).exp();
        (
            1.0 - e * (two_pi * ys).cos(),
            self.lambda / two_pi * e * (two_pi * ys).sin(),
        )
    }

    /// (du/dx, du/dy, dv/dx, dv/dy).
    pub fn velocity_gradient(&self, x: f64, y: f64) -> (f64, f64, f64, f64) {
        let two_pi = 2.0 * std::f64::consts::PI;
        let (xs, ys) = (x - self.shift.0, y - self.shift.1);
        let e = (self.lambda * xs).exp();
        let (s, c) = ((two_pi * ys).sin(), (two_pi * ys).cos());
        (
            -self.lambda * e * c,
            two_pi * e * s,
            self.lambda * self.lambda / two_pi * e * s,
            self.lambda * e * c,
        )
    }

    pub fn boundary_data(&self) -> BoundaryData<'_> {
        let me = *self;
        BoundaryData {
            fx: Box::new(move |x, y| me.velocity(x, y).0),
            fy: Box::new(move |x, y| me.velocity(x, y).1),
            y_breaks: Vec::new(),
        }
    }
}

/// Dirichlet on every boundary edge (removes the outflow side, so the
/// pressure nullspace is pinned automatically).
pub fn all_dirichlet_tags(mesh: &QuadMesh) -> BoundaryTags {
    let edge_tags = mesh
        .edges
        .iter()
        .map(|e| e.on_boundary.then_some(BoundaryTag::Wall))
        .collect();
    BoundaryTags {
        edge_tags,
        inflow_span: (0.0, 0.0),
    }
}

#[derive(Debug, Clone)]
pub struct VerifyRow {
    pub order: usize,
    pub h1_error: f64,
    pub rel_h1_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// H1 velocity error of a discrete field against the exact solution,
/// integrated with an elevated quadrature so the error functional itself is
/// resolved.
pub fn h1_error_against_exact(
    disc: &Discretization,
    field: &crate::assembly::FlowField,
    exact: &Kovasznay,
) -> (f64, f64) {
    let p = disc.basis().spec.order_velocity;
    let fine = Basis2d::new(BasisSpec::new(p, Some(p + 8)).expect("spec")).expect("basis");
    let q = fine.rule.nodes.len();
    let n2 = fine.n_velocity_modes();
    let mut err_sq = 0.0;
    let mut ref_sq = 0.0;
    for (e, g) in disc.mesh().elements.iter().enumerate() {
        let jac = g.jacobian();
        let cx = field.velocity[e].rows(0, n2).into_owned();
        let cy = field.velocity[e].rows(n2, n2).into_owned();
        let vx = &fine.phi * &cx;
        let vy = &fine.phi * &cy;
        let gxx = &fine.grad_xi * &cx * (2.0 / g.hx);
        let gyx = &fine.grad_eta * &cx * (2.0 / g.hy);
        let gxy = &fine.grad_xi * &cy * (2.0 / g.hx);
        let gyy = &fine.grad_eta * &cy * (2.0 / g.hy);
        for a in 0..q {
            for b in 0..q {
                let pt = a * q + b;
                let w = jac * fine.weights[pt];
                let (x, y) = g.to_physical(fine.rule.nodes[a], fine.rule.nodes[b]);
                let (ux, uy) = exact.velocity(x, y);
                let (dux, duy, dvx, dvy) = exact.velocity_gradient(x, y);
                let terms = [
                    (vx[pt], ux),
                    (vy[pt], uy),
                    (gxx[pt], dux),
                    (gyx[pt], duy),
                    (gxy[pt], dvx),
                    (gyy[pt], dvy),
                ];
                for (num, exa) in terms {
                    err_sq += w * (num - exa) * (num - exa);
                    ref_sq += w * exa * exa;
                }
            }
        }
    }
    (err_sq.sqrt(), (err_sq / ref_sq).sqrt())
}

/// p-refinement study: steady solves on an nx-by-ny unit-square mesh with
/// exact Dirichlet traces, reporting the H1 velocity error per order.
pub fn convergence_study(
    orders: &[usize],
    re: f64,
    nx: usize,
    ny: usize,
    cfg: &IterationConfig,
) -> Result<Vec<VerifyRow>> {
    let exact = Kovasznay::new(re);
    let mut rows = Vec::new();
    for &p in orders {
        let mesh = build_channel_mesh(nx, ny, 1.0, 1.0)?;
        let tags = all_dirichlet_tags(&mesh);
        let basis = Basis2d::new(BasisSpec::new(p, None)?)?;
        let disc = Discretization::new(mesh, basis, tags);
        let data = exact.boundary_data();
        let prescribed =
            crate::assembly::project_dirichlet(&disc.ops, &disc.tags, &disc.maps, &data);
        let solve = solve_steady(&disc, exact.viscosity(), None, &prescribed, cfg)?;
        let (h1, rel) = h1_error_against_exact(&disc, &solve.field, &exact);
        log::info!(
            "kovasznay p={p}: H1 error {h1:.3e} (rel {rel:.3e}) in {} iterations",
            solve.iterations
        );
        rows.push(VerifyRow {
            order: p,
            h1_error: h1,
            rel_h1_error: rel,
            iterations: solve.iterations,
            converged: solve.converged,
        });
    }
    Ok(rows)
}
