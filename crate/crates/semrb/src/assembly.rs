//! Per-element block assembly of the discrete Oseen system
//!
//! ```text
//!   [ A        -D_bnd^T   B     ] [ v_bnd ]   [ f_bnd ]
//!   [ -D_bnd    0        -D_int ] [ p     ] = [ 0     ]
//!   [ Bt       -D_int^T   C     ] [ v_int ]   [ f_int ]
//! ```
//!
//! with `A = nu*K + N(u_k)` routed by the boundary/interior identity of the
//! row and column velocity modes, `D_{q,m} = integral of psi_q div(beta_m)`,
//! and the convective block `N` linear in the linearization field. Velocity
//! components are blocked x-first within every dof group.

use crate::basis::Basis2d;
use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, BoundaryTags, DofMaps, QuadMesh};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Full-order state: modal velocity and pressure coefficients per element.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub nu: f64,
    /// Per element, `2 * (p+1)^2` entries: x-component modes then y.
    pub velocity: Vec<DVector<f64>>,
    /// Per element, `(p-1)^2` entries.
    pub pressure: Vec<DVector<f64>>,
    pub iterations: usize,
}

impl FlowField {
    pub fn zero(mesh: &QuadMesh, basis: &Basis2d) -> Self {
        let n2 = basis.n_velocity_modes();
        let np = basis.n_pressure_modes();
        FlowField {
            nu: 0.0,
            velocity: vec![DVector::zeros(2 * n2); mesh.n_elements()],
            pressure: vec![DVector::zeros(np); mesh.n_elements()],
            iterations: 0,
        }
    }

    pub fn n_elements(&self) -> usize {
        self.velocity.len()
    }

    /// omega * a + (1 - omega) * b, used for under-relaxed iterates.
    pub fn relaxed(a: &FlowField, b: &FlowField, omega: f64) -> FlowField {
        let velocity = a
            .velocity
            .iter()
            .zip(&b.velocity)
            .map(|(x, y)| x * omega + y * (1.0 - omega))
            .collect();
        let pressure = a
            .pressure
            .iter()
            .zip(&b.pressure)
            .map(|(x, y)| x * omega + y * (1.0 - omega))
            .collect();
        FlowField {
            nu: a.nu,
            velocity,
            pressure,
            iterations: a.iterations,
        }
    }
}

/// Parabolic inflow profile `(y - y0)(y1 - y) `on the span, zero outside,
/// optionally skewed by a one-sided factor `1 + perturbation * (y - mid)`.
#[derive(Debug, Clone, Copy)]
pub struct InflowProfile {
    pub y0: f64,
    pub y1: f64,
    pub perturbation: f64,
}

impl InflowProfile {
    pub fn new(y0: f64, y1: f64) -> Self {
        InflowProfile {
            y0,
            y1,
            perturbation: 0.0,
        }
    }

    pub fn with_perturbation(mut self, eps: f64) -> Self {
        self.perturbation = eps;
        self
    }

    pub fn eval(&self, y: f64) -> f64 {
        if y <= self.y0 || y >= self.y1 {
            return 0.0;
        }
        let base = (y - self.y0) * (self.y1 - y);
        base * (1.0 + self.perturbation * (y - 0.5 * (self.y0 + self.y1)))
    }
}

/// Prescribed velocity on the Dirichlet part of the boundary.
pub struct BoundaryData<'a> {
    pub fx: Box<dyn Fn(f64, f64) -> f64 + Sync + 'a>,
    pub fy: Box<dyn Fn(f64, f64) -> f64 + Sync + 'a>,
    /// y-coordinates where the data has kinks (splits edge quadrature).
    pub y_breaks: Vec<f64>,
}

impl<'a> BoundaryData<'a> {
    pub fn zero() -> Self {
        BoundaryData {
            fx: Box::new(|_, _| 0.0),
            fy: Box::new(|_, _| 0.0),
            y_breaks: Vec::new(),
        }
    }

    pub fn from_inflow(profile: InflowProfile) -> Self {
        BoundaryData {
            fx: Box::new(move |x, y| if x.abs() < 1e-12 { profile.eval(y) } else { 0.0 }),
            fy: Box::new(|_, _| 0.0),
            y_breaks: vec![profile.y0, profile.y1],
        }
    }
}

/// Per-element blocks of the Oseen system plus the stored block dimensions.
#[derive(Debug, Clone)]
pub struct ElementBlocks {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// The (3,1) block, i.e. the transpose of Btilde.
    pub bt: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d_bnd: DMatrix<f64>,
    pub d_int: DMatrix<f64>,
    pub f_bnd: DVector<f64>,
    pub f_int: DVector<f64>,
}

impl ElementBlocks {
    /// Residual of the local Eq-7 rows at a given local state.
    pub fn apply(
        &self,
        v_bnd: &DVector<f64>,
        p: &DVector<f64>,
        v_int: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let r_bnd = &self.a * v_bnd - self.d_bnd.transpose() * p + &self.b * v_int;
        let r_p = -(&self.d_bnd * v_bnd) - &self.d_int * v_int;
        let r_int = &self.bt * v_bnd - self.d_int.transpose() * p + &self.c * v_int;
        (r_bnd, r_p, r_int)
    }
}

#[derive(Debug, Clone)]
pub struct LocalBlockSystem {
    pub nu: f64,
    pub elements: Vec<ElementBlocks>,
    pub n_bnd_scalar: usize,
    pub n_int_scalar: usize,
    pub n_pressure: usize,
}

impl LocalBlockSystem {
    /// Largest entrywise deviation from the Stokes identity B = Btilde^T.
    pub fn stokes_symmetry_error(&self) -> f64 {
        self.elements
            .iter()
            .map(|e| {
                let diff = &e.b - e.bt.transpose();
                diff.amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Precomputed reference matrices shared by all assemblies on one mesh/basis.
pub struct ElementOperators {
    pub mesh: QuadMesh,
    pub basis: Basis2d,
    /// Reference grad-grad matrices without metric terms.
    kxx: DMatrix<f64>,
    kyy: DMatrix<f64>,
    /// Reference divergence matrices, pressure rows x velocity-mode columns.
    dx_ref: DMatrix<f64>,
    dy_ref: DMatrix<f64>,
}

impl ElementOperators {
    pub fn new(mesh: QuadMesh, basis: Basis2d) -> Self {
        let w = &basis.weights;
        let wgx = scale_rows(&basis.grad_xi, w);
        let wgy = scale_rows(&basis.grad_eta, w);
        let kxx = basis.grad_xi.transpose() * &wgx;
        let kyy = basis.grad_eta.transpose() * &wgy;
        let dx_ref = basis.psi.transpose() * &wgx;
        let dy_ref = basis.psi.transpose() * &wgy;
        ElementOperators {
            mesh,
            basis,
            kxx,
            kyy,
            dx_ref,
            dy_ref,
        }
    }

    /// Scalar viscous block for element `e` (unit viscosity).
    pub fn viscous_scalar(&self, e: usize) -> DMatrix<f64> {
        let g = self.mesh.elements[e];
        &self.kxx * (g.hy / g.hx) + &self.kyy * (g.hx / g.hy)
    }

    /// Scalar divergence blocks (d/dx, d/dy rows against pressure tests).
    pub fn divergence_scalar(&self, e: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let g = self.mesh.elements[e];
        (&self.dx_ref * (0.5 * g.hy), &self.dy_ref * (0.5 * g.hx))
    }

    /// Scalar convective block linearized at quad-point velocity samples.
    pub fn convective_scalar(&self, e: usize, wx: &[f64], wy: &[f64]) -> DMatrix<f64> {
        let g = self.mesh.elements[e];
        let w = &self.basis.weights;
        let sx = 0.5 * g.hy;
        let sy = 0.5 * g.hx;
        let mut weighted = DMatrix::zeros(self.basis.n_quad(), self.basis.n_velocity_modes());
        for q in 0..self.basis.n_quad() {
            let cx = w[q] * wx[q] * sx;
            let cy = w[q] * wy[q] * sy;
            for m in 0..self.basis.n_velocity_modes() {
                weighted[(q, m)] = cx * self.basis.grad_xi[(q, m)] + cy * self.basis.grad_eta[(q, m)];
            }
        }
        self.basis.phi.transpose() * weighted
    }

    /// Velocity samples of a field at the quadrature points of element `e`.
    pub fn velocity_at_quad(&self, field: &FlowField, e: usize) -> (DVector<f64>, DVector<f64>) {
        let n2 = self.basis.n_velocity_modes();
        let cx = field.velocity[e].rows(0, n2);
        let cy = field.velocity[e].rows(n2, n2);
        (&self.basis.phi * cx, &self.basis.phi * cy)
    }

    /// Squared H1 norm of the velocity: sum over elements of
    /// |v|^2 + |grad v|^2 integrated by quadrature.
    pub fn h1_norm_sq(&self, field: &FlowField) -> f64 {
        let n2 = self.basis.n_velocity_modes();
        let mut total = 0.0;
        for e in 0..self.mesh.n_elements() {
            let g = self.mesh.elements[e];
            let jac = g.jacobian();
            let cx = field.velocity[e].rows(0, n2).into_owned();
            let cy = field.velocity[e].rows(n2, n2).into_owned();
            let vx = &self.basis.phi * &cx;
            let vy = &self.basis.phi * &cy;
            let dxx = &self.basis.grad_xi * &cx * (2.0 / g.hx);
            let dyx = &self.basis.grad_eta * &cx * (2.0 / g.hy);
            let dxy = &self.basis.grad_xi * &cy * (2.0 / g.hx);
            let dyy = &self.basis.grad_eta * &cy * (2.0 / g.hy);
            for q in 0..self.basis.n_quad() {
                total += jac
                    * self.basis.weights[q]
                    * (vx[q] * vx[q]
                        + vy[q] * vy[q]
                        + dxx[q] * dxx[q]
                        + dyx[q] * dyx[q]
                        + dxy[q] * dxy[q]
                        + dyy[q] * dyy[q]);
            }
        }
        total
    }

    pub fn h1_norm(&self, field: &FlowField) -> f64 {
        self.h1_norm_sq(field).sqrt()
    }

    /// ||a - b||_H1 / ||a||_H1, falling back to the absolute norm of `b`
    /// when `a` vanishes.
    pub fn h1_relative_change(&self, a: &FlowField, b: &FlowField) -> Result<f64> {
        if a.n_elements() != b.n_elements() {
            return Err(Error::invalid("fields live on different meshes"));
        }
        let diff = FlowField {
            nu: a.nu,
            velocity: a
                .velocity
                .iter()
                .zip(&b.velocity)
                .map(|(x, y)| x - y)
                .collect(),
            pressure: a.pressure.clone(),
            iterations: 0,
        };
        let na = self.h1_norm(a);
        if na == 0.0 {
            return Ok(self.h1_norm(b));
        }
        Ok(self.h1_norm(&diff) / na)
    }

    /// Largest continuity-equation functional over all pressure test modes.
    pub fn divergence_residual(&self, field: &FlowField) -> f64 {
        let n2 = self.basis.n_velocity_modes();
        let mut worst: f64 = 0.0;
        for e in 0..self.mesh.n_elements() {
            let (dx, dy) = self.divergence_scalar(e);
            let cx = field.velocity[e].rows(0, n2);
            let cy = field.velocity[e].rows(n2, n2);
            let div = dx * cx + dy * cy;
            worst = worst.max(div.amax());
        }
        worst
    }
}

fn scale_rows(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (q, &wq) in w.iter().enumerate() {
        out.row_mut(q).scale_mut(wq);
    }
    out
}

fn take(src: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| src[(rows[r], cols[c])])
}

/// [[sub, 0], [0, sub]] for the two velocity components.
fn two_components(sub: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = sub.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    out.view_mut((0, 0), (r, c)).copy_from(sub);
    out.view_mut((r, c), (r, c)).copy_from(sub);
    out
}

/// [dx[:, cols] | dy[:, cols]] pressure-row block over both components.
fn divergence_block(dx: &DMatrix<f64>, dy: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let np = dx.nrows();
    let mut out = DMatrix::zeros(np, 2 * cols.len());
    for (c, &m) in cols.iter().enumerate() {
        for q in 0..np {
            out[(q, c)] = dx[(q, m)];
            out[(q, cols.len() + c)] = dy[(q, m)];
        }
    }
    out
}

/// Assemble the per-element blocks of the Oseen system linearized at `u_k`
/// (`None` gives the Stokes operator) with viscosity `nu` and an optional
/// body force.
pub fn assemble_oseen(
    ops: &ElementOperators,
    nu: f64,
    u_k: Option<&FlowField>,
    body_force: Option<&(dyn Fn(f64, f64) -> (f64, f64) + Sync)>,
) -> Result<LocalBlockSystem> {
    if !(nu > 0.0) {
        return Err(Error::invalid(format!("viscosity must be positive, got {nu}")));
    }
    if let Some(f) = u_k {
        if f.n_elements() != ops.mesh.n_elements()
            || f.velocity[0].len() != 2 * ops.basis.n_velocity_modes()
        {
            return Err(Error::invalid(
                "linearization field does not match the mesh/basis",
            ));
        }
    }
    let bnd = &ops.basis.boundary_modes;
    let int = &ops.basis.interior_modes;
    let q = ops.basis.rule.nodes.len();

    let elements: Vec<ElementBlocks> = (0..ops.mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let mut scalar = ops.viscous_scalar(e) * nu;
            if let Some(field) = u_k {
                let (wx, wy) = ops.velocity_at_quad(field, e);
                scalar += ops.convective_scalar(e, wx.as_slice(), wy.as_slice());
            }
            let (dx, dy) = ops.divergence_scalar(e);

            let a = two_components(&take(&scalar, bnd, bnd));
            let b = two_components(&take(&scalar, bnd, int));
            let bt = two_components(&take(&scalar, int, bnd));
            let c = two_components(&take(&scalar, int, int));
            let d_bnd = divergence_block(&dx, &dy, bnd);
            let d_int = divergence_block(&dx, &dy, int);

            let (f_bnd, f_int) = match body_force {
                None => (
                    DVector::zeros(2 * bnd.len()),
                    DVector::zeros(2 * int.len()),
                ),
                Some(f) => {
                    let g = ops.mesh.elements[e];
                    let jac = g.jacobian();
                    let nq = ops.basis.n_quad();
                    let mut fx = DVector::zeros(nq);
                    let mut fy = DVector::zeros(nq);
                    for a_idx in 0..q {
                        for b_idx in 0..q {
                            let pt = a_idx * q + b_idx;
                            let (x, y) = g.to_physical(
                                ops.basis.rule.nodes[a_idx],
                                ops.basis.rule.nodes[b_idx],
                            );
                            let (vx, vy) = f(x, y);
                            fx[pt] = jac * ops.basis.weights[pt] * vx;
                            fy[pt] = jac * ops.basis.weights[pt] * vy;
                        }
                    }
                    let fv_x = ops.basis.phi.transpose() * fx;
                    let fv_y = ops.basis.phi.transpose() * fy;
                    let pick = |ids: &[usize]| {
                        let mut out = DVector::zeros(2 * ids.len());
                        for (r, &m) in ids.iter().enumerate() {
                            out[r] = fv_x[m];
                            out[ids.len() + r] = fv_y[m];
                        }
                        out
                    };
                    (pick(bnd), pick(int))
                }
            };

            ElementBlocks {
                a,
                b,
                bt,
                c,
                d_bnd,
                d_int,
                f_bnd,
                f_int,
            }
        })
        .collect();

    Ok(LocalBlockSystem {
        nu,
        elements,
        n_bnd_scalar: bnd.len(),
        n_int_scalar: int.len(),
        n_pressure: ops.basis.n_pressure_modes(),
    })
}

/// L2 trace projection of Dirichlet data onto the edge trace spaces.
///
/// Vertex modes are nodal at the element corners, so they take the data
/// value there; the edge bubble coefficients solve the 1D mass system of
/// the interior modes against the data, with the edge quadrature split at
/// declared breakpoints so piecewise-polynomial profiles are integrated
/// exactly. Returns prescribed values over all global velocity dofs (zero
/// at free ones).
pub fn project_dirichlet(
    ops: &ElementOperators,
    tags: &BoundaryTags,
    maps: &DofMaps,
    data: &BoundaryData,
) -> DVector<f64> {
    let p = ops.basis.spec.order_velocity;
    let em = p - 1;
    let mut values = DVector::zeros(maps.n_global_velocity);
    if em == 0 && maps.n_scalar == 0 {
        return values;
    }
    let edge_rule = crate::basis::gauss_lobatto_rule(p + 8).expect("edge rule");

    for (eid, edge) in ops.mesh.edges.iter().enumerate() {
        let dirichlet = matches!(
            tags.edge_tags[eid],
            Some(BoundaryTag::Wall) | Some(BoundaryTag::Inflow)
        );
        if !dirichlet {
            continue;
        }
        let (ax, ay) = ops.mesh.vertex_coords(edge.vertices.0);
        let (bx, by) = ops.mesh.vertex_coords(edge.vertices.1);
        let point = |s: f64| {
            (
                ax + 0.5 * (1.0 + s) * (bx - ax),
                ay + 0.5 * (1.0 + s) * (by - ay),
            )
        };
        // Breakpoints mapped into the edge parameter, vertical edges only
        // (the data kinks are y-positions).
        let mut splits = vec![-1.0];
        if !edge.horizontal {
            for &yb in &data.y_breaks {
                if yb > ay + 1e-12 && yb < by - 1e-12 {
                    splits.push(2.0 * (yb - ay) / (by - ay) - 1.0);
                }
            }
        }
        splits.push(1.0);
        splits.sort_by(|a, b| a.partial_cmp(b).unwrap());

        for comp in 0..2 {
            let g: &dyn Fn(f64, f64) -> f64 = if comp == 0 { &data.fx } else { &data.fy };
            let (va_x, va_y) = point(-1.0);
            let (vb_x, vb_y) = point(1.0);
            let ga = g(va_x, va_y);
            let gb = g(vb_x, vb_y);
            values[comp * maps.n_scalar + edge.vertices.0] = ga;
            values[comp * maps.n_scalar + edge.vertices.1] = gb;
            if em == 0 {
                continue;
            }

            let mut mass = DMatrix::zeros(em, em);
            let mut rhs = DVector::zeros(em);
            for seg in splits.windows(2) {
                let (s0, s1) = (seg[0], seg[1]);
                let half = 0.5 * (s1 - s0);
                if half <= 0.0 {
                    continue;
                }
                for (t, &wt) in edge_rule.nodes.iter().zip(&edge_rule.weights) {
                    let s = s0 + half * (1.0 + t);
                    let w = wt * half;
                    let (x, y) = point(s);
                    let phis: Vec<f64> =
                        (1..p).map(|k| crate::basis::velocity_mode(p, k, s).0).collect();
                    let hat0 = crate::basis::velocity_mode(p, 0, s).0;
                    let hat1 = crate::basis::velocity_mode(p, p, s).0;
                    let resid = g(x, y) - ga * hat0 - gb * hat1;
                    for k in 0..em {
                        rhs[k] += w * resid * phis[k];
                        for l in 0..em {
                            mass[(k, l)] += w * phis[k] * phis[l];
                        }
                    }
                }
            }
            let coeffs = mass.lu().solve(&rhs).expect("edge mass matrix is SPD");
            let base = maps.n_scalar * comp + 0;
            let _ = base;
            for k in 0..em {
                let gid = edge_dof_gid(ops, eid, k + 1);
                values[comp * maps.n_scalar + gid] = coeffs[k];
            }
        }
    }
    values
}

fn edge_dof_gid(ops: &ElementOperators, eid: usize, k: usize) -> usize {
    let p = ops.basis.spec.order_velocity;
    ops.mesh.n_vertices() + eid * (p - 1) + (k - 1)
}

/// Scatter prescribed global values plus free unknowns to the local
/// boundary-velocity vector of one element.
pub fn local_boundary_values(
    maps: &DofMaps,
    e: usize,
    free: &DVector<f64>,
    prescribed: &DVector<f64>,
) -> DVector<f64> {
    let nb = maps.gather[e].len();
    let mut out = DVector::zeros(2 * nb);
    for comp in 0..2 {
        for (r, ge) in maps.gather[e].iter().enumerate() {
            let gdof = comp * maps.n_scalar + ge.gid;
            let value = match maps.free_index[gdof] {
                Some(fi) => free[fi],
                None => prescribed[gdof],
            };
            out[comp * nb + r] = ge.sign * value;
        }
    }
    out
}
