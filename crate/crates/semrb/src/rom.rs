//! POD compression of steady-state snapshots and the reduced Oseen model.
//!
//! Snapshots live in the hat ordering of the condensed system: free global
//! boundary velocity, element mean pressures, then the remaining pressure
//! modes. Because the level-1 condensation buries the parameter-dependent
//! inverse of C inside the condensed blocks, the reduced operators are not
//! expanded on the condensed form: the reduced space is augmented with POD
//! modes of the interior-velocity snapshots and the full three-row block
//! system is projected instead. Every block there is affine in the
//! viscosity and linear in the linearization field, so the expansion into
//! stored N x N pieces is exact, and the reduced interior coordinate is
//! eliminated online at reduced cost.

use crate::assembly::{ElementOperators, FlowField, LocalBlockSystem};
use crate::error::{Error, Result};
use crate::solver::{Discretization, IterationConfig};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::time::Instant;

/// One converged full-order state in reduced-ready form.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub nu: f64,
    /// Hat-ordered unknown of the condensed system.
    pub hat: DVector<f64>,
    /// Interior velocity coefficients, element-major, x-block then y-block.
    pub v_int: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub fingerprint: u64,
    pub dim_hat: usize,
    pub dim_int: usize,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotSet {
    pub fn new(disc: &Discretization) -> Self {
        let maps = &disc.maps;
        let np = maps.n_pressure_modes;
        let ni = disc.basis().n_interior_modes();
        SnapshotSet {
            fingerprint: disc.fingerprint(),
            dim_hat: maps.dim_b() + maps.n_elements * np.saturating_sub(1),
            dim_int: maps.n_elements * 2 * ni,
            snapshots: Vec::new(),
        }
    }

    pub fn push_field(&mut self, disc: &Discretization, nu: f64, field: &FlowField) {
        let (hat, v_int) = extract_state(disc, field);
        debug_assert_eq!(hat.len(), self.dim_hat);
        debug_assert_eq!(v_int.len(), self.dim_int);
        self.snapshots.push(Snapshot { nu, hat, v_int });
    }

    pub fn hat_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(self.dim_hat, self.snapshots.iter().map(|s| &s.hat))
    }

    pub fn int_matrix(&self) -> DMatrix<f64> {
        columns_to_matrix(self.dim_int, self.snapshots.iter().map(|s| &s.v_int))
    }

    pub fn nus(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.nu).collect()
    }

    /// Rebuild the full field of snapshot `idx` under the given Dirichlet
    /// values.
    pub fn to_field(
        &self,
        disc: &Discretization,
        idx: usize,
        prescribed: &DVector<f64>,
    ) -> FlowField {
        let s = &self.snapshots[idx];
        let mut f = state_to_field(disc, &s.hat, &s.v_int, prescribed);
        f.nu = s.nu;
        f
    }
}

fn columns_to_matrix<'a>(
    nrows: usize,
    cols: impl ExactSizeIterator<Item = &'a DVector<f64>>,
) -> DMatrix<f64> {
    let ncols = cols.len();
    let mut m = DMatrix::zeros(nrows, ncols);
    for (j, c) in cols.enumerate() {
        m.column_mut(j).copy_from(c);
    }
    m
}

/// Split a field into the hat-ordered condensed unknown and the interior
/// velocity vector. Shared boundary dofs are recovered by averaging, which
/// is exact for edge-continuous fields.
pub fn extract_state(disc: &Discretization, field: &FlowField) -> (DVector<f64>, DVector<f64>) {
    let maps = &disc.maps;
    let basis = disc.basis();
    let n2 = basis.n_velocity_modes();
    let ni = basis.n_interior_modes();
    let np = maps.n_pressure_modes;
    let n_el = maps.n_elements;

    let mut global = DVector::zeros(maps.n_global_velocity);
    let mut count = vec![0usize; maps.n_global_velocity];
    for e in 0..n_el {
        for comp in 0..2 {
            for (r, ge) in maps.gather[e].iter().enumerate() {
                let g = comp * maps.n_scalar + ge.gid;
                global[g] += ge.sign * field.velocity[e][comp * n2 + basis.boundary_modes[r]];
                count[g] += 1;
            }
        }
    }
    for (g, &c) in count.iter().enumerate() {
        if c > 0 {
            global[g] /= c as f64;
        }
    }

    let dim_hat = maps.dim_b() + n_el * np.saturating_sub(1);
    let mut hat = DVector::zeros(dim_hat);
    for (fi, &g) in maps.free_velocity.iter().enumerate() {
        hat[fi] = global[g];
    }
    for e in 0..n_el {
        if let Some(bm) = maps.mean_index(e) {
            hat[bm] = field.pressure[e][0];
        }
        for m in 1..np {
            hat[maps.dim_b() + e * (np - 1) + (m - 1)] = field.pressure[e][m];
        }
    }

    let mut v_int = DVector::zeros(n_el * 2 * ni);
    for e in 0..n_el {
        for comp in 0..2 {
            for (r, &m) in basis.interior_modes.iter().enumerate() {
                v_int[e * 2 * ni + comp * ni + r] = field.velocity[e][comp * n2 + m];
            }
        }
    }
    (hat, v_int)
}

/// Inverse of `extract_state`: scatter a hat vector and interior velocity
/// back to per-element coefficients, re-adding the Dirichlet lift.
pub fn state_to_field(
    disc: &Discretization,
    hat: &DVector<f64>,
    v_int: &DVector<f64>,
    prescribed: &DVector<f64>,
) -> FlowField {
    let maps = &disc.maps;
    let basis = disc.basis();
    let n2 = basis.n_velocity_modes();
    let ni = basis.n_interior_modes();
    let np = maps.n_pressure_modes;
    let mut field = FlowField::zero(&disc.ops.mesh, basis);
    for e in 0..maps.n_elements {
        for comp in 0..2 {
            for (r, ge) in maps.gather[e].iter().enumerate() {
                let g = comp * maps.n_scalar + ge.gid;
                let value = match maps.free_index[g] {
                    Some(fi) => hat[fi],
                    None => prescribed[g],
                };
                field.velocity[e][comp * n2 + basis.boundary_modes[r]] = ge.sign * value;
            }
            for (r, &m) in basis.interior_modes.iter().enumerate() {
                field.velocity[e][comp * n2 + m] = v_int[e * 2 * ni + comp * ni + r];
            }
        }
        if np > 0 {
            field.pressure[e][0] = maps.mean_index(e).map_or(0.0, |bm| hat[bm]);
            for m in 1..np {
                field.pressure[e][m] = hat[maps.dim_b() + e * (np - 1) + (m - 1)];
            }
        }
    }
    field
}

/// Truncated POD basis of one snapshot family.
#[derive(Debug, Clone)]
pub struct PodBasis {
    /// Orthonormal modes, one column per retained direction.
    pub modes: DMatrix<f64>,
    /// Full singular value list, nonincreasing.
    pub singular_values: Vec<f64>,
    pub n_retained: usize,
    /// Energy fraction actually captured by the retained modes.
    pub energy_fraction: f64,
}

/// SVD of the snapshot matrix, truncated at the smallest mode count whose
/// squared singular values reach the energy fraction. `energy = 1` keeps
/// everything above numerical rank.
pub fn pod(snapshot_matrix: &DMatrix<f64>, energy: f64) -> Result<PodBasis> {
    if snapshot_matrix.ncols() == 0 {
        return Err(Error::invalid("POD needs at least one snapshot"));
    }
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::invalid("energy fraction must lie in (0, 1]"));
    }
    let svd = snapshot_matrix.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut n = 0;
    if total > 0.0 {
        let mut cum = 0.0;
        for &s in &sv {
            if energy >= 1.0 {
                if s > sv[0] * 1e-13 {
                    n += 1;
                }
            } else {
                n += 1;
                cum += s * s;
                if cum >= energy * total {
                    break;
                }
            }
        }
    }
    let mut modes = DMatrix::zeros(snapshot_matrix.nrows(), n);
    for (j, &i) in order.iter().take(n).enumerate() {
        modes.column_mut(j).copy_from(&u.column(i));
    }
    let captured: f64 = sv.iter().take(n).map(|s| s * s).sum();
    Ok(PodBasis {
        modes,
        singular_values: sv,
        n_retained: n,
        energy_fraction: if total > 0.0 { captured / total } else { 1.0 },
    })
}

/// Relative magnitude of the discarded spectrum, sqrt(1 - retained energy).
pub fn truncation_tail(basis: &PodBasis) -> f64 {
    (1.0 - basis.energy_fraction).max(0.0).sqrt()
}

/// Composed reduced projection: the hat-state POD plus the auxiliary
/// interior-velocity POD that realizes the intermediate projection.
#[derive(Debug, Clone)]
pub struct Projection {
    pub fingerprint: u64,
    pub main: PodBasis,
    pub interior: PodBasis,
}

impl Projection {
    /// The energy criterion truncates the state basis; the auxiliary
    /// interior basis is kept at full snapshot rank. Truncating it saves
    /// nothing (it is at most one mode per snapshot) and starves the
    /// continuity equations of the interior velocity they need, which
    /// destabilizes the reduced saddle point.
    pub fn build(disc: &Discretization, snapshots: &SnapshotSet, energy: f64) -> Result<Self> {
        if snapshots.fingerprint != disc.fingerprint() {
            return Err(Error::FingerprintMismatch {
                found: snapshots.fingerprint,
                expected: disc.fingerprint(),
            });
        }
        if snapshots.snapshots.is_empty() {
            return Err(Error::invalid("snapshot set is empty"));
        }
        let main = pod(&snapshots.hat_matrix(), energy)?;
        let interior = pod(&snapshots.int_matrix(), 1.0)?;
        Ok(Projection {
            fingerprint: snapshots.fingerprint,
            main,
            interior,
        })
    }

    pub fn n_main(&self) -> usize {
        self.main.n_retained
    }

    pub fn n_int(&self) -> usize {
        self.interior.n_retained
    }

    pub fn n_aug(&self) -> usize {
        self.n_main() + self.n_int()
    }
}

/// Velocity and pressure parts of every augmented basis column, scattered
/// to the local layout of one element.
pub struct ElementCols {
    /// 2 (p+1)^2 rows by n_aug columns.
    pub v: DMatrix<f64>,
    /// (p-1)^2 rows by n_aug columns.
    pub p: DMatrix<f64>,
}

/// Scatter the augmented basis to per-element local columns (constrained
/// dofs are homogeneous there; the lift is handled separately).
pub fn local_columns(disc: &Discretization, proj: &Projection) -> Vec<ElementCols> {
    let maps = &disc.maps;
    let basis = disc.basis();
    let n2 = basis.n_velocity_modes();
    let ni = basis.n_interior_modes();
    let np = maps.n_pressure_modes;
    let n_aug = proj.n_aug();
    let nm = proj.n_main();
    (0..maps.n_elements)
        .map(|e| {
            let mut v = DMatrix::zeros(2 * n2, n_aug);
            let mut p = DMatrix::zeros(np, n_aug);
            for j in 0..nm {
                let col = proj.main.modes.column(j);
                for comp in 0..2 {
                    for (r, ge) in maps.gather[e].iter().enumerate() {
                        let g = comp * maps.n_scalar + ge.gid;
                        if let Some(fi) = maps.free_index[g] {
                            v[(comp * n2 + basis.boundary_modes[r], j)] = ge.sign * col[fi];
                        }
                    }
                }
                if np > 0 {
                    if let Some(bm) = maps.mean_index(e) {
                        p[(0, j)] = col[bm];
                    }
                    for m in 1..np {
                        p[(m, j)] = col[maps.dim_b() + e * (np - 1) + (m - 1)];
                    }
                }
            }
            for jj in 0..proj.n_int() {
                let col = proj.interior.modes.column(jj);
                for comp in 0..2 {
                    for (r, &m) in basis.interior_modes.iter().enumerate() {
                        v[(comp * n2 + m, nm + jj)] = col[e * 2 * ni + comp * ni + r];
                    }
                }
            }
            ElementCols { v, p }
        })
        .collect()
}

/// Per-element velocity coefficients of the Dirichlet lift.
pub fn lift_columns(disc: &Discretization, prescribed: &DVector<f64>) -> Vec<DVector<f64>> {
    let maps = &disc.maps;
    let basis = disc.basis();
    let n2 = basis.n_velocity_modes();
    (0..maps.n_elements)
        .map(|e| {
            let mut xl = DVector::zeros(2 * n2);
            for comp in 0..2 {
                for (r, ge) in maps.gather[e].iter().enumerate() {
                    let g = comp * maps.n_scalar + ge.gid;
                    if maps.free_index[g].is_none() {
                        xl[comp * n2 + basis.boundary_modes[r]] = ge.sign * prescribed[g];
                    }
                }
            }
            xl
        })
        .collect()
}

/// Precomputed reduced operators: the online system is assembled as
///   G(nu, c) = nu K_visc + K_fixed + K_conv_lift + sum_m c_m T_conv[m]
/// with the matching right-hand side pieces, all of reduced size.
pub struct RomOperators {
    pub fingerprint: u64,
    pub k_visc: DMatrix<f64>,
    pub k_fixed: DMatrix<f64>,
    pub k_conv_lift: DMatrix<f64>,
    pub t_conv: Vec<DMatrix<f64>>,
    pub r_force: DVector<f64>,
    pub r_visc: DVector<f64>,
    pub r_fixed: DVector<f64>,
    pub r_conv_lift: DVector<f64>,
    /// Column m carries the lift response of the convective slice m.
    pub r_conv_modes: DMatrix<f64>,
    pub projection: Projection,
    pub prescribed: DVector<f64>,
    pub training_nus: Vec<f64>,
    /// Reduced coordinates of the training snapshots, one column each;
    /// interpolated in the parameter to warm-start online solves.
    pub training_coords: DMatrix<f64>,
    pub energy: f64,
}

impl RomOperators {
    pub fn n_main(&self) -> usize {
        self.projection.n_main()
    }

    pub fn n_int(&self) -> usize {
        self.projection.n_int()
    }

    pub fn n_aug(&self) -> usize {
        self.projection.n_aug()
    }

    pub fn online_matrix(&self, nu: f64, coords: &DVector<f64>) -> DMatrix<f64> {
        let mut g = &self.k_fixed + &self.k_conv_lift + &self.k_visc * nu;
        for (m, t) in self.t_conv.iter().enumerate() {
            g += t * coords[m];
        }
        g
    }

    pub fn online_rhs(&self, nu: f64, coords: &DVector<f64>) -> DVector<f64> {
        &self.r_force
            - (&self.r_visc * nu + &self.r_fixed + &self.r_conv_lift + &self.r_conv_modes * coords)
    }

    /// Warm start from the stored training coordinates, linearly
    /// interpolated in the viscosity (clamped at the range ends).
    pub fn seed_for(&self, nu: f64) -> Option<DVector<f64>> {
        if self.training_nus.is_empty() || self.training_coords.ncols() != self.training_nus.len()
        {
            return None;
        }
        let mut order: Vec<usize> = (0..self.training_nus.len()).collect();
        order.sort_by(|&a, &b| self.training_nus[a].partial_cmp(&self.training_nus[b]).unwrap());
        let lo = order[0];
        let hi = order[order.len() - 1];
        if nu <= self.training_nus[lo] {
            return Some(self.training_coords.column(lo).into_owned());
        }
        if nu >= self.training_nus[hi] {
            return Some(self.training_coords.column(hi).into_owned());
        }
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (na, nb) = (self.training_nus[a], self.training_nus[b]);
            if nu >= na && nu <= nb {
                let t = (nu - na) / (nb - na);
                return Some(
                    self.training_coords.column(a) * (1.0 - t)
                        + self.training_coords.column(b) * t,
                );
            }
        }
        None
    }
}

/// Project the full operator families onto the augmented basis and store
/// every parameter-independent piece.
pub fn offline_build(
    disc: &Discretization,
    snapshots: &SnapshotSet,
    prescribed: &DVector<f64>,
    energy: f64,
) -> Result<RomOperators> {
    let proj = Projection::build(disc, snapshots, energy)?;
    let mut coords = DMatrix::zeros(proj.n_aug(), snapshots.snapshots.len());
    for (j, s) in snapshots.snapshots.iter().enumerate() {
        let a = proj.main.modes.transpose() * &s.hat;
        let d = proj.interior.modes.transpose() * &s.v_int;
        coords.view_mut((0, j), (proj.n_main(), 1)).copy_from(&a);
        coords
            .view_mut((proj.n_main(), j), (proj.n_int(), 1))
            .copy_from(&d);
    }
    build_with_projection(disc, proj, prescribed, snapshots.nus(), coords, energy)
}

pub fn build_with_projection(
    disc: &Discretization,
    proj: Projection,
    prescribed: &DVector<f64>,
    training_nus: Vec<f64>,
    training_coords: DMatrix<f64>,
    energy: f64,
) -> Result<RomOperators> {
    let basis = disc.basis();
    let n2 = basis.n_velocity_modes();
    let n_aug = proj.n_aug();
    let cols = local_columns(disc, &proj);
    let lift = lift_columns(disc, prescribed);
    let n_el = disc.maps.n_elements;

    let mut k_visc = DMatrix::zeros(n_aug, n_aug);
    let mut k_fixed = DMatrix::zeros(n_aug, n_aug);
    let mut k_conv_lift = DMatrix::zeros(n_aug, n_aug);
    let mut r_visc = DVector::zeros(n_aug);
    let mut r_fixed = DVector::zeros(n_aug);
    let mut r_conv_lift = DVector::zeros(n_aug);

    for e in 0..n_el {
        let ce = &cols[e];
        let xl = &lift[e];
        let k = disc.ops.viscous_scalar(e);
        let (dx, dy) = disc.ops.divergence_scalar(e);

        let kv = apply_scalar_per_component(&k, &ce.v, n2);
        k_visc += ce.v.transpose() * &kv;
        r_visc += ce.v.transpose() * apply_scalar_vec(&k, xl, n2);

        // Pressure-divergence couplings: momentum rows -D^T p, continuity
        // rows -D v.
        let d_full = full_divergence(&dx, &dy, n2);
        let rv = -(d_full.transpose() * &ce.p);
        let rp = -(&d_full * &ce.v);
        k_fixed += ce.v.transpose() * rv + ce.p.transpose() * rp;
        r_fixed += ce.p.transpose() * (-(&d_full * xl));

        // Convective block linearized at the lift.
        let (wx, wy) = quad_velocity(disc, e, xl);
        let nmat = disc.ops.convective_scalar(e, wx.as_slice(), wy.as_slice());
        let nv = apply_scalar_per_component(&nmat, &ce.v, n2);
        k_conv_lift += ce.v.transpose() * &nv;
        r_conv_lift += ce.v.transpose() * apply_scalar_vec(&nmat, xl, n2);
    }

    // One convective slice per augmented mode, linearized at its velocity.
    let slices: Vec<(DMatrix<f64>, DVector<f64>)> = (0..n_aug)
        .into_par_iter()
        .map(|m| {
            let mut t = DMatrix::zeros(n_aug, n_aug);
            let mut r = DVector::zeros(n_aug);
            for e in 0..n_el {
                let ce = &cols[e];
                let w = ce.v.column(m).into_owned();
                let (wx, wy) = quad_velocity(disc, e, &w);
                let nmat = disc.ops.convective_scalar(e, wx.as_slice(), wy.as_slice());
                t += ce.v.transpose() * apply_scalar_per_component(&nmat, &ce.v, n2);
                r += ce.v.transpose() * apply_scalar_vec(&nmat, &lift[e], n2);
            }
            (t, r)
        })
        .collect();
    let mut t_conv = Vec::with_capacity(n_aug);
    let mut r_conv_modes = DMatrix::zeros(n_aug, n_aug);
    for (m, (t, r)) in slices.into_iter().enumerate() {
        t_conv.push(t);
        r_conv_modes.column_mut(m).copy_from(&r);
    }

    Ok(RomOperators {
        fingerprint: proj.fingerprint,
        k_visc,
        k_fixed,
        k_conv_lift,
        t_conv,
        r_force: DVector::zeros(n_aug),
        r_visc,
        r_fixed,
        r_conv_lift,
        r_conv_modes,
        projection: proj,
        prescribed: prescribed.clone(),
        training_nus,
        training_coords,
        energy,
    })
}

fn full_divergence(dx: &DMatrix<f64>, dy: &DMatrix<f64>, n2: usize) -> DMatrix<f64> {
    let np = dx.nrows();
    let mut d = DMatrix::zeros(np, 2 * n2);
    d.view_mut((0, 0), (np, n2)).copy_from(dx);
    d.view_mut((0, n2), (np, n2)).copy_from(dy);
    d
}

fn apply_scalar_per_component(s: &DMatrix<f64>, v: &DMatrix<f64>, n2: usize) -> DMatrix<f64> {
    let n_cols = v.ncols();
    let mut out = DMatrix::zeros(2 * n2, n_cols);
    out.view_mut((0, 0), (n2, n_cols))
        .copy_from(&(s * v.view((0, 0), (n2, n_cols))));
    out.view_mut((n2, 0), (n2, n_cols))
        .copy_from(&(s * v.view((n2, 0), (n2, n_cols))));
    out
}

fn apply_scalar_vec(s: &DMatrix<f64>, v: &DVector<f64>, n2: usize) -> DVector<f64> {
    let mut out = DVector::zeros(2 * n2);
    out.rows_mut(0, n2).copy_from(&(s * v.rows(0, n2)));
    out.rows_mut(n2, n2).copy_from(&(s * v.rows(n2, n2)));
    out
}

fn quad_velocity(disc: &Discretization, e: usize, coeffs: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n2 = disc.basis().n_velocity_modes();
    let _ = e;
    (
        &disc.basis().phi * coeffs.rows(0, n2),
        &disc.basis().phi * coeffs.rows(n2, n2),
    )
}

/// Direct Galerkin projection of an assembled local system onto the
/// augmented basis; the oracle the online expansion is tested against.
pub fn project_local_system(
    disc: &Discretization,
    proj: &Projection,
    local: &LocalBlockSystem,
) -> DMatrix<f64> {
    let basis = disc.basis();
    let nb = basis.n_boundary_modes();
    let ni = basis.n_interior_modes();
    let n2 = basis.n_velocity_modes();
    let cols = local_columns(disc, proj);
    let n_aug = proj.n_aug();
    let mut g = DMatrix::zeros(n_aug, n_aug);
    for (e, blk) in local.elements.iter().enumerate() {
        let ce = &cols[e];
        for j in 0..n_aug {
            let (vb, vi) = split_velocity(basis, &ce.v.column(j).into_owned(), nb, ni, n2);
            let p = ce.p.column(j).into_owned();
            let (rb, rp, ri) = blk.apply(&vb, &p, &vi);
            for i in 0..n_aug {
                let (tb, ti) = split_velocity(basis, &ce.v.column(i).into_owned(), nb, ni, n2);
                let tp = ce.p.column(i).into_owned();
                g[(i, j)] += tb.dot(&rb) + tp.dot(&rp) + ti.dot(&ri);
            }
        }
    }
    g
}

/// Direct projection of the right-hand side F - T(nu, w) X_lift.
pub fn project_local_rhs(
    disc: &Discretization,
    proj: &Projection,
    local: &LocalBlockSystem,
    prescribed: &DVector<f64>,
) -> DVector<f64> {
    let basis = disc.basis();
    let nb = basis.n_boundary_modes();
    let ni = basis.n_interior_modes();
    let n2 = basis.n_velocity_modes();
    let cols = local_columns(disc, proj);
    let lift = lift_columns(disc, prescribed);
    let n_aug = proj.n_aug();
    let mut r = DVector::zeros(n_aug);
    for (e, blk) in local.elements.iter().enumerate() {
        let ce = &cols[e];
        let (xb, xi) = split_velocity(basis, &lift[e], nb, ni, n2);
        let zero_p = DVector::zeros(disc.maps.n_pressure_modes);
        let (tb, tp, ti) = blk.apply(&xb, &zero_p, &xi);
        let fb = &blk.f_bnd - tb;
        let fp = -tp;
        let fi = &blk.f_int - ti;
        for i in 0..n_aug {
            let (yb, yi) = split_velocity(basis, &ce.v.column(i).into_owned(), nb, ni, n2);
            let yp = ce.p.column(i).into_owned();
            r[i] += yb.dot(&fb) + yp.dot(&fp) + yi.dot(&fi);
        }
    }
    r
}

fn split_velocity(
    basis: &crate::basis::Basis2d,
    v: &DVector<f64>,
    nb: usize,
    ni: usize,
    n2: usize,
) -> (DVector<f64>, DVector<f64>) {
    let mut vb = DVector::zeros(2 * nb);
    let mut vi = DVector::zeros(2 * ni);
    for comp in 0..2 {
        for (r, &m) in basis.boundary_modes.iter().enumerate() {
            vb[comp * nb + r] = v[comp * n2 + m];
        }
        for (r, &m) in basis.interior_modes.iter().enumerate() {
            vi[comp * ni + r] = v[comp * n2 + m];
        }
    }
    (vb, vi)
}

/// Outcome of one reduced fixed-point solve.
pub struct RomSolution {
    /// Augmented coordinates: main block then interior block.
    pub coords: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
    pub iter_times: Vec<f64>,
}

impl RomSolution {
    pub fn main_coords(&self, ops: &RomOperators) -> DVector<f64> {
        self.coords.rows(0, ops.n_main()).into_owned()
    }

    pub fn median_iter_time(&self) -> f64 {
        crate::solver::median(&self.iter_times)
    }
}

/// Reduced Oseen iteration: assemble the online system from the stored
/// pieces, eliminate the interior coordinate block, and iterate to a fixed
/// point in the reduced coordinates. A diverging iteration is restarted
/// with progressively stronger damping; the fixed point is unchanged by
/// the relaxation.
pub fn rom_solve(
    ops: &RomOperators,
    nu: f64,
    cfg: &IterationConfig,
    initial: Option<&DVector<f64>>,
) -> Result<RomSolution> {
    cfg.validate()?;
    let n_aug = ops.n_aug();
    if n_aug == 0 {
        return Ok(RomSolution {
            coords: DVector::zeros(0),
            iterations: 1,
            converged: true,
            history: vec![0.0],
            iter_times: vec![0.0],
        });
    }
    let seed = match initial {
        Some(c) => {
            if c.len() != n_aug {
                return Err(Error::invalid("initial reduced coordinates have wrong size"));
            }
            c.clone()
        }
        None => DVector::zeros(n_aug),
    };
    let mut picard = None;
    for attempt in 0..3 {
        let omega = cfg.under_relaxation * 0.5f64.powi(attempt);
        let run = rom_iterate(ops, nu, cfg, &seed, omega)?;
        if run.solution.converged || !run.diverged {
            if attempt > 0 {
                log::debug!("reduced solve at nu {nu:.6} needed damping 2^-{attempt}");
            }
            picard = Some(run.solution);
            break;
        }
        picard = Some(run.solution);
    }
    let picard = picard.expect("at least one attempt ran");

    // Truncation can turn the wanted fixed point repulsive for the plain
    // iteration while a spurious one attracts, so a converged answer far
    // from a supplied warm start is distrusted. Newton on the reduced
    // residual (Jacobian free from the stored tensor) tracks the seeded
    // branch instead; the nearer root wins.
    let seeded = initial.is_some();
    let far = seeded && (&picard.coords - &seed).norm() > 0.3 * (1.0 + seed.norm());
    if !picard.converged || far {
        let newton = rom_newton(ops, nu, cfg, &seed)?;
        let newton_closer = (&newton.coords - &seed).norm() < (&picard.coords - &seed).norm();
        if newton.converged && (!picard.converged || newton_closer) {
            log::debug!("reduced solve at nu {nu:.6} fell back to Newton");
            return Ok(newton);
        }
    }
    Ok(picard)
}

/// Reduced residual R(c) = G(nu, c) c - rhs(nu, c) and its exact Jacobian
///   J(c) = G(nu, c) + [T_1 c | ... | T_n c] + R_conv_modes.
fn rom_newton(
    ops: &RomOperators,
    nu: f64,
    cfg: &IterationConfig,
    seed: &DVector<f64>,
) -> Result<RomSolution> {
    let n_aug = ops.n_aug();
    let mut coords = seed.clone();
    let mut history = Vec::new();
    let mut iter_times = Vec::new();
    let mut converged = false;
    for _k in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let g = ops.online_matrix(nu, &coords);
        let rhs = ops.online_rhs(nu, &coords);
        let residual = &g * &coords - rhs;
        let mut jac = g;
        for (m, t) in ops.t_conv.iter().enumerate() {
            let tc = t * &coords;
            for i in 0..n_aug {
                jac[(i, m)] += tc[i];
            }
        }
        jac += &ops.r_conv_modes;
        let step = jac
            .lu()
            .solve(&residual)
            .ok_or_else(|| Error::SingularSystem("reduced Newton system".into()))?;
        // Limit enormous steps; Newton is only asked to polish locally.
        let scale = 1.0 + coords.norm();
        let step = if step.norm() > 10.0 * scale {
            &step * (10.0 * scale / step.norm())
        } else {
            step
        };
        let next = &coords - &step;
        let rel = step.norm() / next.norm().max(1e-300);
        iter_times.push(t0.elapsed().as_secs_f64());
        history.push(rel);
        coords = next;
        if rel < cfg.tol {
            converged = true;
            break;
        }
        if !rel.is_finite() {
            break;
        }
    }
    Ok(RomSolution {
        coords,
        iterations: history.len(),
        converged,
        history,
        iter_times,
    })
}

struct RomRun {
    solution: RomSolution,
    diverged: bool,
}

fn rom_iterate(
    ops: &RomOperators,
    nu: f64,
    cfg: &IterationConfig,
    seed: &DVector<f64>,
    omega: f64,
) -> Result<RomRun> {
    let n_aug = ops.n_aug();
    let nm = ops.n_main();
    let nint = ops.n_int();
    let mut coords = seed.clone();
    let mut history = Vec::new();
    let mut iter_times = Vec::new();
    let mut converged = false;
    let mut best = f64::INFINITY;
    let mut diverged = false;
    let scale = 1.0 + seed.norm();
    for k in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let g = ops.online_matrix(nu, &coords);
        let rhs = ops.online_rhs(nu, &coords);
        let next = if nint == 0 || nm == 0 {
            g.lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SingularSystem("reduced system".into()))?
        } else {
            // Eliminate the interior block at reduced cost.
            let gbb = g.view((0, 0), (nm, nm));
            let gbi = g.view((0, nm), (nm, nint));
            let gib = g.view((nm, 0), (nint, nm));
            let gii = g.view((nm, nm), (nint, nint)).into_owned();
            let rb = rhs.rows(0, nm).into_owned();
            let ri = rhs.rows(nm, nint).into_owned();
            let gii_lu = gii.lu();
            let gii_inv_gib = gii_lu
                .solve(&gib.into_owned())
                .ok_or_else(|| Error::SingularSystem("reduced interior block".into()))?;
            let gii_inv_ri = gii_lu
                .solve(&ri)
                .ok_or_else(|| Error::SingularSystem("reduced interior block".into()))?;
            let s = gbb.into_owned() - gbi * &gii_inv_gib;
            let rs = rb - gbi * &gii_inv_ri;
            let a = s
                .lu()
                .solve(&rs)
                .ok_or_else(|| Error::SingularSystem("reduced Schur block".into()))?;
            let d = gii_inv_ri - gii_inv_gib * &a;
            let mut c = DVector::zeros(n_aug);
            c.rows_mut(0, nm).copy_from(&a);
            c.rows_mut(nm, nint).copy_from(&d);
            c
        };
        let next = if omega < 1.0 {
            &next * omega + &coords * (1.0 - omega)
        } else {
            next
        };
        let denom = next.norm();
        let rel = if denom == 0.0 {
            coords.norm()
        } else {
            (&next - &coords).norm() / denom
        };
        iter_times.push(t0.elapsed().as_secs_f64());
        history.push(rel);
        coords = next;
        if rel < cfg.tol {
            converged = true;
            break;
        }
        best = best.min(rel);
        let blown_up = !rel.is_finite()
            || coords.norm() > 1e9 * scale
            || (k >= 12 && rel > 1e3 * best && rel > 1e-3);
        // Bounded oscillation shows up as no decade of progress over a
        // 20-iteration window; both cases are retried with damping.
        let stagnant = k >= 40 && rel > 0.95 * history[k - 21] && rel > cfg.tol;
        if blown_up || stagnant {
            diverged = true;
            break;
        }
    }
    Ok(RomRun {
        solution: RomSolution {
            coords,
            iterations: history.len(),
            converged,
            history,
            iter_times,
        },
        diverged,
    })
}

/// Lift reduced coordinates back to a full flow field, interior velocity
/// included, with the Dirichlet lift re-added.
pub fn recover_full(
    disc: &Discretization,
    ops: &RomOperators,
    sol: &RomSolution,
    nu: f64,
) -> FlowField {
    let a = sol.coords.rows(0, ops.n_main()).into_owned();
    let d = sol.coords.rows(ops.n_main(), ops.n_int()).into_owned();
    let hat = &ops.projection.main.modes * a;
    let v_int = &ops.projection.interior.modes * d;
    let mut f = state_to_field(disc, &hat, &v_int, &ops.prescribed);
    f.nu = nu;
    f.iterations = sol.iterations;
    f
}

/// Relative H1 velocity error between a full-order and a reduced solution.
pub fn relative_h1_error(
    ops: &ElementOperators,
    full: &FlowField,
    reduced: &FlowField,
) -> Result<f64> {
    let denom = ops.h1_norm(full);
    if denom == 0.0 {
        return Err(Error::invalid("reference field has zero H1 norm"));
    }
    Ok(ops.h1_relative_change(full, reduced)? )
}
