//! Multilevel static condensation of the local block system.
//!
//! Level 1 eliminates interior velocity through the per-element C blocks.
//! The condensed unknowns are then gathered to global boundary velocity and
//! reordered so every element's mean pressure joins the boundary block; a
//! second elimination of the remaining pressure modes leaves the final
//! Schur system, after which all eliminated unknowns are recovered by
//! back-substitution.

use crate::assembly::{local_boundary_values, ElementBlocks, FlowField, LocalBlockSystem};
use crate::error::{Error, Result};
use crate::mesh::DofMaps;
use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};
use rayon::prelude::*;

type DenseLu = LU<f64, Dyn, Dyn>;

const RCOND_FLOOR: f64 = 1e-12;

fn lu_with_guard(m: DMatrix<f64>, element: usize, what: &str) -> Result<DenseLu> {
    if m.nrows() == 0 {
        return Ok(LU::new(m));
    }
    let lu = LU::new(m);
    let diag = lu.u().diagonal();
    let dmax = diag.amax();
    let dmin = diag.iter().fold(f64::INFINITY, |acc, d| acc.min(d.abs()));
    if dmax == 0.0 || dmin / dmax < RCOND_FLOOR {
        return Err(Error::Condensation {
            element,
            reason: format!(
                "{what} block is numerically singular (rcond estimate {:.2e})",
                if dmax == 0.0 { 0.0 } else { dmin / dmax }
            ),
        });
    }
    Ok(lu)
}

/// Level-1 condensed blocks of one element, with the C factorization kept
/// for back-substitution.
pub struct Level1Element {
    pub s_vv: DMatrix<f64>,
    pub s_vp: DMatrix<f64>,
    pub s_pv: DMatrix<f64>,
    pub s_pp: DMatrix<f64>,
    pub g_v: DVector<f64>,
    pub g_p: DVector<f64>,
    pub c_lu: DenseLu,
}

pub struct Level1System {
    pub nu: f64,
    pub elements: Vec<Level1Element>,
    pub n_pressure: usize,
}

/// Eliminate interior velocity:
///   S_vv = A - B C^-1 Bt,          S_vp = B C^-1 D_int^T - D_bnd^T,
///   S_pv = D_int C^-1 Bt - D_bnd,  S_pp = -D_int C^-1 D_int^T,
///   g_v  = f_bnd - B C^-1 f_int,   g_p  = D_int C^-1 f_int.
pub fn condense_level1(local: &LocalBlockSystem) -> Result<Level1System> {
    let elements: Result<Vec<Level1Element>> = local
        .elements
        .par_iter()
        .enumerate()
        .map(|(e, blk)| condense_element(e, blk))
        .collect();
    Ok(Level1System {
        nu: local.nu,
        elements: elements?,
        n_pressure: local.n_pressure,
    })
}

fn condense_element(e: usize, blk: &ElementBlocks) -> Result<Level1Element> {
    let c_lu = lu_with_guard(blk.c.clone(), e, "interior velocity (C)")?;
    let cinv_bt = c_lu.solve(&blk.bt).ok_or_else(|| singular(e, "C"))?;
    let cinv_dit = c_lu
        .solve(&blk.d_int.transpose())
        .ok_or_else(|| singular(e, "C"))?;
    let cinv_f = c_lu.solve(&blk.f_int).ok_or_else(|| singular(e, "C"))?;
    Ok(Level1Element {
        s_vv: &blk.a - &blk.b * &cinv_bt,
        s_vp: &blk.b * &cinv_dit - blk.d_bnd.transpose(),
        s_pv: &blk.d_int * &cinv_bt - &blk.d_bnd,
        s_pp: -(&blk.d_int * &cinv_dit),
        g_v: &blk.f_bnd - &blk.b * &cinv_f,
        g_p: &blk.d_int * &cinv_f,
        c_lu,
    })
}

fn singular(element: usize, what: &str) -> Error {
    Error::Condensation {
        element,
        reason: format!("{what} factorization failed"),
    }
}

/// Per-element coupling of the remaining pressure modes to the b vector.
pub struct HatElement {
    /// Positions in b touched by this element (free velocity + its mean).
    pub b_rows: Vec<usize>,
    pub b_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub d_hat: DMatrix<f64>,
    pub f_p: DVector<f64>,
}

/// Gathered and reordered system in the unknowns b (global boundary
/// velocity + element mean pressures) and p-hat (remaining pressure modes),
/// with Dirichlet columns already lifted to the right-hand side.
pub struct HatSystem {
    pub a_hat: DMatrix<f64>,
    pub f_bnd: DVector<f64>,
    pub elements: Vec<HatElement>,
    pub dim_b: usize,
    /// Prescribed Dirichlet values over all global velocity dofs.
    pub prescribed: DVector<f64>,
}

/// Apply the gather map M and the mean-pressure permutation P, eliminating
/// Dirichlet velocity dofs (and the pinned mean pressure, when present) by
/// lifting their columns into the right-hand side.
pub fn gather_and_reorder(
    l1: &Level1System,
    maps: &DofMaps,
    prescribed: &DVector<f64>,
) -> Result<HatSystem> {
    if prescribed.len() != maps.n_global_velocity {
        return Err(Error::invalid("prescribed value vector has wrong length"));
    }
    let dim_b = maps.dim_b();
    let np = l1.n_pressure;
    let mut a_hat = DMatrix::zeros(dim_b, dim_b);
    let mut f_bnd = DVector::zeros(dim_b);
    let mut hat_elements = Vec::with_capacity(l1.elements.len());

    for (e, l) in l1.elements.iter().enumerate() {
        // Local boundary dof -> (b index, sign) or lifted prescribed value.
        let mut slot: Vec<std::result::Result<(usize, f64), f64>> =
            Vec::with_capacity(2 * maps.gather[e].len());
        for comp in 0..2 {
            for ge in &maps.gather[e] {
                let gdof = comp * maps.n_scalar + ge.gid;
                match maps.free_index[gdof] {
                    Some(fi) => slot.push(Ok((fi, ge.sign))),
                    None => slot.push(Err(ge.sign * prescribed[gdof])),
                }
            }
        }
        let mean = maps.mean_index(e);

        for (r, &sr) in slot.iter().enumerate() {
            let Ok((br, sgn_r)) = sr else { continue };
            for (s, &sc) in slot.iter().enumerate() {
                match sc {
                    Ok((bs, sgn_s)) => a_hat[(br, bs)] += sgn_r * sgn_s * l.s_vv[(r, s)],
                    Err(val) => f_bnd[br] -= sgn_r * l.s_vv[(r, s)] * val,
                }
            }
            if let Some(bm) = mean {
                a_hat[(br, bm)] += sgn_r * l.s_vp[(r, 0)];
            }
            f_bnd[br] += sgn_r * l.g_v[r];
        }
        if let Some(bm) = mean {
            for (s, &sc) in slot.iter().enumerate() {
                match sc {
                    Ok((bs, sgn_s)) => a_hat[(bm, bs)] += l.s_pv[(0, s)] * sgn_s,
                    Err(val) => f_bnd[bm] -= l.s_pv[(0, s)] * val,
                }
            }
            a_hat[(bm, bm)] += l.s_pp[(0, 0)];
            f_bnd[bm] += l.g_p[0];
        }

        // Rows/columns of the non-mean pressure modes.
        let nhat = np.saturating_sub(1);
        let row_sign: Vec<f64> = slot.iter().filter_map(|s| s.ok().map(|(_, sg)| sg)).collect();
        let local_of_row: Vec<usize> = slot
            .iter()
            .enumerate()
            .filter_map(|(r, s)| s.ok().map(|_| r))
            .collect();
        let mut b_rows: Vec<usize> = slot.iter().filter_map(|s| s.ok().map(|(b, _)| b)).collect();
        if let Some(bm) = mean {
            b_rows.push(bm);
        }
        let nrows = b_rows.len();
        let mut b_hat = DMatrix::zeros(nrows, nhat);
        let mut c_hat = DMatrix::zeros(nhat, nrows);
        let mut d_hat = DMatrix::zeros(nhat, nhat);
        let mut f_p = DVector::zeros(nhat);
        for qh in 0..nhat {
            let q = qh + 1;
            for (row, (&r, &sgn)) in local_of_row.iter().zip(&row_sign).enumerate() {
                b_hat[(row, qh)] = sgn * l.s_vp[(r, q)];
                c_hat[(qh, row)] = l.s_pv[(q, r)] * sgn;
            }
            if mean.is_some() {
                b_hat[(nrows - 1, qh)] = l.s_pp[(0, q)];
                c_hat[(qh, nrows - 1)] = l.s_pp[(q, 0)];
            }
            for (s, &sc) in slot.iter().enumerate() {
                if let Err(val) = sc {
                    f_p[qh] -= l.s_pv[(q, s)] * val;
                }
            }
            for qh2 in 0..nhat {
                d_hat[(qh, qh2)] = l.s_pp[(q, qh2 + 1)];
            }
            f_p[qh] += l.g_p[q];
        }
        hat_elements.push(HatElement {
            b_rows,
            b_hat,
            c_hat,
            d_hat,
            f_p,
        });
    }
    Ok(HatSystem {
        a_hat,
        f_bnd,
        elements: hat_elements,
        dim_b,
        prescribed: prescribed.clone(),
    })
}

/// Final condensed system with the retained D-hat factorizations.
pub struct SchurSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub d_lus: Vec<DenseLu>,
}

/// Second condensation level: Schur = A_hat - B_hat D_hat^-1 C_hat with the
/// right-hand side f_bnd - B_hat D_hat^-1 f_p.
pub fn condense_level2(hat: &HatSystem) -> Result<SchurSystem> {
    let mut matrix = hat.a_hat.clone();
    let mut rhs = hat.f_bnd.clone();
    let d_lus: Result<Vec<DenseLu>> = hat
        .elements
        .par_iter()
        .enumerate()
        .map(|(e, he)| lu_with_guard(he.d_hat.clone(), e, "pressure (D-hat)"))
        .collect();
    let d_lus = d_lus?;
    for (e, he) in hat.elements.iter().enumerate() {
        if he.d_hat.nrows() == 0 {
            continue;
        }
        let x = d_lus[e]
            .solve(&he.c_hat)
            .ok_or_else(|| singular(e, "D-hat"))?;
        let y = d_lus[e]
            .solve(&he.f_p)
            .ok_or_else(|| singular(e, "D-hat"))?;
        let bx = &he.b_hat * x;
        let by = &he.b_hat * y;
        for (i, &bi) in he.b_rows.iter().enumerate() {
            for (j, &bj) in he.b_rows.iter().enumerate() {
                matrix[(bi, bj)] -= bx[(i, j)];
            }
            rhs[bi] -= by[i];
        }
    }
    Ok(SchurSystem { matrix, rhs, d_lus })
}

/// Direct dense solve of the Schur system; returns the b vector and the
/// relative algebraic residual.
pub fn solve_condensed(schur: &SchurSystem) -> Result<(DVector<f64>, f64)> {
    let lu = LU::new(schur.matrix.clone());
    let b = lu
        .solve(&schur.rhs)
        .ok_or_else(|| Error::SingularSystem("final Schur factorization failed".into()))?;
    let denom = schur.rhs.norm();
    let residual = if denom == 0.0 {
        (&schur.matrix * &b - &schur.rhs).norm()
    } else {
        (&schur.matrix * &b - &schur.rhs).norm() / denom
    };
    log::debug!("schur solve: dim {} residual {:.3e}", schur.rhs.len(), residual);
    Ok((b, residual))
}

/// Revert both condensation levels: recover the interior pressure modes,
/// scatter boundary velocity, and solve per element for interior velocity.
pub fn back_substitute(
    b: &DVector<f64>,
    schur: &SchurSystem,
    hat: &HatSystem,
    l1: &Level1System,
    local: &LocalBlockSystem,
    maps: &DofMaps,
) -> FlowField {
    let np = local.n_pressure;
    let n_free = maps.free_velocity.len();
    let free = DVector::from_fn(n_free, |i, _| b[i]);
    let n2 = velocity_mode_count(local);
    let (bnd_modes, int_modes) = mode_ids(local);

    let fields: Vec<(DVector<f64>, DVector<f64>)> = (0..local.elements.len())
        .into_par_iter()
        .map(|e| {
            let he = &hat.elements[e];
            let l = &l1.elements[e];
            let blk = &local.elements[e];
            let b_loc = DVector::from_fn(he.b_rows.len(), |i, _| b[he.b_rows[i]]);
            let mut pressure = DVector::zeros(np);
            if np > 0 {
                pressure[0] = maps.mean_index(e).map_or(0.0, |bm| b[bm]);
                if he.d_hat.nrows() > 0 {
                    let rhs = &he.f_p - &he.c_hat * &b_loc;
                    let p_hat = schur.d_lus[e].solve(&rhs).expect("retained D-hat factor");
                    for qh in 0..np - 1 {
                        pressure[qh + 1] = p_hat[qh];
                    }
                }
            }
            let v_bnd = local_boundary_values(maps, e, &free, &hat.prescribed);
            let rhs_int = &blk.f_int - &blk.bt * &v_bnd + blk.d_int.transpose() * &pressure;
            let v_int = l.c_lu.solve(&rhs_int).expect("retained C factor");

            let mut velocity = DVector::zeros(2 * n2);
            let nb = local.n_bnd_scalar;
            let ni = local.n_int_scalar;
            for comp in 0..2 {
                for (r, &m) in bnd_modes.iter().enumerate() {
                    velocity[comp * n2 + m] = v_bnd[comp * nb + r];
                }
                for (r, &m) in int_modes.iter().enumerate() {
                    velocity[comp * n2 + m] = v_int[comp * ni + r];
                }
            }
            (velocity, pressure)
        })
        .collect();

    let (velocity, pressure) = fields.into_iter().unzip();
    FlowField {
        nu: local.nu,
        velocity,
        pressure,
        iterations: 0,
    }
}

fn velocity_mode_count(local: &LocalBlockSystem) -> usize {
    local.n_bnd_scalar + local.n_int_scalar
}

// Canonical boundary/interior mode id lists reconstructed from the block
// dimensions (n_bnd_scalar = 4p), so condensation needs no basis handle.
fn mode_ids(local: &LocalBlockSystem) -> (Vec<usize>, Vec<usize>) {
    let p = local.n_bnd_scalar / 4;
    let n1 = p + 1;
    let is_bnd = |m: usize| {
        let (i, j) = (m / n1, m % n1);
        i == 0 || i == p || j == 0 || j == p
    };
    (
        (0..n1 * n1).filter(|&m| is_bnd(m)).collect(),
        (0..n1 * n1).filter(|&m| !is_bnd(m)).collect(),
    )
}

/// One full condensed solve: level 1, gather/reorder, level 2, Schur solve
/// and back-substitution. Returns the field and the Schur residual.
pub fn solve_oseen_system(
    local: &LocalBlockSystem,
    maps: &DofMaps,
    prescribed: &DVector<f64>,
) -> Result<(FlowField, f64)> {
    let l1 = condense_level1(local)?;
    let hat = gather_and_reorder(&l1, maps, prescribed)?;
    let schur = condense_level2(&hat)?;
    let (b, residual) = solve_condensed(&schur)?;
    let field = back_substitute(&b, &schur, &hat, &l1, local, maps);
    Ok((field, residual))
}
