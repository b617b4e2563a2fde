//! Shared test helpers: a dense monolithic solver for the gathered full
//! system, used as the independent oracle for the condensation path, plus
//! random field generators.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use semrb::assembly::{FlowField, LocalBlockSystem};
use semrb::mesh::DofMaps;

/// Solve the gathered full system in one dense factorization, without any
/// condensation. Unknown layout: free global boundary velocity, then all
/// pressure modes element-major (minus a pinned mean), then interior
/// velocity element-major.
pub fn monolithic_solve(
    local: &LocalBlockSystem,
    maps: &DofMaps,
    prescribed: &DVector<f64>,
) -> FlowField {
    let nvf = maps.free_velocity.len();
    let np = local.n_pressure;
    let ni2 = 2 * local.n_int_scalar;
    let n_el = local.elements.len();
    let pinned = maps.pinned_mean;

    let idx_p = |e: usize, m: usize| -> Option<usize> {
        match pinned {
            Some(pe) if e == pe && m == 0 => None,
            Some(pe) => {
                let raw = e * np + m;
                let pin_raw = pe * np;
                Some(nvf + if raw > pin_raw { raw - 1 } else { raw })
            }
            None => Some(nvf + e * np + m),
        }
    };
    let n_p_total = n_el * np - usize::from(pinned.is_some());
    let base_int = nvf + n_p_total;
    let idx_i = |e: usize, s: usize| base_int + e * ni2 + s;
    let n_total = base_int + n_el * ni2;

    let mut a = DMatrix::zeros(n_total, n_total);
    let mut rhs = DVector::zeros(n_total);

    for (e, blk) in local.elements.iter().enumerate() {
        let nb = maps.gather[e].len();
        let mut slot: Vec<Result<(usize, f64), f64>> = Vec::with_capacity(2 * nb);
        for comp in 0..2 {
            for ge in &maps.gather[e] {
                let gdof = comp * maps.n_scalar + ge.gid;
                match maps.free_index[gdof] {
                    Some(fi) => slot.push(Ok((fi, ge.sign))),
                    None => slot.push(Err(ge.sign * prescribed[gdof])),
                }
            }
        }
        // Boundary momentum rows.
        for (r, &sr) in slot.iter().enumerate() {
            let Ok((gr, sgn_r)) = sr else { continue };
            for (s, &sc) in slot.iter().enumerate() {
                match sc {
                    Ok((gs, sgn_s)) => a[(gr, gs)] += sgn_r * sgn_s * blk.a[(r, s)],
                    Err(val) => rhs[gr] -= sgn_r * blk.a[(r, s)] * val,
                }
            }
            for m in 0..np {
                if let Some(gp) = idx_p(e, m) {
                    a[(gr, gp)] += sgn_r * (-blk.d_bnd[(m, r)]);
                }
            }
            for s in 0..ni2 {
                a[(gr, idx_i(e, s))] += sgn_r * blk.b[(r, s)];
            }
            rhs[gr] += sgn_r * blk.f_bnd[r];
        }
        // Continuity rows.
        for m in 0..np {
            let Some(gp) = idx_p(e, m) else { continue };
            for (s, &sc) in slot.iter().enumerate() {
                match sc {
                    Ok((gs, sgn_s)) => a[(gp, gs)] += -blk.d_bnd[(m, s)] * sgn_s,
                    Err(val) => rhs[gp] += blk.d_bnd[(m, s)] * val,
                }
            }
            for s in 0..ni2 {
                a[(gp, idx_i(e, s))] += -blk.d_int[(m, s)];
            }
        }
        // Interior momentum rows.
        for s in 0..ni2 {
            let gi = idx_i(e, s);
            for (r, &sr) in slot.iter().enumerate() {
                match sr {
                    Ok((gr, sgn_r)) => a[(gi, gr)] += blk.bt[(s, r)] * sgn_r,
                    Err(val) => rhs[gi] -= blk.bt[(s, r)] * val,
                }
            }
            for m in 0..np {
                if let Some(gp) = idx_p(e, m) {
                    a[(gi, gp)] += -blk.d_int[(m, s)];
                }
            }
            for s2 in 0..ni2 {
                a[(gi, idx_i(e, s2))] += blk.c[(s, s2)];
            }
            rhs[gi] += blk.f_int[s];
        }
    }

    let x = a.lu().solve(&rhs).expect("monolithic system solvable");

    // Scatter back to a FlowField.
    let p_order = local.n_bnd_scalar / 4;
    let n1 = p_order + 1;
    let n2 = n1 * n1;
    let is_bnd = |m: usize| {
        let (i, j) = (m / n1, m % n1);
        i == 0 || i == p_order || j == 0 || j == p_order
    };
    let bnd: Vec<usize> = (0..n2).filter(|&m| is_bnd(m)).collect();
    let int: Vec<usize> = (0..n2).filter(|&m| !is_bnd(m)).collect();

    let mut velocity = Vec::with_capacity(n_el);
    let mut pressure = Vec::with_capacity(n_el);
    for e in 0..n_el {
        let mut v = DVector::zeros(2 * n2);
        for comp in 0..2 {
            for (r, &m) in bnd.iter().enumerate() {
                let ge = maps.gather[e][r];
                let gdof = comp * maps.n_scalar + ge.gid;
                let value = match maps.free_index[gdof] {
                    Some(fi) => x[fi],
                    None => prescribed[gdof],
                };
                v[comp * n2 + m] = ge.sign * value;
            }
            for (r, &m) in int.iter().enumerate() {
                v[comp * n2 + m] = x[idx_i(e, comp * int.len() + r)];
            }
        }
        velocity.push(v);
        let mut p = DVector::zeros(np);
        for m in 0..np {
            p[m] = idx_p(e, m).map_or(0.0, |gp| x[gp]);
        }
        pressure.push(p);
    }
    FlowField {
        nu: local.nu,
        velocity,
        pressure,
        iterations: 0,
    }
}

/// Relative 2-norm distance between two fields over all coefficients.
pub fn field_distance(a: &FlowField, b: &FlowField) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for e in 0..a.n_elements() {
        num += (&a.velocity[e] - &b.velocity[e]).norm_squared();
        num += (&a.pressure[e] - &b.pressure[e]).norm_squared();
        den += a.velocity[e].norm_squared() + a.pressure[e].norm_squared();
    }
    (num / den.max(1e-300)).sqrt()
}

/// Random smooth-ish coefficient field for linearization data.
pub fn random_field<R: Rng>(
    rng: &mut R,
    mesh: &semrb::mesh::QuadMesh,
    basis: &semrb::basis::Basis2d,
    scale: f64,
) -> FlowField {
    let mut f = FlowField::zero(mesh, basis);
    for e in 0..f.n_elements() {
        for v in f.velocity[e].iter_mut() {
            *v = scale * rng.gen_range(-1.0..1.0);
        }
        for p in f.pressure[e].iter_mut() {
            *p = scale * rng.gen_range(-1.0..1.0);
        }
    }
    f
}
