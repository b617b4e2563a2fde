//! Oseen fixed-point iteration to steady state, with continuation over the
//! viscosity parameter, snapshot capture and the channel asymmetry
//! indicator.

use crate::assembly::{
    assemble_oseen, project_dirichlet, BoundaryData, ElementOperators, FlowField, InflowProfile,
};
use crate::basis::Basis2d;
use crate::condense::solve_oseen_system;
use crate::error::{Error, Result};
use crate::mesh::{build_dof_maps, BoundaryTags, DofMaps, QuadMesh};
use nalgebra::DVector;
use std::time::Instant;

/// Amplitude of the one-sided inflow perturbation used to select a
/// wall-hugging branch during the first continuation parameter.
pub const BRANCH_PERTURBATION: f64 = 1e-3;

/// Mesh, basis and dof maps bundled for one discretization.
pub struct Discretization {
    pub ops: ElementOperators,
    pub maps: DofMaps,
    pub tags: BoundaryTags,
}

impl Discretization {
    pub fn new(mesh: QuadMesh, basis: Basis2d, tags: BoundaryTags) -> Self {
        let maps = build_dof_maps(&mesh, &tags, &basis);
        Discretization {
            ops: ElementOperators::new(mesh, basis),
            maps,
            tags,
        }
    }

    pub fn mesh(&self) -> &QuadMesh {
        &self.ops.mesh
    }

    pub fn basis(&self) -> &Basis2d {
        &self.ops.basis
    }

    /// Stable hash of mesh parameters, basis orders and the dof maps, used
    /// to match persisted artifacts to the discretization they were built
    /// for (FNV-1a over a canonical byte stream).
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        let mesh = &self.ops.mesh;
        eat(&(mesh.nx as u64).to_le_bytes());
        eat(&(mesh.ny as u64).to_le_bytes());
        eat(&mesh.lx.to_bits().to_le_bytes());
        eat(&mesh.ly.to_bits().to_le_bytes());
        eat(&(self.ops.basis.spec.order_velocity as u64).to_le_bytes());
        eat(&(self.ops.basis.spec.quad_points as u64).to_le_bytes());
        for entries in &self.maps.gather {
            for ge in entries {
                eat(&(ge.gid as u64).to_le_bytes());
                eat(&[u8::from(ge.sign > 0.0)]);
            }
        }
        for &d in &self.maps.dirichlet_scalar {
            eat(&[u8::from(d)]);
        }
        eat(&(self.maps.pinned_mean.map_or(u64::MAX, |p| p as u64)).to_le_bytes());
        h
    }
}

/// Stopping rule and robustness knobs of the fixed-point iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationConfig {
    /// Relative H1 change threshold between iterates.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest viscosity move per continuation step; larger gaps are
    /// bridged with intermediate (unrecorded) solves.
    pub continuation_step: f64,
    /// Under-relaxation factor in (0, 1].
    pub under_relaxation: f64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            tol: 1e-8,
            max_iter: 100,
            continuation_step: f64::INFINITY,
            under_relaxation: 1.0,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::config("tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be at least 1"));
        }
        if !(self.under_relaxation > 0.0 && self.under_relaxation <= 1.0) {
            return Err(Error::config("under-relaxation must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Outcome of one steady solve; non-convergence is a status, not an error.
pub struct SteadySolve {
    pub field: FlowField,
    pub iterations: usize,
    pub converged: bool,
    /// Relative H1 change per iteration.
    pub history: Vec<f64>,
    /// Wall seconds per iteration.
    pub iter_times: Vec<f64>,
}

impl SteadySolve {
    /// Median wall time of one Oseen iteration.
    pub fn median_iter_time(&self) -> f64 {
        median(&self.iter_times)
    }
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// One Oseen pass: assemble at the current iterate, condense, solve and
/// back-substitute, then under-relax against the previous iterate.
pub fn oseen_step(
    disc: &Discretization,
    nu: f64,
    u_k: Option<&FlowField>,
    prescribed: &DVector<f64>,
    omega: f64,
) -> Result<FlowField> {
    let local = assemble_oseen(&disc.ops, nu, u_k, None)?;
    let (mut next, _residual) = solve_oseen_system(&local, &disc.maps, prescribed)?;
    next.nu = nu;
    if omega < 1.0 {
        if let Some(prev) = u_k {
            next = FlowField::relaxed(&next, prev, omega);
        }
    }
    Ok(next)
}

/// Iterate the Oseen map until the relative H1 change between iterates
/// falls below the tolerance.
pub fn solve_steady(
    disc: &Discretization,
    nu: f64,
    initial: Option<&FlowField>,
    prescribed: &DVector<f64>,
    cfg: &IterationConfig,
) -> Result<SteadySolve> {
    cfg.validate()?;
    if !(nu > 0.0) {
        return Err(Error::invalid("viscosity must be positive"));
    }
    let mut current = match initial {
        Some(f) => f.clone(),
        None => FlowField::zero(&disc.ops.mesh, &disc.ops.basis),
    };
    let mut history = Vec::new();
    let mut iter_times = Vec::new();
    let mut converged = false;
    for k in 1..=cfg.max_iter {
        let t0 = Instant::now();
        let next = oseen_step(disc, nu, Some(&current), prescribed, cfg.under_relaxation)?;
        let rel = disc.ops.h1_relative_change(&next, &current)?;
        let dt = t0.elapsed().as_secs_f64();
        log::info!("nu {nu:.6}: iter {k:3}  rel H1 change {rel:.3e}  ({:.1} ms)", dt * 1e3);
        history.push(rel);
        iter_times.push(dt);
        current = next;
        if rel < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "nu {nu:.6}: not converged after {} iterations (last change {:.3e})",
            cfg.max_iter,
            history.last().copied().unwrap_or(f64::NAN)
        );
    }
    // Flag non-monotone tails in the log; the linear convergence claim is
    // qualitative, not enforced.
    if history.windows(2).any(|w| w[1] > w[0] * 1.5) {
        log::debug!("nu {nu:.6}: convergence history is not monotone");
    }
    current.iterations = history.len();
    Ok(SteadySolve {
        iterations: history.len(),
        converged,
        history,
        iter_times,
        field: current,
    })
}

/// Relative algebraic residual of a field under a fresh assembly linearized
/// at itself: gathered momentum rows over free dofs plus continuity and
/// interior rows, normalized by the operator-image scale.
pub fn steady_residual(
    disc: &Discretization,
    field: &FlowField,
    prescribed: &DVector<f64>,
) -> Result<f64> {
    let local = assemble_oseen(&disc.ops, field.nu, Some(field), None)?;
    let basis = &disc.ops.basis;
    let n2 = basis.n_velocity_modes();
    let nb = basis.n_boundary_modes();
    let ni = basis.n_interior_modes();
    // Residual over free momentum (gathered), continuity and interior rows,
    // normalized by the size of the individual operator terms so that
    // cancellation at the fixed point is what gets measured.
    let mut gathered: DVector<f64> = DVector::zeros(disc.maps.n_global_velocity);
    let mut num_sq = 0.0;
    let mut den_sq = 0.0;
    for (e, blk) in local.elements.iter().enumerate() {
        let mut v_bnd = DVector::zeros(2 * nb);
        let mut v_int = DVector::zeros(2 * ni);
        for comp in 0..2 {
            for (r, &m) in basis.boundary_modes.iter().enumerate() {
                v_bnd[comp * nb + r] = field.velocity[e][comp * n2 + m];
            }
            for (r, &m) in basis.interior_modes.iter().enumerate() {
                v_int[comp * ni + r] = field.velocity[e][comp * n2 + m];
            }
        }
        let (r_bnd, r_p, r_int) = blk.apply(&v_bnd, &field.pressure[e], &v_int);
        num_sq += (&r_p).norm_squared();
        num_sq += (&r_int - &blk.f_int).norm_squared();
        den_sq += (&blk.a * &v_bnd).norm_squared()
            + (blk.d_bnd.transpose() * &field.pressure[e]).norm_squared()
            + (&blk.c * &v_int).norm_squared()
            + blk.f_bnd.norm_squared()
            + blk.f_int.norm_squared();
        for comp in 0..2 {
            for (r, ge) in disc.maps.gather[e].iter().enumerate() {
                let g = comp * disc.maps.n_scalar + ge.gid;
                gathered[g] += ge.sign * (r_bnd[comp * nb + r] - blk.f_bnd[comp * nb + r]);
            }
        }
    }
    for (g, fi) in disc.maps.free_index.iter().enumerate() {
        if fi.is_some() {
            num_sq += gathered[g] * gathered[g];
        }
    }
    let _ = prescribed;
    Ok((num_sq / den_sq.max(1e-300)).sqrt())
}

/// Relative L2 mirror asymmetry of the streamwise velocity about the
/// channel midline y = Ly/2.
pub fn asymmetry_indicator(disc: &Discretization, field: &FlowField) -> f64 {
    let mesh = &disc.ops.mesh;
    let basis = &disc.ops.basis;
    let q = basis.rule.nodes.len();
    let samples: Vec<DVector<f64>> = (0..mesh.n_elements())
        .map(|e| disc.ops.velocity_at_quad(field, e).0)
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for e in 0..mesh.n_elements() {
        let (ex, ey) = mesh.element_index(e);
        let mirror = mesh.element_id(ex, mesh.ny - 1 - ey);
        let jac = mesh.elements[e].jacobian();
        for a in 0..q {
            for b in 0..q {
                let w = jac * basis.weights[a * q + b];
                let here = samples[e][a * q + b];
                let there = samples[mirror][a * q + (q - 1 - b)];
                num += w * (here - there) * (here - there);
                den += w * here * here;
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Per-parameter record of a sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub nu: f64,
    pub reynolds: f64,
    pub iterations: usize,
    pub final_rel_change: f64,
    pub asymmetry: f64,
    /// Median wall seconds per Oseen iteration.
    pub iter_time_s: f64,
    pub converged: bool,
    /// Index of the stored snapshot field, when converged.
    pub snapshot: Option<usize>,
}

impl SweepResult {
    pub fn reynolds_of(nu: f64) -> f64 {
        1.0 / (4.0 * nu)
    }
}

pub struct SweepOutput {
    pub results: Vec<SweepResult>,
    pub fields: Vec<FlowField>,
    pub completed: bool,
}

/// Continuation sweep over a descending viscosity list. The solution at
/// each parameter seeds the next; with `perturb` the first parameter is
/// solved under a slightly skewed inflow and the perturbation is removed
/// from the second parameter on. The asymmetric component carried by the
/// seed selects a wall-hugging branch once the symmetric state loses
/// stability, instead of waiting for roundoff to break the symmetry.
pub fn continuation_sweep(
    disc: &Discretization,
    profile: InflowProfile,
    nus: &[f64],
    cfg: &IterationConfig,
    perturb: bool,
) -> Result<SweepOutput> {
    if nus.is_empty() {
        return Ok(SweepOutput {
            results: Vec::new(),
            fields: Vec::new(),
            completed: true,
        });
    }
    if nus.iter().any(|&nu| !(nu > 0.0)) {
        return Err(Error::invalid("viscosities must be positive"));
    }
    if nus.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(
            "continuation expects a strictly descending viscosity list",
        ));
    }
    let clean = project_dirichlet(
        &disc.ops,
        &disc.tags,
        &disc.maps,
        &BoundaryData::from_inflow(profile),
    );
    let mut results = Vec::new();
    let mut fields: Vec<FlowField> = Vec::new();
    let mut seed: Option<FlowField> = None;
    let mut completed = true;

    for (i, &nu) in nus.iter().enumerate() {
        let solve = if i == 0 && perturb {
            let skewed = project_dirichlet(
                &disc.ops,
                &disc.tags,
                &disc.maps,
                &BoundaryData::from_inflow(profile.with_perturbation(BRANCH_PERTURBATION)),
            );
            solve_steady(disc, nu, None, &skewed, cfg)?
        } else {
            // Bridge large parameter gaps with unrecorded intermediate solves.
            if let Some(prev) = seed.as_ref() {
                let gap = prev.nu - nu;
                if gap > cfg.continuation_step {
                    let steps = (gap / cfg.continuation_step).ceil() as usize;
                    let mut bridge = prev.clone();
                    for s in 1..steps {
                        let nu_mid = prev.nu - gap * s as f64 / steps as f64;
                        let mid = solve_steady(disc, nu_mid, Some(&bridge), &clean, cfg)?;
                        if !mid.converged {
                            break;
                        }
                        bridge = mid.field;
                    }
                    seed = Some(bridge);
                }
            }
            solve_steady(disc, nu, seed.as_ref(), &clean, cfg)?
        };
        if !solve.converged {
            results.push(sweep_result(disc, nu, &solve, None));
            completed = false;
            break;
        }
        seed = Some(solve.field.clone());
        let idx = fields.len();
        results.push(sweep_result(disc, nu, &solve, Some(idx)));
        fields.push(solve.field);
    }
    Ok(SweepOutput {
        results,
        fields,
        completed,
    })
}

fn sweep_result(
    disc: &Discretization,
    nu: f64,
    solve: &SteadySolve,
    snapshot: Option<usize>,
) -> SweepResult {
    SweepResult {
        nu,
        reynolds: SweepResult::reynolds_of(nu),
        iterations: solve.iterations,
        final_rel_change: solve.history.last().copied().unwrap_or(0.0),
        asymmetry: asymmetry_indicator(disc, &solve.field),
        iter_time_s: solve.median_iter_time(),
        converged: solve.converged,
        snapshot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::mesh::{build_channel_mesh, tag_boundaries};

    fn channel(nx: usize, ny: usize, p: usize) -> Discretization {
        let mesh = build_channel_mesh(nx, ny, 9.0, 6.0).unwrap();
        let tags = tag_boundaries(&mesh, (2.5, 3.5), true).unwrap();
        let basis = Basis2d::new(BasisSpec::new(p, None).unwrap()).unwrap();
        Discretization::new(mesh, basis, tags)
    }

    #[test]
    fn zero_data_fixed_point_is_zero() {
        let disc = channel(2, 2, 3);
        let prescribed = DVector::zeros(disc.maps.n_global_velocity);
        let cfg = IterationConfig::default();
        let out = solve_steady(&disc, 0.05, None, &prescribed, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert!(disc.ops.h1_norm(&out.field) < 1e-12);
    }

    #[test]
    fn converged_seed_stops_after_one_iteration() {
        let disc = channel(2, 2, 4);
        let profile = InflowProfile::new(2.5, 3.5);
        let data = BoundaryData::from_inflow(profile);
        let prescribed = project_dirichlet(&disc.ops, &disc.tags, &disc.maps, &data);
        let cfg = IterationConfig {
            tol: 1e-9,
            ..Default::default()
        };
        let first = solve_steady(&disc, 0.5, None, &prescribed, &cfg).unwrap();
        assert!(first.converged);
        let again = solve_steady(&disc, 0.5, Some(&first.field), &prescribed, &cfg).unwrap();
        assert!(again.converged);
        assert_eq!(again.iterations, 1);
    }

    #[test]
    fn first_step_from_zero_is_a_stokes_solve() {
        let disc = channel(2, 1, 3);
        let profile = InflowProfile::new(2.5, 3.5);
        let data = BoundaryData::from_inflow(profile);
        let prescribed = project_dirichlet(&disc.ops, &disc.tags, &disc.maps, &data);
        let zero = FlowField::zero(&disc.ops.mesh, &disc.ops.basis);
        let step = oseen_step(&disc, 1.0, Some(&zero), &prescribed, 1.0).unwrap();
        let local = crate::assembly::assemble_oseen(&disc.ops, 1.0, None, None).unwrap();
        let (stokes, _) =
            crate::condense::solve_oseen_system(&local, &disc.maps, &prescribed).unwrap();
        for e in 0..step.n_elements() {
            assert!((&step.velocity[e] - &stokes.velocity[e]).amax() < 1e-12);
        }
    }

    #[test]
    fn symmetric_field_has_zero_asymmetry() {
        let disc = channel(2, 2, 4);
        let mut field = FlowField::zero(&disc.ops.mesh, &disc.ops.basis);
        // Constant u_x = 1 everywhere is mirror symmetric.
        let p = 4;
        let n1 = p + 1;
        for e in 0..field.n_elements() {
            for &m in &[0, p, p * n1, p * n1 + p] {
                field.velocity[e][m] = 1.0;
            }
        }
        assert!(asymmetry_indicator(&disc, &field) < 1e-14);
        // A one-sided field is not.
        field.velocity[0][0] += 0.5;
        assert!(asymmetry_indicator(&disc, &field) > 1e-3);
    }

    #[test]
    fn sweep_requires_descending_parameters() {
        let disc = channel(2, 1, 3);
        let profile = InflowProfile::new(2.5, 3.5);
        let cfg = IterationConfig::default();
        assert!(continuation_sweep(&disc, profile, &[0.005, 0.0075], &cfg, false).is_err());
        let empty = continuation_sweep(&disc, profile, &[], &cfg, false).unwrap();
        assert!(empty.completed);
        assert!(empty.results.is_empty());
    }

    #[test]
    fn reynolds_follows_quarter_rule() {
        assert_eq!(SweepResult::reynolds_of(0.0075), 1.0 / 0.03);
        assert_eq!(SweepResult::reynolds_of(0.0025), 100.0);
    }

    #[test]
    fn fingerprint_distinguishes_discretizations() {
        let a = channel(2, 2, 3).fingerprint();
        let b = channel(2, 2, 4).fingerprint();
        let c = channel(2, 2, 3).fingerprint();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
