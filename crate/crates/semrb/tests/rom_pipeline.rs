//! Reduced-model pipeline on a small channel: projection identities, the
//! offline-online tensor consistency, training-point reproduction, and the
//! interior-velocity recovery path.

mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semrb::assembly::{
    assemble_oseen, project_dirichlet, BoundaryData, FlowField, InflowProfile,
};
use semrb::basis::{Basis2d, BasisSpec};
use semrb::rom::*;
use semrb::solver::*;

fn small_channel(p: usize) -> Discretization {
    let mesh = semrb::mesh::build_channel_mesh(4, 2, 18.0, 6.0).unwrap();
    let tags = semrb::mesh::tag_boundaries(&mesh, (2.5, 3.5), true).unwrap();
    let basis = Basis2d::new(BasisSpec::new(p, None).unwrap()).unwrap();
    Discretization::new(mesh, basis, tags)
}

fn trained(
    disc: &Discretization,
    nus: &[f64],
    energy: f64,
) -> (SnapshotSet, RomOperators, DVector<f64>) {
    let profile = InflowProfile::new(2.5, 3.5);
    let clean = project_dirichlet(
        &disc.ops,
        &disc.tags,
        &disc.maps,
        &BoundaryData::from_inflow(profile),
    );
    let cfg = IterationConfig {
        tol: 1e-11,
        max_iter: 200,
        ..Default::default()
    };
    let out = continuation_sweep(disc, profile, nus, &cfg, false).unwrap();
    assert!(out.completed, "training sweep did not converge");
    let mut snaps = SnapshotSet::new(disc);
    for (r, f) in out.results.iter().zip(&out.fields) {
        snaps.push_field(disc, r.nu, f);
    }
    let ops = offline_build(disc, &snaps, &clean, energy).unwrap();
    (snaps, ops, clean)
}

#[test]
fn single_snapshot_mode_reproduces_the_snapshot() {
    let disc = small_channel(4);
    let (snaps, ops, clean) = trained(&disc, &[0.05], 1.0);
    assert_eq!(ops.n_main(), 1);
    // Coordinates of the snapshot in the one-mode basis.
    let coeff = ops.projection.main.modes.transpose() * &snaps.snapshots[0].hat;
    let dcoef = ops.projection.interior.modes.transpose() * &snaps.snapshots[0].v_int;
    let mut coords = DVector::zeros(ops.n_aug());
    coords.rows_mut(0, 1).copy_from(&coeff);
    coords.rows_mut(1, ops.n_int()).copy_from(&dcoef);
    let sol = RomSolution {
        coords,
        iterations: 0,
        converged: true,
        history: vec![],
        iter_times: vec![],
    };
    let rec = recover_full(&disc, &ops, &sol, 0.05);
    let fom = snaps.to_field(&disc, 0, &clean);
    for e in 0..fom.n_elements() {
        assert!((&rec.velocity[e] - &fom.velocity[e]).amax() < 1e-10);
        assert!((&rec.pressure[e] - &fom.pressure[e]).amax() < 1e-10);
    }
}

#[test]
fn weighted_scatter_keeps_modes_orthonormal() {
    let disc = small_channel(4);
    let (_snaps, ops, _clean) = trained(&disc, &[0.05, 0.04, 0.03], 1.0);
    let maps = &disc.maps;
    let basis = disc.basis();
    let nm = ops.n_main();
    // Local representation with 1/sqrt(multiplicity) weights composed with
    // the permutation-scattered pressure parts.
    let mut gram = DMatrix::<f64>::zeros(nm, nm);
    let np = maps.n_pressure_modes;
    for e in 0..maps.n_elements {
        let mut cols = DMatrix::<f64>::zeros(2 * maps.gather[e].len() + np, nm);
        for j in 0..nm {
            let col = ops.projection.main.modes.column(j);
            for comp in 0..2 {
                for (r, ge) in maps.gather[e].iter().enumerate() {
                    let g = comp * maps.n_scalar + ge.gid;
                    if let Some(fi) = maps.free_index[g] {
                        cols[(comp * maps.gather[e].len() + r, j)] =
                            ge.sign * col[fi] / (maps.multiplicity[ge.gid] as f64).sqrt();
                    }
                }
            }
            let base = 2 * maps.gather[e].len();
            if let Some(bm) = maps.mean_index(e) {
                cols[(base, j)] = col[bm];
            }
            for m in 1..np {
                cols[(base + m, j)] = col[maps.dim_b() + e * (np - 1) + (m - 1)];
            }
        }
        gram += cols.transpose() * cols;
    }
    let _ = basis;
    let eye = DMatrix::identity(nm, nm);
    assert!(
        (gram.clone() - eye).amax() < 1e-10,
        "weighted Gram deviates by {:.3e}",
        (gram - DMatrix::identity(nm, nm)).amax()
    );
}

#[test]
fn pressure_only_mode_has_zero_convective_slice() {
    let disc = small_channel(4);
    let (snaps, _, clean) = trained(&disc, &[0.05], 1.0);
    // Synthetic projection: one hat mode carrying only pressure entries.
    let dim_hat = snaps.dim_hat;
    let mut mode = DVector::zeros(dim_hat);
    let nvf = disc.maps.free_velocity.len();
    for i in nvf..dim_hat {
        mode[i] = 1.0;
    }
    mode /= mode.norm();
    let mut modes = DMatrix::zeros(dim_hat, 1);
    modes.column_mut(0).copy_from(&mode);
    let proj = Projection {
        fingerprint: disc.fingerprint(),
        main: PodBasis {
            modes,
            singular_values: vec![1.0],
            n_retained: 1,
            energy_fraction: 1.0,
        },
        interior: PodBasis {
            modes: DMatrix::zeros(snaps.dim_int, 0),
            singular_values: vec![],
            n_retained: 0,
            energy_fraction: 1.0,
        },
    };
    let ops =
        build_with_projection(&disc, proj, &clean, vec![], DMatrix::zeros(1, 0), 1.0).unwrap();
    assert!(ops.t_conv[0].amax() < 1e-14);
}

#[test]
fn online_assembly_matches_direct_projection() {
    let disc = small_channel(4);
    let (_snaps, ops, clean) = trained(&disc, &[0.05, 0.04, 0.03], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let nu = rng.gen_range(0.02..0.06);
        let coords = DVector::from_fn(ops.n_aug(), |_, _| rng.gen_range(-1.0..1.0));
        let sol = RomSolution {
            coords: coords.clone(),
            iterations: 0,
            converged: true,
            history: vec![],
            iter_times: vec![],
        };
        let w = recover_full(&disc, &ops, &sol, nu);
        let local = assemble_oseen(&disc.ops, nu, Some(&w), None).unwrap();
        let direct = project_local_system(&disc, &ops.projection, &local);
        let online = ops.online_matrix(nu, &coords);
        let gap = (&online - &direct).norm() / direct.norm();
        assert!(gap < 1e-9, "operator expansion gap {gap}");
        let rhs_direct = project_local_rhs(&disc, &ops.projection, &local, &clean);
        let rhs_online = ops.online_rhs(nu, &coords);
        let rgap = (&rhs_online - &rhs_direct).norm() / rhs_direct.norm().max(1e-300);
        assert!(rgap < 1e-9, "rhs expansion gap {rgap}");
    }
}

#[test]
fn doubling_viscosity_doubles_only_the_viscous_piece() {
    let disc = small_channel(3);
    let (_s, ops, _c) = trained(&disc, &[0.05, 0.04], 1.0);
    let coords = DVector::zeros(ops.n_aug());
    let g1 = ops.online_matrix(0.03, &coords);
    let g2 = ops.online_matrix(0.06, &coords);
    let diff = &g2 - &g1 - &ops.k_visc * 0.03;
    assert!(diff.amax() < 1e-14);
}

#[test]
fn full_rank_rom_reproduces_training_solutions() {
    let disc = small_channel(4);
    let nus = [0.05, 0.04, 0.03];
    let (snaps, ops, clean) = trained(&disc, &nus, 1.0);
    let cfg = IterationConfig {
        tol: 1e-12,
        max_iter: 400,
        ..Default::default()
    };
    let mut seed: Option<DVector<f64>> = None;
    for (i, &nu) in nus.iter().enumerate() {
        let sol = rom_solve(&ops, nu, &cfg, seed.as_ref()).unwrap();
        assert!(sol.converged);
        seed = Some(sol.coords.clone());
        let rec = recover_full(&disc, &ops, &sol, nu);
        let fom = snaps.to_field(&disc, i, &clean);
        let err = relative_h1_error(&disc.ops, &fom, &rec).unwrap();
        assert!(err < 1e-7, "training reproduction error {err} at nu {nu}");
    }
}

#[test]
fn truncated_rom_tracks_training_solutions() {
    let disc = small_channel(4);
    let nus = [0.05, 0.0425, 0.035, 0.0275, 0.02];
    let (snaps, ops, clean) = trained(&disc, &nus, 0.99999);
    assert!(ops.n_main() < nus.len(), "expected truncation to bite");
    let cfg = IterationConfig {
        tol: 1e-11,
        max_iter: 2000,
        ..Default::default()
    };
    for (i, &nu) in nus.iter().enumerate() {
        let warm = ops.seed_for(nu);
        let sol = rom_solve(&ops, nu, &cfg, warm.as_ref()).unwrap();
        assert!(sol.converged, "reduced solve stalled at nu {nu}");
        let rec = recover_full(&disc, &ops, &sol, nu);
        let fom = snaps.to_field(&disc, i, &clean);
        let err = relative_h1_error(&disc.ops, &fom, &rec).unwrap();
        assert!(err < 5e-2, "training error {err} at nu {nu}");
    }
}

#[test]
fn zero_inflow_rom_is_identically_zero() {
    let disc = small_channel(3);
    // Zero-data snapshots: the sweep converges immediately to zero fields.
    let zero_profile = InflowProfile::new(2.5, 3.5);
    let clean = DVector::zeros(disc.maps.n_global_velocity);
    let cfg = IterationConfig::default();
    let zero = FlowField::zero(&disc.ops.mesh, disc.basis());
    let mut snaps = SnapshotSet::new(&disc);
    let _ = zero_profile;
    snaps.push_field(&disc, 0.05, &zero);
    let ops = offline_build(&disc, &snaps, &clean, 1.0).unwrap();
    assert_eq!(ops.n_aug(), 0);
    let sol = rom_solve(&ops, 0.05, &cfg, None).unwrap();
    assert!(sol.converged);
    assert_eq!(sol.coords.len(), 0);
    let rec = recover_full(&disc, &ops, &sol, 0.05);
    assert!(disc.ops.h1_norm(&rec) == 0.0);
}

#[test]
fn zero_coordinates_recover_the_pure_lift_field() {
    let disc = small_channel(4);
    let (_s, ops, clean) = trained(&disc, &[0.05], 1.0);
    let sol = RomSolution {
        coords: DVector::zeros(ops.n_aug()),
        iterations: 0,
        converged: true,
        history: vec![],
        iter_times: vec![],
    };
    let rec = recover_full(&disc, &ops, &sol, 0.05);
    let lift = state_to_field(
        &disc,
        &DVector::zeros(ops.projection.main.modes.nrows()),
        &DVector::zeros(ops.projection.interior.modes.nrows()),
        &clean,
    );
    for e in 0..rec.n_elements() {
        assert_eq!(rec.velocity[e], lift.velocity[e]);
        assert!(rec.pressure[e].amax() == 0.0);
    }
}

#[test]
fn recovered_divergence_stays_small_at_training_points() {
    let disc = small_channel(4);
    let nus = [0.05, 0.04, 0.03];
    let (_snaps, ops, _clean) = trained(&disc, &nus, 1.0);
    let cfg = IterationConfig {
        tol: 1e-11,
        max_iter: 300,
        ..Default::default()
    };
    let sol = rom_solve(&ops, 0.04, &cfg, None).unwrap();
    let rec = recover_full(&disc, &ops, &sol, 0.04);
    let div = disc.ops.divergence_residual(&rec);
    assert!(div < 1e-6, "divergence functional {div}");
}

#[test]
fn relative_error_identities() {
    let disc = small_channel(3);
    let (snaps, _ops, clean) = trained(&disc, &[0.05], 1.0);
    let f = snaps.to_field(&disc, 0, &clean);
    assert_eq!(relative_h1_error(&disc.ops, &f, &f).unwrap(), 0.0);
    let mut doubled = f.clone();
    for e in 0..doubled.n_elements() {
        doubled.velocity[e] *= 2.0;
    }
    let err = relative_h1_error(&disc.ops, &f, &doubled).unwrap();
    assert!((err - 1.0).abs() < 1e-12);
    let zero = FlowField::zero(&disc.ops.mesh, disc.basis());
    assert!(relative_h1_error(&disc.ops, &zero, &f).is_err());
}

#[test]
fn steady_state_passes_residual_and_divergence_checks() {
    let disc = small_channel(4);
    let profile = InflowProfile::new(2.5, 3.5);
    let clean = project_dirichlet(
        &disc.ops,
        &disc.tags,
        &disc.maps,
        &BoundaryData::from_inflow(profile),
    );
    let cfg = IterationConfig {
        tol: 1e-10,
        max_iter: 100,
        ..Default::default()
    };
    let solve = solve_steady(&disc, 0.04, None, &clean, &cfg).unwrap();
    assert!(solve.converged);
    let res = steady_residual(&disc, &solve.field, &clean).unwrap();
    assert!(res <= 10.0 * cfg.tol, "steady residual {res}");
    let div = disc.ops.divergence_residual(&solve.field);
    assert!(div < 1e-9, "divergence functional {div}");
}
