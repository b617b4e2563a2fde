use nalgebra::DVector;
use semrb::assembly::*;
use semrb::basis::{Basis2d, BasisSpec};
use semrb::rom::*;
use semrb::solver::*;

fn residual(ops: &RomOperators, nu: f64, c: &DVector<f64>) -> DVector<f64> {
    ops.online_matrix(nu, c) * c - ops.online_rhs(nu, c)
}

#[test]
fn probe_n3() {
    let mesh = semrb::mesh::build_channel_mesh(4, 2, 18.0, 6.0).unwrap();
    let tags = semrb::mesh::tag_boundaries(&mesh, (2.5, 3.5), true).unwrap();
    let basis = Basis2d::new(BasisSpec::new(4, None).unwrap()).unwrap();
    let disc = Discretization::new(mesh, basis, tags);
    let profile = InflowProfile::new(2.5, 3.5);
    let clean = project_dirichlet(&disc.ops, &disc.tags, &disc.maps, &BoundaryData::from_inflow(profile));
    let cfg = IterationConfig { tol: 1e-11, max_iter: 300, ..Default::default() };
    let nus = [0.05, 0.0425, 0.035, 0.0275, 0.02];
    let out = continuation_sweep(&disc, profile, &nus, &cfg, false).unwrap();
    let mut snaps = SnapshotSet::new(&disc);
    for (r, f) in out.results.iter().zip(&out.fields) { snaps.push_field(&disc, r.nu, f); }
    let ops = offline_build(&disc, &snaps, &clean, 0.99999).unwrap();
    println!("N={} Ni={}", ops.n_main(), ops.n_int());

    // FD check of the Newton Jacobian at a generic point.
    let nu = 0.03;
    let c0 = DVector::from_fn(ops.n_aug(), |i, _| 0.1 * (i as f64 + 1.0));
    let r0 = residual(&ops, nu, &c0);
    let h = 1e-7;
    // rebuild jacobian as in rom_newton
    let mut jac = ops.online_matrix(nu, &c0);
    for (m, t) in ops.t_conv.iter().enumerate() {
        let tc = t * &c0;
        for i in 0..ops.n_aug() { jac[(i, m)] += tc[i]; }
    }
    jac += &ops.r_conv_modes;
    let mut worst = 0.0f64;
    for j in 0..ops.n_aug() {
        let mut cp = c0.clone();
        cp[j] += h;
        let rp = residual(&ops, nu, &cp);
        let fd = (rp - &r0) / h;
        for i in 0..ops.n_aug() {
            worst = worst.max((fd[i] - jac[(i, j)]).abs());
        }
    }
    println!("jacobian FD max dev = {:.3e} (jac scale {:.3e})", worst, jac.amax());

    // warm-started errors at all training points
    let rcfg = IterationConfig { tol: 1e-11, max_iter: 2000, ..Default::default() };
    for (i, &nuv) in nus.iter().enumerate() {
        let warm = ops.seed_for(nuv);
        let sol = rom_solve(&ops, nuv, &rcfg, warm.as_ref()).unwrap();
        let rec = recover_full(&disc, &ops, &sol, nuv);
        let fom = snaps.to_field(&disc, i, &clean);
        let err = relative_h1_error(&disc.ops, &fom, &rec).unwrap();
        println!("nu={:.4} err={:.3e} conv={} its={} dist={:.3e}", nuv, err, sol.converged, sol.iterations,
            (&sol.coords - &warm.unwrap()).norm());
    }
    panic!("inspect");
}
