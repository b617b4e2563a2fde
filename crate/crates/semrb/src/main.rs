//! Command-line driver: verification, full-order solves, offline reduced
//! model construction, online sweeps and full-vs-reduced comparison.

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use semrb::assembly::{project_dirichlet, BoundaryData, InflowProfile};
use semrb::basis::{Basis2d, BasisSpec};
use semrb::error::Error;
use semrb::io::{
    export_field, load_rom, save_rom, save_snapshots, write_spectrum, write_sweep_report,
    write_verify_table, ReportRow,
};
use semrb::kovasznay::convergence_study;
use semrb::mesh::{build_channel_mesh, tag_boundaries};
use semrb::rom::{offline_build, recover_full, relative_h1_error, rom_solve, SnapshotSet};
use semrb::solver::{
    asymmetry_indicator, continuation_sweep, median, Discretization, IterationConfig, SweepResult,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "semrb",
    about = "Spectral element channel flow solver with a POD reduced-basis online model",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Elements along the channel.
    #[arg(long, global = true, default_value_t = 8)]
    nx: usize,
    /// Elements across the channel.
    #[arg(long, global = true, default_value_t = 4)]
    ny: usize,
    #[arg(long, global = true, default_value_t = 36.0)]
    lx: f64,
    #[arg(long, global = true, default_value_t = 6.0)]
    ly: f64,
    /// Velocity polynomial order (pressure runs two orders lower).
    #[arg(long, global = true, default_value_t = 12)]
    order: usize,
    /// Quadrature points per direction (default: order + 2).
    #[arg(long, global = true)]
    quad: Option<usize>,
    /// Explicit viscosity list, comma separated.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    nu: Vec<f64>,
    /// Viscosity range "high:low", swept descending.
    #[arg(long, global = true, default_value = "0.0075:0.0025")]
    nu_range: String,
    /// Number of points in the viscosity range.
    #[arg(long, global = true)]
    nu_count: Option<usize>,
    /// Relative H1 change stopping tolerance.
    #[arg(long, global = true, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, global = true, default_value_t = 400)]
    max_iter: usize,
    /// Under-relaxation factor in (0, 1].
    #[arg(long, global = true, default_value_t = 1.0)]
    relax: f64,
    /// Skew the inflow on the first sweep parameter to select a
    /// wall-hugging branch.
    #[arg(long, global = true)]
    perturb: bool,
    /// POD energy fraction to retain.
    #[arg(long, global = true, default_value_t = 0.999)]
    energy: f64,
    #[arg(long, global = true, default_value = "snapshots.bin")]
    snapshots: PathBuf,
    #[arg(long, global = true, default_value = "rom.bin")]
    rom: PathBuf,
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit zero even when some parameters did not converge.
    #[arg(long, global = true)]
    allow_partial: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Steady benchmark with an exact solution under p-refinement.
    Verify {
        /// Velocity orders to sweep.
        #[arg(long, value_delimiter = ',', default_value = "4,6,8,10")]
        orders: Vec<usize>,
        /// Benchmark Reynolds number.
        #[arg(long, default_value_t = 40.0)]
        kov_re: f64,
    },
    /// Full-order continuation sweep, exporting the last field.
    Solve {
        /// CSV dump of the final field sampled on a uniform grid.
        #[arg(long, default_value = "field.csv")]
        field: PathBuf,
        /// Sample grid, e.g. 361x61.
        #[arg(long, default_value = "361x61")]
        grid: String,
    },
    /// Snapshot sweep, POD and reduced operator assembly.
    Offline {
        /// CSV dump of the POD spectra.
        #[arg(long, default_value = "pod_spectrum.csv")]
        spectrum: PathBuf,
    },
    /// Reduced-only sweep from a stored artifact.
    Online,
    /// Full versus reduced comparison with timings and errors.
    Compare,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::BadMagic
        | Error::UnsupportedVersion { .. }
        | Error::FingerprintMismatch { .. }
        | Error::CorruptArtifact(_) => 4,
        Error::Io(ioe) if ioe.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<u8, Error> {
    match &cli.cmd {
        Cmd::Verify { orders, kov_re } => cmd_verify(cli, orders, *kov_re),
        Cmd::Solve { field, grid } => cmd_solve(cli, field, grid),
        Cmd::Offline { spectrum } => cmd_offline(cli, spectrum),
        Cmd::Online => cmd_online(cli),
        Cmd::Compare => cmd_compare(cli),
    }
}

fn iteration_config(cli: &Cli) -> IterationConfig {
    IterationConfig {
        tol: cli.tol,
        max_iter: cli.max_iter,
        under_relaxation: cli.relax,
        ..Default::default()
    }
}

fn nu_list(cli: &Cli, default_count: usize) -> Result<Vec<f64>, Error> {
    let mut nus = if !cli.nu.is_empty() {
        cli.nu.clone()
    } else {
        let (hi, lo) = cli
            .nu_range
            .split_once(':')
            .ok_or_else(|| Error::config("expected --nu-range HIGH:LOW"))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| Error::config("bad number in --nu-range"))?;
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| Error::config("bad number in --nu-range"))?;
        let (hi, lo) = if hi >= lo { (hi, lo) } else { (lo, hi) };
        let n = cli.nu_count.unwrap_or(default_count);
        if n == 0 {
            Vec::new()
        } else if n == 1 {
            vec![hi]
        } else {
            (0..n)
                .map(|i| hi - (hi - lo) * i as f64 / (n - 1) as f64)
                .collect()
        }
    };
    if nus.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::config("viscosities must be positive"));
    }
    nus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    nus.dedup();
    Ok(nus)
}

fn discretization(cli: &Cli) -> Result<Discretization, Error> {
    let mesh = build_channel_mesh(cli.nx, cli.ny, cli.lx, cli.ly)?;
    let tags = tag_boundaries(&mesh, (2.5, 3.5), true)?;
    let basis = Basis2d::new(BasisSpec::new(cli.order, cli.quad)?)?;
    let disc = Discretization::new(mesh, basis, tags);
    log_dof_summary(&disc, cli);
    Ok(disc)
}

fn log_dof_summary(disc: &Discretization, cli: &Cli) {
    let maps = &disc.maps;
    let basis = disc.basis();
    let ni = basis.n_interior_modes();
    let n_el = maps.n_elements;
    let gathered = maps.n_global_total(ni);
    log::info!(
        "dofs: {} local boundary velocity; gathered total {} ({} boundary velocity + {} pressure + {} interior velocity); condensed system size {}",
        maps.n_local_boundary_velocity(),
        gathered,
        maps.n_global_velocity,
        n_el * maps.n_pressure_modes,
        n_el * 2 * ni,
        maps.dim_b(),
    );
    let default_setup = cli.nx == 8
        && cli.ny == 4
        && cli.lx == 36.0
        && cli.ly == 6.0
        && basis.spec.order_velocity == 12;
    if default_setup {
        log::info!(
            "dofs: published count for this benchmark configuration is 14259; \
             our gathered total is {gathered} (the published figure does not \
             state its velocity/pressure composition, so agreement is not expected)"
        );
    }
}

fn cmd_verify(cli: &Cli, orders: &[usize], kov_re: f64) -> Result<u8, Error> {
    if orders.is_empty() {
        return Err(Error::config("verify needs at least one order"));
    }
    let cfg = IterationConfig {
        tol: cli.tol.min(1e-9),
        ..iteration_config(cli)
    };
    let rows = convergence_study(orders, kov_re, 2, 2, &cfg)?;
    println!("order,h1_error,rel_h1_error,iterations,converged");
    for r in &rows {
        println!(
            "{},{:.6e},{:.6e},{},{}",
            r.order, r.h1_error, r.rel_h1_error, r.iterations, r.converged
        );
    }
    if let Some(path) = &cli.report {
        write_verify_table(path, &rows)?;
    }
    if rows.iter().any(|r| !r.converged) && !cli.allow_partial {
        return Ok(3);
    }
    Ok(0)
}

fn sweep_rows(results: &[SweepResult]) -> Vec<ReportRow> {
    results
        .iter()
        .map(|r| ReportRow {
            nu: r.nu,
            reynolds: r.reynolds,
            iterations: r.iterations,
            final_rel_change: r.final_rel_change,
            asymmetry: r.asymmetry,
            fom_time_s: Some(r.iter_time_s),
            rom_time_s: None,
            rel_h1_error: None,
        })
        .collect()
}

fn cmd_solve(cli: &Cli, field_path: &PathBuf, grid: &str) -> Result<u8, Error> {
    let disc = discretization(cli)?;
    let nus = nu_list(cli, 1)?;
    if nus.is_empty() {
        return Err(Error::config("solve needs at least one viscosity"));
    }
    let cfg = iteration_config(cli);
    let out = continuation_sweep(&disc, InflowProfile::new(2.5, 3.5), &nus, &cfg, cli.perturb)?;
    if let Some(path) = &cli.report {
        write_sweep_report(path, &sweep_rows(&out.results))?;
    }
    if let Some(f) = out.fields.last() {
        export_field(field_path, &disc, f, parse_grid(grid)?)?;
        log::info!("field exported to {}", field_path.display());
    }
    Ok(if out.completed || cli.allow_partial { 0 } else { 3 })
}

fn cmd_offline(cli: &Cli, spectrum: &PathBuf) -> Result<u8, Error> {
    let disc = discretization(cli)?;
    let nus = nu_list(cli, 11)?;
    if nus.is_empty() {
        return Err(Error::config("offline needs at least one training viscosity"));
    }
    let cfg = iteration_config(cli);
    let profile = InflowProfile::new(2.5, 3.5);
    let out = continuation_sweep(&disc, profile, &nus, &cfg, cli.perturb)?;
    if !out.completed && !cli.allow_partial {
        log::error!("training sweep halted; no artifact written");
        return Ok(3);
    }
    let mut snaps = SnapshotSet::new(&disc);
    for (r, f) in out.results.iter().filter(|r| r.converged).zip(&out.fields) {
        snaps.push_field(&disc, r.nu, f);
    }
    save_snapshots(&cli.snapshots, &snaps)?;
    log::info!(
        "{} snapshots saved to {}",
        snaps.snapshots.len(),
        cli.snapshots.display()
    );
    let clean = project_dirichlet(
        &disc.ops,
        &disc.tags,
        &disc.maps,
        &BoundaryData::from_inflow(profile),
    );
    let ops = offline_build(&disc, &snaps, &clean, cli.energy)?;
    write_spectrum(spectrum, &ops.projection.main, &ops.projection.interior)?;
    save_rom(&cli.rom, &ops)?;
    log::info!(
        "reduced model with {} + {} modes saved to {}",
        ops.n_main(),
        ops.n_int(),
        cli.rom.display()
    );
    if let Some(path) = &cli.report {
        write_sweep_report(path, &sweep_rows(&out.results))?;
    }
    Ok(0)
}

fn load_rom_for(cli: &Cli, disc: &Discretization) -> Result<semrb::rom::RomOperators, Error> {
    if !cli.rom.exists() {
        return Err(Error::config(format!(
            "reduced model artifact {} not found; run `semrb offline` first",
            cli.rom.display()
        )));
    }
    load_rom(&cli.rom, disc.fingerprint())
}

fn cmd_online(cli: &Cli) -> Result<u8, Error> {
    let disc = discretization(cli)?;
    let ops = load_rom_for(cli, &disc)?;
    let nus = nu_list(cli, 21)?;
    let cfg = iteration_config(cli);
    let mut rows = Vec::new();
    let mut seed: Option<DVector<f64>> = None;
    let mut all_converged = true;
    for &nu in &nus {
        let warm = ops.seed_for(nu).or_else(|| seed.clone());
        let sol = rom_solve(&ops, nu, &cfg, warm.as_ref())?;
        seed = Some(sol.coords.clone());
        all_converged &= sol.converged;
        let field = recover_full(&disc, &ops, &sol, nu);
        rows.push(ReportRow {
            nu,
            reynolds: SweepResult::reynolds_of(nu),
            iterations: sol.iterations,
            final_rel_change: sol.history.last().copied().unwrap_or(0.0),
            asymmetry: asymmetry_indicator(&disc, &field),
            fom_time_s: None,
            rom_time_s: Some(sol.median_iter_time()),
            rel_h1_error: None,
        });
        log::info!(
            "online nu {nu:.6}: {} reduced iterations, median {:.3} ms each",
            sol.iterations,
            sol.median_iter_time() * 1e3
        );
    }
    if let Some(path) = &cli.report {
        if !rows.is_empty() {
            write_sweep_report(path, &rows)?;
        }
    }
    Ok(if all_converged || cli.allow_partial { 0 } else { 3 })
}

fn cmd_compare(cli: &Cli) -> Result<u8, Error> {
    let disc = discretization(cli)?;
    let ops = load_rom_for(cli, &disc)?;
    let nus = nu_list(cli, 21)?;
    if nus.is_empty() {
        return Err(Error::config("compare needs at least one viscosity"));
    }
    let cfg = iteration_config(cli);
    let out = continuation_sweep(&disc, InflowProfile::new(2.5, 3.5), &nus, &cfg, cli.perturb)?;
    let mut rows = Vec::new();
    let mut fom_times = Vec::new();
    let mut rom_times = Vec::new();
    let mut seed: Option<DVector<f64>> = None;
    let mut all_converged = out.completed;
    for r in &out.results {
        let warm = ops.seed_for(r.nu).or_else(|| seed.clone());
        let sol = rom_solve(&ops, r.nu, &cfg, warm.as_ref())?;
        seed = Some(sol.coords.clone());
        all_converged &= sol.converged;
        let rec = recover_full(&disc, &ops, &sol, r.nu);
        let err = r
            .snapshot
            .map(|i| relative_h1_error(&disc.ops, &out.fields[i], &rec))
            .transpose()?;
        fom_times.push(r.iter_time_s);
        rom_times.push(sol.median_iter_time());
        rows.push(ReportRow {
            nu: r.nu,
            reynolds: r.reynolds,
            iterations: r.iterations,
            final_rel_change: r.final_rel_change,
            asymmetry: r.asymmetry,
            fom_time_s: Some(r.iter_time_s),
            rom_time_s: Some(sol.median_iter_time()),
            rel_h1_error: err,
        });
    }
    let fom_med = median(&fom_times);
    let rom_med = median(&rom_times);
    let ratio = if rom_med > 0.0 { fom_med / rom_med } else { f64::INFINITY };
    log::info!(
        "timing: median full iteration {:.3} ms, median reduced iteration {:.4} ms, ratio {:.0}x",
        fom_med * 1e3,
        rom_med * 1e3,
        ratio
    );
    if let Some(path) = &cli.report {
        write_sweep_report(path, &rows)?;
    }
    Ok(if all_converged || cli.allow_partial { 0 } else { 3 })
}

fn parse_grid(grid: &str) -> Result<(usize, usize), Error> {
    let (a, b) = grid
        .split_once('x')
        .ok_or_else(|| Error::config("expected --grid NXxNY, e.g. 361x61"))?;
    let gx = a.parse().map_err(|_| Error::config("bad grid size"))?;
    let gy = b.parse().map_err(|_| Error::config("bad grid size"))?;
    Ok((gx, gy))
}
