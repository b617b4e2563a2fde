//! Persistence of snapshots and ROM artifacts (little-endian binary with a
//! versioned, fingerprinted header) plus the CSV exports: sweep reports,
//! POD spectra, verification tables and sampled field dumps.

use crate::assembly::FlowField;
use crate::error::{Error, Result};
use crate::rom::{PodBasis, Projection, RomOperators, Snapshot, SnapshotSet};
use crate::solver::Discretization;
use nalgebra::{DMatrix, DVector};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"SEMRB";
const VERSION: u32 = 1;

const KIND_SNAPSHOTS: u8 = 1;
const KIND_ROM: u8 = 2;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn header(&mut self, kind: u8, fingerprint: u64) -> Result<()> {
        self.0.write_all(MAGIC)?;
        self.u32(VERSION)?;
        self.0.write_all(&[kind])?;
        self.u64(fingerprint)
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn slice(&mut self, v: &[f64]) -> Result<()> {
        self.u64(v.len() as u64)?;
        for &x in v {
            self.f64(x)?;
        }
        Ok(())
    }

    fn vector(&mut self, v: &DVector<f64>) -> Result<()> {
        self.slice(v.as_slice())
    }

    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        self.u64(m.nrows() as u64)?;
        self.u64(m.ncols() as u64)?;
        for &x in m.as_slice() {
            self.f64(x)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn header(&mut self, kind: u8, expected_fingerprint: u64) -> Result<()> {
        let mut magic = [0u8; 5];
        self.bytes(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mut k = [0u8; 1];
        self.bytes(&mut k)?;
        if k[0] != kind {
            return Err(Error::CorruptArtifact(format!(
                "payload kind {} where {kind} was expected",
                k[0]
            )));
        }
        let fingerprint = self.u64()?;
        if fingerprint != expected_fingerprint {
            return Err(Error::FingerprintMismatch {
                found: fingerprint,
                expected: expected_fingerprint,
            });
        }
        Ok(())
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0
            .read_exact(buf)
            .map_err(|_| Error::CorruptArtifact("file truncated".into()))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn slice(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }

    fn vector(&mut self) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.slice()?))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(DMatrix::from_vec(rows, cols, data))
    }
}

pub fn save_snapshots(path: &Path, set: &SnapshotSet) -> Result<()> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.header(KIND_SNAPSHOTS, set.fingerprint)?;
    w.u64(set.dim_hat as u64)?;
    w.u64(set.dim_int as u64)?;
    w.u64(set.snapshots.len() as u64)?;
    for s in &set.snapshots {
        w.f64(s.nu)?;
        w.vector(&s.hat)?;
        w.vector(&s.v_int)?;
    }
    Ok(())
}

pub fn load_snapshots(path: &Path, expected_fingerprint: u64) -> Result<SnapshotSet> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    r.header(KIND_SNAPSHOTS, expected_fingerprint)?;
    let dim_hat = r.u64()? as usize;
    let dim_int = r.u64()? as usize;
    let count = r.u64()? as usize;
    let mut snapshots = Vec::with_capacity(count);
    for _ in 0..count {
        let nu = r.f64()?;
        let hat = r.vector()?;
        let v_int = r.vector()?;
        if hat.len() != dim_hat || v_int.len() != dim_int {
            return Err(Error::CorruptArtifact("snapshot dimensions disagree".into()));
        }
        snapshots.push(Snapshot { nu, hat, v_int });
    }
    Ok(SnapshotSet {
        fingerprint: expected_fingerprint,
        dim_hat,
        dim_int,
        snapshots,
    })
}

fn write_pod<W: Write>(w: &mut Writer<W>, basis: &PodBasis) -> Result<()> {
    w.matrix(&basis.modes)?;
    w.slice(&basis.singular_values)?;
    w.u64(basis.n_retained as u64)?;
    w.f64(basis.energy_fraction)
}

fn read_pod<R: Read>(r: &mut Reader<R>) -> Result<PodBasis> {
    let modes = r.matrix()?;
    let singular_values = r.slice()?;
    let n_retained = r.u64()? as usize;
    let energy_fraction = r.f64()?;
    if modes.ncols() != n_retained {
        return Err(Error::CorruptArtifact("mode count disagrees".into()));
    }
    Ok(PodBasis {
        modes,
        singular_values,
        n_retained,
        energy_fraction,
    })
}

pub fn save_rom(path: &Path, ops: &RomOperators) -> Result<()> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.header(KIND_ROM, ops.fingerprint)?;
    write_pod(&mut w, &ops.projection.main)?;
    write_pod(&mut w, &ops.projection.interior)?;
    w.matrix(&ops.k_visc)?;
    w.matrix(&ops.k_fixed)?;
    w.matrix(&ops.k_conv_lift)?;
    w.u64(ops.t_conv.len() as u64)?;
    for t in &ops.t_conv {
        w.matrix(t)?;
    }
    w.vector(&ops.r_force)?;
    w.vector(&ops.r_visc)?;
    w.vector(&ops.r_fixed)?;
    w.vector(&ops.r_conv_lift)?;
    w.matrix(&ops.r_conv_modes)?;
    w.vector(&ops.prescribed)?;
    w.slice(&ops.training_nus)?;
    w.matrix(&ops.training_coords)?;
    w.f64(ops.energy)
}

pub fn load_rom(path: &Path, expected_fingerprint: u64) -> Result<RomOperators> {
    let mut r = Reader(BufReader::new(File::open(path)?));
    r.header(KIND_ROM, expected_fingerprint)?;
    let main = read_pod(&mut r)?;
    let interior = read_pod(&mut r)?;
    let k_visc = r.matrix()?;
    let k_fixed = r.matrix()?;
    let k_conv_lift = r.matrix()?;
    let n_t = r.u64()? as usize;
    let mut t_conv = Vec::with_capacity(n_t);
    for _ in 0..n_t {
        t_conv.push(r.matrix()?);
    }
    let r_force = r.vector()?;
    let r_visc = r.vector()?;
    let r_fixed = r.vector()?;
    let r_conv_lift = r.vector()?;
    let r_conv_modes = r.matrix()?;
    let prescribed = r.vector()?;
    let training_nus = r.slice()?;
    let training_coords = r.matrix()?;
    let energy = r.f64()?;
    let n_aug = main.n_retained + interior.n_retained;
    if k_visc.nrows() != n_aug || t_conv.len() != n_aug {
        return Err(Error::CorruptArtifact("reduced dimensions disagree".into()));
    }
    Ok(RomOperators {
        fingerprint: expected_fingerprint,
        k_visc,
        k_fixed,
        k_conv_lift,
        t_conv,
        r_force,
        r_visc,
        r_fixed,
        r_conv_lift,
        r_conv_modes,
        projection: Projection {
            fingerprint: expected_fingerprint,
            main,
            interior,
        },
        prescribed,
        training_nus,
        training_coords,
        energy,
    })
}

/// Sample velocity and pressure on a uniform grid and write
/// `x,y,u_x,u_y,p` rows for external plotting.
pub fn export_field(
    path: &Path,
    disc: &Discretization,
    field: &FlowField,
    grid: (usize, usize),
) -> Result<()> {
    let (gx, gy) = grid;
    if gx < 2 || gy < 2 {
        return Err(Error::invalid("sample grid needs at least 2x2 points"));
    }
    let mesh = &disc.ops.mesh;
    let basis = disc.basis();
    let n2 = basis.n_velocity_modes();
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "x,y,u_x,u_y,p")?;
    for j in 0..gy {
        for i in 0..gx {
            let x = mesh.lx * i as f64 / (gx - 1) as f64;
            let y = mesh.ly * j as f64 / (gy - 1) as f64;
            let e = mesh.locate(x, y);
            let (xi, eta) = mesh.elements[e].to_reference(x, y);
            let ux = basis.eval_velocity_at(&field.velocity[e].as_slice()[..n2], xi, eta);
            let uy = basis.eval_velocity_at(&field.velocity[e].as_slice()[n2..], xi, eta);
            let p = basis.eval_pressure_at(field.pressure[e].as_slice(), xi, eta);
            writeln!(f, "{x:.12e},{y:.12e},{ux:.12e},{uy:.12e},{p:.12e}")?;
        }
    }
    Ok(())
}

/// One row of the sweep report; optional columns stay empty in the CSV.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub nu: f64,
    pub reynolds: f64,
    pub iterations: usize,
    pub final_rel_change: f64,
    pub asymmetry: f64,
    pub fom_time_s: Option<f64>,
    pub rom_time_s: Option<f64>,
    pub rel_h1_error: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

/// Deterministic sweep report, one row per parameter, viscosity descending.
pub fn write_sweep_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("sweep report needs at least one row"));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| b.nu.partial_cmp(&a.nu).unwrap());
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(
        f,
        "nu,reynolds,iterations,final_rel_change,asymmetry,fom_time_s,rom_time_s,rel_h1_error"
    )?;
    for r in &sorted {
        writeln!(
            f,
            "{:.12e},{:.12e},{},{:.12e},{:.12e},{},{},{}",
            r.nu,
            r.reynolds,
            r.iterations,
            r.final_rel_change,
            r.asymmetry,
            opt(r.fom_time_s),
            opt(r.rom_time_s),
            opt(r.rel_h1_error),
        )?;
    }
    Ok(())
}

/// POD spectra of the state and interior-velocity snapshot families.
pub fn write_spectrum(path: &Path, main: &PodBasis, interior: &PodBasis) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "index,state_sigma,interior_sigma")?;
    let n = main.singular_values.len().max(interior.singular_values.len());
    for i in 0..n {
        let a = main
            .singular_values
            .get(i)
            .map(|s| format!("{s:.12e}"))
            .unwrap_or_default();
        let b = interior
            .singular_values
            .get(i)
            .map(|s| format!("{s:.12e}"))
            .unwrap_or_default();
        writeln!(f, "{i},{a},{b}")?;
    }
    Ok(())
}

/// Verification table of the p-refinement study.
pub fn write_verify_table(path: &Path, rows: &[crate::kovasznay::VerifyRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "order,h1_error,rel_h1_error,iterations,converged")?;
    for r in rows {
        writeln!(
            f,
            "{},{:.12e},{:.12e},{},{}",
            r.order, r.h1_error, r.rel_h1_error, r.iterations, r.converged
        )?;
    }
    Ok(())
}
