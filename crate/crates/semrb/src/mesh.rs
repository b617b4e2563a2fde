//! Structured quadrilateral mesh of a rectangle, boundary tagging, and the
//! local-to-global maps used by the condensation: the gather map M over
//! shared vertex/edge velocity modes and the permutation P that moves each
//! element's mean pressure mode next to the boundary block.

use crate::basis::Basis2d;
use crate::error::{Error, Result};

/// Axis-aligned element with a constant-Jacobian affine map from [-1,1]^2.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeom {
    pub x0: f64,
    pub y0: f64,
    pub hx: f64,
    pub hy: f64,
}

impl ElementGeom {
    pub fn jacobian(&self) -> f64 {
        0.25 * self.hx * self.hy
    }

    pub fn to_physical(&self, xi: f64, eta: f64) -> (f64, f64) {
        (
            self.x0 + 0.5 * (1.0 + xi) * self.hx,
            self.y0 + 0.5 * (1.0 + eta) * self.hy,
        )
    }

    pub fn to_reference(&self, x: f64, y: f64) -> (f64, f64) {
        (
            2.0 * (x - self.x0) / self.hx - 1.0,
            2.0 * (y - self.y0) / self.hy - 1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

/// Mesh edge in its canonical direction (+x for horizontal, +y for vertical).
#[derive(Debug, Clone)]
pub struct Edge {
    pub vertices: (usize, usize),
    pub horizontal: bool,
    /// Elements adjacent to this edge and the side they see it from.
    pub elements: Vec<(usize, Side)>,
    pub on_boundary: bool,
}

#[derive(Debug, Clone)]
pub struct QuadMesh {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub elements: Vec<ElementGeom>,
    pub edges: Vec<Edge>,
}

impl QuadMesh {
    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_vertices(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn vertex_id(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    pub fn vertex_coords(&self, gid: usize) -> (f64, f64) {
        let ix = gid % (self.nx + 1);
        let iy = gid / (self.nx + 1);
        (
            self.lx * ix as f64 / self.nx as f64,
            self.ly * iy as f64 / self.ny as f64,
        )
    }

    /// Horizontal edge between vertices (ix, iy) and (ix+1, iy).
    pub fn h_edge_id(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Vertical edge between vertices (ix, iy) and (ix, iy+1).
    pub fn v_edge_id(&self, ix: usize, iy: usize) -> usize {
        self.nx * (self.ny + 1) + iy * (self.nx + 1) + ix
    }

    pub fn element_id(&self, ex: usize, ey: usize) -> usize {
        ey * self.nx + ex
    }

    pub fn element_index(&self, e: usize) -> (usize, usize) {
        (e % self.nx, e / self.nx)
    }

    /// Edge id seen from a given side of an element.
    pub fn side_edge(&self, e: usize, side: Side) -> usize {
        let (ex, ey) = self.element_index(e);
        match side {
            Side::Bottom => self.h_edge_id(ex, ey),
            Side::Top => self.h_edge_id(ex, ey + 1),
            Side::Left => self.v_edge_id(ex, ey),
            Side::Right => self.v_edge_id(ex + 1, ey),
        }
    }

    /// Element containing a physical point, clamped to the grid.
    pub fn locate(&self, x: f64, y: f64) -> usize {
        let hx = self.lx / self.nx as f64;
        let hy = self.ly / self.ny as f64;
        let ex = ((x / hx).floor() as isize).clamp(0, self.nx as isize - 1) as usize;
        let ey = ((y / hy).floor() as isize).clamp(0, self.ny as isize - 1) as usize;
        self.element_id(ex, ey)
    }
}

/// Uniform nx-by-ny grid of axis-aligned quads covering [0, lx] x [0, ly].
pub fn build_channel_mesh(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<QuadMesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid("element counts must be positive"));
    }
    if !(lx > 0.0) || !(ly > 0.0) {
        return Err(Error::invalid("domain lengths must be positive"));
    }
    let hx = lx / nx as f64;
    let hy = ly / ny as f64;
    let mut elements = Vec::with_capacity(nx * ny);
    for ey in 0..ny {
        for ex in 0..nx {
            elements.push(ElementGeom {
                x0: ex as f64 * hx,
                y0: ey as f64 * hy,
                hx,
                hy,
            });
        }
    }

    let n_h = nx * (ny + 1);
    let n_v = (nx + 1) * ny;
    let mut edges = Vec::with_capacity(n_h + n_v);
    for iy in 0..=ny {
        for ix in 0..nx {
            edges.push(Edge {
                vertices: (iy * (nx + 1) + ix, iy * (nx + 1) + ix + 1),
                horizontal: true,
                elements: Vec::new(),
                on_boundary: iy == 0 || iy == ny,
            });
        }
    }
    for iy in 0..ny {
        for ix in 0..=nx {
            edges.push(Edge {
                vertices: (iy * (nx + 1) + ix, (iy + 1) * (nx + 1) + ix),
                horizontal: false,
                elements: Vec::new(),
                on_boundary: ix == 0 || ix == nx,
            });
        }
    }
    let mut mesh = QuadMesh {
        nx,
        ny,
        lx,
        ly,
        elements,
        edges,
    };
    for e in 0..mesh.n_elements() {
        for side in [Side::Bottom, Side::Right, Side::Top, Side::Left] {
            let eid = mesh.side_edge(e, side);
            mesh.edges[eid].elements.push((e, side));
        }
    }
    debug_assert!(mesh
        .edges
        .iter()
        .all(|ed| ed.elements.len() == if ed.on_boundary { 1 } else { 2 }));
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Inflow,
    Outflow,
    Wall,
}

/// Per-edge boundary tags; `None` marks interior edges.
#[derive(Debug, Clone)]
pub struct BoundaryTags {
    pub edge_tags: Vec<Option<BoundaryTag>>,
    pub inflow_span: (f64, f64),
}

impl BoundaryTags {
    pub fn has_outflow(&self) -> bool {
        self.edge_tags
            .iter()
            .any(|t| *t == Some(BoundaryTag::Outflow))
    }
}

/// Tag every boundary edge as inflow (left edges overlapping the span),
/// outflow (right side), or wall. When `allow_subedge` is false the span
/// endpoints must coincide with mesh grid lines.
pub fn tag_boundaries(
    mesh: &QuadMesh,
    inflow_span: (f64, f64),
    allow_subedge: bool,
) -> Result<BoundaryTags> {
    let (y0, y1) = inflow_span;
    if !(0.0 <= y0 && y0 < y1 && y1 <= mesh.ly) {
        return Err(Error::config(format!(
            "inflow span ({y0}, {y1}) outside the channel height [0, {}]",
            mesh.ly
        )));
    }
    if !allow_subedge {
        let hy = mesh.ly / mesh.ny as f64;
        let on_grid = |y: f64| (y / hy - (y / hy).round()).abs() < 1e-12;
        if !(on_grid(y0) && on_grid(y1)) {
            return Err(Error::config(format!(
                "inflow span ({y0}, {y1}) is not resolved by the element grid \
                 (grid lines every {hy}); enable sub-edge Dirichlet projection"
            )));
        }
    }
    let mut edge_tags = vec![None; mesh.edges.len()];
    for (eid, edge) in mesh.edges.iter().enumerate() {
        if !edge.on_boundary {
            continue;
        }
        let (ax, ay) = mesh.vertex_coords(edge.vertices.0);
        let (_, by) = mesh.vertex_coords(edge.vertices.1);
        let tag = if !edge.horizontal && ax >= mesh.lx - 1e-12 {
            BoundaryTag::Outflow
        } else if !edge.horizontal && ax <= 1e-12 && ay < y1 - 1e-12 && by > y0 + 1e-12 {
            BoundaryTag::Inflow
        } else {
            BoundaryTag::Wall
        };
        edge_tags[eid] = Some(tag);
    }
    Ok(BoundaryTags {
        edge_tags,
        inflow_span,
    })
}

/// Where a local boundary mode lives globally.
#[derive(Debug, Clone, Copy)]
pub struct GatherEntry {
    pub gid: usize,
    pub sign: f64,
}

/// Index permutation moving each element's mean pressure mode into the
/// boundary block: pre-order is [velocity global, pressures element-major],
/// hat order is [velocity global, element means, remaining pressure modes].
#[derive(Debug, Clone)]
pub struct MeanPressurePermutation {
    pub to_hat: Vec<usize>,
    pub from_hat: Vec<usize>,
}

impl MeanPressurePermutation {
    pub fn len(&self) -> usize {
        self.to_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_hat.is_empty()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (pre, &hat) in self.to_hat.iter().enumerate() {
            out[hat] = v[pre];
        }
        out
    }

    pub fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (hat, &pre) in self.from_hat.iter().enumerate() {
            out[pre] = v[hat];
        }
        out
    }
}

/// Local-to-global maps for one mesh/basis pair.
#[derive(Debug, Clone)]
pub struct DofMaps {
    /// Scalar global boundary-velocity dofs (vertices then edge modes).
    pub n_scalar: usize,
    /// Both velocity components: x block then y block.
    pub n_global_velocity: usize,
    /// Per element, aligned with `Basis2d::boundary_modes`: scalar gid + sign.
    pub gather: Vec<Vec<GatherEntry>>,
    /// How many elements share each scalar dof.
    pub multiplicity: Vec<usize>,
    /// Scalar dofs with prescribed values (walls and inflow, both components).
    pub dirichlet_scalar: Vec<bool>,
    /// Free velocity dof -> position in the solve vector, and its inverse.
    pub free_velocity: Vec<usize>,
    pub free_index: Vec<Option<usize>>,
    /// Mean pressure pinned to zero when the problem has no outflow side.
    pub pinned_mean: Option<usize>,
    pub mean_pressure_permutation: MeanPressurePermutation,
    /// Number of pressure modes per element.
    pub n_pressure_modes: usize,
    pub n_elements: usize,
}

impl DofMaps {
    pub fn n_local_boundary_velocity(&self) -> usize {
        self.gather.iter().map(|g| 2 * g.len()).sum()
    }

    /// Unknown count of the final condensed system: free velocity plus one
    /// mean pressure per element (minus a pinned one, if any).
    pub fn dim_b(&self) -> usize {
        self.free_velocity.len() + self.n_elements - usize::from(self.pinned_mean.is_some())
    }

    /// Position of element `e`'s mean pressure inside the b vector, `None`
    /// when pinned.
    pub fn mean_index(&self, e: usize) -> Option<usize> {
        match self.pinned_mean {
            Some(pin) if e == pin => None,
            Some(pin) if e > pin => Some(self.free_velocity.len() + e - 1),
            _ => Some(self.free_velocity.len() + e),
        }
    }

    /// Gathered dof total: global boundary velocity + pressure + interior
    /// velocity, reported alongside the condensed dimensions.
    pub fn n_global_total(&self, n_interior_per_component: usize) -> usize {
        self.n_global_velocity
            + self.n_elements * self.n_pressure_modes
            + self.n_elements * 2 * n_interior_per_component
    }
}

/// Build the gather map, Dirichlet mask and mean-pressure permutation.
pub fn build_dof_maps(mesh: &QuadMesh, tags: &BoundaryTags, basis: &Basis2d) -> DofMaps {
    let p = basis.spec.order_velocity;
    let n1 = p + 1;
    let em = p - 1;
    let n_vert = mesh.n_vertices();
    let n_scalar = n_vert + mesh.edges.len() * em;
    let edge_slot = |eid: usize, k: usize| n_vert + eid * em + (k - 1);

    let mut gather = Vec::with_capacity(mesh.n_elements());
    let mut multiplicity = vec![0usize; n_scalar];
    for e in 0..mesh.n_elements() {
        let (ex, ey) = mesh.element_index(e);
        let mut entries = Vec::with_capacity(basis.boundary_modes.len());
        for &m in &basis.boundary_modes {
            let (i, j) = (m / n1, m % n1);
            let gid = match (i, j) {
                (0, 0) => mesh.vertex_id(ex, ey),
                (0, jj) if jj == p => mesh.vertex_id(ex, ey + 1),
                (ii, 0) if ii == p => mesh.vertex_id(ex + 1, ey),
                (ii, jj) if ii == p && jj == p => mesh.vertex_id(ex + 1, ey + 1),
                (0, j) => edge_slot(mesh.side_edge(e, Side::Left), j),
                (i, 0) => edge_slot(mesh.side_edge(e, Side::Bottom), i),
                (ii, j) if ii == p => edge_slot(mesh.side_edge(e, Side::Right), j),
                (i, _) => edge_slot(mesh.side_edge(e, Side::Top), i),
            };
            // Structured grids parameterize every shared edge in the same
            // global direction, so no orientation sign flips arise here. A
            // reversed edge would flip modes of odd Jacobi index:
            // phi_k(-s) = (-1)^(k-1) phi_k(s).
            entries.push(GatherEntry { gid, sign: 1.0 });
            multiplicity[gid] += 1;
        }
        gather.push(entries);
    }

    let mut dirichlet_scalar = vec![false; n_scalar];
    for (eid, edge) in mesh.edges.iter().enumerate() {
        match tags.edge_tags[eid] {
            Some(BoundaryTag::Wall) | Some(BoundaryTag::Inflow) => {
                dirichlet_scalar[edge.vertices.0] = true;
                dirichlet_scalar[edge.vertices.1] = true;
                for k in 1..=em {
                    dirichlet_scalar[edge_slot(eid, k)] = true;
                }
            }
            _ => {}
        }
    }

    let n_global_velocity = 2 * n_scalar;
    let mut free_velocity = Vec::new();
    let mut free_index = vec![None; n_global_velocity];
    for comp in 0..2 {
        for s in 0..n_scalar {
            if !dirichlet_scalar[s] {
                free_index[comp * n_scalar + s] = Some(free_velocity.len());
                free_velocity.push(comp * n_scalar + s);
            }
        }
    }

    let n_elements = mesh.n_elements();
    let np2 = basis.n_pressure_modes();
    let n_level1 = n_global_velocity + n_elements * np2;
    let mut to_hat = vec![0usize; n_level1];
    for (g, slot) in to_hat.iter_mut().enumerate().take(n_global_velocity) {
        *slot = g;
    }
    for e in 0..n_elements {
        for m in 0..np2 {
            let pre = n_global_velocity + e * np2 + m;
            to_hat[pre] = if m == 0 {
                n_global_velocity + e
            } else {
                n_global_velocity + n_elements + e * (np2 - 1) + (m - 1)
            };
        }
    }
    let mut from_hat = vec![0usize; n_level1];
    for (pre, &hat) in to_hat.iter().enumerate() {
        from_hat[hat] = pre;
    }

    let pinned_mean = if tags.has_outflow() { None } else { Some(0) };

    DofMaps {
        n_scalar,
        n_global_velocity,
        gather,
        multiplicity,
        dirichlet_scalar,
        free_velocity,
        free_index,
        pinned_mean,
        mean_pressure_permutation: MeanPressurePermutation { to_hat, from_hat },
        n_pressure_modes: np2,
        n_elements,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use approx::assert_relative_eq;

    fn channel_tags(mesh: &QuadMesh) -> BoundaryTags {
        tag_boundaries(mesh, (2.5, 3.5), true).unwrap()
    }

    #[test]
    fn default_channel_has_32_elements() {
        let mesh = build_channel_mesh(8, 4, 36.0, 6.0).unwrap();
        assert_eq!(mesh.n_elements(), 32);
        for el in &mesh.elements {
            assert_relative_eq!(el.hx, 4.5);
            assert_relative_eq!(el.hy, 1.5);
        }
        let area: f64 = mesh.elements.iter().map(|e| e.hx * e.hy).sum();
        assert_relative_eq!(area, 36.0 * 6.0, epsilon = 1e-12);
    }

    #[test]
    fn single_element_mesh_has_four_boundary_edges() {
        let mesh = build_channel_mesh(1, 1, 2.0, 1.0).unwrap();
        assert_eq!(mesh.n_elements(), 1);
        assert_eq!(mesh.edges.len(), 4);
        assert!(mesh.edges.iter().all(|e| e.on_boundary));
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(build_channel_mesh(0, 4, 1.0, 1.0).is_err());
        assert!(build_channel_mesh(2, 2, -1.0, 1.0).is_err());
        assert!(build_channel_mesh(2, 2, 1.0, 0.0).is_err());
    }

    #[test]
    fn outflow_edges_sit_at_right_side() {
        let mesh = build_channel_mesh(8, 4, 36.0, 6.0).unwrap();
        let tags = channel_tags(&mesh);
        let outflow: Vec<usize> = (0..mesh.edges.len())
            .filter(|&e| tags.edge_tags[e] == Some(BoundaryTag::Outflow))
            .collect();
        assert_eq!(outflow.len(), 4);
        for eid in outflow {
            let (x, _) = mesh.vertex_coords(mesh.edges[eid].vertices.0);
            assert_relative_eq!(x, 36.0);
        }
    }

    #[test]
    fn full_span_inflow_has_no_left_wall() {
        let mesh = build_channel_mesh(4, 2, 10.0, 6.0).unwrap();
        let tags = tag_boundaries(&mesh, (0.0, 6.0), false).unwrap();
        for (eid, edge) in mesh.edges.iter().enumerate() {
            let (x, _) = mesh.vertex_coords(edge.vertices.0);
            if !edge.horizontal && x == 0.0 {
                assert_eq!(tags.edge_tags[eid], Some(BoundaryTag::Inflow));
            }
        }
    }

    #[test]
    fn misaligned_span_needs_subedge_mode() {
        let mesh = build_channel_mesh(8, 4, 36.0, 6.0).unwrap();
        // Grid lines at y = 0, 1.5, 3, 4.5, 6: the span (2.5, 3.5) is not
        // resolvable without sub-edge projection.
        assert!(tag_boundaries(&mesh, (2.5, 3.5), false).is_err());
        assert!(tag_boundaries(&mesh, (2.5, 3.5), true).is_ok());
        assert!(tag_boundaries(&mesh, (1.5, 3.0), false).is_ok());
    }

    #[test]
    fn single_element_gather_is_identity() {
        let mesh = build_channel_mesh(1, 1, 1.0, 1.0).unwrap();
        let tags = tag_boundaries(&mesh, (0.0, 1.0), false).unwrap();
        let basis = Basis2d::new(BasisSpec::new(4, None).unwrap()).unwrap();
        let maps = build_dof_maps(&mesh, &tags, &basis);
        assert_eq!(maps.n_local_boundary_velocity(), 2 * 4 * 4);
        assert_eq!(maps.n_scalar, maps.gather[0].len());
        let mut seen = vec![false; maps.n_scalar];
        for ge in &maps.gather[0] {
            assert!(!seen[ge.gid]);
            seen[ge.gid] = true;
            assert_eq!(ge.sign, 1.0);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn shared_edge_matches_p_plus_one_modes() {
        // Two elements side by side at p = 3: the shared vertical edge
        // carries 2 vertices + (p-1) edge modes = p + 1 matched pairs per
        // velocity component. Count by brute force over gather collisions.
        let mesh = build_channel_mesh(2, 1, 2.0, 1.0).unwrap();
        let tags = tag_boundaries(&mesh, (0.0, 1.0), false).unwrap();
        let basis = Basis2d::new(BasisSpec::new(3, None).unwrap()).unwrap();
        let maps = build_dof_maps(&mesh, &tags, &basis);
        let mut matched = 0;
        for a in &maps.gather[0] {
            for b in &maps.gather[1] {
                if a.gid == b.gid {
                    matched += 1;
                }
            }
        }
        assert_eq!(matched, 4);
        assert_eq!(
            maps.multiplicity.iter().filter(|&&m| m == 2).count(),
            4
        );
    }

    #[test]
    fn paper_scale_local_boundary_dofs() {
        let mesh = build_channel_mesh(8, 4, 36.0, 6.0).unwrap();
        let tags = channel_tags(&mesh);
        let basis = Basis2d::new(BasisSpec::new(12, None).unwrap()).unwrap();
        let maps = build_dof_maps(&mesh, &tags, &basis);
        assert_eq!(maps.n_local_boundary_velocity(), 3072);
    }

    #[test]
    fn gather_scatter_round_trip_with_averaging() {
        let mesh = build_channel_mesh(3, 2, 3.0, 2.0).unwrap();
        let tags = tag_boundaries(&mesh, (0.0, 2.0), false).unwrap();
        let basis = Basis2d::new(BasisSpec::new(4, None).unwrap()).unwrap();
        let maps = build_dof_maps(&mesh, &tags, &basis);
        // Deterministic pseudo-random global vector.
        let global: Vec<f64> = (0..maps.n_scalar)
            .map(|i| ((i * 2654435761) % 1000) as f64 / 997.0 - 0.5)
            .collect();
        let mut recovered = vec![0.0; maps.n_scalar];
        for entries in &maps.gather {
            for ge in entries {
                let local = ge.sign * global[ge.gid];
                recovered[ge.gid] += ge.sign * local;
            }
        }
        for (g, r) in global.iter().zip(&recovered) {
            let gidx = global.iter().position(|x| x == g).unwrap();
            assert_relative_eq!(r / maps.multiplicity[gidx] as f64, *g, epsilon = 1e-14);
        }
    }

    #[test]
    fn permutation_round_trip_and_single_moves() {
        let mesh = build_channel_mesh(2, 2, 2.0, 2.0).unwrap();
        let tags = tag_boundaries(&mesh, (0.0, 2.0), false).unwrap();
        let basis = Basis2d::new(BasisSpec::new(3, None).unwrap()).unwrap();
        let maps = build_dof_maps(&mesh, &tags, &basis);
        let perm = &maps.mean_pressure_permutation;
        let n = perm.len();
        assert_eq!(n, maps.n_global_velocity + 4 * basis.n_pressure_modes());
        // A basis vector moves to exactly one slot.
        for pre in [0usize, maps.n_global_velocity, n - 1] {
            let mut e = vec![0.0; n];
            e[pre] = 1.0;
            let h = perm.apply(&e);
            assert_eq!(h.iter().filter(|&&x| x != 0.0).count(), 1);
            let back = perm.apply_inverse(&h);
            assert_eq!(back, e);
        }
        // Mean modes land right after the velocity block.
        for e in 0..4 {
            let pre = maps.n_global_velocity + e * basis.n_pressure_modes();
            assert_eq!(perm.to_hat[pre], maps.n_global_velocity + e);
        }
    }

    #[test]
    fn channel_dirichlet_excludes_outflow_interior() {
        let mesh = build_channel_mesh(8, 4, 36.0, 6.0).unwrap();
        let tags = channel_tags(&mesh);
        let basis = Basis2d::new(BasisSpec::new(12, None).unwrap()).unwrap();
        let maps = build_dof_maps(&mesh, &tags, &basis);
        // Free scalar dofs on the outflow: 4 edges x 11 modes + 3 interior
        // vertices of the right side.
        let constrained = maps.dirichlet_scalar.iter().filter(|&&b| b).count();
        let boundary_scalars = 24 + 24 * 11;
        assert_eq!(constrained, boundary_scalars - (4 * 11 + 3));
        assert!(maps.pinned_mean.is_none());
        assert_eq!(maps.dim_b(), maps.free_velocity.len() + 32);
    }
}
