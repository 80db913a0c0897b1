//! Nested structured triangulations, edge bookkeeping and coarse element patches.
//!
//! Every domain is a union of axis-aligned cells. Each cell is split into two
//! triangles by the diagonal from its upper-left to its lower-right corner, so a
//! uniform `r`-fold subdivision of the cells is a conforming refinement of the
//! coarse triangulation in which every coarse edge is cut into `r` fine edges.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker for "no triangle" in [`TriMesh::edge_triangles`].
pub const NONE: usize = usize::MAX;

/// Computational domains used by the experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// `[0,1]^2`; level 0 is a single cell.
    UnitSquare,
    /// `[0,1]^2 \ [1/2,1]x[0,1/2]`; level 0 has cells of side 1/2.
    LShape,
    /// `[0,width]x[0,height]` split into `nx` by `ny` cells at level 0.
    Rect {
        nx: usize,
        ny: usize,
        width: f64,
        height: f64,
    },
}

impl Domain {
    /// The SPE10 model 2 horizontal extent with its 6x22 coarse cells.
    pub fn spe10_coarse() -> Self {
        Domain::Rect {
            nx: 6,
            ny: 22,
            width: 1.2,
            height: 2.2,
        }
    }

    pub fn base_grid(&self) -> Result<StructuredGrid> {
        match *self {
            Domain::UnitSquare => StructuredGrid::new(1, 1, 1.0, 1.0, None),
            Domain::LShape => StructuredGrid::new(
                2,
                2,
                0.5,
                0.5,
                Some(vec![true, false, true, true]),
            ),
            Domain::Rect {
                nx,
                ny,
                width,
                height,
            } => {
                if nx == 0 || ny == 0 {
                    return Err(Error::Config(format!(
                        "rect domain needs nx, ny >= 1 (got {nx}x{ny})"
                    )));
                }
                if !(width > 0.0 && height > 0.0) {
                    return Err(Error::Config(format!(
                        "rect domain needs positive extent (got {width}x{height})"
                    )));
                }
                StructuredGrid::new(nx, ny, width / nx as f64, height / ny as f64, None)
            }
        }
    }

    /// Cell grid after `level` uniform bisections of the base cells.
    pub fn grid(&self, level: u32) -> Result<StructuredGrid> {
        if level > 16 {
            return Err(Error::Config(format!("refinement level {level} is too large")));
        }
        self.base_grid()?.refine(1 << level)
    }

    /// Cell side length at `level`. For rectangles with non-square cells this
    /// is the horizontal side.
    pub fn mesh_size(&self, level: u32) -> Result<f64> {
        Ok(self.base_grid()?.dx / f64::from(1u32 << level))
    }

    /// Inverse of [`Domain::mesh_size`]: the level whose cell side equals `h`.
    pub fn level_for_mesh_size(&self, h: f64) -> Result<u32> {
        let base = self.base_grid()?.dx;
        let ratio = base / h;
        let level = ratio.log2().round();
        if !(level >= 0.0) || (f64::powf(2.0, level) - ratio).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "mesh size {h} is not a power-of-two refinement of the base cell size {base}"
            )));
        }
        Ok(level as u32)
    }

    /// Area of the domain.
    pub fn area(&self) -> Result<f64> {
        let g = self.base_grid()?;
        Ok(g.active_count() as f64 * g.dx * g.dy)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::UnitSquare => write!(f, "unit_square"),
            Domain::LShape => write!(f, "l_shape"),
            Domain::Rect {
                nx,
                ny,
                width,
                height,
            } => write!(f, "rect({nx},{ny},{width},{height})"),
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    /// Accepts `unit_square`, `l_shape`, `spe10` and `rect(nx,ny,width,height)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "unit_square" => return Ok(Domain::UnitSquare),
            "l_shape" => return Ok(Domain::LShape),
            "spe10" => return Ok(Domain::spe10_coarse()),
            _ => {}
        }
        let bad = || Error::Config(format!("unsupported domain `{s}`"));
        let inner = s
            .strip_prefix("rect(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let nx = parts[0].parse().map_err(|_| bad())?;
        let ny = parts[1].parse().map_err(|_| bad())?;
        let width = parts[2].parse().map_err(|_| bad())?;
        let height = parts[3].parse().map_err(|_| bad())?;
        let d = Domain::Rect {
            nx,
            ny,
            width,
            height,
        };
        d.base_grid()?;
        Ok(d)
    }
}

/// Axis-aligned cell grid anchored at the origin, with an optional activity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    active: Vec<bool>,
}

impl StructuredGrid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, active: Option<Vec<bool>>) -> Result<Self> {
        let active = active.unwrap_or_else(|| vec![true; nx * ny]);
        if active.len() != nx * ny {
            return Err(Error::Config("cell mask has the wrong length".into()));
        }
        Ok(Self {
            nx,
            ny,
            dx,
            dy,
            active,
        })
    }

    /// Splits every cell into `factor x factor` sub-cells.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("refinement factor must be positive".into()));
        }
        let (nx, ny) = (self.nx * factor, self.ny * factor);
        let mut active = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                active[j * nx + i] = self.is_active(i / factor, j / factor);
            }
        }
        Ok(Self {
            nx,
            ny,
            dx: self.dx / factor as f64,
            dy: self.dy / factor as f64,
            active,
        })
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        i < self.nx && j < self.ny && self.active[j * self.nx + i]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Bookkeeping that ties a structured triangulation back to its cell grid.
#[derive(Clone, Debug)]
pub struct StructuredInfo {
    pub grid: StructuredGrid,
    /// `(i, j, upper)` for every triangle.
    pub triangle_cell: Vec<(usize, usize, bool)>,
    /// Vertex id of lattice point `(i, j)` at index `j * (nx + 1) + i`, or [`NONE`].
    pub lattice_vertex: Vec<usize>,
    /// Lattice coordinates of every vertex.
    pub vertex_lattice: Vec<(usize, usize)>,
}

/// A conforming triangulation with oriented edges.
///
/// Edges are stored with the lower vertex index first and sorted
/// lexicographically. The unit normal of an edge is the counterclockwise
/// rotation of the unit tangent pointing from its lower to its higher vertex.
#[derive(Clone, Debug)]
pub struct TriMesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    edge_triangles: Vec<[usize; 2]>,
    triangle_edges: Vec<[usize; 3]>,
    normals: Vec<[f64; 2]>,
    lengths: Vec<f64>,
    areas: Vec<f64>,
    vertex_triangle_offsets: Vec<usize>,
    vertex_triangle_list: Vec<usize>,
    structured: Option<StructuredInfo>,
}

impl TriMesh {
    /// Builds the edge structure of a triangulation given counterclockwise triangles.
    pub fn new(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let nv = vertices.len();
        let mut areas = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(Error::Domain(format!("triangle {t} references a missing vertex")));
            }
            let [a, b, c] = tri.map(|v| vertices[v]);
            let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]));
            if !(area > 0.0) {
                return Err(Error::Domain(format!(
                    "triangle {t} is degenerate or clockwise (signed area {area})"
                )));
            }
            areas.push(area);
        }

        // (min vertex, max vertex, triangle, local edge)
        let mut half_edges: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(3 * triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                let a = tri[(i + 1) % 3];
                let b = tri[(i + 2) % 3];
                half_edges.push((a.min(b), a.max(b), t, i));
            }
        }
        half_edges.sort_unstable();

        let mut edges = Vec::new();
        let mut edge_triangles = Vec::new();
        let mut triangle_edges = vec![[NONE; 3]; triangles.len()];
        let mut k = 0;
        while k < half_edges.len() {
            let (a, b, _, _) = half_edges[k];
            let mut end = k;
            while end < half_edges.len() && half_edges[end].0 == a && half_edges[end].1 == b {
                end += 1;
            }
            if end - k > 2 {
                return Err(Error::Domain(format!(
                    "edge ({a}, {b}) is shared by {} triangles",
                    end - k
                )));
            }
            let e = edges.len();
            edges.push([a, b]);
            let mut inc = [NONE; 2];
            for (slot, he) in half_edges[k..end].iter().enumerate() {
                inc[slot] = he.2;
                triangle_edges[he.2][he.3] = e;
            }
            edge_triangles.push(inc);
            k = end;
        }

        let mut normals = Vec::with_capacity(edges.len());
        let mut lengths = Vec::with_capacity(edges.len());
        for &[a, b] in &edges {
            let (pa, pb) = (vertices[a], vertices[b]);
            let d = [pb[0] - pa[0], pb[1] - pa[1]];
            let len = d[0].hypot(d[1]);
            lengths.push(len);
            normals.push([-d[1] / len, d[0] / len]);
        }

        let mut counts = vec![0usize; nv + 1];
        for tri in &triangles {
            for &v in tri {
                counts[v + 1] += 1;
            }
        }
        for v in 0..nv {
            counts[v + 1] += counts[v];
        }
        let mut fill = counts.clone();
        let mut list = vec![0; counts[nv]];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                list[fill[v]] = t;
                fill[v] += 1;
            }
        }

        Ok(Self {
            vertices,
            triangles,
            edges,
            edge_triangles,
            triangle_edges,
            normals,
            lengths,
            areas,
            vertex_triangle_offsets: counts,
            vertex_triangle_list: list,
            structured: None,
        })
    }

    /// Triangulates the active cells of `grid` with upper-left to lower-right diagonals.
    pub fn from_grid(grid: &StructuredGrid) -> Result<Self> {
        let (nx, ny) = (grid.nx, grid.ny);
        let lattice = |i: usize, j: usize| j * (nx + 1) + i;
        let mut lattice_vertex = vec![NONE; (nx + 1) * (ny + 1)];
        let mut vertex_lattice = Vec::new();
        let mut vertices = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                let touches = (i > 0 && j > 0 && grid.is_active(i - 1, j - 1))
                    || (j > 0 && grid.is_active(i, j - 1))
                    || (i > 0 && grid.is_active(i - 1, j))
                    || grid.is_active(i, j);
                if touches {
                    lattice_vertex[lattice(i, j)] = vertices.len();
                    vertex_lattice.push((i, j));
                    vertices.push([i as f64 * grid.dx, j as f64 * grid.dy]);
                }
            }
        }
        let mut triangles = Vec::with_capacity(2 * grid.active_count());
        let mut triangle_cell = Vec::with_capacity(2 * grid.active_count());
        for j in 0..ny {
            for i in 0..nx {
                if !grid.is_active(i, j) {
                    continue;
                }
                let ll = lattice_vertex[lattice(i, j)];
                let lr = lattice_vertex[lattice(i + 1, j)];
                let ul = lattice_vertex[lattice(i, j + 1)];
                let ur = lattice_vertex[lattice(i + 1, j + 1)];
                triangles.push([ll, lr, ul]);
                triangle_cell.push((i, j, false));
                triangles.push([lr, ur, ul]);
                triangle_cell.push((i, j, true));
            }
        }
        let mut mesh = Self::new(vertices, triangles)?;
        mesh.structured = Some(StructuredInfo {
            grid: grid.clone(),
            triangle_cell,
            lattice_vertex,
            vertex_lattice,
        });
        Ok(mesh)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
    pub fn vertex(&self, v: usize) -> [f64; 2] {
        self.vertices[v]
    }
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }
    pub fn triangle(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    /// Vertex coordinates of triangle `t`.
    pub fn triangle_points(&self, t: usize) -> [[f64; 2]; 3] {
        self.triangles[t].map(|v| self.vertices[v])
    }
    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangle_points(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }
    pub fn edge(&self, e: usize) -> [usize; 2] {
        self.edges[e]
    }
    /// Incident triangles of an edge; the second entry is [`NONE`] on the boundary.
    pub fn edge_triangles(&self, e: usize) -> [usize; 2] {
        self.edge_triangles[e]
    }
    /// Edges of triangle `t`; entry `i` is opposite to local vertex `i`.
    pub fn triangle_edges(&self, t: usize) -> [usize; 3] {
        self.triangle_edges[t]
    }
    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.edge_triangles[e][1] == NONE
    }
    pub fn normal(&self, e: usize) -> [f64; 2] {
        self.normals[e]
    }
    pub fn edge_length(&self, e: usize) -> f64 {
        self.lengths[e]
    }
    pub fn edge_midpoint(&self, e: usize) -> [f64; 2] {
        let [a, b] = self.edges[e].map(|v| self.vertices[v]);
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }
    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }
    pub fn areas(&self) -> &[f64] {
        &self.areas
    }
    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }
    /// Triangles containing vertex `v`.
    pub fn vertex_triangles(&self, v: usize) -> &[usize] {
        &self.vertex_triangle_list[self.vertex_triangle_offsets[v]..self.vertex_triangle_offsets[v + 1]]
    }
    pub fn structured(&self) -> Option<&StructuredInfo> {
        self.structured.as_ref()
    }

    /// Looks up the edge joining two vertices.
    pub fn find_edge(&self, a: usize, b: usize) -> Option<usize> {
        let key = [a.min(b), a.max(b)];
        self.edges.binary_search(&key).ok()
    }

    /// `+1` if the edge normal points out of triangle `t`, `-1` otherwise.
    pub fn orientation(&self, t: usize, local_edge: usize) -> f64 {
        let tri = self.triangles[t];
        let a = self.vertices[tri[(local_edge + 1) % 3]];
        let b = self.vertices[tri[(local_edge + 2) % 3]];
        // outward normal of a counterclockwise triangle is the clockwise rotation of (b - a)
        let outward = [b[1] - a[1], -(b[0] - a[0])];
        let n = self.normals[self.triangle_edges[t][local_edge]];
        if outward[0] * n[0] + outward[1] * n[1] > 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Plain text dump: `v x y` lines followed by `t i j k` lines.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {}", v[0], v[1])?;
        }
        for t in &self.triangles {
            writeln!(w, "t {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// Builds the structured triangulation of `domain` at `level`.
pub fn build_structured_mesh(domain: &Domain, level: u32) -> Result<TriMesh> {
    TriMesh::from_grid(&domain.grid(level)?)
}

/// A fine edge lying on a coarse edge, with the relative orientation of their normals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgePiece {
    pub fine_edge: usize,
    /// `n_e . n_E`, either `+1` or `-1`.
    pub sign: f64,
}

/// A coarse triangulation and a conforming uniform refinement of it.
#[derive(Clone, Debug)]
pub struct MeshHierarchy {
    domain: Domain,
    coarse: TriMesh,
    fine: TriMesh,
    factor: usize,
    levels: Option<(u32, u32)>,
    parent: Vec<usize>,
    children_offsets: Vec<usize>,
    children: Vec<usize>,
    coarse_edge_pieces: Vec<Vec<EdgePiece>>,
    fine_edge_parent: Vec<Option<(usize, f64)>>,
}

/// Nested meshes of `domain` at two refinement levels.
pub fn build_hierarchy(domain: &Domain, coarse_level: u32, fine_level: u32) -> Result<MeshHierarchy> {
    if fine_level <= coarse_level {
        return Err(Error::Config(format!(
            "fine level {fine_level} must exceed coarse level {coarse_level}"
        )));
    }
    let mut h = build_hierarchy_with_factor(domain, coarse_level, 1 << (fine_level - coarse_level))?;
    h.levels = Some((coarse_level, fine_level));
    Ok(h)
}

/// Nested meshes where every coarse cell is split into `factor x factor` fine cells.
pub fn build_hierarchy_with_factor(domain: &Domain, coarse_level: u32, factor: usize) -> Result<MeshHierarchy> {
    if factor < 2 {
        return Err(Error::Config(format!("refinement factor {factor} must be at least 2")));
    }
    let coarse_grid = domain.grid(coarse_level)?;
    let fine_grid = coarse_grid.refine(factor)?;
    let coarse = TriMesh::from_grid(&coarse_grid)?;
    let fine = TriMesh::from_grid(&fine_grid)?;
    let cinfo = coarse.structured().expect("structured coarse mesh");
    let finfo = fine.structured().expect("structured fine mesh");

    // coarse triangle ids by (cell, half)
    let mut coarse_tri_of_cell = vec![NONE; 2 * coarse_grid.nx * coarse_grid.ny];
    for (t, &(i, j, upper)) in cinfo.triangle_cell.iter().enumerate() {
        coarse_tri_of_cell[2 * (j * coarse_grid.nx + i) + upper as usize] = t;
    }

    let r = factor;
    let parent: Vec<usize> = finfo
        .triangle_cell
        .iter()
        .map(|&(i, j, upper)| {
            let (ci, cj) = (i / r, j / r);
            let s = i % r + j % r;
            let coarse_lower = if upper { s + 2 <= r } else { s < r };
            coarse_tri_of_cell[2 * (cj * coarse_grid.nx + ci) + usize::from(!coarse_lower)]
        })
        .collect();

    let mut children_offsets = vec![0usize; coarse.num_triangles() + 1];
    for &p in &parent {
        children_offsets[p + 1] += 1;
    }
    for t in 0..coarse.num_triangles() {
        children_offsets[t + 1] += children_offsets[t];
    }
    let mut fill = children_offsets.clone();
    let mut children = vec![0; parent.len()];
    for (t, &p) in parent.iter().enumerate() {
        children[fill[p]] = t;
        fill[p] += 1;
    }

    let fine_nx1 = fine_grid.nx + 1;
    let mut coarse_edge_pieces = Vec::with_capacity(coarse.num_edges());
    let mut fine_edge_parent = vec![None; fine.num_edges()];
    for ce in 0..coarse.num_edges() {
        let [a, b] = coarse.edge(ce);
        let (ai, aj) = cinfo.vertex_lattice[a];
        let (bi, bj) = cinfo.vertex_lattice[b];
        let (di, dj) = (bi as isize - ai as isize, bj as isize - aj as isize);
        let nc = coarse.normal(ce);
        let mut pieces = Vec::with_capacity(r);
        for k in 0..r as isize {
            let p = |k: isize| {
                let i = (r * ai) as isize + k * di;
                let j = (r * aj) as isize + k * dj;
                finfo.lattice_vertex[j as usize * fine_nx1 + i as usize]
            };
            let (fa, fb) = (p(k), p(k + 1));
            let fe = fine
                .find_edge(fa, fb)
                .ok_or_else(|| Error::Domain(format!("coarse edge {ce} is not resolved by the fine mesh")))?;
            let nf = fine.normal(fe);
            let sign = if nf[0] * nc[0] + nf[1] * nc[1] > 0.0 { 1.0 } else { -1.0 };
            pieces.push(EdgePiece { fine_edge: fe, sign });
            fine_edge_parent[fe] = Some((ce, sign));
        }
        coarse_edge_pieces.push(pieces);
    }

    Ok(MeshHierarchy {
        domain: domain.clone(),
        coarse,
        fine,
        factor,
        levels: None,
        parent,
        children_offsets,
        children,
        coarse_edge_pieces,
        fine_edge_parent,
    })
}

impl MeshHierarchy {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }
    pub fn coarse(&self) -> &TriMesh {
        &self.coarse
    }
    pub fn fine(&self) -> &TriMesh {
        &self.fine
    }
    /// Number of fine edges per coarse edge.
    pub fn factor(&self) -> usize {
        self.factor
    }
    /// `(coarse_level, fine_level)` when built from refinement levels.
    pub fn levels(&self) -> Option<(u32, u32)> {
        self.levels
    }
    /// Coarse triangle containing fine triangle `t`.
    pub fn parent(&self, t: usize) -> usize {
        self.parent[t]
    }
    pub fn parents(&self) -> &[usize] {
        &self.parent
    }
    /// Fine triangles inside coarse triangle `t`.
    pub fn children(&self, t: usize) -> &[usize] {
        &self.children[self.children_offsets[t]..self.children_offsets[t + 1]]
    }
    /// Fine edges composing coarse edge `e`, ordered from its lower to its higher vertex.
    pub fn coarse_edge_pieces(&self, e: usize) -> &[EdgePiece] {
        &self.coarse_edge_pieces[e]
    }
    /// The coarse edge a fine edge lies on, with the relative normal sign.
    pub fn fine_edge_parent(&self, e: usize) -> Option<(usize, f64)> {
        self.fine_edge_parent[e]
    }
    /// Coarse cell side length.
    pub fn coarse_size(&self) -> f64 {
        self.coarse.structured().map_or(f64::NAN, |s| s.grid.dx)
    }
    /// Fine cell side length.
    pub fn fine_size(&self) -> f64 {
        self.fine.structured().map_or(f64::NAN, |s| s.grid.dx)
    }

    /// The `k`-layer vertex-neighbourhood patch around coarse triangle `seed`.
    pub fn patch(&self, seed: usize, k: usize) -> Patch {
        let n = self.coarse.num_triangles();
        let mut mask = vec![false; n];
        let mut members = vec![seed];
        mask[seed] = true;
        let mut frontier = vec![seed];
        let mut vertex_seen = vec![false; self.coarse.num_vertices()];
        for _ in 0..k {
            let mut next = Vec::new();
            for &t in &frontier {
                for v in self.coarse.triangle(t) {
                    if vertex_seen[v] {
                        continue;
                    }
                    vertex_seen[v] = true;
                    for &nb in self.coarse.vertex_triangles(v) {
                        if !mask[nb] {
                            mask[nb] = true;
                            next.push(nb);
                        }
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            members.extend_from_slice(&next);
            frontier = next;
        }
        members.sort_unstable();
        Patch {
            seed,
            layers: k,
            coarse_triangles: members,
            mask,
        }
    }

    /// Smallest `k` for which every patch `U_k(T)` is the whole coarse mesh.
    pub fn saturation_layers(&self) -> usize {
        let n = self.coarse.num_triangles();
        let mut worst = 0;
        let mut dist = vec![usize::MAX; n];
        for seed in 0..n {
            dist.fill(usize::MAX);
            dist[seed] = 0;
            let mut queue = VecDeque::from([seed]);
            let mut ecc = 0;
            while let Some(t) = queue.pop_front() {
                ecc = ecc.max(dist[t]);
                for v in self.coarse.triangle(t) {
                    for &nb in self.coarse.vertex_triangles(v) {
                        if dist[nb] == usize::MAX {
                            dist[nb] = dist[t] + 1;
                            queue.push_back(nb);
                        }
                    }
                }
            }
            worst = worst.max(ecc);
        }
        worst
    }

    /// Fine triangles inside the patch, in increasing order.
    pub fn patch_fine_triangles(&self, patch: &Patch) -> Vec<usize> {
        let mut out: Vec<usize> = patch
            .coarse_triangles
            .iter()
            .flat_map(|&t| self.children(t).iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Fine edges whose two incident triangles both lie in the patch.
    pub fn patch_interior_fine_edges(&self, patch: &Patch) -> Vec<usize> {
        let mut out = Vec::new();
        for &t in &patch.coarse_triangles {
            for &ft in self.children(t) {
                for e in self.fine.triangle_edges(ft) {
                    let [t0, t1] = self.fine.edge_triangles(e);
                    // visit each edge once, from its first incident triangle
                    if t1 == NONE || t0 != ft {
                        continue;
                    }
                    if patch.mask[self.parent[t1]] {
                        out.push(e);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Coarse edges whose two incident coarse triangles both lie in the patch.
    pub fn patch_interior_coarse_edges(&self, patch: &Patch) -> Vec<usize> {
        let mut out = Vec::new();
        for &t in &patch.coarse_triangles {
            for e in self.coarse.triangle_edges(t) {
                let [t0, t1] = self.coarse.edge_triangles(e);
                if t1 == NONE || t0 != t {
                    continue;
                }
                if patch.mask[t1] {
                    out.push(e);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// A set of coarse triangles grown from a seed by vertex-neighbourhood layers.
#[derive(Clone, Debug)]
pub struct Patch {
    pub seed: usize,
    pub layers: usize,
    /// Sorted coarse triangle ids.
    pub coarse_triangles: Vec<usize>,
    mask: Vec<bool>,
}

impl Patch {
    pub fn contains(&self, coarse_triangle: usize) -> bool {
        self.mask[coarse_triangle]
    }
    pub fn len(&self) -> usize {
        self.coarse_triangles.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coarse_triangles.is_empty()
    }
    /// True when the patch covers the whole coarse mesh.
    pub fn is_saturated(&self) -> bool {
        self.coarse_triangles.len() == self.mask.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_in_triangle(p: [f64; 2], tri: [[f64; 2]; 3]) -> bool {
        let cross = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
            (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        };
        let d0 = cross(tri[0], tri[1], p);
        let d1 = cross(tri[1], tri[2], p);
        let d2 = cross(tri[2], tri[0], p);
        d0 > 0.0 && d1 > 0.0 && d2 > 0.0
    }

    #[test]
    fn structured_triangle_counts() {
        assert_eq!(build_structured_mesh(&Domain::UnitSquare, 1).unwrap().num_triangles(), 8);
        assert_eq!(build_structured_mesh(&Domain::LShape, 0).unwrap().num_triangles(), 6);
        let spe = Domain::Rect {
            nx: 60,
            ny: 220,
            width: 1.2,
            height: 2.2,
        };
        assert_eq!(build_structured_mesh(&spe, 0).unwrap().num_triangles(), 26400);
    }

    #[test]
    fn unsupported_domain_tag_is_a_configuration_error() {
        assert!(matches!("disc".parse::<Domain>(), Err(Error::Config(_))));
        assert!(matches!("rect(0,2,1,1)".parse::<Domain>(), Err(Error::Config(_))));
        assert_eq!(
            "rect(60,220,1.2,2.2)".parse::<Domain>().unwrap(),
            Domain::Rect {
                nx: 60,
                ny: 220,
                width: 1.2,
                height: 2.2
            }
        );
    }

    #[test]
    fn incidence_and_area_invariants() {
        for (domain, level) in [(Domain::UnitSquare, 3), (Domain::LShape, 2)] {
            let m = build_structured_mesh(&domain, level).unwrap();
            let area = domain.area().unwrap();
            assert!((m.total_area() - area).abs() <= 1e-12 * area);
            for e in 0..m.num_edges() {
                let [t0, t1] = m.edge_triangles(e);
                assert_ne!(t0, NONE);
                if t1 != NONE {
                    // opposite orientations seen from the two sides
                    let l0 = m.triangle_edges(t0).iter().position(|&x| x == e).unwrap();
                    let l1 = m.triangle_edges(t1).iter().position(|&x| x == e).unwrap();
                    assert_eq!(m.orientation(t0, l0), -m.orientation(t1, l1));
                }
                let [a, b] = m.edge(e);
                assert!(a < b);
                for &t in &[t0, t1] {
                    if t != NONE {
                        let tri = m.triangle(t);
                        assert!(tri.contains(&a) && tri.contains(&b));
                    }
                }
            }
        }
    }

    #[test]
    fn normal_is_ccw_rotation_of_low_to_high_tangent() {
        let m = build_structured_mesh(&Domain::UnitSquare, 0).unwrap();
        for e in 0..m.num_edges() {
            let [a, b] = m.edge(e);
            let (pa, pb) = (m.vertex(a), m.vertex(b));
            let t = [pb[0] - pa[0], pb[1] - pa[1]];
            let n = m.normal(e);
            assert!((t[0] * n[0] + t[1] * n[1]).abs() < 1e-15);
            assert!(t[0] * n[1] - t[1] * n[0] > 0.0);
        }
    }

    #[test]
    fn hierarchy_rejects_non_increasing_levels() {
        assert!(matches!(build_hierarchy(&Domain::UnitSquare, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn one_bisection_splits_each_coarse_edge_in_two() {
        let h = build_hierarchy(&Domain::UnitSquare, 0, 1).unwrap();
        for e in 0..h.coarse().num_edges() {
            let pieces = h.coarse_edge_pieces(e);
            assert_eq!(pieces.len(), 2);
            let total: f64 = pieces.iter().map(|p| h.fine().edge_length(p.fine_edge)).sum();
            assert!((total - h.coarse().edge_length(e)).abs() < 1e-12);
        }
    }

    #[test]
    fn parent_map_is_surjective() {
        let h = build_hierarchy(&Domain::UnitSquare, 2, 5).unwrap();
        assert_eq!(h.fine().num_triangles(), 2048);
        assert_eq!(h.coarse().num_triangles(), 32);
        for t in 0..32 {
            assert_eq!(h.children(t).len(), 64);
        }
    }

    #[test]
    fn fine_centroids_lie_in_parents() {
        let h = build_hierarchy(&Domain::LShape, 1, 3).unwrap();
        for t in 0..h.fine().num_triangles() {
            let c = h.fine().centroid(t);
            let tri = h.coarse().triangle_points(h.parent(t));
            assert!(point_in_triangle(c, tri), "fine triangle {t}");
        }
    }

    #[test]
    fn non_power_of_two_refinement() {
        let h = build_hierarchy_with_factor(&Domain::spe10_coarse(), 0, 10).unwrap();
        assert_eq!(h.fine().num_triangles(), 26400);
        assert_eq!(h.coarse().num_triangles(), 264);
        for e in 0..h.coarse().num_edges() {
            let total: f64 = h
                .coarse_edge_pieces(e)
                .iter()
                .map(|p| h.fine().edge_length(p.fine_edge))
                .sum();
            let len = h.coarse().edge_length(e);
            assert!((total - len).abs() <= 1e-12 * len);
        }
        for t in (0..h.fine().num_triangles()).step_by(97) {
            let c = h.fine().centroid(t);
            assert!(point_in_triangle(c, h.coarse().triangle_points(h.parent(t))));
        }
    }

    /// Brute force: a triangle is in `U_1(T)` iff it shares a vertex with `T`.
    #[test]
    fn first_layer_patch_matches_brute_force() {
        let h = build_hierarchy(&Domain::UnitSquare, 3, 4).unwrap();
        let c = h.coarse();
        // an interior triangle: lower half of cell (3, 3)
        let seed = (0..c.num_triangles())
            .find(|&t| c.structured().unwrap().triangle_cell[t] == (3, 3, false))
            .unwrap();
        let brute: Vec<usize> = (0..c.num_triangles())
            .filter(|&t| c.triangle(t).iter().any(|v| c.triangle(seed).contains(v)))
            .collect();
        assert_eq!(brute.len(), 13);
        assert_eq!(h.patch(seed, 1).coarse_triangles, brute);
    }

    #[test]
    fn patch_layers() {
        let h = build_hierarchy(&Domain::UnitSquare, 2, 3).unwrap();
        let n = h.coarse().num_triangles();
        for t in 0..n {
            assert_eq!(h.patch(t, 0).coarse_triangles, vec![t]);
            assert!(h.patch(t, 2 * 4).is_saturated());
            for k in 0..4 {
                let a = h.patch(t, k);
                let b = h.patch(t, k + 1);
                assert!(a.coarse_triangles.iter().all(|&x| b.contains(x)));
            }
            let p1 = h.patch(t, 1);
            for s in 0..n {
                assert_eq!(p1.contains(s), h.patch(s, 1).contains(t));
            }
        }
        let sat = h.saturation_layers();
        assert!((0..n).all(|t| h.patch(t, sat).is_saturated()));
        assert!((0..n).any(|t| !h.patch(t, sat - 1).is_saturated()));
    }

    #[test]
    fn patch_interior_edges_exclude_patch_boundary() {
        let h = build_hierarchy(&Domain::UnitSquare, 2, 4).unwrap();
        let p = h.patch(0, 0);
        let edges = h.patch_interior_fine_edges(&p);
        // one coarse triangle refined 4x4: 16 fine triangles, 3*16/2 - 4*3/2 interior edges
        assert_eq!(h.children(0).len(), 16);
        assert_eq!(edges.len(), (3 * 16 - 12) / 2);
        assert!(h.patch_interior_coarse_edges(&p).is_empty());
        let full = h.patch(0, 100);
        let interior = (0..h.fine().num_edges()).filter(|&e| !h.fine().is_boundary_edge(e)).count();
        assert_eq!(h.patch_interior_fine_edges(&full).len(), interior);
    }

    #[test]
    fn level_for_mesh_size_round_trips() {
        assert_eq!(Domain::UnitSquare.level_for_mesh_size(0.125).unwrap(), 3);
        assert_eq!(Domain::LShape.level_for_mesh_size(0.125).unwrap(), 2);
        assert!(Domain::UnitSquare.level_for_mesh_size(0.3).is_err());
    }

    #[test]
    fn text_dump() {
        let m = build_structured_mesh(&Domain::UnitSquare, 0).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(s.lines().filter(|l| l.starts_with("t ")).count(), 2);
    }
}
