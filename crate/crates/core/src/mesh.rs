//! Two-dimensional spatial meshes, their facet connectivity, and uniform time grids.
//!
//! Cells are stored counterclockwise. Every facet carries a fixed global
//! orientation: its vertices are listed in the order in which the incident
//! cell with the lowest index traverses them, so the facet normal (the
//! tangent rotated clockwise) points out of that cell and into the other one.
//! Boundary normals therefore always point out of the domain.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("mesh topology error at {entity}: {msg}")]
    Topology { entity: String, msg: String },
    #[error("mesh i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid time grid: {0}")]
    TimeGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Simplex,
    Quad,
}

impl CellKind {
    pub fn vertices_per_cell(self) -> usize {
        match self {
            CellKind::Simplex => 3,
            CellKind::Quad => 4,
        }
    }

    /// Local facets as pairs of local vertex indices in counterclockwise order.
    /// Triangles: facet `i` is opposite vertex `i`.
    pub fn local_facets(self) -> &'static [[usize; 2]] {
        match self {
            CellKind::Simplex => &[[1, 2], [2, 0], [0, 1]],
            CellKind::Quad => &[[0, 1], [1, 2], [2, 3], [3, 0]],
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            CellKind::Simplex => "tri",
            CellKind::Quad => "quad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagonalPattern {
    /// Every square is split along the (i,j)–(i+1,j+1) diagonal.
    Uniform,
    /// Split direction alternates in a checkerboard pattern.
    Alternating,
}

/// One side of a facet as seen from an incident cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FacetIncidence {
    pub cell: usize,
    pub local: usize,
    /// +1 when the global facet normal is outward for `cell`, -1 otherwise.
    pub sign: i8,
}

#[derive(Debug, Clone)]
pub struct SpatialMesh {
    vertices: Vec<[f64; 2]>,
    cells: Vec<usize>,
    kind: CellKind,
    facets: Vec<[usize; 2]>,
    facet_cells: Vec<(FacetIncidence, Option<FacetIncidence>)>,
    cell_facets: Vec<usize>,
    areas: Vec<f64>,
}

impl SpatialMesh {
    /// Builds connectivity and checks every invariant.
    pub fn new(vertices: Vec<[f64; 2]>, cells: Vec<Vec<usize>>, kind: CellKind) -> Result<Self, MeshError> {
        let nv = kind.vertices_per_cell();
        let mut flat = Vec::with_capacity(cells.len() * nv);
        let mut areas = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let topo = |msg: String| MeshError::Topology { entity: format!("cell {c}"), msg };
            if cell.len() != nv {
                return Err(topo(format!("expected {nv} vertices, found {}", cell.len())));
            }
            if let Some(&bad) = cell.iter().find(|&&v| v >= vertices.len()) {
                return Err(topo(format!("vertex index {bad} out of range")));
            }
            let p: Vec<[f64; 2]> = cell.iter().map(|&v| vertices[v]).collect();
            let area = polygon_area(&p);
            if !(area > 0.0) {
                return Err(topo(format!("non-positive signed area {area:e} (cells must be counterclockwise)")));
            }
            if kind == CellKind::Quad {
                let gap = [p[0][0] + p[2][0] - p[1][0] - p[3][0], p[0][1] + p[2][1] - p[1][1] - p[3][1]];
                let diam = diameter(&p);
                if gap[0].hypot(gap[1]) > 1e-10 * diam {
                    return Err(topo("quadrilateral is not a parallelogram".into()));
                }
            }
            flat.extend_from_slice(cell);
            areas.push(area);
        }

        let ncells = cells.len();
        let local = kind.local_facets();
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        let mut facets: Vec<[usize; 2]> = Vec::new();
        let mut facet_cells: Vec<(FacetIncidence, Option<FacetIncidence>)> = Vec::new();
        let mut cell_facets = vec![0usize; ncells * local.len()];
        for c in 0..ncells {
            let cv = &flat[c * nv..(c + 1) * nv];
            for (l, lf) in local.iter().enumerate() {
                let (a, b) = (cv[lf[0]], cv[lf[1]]);
                let key = (a.min(b), a.max(b));
                match lookup.get(&key) {
                    None => {
                        let f = facets.len();
                        lookup.insert(key, f);
                        facets.push([a, b]);
                        facet_cells.push((FacetIncidence { cell: c, local: l, sign: 1 }, None));
                        cell_facets[c * local.len() + l] = f;
                    }
                    Some(&f) => {
                        let entry = &mut facet_cells[f];
                        if entry.1.is_some() {
                            return Err(MeshError::Topology {
                                entity: format!("facet {a}-{b}"),
                                msg: "shared by more than two cells".into(),
                            });
                        }
                        if facets[f] != [b, a] {
                            return Err(MeshError::Topology {
                                entity: format!("cell {c}"),
                                msg: format!("facet {a}-{b} traversed in the same direction by two cells"),
                            });
                        }
                        entry.1 = Some(FacetIncidence { cell: c, local: l, sign: -1 });
                        cell_facets[c * local.len() + l] = f;
                    }
                }
            }
        }
        Ok(Self { vertices, cells: flat, kind, facets, facet_cells, cell_facets, areas })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }
    pub fn n_cells(&self) -> usize {
        self.areas.len()
    }
    pub fn n_facets(&self) -> usize {
        self.facets.len()
    }
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }
    pub fn vertex(&self, v: usize) -> [f64; 2] {
        self.vertices[v]
    }
    pub fn cell(&self, c: usize) -> &[usize] {
        let nv = self.kind.vertices_per_cell();
        &self.cells[c * nv..(c + 1) * nv]
    }
    pub fn cell_points(&self, c: usize) -> Vec<[f64; 2]> {
        self.cell(c).iter().map(|&v| self.vertices[v]).collect()
    }
    pub fn area(&self, c: usize) -> f64 {
        self.areas[c]
    }
    pub fn areas(&self) -> &[f64] {
        &self.areas
    }
    pub fn facet(&self, f: usize) -> [usize; 2] {
        self.facets[f]
    }
    pub fn facet_cells(&self, f: usize) -> (FacetIncidence, Option<FacetIncidence>) {
        self.facet_cells[f]
    }
    pub fn is_boundary_facet(&self, f: usize) -> bool {
        self.facet_cells[f].1.is_none()
    }
    pub fn boundary_facets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_facets()).filter(|&f| self.is_boundary_facet(f))
    }
    pub fn n_boundary_facets(&self) -> usize {
        self.boundary_facets().count()
    }

    /// Global facet index of local facet `l` of cell `c`.
    pub fn cell_facet(&self, c: usize, l: usize) -> usize {
        self.cell_facets[c * self.kind.local_facets().len() + l]
    }

    /// +1 if the global normal of local facet `l` points out of cell `c`.
    pub fn cell_facet_sign(&self, c: usize, l: usize) -> i8 {
        let f = self.cell_facet(c, l);
        let (first, second) = self.facet_cells[f];
        if first.cell == c && first.local == l {
            first.sign
        } else {
            second.expect("incident cell").sign
        }
    }

    /// Facet length and unit normal in its global orientation.
    pub fn facet_geometry(&self, f: usize) -> (f64, [f64; 2]) {
        let [a, b] = self.facets[f];
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        let t = [pb[0] - pa[0], pb[1] - pa[1]];
        let len = t[0].hypot(t[1]);
        (len, [t[1] / len, -t[0] / len])
    }

    /// Affine map of the reference cell onto cell `c`: `x = origin + J x̂`.
    /// Columns of `J` are the edges leaving vertex 0 (to vertex 1 and to the
    /// last vertex for quads, to vertex 2 for triangles).
    pub fn affine_map(&self, c: usize) -> AffineMap {
        let p = self.cell_points(c);
        let q = match self.kind {
            CellKind::Simplex => p[2],
            CellKind::Quad => p[3],
        };
        AffineMap { origin: p[0], jac: [[p[1][0] - p[0][0], q[0] - p[0][0]], [p[1][1] - p[0][1], q[1] - p[0][1]]] }
    }

    pub fn cell_diameter(&self, c: usize) -> f64 {
        diameter(&self.cell_points(c))
    }

    pub fn centroid(&self, c: usize) -> [f64; 2] {
        let p = self.cell_points(c);
        let n = p.len() as f64;
        [p.iter().map(|v| v[0]).sum::<f64>() / n, p.iter().map(|v| v[1]).sum::<f64>() / n]
    }

    /// Maximum cell diameter.
    pub fn h(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_diameter(c)).fold(0.0, f64::max)
    }

    /// Index of a cell containing `x`, if any.
    pub fn locate(&self, x: [f64; 2]) -> Option<usize> {
        (0..self.n_cells()).find(|&c| {
            let map = self.affine_map(c);
            let xh = map.inverse(x);
            let tol = 1e-12;
            match self.kind {
                CellKind::Simplex => xh[0] >= -tol && xh[1] >= -tol && xh[0] + xh[1] <= 1.0 + tol,
                CellKind::Quad => (-tol..=1.0 + tol).contains(&xh[0]) && (-tol..=1.0 + tol).contains(&xh[1]),
            }
        })
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Area enclosed by the outward-oriented boundary facets.
    pub fn boundary_enclosed_area(&self) -> f64 {
        self.boundary_facets()
            .map(|f| {
                let [a, b] = self.facets[f];
                let (pa, pb) = (self.vertices[a], self.vertices[b]);
                0.5 * (pa[0] * pb[1] - pb[0] * pa[1])
            })
            .sum()
    }

    /// Serializes to the plain-text mesh format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dim 2");
        let _ = writeln!(s, "vertices {}", self.n_vertices());
        for v in &self.vertices {
            let _ = writeln!(s, "{:.17e} {:.17e}", v[0], v[1]);
        }
        let _ = writeln!(s, "cells {} {}", self.n_cells(), self.kind.keyword());
        for c in 0..self.n_cells() {
            let idx: Vec<String> = self.cell(c).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", idx.join(" "));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Affine reference-to-physical map.
#[derive(Debug, Clone, Copy)]
pub struct AffineMap {
    pub origin: [f64; 2],
    /// Row-major Jacobian.
    pub jac: [[f64; 2]; 2],
}

impl AffineMap {
    pub fn det(&self) -> f64 {
        self.jac[0][0] * self.jac[1][1] - self.jac[0][1] * self.jac[1][0]
    }

    pub fn apply(&self, xh: [f64; 2]) -> [f64; 2] {
        [
            self.origin[0] + self.jac[0][0] * xh[0] + self.jac[0][1] * xh[1],
            self.origin[1] + self.jac[1][0] * xh[0] + self.jac[1][1] * xh[1],
        ]
    }

    /// `J v`
    pub fn push_vector(&self, v: [f64; 2]) -> [f64; 2] {
        [self.jac[0][0] * v[0] + self.jac[0][1] * v[1], self.jac[1][0] * v[0] + self.jac[1][1] * v[1]]
    }

    pub fn inverse(&self, x: [f64; 2]) -> [f64; 2] {
        let d = self.det();
        let r = [x[0] - self.origin[0], x[1] - self.origin[1]];
        [(self.jac[1][1] * r[0] - self.jac[0][1] * r[1]) / d, (-self.jac[1][0] * r[0] + self.jac[0][0] * r[1]) / d]
    }
}

/// Shoelace signed area of a polygon.
pub fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn diameter(p: &[[f64; 2]]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            d = d.max((p[i][0] - p[j][0]).hypot(p[i][1] - p[j][1]));
        }
    }
    d
}

fn grid_vertices(nx: usize, ny: usize) -> Vec<[f64; 2]> {
    let mut v = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            v.push([i as f64 / nx as f64, j as f64 / ny as f64]);
        }
    }
    v
}

/// Unit square split into `nx × ny` squares, each cut into two triangles.
pub fn build_structured_triangular(nx: usize, ny: usize, pattern: DiagonalPattern) -> SpatialMesh {
    assert!(nx >= 1 && ny >= 1, "structured meshes need at least one cell per axis");
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            let flip = pattern == DiagonalPattern::Alternating && (i + j) % 2 == 1;
            if flip {
                cells.push(vec![a, b, d]);
                cells.push(vec![b, c, d]);
            } else {
                cells.push(vec![a, b, c]);
                cells.push(vec![a, c, d]);
            }
        }
    }
    SpatialMesh::new(grid_vertices(nx, ny), cells, CellKind::Simplex).expect("structured mesh is valid")
}

/// Unit square split into `nx × ny` axis-aligned rectangles.
pub fn build_structured_quadrilateral(nx: usize, ny: usize) -> SpatialMesh {
    assert!(nx >= 1 && ny >= 1, "structured meshes need at least one cell per axis");
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cells.push(vec![id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    SpatialMesh::new(grid_vertices(nx, ny), cells, CellKind::Quad).expect("structured mesh is valid")
}

/// Parses the plain-text mesh format.
pub fn parse_mesh(text: &str) -> Result<SpatialMesh, MeshError> {
    let mut lines =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| MeshError::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") })
    };
    let perr = |line: usize, msg: String| MeshError::Parse { line, msg };

    let (ln, l) = next("`dim 2`")?;
    if l.split_whitespace().collect::<Vec<_>>() != ["dim", "2"] {
        return Err(perr(ln, format!("expected `dim 2`, found `{l}`")));
    }
    let (ln, l) = next("`vertices n`")?;
    let nverts = match l.split_whitespace().collect::<Vec<_>>()[..] {
        ["vertices", n] => n.parse::<usize>().map_err(|e| perr(ln, format!("bad vertex count: {e}")))?,
        _ => return Err(perr(ln, format!("expected `vertices n`, found `{l}`"))),
    };
    let mut vertices = Vec::with_capacity(nverts);
    for _ in 0..nverts {
        let (ln, l) = next("vertex coordinates")?;
        let xs: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| perr(ln, format!("bad coordinate: {e}")))?;
        if xs.len() != 2 || !xs.iter().all(|x| x.is_finite()) {
            return Err(perr(ln, "expected two finite coordinates".into()));
        }
        vertices.push([xs[0], xs[1]]);
    }
    let (ln, l) = next("`cells m kind`")?;
    let (ncells, kind) = match l.split_whitespace().collect::<Vec<_>>()[..] {
        ["cells", n, k] => {
            let n = n.parse::<usize>().map_err(|e| perr(ln, format!("bad cell count: {e}")))?;
            let kind = match k {
                "tri" => CellKind::Simplex,
                "quad" => CellKind::Quad,
                _ => return Err(perr(ln, format!("unknown cell kind `{k}`"))),
            };
            (n, kind)
        }
        _ => return Err(perr(ln, format!("expected `cells m kind`, found `{l}`"))),
    };
    let mut cells = Vec::with_capacity(ncells);
    for _ in 0..ncells {
        let (ln, l) = next("cell vertex indices")?;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| perr(ln, format!("bad vertex index: {e}")))?;
        if idx.len() != kind.vertices_per_cell() {
            return Err(perr(ln, format!("expected {} indices", kind.vertices_per_cell())));
        }
        cells.push(idx);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(perr(ln, "trailing content after cell list".into()));
    }
    SpatialMesh::new(vertices, cells, kind)
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<SpatialMesh, MeshError> {
    parse_mesh(&fs::read_to_string(path)?)
}

/// `max_T h^d / |T|` with `h` the largest cell diameter in the mesh.
pub fn mesh_quality(mesh: &SpatialMesh) -> f64 {
    let h = mesh.h();
    mesh.areas().iter().map(|&a| h * h / a).fold(0.0, f64::max)
}

/// Nodes `0 = t_0 < … < t_n = 1` of the time decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    uniform: bool,
}

impl TimeGrid {
    /// `intervals` equal steps of length `1 / intervals`.
    pub fn uniform(intervals: usize) -> Self {
        assert!(intervals >= 1);
        let mut nodes: Vec<f64> = (0..=intervals).map(|i| i as f64 / intervals as f64).collect();
        nodes[intervals] = 1.0;
        Self { nodes, uniform: true }
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self, MeshError> {
        if nodes.len() < 2 {
            return Err(MeshError::TimeGrid("need at least two nodes".into()));
        }
        if nodes[0] != 0.0 || *nodes.last().unwrap() != 1.0 {
            return Err(MeshError::TimeGrid("endpoints must be exactly 0 and 1".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(MeshError::TimeGrid("nodes must be strictly increasing".into()));
        }
        let tau0 = nodes[1] - nodes[0];
        let uniform = nodes.windows(2).all(|w| ((w[1] - w[0]) - tau0).abs() <= 1e-14);
        Ok(Self { nodes, uniform })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
    pub fn n_intervals(&self) -> usize {
        self.nodes.len() - 1
    }
    /// Length of interval `i` (between nodes `i` and `i + 1`).
    pub fn step(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }
    pub fn is_uniform(&self) -> bool {
        self.uniform
    }
    /// Node index closest to time `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        (0..self.nodes.len()).min_by(|&a, &b| (self.nodes[a] - t).abs().total_cmp(&(self.nodes[b] - t).abs())).unwrap()
    }
}
