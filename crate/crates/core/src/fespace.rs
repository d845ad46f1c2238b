//! Discrete spaces: piecewise constant densities, H(div) momenta (RT0, BDM1,
//! tensor RT0 on parallelograms), the dual spaces of degree 0 or 1, and the
//! space-time layout of all coefficient vectors.

use faer::linalg::solvers::DenseSolveCore;
use thiserror::Error;

use crate::mesh::{AffineMap, CellKind, SpatialMesh, TimeGrid};
use crate::quadrature::{self, QuadPoint};

pub use crate::density::{project_density, DensitySource, RasterImage};

#[derive(Debug, Error)]
pub enum FeError {
    #[error("space {family:?} is not defined on {kind:?} meshes")]
    IncompatibleMesh { family: VelocityFamily, kind: CellKind },
    #[error("degenerate cell {0}")]
    DegenerateCell(usize),
    #[error("density: {0}")]
    Density(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VelocityFamily {
    /// Lowest-order Raviart–Thomas on triangles.
    Rt0,
    /// Brezzi–Douglas–Marini of degree 1 on triangles.
    Bdm1,
    /// Tensor-product lowest-order Raviart–Thomas on parallelograms.
    Rtq0,
}

impl VelocityFamily {
    pub fn dofs_per_facet(self) -> usize {
        match self {
            VelocityFamily::Bdm1 => 2,
            _ => 1,
        }
    }

    pub fn cell_kind(self) -> CellKind {
        match self {
            VelocityFamily::Rtq0 => CellKind::Quad,
            _ => CellKind::Simplex,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VelocityFamily::Rt0 => "rt0",
            VelocityFamily::Bdm1 => "bdm1",
            VelocityFamily::Rtq0 => "rtq0",
        }
    }
}

/// Polynomial degree `r` of the dual variable inside each cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DualOrder {
    /// Cellwise constants.
    P0,
    /// Discontinuous P1 (triangles) or Q1 (parallelograms), stored at cell vertices.
    P1,
}

impl DualOrder {
    pub fn degree(self) -> usize {
        match self {
            DualOrder::P0 => 0,
            DualOrder::P1 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpaceConfig {
    pub family: VelocityFamily,
    pub dual_order: DualOrder,
}

impl SpaceConfig {
    pub fn new(family: VelocityFamily, dual_order: DualOrder) -> Self {
        Self { family, dual_order }
    }

    pub fn check_mesh(&self, kind: CellKind) -> Result<(), FeError> {
        if self.family.cell_kind() == kind {
            Ok(())
        } else {
            Err(FeError::IncompatibleMesh { family: self.family, kind })
        }
    }
}

/// Sizes and index maps of every coefficient vector.
///
/// Primal vectors hold all densities first (node-major), then all momenta
/// (interval-major). Multipliers are interval-major over cells, dual
/// coefficients interval-major over cells and then over the cell's local
/// nodes (one for degree 0, one per vertex for degree 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofMap {
    pub n_cells: usize,
    pub n_facets: usize,
    pub dofs_per_facet: usize,
    pub n_nodes: usize,
    pub n_intervals: usize,
    pub vertices_per_cell: usize,
    pub dual_local: usize,
}

impl DofMap {
    pub fn n_v(&self) -> usize {
        self.n_facets * self.dofs_per_facet
    }
    pub fn n_rho(&self) -> usize {
        self.n_nodes * self.n_cells
    }
    pub fn n_m(&self) -> usize {
        self.n_intervals * self.n_v()
    }
    pub fn n_sigma(&self) -> usize {
        self.n_rho() + self.n_m()
    }
    pub fn n_phi(&self) -> usize {
        self.n_intervals * self.n_cells
    }
    pub fn n_dual(&self) -> usize {
        self.n_intervals * self.n_cells * self.dual_local
    }
    pub fn vdof(&self, facet: usize, moment: usize) -> usize {
        facet * self.dofs_per_facet + moment
    }
    pub fn rho(&self, node: usize, cell: usize) -> usize {
        node * self.n_cells + cell
    }
    pub fn m(&self, interval: usize, vdof: usize) -> usize {
        self.n_rho() + interval * self.n_v() + vdof
    }
    pub fn phi(&self, interval: usize, cell: usize) -> usize {
        interval * self.n_cells + cell
    }
    pub fn dual(&self, interval: usize, cell: usize, local: usize) -> usize {
        (interval * self.n_cells + cell) * self.dual_local + local
    }
}

/// Precomputed data of one cell. All velocity quantities use the global
/// orientation of each dof (local basis times its sign factor).
#[derive(Debug, Clone)]
pub struct CellData {
    pub map: AffineMap,
    pub area: f64,
    /// Global V dofs in local order (facet-major, moment-minor).
    pub dofs: Vec<usize>,
    /// Local-to-global factors (±1).
    pub factors: Vec<f64>,
    /// Velocity mass matrix, row-major `nl × nl`.
    pub mass: Vec<f64>,
    /// `∫_T div φ_l`.
    pub div_integral: Vec<f64>,
    /// `∫_T φ_l`.
    pub integral: Vec<[f64; 2]>,
    /// `φ_l` at the cell vertices, indexed `k * nl + l`.
    pub vertex_values: Vec<[f64; 2]>,
    /// `∫_T N_k φ_l` for the vertex shape functions `N_k`, indexed `k * nl + l`.
    pub vertex_coupling: Vec<[f64; 2]>,
    /// Mass matrix of the vertex shape functions, row-major.
    pub nodal_mass: Vec<f64>,
}

impl CellData {
    pub fn n_local(&self) -> usize {
        self.dofs.len()
    }
}

/// Mesh, time grid and spaces of one discretization.
#[derive(Debug, Clone)]
pub struct Spaces {
    pub config: SpaceConfig,
    pub mesh: SpatialMesh,
    pub time: TimeGrid,
    pub dofs: DofMap,
    pub cells: Vec<CellData>,
}

impl Spaces {
    pub fn new(mesh: SpatialMesh, time: TimeGrid, config: SpaceConfig) -> Result<Self, FeError> {
        config.check_mesh(mesh.kind())?;
        let vpc = mesh.kind().vertices_per_cell();
        let dofs = DofMap {
            n_cells: mesh.n_cells(),
            n_facets: mesh.n_facets(),
            dofs_per_facet: config.family.dofs_per_facet(),
            n_nodes: time.n_nodes(),
            n_intervals: time.n_intervals(),
            vertices_per_cell: vpc,
            dual_local: match config.dual_order {
                DualOrder::P0 => 1,
                DualOrder::P1 => vpc,
            },
        };
        let reference = ReferenceElement::new(config.family);
        let cells = (0..mesh.n_cells()).map(|c| reference.cell_data(&mesh, &dofs, c)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { config, mesh, time, dofs, cells })
    }

    pub fn is_boundary_vdof(&self, vdof: usize) -> bool {
        self.mesh.is_boundary_facet(vdof / self.dofs.dofs_per_facet)
    }
}

/// Reference basis of one velocity family with its quadrature rule.
#[derive(Debug, Clone)]
struct ReferenceElement {
    family: VelocityFamily,
    /// BDM1 coefficients on the monomials `(1,0),(x,0),(y,0),(0,1),(0,x),(0,y)`,
    /// column `l` for local dof `l`.
    bdm: Option<[[f64; 6]; 6]>,
    rule: Vec<QuadPoint>,
}

impl ReferenceElement {
    fn new(family: VelocityFamily) -> Self {
        let rule = match family {
            VelocityFamily::Rtq0 => quadrature::square_gauss3(),
            _ => quadrature::triangle_degree4(),
        };
        let bdm = (family == VelocityFamily::Bdm1).then(bdm1_coefficients);
        Self { family, bdm, rule }
    }

    fn n_local(&self) -> usize {
        match self.family {
            VelocityFamily::Rt0 => 3,
            VelocityFamily::Bdm1 => 6,
            VelocityFamily::Rtq0 => 4,
        }
    }

    /// Reference values and divergences in local (outward) orientation.
    fn eval(&self, xh: [f64; 2]) -> Vec<([f64; 2], f64)> {
        let [x, y] = xh;
        match self.family {
            // φ̂_i = x̂ - v̂_i with v̂ = (0,0), (1,0), (0,1)
            VelocityFamily::Rt0 => vec![([x, y], 2.0), ([x - 1.0, y], 2.0), ([x, y - 1.0], 2.0)],
            VelocityFamily::Rtq0 => {
                vec![([0.0, y - 1.0], 1.0), ([x, 0.0], 1.0), ([0.0, y], 1.0), ([x - 1.0, 0.0], 1.0)]
            }
            VelocityFamily::Bdm1 => {
                let c = self.bdm.as_ref().unwrap();
                (0..6)
                    .map(|l| {
                        let v = [c[0][l] + c[1][l] * x + c[2][l] * y, c[3][l] + c[4][l] * x + c[5][l] * y];
                        (v, c[1][l] + c[5][l])
                    })
                    .collect()
            }
        }
    }

    fn vertices(&self) -> &'static [[f64; 2]] {
        match self.family {
            VelocityFamily::Rtq0 => &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            _ => &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        }
    }

    /// P1 or Q1 nodal shape functions.
    fn nodal(&self, xh: [f64; 2]) -> Vec<f64> {
        let [x, y] = xh;
        match self.family {
            VelocityFamily::Rtq0 => vec![(1.0 - x) * (1.0 - y), x * (1.0 - y), x * y, (1.0 - x) * y],
            _ => vec![1.0 - x - y, x, y],
        }
    }

    fn cell_data(&self, mesh: &SpatialMesh, dofs: &DofMap, c: usize) -> Result<CellData, FeError> {
        let map = mesh.affine_map(c);
        let det = map.det();
        if !(det > 0.0) {
            return Err(FeError::DegenerateCell(c));
        }
        let nl = self.n_local();
        let k = dofs.dofs_per_facet;
        let nf = mesh.kind().local_facets().len();
        let mut global = Vec::with_capacity(nl);
        let mut factors = Vec::with_capacity(nl);
        for lf in 0..nf {
            let f = mesh.cell_facet(c, lf);
            let sign = f64::from(mesh.cell_facet_sign(c, lf));
            let start = mesh.cell(c)[mesh.kind().local_facets()[lf][0]];
            let dir = if mesh.facet(f)[0] == start { 1.0 } else { -1.0 };
            for moment in 0..k {
                global.push(dofs.vdof(f, moment));
                factors.push(sign * if moment == 1 { dir } else { 1.0 });
            }
        }

        // Physical basis at a reference point, global orientation.
        let phys = |xh: [f64; 2]| -> Vec<([f64; 2], f64)> {
            self.eval(xh)
                .into_iter()
                .zip(&factors)
                .map(|((v, d), &s)| {
                    let pv = map.push_vector(v);
                    ([s * pv[0] / det, s * pv[1] / det], s * d / det)
                })
                .collect()
        };

        let nv = self.vertices().len();
        let mut mass = vec![0.0; nl * nl];
        let mut div_integral = vec![0.0; nl];
        let mut integral = vec![[0.0; 2]; nl];
        let mut vertex_coupling = vec![[0.0; 2]; nv * nl];
        let mut nodal_mass = vec![0.0; nv * nv];
        for qp in &self.rule {
            let w = qp.w * det;
            let vals = phys(qp.x);
            let shape = self.nodal(qp.x);
            for i in 0..nl {
                let (vi, di) = vals[i];
                div_integral[i] += w * di;
                integral[i][0] += w * vi[0];
                integral[i][1] += w * vi[1];
                for j in 0..nl {
                    let vj = vals[j].0;
                    mass[i * nl + j] += w * (vi[0] * vj[0] + vi[1] * vj[1]);
                }
                for (kk, &n) in shape.iter().enumerate() {
                    vertex_coupling[kk * nl + i][0] += w * n * vi[0];
                    vertex_coupling[kk * nl + i][1] += w * n * vi[1];
                }
            }
            for a in 0..nv {
                for b in 0..nv {
                    nodal_mass[a * nv + b] += w * shape[a] * shape[b];
                }
            }
        }
        let vertex_values = self.vertices().iter().flat_map(|&v| phys(v).into_iter().map(|(val, _)| val)).collect();
        Ok(CellData {
            map,
            area: mesh.area(c),
            dofs: global,
            factors,
            mass,
            div_integral,
            integral,
            vertex_values,
            vertex_coupling,
            nodal_mass,
        })
    }
}

/// Legendre moment `k` (0 or 1) along a parameter `s ∈ [0,1]`.
fn legendre(k: usize, s: f64) -> f64 {
    if k == 0 {
        1.0
    } else {
        2.0 * s - 1.0
    }
}

fn bdm1_coefficients() -> [[f64; 6]; 6] {
    let verts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let edges = CellKind::Simplex.local_facets();
    let monomial = |m: usize, x: [f64; 2]| -> [f64; 2] {
        match m {
            0 => [1.0, 0.0],
            1 => [x[0], 0.0],
            2 => [x[1], 0.0],
            3 => [0.0, 1.0],
            4 => [0.0, x[0]],
            _ => [0.0, x[1]],
        }
    };
    let gauss = quadrature::gauss_unit(3);
    let dof_matrix = faer::Mat::<f64>::from_fn(6, 6, |row, m| {
        let (e, k) = (row / 2, row % 2);
        let (a, b) = (verts[edges[e][0]], verts[edges[e][1]]);
        let t = [b[0] - a[0], b[1] - a[1]];
        // Outward normal times arc length element.
        let n = [t[1], -t[0]];
        gauss
            .iter()
            .map(|&(s, w)| {
                let x = [a[0] + s * t[0], a[1] + s * t[1]];
                let p = monomial(m, x);
                w * (p[0] * n[0] + p[1] * n[1]) * legendre(k, s)
            })
            .sum()
    });
    let inv = dof_matrix.partial_piv_lu().inverse();
    let mut out = [[0.0; 6]; 6];
    for (m, row) in out.iter_mut().enumerate() {
        for (l, v) in row.iter_mut().enumerate() {
            *v = inv[(m, l)];
        }
    }
    out
}

/// Physical values and divergences of the local velocity basis of `cell`
/// at the reference point `xh`, in local (outward) orientation.
pub fn eval_velocity_basis(spaces: &Spaces, cell: usize, xh: [f64; 2]) -> Vec<([f64; 2], f64)> {
    let reference = ReferenceElement::new(spaces.config.family);
    let data = &spaces.cells[cell];
    let det = data.map.det();
    reference
        .eval(xh)
        .into_iter()
        .map(|(v, d)| {
            let pv = data.map.push_vector(v);
            ([pv[0] / det, pv[1] / det], d / det)
        })
        .collect()
}

/// Local mass matrix of the density space or of the velocity space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalSpace {
    Density,
    Velocity,
}

/// Row-major local mass matrix of `cell`, in local (outward) orientation.
pub fn local_mass_matrix(spaces: &Spaces, space: LocalSpace, cell: usize) -> Vec<f64> {
    let data = &spaces.cells[cell];
    match space {
        LocalSpace::Density => vec![data.area],
        LocalSpace::Velocity => {
            let nl = data.n_local();
            let mut m = data.mass.clone();
            for i in 0..nl {
                for j in 0..nl {
                    m[i * nl + j] *= data.factors[i] * data.factors[j];
                }
            }
            m
        }
    }
}

/// Evaluates a global momentum field `m` (one slab) at the reference point `xh` of `cell`.
pub fn eval_momentum(spaces: &Spaces, m: &[f64], cell: usize, xh: [f64; 2]) -> [f64; 2] {
    let data = &spaces.cells[cell];
    let mut out = [0.0; 2];
    for (l, (v, _)) in eval_velocity_basis(spaces, cell, xh).into_iter().enumerate() {
        let coeff = data.factors[l] * m[data.dofs[l]];
        out[0] += coeff * v[0];
        out[1] += coeff * v[1];
    }
    out
}
