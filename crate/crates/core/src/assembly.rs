//! Global space-time operators: mass, divergence, boundary elimination,
//! regularizers, and the constrained saddle-point matrix.

use thiserror::Error;

use crate::fespace::{DofMap, Spaces};
use crate::par::{self, Exec};
use crate::sparse::{CsrMatrix, Triplets};

/// Allowed mismatch between the masses of the two boundary densities.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("incompatible boundary data: masses {m0} and {m1} differ by {diff:e}")]
    Compatibility { m0: f64, m1: f64, diff: f64 },
    #[error("boundary density has {got} coefficients, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("regularization weight must be positive, got {0}")]
    Weight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    None,
    /// `α/2 ‖∂_t ρ‖²`
    L2 {
        alpha: f64,
    },
    /// `α/2 ‖∇ₓʰ ρ‖²`
    H1 {
        alpha: f64,
    },
}

impl Regularization {
    pub fn alpha(&self) -> f64 {
        match *self {
            Regularization::None => 0.0,
            Regularization::L2 { alpha } | Regularization::H1 { alpha } => alpha,
        }
    }
}

/// P1 mass matrix of the time grid as (diagonal, superdiagonal).
pub fn time_mass(spaces: &Spaces) -> (Vec<f64>, Vec<f64>) {
    let t = &spaces.time;
    let mut diag = vec![0.0; t.n_nodes()];
    let mut off = vec![0.0; t.n_intervals()];
    for i in 0..t.n_intervals() {
        let tau = t.step(i);
        diag[i] += tau / 3.0;
        diag[i + 1] += tau / 3.0;
        off[i] = tau / 6.0;
    }
    (diag, off)
}

/// P1 stiffness matrix of the time grid as (diagonal, superdiagonal).
pub fn time_stiffness(spaces: &Spaces) -> (Vec<f64>, Vec<f64>) {
    let t = &spaces.time;
    let mut diag = vec![0.0; t.n_nodes()];
    let mut off = vec![0.0; t.n_intervals()];
    for i in 0..t.n_intervals() {
        let k = 1.0 / t.step(i);
        diag[i] += k;
        diag[i + 1] += k;
        off[i] = -k;
    }
    (diag, off)
}

/// Tridiagonal time matrix ⊗ diagonal cell weights, over density dofs.
fn time_kron_cells(spaces: &Spaces, (diag, off): (Vec<f64>, Vec<f64>), scale: f64, out: &mut Triplets) {
    let d = &spaces.dofs;
    for c in 0..d.n_cells {
        let a = spaces.cells[c].area * scale;
        for j in 0..d.n_nodes {
            out.push(d.rho(j, c), d.rho(j, c), diag[j] * a);
        }
        for j in 0..d.n_intervals {
            out.push(d.rho(j, c), d.rho(j + 1, c), off[j] * a);
            out.push(d.rho(j + 1, c), d.rho(j, c), off[j] * a);
        }
    }
}

/// Local velocity mass matrices scattered into `V × V` triplets, in cell order.
fn velocity_mass_triplets(spaces: &Spaces, exec: Exec) -> Vec<(usize, usize, f64)> {
    par::map_collect(exec, spaces.dofs.n_cells, |c| {
        let data = &spaces.cells[c];
        let nl = data.n_local();
        let mut local = Vec::with_capacity(nl * nl);
        for i in 0..nl {
            for j in 0..nl {
                local.push((data.dofs[i], data.dofs[j], data.mass[i * nl + j]));
            }
        }
        local
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Spatial velocity mass matrix over all V dofs.
pub fn assemble_velocity_mass(spaces: &Spaces, exec: Exec) -> CsrMatrix {
    let n = spaces.dofs.n_v();
    let mut t = Triplets::new(n, n);
    t.extend_from(velocity_mass_triplets(spaces, exec));
    t.into_csr()
}

/// L² mass matrix over primal dofs.
pub fn assemble_mass(spaces: &Spaces, exec: Exec) -> CsrMatrix {
    let d = &spaces.dofs;
    let mut t = Triplets::new(d.n_sigma(), d.n_sigma());
    time_kron_cells(spaces, time_mass(spaces), 1.0, &mut t);
    let vm = velocity_mass_triplets(spaces, exec);
    for i in 0..d.n_intervals {
        let tau = spaces.time.step(i);
        t.extend_from(vm.iter().map(|&(a, b, v)| (d.m(i, a), d.m(i, b), tau * v)));
    }
    t.into_csr()
}

/// Space-time divergence, multipliers × primal dofs. Row `(i, T)` is
/// `|T|(ρ_{i+1} - ρ_i) + τ_i ∫_T div m_i`.
pub fn assemble_divergence(spaces: &Spaces, exec: Exec) -> CsrMatrix {
    let d = &spaces.dofs;
    let mut t = Triplets::new(d.n_phi(), d.n_sigma());
    let rows = par::map_collect(exec, d.n_intervals * d.n_cells, |row| {
        let (i, c) = (row / d.n_cells, row % d.n_cells);
        let data = &spaces.cells[c];
        let tau = spaces.time.step(i);
        let mut local = vec![(row, d.rho(i + 1, c), data.area), (row, d.rho(i, c), -data.area)];
        for (l, &g) in data.dofs.iter().enumerate() {
            if data.div_integral[l] != 0.0 {
                local.push((row, d.m(i, g), tau * data.div_integral[l]));
            }
        }
        local
    });
    t.extend_from(rows.into_iter().flatten());
    t.into_csr()
}

/// `α τ₁ ⟨∂_t ρ, ∂_t v⟩` over density dofs.
pub fn assemble_l2_reg(alpha: f64, tau1: f64, spaces: &Spaces) -> CsrMatrix {
    let n = spaces.dofs.n_rho();
    let mut t = Triplets::new(n, n);
    time_kron_cells(spaces, time_stiffness(spaces), alpha * tau1, &mut t);
    t.into_csr()
}

/// Blocks of the gradient regularizer. The auxiliary field η is continuous
/// piecewise linear in time with values in the velocity space, indexed
/// `node * n_v + vdof`.
#[derive(Debug, Clone)]
pub struct H1Blocks {
    /// `α τ₁`
    pub weight: f64,
    /// `⟨ρ, divₓ w⟩`, η dofs × density dofs.
    pub g: CsrMatrix,
    /// `⟨η, w⟩`, η dofs × η dofs.
    pub mw: CsrMatrix,
}

pub fn assemble_h1_reg(alpha: f64, tau1: f64, spaces: &Spaces, exec: Exec) -> H1Blocks {
    let d = &spaces.dofs;
    let nv = d.n_v();
    let n_eta = d.n_nodes * nv;
    let (md, mo) = time_mass(spaces);
    let mt = |j: usize, k: usize| -> f64 {
        if j == k {
            md[j]
        } else {
            mo[j.min(k)]
        }
    };
    let neighbours = |j: usize| j.saturating_sub(1)..=(j + 1).min(d.n_nodes - 1);

    let mut g = Triplets::new(n_eta, d.n_rho());
    for c in 0..d.n_cells {
        let data = &spaces.cells[c];
        for (l, &gdof) in data.dofs.iter().enumerate() {
            let div = data.div_integral[l];
            if div == 0.0 {
                continue;
            }
            for j in 0..d.n_nodes {
                for k in neighbours(j) {
                    g.push(j * nv + gdof, d.rho(k, c), mt(j, k) * div);
                }
            }
        }
    }

    let vm = velocity_mass_triplets(spaces, exec);
    let mut w = Triplets::new(n_eta, n_eta);
    for j in 0..d.n_nodes {
        for k in neighbours(j) {
            let s = mt(j, k);
            w.extend_from(vm.iter().map(|&(a, b, v)| (j * nv + a, k * nv + b, s * v)));
        }
    }
    H1Blocks { weight: alpha * tau1, g: g.into_csr(), mw: w.into_csr() }
}

/// Essential boundary data: fixed primal values and which dofs they fix.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    /// Full primal vector holding the fixed values (zero elsewhere).
    pub values: Vec<f64>,
    pub fixed: Vec<bool>,
}

impl BoundaryData {
    pub fn n_fixed(&self) -> usize {
        self.fixed.iter().filter(|&&f| f).count()
    }
}

/// Fixes the end densities and zeroes every lateral boundary flux.
pub fn apply_flux_bc(spaces: &Spaces, rho0: &[f64], rho1: &[f64]) -> Result<BoundaryData, AssemblyError> {
    let d = &spaces.dofs;
    for r in [rho0, rho1] {
        if r.len() != d.n_cells {
            return Err(AssemblyError::Dimension { got: r.len(), expected: d.n_cells });
        }
    }
    let mass = |r: &[f64]| -> f64 { r.iter().zip(spaces.mesh.areas()).map(|(v, a)| v * a).sum() };
    let (m0, m1) = (mass(rho0), mass(rho1));
    let diff = (m0 - m1).abs();
    if !(diff <= MASS_TOLERANCE * m0.abs().max(1.0)) {
        return Err(AssemblyError::Compatibility { m0, m1, diff });
    }
    let mut values = vec![0.0; d.n_sigma()];
    let mut fixed = vec![false; d.n_sigma()];
    let last = d.n_nodes - 1;
    for c in 0..d.n_cells {
        values[d.rho(0, c)] = rho0[c];
        values[d.rho(last, c)] = rho1[c];
        fixed[d.rho(0, c)] = true;
        fixed[d.rho(last, c)] = true;
    }
    for g in (0..d.n_v()).filter(|&g| spaces.is_boundary_vdof(g)) {
        for i in 0..d.n_intervals {
            fixed[d.m(i, g)] = true;
        }
    }
    Ok(BoundaryData { values, fixed })
}

/// Factors of the space-time operator when it is a sum of Kronecker products
/// of time and space matrices, which holds unless the gradient regularizer
/// couples the auxiliary field.
#[derive(Debug, Clone)]
pub struct TimeStructure {
    pub dofs: DofMap,
    pub steps: Vec<f64>,
    pub areas: Vec<f64>,
    /// Density block in time, as (diagonal, superdiagonal) over all nodes;
    /// the full block is this matrix ⊗ diag(areas).
    pub time_rho: (Vec<f64>, Vec<f64>),
    /// `n_v × n_v` velocity mass.
    pub velocity_mass: CsrMatrix,
    /// `n_cells × n_v`, entries `∫_T div ψ_g`.
    pub divergence: CsrMatrix,
    /// V dofs without a lateral flux condition, increasing.
    pub free_vdofs: Vec<usize>,
}

impl TimeStructure {
    fn new(spaces: &Spaces, regularization: Regularization, tau1: f64, exec: Exec) -> Option<Self> {
        let (mut diag, mut off) = time_mass(spaces);
        match regularization {
            Regularization::H1 { .. } => return None,
            Regularization::L2 { alpha } => {
                let (kd, ko) = time_stiffness(spaces);
                diag.iter_mut().zip(&kd).for_each(|(a, b)| *a += alpha * tau1 * b);
                off.iter_mut().zip(&ko).for_each(|(a, b)| *a += alpha * tau1 * b);
            }
            Regularization::None => {}
        }
        let d = &spaces.dofs;
        let mut div = Triplets::new(d.n_cells, d.n_v());
        for (c, data) in spaces.cells.iter().enumerate() {
            for (l, &g) in data.dofs.iter().enumerate() {
                div.push(c, g, data.div_integral[l]);
            }
        }
        Some(Self {
            dofs: *d,
            steps: (0..d.n_intervals).map(|i| spaces.time.step(i)).collect(),
            areas: spaces.mesh.areas().to_vec(),
            time_rho: (diag, off),
            velocity_mass: assemble_velocity_mass(spaces, exec),
            divergence: div.into_csr(),
            free_vdofs: (0..d.n_v()).filter(|&g| !spaces.is_boundary_vdof(g)).collect(),
        })
    }
}

/// Sentinel for eliminated entries of an index map.
pub const ELIMINATED: usize = usize::MAX;

/// Constrained saddle-point system
///
/// ```text
/// [ M + R     -ατ₁Gᵀ   Bᵀ   0 ] [σ]   [Mξ]
/// [ -ατ₁G    -ατ₁M_W   0    0 ] [η] = [0 ]
/// [ B          0       0    w ] [φ]   [0 ]
/// [ 0          0       wᵀ   0 ] [λ]   [0 ]
/// ```
///
/// restricted to free primal and η dofs, with eliminated values moved to the
/// right-hand side. The η rows exist only for the gradient regularizer and the
/// last row only when augmented.
#[derive(Debug, Clone)]
pub struct SaddleOperator {
    pub matrix: CsrMatrix,
    pub n_sigma_free: usize,
    pub n_eta_free: usize,
    pub n_phi: usize,
    pub augmented: bool,
    /// Free index → primal index.
    pub sigma_free: Vec<usize>,
    /// Primal index → free index or [`ELIMINATED`].
    pub sigma_index: Vec<usize>,
    /// Free η index → η index.
    pub eta_free: Vec<usize>,
    /// Length of the full η vector (all nodes), zero without the gradient term.
    pub n_eta: usize,
    pub boundary: BoundaryData,
    /// Right-hand side contribution of the fixed values.
    pub bc_rhs: Vec<f64>,
    pub regularization: Regularization,
    /// Kronecker factors, when the operator has that form.
    pub structure: Option<TimeStructure>,
}

impl SaddleOperator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows
    }

    pub fn phi_offset(&self) -> usize {
        self.n_sigma_free + self.n_eta_free
    }

    /// Builds the operator. `mass` and `div` are the unconstrained primal mass
    /// and divergence matrices.
    pub fn new(
        spaces: &Spaces,
        mass: &CsrMatrix,
        div: &CsrMatrix,
        regularization: Regularization,
        tau1: f64,
        boundary: BoundaryData,
        augmented: bool,
        exec: Exec,
    ) -> Result<Self, AssemblyError> {
        let d = &spaces.dofs;
        let alpha = regularization.alpha();
        if regularization != Regularization::None && !(alpha > 0.0) {
            return Err(AssemblyError::Weight(alpha));
        }

        let mut sigma_index = vec![ELIMINATED; d.n_sigma()];
        let mut sigma_free = Vec::new();
        for (k, &fixed) in boundary.fixed.iter().enumerate() {
            if !fixed {
                sigma_index[k] = sigma_free.len();
                sigma_free.push(k);
            }
        }
        let ns = sigma_free.len();

        let h1 = match regularization {
            Regularization::H1 { alpha } => Some(assemble_h1_reg(alpha, tau1, spaces, exec)),
            _ => None,
        };
        let nv = d.n_v();
        let mut eta_index = Vec::new();
        let mut eta_free = Vec::new();
        if h1.is_some() {
            eta_index = vec![ELIMINATED; d.n_nodes * nv];
            for k in 0..d.n_nodes * nv {
                if !spaces.is_boundary_vdof(k % nv) {
                    eta_index[k] = eta_free.len();
                    eta_free.push(k);
                }
            }
        }
        let ne = eta_free.len();
        let np = d.n_phi();
        let dim = ns + ne + np + usize::from(augmented);
        let phi0 = ns + ne;

        let mut t = Triplets::new(dim, dim);
        let mut bc_rhs = vec![0.0; dim];
        let fixed = &boundary.values;

        let primal_block = |row: usize, col: usize, v: f64, t: &mut Triplets, rhs: &mut Vec<f64>| {
            let (fr, fc) = (sigma_index[row], sigma_index[col]);
            if fr != ELIMINATED {
                if fc != ELIMINATED {
                    t.push(fr, fc, v);
                } else {
                    rhs[fr] -= v * fixed[col];
                }
            }
        };
        for (r, c, v) in mass.triplets() {
            primal_block(r, c, v, &mut t, &mut bc_rhs);
        }
        if let Regularization::L2 { alpha } = regularization {
            for (r, c, v) in assemble_l2_reg(alpha, tau1, spaces).triplets() {
                primal_block(r, c, v, &mut t, &mut bc_rhs);
            }
        }
        if let Some(h) = &h1 {
            let s = h.weight;
            for (e, r, v) in h.g.triplets() {
                let fe = eta_index[e];
                if fe == ELIMINATED {
                    continue;
                }
                let fr = sigma_index[r];
                if fr != ELIMINATED {
                    t.push(ns + fe, fr, -s * v);
                    t.push(fr, ns + fe, -s * v);
                } else {
                    bc_rhs[ns + fe] += s * v * fixed[r];
                }
            }
            for (a, b, v) in h.mw.triplets() {
                let (fa, fb) = (eta_index[a], eta_index[b]);
                if fa != ELIMINATED && fb != ELIMINATED {
                    t.push(ns + fa, ns + fb, -s * v);
                }
            }
        }
        for (p, c, v) in div.triplets() {
            let fc = sigma_index[c];
            if fc != ELIMINATED {
                t.push(phi0 + p, fc, v);
                t.push(fc, phi0 + p, v);
            } else {
                bc_rhs[phi0 + p] -= v * fixed[c];
            }
        }
        if augmented {
            let lam = dim - 1;
            for i in 0..d.n_intervals {
                let tau = spaces.time.step(i);
                for c in 0..d.n_cells {
                    let w = tau * spaces.cells[c].area;
                    t.push(phi0 + d.phi(i, c), lam, w);
                    t.push(lam, phi0 + d.phi(i, c), w);
                }
            }
        }
        Ok(Self {
            matrix: t.into_csr(),
            n_sigma_free: ns,
            n_eta_free: ne,
            n_phi: np,
            augmented,
            sigma_free,
            sigma_index,
            eta_free,
            n_eta: eta_index.len(),
            boundary,
            bc_rhs,
            regularization,
            structure: TimeStructure::new(spaces, regularization, tau1, exec),
        })
    }

    /// System right-hand side for the primal load `load = M ξ` (full primal length).
    pub fn rhs(&self, load: &[f64]) -> Vec<f64> {
        let mut rhs = self.bc_rhs.clone();
        for (f, &k) in self.sigma_free.iter().enumerate() {
            rhs[f] += load[k];
        }
        rhs
    }

    /// Full primal vector from a system solution.
    pub fn primal(&self, x: &[f64]) -> Vec<f64> {
        let mut sigma = self.boundary.values.clone();
        for (f, &k) in self.sigma_free.iter().enumerate() {
            sigma[k] = x[f];
        }
        sigma
    }

    pub fn multiplier<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.phi_offset()..self.phi_offset() + self.n_phi]
    }

    pub fn eta<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.n_sigma_free..self.phi_offset()]
    }

    pub fn lambda(&self, x: &[f64]) -> Option<f64> {
        self.augmented.then(|| x[self.dim() - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::{DualOrder, SpaceConfig, VelocityFamily};
    use crate::mesh::{
        build_structured_quadrilateral, build_structured_triangular, DiagonalPattern, SpatialMesh, TimeGrid,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spaces(mesh: SpatialMesh, steps: usize, family: VelocityFamily) -> Spaces {
        Spaces::new(mesh, TimeGrid::uniform(steps), SpaceConfig::new(family, DualOrder::P0)).unwrap()
    }

    fn dense(a: &CsrMatrix) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; a.ncols]; a.nrows];
        for (i, j, v) in a.triplets() {
            out[i][j] = v;
        }
        out
    }

    #[test]
    fn single_cell_density_block_is_p1_mass() {
        let mesh = build_structured_quadrilateral(1, 1);
        let s = spaces(mesh, 1, VelocityFamily::Rtq0);
        let m = dense(&assemble_mass(&s, Exec::Sequential));
        assert_eq!((m[0][0], m[0][1], m[1][0], m[1][1]), (1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0));
        // Momentum block: one slab of length 1 times the velocity mass.
        let vm = dense(&assemble_velocity_mass(&s, Exec::Sequential));
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(m[2 + a][2 + b], vm[a][b]);
            }
        }
    }

    #[test]
    fn momentum_block_scales_with_time_step() {
        let s = spaces(build_structured_triangular(2, 2, DiagonalPattern::Uniform), 4, VelocityFamily::Rt0);
        let m = assemble_mass(&s, Exec::Sequential);
        let vm = assemble_velocity_mass(&s, Exec::Sequential);
        let d = s.dofs;
        for i in 0..4 {
            for (a, b, v) in vm.triplets() {
                assert!((m.get(d.m(i, a), d.m(i, b)) - 0.25 * v).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn mass_is_symmetric_positive_definite() {
        let s = spaces(build_structured_triangular(4, 4, DiagonalPattern::Uniform), 4, VelocityFamily::Bdm1);
        let m = assemble_mass(&s, Exec::Parallel);
        assert!(m.symmetry_defect() <= 1e-14 * m.max_abs());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x: Vec<f64> = (0..m.ncols).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(m.quadratic_form(Exec::Sequential, &x) > 0.0);
        }
    }

    #[test]
    fn divergence_of_stationary_field_vanishes() {
        let s = spaces(build_structured_triangular(3, 3, DiagonalPattern::Alternating), 3, VelocityFamily::Rt0);
        let b = assemble_divergence(&s, Exec::Sequential);
        let d = s.dofs;
        let mut sigma = vec![0.0; d.n_sigma()];
        for j in 0..d.n_nodes {
            for c in 0..d.n_cells {
                sigma[d.rho(j, c)] = 1.0 + c as f64;
            }
        }
        assert!(b.mul_vec(Exec::Sequential, &sigma).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_interior_flux_touches_two_rows_per_slab() {
        let s = spaces(build_structured_triangular(2, 2, DiagonalPattern::Uniform), 2, VelocityFamily::Rt0);
        let b = assemble_divergence(&s, Exec::Sequential);
        let d = s.dofs;
        let f = (0..d.n_facets).find(|&f| !s.mesh.is_boundary_facet(f)).unwrap();
        for i in 0..2 {
            let mut sigma = vec![0.0; d.n_sigma()];
            sigma[d.m(i, f)] = 1.0;
            let r = b.mul_vec(Exec::Sequential, &sigma);
            let nz: Vec<f64> = r.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz.len(), 2);
            assert_eq!(nz[0] + nz[1], 0.0);
            assert_eq!(nz[0].abs(), 0.5);
            assert!(r[i * d.n_cells..(i + 1) * d.n_cells].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn divergence_of_linear_interpolation_matches_hand_formula() {
        // Two-cell strip: ρ_i = (1 - t_i) a + t_i b gives τ|T|(b - a) per row.
        let s = spaces(build_structured_quadrilateral(2, 1), 3, VelocityFamily::Rtq0);
        let b = assemble_divergence(&s, Exec::Sequential);
        let d = s.dofs;
        let (a0, b0) = ([1.5, 0.5], [0.25, 1.75]);
        let mut sigma = vec![0.0; d.n_sigma()];
        for (j, &t) in s.time.nodes().iter().enumerate() {
            for c in 0..2 {
                sigma[d.rho(j, c)] = (1.0 - t) * a0[c] + t * b0[c];
            }
        }
        let r = b.mul_vec(Exec::Sequential, &sigma);
        for i in 0..3 {
            for c in 0..2 {
                let expect = (1.0 / 3.0) * 0.5 * (b0[c] - a0[c]);
                assert!((r[d.phi(i, c)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn divergence_rows_match_elementwise_formula_on_random_fields() {
        let s = spaces(build_structured_triangular(3, 2, DiagonalPattern::Alternating), 3, VelocityFamily::Bdm1);
        let b = assemble_divergence(&s, Exec::Parallel);
        let d = s.dofs;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma: Vec<f64> = (0..d.n_sigma()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = b.mul_vec(Exec::Sequential, &sigma);
        for i in 0..d.n_intervals {
            for c in 0..d.n_cells {
                let area = s.mesh.area(c);
                let mut flux = 0.0;
                for lf in 0..3 {
                    let f = s.mesh.cell_facet(c, lf);
                    flux += f64::from(s.mesh.cell_facet_sign(c, lf)) * sigma[d.m(i, d.vdof(f, 0))];
                }
                let expect = area * (sigma[d.rho(i + 1, c)] - sigma[d.rho(i, c)]) + flux / 3.0;
                assert!((r[d.phi(i, c)] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn boundary_elimination_counts_and_compatibility() {
        let s = spaces(build_structured_triangular(2, 2, DiagonalPattern::Uniform), 3, VelocityFamily::Rt0);
        let rho = vec![1.0; 8];
        let bc = apply_flux_bc(&s, &rho, &rho).unwrap();
        assert_eq!(bc.n_fixed(), 2 * 8 + 3 * 8);
        assert!(bc.values[..8].iter().all(|&v| v == 1.0));
        let scaled: Vec<f64> = rho.iter().map(|v| 1.1 * v).collect();
        assert!(matches!(apply_flux_bc(&s, &rho, &scaled), Err(AssemblyError::Compatibility { .. })));
        let s = spaces(build_structured_triangular(2, 2, DiagonalPattern::Uniform), 3, VelocityFamily::Bdm1);
        assert_eq!(apply_flux_bc(&s, &rho, &rho).unwrap().n_fixed(), 2 * 8 + 3 * 8 * 2);
    }

    #[test]
    fn l2_regularizer_examples() {
        let s = spaces(build_structured_quadrilateral(1, 1), 1, VelocityFamily::Rtq0);
        assert_eq!(dense(&assemble_l2_reg(1.0, 1.0, &s)), vec![vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let s = spaces(build_structured_triangular(3, 3, DiagonalPattern::Uniform), 5, VelocityFamily::Rt0);
        let r = assemble_l2_reg(0.3, 0.7, &s);
        let d = s.dofs;
        let constant = vec![2.0; d.n_rho()];
        assert!(r.mul_vec(Exec::Sequential, &constant).iter().all(|v| v.abs() < 1e-12));
        let mut linear = vec![0.0; d.n_rho()];
        for (j, &t) in s.time.nodes().iter().enumerate() {
            for c in 0..d.n_cells {
                linear[d.rho(j, c)] = t;
            }
        }
        assert!((r.quadratic_form(Exec::Sequential, &linear) - 0.3 * 0.7).abs() < 1e-13);
        assert!(r.symmetry_defect() == 0.0);
    }

    #[test]
    fn h1_gradient_of_constants_vanishes_and_effective_block_is_psd() {
        let s = spaces(build_structured_triangular(4, 4, DiagonalPattern::Uniform), 2, VelocityFamily::Rt0);
        let h = assemble_h1_reg(1.0, 1.0, &s, Exec::Sequential);
        let d = s.dofs;
        let nv = d.n_v();
        let interior: Vec<usize> = (0..d.n_nodes * nv).filter(|&k| !s.is_boundary_vdof(k % nv)).collect();
        let ones = vec![1.0; d.n_rho()];
        let g1 = h.g.mul_vec(Exec::Sequential, &ones);
        assert!(interior.iter().all(|&k| g1[k].abs() < 1e-14));

        // Dense oracle: Gᵀ M_W⁻¹ G on interior η dofs.
        let n = interior.len();
        let mw = nalgebra::DMatrix::from_fn(n, n, |a, b| h.mw.get(interior[a], interior[b]));
        let g = nalgebra::DMatrix::from_fn(n, d.n_rho(), |a, r| h.g.get(interior[a], r));
        let reff = g.transpose() * mw.clone().cholesky().expect("M_W is SPD").solve(&g);
        assert!((reff.clone() - reff.transpose()).amax() < 1e-9);
        let eig = nalgebra::SymmetricEigen::new(reff.clone());
        assert!(eig.eigenvalues.min() > -1e-9 * reff.amax());
    }

    #[test]
    fn h1_gradient_of_linear_profile_on_a_strip() {
        // Strip of 3 unit-height cells of width h = 1/3, ρ = cell-centre x.
        // Rows of M_W η = -Dρ over the two interior facets, by hand:
        // (2h/3) η₁ + (h/6) η₂ = Δρ = 1/3 and symmetrically, so η₁ = η₂ = 6/5.
        // Far from the no-flux boundary the row sum of M_W is h and η
        // reduces to the centred difference Δρ/h = 1.
        let s = spaces(build_structured_quadrilateral(3, 1), 1, VelocityFamily::Rtq0);
        let h = assemble_h1_reg(1.0, 1.0, &s, Exec::Sequential);
        let d = s.dofs;
        let nv = d.n_v();
        let rho: Vec<f64> = (0..d.n_rho()).map(|k| (k % 3) as f64 / 3.0 + 1.0 / 6.0).collect();
        // Solve M_W η = -G ρ at each node; interior facets decouple in time
        // because both ρ slices are equal.
        let interior: Vec<usize> = (0..nv).filter(|&g| !s.is_boundary_vdof(g)).collect();
        let gr = h.g.mul_vec(Exec::Sequential, &rho);
        let vm = assemble_velocity_mass(&s, Exec::Sequential);
        let n = interior.len();
        let a = nalgebra::DMatrix::from_fn(n, n, |i, j| vm.get(interior[i], interior[j]));
        let (md, mo) = time_mass(&s);
        let rhs = nalgebra::DVector::from_fn(n, |i, _| -gr[interior[i]] / (md[0] + mo[0]));
        let eta = a.lu().solve(&rhs).unwrap();
        for (i, &g) in interior.iter().enumerate() {
            let (len, normal) = s.mesh.facet_geometry(g);
            let expect = 1.2 * len * normal[0];
            assert!((eta[i] - expect).abs() < 1e-12, "{} vs {}", eta[i], expect);
        }
    }

    #[test]
    fn saddle_operator_is_symmetric_and_sized() {
        let s = spaces(build_structured_triangular(2, 2, DiagonalPattern::Uniform), 2, VelocityFamily::Rt0);
        let m = assemble_mass(&s, Exec::Sequential);
        let b = assemble_divergence(&s, Exec::Sequential);
        let rho = vec![1.0; 8];
        for reg in [Regularization::None, Regularization::L2 { alpha: 0.1 }, Regularization::H1 { alpha: 0.1 }] {
            let bc = apply_flux_bc(&s, &rho, &rho).unwrap();
            let op = SaddleOperator::new(&s, &m, &b, reg, 1.0, bc, true, Exec::Sequential).unwrap();
            assert_eq!(op.n_sigma_free, s.dofs.n_sigma() - (16 + 16));
            assert_eq!(op.dim(), op.n_sigma_free + op.n_eta_free + 16 + 1);
            assert_eq!(op.matrix.symmetry_defect(), 0.0);
            if let Regularization::H1 { .. } = reg {
                assert_eq!(op.n_eta_free, 3 * 8);
            }
        }
    }

    #[test]
    fn assembly_is_identical_across_execution_policies() {
        let s = spaces(build_structured_triangular(5, 4, DiagonalPattern::Alternating), 3, VelocityFamily::Bdm1);
        assert_eq!(assemble_mass(&s, Exec::Sequential), assemble_mass(&s, Exec::Parallel));
        assert_eq!(assemble_divergence(&s, Exec::Sequential), assemble_divergence(&s, Exec::Parallel));
    }
}
