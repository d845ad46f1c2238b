//! Primal-dual iteration for the discrete transport problem.
//!
//! The primal field σ = (ρ, m) lives in the mixed space (see [`DofMap`] for the
//! layout). The dual field q = (a, b) is piecewise constant in time with values
//! per cell (`P0`) or per cell vertex (`P1`, discontinuous), and must lie in
//! K = {(a, b) : a + |b|²/2 ≤ 0}.
//!
//! One iteration is
//! ```text
//! σ' = prox(σ − τ₁ q)            (mixed projection, optionally regularized)
//! q' = P_K(q + τ₂ P_X(2σ' − σ))
//! ```

use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::MatMut;
use thiserror::Error;

use crate::assembly::{
    apply_flux_bc, assemble_divergence, assemble_mass, assemble_velocity_mass, time_mass, AssemblyError,
    Regularization, SaddleOperator,
};
use crate::fespace::{DofMap, DualOrder, FeError, Spaces};
use crate::par::{self, Exec};
use crate::solver::{factorize, solve, Backend, FactorStats, Factorization, SolverError};
use crate::sparse::{CsrMatrix, Triplets};

/// Density threshold below which a cell counts as empty in the action.
pub const EPS_RHO: f64 = 1e-12;
/// Momentum threshold (`∫|m|²`) below which an empty cell contributes zero.
/// Iterates only approach positivity, so this sits at the size of the
/// momentum left behind in empty cells after a few thousand iterations.
pub const EPS_M: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Space(#[from] FeError),
    #[error("step sizes must be positive, got tau1={tau1}, tau2={tau2}")]
    StepSize { tau1: f64, tau2: f64 },
    #[error("endpoint density has {got} values, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("non-finite iterate at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("action is infinite on {cells} space-time cells")]
    InfiniteAction { cells: usize },
}

/// Euclidean projection onto K in ℝ × ℝᴰ. Points already in K are returned
/// unchanged; otherwise the result lies on the boundary a = −|b|²/2.
pub fn project_k_point<const D: usize>(a: f64, b: [f64; D]) -> (f64, [f64; D]) {
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if a + 0.5 * nb * nb <= 0.0 {
        return (a, b);
    }
    if nb == 0.0 {
        return (0.0, [0.0; D]);
    }
    let mu = paraboloid_root(a, nb);
    let s = mu / nb;
    (-0.5 * mu * mu, b.map(|v| s * v))
}

/// Positive root of `x³/2 + (a+1)x − nb` for a point outside K, which lies in
/// `(0, nb)`. Newton from the right end (where the cubic is convex) with a
/// bisection safeguard.
fn paraboloid_root(a: f64, nb: f64) -> f64 {
    let f = |x: f64| 0.5 * x * x * x + (a + 1.0) * x - nb;
    let (mut lo, mut hi) = (0.0, nb);
    let mut x = nb;
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let df = 1.5 * x * x + a + 1.0;
        let mut next = x - fx / df;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * nb.max(1.0) || hi - lo <= 1e-15 * nb.max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

/// Dual coefficients `[a, b₀, b₁]`, indexed by [`DofMap::dual`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualField {
    pub values: Vec<[f64; 3]>,
}

impl DualField {
    pub fn zeros(dofs: &DofMap) -> Self {
        Self { values: vec![[0.0; 3]; dofs.n_dual()] }
    }

    /// Largest `a + |b|²/2` over all coefficients (≤ 0 inside K).
    pub fn membership_residual(&self) -> f64 {
        self.values.iter().map(|v| v[0] + 0.5 * (v[1] * v[1] + v[2] * v[2])).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// How Step 2 realizes the projection onto K for vertex-based duals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualProjection {
    /// Independent projection of every vertex value.
    #[default]
    Vertexwise,
    /// L² projection onto the element's piecewise linear fields with values
    /// in K, solved per element.
    ExactL2,
}

/// Endpoint densities (cell values) and regularization on a discretization.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub spaces: Spaces,
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
    pub regularization: Regularization,
}

impl TransportProblem {
    pub fn new(
        spaces: Spaces,
        rho0: Vec<f64>,
        rho1: Vec<f64>,
        regularization: Regularization,
    ) -> Result<Self, TransportError> {
        let n = spaces.dofs.n_cells;
        for r in [&rho0, &rho1] {
            if r.len() != n {
                return Err(TransportError::Dimension { got: r.len(), expected: n });
            }
        }
        apply_flux_bc(&spaces, &rho0, &rho1)?;
        Ok(Self { spaces, rho0, rho1, regularization })
    }

    pub fn dofs(&self) -> &DofMap {
        &self.spaces.dofs
    }
}

/// Assembled and factorized Step-1 system.
pub struct ProjectionSystem {
    pub op: SaddleOperator,
    pub fact: Factorization,
    pub mass: CsrMatrix,
    pub div: CsrMatrix,
}

impl ProjectionSystem {
    pub fn new(problem: &TransportProblem, tau1: f64, backend: Backend, exec: Exec) -> Result<Self, TransportError> {
        let spaces = &problem.spaces;
        let mass = assemble_mass(spaces, exec);
        let div = assemble_divergence(spaces, exec);
        let bc = apply_flux_bc(spaces, &problem.rho0, &problem.rho1)?;
        let op = SaddleOperator::new(spaces, &mass, &div, problem.regularization, tau1, bc, true, exec)?;
        let fact = factorize(&op, backend, exec)?;
        Ok(Self { op, fact, mass, div })
    }

    pub fn stats(&self) -> &FactorStats {
        &self.fact.stats
    }
}

/// `∫_T N_k` for every vertex of a cell.
fn vertex_weights(nodal_mass: &[f64], nv: usize) -> Vec<f64> {
    (0..nv).map(|k| nodal_mass[k * nv..(k + 1) * nv].iter().sum()).collect()
}

fn cell_time_average(d: &DofMap, sigma: &[f64], i: usize, c: usize) -> f64 {
    0.5 * (sigma[d.rho(i, c)] + sigma[d.rho(i + 1, c)])
}

/// Local contributions of `⟨q, ·⟩` on slab `i`, cell `c`: weight on the
/// averaged density and weights on the local momentum dofs.
fn local_pairing(spaces: &Spaces, q: &DualField, i: usize, c: usize) -> (f64, Vec<f64>) {
    let d = &spaces.dofs;
    let data = &spaces.cells[c];
    let tau = spaces.time.step(i);
    let nl = data.n_local();
    let mut wm = vec![0.0; nl];
    let wa;
    match spaces.config.dual_order {
        DualOrder::P0 => {
            let [a, b0, b1] = q.values[d.dual(i, c, 0)];
            wa = tau * a * data.area;
            for l in 0..nl {
                let [i0, i1] = data.integral[l];
                wm[l] = tau * (b0 * i0 + b1 * i1);
            }
        }
        DualOrder::P1 => {
            let nv = d.dual_local;
            let w = vertex_weights(&data.nodal_mass, nv);
            let mut acc = 0.0;
            for k in 0..nv {
                let [a, b0, b1] = q.values[d.dual(i, c, k)];
                acc += a * w[k];
                for l in 0..nl {
                    let [v0, v1] = data.vertex_coupling[k * nl + l];
                    wm[l] += tau * (b0 * v0 + b1 * v1);
                }
            }
            wa = tau * acc;
        }
    }
    (wa, wm)
}

/// The functional `v ↦ ⟨q, v⟩` as a primal-length vector.
pub fn lift_dual(spaces: &Spaces, q: &DualField, exec: Exec) -> Vec<f64> {
    let d = &spaces.dofs;
    let nc = d.n_cells;
    let local = par::map_collect(exec, d.n_intervals * nc, |k| local_pairing(spaces, q, k / nc, k % nc));
    let mut out = vec![0.0; d.n_sigma()];
    for (k, (wa, wm)) in local.into_iter().enumerate() {
        let (i, c) = (k / nc, k % nc);
        out[d.rho(i, c)] += 0.5 * wa;
        out[d.rho(i + 1, c)] += 0.5 * wa;
        for (l, &g) in spaces.cells[c].dofs.iter().enumerate() {
            out[d.m(i, g)] += wm[l];
        }
    }
    out
}

/// The duality pairing `⟨q, σ⟩`.
pub fn pairing(spaces: &Spaces, q: &DualField, sigma: &[f64], exec: Exec) -> f64 {
    let d = &spaces.dofs;
    let nc = d.n_cells;
    par::sum(exec, d.n_intervals * nc, |k| {
        let (i, c) = (k / nc, k % nc);
        let (wa, wm) = local_pairing(spaces, q, i, c);
        let mut s = wa * cell_time_average(d, sigma, i, c);
        for (l, &g) in spaces.cells[c].dofs.iter().enumerate() {
            s += wm[l] * sigma[d.m(i, g)];
        }
        s
    })
}

/// Step 1: `σ' = prox(σ − τ₁ q)`, returning the full primal vector.
pub fn step1(
    system: &ProjectionSystem,
    spaces: &Spaces,
    sigma: &[f64],
    q: &DualField,
    tau1: f64,
    exec: Exec,
) -> Result<Vec<f64>, TransportError> {
    let mut load = system.mass.mul_vec(exec, sigma);
    let lift = lift_dual(spaces, q, exec);
    for (l, g) in load.iter_mut().zip(&lift) {
        *l -= tau1 * g;
    }
    Ok(solve(&system.fact, &system.op, &load)?.sigma)
}

/// Dual-space representative of a primal field: time-averaged density and
/// momentum means (`P0`) or vertex values (`P1`).
pub fn project_dual_space(spaces: &Spaces, sigma: &[f64], exec: Exec) -> DualField {
    let d = &spaces.dofs;
    let nc = d.n_cells;
    let dl = d.dual_local;
    let mut values = vec![[0.0; 3]; d.n_dual()];
    par::for_each_chunk_mut(exec, &mut values, dl, |k, out| {
        let (i, c) = (k / nc, k % nc);
        let data = &spaces.cells[c];
        let a = cell_time_average(d, sigma, i, c);
        let nl = data.n_local();
        match spaces.config.dual_order {
            DualOrder::P0 => {
                let mut b = [0.0; 2];
                for (l, &g) in data.dofs.iter().enumerate() {
                    let m = sigma[d.m(i, g)];
                    b[0] += data.integral[l][0] * m;
                    b[1] += data.integral[l][1] * m;
                }
                out[0] = [a, b[0] / data.area, b[1] / data.area];
            }
            DualOrder::P1 => {
                for (kv, o) in out.iter_mut().enumerate() {
                    let mut b = [0.0; 2];
                    for (l, &g) in data.dofs.iter().enumerate() {
                        let m = sigma[d.m(i, g)];
                        let v = data.vertex_values[kv * nl + l];
                        b[0] += v[0] * m;
                        b[1] += v[1] * m;
                    }
                    *o = [a, b[0], b[1]];
                }
            }
        }
    });
    DualField { values }
}

fn project_k3(v: [f64; 3]) -> [f64; 3] {
    let (a, b) = project_k_point(v[0], [v[1], v[2]]);
    [a, b[0], b[1]]
}

/// Minimizes `(y − z)ᵀ (M ⊗ I) (y − z)` over vertex values `y` in K, where `M`
/// is the element's nodal mass matrix, by accelerated projected gradient.
fn project_element_exact(z: &[[f64; 3]], mass: &[f64]) -> Vec<[f64; 3]> {
    let n = z.len();
    // Gershgorin bound on the largest eigenvalue (all entries positive).
    let lip = (0..n).map(|k| mass[k * n..(k + 1) * n].iter().sum::<f64>()).fold(0.0, f64::max);
    let mut y: Vec<[f64; 3]> = z.iter().map(|&v| project_k3(v)).collect();
    let mut yprev = y.clone();
    let mut w = y.clone();
    let mut t = 1.0f64;
    let scale = z.iter().flat_map(|v| v.iter()).fold(1.0f64, |m, x| m.max(x.abs()));
    for _ in 0..5000 {
        let mut next = vec![[0.0; 3]; n];
        for k in 0..n {
            let mut g = [0.0; 3];
            for l in 0..n {
                let mkl = mass[k * n + l];
                for j in 0..3 {
                    g[j] += mkl * (w[l][j] - z[l][j]);
                }
            }
            let mut p = w[k];
            for j in 0..3 {
                p[j] -= g[j] / lip;
            }
            next[k] = project_k3(p);
        }
        let change =
            next.iter().zip(&y).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
        yprev.copy_from_slice(&y);
        y = next;
        if change <= 1e-15 * scale {
            break;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / tn;
        for k in 0..n {
            for j in 0..3 {
                w[k][j] = y[k][j] + beta * (y[k][j] - yprev[k][j]);
            }
        }
        t = tn;
    }
    y
}

/// Step 2: `q' = P_K(q + τ₂ P_X(2σ' − σ))`.
pub fn step2(
    spaces: &Spaces,
    q: &DualField,
    sigma_new: &[f64],
    sigma_old: &[f64],
    tau2: f64,
    mode: DualProjection,
    exec: Exec,
) -> DualField {
    let extrapolated: Vec<f64> = sigma_new.iter().zip(sigma_old).map(|(n, o)| 2.0 * n - o).collect();
    let px = project_dual_space(spaces, &extrapolated, exec);
    let d = &spaces.dofs;
    let dl = d.dual_local;
    let nc = d.n_cells;
    let exact = mode == DualProjection::ExactL2 && spaces.config.dual_order == DualOrder::P1;
    let mut values = vec![[0.0; 3]; d.n_dual()];
    par::for_each_chunk_mut(exec, &mut values, dl, |k, out| {
        let base = k * dl;
        let z: Vec<[f64; 3]> = (0..dl)
            .map(|l| {
                let (qv, pv) = (q.values[base + l], px.values[base + l]);
                [qv[0] + tau2 * pv[0], qv[1] + tau2 * pv[1], qv[2] + tau2 * pv[2]]
            })
            .collect();
        if exact {
            out.copy_from_slice(&project_element_exact(&z, &spaces.cells[k % nc].nodal_mass));
        } else {
            for (o, v) in out.iter_mut().zip(z) {
                *o = project_k3(v);
            }
        }
    });
    DualField { values }
}

/// Squared L² norm of a dual field over space-time.
pub fn dual_norm_sq(spaces: &Spaces, q: &DualField, exec: Exec) -> f64 {
    let d = &spaces.dofs;
    let nc = d.n_cells;
    let dl = d.dual_local;
    par::sum(exec, d.n_intervals * nc, |k| {
        let (i, c) = (k / nc, k % nc);
        let tau = spaces.time.step(i);
        let data = &spaces.cells[c];
        let v = &q.values[k * dl..(k + 1) * dl];
        let mut s = 0.0;
        match spaces.config.dual_order {
            DualOrder::P0 => s = data.area * v[0].iter().map(|x| x * x).sum::<f64>(),
            DualOrder::P1 => {
                for a in 0..dl {
                    for b in 0..dl {
                        let dotv: f64 = (0..3).map(|j| v[a][j] * v[b][j]).sum();
                        s += data.nodal_mass[a * dl + b] * dotv;
                    }
                }
            }
        }
        tau * s
    })
}

/// Value of the discrete action with the number of cells where it is infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub value: f64,
    pub infinite_cells: usize,
}

impl Action {
    pub fn is_finite(&self) -> bool {
        self.infinite_cells == 0
    }
}

/// `Σ_i τ_i Σ_T ∫_T |m_i|² / (2 ρ̄)` with ρ̄ the time-averaged cell density.
pub fn evaluate_action(spaces: &Spaces, sigma: &[f64], exec: Exec) -> Action {
    let d = &spaces.dofs;
    let nc = d.n_cells;
    let parts = par::map_collect(exec, d.n_intervals * nc, |k| {
        let (i, c) = (k / nc, k % nc);
        let data = &spaces.cells[c];
        let nl = data.n_local();
        let m: Vec<f64> = data.dofs.iter().map(|&g| sigma[d.m(i, g)]).collect();
        let mut e = 0.0;
        for a in 0..nl {
            for b in 0..nl {
                e += m[a] * data.mass[a * nl + b] * m[b];
            }
        }
        let rho = cell_time_average(d, sigma, i, c);
        if rho <= EPS_RHO {
            if e <= EPS_M {
                (0.0, 0)
            } else {
                (0.0, 1)
            }
        } else {
            (spaces.time.step(i) * e / (2.0 * rho), 0)
        }
    });
    let infinite_cells = parts.iter().map(|p| p.1).sum();
    let value = if infinite_cells > 0 { f64::INFINITY } else { parts.iter().map(|p| p.0).sum() };
    Action { value, infinite_cells }
}

/// `sqrt(2 · action)`.
pub fn wasserstein_estimate(spaces: &Spaces, sigma: &[f64], exec: Exec) -> Result<f64, TransportError> {
    let a = evaluate_action(spaces, sigma, exec);
    if !a.is_finite() {
        return Err(TransportError::InfiniteAction { cells: a.infinite_cells });
    }
    Ok((2.0 * a.value).max(0.0).sqrt())
}

/// Largest per-slab, per-cell residual `|T|(ρ_{i+1} − ρ_i) + τ_i ∫_T div m_i`.
pub fn continuity_residual(spaces: &Spaces, sigma: &[f64]) -> f64 {
    let d = &spaces.dofs;
    let mut worst = 0.0f64;
    for i in 0..d.n_intervals {
        let tau = spaces.time.step(i);
        for c in 0..d.n_cells {
            let data = &spaces.cells[c];
            let flux: f64 = data.dofs.iter().zip(&data.div_integral).map(|(&g, w)| w * sigma[d.m(i, g)]).sum();
            let r = data.area * (sigma[d.rho(i + 1, c)] - sigma[d.rho(i, c)]) + tau * flux;
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// `Σ_T ρ_n|_T |T|` for every time node.
pub fn node_masses(spaces: &Spaces, sigma: &[f64]) -> Vec<f64> {
    let d = &spaces.dofs;
    (0..d.n_nodes).map(|n| (0..d.n_cells).map(|c| sigma[d.rho(n, c)] * spaces.cells[c].area).sum()).collect()
}

/// Density cell values at time node `node`.
pub fn density_at(spaces: &Spaces, sigma: &[f64], node: usize) -> Vec<f64> {
    let d = &spaces.dofs;
    sigma[d.rho(node, 0)..d.rho(node, 0) + d.n_cells].to_vec()
}

/// Smallest nodal density value.
pub fn min_density(spaces: &Spaces, sigma: &[f64]) -> f64 {
    sigma[..spaces.dofs.n_rho()].iter().copied().fold(f64::INFINITY, f64::min)
}

/// `⟨∂_t ρ, ∂_t ρ⟩ = Σ_i Σ_T |T| (ρ_{i+1} − ρ_i)² / τ_i`.
pub fn time_seminorm_sq(spaces: &Spaces, sigma: &[f64]) -> f64 {
    let d = &spaces.dofs;
    let mut s = 0.0;
    for i in 0..d.n_intervals {
        let tau = spaces.time.step(i);
        for c in 0..d.n_cells {
            let diff = sigma[d.rho(i + 1, c)] - sigma[d.rho(i, c)];
            s += spaces.cells[c].area * diff * diff / tau;
        }
    }
    s
}

/// Squared discrete spatial gradient seminorm of the density, integrated in
/// time with the piecewise linear time mass. The gradient at each node is the
/// velocity field `η` with zero boundary flux solving
/// `⟨η, w⟩ = −⟨ρ, div w⟩` for all such `w`.
pub fn gradient_seminorm_sq(spaces: &Spaces, sigma: &[f64], exec: Exec) -> Result<f64, TransportError> {
    let d = &spaces.dofs;
    let nv = d.n_v();
    let mv = assemble_velocity_mass(spaces, exec);
    let mut index = vec![usize::MAX; nv];
    let mut interior = Vec::new();
    for k in 0..nv {
        if !spaces.is_boundary_vdof(k) {
            index[k] = interior.len();
            interior.push(k);
        }
    }
    let ni = interior.len();
    if ni == 0 {
        return Ok(0.0);
    }
    let mut t = Triplets::new(ni, ni);
    for (r, c, v) in mv.triplets() {
        if index[r] != usize::MAX && index[c] != usize::MAX {
            t.push(index[r], index[c], v);
        }
    }
    let mvi = t.into_csr();
    let llt = mvi
        .to_faer()
        .sp_cholesky(faer::Side::Lower)
        .map_err(|e| SolverError::Preconditioner(format!("velocity mass: {e:?}")))?;

    let etas: Vec<Vec<f64>> = (0..d.n_nodes)
        .map(|n| {
            let mut rhs = vec![0.0; ni];
            for c in 0..d.n_cells {
                let data = &spaces.cells[c];
                let rho = sigma[d.rho(n, c)];
                for (l, &g) in data.dofs.iter().enumerate() {
                    if index[g] != usize::MAX {
                        rhs[index[g]] -= rho * data.div_integral[l];
                    }
                }
            }
            llt.solve_in_place(MatMut::from_column_major_slice_mut(&mut rhs, ni, 1));
            rhs
        })
        .collect();
    let (md, mo) = time_mass(spaces);
    let inner = |a: &[f64], b: &[f64]| -> f64 {
        let mb = mvi.mul_vec(Exec::Sequential, b);
        a.iter().zip(&mb).map(|(x, y)| x * y).sum()
    };
    let mut s = 0.0;
    for n in 0..d.n_nodes {
        s += md[n] * inner(&etas[n], &etas[n]);
        if n + 1 < d.n_nodes {
            s += 2.0 * mo[n] * inner(&etas[n], &etas[n + 1]);
        }
    }
    Ok(s)
}

/// Starting primal field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Initialization {
    /// Projection of the time-linear interpolation of the endpoint densities
    /// with zero momentum. Exact for equal endpoints.
    #[default]
    Interpolation,
    /// The admissible field of least norm (projection of zero).
    MinimalNorm,
}

/// Starting point before projection for the given initialization.
pub fn initial_guess(problem: &TransportProblem, init: Initialization) -> Vec<f64> {
    let spaces = &problem.spaces;
    let d = &spaces.dofs;
    let mut xi = vec![0.0; d.n_sigma()];
    if init == Initialization::Interpolation {
        let nodes = spaces.time.nodes();
        let (t0, t1) = (nodes[0], nodes[d.n_nodes - 1]);
        for (n, &t) in nodes.iter().enumerate() {
            let s = (t - t0) / (t1 - t0);
            for c in 0..d.n_cells {
                xi[d.rho(n, c)] = (1.0 - s) * problem.rho0[c] + s * problem.rho1[c];
            }
        }
    }
    xi
}

/// Settings of a primal-dual run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdhgConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub backend: Backend,
    pub exec: Exec,
    pub dual_projection: DualProjection,
    pub init: Initialization,
}

impl Default for PdhgConfig {
    fn default() -> Self {
        Self {
            tau1: 1.0,
            tau2: 1.0,
            max_iters: 10_000,
            stop_tol: 1e-6,
            backend: Backend::Direct,
            exec: Exec::default(),
            dual_projection: DualProjection::Vertexwise,
            init: Initialization::Interpolation,
        }
    }
}

/// Diagnostics of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `‖σ^{k+1} − σ^k‖` in the L² norm of the primal space.
    pub delta_sigma: f64,
    pub delta_q: f64,
    pub duality: f64,
    pub action: f64,
    pub min_rho: f64,
}

/// Accumulated wall time per phase, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub setup: f64,
    pub step1: f64,
    pub step2: f64,
    pub diagnostics: f64,
}

/// History and final values of a run. Everything except `times` and the
/// factorization timing is a deterministic function of the inputs.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub history: Vec<IterationRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub action: Action,
    pub wasserstein: Option<f64>,
    pub duality: f64,
    pub duality_gap: f64,
    pub times: PhaseTimes,
    pub factor: FactorStats,
}

/// Stepping state of the primal-dual iteration.
pub struct Pdhg<'a> {
    problem: &'a TransportProblem,
    config: PdhgConfig,
    system: ProjectionSystem,
    sigma: Vec<f64>,
    q: DualField,
    history: Vec<IterationRecord>,
    times: PhaseTimes,
}

impl<'a> Pdhg<'a> {
    /// Assembles and factorizes the Step-1 system, sets `σ⁰` to the projection
    /// of the configured initial guess and `q⁰ = 0`.
    pub fn new(problem: &'a TransportProblem, config: PdhgConfig) -> Result<Self, TransportError> {
        let (tau1, tau2) = (config.tau1, config.tau2);
        if !(tau1 > 0.0 && tau2 > 0.0 && tau1.is_finite() && tau2.is_finite()) {
            return Err(TransportError::StepSize { tau1, tau2 });
        }
        if tau1 * tau2 >= 1.0 {
            log::warn!("tau1*tau2 = {} >= 1: outside the proven convergence range (tau1*tau2 < 1)", tau1 * tau2);
        }
        let start = Instant::now();
        let system = ProjectionSystem::new(problem, tau1, config.backend, config.exec)?;
        let q = DualField::zeros(problem.dofs());
        let guess = initial_guess(problem, config.init);
        let sigma = step1(&system, &problem.spaces, &guess, &q, tau1, config.exec)?;
        let times = PhaseTimes { setup: start.elapsed().as_secs_f64(), ..Default::default() };
        Ok(Self { problem, config, system, sigma, q, history: Vec::new(), times })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn q(&self) -> &DualField {
        &self.q
    }

    pub fn iteration(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn system(&self) -> &ProjectionSystem {
        &self.system
    }

    pub fn config(&self) -> &PdhgConfig {
        &self.config
    }

    /// Performs one iteration and records its diagnostics.
    pub fn step(&mut self) -> Result<IterationRecord, TransportError> {
        let spaces = &self.problem.spaces;
        let exec = self.config.exec;
        let iteration = self.history.len() + 1;

        let t0 = Instant::now();
        let sigma_new = step1(&self.system, spaces, &self.sigma, &self.q, self.config.tau1, exec)?;
        let t1 = Instant::now();
        let q_new =
            step2(spaces, &self.q, &sigma_new, &self.sigma, self.config.tau2, self.config.dual_projection, exec);
        let t2 = Instant::now();

        if !sigma_new.iter().all(|v| v.is_finite()) || !q_new.is_finite() {
            return Err(TransportError::Divergence { iteration });
        }
        let ds: Vec<f64> = sigma_new.iter().zip(&self.sigma).map(|(a, b)| a - b).collect();
        let delta_sigma = self.system.mass.quadratic_form(exec, &ds).max(0.0).sqrt();
        let dq = DualField {
            values: q_new
                .values
                .iter()
                .zip(&self.q.values)
                .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
                .collect(),
        };
        let delta_q = dual_norm_sq(spaces, &dq, exec).max(0.0).sqrt();
        self.sigma = sigma_new;
        self.q = q_new;
        let record = IterationRecord {
            iteration,
            delta_sigma,
            delta_q,
            duality: pairing(spaces, &self.q, &self.sigma, exec),
            action: evaluate_action(spaces, &self.sigma, exec).value,
            min_rho: min_density(spaces, &self.sigma),
        };
        self.history.push(record);

        self.times.step1 += (t1 - t0).as_secs_f64();
        self.times.step2 += (t2 - t1).as_secs_f64();
        self.times.diagnostics += t2.elapsed().as_secs_f64();
        Ok(record)
    }

    /// Iterates until the primal change drops to `stop_tol` or `max_iters`
    /// iterations have been taken in total. The first iteration is exempt: with
    /// `q⁰ = 0` it reproduces `σ⁰` exactly.
    pub fn run(&mut self) -> Result<bool, TransportError> {
        while self.iteration() < self.config.max_iters {
            let rec = self.step()?;
            if rec.iteration > 1 && rec.delta_sigma <= self.config.stop_tol {
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn report(&self, converged: bool) -> RunReport {
        let spaces = &self.problem.spaces;
        let exec = self.config.exec;
        let action = evaluate_action(spaces, &self.sigma, exec);
        let duality = pairing(spaces, &self.q, &self.sigma, exec);
        RunReport {
            history: self.history.clone(),
            iterations: self.iteration(),
            converged,
            action,
            wasserstein: action.is_finite().then(|| (2.0 * action.value).max(0.0).sqrt()),
            duality,
            duality_gap: (action.value - duality).abs(),
            times: self.times,
            factor: self.system.stats().clone(),
        }
    }

    pub fn into_parts(self) -> (Vec<f64>, DualField) {
        (self.sigma, self.q)
    }
}

/// Runs the primal-dual iteration from the standard initialization.
pub fn pdhg_run(
    problem: &TransportProblem,
    config: PdhgConfig,
) -> Result<(Vec<f64>, DualField, RunReport), TransportError> {
    let mut state = Pdhg::new(problem, config)?;
    let converged = state.run()?;
    let report = state.report(converged);
    let (sigma, q) = state.into_parts();
    Ok((sigma, q, report))
}
