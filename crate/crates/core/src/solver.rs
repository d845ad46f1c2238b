//! Linear solves for the constrained projection system.
//!
//! The default direct backend shifts the zero multiplier block by `−δ`, which
//! makes the matrix quasi-definite, factorizes the shifted matrix once with a
//! fill-reducing supernodal LDLᵀ and recovers the unshifted solution by
//! iterative refinement. A pivoted sparse LU of the unshifted matrix is
//! available as an alternative, and the iterative backend runs preconditioned
//! MINRES with a block-diagonal preconditioner. Every solve is checked against
//! [`RESIDUAL_TOLERANCE`].

use std::time::Instant;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::linalg::solvers::Solve;
use faer::perm::PermRef;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LdltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::{Conj, MatMut, Par, Side};
use thiserror::Error;

use crate::assembly::SaddleOperator;
use crate::ordering::nested_dissection;
use crate::par::Exec;
use crate::sparse::{CsrMatrix, Triplets};
use crate::timemodes::TimeModes;

/// Relative residual every returned solution satisfies.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Residual at which refinement stops early.
const REFINE_TARGET: f64 = 1e-13;
const MAX_REFINE: usize = 30;

/// Shift of the multiplier block relative to the largest primal diagonal entry.
const SHIFT: f64 = 1e-8;

/// Relative error of the probe solve above which the system is declared singular.
const PROBE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("singular system: estimated smallest pivot {pivot:.3e} near dof {dof} ({detail})")]
    Singular { pivot: f64, dof: usize, detail: String },
    #[error("right-hand side has length {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("relative residual {residual:.3e} exceeds {RESIDUAL_TOLERANCE:e} after refinement")]
    Residual { residual: f64 },
    #[error("MINRES stopped after {iterations} iterations at relative residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("preconditioner setup failed: {0}")]
    Preconditioner(String),
    #[error("backend not applicable: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Backend {
    /// Shifted quasi-definite LDLᵀ with refinement.
    #[default]
    Direct,
    /// Pivoted sparse LU of the unshifted matrix.
    DirectLu,
    /// Generalized eigendecomposition of the time coupling and one sparse LDLᵀ
    /// per time mode; not available with the gradient regularizer.
    TimeModes,
    Iterative {
        tol: f64,
        max_iter: usize,
    },
}

impl Backend {
    pub fn iterative() -> Self {
        Backend::Iterative { tol: 1e-12, max_iter: 20_000 }
    }
}

/// Size and timing of a factorization. `factor_nnz` is zero when the backend
/// does not expose it.
#[derive(Debug, Clone)]
pub struct FactorStats {
    pub dim: usize,
    pub nnz: usize,
    pub factor_nnz: usize,
    pub seconds: f64,
    pub backend: &'static str,
    /// Relative error of the probe solve used for the singularity check.
    pub probe_error: f64,
}

enum Inner {
    Ldlt { symbolic: SymbolicCholesky<usize>, values: Vec<f64> },
    Lu(Lu<usize, f64>),
    TimeModes(Box<TimeModes>),
    Minres { tol: f64, max_iter: usize, precond: BlockPreconditioner },
}

/// A factorized (or preconditioned) saddle operator, reusable across solves.
pub struct Factorization {
    matrix: CsrMatrix,
    inner: Inner,
    exec: Exec,
    pub stats: FactorStats,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("stats", &self.stats).finish()
    }
}

/// Full-length pieces of one solve.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    /// Primal vector with boundary values in place.
    pub sigma: Vec<f64>,
    /// Space-time multiplier, one value per interval and cell.
    pub phi: Vec<f64>,
    /// Gradient auxiliary on all nodes; boundary entries are zero. Empty unless
    /// the gradient regularizer is active.
    pub eta: Vec<f64>,
    pub lambda: Option<f64>,
    pub residual: f64,
}

fn probe_vector(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i.wrapping_mul(7919) + 17) % 104_729) as f64 / 104_729.0).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Factorizes `op` with the chosen backend. The direct backend performs a probe
/// solve and reports [`SolverError::Singular`] when it fails.
pub fn factorize(op: &SaddleOperator, backend: Backend, exec: Exec) -> Result<Factorization, SolverError> {
    let start = Instant::now();
    let matrix = op.matrix.clone();
    let dim = matrix.nrows;
    let mut factor_nnz = 0;
    let (inner, name) = match backend {
        Backend::Direct => {
            let (symbolic, values) = factorize_shifted(op)?;
            factor_nnz = values.len();
            (Inner::Ldlt { symbolic, values }, "ldlt")
        }
        Backend::DirectLu => {
            let lu = matrix.to_faer().sp_lu().map_err(|e| SolverError::Singular {
                pivot: 0.0,
                dof: 0,
                detail: format!("structural: {e:?}"),
            })?;
            (Inner::Lu(lu), "sparse-lu")
        }
        Backend::TimeModes => {
            let modes = TimeModes::new(op, exec)?;
            factor_nnz = modes.factor_nnz;
            (Inner::TimeModes(Box::new(modes)), "time-modes")
        }
        Backend::Iterative { tol, max_iter } => {
            let precond = BlockPreconditioner::new(op)?;
            (Inner::Minres { tol, max_iter, precond }, "minres")
        }
    };
    let mut fact = Factorization {
        stats: FactorStats { dim, nnz: matrix.nnz(), factor_nnz, seconds: 0.0, backend: name, probe_error: 0.0 },
        matrix,
        inner,
        exec,
    };
    if !matches!(fact.inner, Inner::Minres { .. }) {
        fact.stats.probe_error = fact.probe()?;
    }
    fact.stats.seconds = start.elapsed().as_secs_f64();
    log::debug!("factorized {} system: dim {}, nnz {}, {:.3}s", name, dim, fact.stats.nnz, fact.stats.seconds);
    Ok(fact)
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.matrix.nrows
    }

    fn raw_solve(&self, rhs: &[f64]) -> Result<Vec<f64>, SolverError> {
        match &self.inner {
            Inner::Ldlt { symbolic, values } => {
                let mut x = rhs.to_vec();
                let n = x.len();
                let mut mem = MemBuffer::new(symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
                LdltRef::new(symbolic, values).solve_in_place_with_conj(
                    Conj::No,
                    MatMut::from_column_major_slice_mut(&mut x, n, 1),
                    Par::Seq,
                    MemStack::new(&mut mem),
                );
                Ok(x)
            }
            Inner::Lu(lu) => {
                let mut x = rhs.to_vec();
                let n = x.len();
                lu.solve_in_place(MatMut::from_column_major_slice_mut(&mut x, n, 1));
                Ok(x)
            }
            Inner::TimeModes(modes) => Ok(modes.apply(rhs, self.exec)),
            Inner::Minres { tol, max_iter, precond } => minres(&self.matrix, rhs, precond, *tol, *max_iter, self.exec),
        }
    }

    fn probe(&self) -> Result<f64, SolverError> {
        let x0 = probe_vector(self.dim());
        let b = self.matrix.mul_vec(self.exec, &x0);
        let x = self.refined_solve(&b, norm(&b))?.0;
        if let Some(dof) = x.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::Singular { pivot: 0.0, dof, detail: "non-finite probe solution".into() });
        }
        let d: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let err = norm(&d) / norm(&x0);
        if err > PROBE_TOLERANCE {
            // d is dominated by the near-null direction; its Rayleigh-type ratio
            // estimates the smallest pivot relative to the matrix scale.
            let kd = self.matrix.mul_vec(self.exec, &d);
            let pivot = norm(&kd) / norm(&d) / self.matrix.max_abs().max(f64::MIN_POSITIVE);
            let dof = d.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(i, _)| i).unwrap_or(0);
            return Err(SolverError::Singular { pivot, dof, detail: format!("probe error {err:.3e}") });
        }
        Ok(err)
    }

    fn relative_residual(&self, x: &[f64], b: &[f64], bnorm: f64) -> (Vec<f64>, f64) {
        let kx = self.matrix.mul_vec(self.exec, x);
        let r: Vec<f64> = b.iter().zip(&kx).map(|(b, k)| b - k).collect();
        let rel = norm(&r) / bnorm;
        (r, rel)
    }

    /// Solves `K x = b` and verifies the residual, refining once.
    pub fn solve_system(&self, b: &[f64]) -> Result<(Vec<f64>, f64), SolverError> {
        if b.len() != self.dim() {
            return Err(SolverError::Dimension { got: b.len(), expected: self.dim() });
        }
        let bnorm = norm(b);
        if bnorm == 0.0 {
            return Ok((vec![0.0; b.len()], 0.0));
        }
        let (x, rel) = self.refined_solve(b, bnorm)?;
        if !(rel <= RESIDUAL_TOLERANCE) {
            return Err(SolverError::Residual { residual: rel });
        }
        Ok((x, rel))
    }

    /// Solve followed by refinement until the residual reaches
    /// `REFINE_TARGET` or stops improving. The pivoted LU and MINRES backends
    /// get a single refinement pass.
    fn refined_solve(&self, b: &[f64], bnorm: f64) -> Result<(Vec<f64>, f64), SolverError> {
        let mut x = self.raw_solve(b)?;
        let (mut r, mut rel) = self.relative_residual(&x, b, bnorm);
        let passes = if matches!(self.inner, Inner::Ldlt { .. } | Inner::TimeModes(_)) { MAX_REFINE } else { 1 };
        for _ in 0..passes {
            if !(rel > REFINE_TARGET) {
                break;
            }
            let dx = self.raw_solve(&r)?;
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + d).collect();
            let (r_new, rel_new) = self.relative_residual(&trial, b, bnorm);
            if !(rel_new < rel) {
                break;
            }
            x = trial;
            r = r_new;
            rel = rel_new;
        }
        Ok((x, rel))
    }
}

/// Factorizes `K − δ diag(0, 0, I, 1)`. The primal block is positive definite
/// and the η and shifted multiplier blocks negative definite, so the LDLᵀ
/// factorization exists for any symmetric ordering.
fn factorize_shifted(op: &SaddleOperator) -> Result<(SymbolicCholesky<usize>, Vec<f64>), SolverError> {
    let k = &op.matrix;
    let n = k.nrows;
    let np = op.n_sigma_free;
    let scale = (0..np).map(|i| k.get(i, i).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let delta = SHIFT * scale;
    let phi0 = op.phi_offset();
    let mut t = Triplets::new(n, n);
    t.extend_from(k.triplets());
    for i in phi0..n {
        t.push(i, i, -delta);
    }
    let shifted = t.into_csr().to_faer();

    // Keep whichever of minimum degree and nested dissection fills less.
    let order = nested_dissection(k);
    let mut inverse = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        inverse[old] = new;
    }
    let symbolic_error = |e| SolverError::Singular { pivot: 0.0, dof: 0, detail: format!("symbolic: {e:?}") };
    let amd = factorize_symbolic_cholesky(
        shifted.symbolic(),
        Side::Lower,
        SymmetricOrdering::Amd,
        CholeskySymbolicParams::default(),
    )
    .map_err(symbolic_error)?;
    let nd = factorize_symbolic_cholesky(
        shifted.symbolic(),
        Side::Lower,
        SymmetricOrdering::Custom(PermRef::new_checked(&order, &inverse, n)),
        CholeskySymbolicParams::default(),
    )
    .map_err(symbolic_error)?;
    let symbolic = if nd.len_val() < amd.len_val() { nd } else { amd };
    let mut values = vec![0.0; symbolic.len_val()];
    let mut mem = MemBuffer::new(symbolic.factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default()));
    symbolic
        .factorize_numeric_ldlt(
            &mut values,
            shifted.as_ref(),
            Side::Lower,
            LdltRegularization {
                dynamic_regularization_signs: None,
                dynamic_regularization_delta: delta,
                dynamic_regularization_epsilon: 1e-3 * delta,
            },
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map_err(|e| SolverError::Singular { pivot: 0.0, dof: 0, detail: format!("{e:?}") })?;
    Ok((symbolic, values))
}

/// Solves the projection system for the primal load `load` (full primal length)
/// and scatters the result back to full-length vectors.
pub fn solve(fact: &Factorization, op: &SaddleOperator, load: &[f64]) -> Result<SaddleSolution, SolverError> {
    let expected = op.boundary.values.len();
    if load.len() != expected {
        return Err(SolverError::Dimension { got: load.len(), expected });
    }
    let rhs = op.rhs(load);
    let (x, residual) = fact.solve_system(&rhs)?;
    let mut eta = Vec::new();
    if op.n_eta > 0 {
        eta = vec![0.0; op.n_eta];
        for (f, &k) in op.eta_free.iter().enumerate() {
            eta[k] = op.eta(&x)[f];
        }
    }
    Ok(SaddleSolution { sigma: op.primal(&x), phi: op.multiplier(&x).to_vec(), eta, lambda: op.lambda(&x), residual })
}

/// Block-diagonal SPD preconditioner: Jacobi on the primal and η blocks, an
/// approximate Schur complement on the multiplier block and a scalar for λ.
struct BlockPreconditioner {
    diag_inv: Vec<f64>,
    phi0: usize,
    n_phi: usize,
    schur: Llt<usize, f64>,
    lambda_scale: Option<f64>,
}

impl BlockPreconditioner {
    fn new(op: &SaddleOperator) -> Result<Self, SolverError> {
        let k = &op.matrix;
        let phi0 = op.phi_offset();
        let np = op.n_phi;
        let ns = op.n_sigma_free;
        let diag_inv: Vec<f64> = (0..phi0)
            .map(|i| {
                let d = k.get(i, i).abs();
                if d > 0.0 {
                    1.0 / d
                } else {
                    1.0
                }
            })
            .collect();

        // S = B D⁻¹ Bᵀ with a small shift for the constant mode.
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns];
        for p in 0..np {
            for (c, v) in k.row(phi0 + p) {
                if c < ns {
                    cols[c].push((p, v));
                }
            }
        }
        let mut t = Triplets::new(np, np);
        let mut diag = vec![0.0; np];
        for (c, entries) in cols.iter().enumerate() {
            for &(a, va) in entries {
                for &(b, vb) in entries {
                    let v = va * vb * diag_inv[c];
                    t.push(a, b, v);
                    if a == b {
                        diag[a] += v;
                    }
                }
            }
        }
        let shift = 1e-8 * diag.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for p in 0..np {
            t.push(p, p, shift);
        }
        let s = t.into_csr();
        let schur = s.to_faer().sp_cholesky(Side::Lower).map_err(|e| SolverError::Preconditioner(format!("{e:?}")))?;

        let lambda_scale = if op.augmented {
            let lam = op.dim() - 1;
            let mut w = vec![0.0; np];
            for (c, v) in k.row(lam) {
                if c >= phi0 && c < phi0 + np {
                    w[c - phi0] = v;
                }
            }
            let mut y = w.clone();
            schur.solve_in_place(MatMut::from_column_major_slice_mut(&mut y, np, 1));
            Some(1.0 / dot(&w, &y).max(f64::MIN_POSITIVE))
        } else {
            None
        };
        Ok(Self { diag_inv, phi0, n_phi: np, schur, lambda_scale })
    }

    fn apply(&self, r: &[f64], out: &mut [f64]) {
        for i in 0..self.phi0 {
            out[i] = r[i] * self.diag_inv[i];
        }
        let block = &mut out[self.phi0..self.phi0 + self.n_phi];
        block.copy_from_slice(&r[self.phi0..self.phi0 + self.n_phi]);
        let n = block.len();
        self.schur.solve_in_place(MatMut::from_column_major_slice_mut(block, n, 1));
        if let Some(s) = self.lambda_scale {
            let last = r.len() - 1;
            out[last] = r[last] * s;
        }
    }
}

fn minres(
    a: &CsrMatrix,
    b: &[f64],
    m: &BlockPreconditioner,
    tol: f64,
    max_iter: usize,
    exec: Exec,
) -> Result<Vec<f64>, SolverError> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r1 = b.to_vec();
    let mut y = vec![0.0; n];
    m.apply(&r1, &mut y);
    let beta1 = dot(&r1, &y);
    if !(beta1 > 0.0) {
        return Ok(x);
    }
    let beta1 = beta1.sqrt();
    let mut r2 = r1.clone();
    let (mut oldb, mut beta, mut dbar, mut epsln, mut phibar) = (0.0, beta1, 0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    for itn in 1..=max_iter {
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        a.mul_vec_into(exec, &v, &mut y);
        if itn >= 2 {
            let f = beta / oldb;
            for i in 0..n {
                y[i] -= f * r1[i];
            }
        }
        let alfa = dot(&v, &y);
        let f = alfa / beta;
        for i in 0..n {
            y[i] -= f * r2[i];
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        m.apply(&r2, &mut y);
        oldb = beta;
        beta = dot(&r2, &y).max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let denom = 1.0 / gamma;
        for i in 0..n {
            let w1 = w2[i];
            w2[i] = w[i];
            w[i] = (v[i] - oldeps * w1 - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        if phibar / beta1 <= tol || beta == 0.0 {
            log::trace!("minres converged in {itn} iterations");
            return Ok(x);
        }
    }
    Err(SolverError::NotConverged { iterations: max_iter, residual: phibar / beta1 })
}
