//! Direct solver for the projection system that diagonalizes the time
//! coupling.
//!
//! Without the gradient regularizer the system reads
//!
//! ```text
//! [ T⊗A          0           D_Iᵀ⊗A   0   ] [ρ]
//! [ 0            diag(τ)⊗M   diag(τ)⊗Gᵀ 0 ] [m]
//! [ D_I⊗A        diag(τ)⊗G   0        τ⊗a ] [φ]
//! [ 0            0           (τ⊗a)ᵀ   0   ] [λ]
//! ```
//!
//! with `T` the interior density block in time, `D_I` the time difference on
//! interior nodes, `M` the free velocity mass and `G` the spatial divergence.
//! Eliminating ρ leaves the time operator `S = D_I T⁻¹ D_Iᵀ`. With
//! `S U = diag(τ) U Λ` and `Uᵀ diag(τ) U = I`, the change of variables
//! `m = (U⊗I) v`, `φ = (U⊗I) ψ` splits the rest into one spatial system per
//! mode,
//!
//! ```text
//! [ M   Gᵀ    ] [v_j]   [g_j]
//! [ G  −μ_j A ] [ψ_j] = [r_j]
//! ```
//!
//! and only the zero mode, whose vector is constant in time, carries the
//! augmentation.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, LdltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::{Conj, Mat, MatMut, Par, Side};

use crate::assembly::{SaddleOperator, TimeStructure, ELIMINATED};
use crate::par::{self, Exec};
use crate::solver::SolverError;
use crate::sparse::{CsrMatrix, Triplets};

/// Shift of the multiplier block of the zero mode, relative to the largest
/// velocity mass diagonal entry.
const SHIFT: f64 = 1e-8;

struct ModeFactor {
    symbolic: Arc<SymbolicCholesky<usize>>,
    values: Vec<f64>,
}

impl ModeFactor {
    fn solve(&self, x: &mut [f64]) {
        let n = x.len();
        let mut mem = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
        LdltRef::new(&self.symbolic, &self.values).solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(x, n, 1),
            Par::Seq,
            MemStack::new(&mut mem),
        );
    }
}

pub(crate) struct TimeModes {
    nc: usize,
    nf: usize,
    /// Interior time nodes.
    ni: usize,
    /// Intervals, which is also the number of modes.
    nt: usize,
    /// System index of interior density `(n, c)` at `n * nc + c`.
    rho_idx: Vec<usize>,
    /// System index of free momentum `(i, f)` at `i * nf + f`.
    m_idx: Vec<usize>,
    phi0: usize,
    lambda: Option<usize>,
    areas: Vec<f64>,
    /// `T⁻¹`, `ni × ni`, row-major.
    tinv: Vec<f64>,
    /// `U`, `nt × nt`, row-major: `u[i * nt + j]` is entry `(interval i, mode j)`.
    u: Vec<f64>,
    modes: Vec<ModeFactor>,
    pub(crate) factor_nnz: usize,
}

fn ldlt(matrix: &CsrMatrix, symbolic: Option<&Arc<SymbolicCholesky<usize>>>) -> Result<ModeFactor, SolverError> {
    let k = matrix.to_faer();
    let symbolic = match symbolic {
        Some(s) => Arc::clone(s),
        None => Arc::new(
            factorize_symbolic_cholesky(
                k.symbolic(),
                Side::Lower,
                SymmetricOrdering::Amd,
                CholeskySymbolicParams::default(),
            )
            .map_err(|e| SolverError::Singular {
                pivot: 0.0,
                dof: 0,
                detail: format!("symbolic: {e:?}"),
            })?,
        ),
    };
    let mut values = vec![0.0; symbolic.len_val()];
    let mut mem = MemBuffer::new(symbolic.factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default()));
    symbolic
        .factorize_numeric_ldlt(
            &mut values,
            k.as_ref(),
            Side::Lower,
            LdltRegularization::default(),
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map_err(|e| SolverError::Singular { pivot: 0.0, dof: 0, detail: format!("{e:?}") })?;
    Ok(ModeFactor { symbolic, values })
}

/// Dense inverse of a small symmetric positive definite matrix.
fn spd_inverse(a: &Mat<f64>) -> Result<Mat<f64>, SolverError> {
    let n = a.nrows();
    let llt = a.llt(Side::Lower).map_err(|e| SolverError::Singular {
        pivot: 0.0,
        dof: 0,
        detail: format!("time block: {e:?}"),
    })?;
    Ok(faer::linalg::solvers::Solve::solve(&llt, Mat::<f64>::identity(n, n)))
}

impl TimeModes {
    pub(crate) fn new(op: &SaddleOperator, exec: Exec) -> Result<Self, SolverError> {
        let st: &TimeStructure = op.structure.as_ref().ok_or_else(|| {
            SolverError::Unsupported("the time-mode backend needs an operator without the gradient regularizer".into())
        })?;
        let d = &st.dofs;
        let (nc, nt) = (d.n_cells, d.n_intervals);
        let ni = d.n_nodes - 2;
        let nf = st.free_vdofs.len();

        let lookup = |k: usize| -> Result<usize, SolverError> {
            match op.sigma_index[k] {
                ELIMINATED => Err(SolverError::Unsupported(format!("primal dof {k} is unexpectedly fixed"))),
                f => Ok(f),
            }
        };
        let mut rho_idx = Vec::with_capacity(ni * nc);
        for n in 1..=ni {
            for c in 0..nc {
                rho_idx.push(lookup(d.rho(n, c))?);
            }
        }
        let mut m_idx = Vec::with_capacity(nt * nf);
        for i in 0..nt {
            for &g in &st.free_vdofs {
                m_idx.push(lookup(d.m(i, g))?);
            }
        }
        if op.n_sigma_free != rho_idx.len() + m_idx.len() {
            return Err(SolverError::Unsupported("free primal dofs do not match the time structure".into()));
        }

        // Interior time block and its inverse.
        let (diag, off) = &st.time_rho;
        let t = Mat::from_fn(ni, ni, |a, b| match (a + 1, b + 1) {
            (x, y) if x == y => diag[x],
            (x, y) if x + 1 == y => off[x],
            (x, y) if y + 1 == x => off[y],
            _ => 0.0,
        });
        let tinv_m = if ni > 0 { spd_inverse(&t)? } else { Mat::zeros(0, 0) };
        // S = D_I T⁻¹ D_Iᵀ with D_I[i][n] = +1 if n = i + 1, −1 if n = i
        // (nodes numbered 0..=nt, interior nodes 1..nt).
        let tinv_node = |p: usize, q: usize| -> f64 {
            if p == 0 || q == 0 || p > ni || q > ni {
                0.0
            } else {
                tinv_m[(p - 1, q - 1)]
            }
        };
        let s = Mat::from_fn(nt, nt, |i, k| {
            tinv_node(i + 1, k + 1) - tinv_node(i + 1, k) - tinv_node(i, k + 1) + tinv_node(i, k)
        });
        let p: Vec<f64> = st.steps.iter().map(|t| 1.0 / t.sqrt()).collect();
        let c = Mat::from_fn(nt, nt, |i, k| p[i] * s[(i, k)] * p[k]);
        let evd = c.self_adjoint_eigen(Side::Lower).map_err(|e| SolverError::Singular {
            pivot: 0.0,
            dof: 0,
            detail: format!("time modes: {e:?}"),
        })?;
        let mut mu: Vec<f64> = (0..nt).map(|j| evd.S()[j]).collect();
        let mut u = vec![0.0; nt * nt];
        for i in 0..nt {
            for j in 0..nt {
                u[i * nt + j] = p[i] * evd.U()[(i, j)];
            }
        }
        // Eigenvalues ascend and S is semidefinite with the constants as kernel.
        let total: f64 = st.steps.iter().sum();
        let c0 = 1.0 / total.sqrt();
        mu[0] = 0.0;
        for i in 0..nt {
            u[i * nt] = c0;
        }
        let aug = total.sqrt();

        let mf = restrict(&st.velocity_mass, &st.free_vdofs, &st.free_vdofs);
        let all_cells: Vec<usize> = (0..nc).collect();
        let gf = restrict(&st.divergence, &all_cells, &st.free_vdofs);
        let scale = (0..nf).map(|f| mf.get(f, f).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let delta = SHIFT * scale;

        let build = |j: usize| -> CsrMatrix {
            let zero = j == 0;
            let dim = nf + nc + usize::from(zero && op.augmented);
            let mut k = Triplets::new(dim, dim);
            k.extend_from(mf.triplets());
            for (r, col, v) in gf.triplets() {
                k.push(nf + r, col, v);
                k.push(col, nf + r, v);
            }
            for (cell, a) in st.areas.iter().enumerate() {
                let diag = if zero { -delta } else { -mu[j] * a };
                k.push(nf + cell, nf + cell, diag);
            }
            if zero && op.augmented {
                for (cell, a) in st.areas.iter().enumerate() {
                    k.push(nf + cell, nf + nc, aug * a);
                    k.push(nf + nc, nf + cell, aug * a);
                }
                k.push(nf + nc, nf + nc, -delta);
            }
            k.into_csr()
        };
        let first = ldlt(&build(0), None)?;
        let mut modes = vec![first];
        if nt > 1 {
            let second = ldlt(&build(1), None)?;
            let symbolic = Arc::clone(&second.symbolic);
            modes.push(second);
            let rest = par::map_collect(exec, nt - 2, |j| ldlt(&build(j + 2), Some(&symbolic)));
            for m in rest {
                modes.push(m?);
            }
        }
        let factor_nnz = modes.iter().map(|m| m.values.len()).sum();
        Ok(Self {
            nc,
            nf,
            ni,
            nt,
            rho_idx,
            m_idx,
            phi0: op.phi_offset(),
            lambda: op.augmented.then(|| op.dim() - 1),
            areas: st.areas.clone(),
            tinv: (0..ni * ni).map(|k| tinv_m[(k / ni, k % ni)]).collect(),
            u,
            modes,
            factor_nnz,
        })
    }

    /// Applies the inverse of the (zero-mode shifted) system to `rhs`.
    pub(crate) fn apply(&self, rhs: &[f64], exec: Exec) -> Vec<f64> {
        let (nc, nf, ni, nt) = (self.nc, self.nf, self.ni, self.nt);
        let u = |i: usize, j: usize| self.u[i * nt + j];

        // w = (T⁻¹ ⊗ I) f_ρ on interior nodes.
        let f_rho = |n: usize, c: usize| rhs[self.rho_idx[n * nc + c]];
        let mut w = vec![0.0; ni * nc];
        for n in 0..ni {
            for k in 0..ni {
                let t = self.tinv[n * ni + k];
                if t != 0.0 {
                    for c in 0..nc {
                        w[n * nc + c] += t * f_rho(k, c);
                    }
                }
            }
        }
        // Interior node n (1-based in time) is row n − 1 of w.
        let w_at = |node: usize, c: usize| if node == 0 || node > ni { 0.0 } else { w[(node - 1) * nc + c] };

        // Mode right-hand sides: [U_jᵀ f_m | U_jᵀ r₀ (| h)].
        let mut rhs_modes: Vec<Vec<f64>> =
            (0..nt).map(|j| vec![0.0; nf + nc + usize::from(j == 0 && self.lambda.is_some())]).collect();
        for i in 0..nt {
            for (j, b) in rhs_modes.iter_mut().enumerate() {
                let uij = u(i, j);
                for f in 0..nf {
                    b[f] += uij * rhs[self.m_idx[i * nf + f]];
                }
                for c in 0..nc {
                    let r0 = rhs[self.phi0 + i * nc + c] - (w_at(i + 1, c) - w_at(i, c));
                    b[nf + c] += uij * r0;
                }
            }
        }
        if let Some(l) = self.lambda {
            rhs_modes[0][nf + nc] = rhs[l];
        }

        let sols = par::map_collect(exec, nt, |j| {
            let mut x = rhs_modes[j].clone();
            self.modes[j].solve(&mut x);
            x
        });

        let mut x = vec![0.0; rhs.len()];
        let mut phi = vec![0.0; nt * nc];
        for i in 0..nt {
            for (j, s) in sols.iter().enumerate() {
                let uij = u(i, j);
                for f in 0..nf {
                    x[self.m_idx[i * nf + f]] += uij * s[f];
                }
                for c in 0..nc {
                    phi[i * nc + c] += uij * s[nf + c];
                }
            }
        }
        x[self.phi0..self.phi0 + nt * nc].copy_from_slice(&phi);
        if let Some(l) = self.lambda {
            x[l] = sols[0][nf + nc];
        }
        // ρ = (T⁻¹ ⊗ I)(f_ρ / a − (D_Iᵀ ⊗ I) φ); node k + 1 sits between
        // intervals k and k + 1.
        for n in 0..ni {
            for k in 0..ni {
                let t = self.tinv[n * ni + k];
                if t == 0.0 {
                    continue;
                }
                for c in 0..nc {
                    let q = f_rho(k, c) / self.areas[c] - (phi[k * nc + c] - phi[(k + 1) * nc + c]);
                    x[self.rho_idx[n * nc + c]] += t * q;
                }
            }
        }
        x
    }
}

/// Submatrix on the given (increasing) rows and columns.
fn restrict(a: &CsrMatrix, rows: &[usize], cols: &[usize]) -> CsrMatrix {
    let mut col_map = vec![ELIMINATED; a.ncols];
    for (new, &old) in cols.iter().enumerate() {
        col_map[old] = new;
    }
    let mut t = Triplets::new(rows.len(), cols.len());
    for (r, &old) in rows.iter().enumerate() {
        for (c, v) in a.row(old) {
            if col_map[c] != ELIMINATED {
                t.push(r, col_map[c], v);
            }
        }
    }
    t.into_csr()
}
