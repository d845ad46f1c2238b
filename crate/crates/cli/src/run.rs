//! Orchestration of solves, refinement studies and dual-order comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use mixot::assembly::{apply_flux_bc, assemble_divergence, assemble_mass, Regularization, SaddleOperator};
use mixot::density::project_density;
use mixot::fespace::{eval_momentum, DualOrder, SpaceConfig, Spaces};
use mixot::mesh::{load_mesh, mesh_quality, CellKind, SpatialMesh, TimeGrid};
use mixot::solver::{factorize, solve};
use mixot::transport::{
    continuity_residual, density_at, node_masses, project_k_point, step1, DualField, Pdhg, ProjectionSystem, RunReport,
    TransportProblem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DensitySpec, MeshSource, RunConfig};
use crate::error::CliError;
use crate::export::{convergence_csv, export_vtk, export_vtk_with_momentum, summary_json, write_text};

/// Discretization and endpoint densities described by `cfg`.
pub fn build_problem(cfg: &RunConfig) -> Result<TransportProblem, CliError> {
    cfg.validate()?;
    let mesh = cfg.mesh.build()?;
    let spaces = Spaces::new(mesh, TimeGrid::uniform(cfg.steps), SpaceConfig::new(cfg.family, cfg.dual))
        .map_err(|e| CliError::config(e.to_string()))?;
    let project = |spec: &DensitySpec| -> Result<Vec<f64>, CliError> {
        project_density(&spaces.mesh, &spec.source()?).map_err(|e| CliError::config(e.to_string()))
    };
    let rho0 = project(&cfg.rho0)?;
    let rho1 = project(&cfg.rho1)?;
    Ok(TransportProblem::new(spaces, rho0, rho1, cfg.regularization)?)
}

/// Time nodes written as density snapshots: the end points, the node nearest
/// `t = 0.5` and every `every`-th node when `every > 0`.
pub fn snapshot_nodes(time: &TimeGrid, every: usize) -> Vec<usize> {
    let last = time.n_nodes() - 1;
    let mut nodes = vec![0, time.nearest_node(0.5), last];
    if every > 0 {
        nodes.extend((0..=last).step_by(every));
    }
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

fn reference_centroid(kind: CellKind) -> [f64; 2] {
    match kind {
        CellKind::Simplex => [1.0 / 3.0, 1.0 / 3.0],
        CellKind::Quad => [0.5, 0.5],
    }
}

/// Cell-centroid momentum of interval `i`.
pub fn cell_momentum(spaces: &Spaces, sigma: &[f64], i: usize) -> Vec<[f64; 2]> {
    let d = &spaces.dofs;
    let m = &sigma[d.m(i, 0)..d.m(i, 0) + d.n_v()];
    let xh = reference_centroid(spaces.mesh.kind());
    (0..d.n_cells).map(|c| eval_momentum(spaces, m, c, xh)).collect()
}

/// Result of [`run_solve`].
pub struct SolveOutcome {
    pub report: RunReport,
    pub sigma: Vec<f64>,
    pub output_dir: PathBuf,
    pub h: f64,
    pub tau: f64,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// Runs the primal-dual iteration for `cfg` and writes `config.txt`,
/// `convergence.csv`, `summary.json` and the density snapshots
/// `density_NNNN.vtk` (NNNN = time node) into the output directory.
pub fn run_solve(cfg: &RunConfig) -> Result<SolveOutcome, CliError> {
    let problem = build_problem(cfg)?;
    let dir = cfg.resolved_output();
    create_dir(&dir)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;

    let spaces = &problem.spaces;
    let mut state = Pdhg::new(&problem, cfg.pdhg())?;
    let start = Instant::now();
    let mut converged = false;
    while state.iteration() < cfg.max_iters {
        let rec = state.step()?;
        if cfg.log_every > 0 && rec.iteration % cfg.log_every == 0 {
            info!(
                "iter {:>6}  dsigma {:.3e}  action {:.6e}  min rho {:.3e}",
                rec.iteration, rec.delta_sigma, rec.action, rec.min_rho
            );
        }
        if rec.iteration > 1 && rec.delta_sigma <= cfg.stop_tol {
            converged = true;
            break;
        }
    }
    let report = state.report(converged);
    let (sigma, _) = state.into_parts();
    info!("{} iterations in {:.2}s, converged: {converged}", report.iterations, start.elapsed().as_secs_f64());

    write_text(&dir.join("convergence.csv"), &convergence_csv(&report.history))?;
    for node in snapshot_nodes(&spaces.time, cfg.snapshot_every) {
        export_vtk(&spaces.mesh, &density_at(spaces, &sigma, node), &dir.join(format!("density_{node:04}.vtk")))?;
    }
    if cfg.export_momentum {
        for i in 0..spaces.dofs.n_intervals {
            let rho: Vec<f64> = density_at(spaces, &sigma, i)
                .iter()
                .zip(density_at(spaces, &sigma, i + 1))
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let m = cell_momentum(spaces, &sigma, i);
            export_vtk_with_momentum(&spaces.mesh, &rho, &m, &dir.join(format!("momentum_{i:04}.vtk")))?;
        }
    }
    let continuity = continuity_residual(spaces, &sigma);
    let mass_error = node_masses(spaces, &sigma).iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let summary = summary_json(&report, continuity, mass_error);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&dir.join("summary.json"), &(text + "\n"))?;

    if !sigma.iter().all(|v| v.is_finite()) {
        return Err(CliError::Numerical("non-finite final iterate".into()));
    }
    Ok(SolveOutcome { report, sigma, output_dir: dir, h: spaces.mesh.h(), tau: spaces.time.step(0) })
}

/// What refinement errors are measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StudyReference {
    /// A known transport distance.
    Analytic(f64),
    /// The estimate of the finest level.
    Finest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub level: usize,
    pub h: f64,
    pub tau: f64,
    pub iterations: usize,
    pub wasserstein: f64,
    pub error: f64,
}

/// Solves `base` on `n × n` meshes for every `n` in `levels`, scaling the
/// number of time steps with `n`. Rows run from coarse to fine; each level
/// writes its own run into `<output>/level_<n>` and the table goes to
/// `<output>/study.csv`. Equal endpoints imply the analytic reference 0.
pub fn run_refinement_study(
    base: &RunConfig,
    levels: &[usize],
    reference: StudyReference,
) -> Result<Vec<StudyRow>, CliError> {
    let base_n = match base.mesh {
        MeshSource::Triangles { nx, .. } | MeshSource::Quads { nx, .. } => nx,
        MeshSource::File(_) => return Err(CliError::config("refinement needs a generated mesh")),
    };
    if levels.is_empty() || levels.contains(&0) {
        return Err(CliError::config("levels must be positive"));
    }
    let reference = match reference {
        StudyReference::Finest if base.rho0 == base.rho1 => StudyReference::Analytic(0.0),
        r => r,
    };
    let mut levels = levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let root = base.resolved_output();
    let mut rows = Vec::new();
    for &n in &levels {
        let mut cfg = base.clone();
        cfg.mesh = base.mesh.at_level(n)?;
        cfg.steps = ((base.steps * n) as f64 / base_n as f64).round().max(1.0) as usize;
        cfg.output_dir = base.output_dir.join(format!("level_{n}"));
        info!("level {n}: {} time steps", cfg.steps);
        let out = run_solve(&cfg)?;
        let w = out.report.wasserstein.ok_or_else(|| CliError::Numerical(format!("infinite action at level {n}")))?;
        rows.push(StudyRow {
            level: n,
            h: out.h,
            tau: out.tau,
            iterations: out.report.iterations,
            wasserstein: w,
            error: 0.0,
        });
    }
    let w_ref = match reference {
        StudyReference::Analytic(w) => w,
        StudyReference::Finest => rows.last().map_or(0.0, |r| r.wasserstein),
    };
    for r in &mut rows {
        r.error = (r.wasserstein - w_ref).abs();
    }
    rows.sort_by(|a, b| b.h.total_cmp(&a.h));
    create_dir(&root)?;
    write_text(&root.join("study.csv"), &study_csv(&rows, w_ref))?;
    Ok(rows)
}

pub fn study_csv(rows: &[StudyRow], reference: f64) -> String {
    let mut s = format!("# reference {reference:e}\nlevel,h,tau,iterations,wasserstein,error\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:e},{},{:e},{:e}", r.level, r.h, r.tau, r.iterations, r.wasserstein, r.error);
    }
    s
}

/// `‖σⁿ − σ*‖_M` per iteration for both dual orders on the same velocity
/// space, with `σ*` taken from a longer run of the same scheme.
pub struct DualComparison {
    pub residual_p0: Vec<f64>,
    pub residual_p1: Vec<f64>,
}

/// Runs `base` with X⁰ and X¹ duals, `reference_iters` iterations for the
/// reference and `iters` for the recorded curve, and writes
/// `<output>/dual_comparison.csv`.
pub fn run_dual_comparison(base: &RunConfig, iters: usize, reference_iters: usize) -> Result<DualComparison, CliError> {
    if iters == 0 || reference_iters < iters {
        return Err(CliError::config("need 0 < iterations <= reference iterations"));
    }
    let mut curves = Vec::new();
    for dual in [DualOrder::P0, DualOrder::P1] {
        let mut cfg = base.clone();
        cfg.dual = dual;
        cfg.stop_tol = 0.0;
        let problem = build_problem(&cfg)?;
        let mut reference = Pdhg::new(&problem, cfg.pdhg())?;
        for _ in 0..reference_iters {
            reference.step()?;
        }
        let star = reference.sigma().to_vec();
        drop(reference);
        let mut state = Pdhg::new(&problem, cfg.pdhg())?;
        let mut curve = Vec::with_capacity(iters);
        for _ in 0..iters {
            state.step()?;
            let e: Vec<f64> = state.sigma().iter().zip(&star).map(|(a, b)| a - b).collect();
            curve.push(state.system().mass.quadratic_form(cfg.pdhg().exec, &e).max(0.0).sqrt());
        }
        info!("dual {dual:?}: residual {:.3e} after {iters} iterations", curve[iters - 1]);
        curves.push(curve);
    }
    let residual_p1 = curves.pop().unwrap_or_default();
    let residual_p0 = curves.pop().unwrap_or_default();
    let root = base.resolved_output();
    create_dir(&root)?;
    let mut s = String::from("iter,residual_p0,residual_p1\n");
    for (k, (a, b)) in residual_p0.iter().zip(&residual_p1).enumerate() {
        let _ = writeln!(s, "{},{a:e},{b:e}", k + 1);
    }
    write_text(&root.join("dual_comparison.csv"), &s)?;
    Ok(DualComparison { residual_p0, residual_p1 })
}

/// Summary lines describing a mesh file.
pub fn mesh_info(path: &Path) -> Result<String, CliError> {
    let mesh = load_mesh(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(describe_mesh(&mesh))
}

pub fn describe_mesh(mesh: &SpatialMesh) -> String {
    let (lo, hi) = mesh.bounding_box();
    let kind = match mesh.kind() {
        CellKind::Simplex => "triangles",
        CellKind::Quad => "quadrilaterals",
    };
    let mut s = String::new();
    let _ = writeln!(s, "cells {} {kind}", mesh.n_cells());
    let _ = writeln!(s, "vertices {}", mesh.n_vertices());
    let _ = writeln!(s, "facets {} ({} boundary)", mesh.n_facets(), mesh.n_boundary_facets());
    let _ = writeln!(s, "area {:.12}", mesh.areas().iter().sum::<f64>());
    let _ = writeln!(s, "h {:.6e}", mesh.h());
    let _ = writeln!(s, "quality {:.6}", mesh_quality(mesh));
    let _ = writeln!(s, "bbox [{}, {}] x [{}, {}]", lo[0], hi[0], lo[1], hi[1]);
    s
}

/// One property check of [`project_test`].
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

/// Property checks of the two projections on the problem of `cfg`: K
/// membership and idempotence of the pointwise projection, and idempotence,
/// M-orthogonality, continuity and mass of the Step-1 projection.
pub fn project_test(cfg: &RunConfig) -> Result<Vec<Check>, CliError> {
    let problem = build_problem(cfg)?;
    let exec = cfg.pdhg().exec;
    let s = &problem.spaces;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let (mut member, mut idem_k) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let a = rng.random_range(-5.0..5.0);
        let b = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let (pa, pb) = project_k_point(a, b);
        member = member.max(pa + 0.5 * (pb[0] * pb[0] + pb[1] * pb[1]));
        let (qa, qb) = project_k_point(pa, pb);
        idem_k = idem_k.max((qa - pa).abs().max((qb[0] - pb[0]).abs()).max((qb[1] - pb[1]).abs()));
    }

    let sys = ProjectionSystem::new(&problem, cfg.tau1, cfg.backend, exec)?;
    let zero_q = DualField::zeros(problem.dofs());
    let n = problem.dofs().n_sigma();
    let xi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p1 = step1(&sys, s, &xi, &zero_q, cfg.tau1, exec)?;
    let p2 = step1(&sys, s, &p1, &zero_q, cfg.tau1, exec)?;
    let norm = |v: &[f64]| sys.mass.quadratic_form(exec, v).max(0.0).sqrt();
    let diff: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
    let idem = norm(&diff) / norm(&p1);

    let mass = assemble_mass(s, exec);
    let div = assemble_divergence(s, exec);
    let zeros = vec![0.0; s.dofs.n_cells];
    let bc = apply_flux_bc(s, &zeros, &zeros).map_err(|e| CliError::Numerical(e.to_string()))?;
    let op = SaddleOperator::new(s, &mass, &div, problem.regularization, cfg.tau1, bc, true, exec)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let fact = factorize(&op, cfg.backend, exec).map_err(|e| CliError::Numerical(e.to_string()))?;
    let e: Vec<f64> = xi.iter().zip(&p1).map(|(a, b)| a - b).collect();
    let me = mass.mul_vec(exec, &e);
    let mut orth = 0.0f64;
    for _ in 0..10 {
        let load: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = solve(&fact, &op, &mass.mul_vec(exec, &load)).map_err(|e| CliError::Numerical(e.to_string()))?.sigma;
        let inner: f64 = me.iter().zip(&v).map(|(a, b)| a * b).sum();
        orth = orth.max(inner.abs() / (norm(&e) * norm(&v)));
    }
    let mass_error = node_masses(s, &p1).iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);

    let mut checks = vec![
        Check { name: "K membership", value: member.max(0.0), tolerance: 1e-12 },
        Check { name: "K idempotence", value: idem_k, tolerance: 1e-12 },
        Check { name: "step1 idempotence", value: idem, tolerance: 1e-9 },
        Check { name: "step1 continuity", value: continuity_residual(s, &p1), tolerance: 1e-10 },
        Check { name: "step1 mass", value: mass_error, tolerance: 1e-10 },
    ];
    // With a regularizer the projection is orthogonal in a different inner product.
    if problem.regularization == Regularization::None {
        checks.push(Check { name: "step1 M-orthogonality", value: orth, tolerance: 1e-9 });
    }
    Ok(checks)
}
