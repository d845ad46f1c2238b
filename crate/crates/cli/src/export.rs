//! File output: legacy VTK snapshots, CSV tables and the run summary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mixot::mesh::{CellKind, SpatialMesh};
use mixot::transport::{IterationRecord, RunReport};
use vtkio::model::{
    Attribute, Attributes, ByteOrder, CellType, Cells, DataSet, UnstructuredGridPiece, Version, VertexNumbers, Vtk,
};

use crate::error::CliError;

fn grid(mesh: &SpatialMesh, cell: Vec<Attribute>) -> Vtk {
    let points: Vec<f64> = mesh.vertices().iter().flat_map(|p| [p[0], p[1], 0.0]).collect();
    let (kind, per) = match mesh.kind() {
        CellKind::Simplex => (CellType::Triangle, 3),
        CellKind::Quad => (CellType::Quad, 4),
    };
    let mut vertices = Vec::with_capacity(mesh.n_cells() * (per + 1));
    for c in 0..mesh.n_cells() {
        vertices.push(per as u32);
        vertices.extend(mesh.cell(c).iter().map(|&v| v as u32));
    }
    Vtk {
        version: Version::new((2, 0)),
        title: "mixot".into(),
        byte_order: ByteOrder::BigEndian,
        file_path: None,
        data: DataSet::inline(UnstructuredGridPiece {
            points: points.into(),
            cells: Cells {
                cell_verts: VertexNumbers::Legacy { num_cells: mesh.n_cells() as u32, vertices },
                types: vec![kind; mesh.n_cells()],
            },
            data: Attributes { point: Vec::new(), cell },
        }),
    }
}

fn write_vtk(vtk: Vtk, path: &Path) -> Result<(), CliError> {
    let mut text = String::new();
    vtk.write_legacy_ascii(&mut text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes `rho` (one value per cell) as the cell scalar `density` of a legacy
/// ASCII unstructured grid.
pub fn export_vtk(mesh: &SpatialMesh, rho: &[f64], path: &Path) -> Result<(), CliError> {
    if rho.len() != mesh.n_cells() {
        return Err(CliError::Numerical(format!("slice has {} values for {} cells", rho.len(), mesh.n_cells())));
    }
    write_vtk(grid(mesh, vec![Attribute::scalars("density", 1).with_data(rho.to_vec())]), path)
}

/// Like [`export_vtk`] with an extra cell vector field `momentum`.
pub fn export_vtk_with_momentum(
    mesh: &SpatialMesh,
    rho: &[f64],
    momentum: &[[f64; 2]],
    path: &Path,
) -> Result<(), CliError> {
    if rho.len() != mesh.n_cells() || momentum.len() != mesh.n_cells() {
        return Err(CliError::Numerical(format!("slice lengths do not match {} cells", mesh.n_cells())));
    }
    let m: Vec<f64> = momentum.iter().flat_map(|v| [v[0], v[1], 0.0]).collect();
    let cell =
        vec![Attribute::scalars("density", 1).with_data(rho.to_vec()), Attribute::vectors("momentum").with_data(m)];
    write_vtk(grid(mesh, cell), path)
}

/// `iter,delta_sigma,delta_q,duality,action,min_rho` with one row per iteration.
pub fn convergence_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from("iter,delta_sigma,delta_q,duality,action,min_rho\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, r.delta_sigma, r.delta_q, r.duality, r.action, r.min_rho
        );
    }
    s
}

/// Summary of a run. The `timings` object is the only part that varies
/// between identical runs.
pub fn summary_json(report: &RunReport, continuity: f64, mass_error: f64) -> serde_json::Value {
    let finite = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
    serde_json::json!({
        "wasserstein": report.wasserstein,
        "action": finite(report.action.value),
        "infinite_cells": report.action.infinite_cells,
        "iterations": report.iterations,
        "converged": report.converged,
        "duality": finite(report.duality),
        "duality_gap": finite(report.duality_gap),
        "continuity_residual": continuity,
        "mass_error": mass_error,
        "min_rho": report.history.last().map(|r| r.min_rho),
        "factorization": {
            "backend": report.factor.backend,
            "dim": report.factor.dim,
            "nnz": report.factor.nnz,
            "factor_nnz": report.factor.factor_nnz,
        },
        "timings": {
            "factorization": report.factor.seconds,
            "setup": report.times.setup,
            "step1": report.times.step1,
            "step2": report.times.step2,
            "diagnostics": report.times.diagnostics,
        },
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
