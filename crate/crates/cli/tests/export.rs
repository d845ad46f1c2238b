use std::fs;

use mixot::mesh::{
    build_structured_quadrilateral, build_structured_triangular, CellKind, DiagonalPattern, SpatialMesh,
};
use mixot::transport::IterationRecord;
use mixot_cli::export::{convergence_csv, export_vtk, export_vtk_with_momentum};
use vtkio::model::{Attribute, CellType, DataSet, IOBuffer, VertexNumbers, Vtk};

fn parse(path: &std::path::Path) -> Vtk {
    Vtk::parse_legacy_be(fs::File::open(path).unwrap()).unwrap()
}

fn cell_scalars(vtk: &Vtk) -> (Vec<CellType>, Vec<(String, Vec<f64>)>) {
    let DataSet::UnstructuredGrid { pieces, .. } = &vtk.data else { panic!("not an unstructured grid") };
    let vtkio::model::Piece::Inline(piece) = &pieces[0] else { panic!("piece not inline") };
    let arrays = piece
        .data
        .cell
        .iter()
        .map(|a| match a {
            Attribute::DataArray(d) => {
                let values = match &d.data {
                    IOBuffer::F64(v) => v.clone(),
                    IOBuffer::F32(v) => v.iter().map(|&x| x as f64).collect(),
                    other => panic!("unexpected buffer {other:?}"),
                };
                (d.name.clone(), values)
            }
            Attribute::Field { .. } => panic!("unexpected field"),
        })
        .collect();
    if let VertexNumbers::Legacy { num_cells, .. } = &piece.cells.cell_verts {
        assert_eq!(*num_cells as usize, piece.cells.types.len());
    }
    (piece.cells.types.clone(), arrays)
}

#[test]
fn single_cell_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.vtk");
    let mesh =
        SpatialMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![vec![0, 1, 2]], CellKind::Simplex).unwrap();
    export_vtk(&mesh, &[1.0], &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# vtk DataFile Version"));
    assert!(text.contains("ASCII"));
    assert!(text.contains("DATASET UNSTRUCTURED_GRID"));
    assert!(text.contains("CELL_DATA 1"));
    assert!(text.contains("SCALARS density"));
    let (types, arrays) = cell_scalars(&parse(&path));
    assert_eq!(types, vec![CellType::Triangle]);
    assert_eq!(arrays, vec![("density".to_string(), vec![1.0])]);
}

#[test]
fn values_survive_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.vtk");
    let mesh = build_structured_quadrilateral(5, 3);
    let rho: Vec<f64> = (0..mesh.n_cells()).map(|c| 0.1 + c as f64 / 7.0).collect();
    let m: Vec<[f64; 2]> = (0..mesh.n_cells()).map(|c| [c as f64, -(c as f64)]).collect();
    export_vtk_with_momentum(&mesh, &rho, &m, &path).unwrap();
    let (types, arrays) = cell_scalars(&parse(&path));
    assert_eq!(types, vec![CellType::Quad; 15]);
    assert_eq!(arrays[0].0, "density");
    assert_eq!(arrays[1].0, "momentum");
    for (a, b) in arrays[0].1.iter().zip(&rho) {
        assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
    }
    assert_eq!(arrays[1].1.len(), 45);
    assert_eq!(arrays[1].1[3..6], [1.0, -1.0, 0.0]);
}

#[test]
fn snapshot_of_2048_cells_stays_small() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.vtk");
    let mesh = build_structured_triangular(32, 32, DiagonalPattern::Uniform);
    assert_eq!(mesh.n_cells(), 2048);
    let rho: Vec<f64> = (0..2048).map(|c| (c as f64 * 0.37).sin().abs() * std::f64::consts::PI).collect();
    export_vtk(&mesh, &rho, &path).unwrap();
    let size = fs::metadata(&path).unwrap().len();
    assert!(size <= 1 << 20, "{size} bytes");
}

#[test]
fn rejects_wrong_slice_length() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = build_structured_quadrilateral(2, 2);
    assert!(export_vtk(&mesh, &[1.0; 3], &dir.path().join("x.vtk")).is_err());
}

#[test]
fn convergence_table_columns() {
    let rec =
        IterationRecord { iteration: 3, delta_sigma: 0.5, delta_q: 0.25, duality: 1.0, action: 2.0, min_rho: -1e-3 };
    let csv = convergence_csv(&[rec]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,delta_sigma,delta_q,duality,action,min_rho"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, vec![3.0, 0.5, 0.25, 1.0, 2.0, -1e-3]);
}
