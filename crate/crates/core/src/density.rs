//! Projection of boundary densities onto cellwise constants.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::fespace::FeError;
use crate::mesh::{CellKind, SpatialMesh};
use crate::quadrature::{self, QuadPoint};

/// Target size of the quadrature subcells used for smooth densities.
const SUBCELL_SIZE: f64 = 1.0 / 128.0;

/// Grayscale raster, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, FeError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(FeError::Density(format!(
                "raster of {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Reads an 8-bit grayscale PGM (ASCII or binary).
    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self, FeError> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| FeError::Density(format!("{}: {e}", path.display())))?
            .with_guessed_format()
            .map_err(|e| FeError::Density(format!("{}: {e}", path.display())))?
            .decode()
            .map_err(|e| FeError::Density(format!("{}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.pixels().map(|p| f64::from(p.0[0])).collect())
    }

    fn get(&self, col: usize, row: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

pub type DensityFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;

/// A nonnegative density on the spatial domain, defined up to normalization.
#[derive(Clone)]
pub enum DensitySource {
    Uniform,
    /// `exp(-|x - center|² / (2 s²))`
    Gaussian {
        center: [f64; 2],
        s: f64,
    },
    /// `3/2 + cos(2π|x - center|)` for the initial end, `3/2 - cos(…)` for the final end.
    CosinePair {
        center: [f64; 2],
        initial: bool,
    },
    /// Characteristic function of an axis-aligned rectangle.
    Indicator {
        lo: [f64; 2],
        hi: [f64; 2],
    },
    /// Image stretched over the mesh bounding box.
    Raster(RasterImage),
    /// Cellwise values given directly.
    CellTable(Vec<f64>),
    Function(DensityFn),
}

impl fmt::Debug for DensitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensitySource::Uniform => write!(f, "Uniform"),
            DensitySource::Gaussian { center, s } => write!(f, "Gaussian({center:?}, {s})"),
            DensitySource::CosinePair { center, initial } => write!(f, "CosinePair({center:?}, {initial})"),
            DensitySource::Indicator { lo, hi } => write!(f, "Indicator({lo:?}, {hi:?})"),
            DensitySource::Raster(r) => write!(f, "Raster({}x{})", r.width, r.height),
            DensitySource::CellTable(v) => write!(f, "CellTable({})", v.len()),
            DensitySource::Function(_) => write!(f, "Function"),
        }
    }
}

impl DensitySource {
    /// Pointwise value, for sources that have one.
    pub fn value(&self, x: [f64; 2]) -> Option<f64> {
        match self {
            DensitySource::Uniform => Some(1.0),
            DensitySource::Gaussian { center, s } => {
                let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                Some((-r2 / (2.0 * s * s)).exp())
            }
            DensitySource::CosinePair { center, initial } => {
                let r = (x[0] - center[0]).hypot(x[1] - center[1]);
                let c = (2.0 * PI * r).cos();
                Some(if *initial { 1.5 + c } else { 1.5 - c })
            }
            DensitySource::Indicator { lo, hi } => {
                Some(if (lo[0]..=hi[0]).contains(&x[0]) && (lo[1]..=hi[1]).contains(&x[1]) { 1.0 } else { 0.0 })
            }
            DensitySource::Function(f) => Some(f(x)),
            DensitySource::Raster(_) | DensitySource::CellTable(_) => None,
        }
    }
}

/// Cell averages of `source`, rescaled to unit total mass.
pub fn project_density(mesh: &SpatialMesh, source: &DensitySource) -> Result<Vec<f64>, FeError> {
    let raw = cell_averages(mesh, source)?;
    if let Some(c) = raw.iter().position(|v| !v.is_finite()) {
        return Err(FeError::Density(format!("non-finite density integral on cell {c}")));
    }
    if let Some(c) = raw.iter().position(|&v| v < 0.0) {
        return Err(FeError::Density(format!("negative density on cell {c}")));
    }
    let mass: f64 = raw.iter().zip(mesh.areas()).map(|(v, a)| v * a).sum();
    if !(mass > 0.0) {
        return Err(FeError::Density(format!("total mass {mass:e} is not positive")));
    }
    Ok(raw.into_iter().map(|v| v / mass).collect())
}

/// Unnormalized cell averages.
pub fn cell_averages(mesh: &SpatialMesh, source: &DensitySource) -> Result<Vec<f64>, FeError> {
    match source {
        DensitySource::CellTable(v) => {
            if v.len() != mesh.n_cells() {
                return Err(FeError::Density(format!(
                    "cell table has {} entries for {} cells",
                    v.len(),
                    mesh.n_cells()
                )));
            }
            Ok(v.clone())
        }
        DensitySource::Indicator { lo, hi } => {
            Ok((0..mesh.n_cells()).map(|c| clipped_area(&mesh.cell_points(c), *lo, *hi) / mesh.area(c)).collect())
        }
        DensitySource::Raster(img) => Ok(raster_averages(mesh, img)),
        _ => Ok((0..mesh.n_cells())
            .map(|c| composite_integral(mesh, c, |x| source.value(x).unwrap()) / mesh.area(c))
            .collect()),
    }
}

/// `∫_T f` with the cell split into subcells of size about `SUBCELL_SIZE`.
pub fn composite_integral(mesh: &SpatialMesh, c: usize, f: impl Fn([f64; 2]) -> f64) -> f64 {
    let map = mesh.affine_map(c);
    let det = map.det();
    let n = (mesh.cell_diameter(c) / SUBCELL_SIZE).ceil().max(1.0) as usize;
    let h = 1.0 / n as f64;
    let mut total = 0.0;
    let mut add = |rule: &[QuadPoint], origin: [f64; 2], e1: [f64; 2], e2: [f64; 2]| {
        for qp in rule {
            let xh = [origin[0] + qp.x[0] * e1[0] + qp.x[1] * e2[0], origin[1] + qp.x[0] * e1[1] + qp.x[1] * e2[1]];
            total += qp.w * h * h * det * f(map.apply(xh));
        }
    };
    match mesh.kind() {
        CellKind::Simplex => {
            let rule = quadrature::triangle_degree4();
            for i in 0..n {
                for j in 0..n - i {
                    let o = [i as f64 * h, j as f64 * h];
                    add(&rule, o, [h, 0.0], [0.0, h]);
                    if i + j + 1 < n {
                        // Downward subtriangle, corner at (i+1, j+1).
                        add(&rule, [o[0] + h, o[1] + h], [-h, 0.0], [0.0, -h]);
                    }
                }
            }
        }
        CellKind::Quad => {
            let rule = quadrature::square_gauss3();
            for i in 0..n {
                for j in 0..n {
                    add(&rule, [i as f64 * h, j as f64 * h], [h, 0.0], [0.0, h]);
                }
            }
        }
    }
    total
}

/// Area of the intersection of a convex polygon with an axis-aligned rectangle.
pub fn clipped_area(poly: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let mut p: Vec<[f64; 2]> = poly.to_vec();
    // Sutherland–Hodgman against the four half-planes.
    for (axis, bound, keep_below) in [(0, lo[0], false), (0, hi[0], true), (1, lo[1], false), (1, hi[1], true)] {
        if p.is_empty() {
            break;
        }
        let inside = |v: &[f64; 2]| if keep_below { v[axis] <= bound } else { v[axis] >= bound };
        let mut out = Vec::with_capacity(p.len() + 2);
        for i in 0..p.len() {
            let (a, b) = (p[i], p[(i + 1) % p.len()]);
            let (ia, ib) = (inside(&a), inside(&b));
            if ia {
                out.push(a);
            }
            if ia != ib {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                let mut x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                x[axis] = bound;
                out.push(x);
            }
        }
        p = out;
    }
    if p.len() < 3 {
        0.0
    } else {
        crate::mesh::polygon_area(&p).abs()
    }
}

fn raster_averages(mesh: &SpatialMesh, img: &RasterImage) -> Vec<f64> {
    let (lo, hi) = mesh.bounding_box();
    let dx = (hi[0] - lo[0]) / img.width as f64;
    let dy = (hi[1] - lo[1]) / img.height as f64;
    (0..mesh.n_cells())
        .map(|c| {
            let poly = mesh.cell_points(c);
            let (mut clo, mut chi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for v in &poly {
                for k in 0..2 {
                    clo[k] = clo[k].min(v[k]);
                    chi[k] = chi[k].max(v[k]);
                }
            }
            let col0 = (((clo[0] - lo[0]) / dx).floor().max(0.0) as usize).min(img.width - 1);
            let col1 = (((chi[0] - lo[0]) / dx).ceil() as usize).min(img.width);
            // Row 0 is the top of the image.
            let row0 = (((hi[1] - chi[1]) / dy).floor().max(0.0) as usize).min(img.height - 1);
            let row1 = (((hi[1] - clo[1]) / dy).ceil() as usize).min(img.height);
            let mut acc = 0.0;
            for row in row0..row1 {
                let y1 = hi[1] - row as f64 * dy;
                let y0 = y1 - dy;
                for col in col0..col1 {
                    let x0 = lo[0] + col as f64 * dx;
                    let a = clipped_area(&poly, [x0, y0], [x0 + dx, y1]);
                    if a > 0.0 {
                        acc += a * img.get(col, row);
                    }
                }
            }
            acc / mesh.area(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_quadrilateral, build_structured_triangular, DiagonalPattern};

    fn mass(mesh: &SpatialMesh, coeffs: &[f64]) -> f64 {
        coeffs.iter().zip(mesh.areas()).map(|(c, a)| c * a).sum()
    }

    #[test]
    fn uniform_density_gives_ones() {
        let mesh = build_structured_triangular(4, 4, DiagonalPattern::Alternating);
        let c = project_density(&mesh, &DensitySource::Uniform).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn cosine_pair_is_normalized_and_rotation_symmetric() {
        let mesh = build_structured_quadrilateral(20, 20);
        for initial in [true, false] {
            let c = project_density(&mesh, &DensitySource::CosinePair { center: [0.5, 0.5], initial }).unwrap();
            assert!((mass(&mesh, &c) - 1.0).abs() < 1e-14);
            // Rotation by 90° maps cell (i, j) to (n-1-j, i).
            for j in 0..20 {
                for i in 0..20 {
                    let a = c[j * 20 + i];
                    let b = c[i * 20 + (19 - j)];
                    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn gaussian_peaks_at_the_cell_containing_its_center() {
        let mesh = build_structured_triangular(16, 16, DiagonalPattern::Uniform);
        let c = project_density(&mesh, &DensitySource::Gaussian { center: [0.5, 0.1], s: 0.1 }).unwrap();
        let argmax = (0..c.len()).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
        // x0 lies on a facet; the maximum may sit on either side of it.
        let xh = mesh.affine_map(argmax).inverse([0.5, 0.1]);
        assert!(xh[0] >= -1e-12 && xh[1] >= -1e-12 && xh[0] + xh[1] <= 1.0 + 1e-12);
        let mesh = build_structured_quadrilateral(20, 20);
        let c = project_density(&mesh, &DensitySource::Gaussian { center: [0.53, 0.11], s: 0.1 }).unwrap();
        let argmax = (0..c.len()).max_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
        assert_eq!(Some(argmax), mesh.locate([0.53, 0.11]));
    }

    /// Mass over the unit square by a fine tensor Gauss rule, independent of the mesh.
    fn reference_mass(f: impl Fn([f64; 2]) -> f64) -> f64 {
        let n = 1000;
        let h = 1.0 / n as f64;
        let g = quadrature::gauss_unit(3);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                for &(x, wx) in &g {
                    for &(y, wy) in &g {
                        total += wx * wy * h * h * f([(i as f64 + x) * h, (j as f64 + y) * h]);
                    }
                }
            }
        }
        total
    }

    #[test]
    fn quadrature_preserves_mass_of_smooth_densities() {
        let sources = [
            DensitySource::Gaussian { center: [0.5, 0.1], s: 0.1 },
            DensitySource::CosinePair { center: [0.5, 0.5], initial: true },
            DensitySource::CosinePair { center: [0.5, 0.5], initial: false },
        ];
        let meshes = [
            build_structured_triangular(16, 16, DiagonalPattern::Uniform),
            build_structured_triangular(17, 16, DiagonalPattern::Alternating),
            build_structured_quadrilateral(16, 16),
        ];
        for src in &sources {
            let exact = reference_mass(|x| src.value(x).unwrap());
            for mesh in &meshes {
                let raw = cell_averages(mesh, src).unwrap();
                let m = mass(mesh, &raw);
                assert!((m - exact).abs() <= 1e-8 * exact, "{src:?}: {m} vs {exact}");
            }
        }
    }

    #[test]
    fn projection_is_monotone() {
        let mesh = build_structured_triangular(8, 8, DiagonalPattern::Uniform);
        let src = DensitySource::Function(Arc::new(|x: [f64; 2]| (x[0] - 0.3).max(0.0) * x[1]));
        let c = project_density(&mesh, &src).unwrap();
        assert!(c.iter().all(|&v| v >= 0.0));
        assert!(c.contains(&0.0));
    }

    #[test]
    fn invalid_sources_are_errors() {
        let mesh = build_structured_quadrilateral(2, 2);
        let zero = DensitySource::Function(Arc::new(|_| 0.0));
        assert!(project_density(&mesh, &zero).is_err());
        let nan = DensitySource::Function(Arc::new(|x: [f64; 2]| if x[0] > 0.5 { f64::NAN } else { 1.0 }));
        assert!(project_density(&mesh, &nan).unwrap_err().to_string().contains("non-finite"));
        assert!(project_density(&mesh, &DensitySource::CellTable(vec![1.0; 3])).is_err());
    }

    #[test]
    fn indicator_uses_exact_overlap() {
        let mesh = build_structured_quadrilateral(2, 2);
        let c = cell_averages(&mesh, &DensitySource::Indicator { lo: [0.25, 0.0], hi: [0.75, 0.5] }).unwrap();
        assert_eq!(c, vec![0.5, 0.5, 0.0, 0.0]);
        let tri = build_structured_triangular(1, 1, DiagonalPattern::Uniform);
        // Lower-right triangle (0,0),(1,0),(1,1) against x ≥ 1/2: area 3/8 of 1/2.
        let c = cell_averages(&tri, &DensitySource::Indicator { lo: [0.5, 0.0], hi: [1.0, 1.0] }).unwrap();
        assert!((c[0] - 0.75).abs() < 1e-15 && (c[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn raster_is_area_weighted_and_stretched() {
        // 2x1 image: left pixel 0, right pixel 255, over a 4x1 quad mesh.
        let img = RasterImage::new(2, 1, vec![0.0, 255.0]).unwrap();
        let mesh = build_structured_quadrilateral(4, 1);
        let c = cell_averages(&mesh, &DensitySource::Raster(img)).unwrap();
        assert_eq!(c, vec![0.0, 0.0, 255.0, 255.0]);
        let img = RasterImage::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mesh = build_structured_quadrilateral(1, 1);
        let c = cell_averages(&mesh, &DensitySource::Raster(img)).unwrap();
        assert!((c[0] - 3.5).abs() < 1e-14);
    }

    #[test]
    fn pgm_files_are_read_top_row_first() {
        let dir = tempfile::tempdir().unwrap();
        let ascii = dir.path().join("a.pgm");
        std::fs::write(&ascii, "P2\n2 2\n255\n0 10\n20 30\n").unwrap();
        let img = RasterImage::load_pgm(&ascii).unwrap();
        assert_eq!(img.pixels, vec![0.0, 10.0, 20.0, 30.0]);
        let binary = dir.path().join("b.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 200]);
        std::fs::write(&binary, bytes).unwrap();
        assert_eq!(RasterImage::load_pgm(&binary).unwrap().pixels, vec![7.0, 200.0]);
        let mesh = build_structured_quadrilateral(1, 2);
        let c = cell_averages(&mesh, &DensitySource::Raster(img)).unwrap();
        // Bottom cell sees the bottom image row.
        assert_eq!(c, vec![25.0, 5.0]);
    }
}
