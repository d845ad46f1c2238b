//! Run configuration in a flat `section.key = value` text format.
//!
//! ```text
//! mesh.kind = quad
//! mesh.nx = 20
//! mesh.ny = 20
//! problem.steps = 20
//! problem.family = rtq0
//! problem.dual = p1
//! problem.rho0 = cosine(0.5, 0.5, initial)
//! problem.rho1 = cosine(0.5, 0.5, final)
//! reg.kind = none
//! solver.max_iters = 10000
//! output.dir = out/cosine
//! ```
//!
//! Lines starting with `#` are comments. Missing keys take the defaults of
//! [`RunConfig::default`].

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mixot::assembly::Regularization;
use mixot::density::{DensitySource, RasterImage};
use mixot::fespace::{DualOrder, SpaceConfig, VelocityFamily};
use mixot::mesh::{
    build_structured_quadrilateral, build_structured_triangular, load_mesh, CellKind, DiagonalPattern, SpatialMesh,
};
use mixot::solver::Backend;
use mixot::transport::{DualProjection, Initialization, PdhgConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    Triangles { nx: usize, ny: usize, pattern: DiagonalPattern },
    Quads { nx: usize, ny: usize },
    File(PathBuf),
}

impl MeshSource {
    /// Cell kind, when known without reading a file.
    pub fn kind(&self) -> Option<CellKind> {
        match self {
            MeshSource::Triangles { .. } => Some(CellKind::Simplex),
            MeshSource::Quads { .. } => Some(CellKind::Quad),
            MeshSource::File(_) => None,
        }
    }

    pub fn build(&self) -> Result<SpatialMesh, CliError> {
        Ok(match self {
            MeshSource::Triangles { nx, ny, pattern } => build_structured_triangular(*nx, *ny, *pattern),
            MeshSource::Quads { nx, ny } => build_structured_quadrilateral(*nx, *ny),
            MeshSource::File(path) => {
                load_mesh(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
            }
        })
    }

    /// The same generator at `n × n` cells; file meshes cannot be refined.
    pub fn at_level(&self, n: usize) -> Result<MeshSource, CliError> {
        match self {
            MeshSource::Triangles { pattern, .. } => Ok(MeshSource::Triangles { nx: n, ny: n, pattern: *pattern }),
            MeshSource::Quads { .. } => Ok(MeshSource::Quads { nx: n, ny: n }),
            MeshSource::File(p) => Err(CliError::config(format!("cannot refine file mesh {}", p.display()))),
        }
    }
}

/// Density catalog entry, written as `name(args)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DensitySpec {
    Uniform,
    Gaussian {
        center: [f64; 2],
        s: f64,
    },
    Cosine {
        center: [f64; 2],
        initial: bool,
    },
    Indicator {
        lo: [f64; 2],
        hi: [f64; 2],
    },
    /// Binary or ASCII PGM image stretched over the mesh bounding box.
    Raster(PathBuf),
}

impl DensitySpec {
    pub fn source(&self) -> Result<DensitySource, CliError> {
        Ok(match self {
            DensitySpec::Uniform => DensitySource::Uniform,
            DensitySpec::Gaussian { center, s } => DensitySource::Gaussian { center: *center, s: *s },
            DensitySpec::Cosine { center, initial } => DensitySource::CosinePair { center: *center, initial: *initial },
            DensitySpec::Indicator { lo, hi } => DensitySource::Indicator { lo: *lo, hi: *hi },
            DensitySpec::Raster(path) => DensitySource::Raster(
                RasterImage::load_pgm(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?,
            ),
        })
    }
}

impl fmt::Display for DensitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensitySpec::Uniform => write!(f, "uniform"),
            DensitySpec::Gaussian { center, s } => write!(f, "gaussian({}, {}, {})", center[0], center[1], s),
            DensitySpec::Cosine { center, initial } => {
                write!(f, "cosine({}, {}, {})", center[0], center[1], if *initial { "initial" } else { "final" })
            }
            DensitySpec::Indicator { lo, hi } => write!(f, "indicator({}, {}, {}, {})", lo[0], lo[1], hi[0], hi[1]),
            DensitySpec::Raster(p) => write!(f, "raster({})", p.display()),
        }
    }
}

impl FromStr for DensitySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..].strip_suffix(')').ok_or_else(|| format!("missing `)` in density `{s}`"))?;
                (s[..open].trim(), inner.split(',').map(str::trim).collect::<Vec<_>>())
            }
            None => (s, Vec::new()),
        };
        let nums = |n: usize| -> Result<Vec<f64>, String> {
            if args.len() != n {
                return Err(format!("`{name}` takes {n} arguments, got {}", args.len()));
            }
            args.iter().map(|a| a.parse::<f64>().map_err(|e| format!("`{a}`: {e}"))).collect()
        };
        match name {
            "uniform" if args.is_empty() => Ok(DensitySpec::Uniform),
            "gaussian" => {
                let v = nums(3)?;
                if !(v[2] > 0.0) {
                    return Err(format!("gaussian width must be positive, got {}", v[2]));
                }
                Ok(DensitySpec::Gaussian { center: [v[0], v[1]], s: v[2] })
            }
            "cosine" => {
                if args.len() != 3 {
                    return Err(format!("`cosine` takes 3 arguments, got {}", args.len()));
                }
                let initial = match args[2] {
                    "initial" => true,
                    "final" => false,
                    other => return Err(format!("cosine end must be `initial` or `final`, got `{other}`")),
                };
                let x: f64 = args[0].parse().map_err(|e| format!("`{}`: {e}", args[0]))?;
                let y: f64 = args[1].parse().map_err(|e| format!("`{}`: {e}", args[1]))?;
                Ok(DensitySpec::Cosine { center: [x, y], initial })
            }
            "indicator" => {
                let v = nums(4)?;
                if !(v[0] < v[2] && v[1] < v[3]) {
                    return Err(format!("empty indicator box in `{s}`"));
                }
                Ok(DensitySpec::Indicator { lo: [v[0], v[1]], hi: [v[2], v[3]] })
            }
            "raster" if args.len() == 1 && !args[0].is_empty() => Ok(DensitySpec::Raster(PathBuf::from(args[0]))),
            _ => Err(format!("unknown density `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh: MeshSource,
    /// Number of time intervals.
    pub steps: usize,
    pub family: VelocityFamily,
    pub dual: DualOrder,
    pub rho0: DensitySpec,
    pub rho1: DensitySpec,
    pub regularization: Regularization,
    pub tau1: f64,
    pub tau2: f64,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub backend: Backend,
    pub dual_projection: DualProjection,
    pub init: Initialization,
    pub output_dir: PathBuf,
    /// Time-node stride between density snapshots; 0 writes only the end
    /// points and the midpoint.
    pub snapshot_every: usize,
    /// Also write cell-averaged momentum for every interval.
    pub export_momentum: bool,
    /// Iterations between progress log lines.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pdhg = PdhgConfig::default();
        Self {
            mesh: MeshSource::Quads { nx: 20, ny: 20 },
            steps: 20,
            family: VelocityFamily::Rtq0,
            dual: DualOrder::P1,
            rho0: DensitySpec::Cosine { center: [0.5, 0.5], initial: true },
            rho1: DensitySpec::Cosine { center: [0.5, 0.5], initial: false },
            regularization: Regularization::None,
            tau1: pdhg.tau1,
            tau2: pdhg.tau2,
            max_iters: pdhg.max_iters,
            stop_tol: pdhg.stop_tol,
            backend: pdhg.backend,
            dual_projection: pdhg.dual_projection,
            init: pdhg.init,
            output_dir: PathBuf::from("mixot-out"),
            snapshot_every: 0,
            export_momentum: false,
            log_every: 100,
        }
    }
}

fn family_name(f: VelocityFamily) -> &'static str {
    match f {
        VelocityFamily::Rt0 => "rt0",
        VelocityFamily::Bdm1 => "bdm1",
        VelocityFamily::Rtq0 => "rtq0",
    }
}

fn backend_name(b: Backend) -> String {
    match b {
        Backend::Direct => "direct".into(),
        Backend::DirectLu => "lu".into(),
        Backend::TimeModes => "time-modes".into(),
        Backend::Iterative { tol, max_iter } => format!("minres({tol}, {max_iter})"),
    }
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "direct" => Ok(Backend::Direct),
        "lu" => Ok(Backend::DirectLu),
        "time-modes" => Ok(Backend::TimeModes),
        "minres" => Ok(Backend::iterative()),
        _ => {
            let inner = s
                .strip_prefix("minres(")
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| format!("unknown backend `{s}`"))?;
            let (tol, it) =
                inner.split_once(',').ok_or_else(|| format!("expected minres(tol, max_iter), got `{s}`"))?;
            Ok(Backend::Iterative {
                tol: tol.trim().parse().map_err(|e| format!("`{tol}`: {e}"))?,
                max_iter: it.trim().parse().map_err(|e| format!("`{it}`: {e}"))?,
            })
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| format!("{key}: `{v}`: {e}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let (mut kind, mut nx, mut ny, mut pattern, mut path) = (None, None, None, DiagonalPattern::Uniform, None);
        let (mut reg_kind, mut alpha) = ("none".to_string(), 0.0);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CliError::config(format!("line {}: {msg}", n + 1));
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, v) = (key.trim(), value.trim());
            let r: Result<(), String> = (|| {
                match key {
                    "mesh.kind" => kind = Some(v.to_string()),
                    "mesh.nx" => nx = Some(parse_num::<usize>(key, v)?),
                    "mesh.ny" => ny = Some(parse_num::<usize>(key, v)?),
                    "mesh.pattern" => {
                        pattern = match v {
                            "uniform" => DiagonalPattern::Uniform,
                            "alternating" => DiagonalPattern::Alternating,
                            _ => return Err(format!("unknown diagonal pattern `{v}`")),
                        }
                    }
                    "mesh.path" => path = Some(PathBuf::from(v)),
                    "problem.steps" => cfg.steps = parse_num(key, v)?,
                    "problem.family" => {
                        cfg.family = match v {
                            "rt0" => VelocityFamily::Rt0,
                            "bdm1" => VelocityFamily::Bdm1,
                            "rtq0" => VelocityFamily::Rtq0,
                            _ => return Err(format!("unknown velocity family `{v}`")),
                        }
                    }
                    "problem.dual" => {
                        cfg.dual = match v {
                            "p0" => DualOrder::P0,
                            "p1" => DualOrder::P1,
                            _ => return Err(format!("unknown dual order `{v}`")),
                        }
                    }
                    "problem.rho0" => cfg.rho0 = v.parse()?,
                    "problem.rho1" => cfg.rho1 = v.parse()?,
                    "reg.kind" => reg_kind = v.to_string(),
                    "reg.alpha" => alpha = parse_num(key, v)?,
                    "solver.tau1" => cfg.tau1 = parse_num(key, v)?,
                    "solver.tau2" => cfg.tau2 = parse_num(key, v)?,
                    "solver.max_iters" => cfg.max_iters = parse_num(key, v)?,
                    "solver.stop_tol" => cfg.stop_tol = parse_num(key, v)?,
                    "solver.backend" => cfg.backend = parse_backend(v)?,
                    "solver.dual_projection" => {
                        cfg.dual_projection = match v {
                            "vertexwise" => DualProjection::Vertexwise,
                            "exact-l2" => DualProjection::ExactL2,
                            _ => return Err(format!("unknown dual projection `{v}`")),
                        }
                    }
                    "solver.init" => {
                        cfg.init = match v {
                            "interpolation" => Initialization::Interpolation,
                            "minimal-norm" => Initialization::MinimalNorm,
                            _ => return Err(format!("unknown initialization `{v}`")),
                        }
                    }
                    "output.dir" => cfg.output_dir = PathBuf::from(v),
                    "output.snapshot_every" => cfg.snapshot_every = parse_num(key, v)?,
                    "output.momentum" => cfg.export_momentum = parse_num(key, v)?,
                    "output.log_every" => cfg.log_every = parse_num(key, v)?,
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        if let Some(kind) = kind {
            cfg.mesh = match kind.as_str() {
                "tri" => MeshSource::Triangles { nx: nx.unwrap_or(20), ny: ny.or(nx).unwrap_or(20), pattern },
                "quad" => MeshSource::Quads { nx: nx.unwrap_or(20), ny: ny.or(nx).unwrap_or(20) },
                "file" => MeshSource::File(path.ok_or_else(|| CliError::config("mesh.kind = file needs mesh.path"))?),
                other => return Err(CliError::config(format!("unknown mesh kind `{other}`"))),
            };
        }
        cfg.regularization = match reg_kind.as_str() {
            "none" => Regularization::None,
            "l2" => Regularization::L2 { alpha },
            "h1" => Regularization::H1 { alpha },
            other => return Err(CliError::config(format!("unknown regularization `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks everything that can be checked without building the problem.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::config(m));
        match &self.mesh {
            MeshSource::Triangles { nx, ny, .. } | MeshSource::Quads { nx, ny } if *nx == 0 || *ny == 0 => {
                return bad(format!("mesh size must be positive, got {nx} x {ny}"));
            }
            _ => {}
        }
        if self.steps == 0 {
            return bad("problem.steps must be positive".into());
        }
        if let Some(kind) = self.mesh.kind() {
            SpaceConfig::new(self.family, self.dual).check_mesh(kind).map_err(|e| CliError::config(e.to_string()))?;
        }
        let alpha = self.regularization.alpha();
        if self.regularization != Regularization::None && !(alpha > 0.0 && alpha.is_finite()) {
            return bad(format!("reg.alpha must be positive, got {alpha}"));
        }
        for (name, v) in [("solver.tau1", self.tau1), ("solver.tau2", self.tau2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.stop_tol >= 0.0) {
            return bad(format!("solver.stop_tol must be nonnegative, got {}", self.stop_tol));
        }
        if self.max_iters == 0 {
            return bad("solver.max_iters must be positive".into());
        }
        Ok(())
    }

    pub fn pdhg(&self) -> PdhgConfig {
        PdhgConfig {
            tau1: self.tau1,
            tau2: self.tau2,
            max_iters: self.max_iters,
            stop_tol: self.stop_tol,
            backend: self.backend,
            dual_projection: self.dual_projection,
            init: self.init,
            ..PdhgConfig::default()
        }
    }

    /// Output directory, resolved against `MIXOT_OUTPUT_ROOT` when that is set
    /// and the configured path is relative.
    pub fn resolved_output(&self) -> PathBuf {
        match std::env::var_os(crate::OUTPUT_ROOT_VAR) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.mesh {
            MeshSource::Triangles { nx, ny, pattern } => {
                kv("mesh.kind", "tri".into());
                kv("mesh.nx", nx.to_string());
                kv("mesh.ny", ny.to_string());
                let p = match pattern {
                    DiagonalPattern::Uniform => "uniform",
                    DiagonalPattern::Alternating => "alternating",
                };
                kv("mesh.pattern", p.into());
            }
            MeshSource::Quads { nx, ny } => {
                kv("mesh.kind", "quad".into());
                kv("mesh.nx", nx.to_string());
                kv("mesh.ny", ny.to_string());
            }
            MeshSource::File(p) => {
                kv("mesh.kind", "file".into());
                kv("mesh.path", p.display().to_string());
            }
        }
        kv("problem.steps", self.steps.to_string());
        kv("problem.family", family_name(self.family).into());
        kv("problem.dual", if self.dual == DualOrder::P0 { "p0" } else { "p1" }.into());
        kv("problem.rho0", self.rho0.to_string());
        kv("problem.rho1", self.rho1.to_string());
        let (reg, alpha) = match self.regularization {
            Regularization::None => ("none", None),
            Regularization::L2 { alpha } => ("l2", Some(alpha)),
            Regularization::H1 { alpha } => ("h1", Some(alpha)),
        };
        kv("reg.kind", reg.into());
        if let Some(a) = alpha {
            kv("reg.alpha", a.to_string());
        }
        kv("solver.tau1", self.tau1.to_string());
        kv("solver.tau2", self.tau2.to_string());
        kv("solver.max_iters", self.max_iters.to_string());
        kv("solver.stop_tol", self.stop_tol.to_string());
        kv("solver.backend", backend_name(self.backend));
        let proj = match self.dual_projection {
            DualProjection::Vertexwise => "vertexwise",
            DualProjection::ExactL2 => "exact-l2",
        };
        kv("solver.dual_projection", proj.into());
        let init = match self.init {
            Initialization::Interpolation => "interpolation",
            Initialization::MinimalNorm => "minimal-norm",
        };
        kv("solver.init", init.into());
        kv("output.dir", self.output_dir.display().to_string());
        kv("output.snapshot_every", self.snapshot_every.to_string());
        kv("output.momentum", self.export_momentum.to_string());
        kv("output.log_every", self.log_every.to_string());
        s
    }
}
