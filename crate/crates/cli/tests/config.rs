use std::path::PathBuf;

use mixot::assembly::Regularization;
use mixot::fespace::{DualOrder, VelocityFamily};
use mixot::mesh::DiagonalPattern;
use mixot::solver::Backend;
use mixot::transport::{DualProjection, Initialization};
use mixot_cli::{CliError, DensitySpec, MeshSource, RunConfig};
use proptest::prelude::*;

#[test]
fn default_round_trips() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn parses_documented_example() {
    let text = "\
# cosine pair
mesh.kind = quad
mesh.nx = 20
problem.steps = 20
problem.family = rtq0
problem.dual = p1
problem.rho0 = cosine(0.5, 0.5, initial)
problem.rho1 = cosine(0.5, 0.5, final)
reg.kind = h1
reg.alpha = 0.002
solver.backend = minres(1e-12, 500)
output.dir = out/cosine
";
    let cfg = RunConfig::parse(text).unwrap();
    assert_eq!(cfg.mesh, MeshSource::Quads { nx: 20, ny: 20 });
    assert_eq!(cfg.steps, 20);
    assert_eq!(cfg.rho1, DensitySpec::Cosine { center: [0.5, 0.5], initial: false });
    assert_eq!(cfg.regularization, Regularization::H1 { alpha: 0.002 });
    assert_eq!(cfg.backend, Backend::Iterative { tol: 1e-12, max_iter: 500 });
    assert_eq!(cfg.output_dir, PathBuf::from("out/cosine"));
}

#[test]
fn rejects_family_mesh_mismatch() {
    for text in [
        "mesh.kind = quad\nproblem.family = rt0\n",
        "mesh.kind = quad\nproblem.family = bdm1\n",
        "mesh.kind = tri\nproblem.family = rtq0\n",
    ] {
        let err = RunConfig::parse(text).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{text}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
    assert!(RunConfig::parse("mesh.kind = tri\nproblem.family = bdm1\nproblem.dual = p0\n").is_ok());
}

#[test]
fn reports_line_of_bad_entry() {
    let err = RunConfig::parse("mesh.kind = quad\n\nsolver.tau1 = fast\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    for text in [
        "solver.colour = red\n",
        "mesh.kind = hex\n",
        "no equals sign\n",
        "reg.kind = l2\n",
        "reg.kind = l2\nreg.alpha = -1\n",
        "solver.tau2 = 0\n",
        "problem.steps = 0\n",
        "mesh.kind = file\n",
        "mesh.kind = quad\nmesh.nx = 0\n",
    ] {
        assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))), "{text}");
    }
}

#[test]
fn density_specs() {
    let cases = [
        ("uniform", DensitySpec::Uniform),
        ("gaussian(0.5, 0.1, 0.1)", DensitySpec::Gaussian { center: [0.5, 0.1], s: 0.1 }),
        ("indicator(0.1,0.35,0.4,0.65)", DensitySpec::Indicator { lo: [0.1, 0.35], hi: [0.4, 0.65] }),
        ("cosine(0.5, 0.5, initial)", DensitySpec::Cosine { center: [0.5, 0.5], initial: true }),
        ("raster(img/a.pgm)", DensitySpec::Raster(PathBuf::from("img/a.pgm"))),
    ];
    for (text, spec) in cases {
        assert_eq!(text.parse::<DensitySpec>().unwrap(), spec);
        assert_eq!(spec.to_string().parse::<DensitySpec>().unwrap(), spec);
    }
    for bad in
        ["gaussian(0.5, 0.5)", "gaussian(0.5,0.5,0)", "indicator(1,0,0,1)", "cosine(0,0,middle)", "blob", "uniform(1)"]
    {
        assert!(bad.parse::<DensitySpec>().is_err(), "{bad}");
    }
}

fn coord() -> impl Strategy<Value = f64> {
    -2.0f64..2.0
}

fn density() -> impl Strategy<Value = DensitySpec> {
    prop_oneof![
        Just(DensitySpec::Uniform),
        (coord(), coord(), 1e-3f64..1.0).prop_map(|(x, y, s)| DensitySpec::Gaussian { center: [x, y], s }),
        (coord(), coord(), any::<bool>()).prop_map(|(x, y, initial)| DensitySpec::Cosine { center: [x, y], initial }),
        (coord(), coord(), 1e-3f64..1.0, 1e-3f64..1.0)
            .prop_map(|(x, y, w, h)| DensitySpec::Indicator { lo: [x, y], hi: [x + w, y + h] }),
        "[a-z]{1,8}\\.pgm".prop_map(|p| DensitySpec::Raster(PathBuf::from(p))),
    ]
}

fn config() -> impl Strategy<Value = RunConfig> {
    let mesh = prop_oneof![
        (1usize..64, 1usize..64, any::<bool>()).prop_map(|(nx, ny, alt)| {
            let pattern = if alt { DiagonalPattern::Alternating } else { DiagonalPattern::Uniform };
            (MeshSource::Triangles { nx, ny, pattern }, VelocityFamily::Rt0)
        }),
        (1usize..64, 1usize..64).prop_map(|(nx, ny)| (MeshSource::Quads { nx, ny }, VelocityFamily::Rtq0)),
        "[a-z]{1,8}\\.mesh".prop_map(|p| (MeshSource::File(PathBuf::from(p)), VelocityFamily::Bdm1)),
    ];
    let reg = prop_oneof![
        Just(Regularization::None),
        (1e-6f64..1.0).prop_map(|alpha| Regularization::L2 { alpha }),
        (1e-6f64..1.0).prop_map(|alpha| Regularization::H1 { alpha }),
    ];
    let backend = prop_oneof![
        Just(Backend::Direct),
        Just(Backend::DirectLu),
        Just(Backend::TimeModes),
        (1e-14f64..1e-6, 1usize..10_000).prop_map(|(tol, max_iter)| Backend::Iterative { tol, max_iter }),
    ];
    (
        (mesh, 1usize..100, any::<bool>(), density(), density(), reg),
        (1e-3f64..10.0, 1e-3f64..10.0, 1usize..100_000, 0.0f64..1e-3, backend),
        (any::<bool>(), any::<bool>(), "[a-z]{1,6}(/[a-z]{1,6})?", 0usize..10, any::<bool>(), 0usize..1000),
    )
        .prop_map(|((mesh, steps, p1, rho0, rho1, reg), (tau1, tau2, max_iters, stop_tol, backend), rest)| {
            let (exact, minimal, dir, snapshot_every, export_momentum, log_every) = rest;
            RunConfig {
                mesh: mesh.0,
                steps,
                family: mesh.1,
                dual: if p1 { DualOrder::P1 } else { DualOrder::P0 },
                rho0,
                rho1,
                regularization: reg,
                tau1,
                tau2,
                max_iters,
                stop_tol,
                backend,
                dual_projection: if exact { DualProjection::ExactL2 } else { DualProjection::Vertexwise },
                init: if minimal { Initialization::MinimalNorm } else { Initialization::Interpolation },
                output_dir: PathBuf::from(dir),
                snapshot_every,
                export_momentum,
                log_every,
            }
        })
}

proptest! {
    #[test]
    fn parse_inverts_serialize(cfg in config()) {
        let text = cfg.to_text();
        prop_assert_eq!(RunConfig::parse(&text).unwrap(), cfg.clone());
        prop_assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
    }
}

#[test]
fn shipped_configs_are_valid() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        n += 1;
    }
    assert_eq!(n, 4);
}
