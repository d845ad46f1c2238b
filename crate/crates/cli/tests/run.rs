use std::fs;
use std::path::Path;

use mixot::fespace::{DualOrder, VelocityFamily};
use mixot::mesh::DiagonalPattern;
use mixot::solver::Backend;
use mixot_cli::run::{project_test, snapshot_nodes};
use mixot_cli::{
    run_dual_comparison, run_refinement_study, run_solve, CliError, DensitySpec, MeshSource, RunConfig, StudyReference,
};

fn cosine_config(dir: &Path, n: usize, iters: usize) -> RunConfig {
    RunConfig {
        mesh: MeshSource::Quads { nx: n, ny: n },
        steps: n,
        family: VelocityFamily::Rtq0,
        dual: DualOrder::P1,
        max_iters: iters,
        backend: Backend::TimeModes,
        output_dir: dir.to_path_buf(),
        log_every: 0,
        ..RunConfig::default()
    }
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn cosine_run_writes_midpoint_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cosine_config(tmp.path(), 20, 30);
    let out = run_solve(&cfg).unwrap();
    assert_eq!(out.report.iterations, 30);
    for name in ["density_0000.vtk", "density_0010.vtk", "density_0020.vtk", "config.txt"] {
        assert!(tmp.path().join(name).is_file(), "{name}");
    }
    let csv = fs::read_to_string(tmp.path().join("convergence.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header, ["iter", "delta_sigma", "delta_q", "duality", "action", "min_rho"]);
    assert_eq!(csv.lines().count(), 31);
    let s = summary(tmp.path());
    assert_eq!(s["iterations"], 30);
    assert!(s["wasserstein"].as_f64().unwrap() > 0.0);
    assert!(s["mass_error"].as_f64().unwrap() <= 1e-10);
    assert!(s["timings"]["step1"].as_f64().is_some());
    assert_eq!(RunConfig::load(&tmp.path().join("config.txt")).unwrap(), cfg);
}

#[test]
fn equal_endpoints_give_zero_distance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        rho0: DensitySpec::Gaussian { center: [0.4, 0.6], s: 0.2 },
        rho1: DensitySpec::Gaussian { center: [0.4, 0.6], s: 0.2 },
        ..cosine_config(tmp.path(), 8, 50)
    };
    run_solve(&cfg).unwrap();
    assert!(summary(tmp.path())["wasserstein"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn invalid_pair_fails_before_solving() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("never");
    let cfg = RunConfig { family: VelocityFamily::Rt0, ..cosine_config(&dir, 4, 10) };
    let err = run_solve(&cfg).err().unwrap();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.exists());
}

#[test]
fn momentum_and_cadence_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig { snapshot_every: 3, export_momentum: true, ..cosine_config(tmp.path(), 4, 5) };
    run_solve(&cfg).unwrap();
    let mut names: Vec<String> =
        fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let vtk: Vec<&str> = names.iter().map(String::as_str).filter(|n| n.ends_with(".vtk")).collect();
    assert_eq!(
        vtk,
        [
            "density_0000.vtk",
            "density_0002.vtk",
            "density_0003.vtk",
            "density_0004.vtk",
            "momentum_0000.vtk",
            "momentum_0001.vtk",
            "momentum_0002.vtk",
            "momentum_0003.vtk"
        ]
    );
}

#[test]
fn snapshot_node_selection() {
    let t = mixot::mesh::TimeGrid::uniform(20);
    assert_eq!(snapshot_nodes(&t, 0), vec![0, 10, 20]);
    assert_eq!(snapshot_nodes(&t, 8), vec![0, 8, 10, 16, 20]);
}

#[test]
fn outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = cosine_config(a.path(), 6, 20);
    cfg.export_momentum = true;
    run_solve(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    run_solve(&cfg).unwrap();
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let (x, y) = (fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        if name == "summary.json" {
            let strip = |bytes: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                v.as_object_mut().unwrap().remove("timings");
                v
            };
            assert_eq!(strip(&x), strip(&y));
        } else if name == "config.txt" {
            assert_eq!(
                String::from_utf8(x).unwrap().replace(&a.path().display().to_string(), ""),
                String::from_utf8(y).unwrap().replace(&b.path().display().to_string(), "")
            );
        } else {
            assert!(x == y, "{name:?} differs");
        }
    }
}

#[test]
fn stationary_study_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let base = RunConfig {
        mesh: MeshSource::Triangles { nx: 4, ny: 4, pattern: DiagonalPattern::Alternating },
        family: VelocityFamily::Rt0,
        steps: 2,
        rho0: DensitySpec::Cosine { center: [0.5, 0.5], initial: true },
        rho1: DensitySpec::Cosine { center: [0.5, 0.5], initial: true },
        ..cosine_config(tmp.path(), 4, 40)
    };
    let rows = run_refinement_study(&base, &[8, 2, 4], StudyReference::Finest).unwrap();
    assert_eq!(rows.iter().map(|r| r.level).collect::<Vec<_>>(), [2, 4, 8]);
    assert!(rows.windows(2).all(|w| w[0].h > w[1].h));
    assert_eq!(rows.iter().map(|r| r.tau).collect::<Vec<_>>(), [1.0, 0.5, 0.25]);
    assert!(rows.iter().all(|r| r.error <= 1e-6), "{rows:?}");
    let csv = fs::read_to_string(tmp.path().join("study.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(tmp.path().join("level_8/summary.json").is_file());
}

#[test]
fn translation_study_error_decreases() {
    let tmp = tempfile::tempdir().unwrap();
    let base = RunConfig {
        rho0: DensitySpec::Gaussian { center: [0.3, 0.5], s: 0.1 },
        rho1: DensitySpec::Gaussian { center: [0.7, 0.5], s: 0.1 },
        steps: 8,
        stop_tol: 0.0,
        ..cosine_config(tmp.path(), 16, 5000)
    };
    let rows = run_refinement_study(&base, &[4, 8, 16], StudyReference::Analytic(0.4)).unwrap();
    assert!(rows.windows(2).all(|w| w[1].error < w[0].error), "{rows:?}");
}

#[test]
fn dual_comparison_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = cosine_config(tmp.path(), 4, 10);
    let c = run_dual_comparison(&cfg, 20, 60).unwrap();
    assert_eq!(c.residual_p0.len(), 20);
    assert_eq!(c.residual_p1.len(), 20);
    assert!(c.residual_p0.iter().chain(&c.residual_p1).all(|r| r.is_finite() && *r >= 0.0));
    let csv = fs::read_to_string(tmp.path().join("dual_comparison.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iter,residual_p0,residual_p1"));
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn projection_checks_pass() {
    let tmp = tempfile::tempdir().unwrap();
    for cfg in [
        cosine_config(tmp.path(), 4, 1),
        RunConfig {
            mesh: MeshSource::Triangles { nx: 3, ny: 3, pattern: DiagonalPattern::Uniform },
            family: VelocityFamily::Bdm1,
            dual: DualOrder::P0,
            backend: Backend::Direct,
            ..cosine_config(tmp.path(), 3, 1)
        },
    ] {
        let checks = project_test(&cfg).unwrap();
        assert_eq!(checks.len(), 6);
        for c in checks {
            assert!(c.passed(), "{c:?}");
        }
    }
}
