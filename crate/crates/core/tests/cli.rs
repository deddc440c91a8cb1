//! End-to-end behaviour of the `cavity-xf` binary on a short configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use cavity_xf::config::{RunConfig, OUTPUT_ENV};
use cavity_xf::io;

const SMALL: &str = r#"
[quantum]
t_final = 4.0

[ensemble]
n = 300
dump_stride = 1.0
methods = ["mte-diabatic", "wbo", "qtdpes"]

[output]
overlay_times = [1.0, 2.0]
"#;

fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cavity-xf"));
    cmd.env_remove(OUTPUT_ENV);
    cmd
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn run_pipeline(config: &Path, out: &Path, via_env: bool) {
    let mut cmd = binary();
    cmd.arg("run").arg("--config").arg(config);
    if via_env {
        cmd.env(OUTPUT_ENV, out);
    } else {
        cmd.arg("--output").arg(out);
    }
    let status = cmd.output().unwrap();
    assert!(
        status.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

#[test]
fn pipeline_outputs_are_reproducible_and_traceable() {
    let work = tempfile::tempdir().unwrap();
    let config = write_config(work.path(), SMALL);
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    run_pipeline(&config, &a, false);
    let first = tree(&a);
    run_pipeline(&config, &a, false);
    assert_eq!(
        first,
        tree(&a),
        "rerun into the same root changed some output"
    );

    // a different root via the environment: identical apart from the
    // recorded output directory
    run_pipeline(&config, &b, true);
    let second = tree(&b);
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &first {
        if name != Path::new("effective_config.toml") {
            assert!(
                bytes == &second[name],
                "{} differs between output roots",
                name.display()
            );
        }
    }

    for expected in [
        "exact/snapshots.bin",
        "exact/observables.csv",
        "exact/densities.csv",
        "surfaces/surfaces.bin",
        "surfaces/frames.csv",
        "qsurf/qtdpes/closure.csv",
        "qsurf/wbo/observables.csv",
        "traj/mte-diabatic/phase_space.csv",
        "traj/qtdpes/manifest.json",
        "report/report.json",
        "report/report.txt",
        "report/overlay_t1.csv",
        "report/plots.json",
    ] {
        assert!(
            first.contains_key(Path::new(expected)),
            "missing {expected}"
        );
    }

    // the effective config is re-ingestible and fully resolved
    let effective = RunConfig::load(&a.join("effective_config.toml")).unwrap();
    assert_eq!(effective.quantum.t_final, Some(4.0));
    assert_eq!(effective.ensemble.n, 300);
    assert_eq!(effective.output.dir, a);
    let digest = effective.digest();

    // provenance: every text output names its inputs
    let surfaces_sha = io::sha256_file(&a.join("surfaces/surfaces.bin")).unwrap();
    let snapshots_sha = io::sha256_file(&a.join("exact/snapshots.bin")).unwrap();
    for (name, bytes) in &first {
        let ext = name.extension().and_then(|e| e.to_str());
        let text = String::from_utf8_lossy(bytes);
        match ext {
            Some("csv") | Some("txt") => {
                assert!(
                    text.contains(&format!("# input config sha256={digest}")),
                    "{} lacks the config hash",
                    name.display()
                );
            }
            Some("bin") => assert!(
                text.contains(&digest),
                "{} lacks the config hash",
                name.display()
            ),
            _ => {}
        }
    }
    let surf = String::from_utf8_lossy(&first[Path::new("surfaces/frames.csv")]).into_owned();
    assert!(surf.contains(&format!("# input snapshots sha256={snapshots_sha}")));
    for file in [
        "qsurf/qtdpes/observables.csv",
        "traj/qtdpes/observables.csv",
        "traj/wbo/densities.csv",
    ] {
        let text = String::from_utf8_lossy(&first[Path::new(file)]).into_owned();
        assert!(
            text.contains(&format!("# input surfaces sha256={surfaces_sha}")),
            "{file}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&first[Path::new("traj/qtdpes/manifest.json")]).unwrap();
    assert_eq!(manifest["surface_sha256"], surfaces_sha.as_str());
    assert_eq!(manifest["seed"], 20_190_901);
}

#[test]
fn stages_can_run_one_at_a_time() {
    let work = tempfile::tempdir().unwrap();
    let config = write_config(work.path(), SMALL);
    let out = work.path().join("out");
    let stage = |args: &[&str]| {
        let o = binary()
            .args(args)
            .arg("--config")
            .arg(&config)
            .arg("--output")
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    stage(&["exact"]);
    stage(&["invert"]);
    stage(&["qsurf", "--component", "qtdpes"]);
    stage(&["traj", "--method", "mte-qbo"]);
    let exact = out.join("exact/observables.csv");
    let qsurf = out.join("qsurf/qtdpes/observables.csv");
    let o = binary()
        .arg("report")
        .arg(&exact)
        .arg(&qsurf)
        .arg("--output")
        .arg(&out)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(o.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report/report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["reference"], "exact");
    assert_eq!(report["report"]["comparisons"].as_array().unwrap().len(), 3);
}

#[test]
fn single_series_report_is_degenerate_with_a_warning() {
    let work = tempfile::tempdir().unwrap();
    let config = write_config(work.path(), SMALL);
    let out = work.path().join("out");
    let o = binary()
        .args(["exact", "--output"])
        .arg(&out)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = binary()
        .arg("report")
        .arg(out.join("exact/observables.csv"))
        .arg("--output")
        .arg(&out)
        .arg("--config")
        .arg(&config)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: only one series"));
}

fn exit_code(args: &[&str], config: Option<&str>) -> i32 {
    let work = tempfile::tempdir().unwrap();
    let mut cmd = binary();
    cmd.args(args).arg("--output").arg(work.path().join("out"));
    if let Some(text) = config {
        cmd.arg("--config").arg(write_config(work.path(), text));
    }
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes_follow_the_contract() {
    assert_eq!(exit_code(&["selftest"], None), 0);
    // configuration problems
    assert_eq!(exit_code(&["exact"], Some("[quantum\n")), 2);
    assert_eq!(exit_code(&["exact"], Some("[quantum]\ndt_typo = 0.1\n")), 2);
    assert_eq!(exit_code(&["exact"], Some("[quantum]\ndt = -0.1\n")), 2);
    assert_eq!(
        exit_code(&["exact"], Some("[model]\nomega_c = \"fast\"\n")),
        2
    );
    assert_eq!(exit_code(&["invert"], None), 2);
    assert_eq!(exit_code(&["traj", "--method", "qtdpes"], None), 2);
    assert_eq!(exit_code(&["traj", "--method", "nonsense"], None), 2);
    // a grid that cannot hold the vacuum is rejected up front
    let narrow = "[grid]\nq_min = -3.0\nq_max = 3.0\nn_points = 64\n";
    assert_eq!(exit_code(&["exact"], Some(narrow)), 2);
    // numerical invariant: a far too coarse step under strong coupling
    // scatters amplitude to the grid edge
    let coarse = "[model]\ng_coupling = 0.5\n[quantum]\nt_final = 20.0\ndt = 0.2\n";
    assert_eq!(exit_code(&["exact"], Some(coarse)), 3);
}
