use std::fs;
use std::path::PathBuf;

use vmstd::config::{RunConfig, SweepAxis};
use vmstd::study::{apply_axis, read_csv, run_reference, run_vms, sweep, write_csv, CSV_COLUMNS};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small() -> RunConfig {
    RunConfig::parse(
        "run.name = small\n\
         problem.dim = 2\n\
         hierarchy.cells = 8 8\n\
         hierarchy.lengths = 1 0.5\n\
         solver.modes = 2 2\n\
         solver.steps = 4\n\
         reference.enabled = true\n",
    )
    .unwrap()
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut names = Vec::new();
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            let cfg = RunConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if let Some(axis) = cfg.sweep.axis {
                for &v in &cfg.sweep.values {
                    let c = apply_axis(&cfg, axis, v).unwrap_or_else(|e| panic!("{} at {v}: {e}", path.display()));
                    c.march_config().unwrap();
                }
            }
            names.push(cfg.name.clone());
        }
    }
    assert!(names.len() >= 20, "{names:?}");
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len(), "run names repeat");
}

#[test]
fn runs_are_deterministic() {
    let cfg = small();
    let a = run_vms(&cfg).unwrap();
    let b = run_vms(&cfg).unwrap();
    assert_eq!(a.final_state, b.final_state);
    let errors = |r: &vmstd::vms::RunReport| r.steps.iter().map(|s| s.error).collect::<Vec<_>>();
    assert_eq!(errors(&a), errors(&b));
}

#[test]
fn reference_of_ratio_form_hierarchy_is_single_level() {
    let cfg = apply_axis(&small(), SweepAxis::L2, 0.5).unwrap();
    assert!(!cfg.hierarchy.ratios.is_empty());
    let r = run_reference(&cfg).unwrap();
    assert_eq!(r.final_state.fields.len(), 1);
    assert!(r.relative_error().unwrap().is_finite());
}

#[test]
fn sweep_csv_has_each_point_once() {
    let mut cfg = small();
    cfg.sweep.axis = Some(SweepAxis::Nt);
    cfg.sweep.values = vec![2.0, 4.0, 8.0];
    let rows = sweep(&cfg, 1).unwrap();
    assert_eq!(rows.len(), 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/s.csv");
    write_csv(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# vmstd results v1\n"));
    let records = read_csv(&path).unwrap();
    assert_eq!(records.len(), 6);
    let col = |name: &str| CSV_COLUMNS.iter().position(|c| *c == name).unwrap();
    for method in ["vms", "reference"] {
        let mut values: Vec<&str> = records
            .iter()
            .filter(|r| r[col("method")] == method)
            .map(|r| r[col("value")].as_str())
            .collect();
        values.sort();
        assert_eq!(values, ["2", "4", "8"]);
    }
    assert!(records.iter().all(|r| r[col("status")] == "ok"));

    // numeric fields other than timings repeat exactly
    let again = sweep(&cfg, 1).unwrap();
    for (a, b) in rows.iter().zip(&again) {
        assert_eq!((a.error, a.slope, a.dofs, &a.run_id), (b.error, b.slope, b.dofs, &b.run_id));
    }
}
