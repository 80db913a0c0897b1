use std::fs;

use proptest::prelude::*;
use rtlod::xp::{
    emit_csv, emit_svg_plot, read_csv, run, run_and_write, CoeffKind, EllChoice, ExperimentConfig, PlotAxis,
    PlotSpec, ResultRow, RowDiagnostics, Scenario,
};
use serde_json::json;

fn row(label: &str, coarse_h: f64, err: f64) -> ResultRow {
    ResultRow {
        scenario: label.into(),
        coarse_h,
        fine_h: 1.0 / 128.0,
        k: Some(2),
        ell: "-".into(),
        err_energy: err,
        err_l2: err / 2.0,
        div_residual: 1e-13,
        config_hash: "0123456789abcdef".into(),
        diagnostics: RowDiagnostics::default(),
    }
}

fn small_convergence(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(Scenario::Convergence, false);
    cfg.coarse_level = vec![1, 2];
    cfg.fine_level = vec![4];
    cfg.out = out.to_path_buf();
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip(
        label in "[a-z]{1,8}(/[a-z0-9=.]{1,6}){0,2}",
        level in 0i32..8,
        k in proptest::option::of(0usize..20),
        errs in proptest::array::uniform3(1e-300f64..1e3),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut r = row(&label, 2f64.powi(-level), errs[0]);
        r.k = k;
        r.err_l2 = errs[1];
        r.div_residual = errs[2];
        emit_csv(std::slice::from_ref(&r), &path).unwrap();
        let back = read_csv(&path).unwrap();
        prop_assert_eq!(back, vec![r]);
    }
}

#[test]
fn csv_header_is_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    emit_csv(&[row("a", 0.25, 0.1)], &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "scenario,H,h,k,ell,err_energy,err_l2,div_residual,config_hash"
    );
}

#[test]
fn empty_tables_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    assert!(emit_csv(&[], &path).is_err());
    assert!(!path.exists());
    let spec = PlotSpec {
        title: "t".into(),
        x: PlotAxis::CoarseSize,
        reference_slopes: vec![],
    };
    let svg = dir.path().join("empty.svg");
    assert!(emit_svg_plot(&[], &svg, &spec).is_err());
    assert!(!svg.exists());
}

#[test]
fn one_polyline_per_series() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for (i, label) in ["a/C=0.5", "a/C=1", "a/standard"].iter().enumerate() {
        for l in 1..5 {
            rows.push(row(label, 2f64.powi(-l), 10f64.powi(-l - i as i32)));
        }
    }
    let path = dir.path().join("p.svg");
    let spec = PlotSpec {
        title: "a <b>".into(),
        x: PlotAxis::CoarseSize,
        reference_slopes: vec![1.0, 2.0],
    };
    emit_svg_plot(&rows, &path, &spec).unwrap();
    let svg = fs::read_to_string(&path).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert_eq!(svg.matches("stroke-dasharray").count(), 2);
    assert!(svg.contains("a &lt;b&gt;"));
}

#[test]
fn hash_ignores_threads_and_output_directory() {
    let a = ExperimentConfig::defaults(Scenario::Convergence, false);
    let mut b = a.clone();
    b.threads = 3;
    b.out = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    let mut c = a.clone();
    c.seed += 1;
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn file_then_flags_override_defaults() {
    let file = json!({"coeff": "constant", "C": [1.0], "seed": 7});
    let mut flags = serde_json::Map::new();
    flags.insert("seed".into(), json!(9));
    flags.insert("ell".into(), json!(["k+1", "inf", "0"]));
    let cfg = ExperimentConfig::resolve(Scenario::Convergence, false, Some(&file), &flags).unwrap();
    assert_eq!(cfg.coeff, CoeffKind::Constant);
    assert_eq!(cfg.c, vec![1.0]);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.ell, vec![EllChoice::KPlusOne, EllChoice::Saturated, EllChoice::Fixed(0)]);

    let wrong = json!({"scenario": "decay"});
    assert!(ExperimentConfig::resolve(Scenario::Convergence, false, Some(&wrong), &Default::default()).is_err());
    let unknown = json!({"colour": "red"});
    assert!(ExperimentConfig::resolve(Scenario::Convergence, false, Some(&unknown), &Default::default()).is_err());
    let bad_levels = json!({"coarse_level": [5], "fine_level": [5]});
    assert!(ExperimentConfig::resolve(Scenario::Convergence, false, Some(&bad_levels), &Default::default()).is_err());
}

#[test]
fn config_json_round_trips() {
    for s in [
        Scenario::Convergence,
        Scenario::Instability,
        Scenario::Lshape,
        Scenario::Spe10,
        Scenario::Decay,
        Scenario::Infsup,
        Scenario::Oracle,
    ] {
        let cfg = ExperimentConfig::defaults(s, false);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }
}

#[test]
fn spe10_without_data_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::defaults(Scenario::Spe10, false);
    cfg.spe10_file = Some(dir.path().join("missing.dat"));
    cfg.out = dir.path().join("out");
    let (out, files) = run_and_write(&cfg).unwrap();
    assert!(out.skipped.unwrap().contains("missing.dat"));
    assert!(files.is_empty());
    assert!(!cfg.out.exists());
}

#[test]
fn sparse_reference_matches_dense_oracle() {
    let out = run(&ExperimentConfig::defaults(Scenario::Oracle, false)).unwrap();
    let r = &out.rows[0];
    assert!(r.err_energy <= 1e-12, "{}", r.err_energy);
    assert!(r.div_residual <= 1e-10, "{}", r.div_residual);
}

#[test]
fn convergence_output_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (out, files) = run_and_write(&small_convergence(a.path())).unwrap();
    let mut cfg = small_convergence(b.path());
    cfg.threads = 1;
    run_and_write(&cfg).unwrap();
    assert_eq!(files.len(), 2);
    assert_eq!(out.rows.len(), 4);
    let csv_a = fs::read(a.path().join("convergence.csv")).unwrap();
    let csv_b = fs::read(b.path().join("convergence.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    for r in &out.rows {
        assert!(r.err_energy.is_finite() && r.err_energy > 0.0);
        assert!(r.div_residual < 1e-8, "{}: {}", r.scenario, r.div_residual);
    }
}
