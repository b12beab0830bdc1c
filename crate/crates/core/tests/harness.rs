//! End-to-end runner and report on a tiny world.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use icl_borrow::harness::report::load_records;
use icl_borrow::harness::{cell_keys, prepare, report, run_cells, ExperimentConfig, Method, Prepared};
use icl_borrow::synth::SplitSizes;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        sizes: SplitSizes {
            train: 120,
            val: 40,
            test: 60,
        },
        timing_samples: 5,
        ..ExperimentConfig::default()
    };
    cfg.pretext.size = 100;
    cfg.encoder.d = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.layers = 1;
    cfg.encoder.pretrain_steps = 10;
    cfg.icl.q = 2;
    cfg.icl.layers = 1;
    cfg.icl.heads = 2;
    cfg.icl.max_epochs = 3;
    cfg.baseline.max_epochs = 3;
    cfg
}

fn prepared() -> &'static Prepared {
    static CELL: OnceLock<Prepared> = OnceLock::new();
    CELL.get_or_init(|| prepare(&tiny()).unwrap())
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn one_cell_writes_one_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::FtC],
        r_sub: vec![1.0],
        ..tiny()
    };
    let outcomes = run_cells(&cfg, prepared(), Some(dir.path())).unwrap();
    assert_eq!(outcomes.len(), 1);
    assert_eq!(files(&dir.path().join("cells")), ["FT-C_r1_s0.tsv"]);

    let out = report(dir.path()).unwrap();
    assert_eq!(out.curve_files, 1);
    assert_eq!(out.summary.len(), 1);
    assert_eq!(files(&dir.path().join("report").join("curves")), ["FT-C_r1_s0.svg", "FT-C_r1_s0.tsv"]);
}

#[test]
fn grid_is_methods_by_rsub_by_seed() {
    let cfg = ExperimentConfig {
        methods: vec![Method::IclCa, Method::FtC],
        r_sub: vec![0.05, 0.1, 0.5, 1.0],
        seeds: (0..5).collect(),
        ..tiny()
    };
    let keys = cell_keys(&cfg);
    assert_eq!(keys.len(), 40);
    let mut stems: Vec<String> = keys.iter().map(|k| k.stem()).collect();
    stems.dedup();
    assert_eq!(stems.len(), 40);
}

#[test]
fn comparison_has_one_series_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: vec![Method::IclCa, Method::FtC],
        r_sub: vec![0.25, 0.5, 0.75, 1.0],
        ..tiny()
    };
    let outcomes = run_cells(&cfg, prepared(), Some(dir.path())).unwrap();
    assert!(outcomes.iter().all(|o| o.run().is_some()));
    let out = report(dir.path()).unwrap();
    assert_eq!(out.summary.len(), 8);
    for sg in ["full", "miss", "all"] {
        let base = dir.path().join("report").join(format!("metric_vs_rsub_{sg}"));
        let table = fs::read_to_string(base.with_extension("tsv")).unwrap();
        let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
        for m in ["ICL-CA", "FT-C"] {
            let r: Vec<&str> = rows.iter().filter(|r| r[0] == m).map(|r| r[1]).collect();
            assert_eq!(r, ["0.25", "0.5", "0.75", "1"], "{sg} {m}");
        }
        let svg = fs::read_to_string(base.with_extension("svg")).unwrap();
        assert_eq!(svg.matches("stroke-width=\"2\"").count(), 2, "{sg}");
        assert_eq!(svg.matches("<circle").count(), 8, "{sg}");
    }
    check_gap_summary(dir.path());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Gap rows against a recomputation from the raw per-cell records.
fn check_gap_summary(dir: &Path) {
    let records = load_records(dir).unwrap();
    let text = fs::read_to_string(dir.join("report").join("gap_summary.tsv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let (method, state, metric) = (f[0], f[1], f[2]);
        let value = |seed: u64, r: f64, sg: &str| {
            records
                .iter()
                .find(|x| x.method == method && x.seed == seed && x.r_sub == r && x.subgroup == sg && x.metric == metric)
                .and_then(|x| x.value)
        };
        let mut cells: Vec<(u64, f64)> =
            records.iter().filter(|x| x.method == method && x.missing_state == state).map(|x| (x.seed, x.r_sub)).collect();
        cells.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        cells.dedup();
        let gaps: Vec<f64> = cells
            .iter()
            .filter_map(|&(s, r)| {
                let (full, miss) = (value(s, r, "full")?, value(s, r, "miss")?);
                let (lo, hi) = (full.min(miss), full.max(miss));
                (lo > 0.0).then(|| (hi - lo) / lo * 100.0)
            })
            .collect();
        let got: f64 = f.last().unwrap().parse().unwrap();
        assert!((got - median(gaps)).abs() < 1e-6, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 2);
}

#[test]
fn report_rejects_an_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let err = report(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
