mod common;

use std::fs;
use std::path::Path;

use otvc_core::embio::{load_any, save_any};
use otvc_core::pipeline::{
    convert, convert_matrices, export_plan, load_plan, sweep, sweep_matrices, ConvertConfig,
    CouplingCache, EntryStatus, PlanConfig, SweepConfig, SweepRecord,
};
use otvc_core::sinkhorn::Marginals;
use otvc_core::synthetic::two_clouds;
use otvc_core::{
    cosine_cost, solve_entropic, transport_cost, CostKind, EmbeddingMatrix, MapMethod,
    SinkhornParams,
};
use rand::Rng;
use tempfile::TempDir;

fn write(dir: &Path, name: &str, m: &EmbeddingMatrix) -> std::path::PathBuf {
    let p = dir.join(name);
    save_any(m, &p).unwrap();
    p
}

#[test]
fn knn_single_neighbour_onto_itself_is_identity() {
    let dir = TempDir::new().unwrap();
    let x = common::random_matrix(&mut common::rng(41), 20, 8);
    let src = write(dir.path(), "x.emb", &x);
    let mut cfg = ConvertConfig::new(&src, &src, dir.path().join("out.emb"));
    cfg.method = MapMethod::Knn;
    cfg.k = 1;
    convert(&cfg).unwrap();
    let out = load_any(&cfg.output).unwrap();
    assert_eq!(out.rows(), 20);
    for (a, b) in out.as_slice().iter().zip(x.as_slice()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn full_support_convert_is_barycentric_projection() {
    let dir = TempDir::new().unwrap();
    let mut rng = common::rng(42);
    let x = common::random_matrix(&mut rng, 12, 6);
    let y = common::random_matrix(&mut rng, 9, 6);
    let mut cfg = ConvertConfig::new(
        write(dir.path(), "x.emb", &x),
        write(dir.path(), "y.emb", &y),
        dir.path().join("out.emb"),
    );
    cfg.k = 9;
    cfg.tol = Some(1e-12);
    let outcome = convert(&cfg).unwrap();
    let out = load_any(&cfg.output).unwrap();
    assert_eq!(out, outcome.result.mapped);

    // Independent coupling and projection from the definitions.
    let cost = cosine_cost(&x, &y).unwrap();
    let g = solve_entropic(&cost, &Marginals::uniform(12, 9), &cfg.solver()).unwrap();
    let all: Vec<usize> = (0..9).collect();
    for i in 0..12 {
        let w: Vec<f64> = all.iter().map(|&j| g.get(i, j) * 12.0).collect();
        let want = common::weighted_rows(&y, &all, &w);
        for (a, b) in out.row(i).iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_neighbour_ave_and_bar_files_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let mut rng = common::rng(43);
    let x = write(dir.path(), "x.emb", &common::random_matrix(&mut rng, 15, 5));
    let y = write(dir.path(), "y.emb", &common::random_matrix(&mut rng, 11, 5));
    let mut outputs = Vec::new();
    for (method, name) in [(MapMethod::OtAve, "ave.emb"), (MapMethod::OtBar, "bar.emb")] {
        let mut cfg = ConvertConfig::new(&x, &y, dir.path().join(name));
        cfg.method = method;
        cfg.k = 1;
        convert(&cfg).unwrap();
        outputs.push(fs::read(&cfg.output).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn convert_writes_a_report_for_ot_methods() {
    let dir = TempDir::new().unwrap();
    let mut rng = common::rng(44);
    let x = write(dir.path(), "x.csv", &common::random_matrix(&mut rng, 6, 3));
    let y = write(dir.path(), "y.emb", &common::random_matrix(&mut rng, 7, 3));
    let mut cfg = ConvertConfig::new(&x, &y, dir.path().join("out.csv"));
    cfg.report = Some(dir.path().join("report.json"));
    convert(&cfg).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.report.as_ref().unwrap()).unwrap()).unwrap();
    assert_eq!(report["method"], "ot-bar");
    assert_eq!(report["k"], 4);
    assert!(report["iterations"].as_u64().unwrap() > 0);
    assert!(report["marginal_error"].as_f64().unwrap() <= 1e-6);
    assert_eq!(report["converged"], true);
    assert_eq!(load_any(&cfg.output).unwrap().rows(), 6);
}

#[test]
fn convert_is_deterministic_single_threaded() {
    let dir = TempDir::new().unwrap();
    let (x, y) = two_clouds(45, 60, 50, 8, 3.0);
    let (x, y) = (
        write(dir.path(), "x.emb", &x),
        write(dir.path(), "y.emb", &y),
    );
    for method in MapMethod::ALL {
        let runs: Vec<Vec<u8>> = (0..2)
            .map(|r| {
                let mut cfg =
                    ConvertConfig::new(&x, &y, dir.path().join(format!("{method}-{r}.emb")));
                cfg.method = method;
                cfg.threads = Some(1);
                convert(&cfg).unwrap();
                fs::read(&cfg.output).unwrap()
            })
            .collect();
        assert_eq!(runs[0], runs[1], "{method}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (x, y) = two_clouds(46, 80, 70, 8, 3.0);
    let solver = SinkhornParams::default();
    let run = |threads| {
        otvc_core::exec::with_threads(Some(threads), || {
            convert_matrices(
                &x,
                &y,
                MapMethod::OtBar,
                4,
                CostKind::CosineDistance,
                &solver,
            )
            .unwrap()
        })
        .unwrap()
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.result.mapped, b.result.mapped);
    assert_eq!(a.coupling, b.coupling);
}

#[test]
fn single_k_ot_rows_share_frechet() {
    let (x, y) = two_clouds(47, 40, 30, 4, 3.0);
    let r = sweep_matrices(
        &x,
        &y,
        &[MapMethod::OtAve, MapMethod::OtBar],
        &[1],
        CostKind::CosineDistance,
        &SinkhornParams::default(),
        &mut CouplingCache::new(),
    )
    .unwrap();
    assert_eq!(r.records.len(), 2);
    assert_eq!(r.records[0].frechet, r.records[1].frechet);
    assert!(r.records[0].frechet.is_some());
}

#[test]
fn sweep_improves_on_source_and_has_table_shape() {
    let (x, y) = two_clouds(48, 200, 200, 16, 3.0);
    let ks = [1, 3, 4, 5, 10, 40];
    let mut cache = CouplingCache::new();
    let r = sweep_matrices(
        &x,
        &y,
        &MapMethod::ALL,
        &ks,
        CostKind::CosineDistance,
        &SinkhornParams::default(),
        &mut cache,
    )
    .unwrap();
    assert_eq!(r.records.len(), 6 * 3);
    assert_eq!((cache.misses, cache.len()), (1, 1));
    let baseline = r.baseline_frechet.unwrap();
    for method in MapMethod::ALL {
        let f = r.record(method, 4).unwrap().frechet.unwrap();
        assert!(f < baseline, "{method}: {f} vs {baseline}");
    }
    for rec in &r.records {
        assert_eq!(rec.status, EntryStatus::Ok);
        assert!(rec.frechet.unwrap().is_finite());
        assert!(rec.wall_time_s.is_finite());
        if rec.method.needs_coupling() {
            assert!(rec.transport_cost.unwrap().is_finite());
            assert!(rec.marginal_error.unwrap().is_finite());
        } else {
            assert_eq!(rec.transport_cost, None);
        }
    }
}

#[test]
fn sweep_entries_equal_independent_converts() {
    let (x, y) = two_clouds(49, 50, 45, 6, 3.0);
    let solver = SinkhornParams::new(0.05, 1e-8, 10_000);
    let ks = [1, 4, 45];
    let r = sweep_matrices(
        &x,
        &y,
        &MapMethod::ALL,
        &ks,
        CostKind::SquaredEuclidean,
        &solver,
        &mut CouplingCache::new(),
    )
    .unwrap();
    let target = otvc_core::gaussian_stats(&y).unwrap();
    for rec in &r.records {
        let one = convert_matrices(
            &x,
            &y,
            rec.method,
            rec.k,
            CostKind::SquaredEuclidean,
            &solver,
        )
        .unwrap();
        let f = otvc_core::frechet_distance(
            &otvc_core::gaussian_stats(&one.result.mapped).unwrap(),
            &target,
        )
        .unwrap();
        assert!((rec.frechet.unwrap() - f).abs() <= 1e-9 * f.max(1.0));
        if let (Some(a), Some(b)) = (rec.transport_cost, one.report.transport_cost) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
    }
}

#[test]
fn out_of_range_k_is_skipped_not_fatal() {
    let dir = TempDir::new().unwrap();
    let (x, y) = two_clouds(50, 20, 12, 4, 2.0);
    let mut cfg = SweepConfig::new(
        write(dir.path(), "x.emb", &x),
        write(dir.path(), "y.emb", &y),
    );
    cfg.ks = vec![4, 40];
    let r = sweep(&cfg).unwrap();
    assert_eq!(r.records.len(), 6);
    for method in MapMethod::ALL {
        assert_eq!(r.record(method, 4).unwrap().status, EntryStatus::Ok);
        let skipped = r.record(method, 40).unwrap();
        assert_eq!(skipped.status, EntryStatus::Skipped);
        assert_eq!(skipped.frechet, None);
    }
    // Both report encodings carry every record.
    let lines: Vec<SweepRecord> = r
        .to_jsonl()
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, r.records);
    let table = r.to_csv();
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    assert_eq!(reader.records().count(), 6);
}

#[test]
fn one_by_one_plan_is_unit_mass() {
    let dir = TempDir::new().unwrap();
    let a = EmbeddingMatrix::from_rows(&[[0.3f32, -1.0]]).unwrap();
    let b = EmbeddingMatrix::from_rows(&[[5.0f32, 2.0]]).unwrap();
    let cfg = PlanConfig::new(
        write(dir.path(), "a.emb", &a),
        write(dir.path(), "b.emb", &b),
        dir.path().join("plan.emb"),
    );
    export_plan(&cfg).unwrap();
    let plan = load_any(&cfg.output).unwrap();
    assert_eq!((plan.rows(), plan.dims()), (1, 1));
    assert_eq!(plan.as_slice(), &[1.0]);
}

#[test]
fn exported_plan_round_trips() {
    let dir = TempDir::new().unwrap();
    let mut rng = common::rng(51);
    for _ in 0..5 {
        let (m, n) = (rng.random_range(2..30), rng.random_range(2..30));
        let x = common::random_matrix(&mut rng, m, 4);
        let y = common::random_matrix(&mut rng, n, 4);
        let cfg = PlanConfig::new(
            write(dir.path(), "x.emb", &x),
            write(dir.path(), "y.emb", &y),
            dir.path().join("plan.emb"),
        );
        let in_memory = export_plan(&cfg).unwrap();
        let reloaded = load_plan(&cfg.output).unwrap();
        assert_eq!((reloaded.rows(), reloaded.cols()), (m, n));
        for s in reloaded.row_sums() {
            assert!((s - 1.0 / m as f64).abs() <= cfg.solver.tol + 1e-6, "{s}");
        }
        let cost = cosine_cost(&x, &y).unwrap();
        let a = transport_cost(&in_memory, &cost).unwrap();
        let b = transport_cost(&reloaded, &cost).unwrap();
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let mut rng = common::rng(52);
    let x = write(dir.path(), "x.emb", &common::random_matrix(&mut rng, 5, 3));
    let y = write(dir.path(), "y.emb", &common::random_matrix(&mut rng, 5, 3));
    let z = write(dir.path(), "z.emb", &common::random_matrix(&mut rng, 5, 2));
    let bad = dir.path().join("bad.emb");
    fs::write(&bad, b"not an embedding file at all").unwrap();

    let mut cfg = ConvertConfig::new(&x, &y, dir.path().join("o.emb"));
    cfg.epsilon = Some(-1.0);
    assert_eq!(convert(&cfg).unwrap_err().exit_code(), 2);
    let mut cfg = ConvertConfig::new(&x, &y, dir.path().join("o.emb"));
    cfg.k = 6;
    assert_eq!(convert(&cfg).unwrap_err().exit_code(), 2);
    let cfg = ConvertConfig::new(&bad, &y, dir.path().join("o.emb"));
    assert_eq!(convert(&cfg).unwrap_err().exit_code(), 3);
    let cfg = ConvertConfig::new(&x, &z, dir.path().join("o.emb"));
    assert_eq!(convert(&cfg).unwrap_err().exit_code(), 3);
    let cfg = ConvertConfig::new(&x, dir.path().join("missing.emb"), dir.path().join("o.emb"));
    assert_eq!(convert(&cfg).unwrap_err().exit_code(), 3);
}
