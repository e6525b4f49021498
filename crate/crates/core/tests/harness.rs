use genxfer::harness::dgp::{cond_signal, draw_dgp, DgpKind, DgpSpec, Role};
use genxfer::harness::plot::{render_svg, summarize};
use genxfer::harness::results::{mean, read_results, write_results, ExperimentResult, ResultRow, RESULT_HEADER};
use genxfer::harness::sweep::{run_cell, run_sweep, Cell, ReplicationData, SweepConfig, FREEZE_HEADER};
use genxfer::rng::seeded;
use genxfer::transfer::{Family, Mode, Regime};
use proptest::prelude::*;
use quick_xml::events::Event;
use quick_xml::Reader;

const E: f64 = std::f64::consts::E;

/// A sweep small enough to run in seconds.
fn quick(family: Family, mode: Mode) -> SweepConfig {
    let mut cfg = SweepConfig {
        i_grid: vec![6.0],
        n_t: 300,
        n_eval: 300,
        ot_points: 200,
        replications: 1,
        families: vec![family],
        modes: vec![mode],
        record_timing: false,
        ..SweepConfig::default()
    };
    for o in [&mut cfg.source_opts, &mut cfg.target_opts, &mut cfg.decoder_opts] {
        o.epochs = 2;
    }
    cfg
}

fn well_formed(svg: &str) -> Result<usize, String> {
    let mut r = Reader::from_str(svg);
    let mut depth = 0usize;
    let mut elements = 0;
    loop {
        match r.read_event().map_err(|e| e.to_string())? {
            Event::Start(_) => {
                depth += 1;
                elements += 1;
            }
            Event::Empty(_) => elements += 1,
            Event::End(_) => depth = depth.checked_sub(1).ok_or("unbalanced end tag")?,
            Event::Eof => break,
            _ => {}
        }
    }
    if depth == 0 {
        Ok(elements)
    } else {
        Err(format!("{depth} unclosed tags"))
    }
}

fn row(mode: Mode, regime: Regime, n_s: usize, replication: usize, value: f64) -> ResultRow {
    ResultRow {
        family: Family::Flow,
        mode,
        regime,
        n_s,
        replication,
        seed: 40 + replication as u64,
        metric: "tv".into(),
        value,
        wall_time_s: 0.125,
        status: "ok".into(),
    }
}

#[test]
fn default_grid_source_sizes() {
    assert_eq!(
        SweepConfig::default().source_sizes(),
        vec![2980, 4914, 8103, 13359, 22026, 36315, 59874]
    );
}

#[test]
fn single_grid_point_gives_two_rows() {
    let mut cfg = quick(Family::Diffusion, Mode::Conditional);
    cfg.i_grid = vec![8.0];
    let dir = tempfile::tempdir().unwrap();
    let out = run_sweep(&cfg, dir.path()).unwrap();
    let rows = &out.result.rows;
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].regime, rows[0].n_s), (Regime::Transfer, 2980));
    assert_eq!((rows[1].regime, rows[1].n_s), (Regime::NonTransfer, 0));
    assert!(rows.iter().all(|r| r.is_ok() && r.value.is_finite() && r.value >= 0.0), "{rows:?}");
    assert_eq!(ExperimentResult::load(&dir.path().join("results.csv")).unwrap(), out.result);
    let freeze = std::fs::read_to_string(dir.path().join("freeze.csv")).unwrap();
    assert_eq!(freeze.lines().next(), Some(FREEZE_HEADER));
    assert_eq!(freeze.lines().count(), 2);
}

#[test]
fn same_seed_gives_identical_csvs() {
    for mode in [Mode::Conditional, Mode::Unconditional] {
        let mut cfg = quick(Family::Flow, mode);
        cfg.i_grid = vec![6.0, 6.5];
        cfg.replications = 2;
        cfg.workers = 2;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_sweep(&cfg, a.path()).unwrap();
        run_sweep(&cfg, b.path()).unwrap();
        let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
        assert_eq!(read(&a, "results.csv"), read(&b, "results.csv"), "{mode}");
        assert_eq!(read(&a, "freeze.csv"), read(&b, "freeze.csv"), "{mode}");
        let res = ExperimentResult::load(&a.path().join("results.csv")).unwrap();
        assert_eq!(res.rows.len(), 2 * 3);
        assert!(res.rows.iter().all(|r| r.is_ok()), "{:?}", res.rows);
    }
}

#[test]
fn every_planned_cell_appears_once() {
    let mut cfg = quick(Family::Flow, Mode::Unconditional);
    cfg.families = vec![Family::Flow, Family::Diffusion];
    cfg.i_grid = vec![5.0, 5.5];
    cfg.replications = 2;
    cfg.n_t = 120;
    cfg.n_eval = 120;
    cfg.ot_points = 100;
    for o in [&mut cfg.source_opts, &mut cfg.target_opts, &mut cfg.decoder_opts] {
        o.epochs = 1;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = run_sweep(&cfg, dir.path()).unwrap();
    let plan = cfg.cells();
    assert_eq!(out.result.rows.len(), plan.len());
    for (cell, r) in plan.iter().zip(&out.result.rows) {
        assert_eq!(
            (cell.family, cell.mode, cell.regime, cell.n_s, cell.replication, cell.seed),
            (r.family, r.mode, r.regime, r.n_s, r.replication, r.seed)
        );
    }
}

#[test]
fn cond_sim_moments_at_1e5_rows() {
    let spec = DgpSpec {
        kind: DgpKind::CondSim,
        seed: 3,
    };
    let n = 100_000;
    let src = draw_dgp(spec.kind, Role::Source, n, &mut spec.rng(Role::Source, "train"));
    let resid: Vec<f64> = (0..n)
        .map(|i| src.x.row(i)[0] - cond_signal(src.aux.row(i).as_slice().unwrap()))
        .collect();
    let m = resid.iter().sum::<f64>() / n as f64;
    assert!(m.abs() < 3.0 / (n as f64).sqrt(), "source noise mean {m}");
    assert!(src.aux.as_array().iter().all(|z| (-2.0..=2.0).contains(z)));

    let tgt = draw_dgp(spec.kind, Role::Target, n, &mut spec.rng(Role::Target, "train"));
    for i in 0..n {
        let r = tgt.x.row(i)[0] - cond_signal(tgt.aux.row(i).as_slice().unwrap());
        assert!((1.0 / E - 1e-12..=E + 1e-12).contains(&r), "row {i}: residual {r}");
    }
}

#[test]
fn uncond_sim_latents_in_unit_box() {
    let d = draw_dgp(DgpKind::UncondSim, Role::Target, 100_000, &mut seeded(4));
    assert_eq!((d.x.dim(), d.aux.dim()), (3, 2));
    assert!(d.aux.as_array().iter().all(|u| (-1.0..=1.0).contains(u)));
    let s = draw_dgp(DgpKind::UncondSim, Role::Source, 10, &mut seeded(4));
    assert_eq!(s.x.dim(), 5);
    assert_eq!(s.aux, d.aux.head(10));
}

#[test]
fn non_transfer_cell_never_reads_source() {
    for mode in [Mode::Conditional, Mode::Unconditional] {
        let cfg = quick(Family::Flow, mode);
        let data = ReplicationData::draw(&cfg, mode, 11).unwrap();
        let cell = Cell {
            family: Family::Flow,
            mode,
            regime: Regime::NonTransfer,
            n_s: 0,
            replication: 0,
            seed: 11,
        };
        let out = run_cell(&cfg, &cell, &data);
        assert!(out.row.is_ok(), "{}", out.row.status);
        assert!(out.freeze.is_none());
        assert_eq!(data.source.reads(), 0);
        let transfer = run_cell(
            &cfg,
            &Cell {
                regime: Regime::Transfer,
                n_s: 403,
                ..cell
            },
            &data,
        );
        assert!(transfer.row.is_ok(), "{}", transfer.row.status);
        assert_eq!(data.source.reads(), 1);
    }
}

#[test]
fn failed_cell_becomes_a_status_row() {
    let mut cfg = quick(Family::Flow, Mode::Conditional);
    let data = ReplicationData::draw(&cfg, Mode::Conditional, 12).unwrap();
    cfg.target_opts.batch_size = 0;
    let out = run_cell(
        &cfg,
        &Cell {
            family: Family::Flow,
            mode: Mode::Conditional,
            regime: Regime::NonTransfer,
            n_s: 0,
            replication: 0,
            seed: 12,
        },
        &data,
    );
    assert!(out.row.status.starts_with("failed:"), "{}", out.row.status);
    assert!(out.row.value.is_nan());
}

#[test]
fn csv_header_is_exact() {
    let mut buf = Vec::new();
    write_results(&ExperimentResult::default(), &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().trim_end(), RESULT_HEADER.join(","));
    assert_eq!(
        RESULT_HEADER.join(","),
        "family,mode,regime,n_s,replication,seed,metric,value,wall_time_s,status"
    );
    assert!(read_results("family,mode\nflow,conditional\n".as_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(values in proptest::collection::vec((0usize..5, -1e6f64..1e6), 1..30)) {
        let rows = values
            .iter()
            .enumerate()
            .map(|(k, &(n, v))| {
                let regime = if n == 0 { Regime::NonTransfer } else { Regime::Transfer };
                row(Mode::Conditional, regime, n * 1000, k, v.abs() * 1e-3)
            })
            .collect();
        let res = ExperimentResult { rows };
        let mut buf = Vec::new();
        write_results(&res, &mut buf).unwrap();
        prop_assert_eq!(read_results(buf.as_slice()).unwrap(), res);
    }
}

#[test]
fn single_point_plot_has_one_marker() {
    let res = ExperimentResult {
        rows: vec![row(Mode::Conditional, Regime::Transfer, 2980, 0, 0.3)],
    };
    let svg = render_svg(&res).unwrap();
    assert!(well_formed(&svg).unwrap() > 0);
    assert_eq!(svg.matches("class=\"marker\"").count(), 1);
    assert!(!svg.contains("class=\"baseline\""));
}

#[test]
fn baseline_matches_csv_mean() {
    let mut rows = Vec::new();
    for (mode, base) in [(Mode::Conditional, [0.31, 0.27, 0.293]), (Mode::Unconditional, [1.7, 1.1, 0.9])] {
        for (rep, b) in base.iter().enumerate() {
            for (k, n) in [2980usize, 8103, 59874].iter().enumerate() {
                rows.push(row(mode, Regime::Transfer, *n, rep, b / (k as f64 + 2.0)));
            }
            rows.push(row(mode, Regime::NonTransfer, 0, rep, *b));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    ExperimentResult { rows }.save(&path).unwrap();
    let res = ExperimentResult::load(&path).unwrap();
    let svg = render_svg(&res).unwrap();
    well_formed(&svg).unwrap();

    let baselines: Vec<f64> = svg
        .match_indices("class=\"baseline\"")
        .map(|(at, _)| {
            let tail = &svg[at..];
            let start = tail.find("data-value=\"").unwrap() + "data-value=\"".len();
            let end = tail[start..].find('"').unwrap();
            tail[start..start + end].parse().unwrap()
        })
        .collect();
    assert_eq!(baselines.len(), 2);
    for (mode, drawn) in [Mode::Conditional, Mode::Unconditional].into_iter().zip(baselines) {
        let csv_mean = mean(&res.values(Family::Flow, mode, Regime::NonTransfer, None)).unwrap();
        assert!((drawn - csv_mean).abs() <= 1e-12, "{mode}: {drawn} vs {csv_mean}");
    }
    assert_eq!(svg.matches("class=\"marker\"").count(), 6);
    assert_eq!(svg.matches("class=\"band\"").count(), 2);
    let s = summarize(&res);
    assert_eq!(s[0].transfer.len(), 3);
    assert_eq!(s[0].transfer[0].2, 0.27 / 2.0);
}

#[test]
fn empty_result_cannot_be_plotted() {
    assert!(render_svg(&ExperimentResult::default()).is_err());
    let failed = ResultRow {
        status: "failed: boom".into(),
        value: f64::NAN,
        ..row(Mode::Conditional, Regime::Transfer, 2980, 0, 0.0)
    };
    assert!(render_svg(&ExperimentResult { rows: vec![failed] }).is_err());
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        r#"
[sweep]
i_grid = [8.0, 9.0]
replications = 2
families = ["flow"]
record_timing = false

[train]
epochs = 7

[train.decoder]
epochs = 3

[model]
standardize = false
d_h = 2

[metrics]
n_bins = 20
"#,
    )
    .unwrap();
    let file = genxfer::harness::config::ConfigFile::load(&path).unwrap();
    let cfg = file.apply(SweepConfig::default()).unwrap();
    assert_eq!(cfg.source_sizes(), vec![2980, 8103]);
    assert_eq!((cfg.replications, cfg.families.clone(), cfg.record_timing), (2, vec![Family::Flow], false));
    assert_eq!((cfg.source_opts.epochs, cfg.target_opts.epochs, cfg.decoder_opts.epochs), (7, 7, 3));
    assert!(!cfg.models.standardize);
    assert_eq!((cfg.d_h, cfg.tv.n_bins), (2, 20));
    assert_eq!(cfg.cells().len(), 2 * 2 * 3);

    std::fs::write(&path, "[sweep]\ni_grid = [9.0, 8.0]\n").unwrap();
    let bad = genxfer::harness::config::ConfigFile::load(&path).unwrap();
    assert!(bad.apply(SweepConfig::default()).is_err());
}
