//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Criteria 1-8 are exact property checks. Criteria 9-13 train the
//! desk-scale chain once and compare it against the baselines on the
//! held-out test traces. Criterion 14 is pure pilot counting.

use std::process::ExitCode;
use std::time::Instant;

use mxlab::autodiff::ParamStore;
use mxlab::baselines::InterpMethod;
use mxlab::check;
use mxlab::config::RunConfig;
use mxlab::eval::{evaluate_point, run_sweep, MethodSeries, Models, SweepKind};
use mxlab::pilots::{build_srs_pattern, overhead, SrsPattern};
use mxlab::sfcen::SfcenConfig;
use mxlab::sim::{coherence_time_s, generate_traces, SystemConfig};
use mxlab::training::{split_windows, train_sfcen, train_tudcen, train_udccn, Split, TrainConfig, TudcenParams, UplinkSource};

/// Finite-difference relative error bound.
const GRAD_TOL: f64 = 1e-4;
/// Coherence time window at 28 GHz, 60 km/h.
const COHERENCE_MS: (f64, f64) = (0.31, 0.33);
/// Required SFCEN margin over the interpolation baselines.
const SFCEN_MARGIN_DB: f64 = 3.0;
/// Allowed non-monotonicity of the DFT baseline.
const MONOTONE_SLACK_DB: f64 = 0.5;
/// Required calibration benefit at slot 1.
const CALIB_MARGIN_DB: f64 = 3.0;
/// Max rollout NMSE growth from slot 2 to slot 7.
const ROLLOUT_DEGRADATION_DB: f64 = 10.0;
/// Pipeline share of perfect-CSI sum-rate.
const RATE_SHARE: f64 = 0.75;
const TEST_SNR_DB: f64 = 20.0;
const PROPERTY_BUDGET_S: f64 = 300.0;
const RUN_BUDGET_S: f64 = 1800.0;

struct Line {
    id: String,
    passed: bool,
    detail: String,
}

fn line(id: impl Into<String>, passed: bool, detail: impl Into<String>) -> Line {
    Line { id: id.into(), passed, detail: detail.into() }
}

fn from_checks(id: &str, outcomes: &[check::Outcome]) -> Line {
    let passed = outcomes.iter().all(|o| o.passed);
    let detail = outcomes.iter().map(|o| format!("{}: {}", o.name, o.detail)).collect::<Vec<_>>().join("; ");
    line(id, passed, detail)
}

fn properties() -> Vec<Line> {
    let start = Instant::now();
    let mut out = Vec::new();
    let grads = [check::grad_primitives(), check::grad_aseem(), check::grad_udccn(), check::grad_gen_layer()];
    assert_eq!(check::GRAD_TOL, GRAD_TOL);
    out.push(from_checks("1 gradient checks", &grads));
    out.push(from_checks("2 LS exactness", &[check::ls_exactness()]));
    out.push(from_checks("3 shuffle bijection", &[check::shuffle_bijection()]));
    out.push(from_checks("4 causality", &[check::causality()]));
    out.push(from_checks("5 SVD precoder", &[check::svd_precoder_checks()]));
    out.push(from_checks("6 SFSE accounting", &[check::sfse_accounting()]));

    let ms = coherence_time_s(&SystemConfig::full()) * 1e3;
    out.push(line("7 coherence time", (COHERENCE_MS.0..=COHERENCE_MS.1).contains(&ms), format!("0.5/f_d = {ms:.4} ms")));

    let sys = SystemConfig::full();
    let count = |s: &SystemConfig, comb: usize, r_s: usize| {
        let p = build_srs_pattern(s, comb, r_s, 0).unwrap();
        overhead(s, &p, 1.0).unwrap()
    };
    let ours = count(&sys, 4, 2);
    let full = count(&sys.with_spatial_ratio(1).unwrap(), 1, 1);
    let fast = count(&SystemConfig { srs_period_ms: 0.25, ..sys.clone() }, 4, 2);
    let ok = full.c_sl == 8 * ours.c_sl && fast.c_o == 4 * ours.c_o;
    out.push(line(
        "14 overhead accounting",
        ok,
        format!("REs/sounding {} vs {}; REs/ms {} vs {}", full.c_sl, ours.c_sl, fast.c_o, ours.c_o),
    ));

    let secs = start.elapsed().as_secs_f64();
    out.push(line("property suite runtime", secs <= PROPERTY_BUDGET_S, format!("{secs:.1} s (limit {PROPERTY_BUDGET_S} s)")));
    out
}

fn short(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { epochs: 2, split: (2, 1, 1), ..cfg.clone() }
}

fn determinism(cfg: &RunConfig) -> Line {
    let text = cfg.to_text();
    let run = || -> mxlab::Result<_> {
        let c = RunConfig::parse(&text, std::path::Path::new("manifest"))?;
        let models: Vec<_> = (0..4).map(|k| c.trace_model(k)).collect();
        let traces = generate_traces(&c.sys, &models)?;
        let pattern = build_srs_pattern(&c.sys, c.comb, c.r_s, c.pilot_seed)?;
        let net = sfcen_net(&c, &pattern);
        let split = split_windows(&traces, &short(&c.train_sfcen))?;
        let (s, rs) = train_sfcen::<f32>(&split, &pattern, &net, &short(&c.train_sfcen), c.train_sfcen.seed)?;
        let split_t = split_windows(&traces, &short(&c.train_tudcen))?;
        let src = UplinkSource::Sfcen { store: &s, net: &net, pattern: &pattern };
        let (p, rt) = train_tudcen::<f32>(&split_t, &c.tudcen, &short(&c.train_tudcen), &src, c.train_tudcen.seed)?;
        let models = Models { sfcen: Some((&s, &net)), tudcen: Some((&p, &c.tudcen)) };
        let mut report = run_sweep(SweepKind::Snr, &c, &split.test, &models)?;
        report.runtime_s = 0.0;
        Ok((traces, rs.log, rt.udccn.log, rt.dcen.log, report))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3, a.4 == b.4];
            line(
                "8 determinism",
                same.iter().all(|&x| x),
                format!("datasets/sfcen log/udccn log/dcen log/report identical: {same:?}"),
            )
        }
        (Err(e), _) | (_, Err(e)) => line("8 determinism", false, format!("error: {e}")),
    }
}

fn sfcen_net(c: &RunConfig, pattern: &SrsPattern) -> SfcenConfig {
    let mut net = SfcenConfig::new(&c.sys, pattern, c.sfcen_d_rep, c.sfcen_heads).unwrap();
    net.p_attn = c.sfcen_p_attn;
    net.p_seg = c.sfcen_p_seg;
    net
}

fn nmse(series: &[MethodSeries], name: &str, slot: usize) -> Option<f64> {
    series.iter().find(|m| m.name == name)?.nmse_db[slot]
}

fn fmt_series(s: &[Option<f64>]) -> String {
    s.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.2}"))).collect::<Vec<_>>().join(", ")
}

fn experiments(cfg: &RunConfig) -> mxlab::Result<Vec<Line>> {
    let mut out = Vec::new();
    let sys = &cfg.sys;
    let models: Vec<_> = (0..cfg.n_traces).map(|k| cfg.trace_model(k)).collect();
    let traces = generate_traces(sys, &models)?;
    let split: Split = split_windows(&traces, &cfg.train_sfcen)?;
    let pattern = build_srs_pattern(sys, cfg.comb, cfg.r_s, cfg.pilot_seed)?;
    let net = sfcen_net(cfg, &pattern);

    let t0 = Instant::now();
    let (sfcen, _) = train_sfcen::<f32>(&split, &pattern, &net, &cfg.train_sfcen, cfg.train_sfcen.seed)?;
    let t_sfcen = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let tc = &cfg.train_tudcen;
    let src = UplinkSource::Sfcen { store: &sfcen, net: &net, pattern: &pattern };
    let (pipe, _) = train_tudcen::<f32>(&split, &cfg.tudcen, tc, &src, tc.seed)?;
    let t_tudcen = t0.elapsed().as_secs_f64();
    let dft_src = UplinkSource::Interp { method: InterpMethod::Dft, pattern: &pattern, n_tx: sys.n_tx, n_sc: sys.n_sc };
    let (dft_udccn, _) = train_udccn::<f32>(&split, &cfg.tudcen, tc, &dft_src, tc.seed)?;
    let dft_params = TudcenParams { udccn: dft_udccn, dcen: pipe.dcen.clone() };

    let mut notes = Vec::new();
    let pipeline = Models { sfcen: Some((&sfcen, &net)), tudcen: Some((&pipe, &cfg.tudcen)) };
    let main = evaluate_point(sys, &pattern, &split.test, TEST_SNR_DB, cfg.eval_seed, &pipeline, &mut notes)?;
    let none: Option<(&ParamStore<f32>, &SfcenConfig)> = None;
    let dft_models = Models { sfcen: none, tudcen: Some((&dft_params, &cfg.tudcen)) };
    let dft = evaluate_point(sys, &pattern, &split.test, TEST_SNR_DB, cfg.eval_seed, &dft_models, &mut notes)?;

    // 9
    let s = nmse(&main, "sfcen", 0);
    let sp = nmse(&main, "ls_spline", 0);
    let df = nmse(&main, "ls_dft", 0);
    out.push(match (s, sp, df) {
        (Some(s), Some(sp), Some(df)) => line(
            "9 spatial-frequency extrapolation",
            s <= sp.min(df) - SFCEN_MARGIN_DB,
            format!("sfcen {s:.2} dB, ls_spline {sp:.2} dB, ls_dft {df:.2} dB (margin {:.2} dB)", sp.min(df) - s),
        ),
        _ => line("9 spatial-frequency extrapolation", false, "missing method"),
    });

    // 10
    let base_only = Models::<f32>::none();
    let mut parts = Vec::new();
    let mut ok10 = true;
    for kind in [SweepKind::FreqCr, SweepKind::SpatCr] {
        let r = run_sweep(kind, cfg, &split.test, &base_only)?;
        let v: Vec<f64> = (0..r.axes.len()).map(|p| nmse(&r.points[p], "ls_dft", 0).unwrap_or(f64::NAN)).collect();
        ok10 &= v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] >= w[0] - MONOTONE_SLACK_DB);
        parts.push(format!("{} {:?}: [{}]", kind.name(), r.axes, v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ")));
    }
    out.push(line("10 marginal effects (ls_dft)", ok10, parts.join("; ")));

    // 11
    let pairs = [
        ("ls_dft", nmse(&dft, "ls_dft", 1), nmse(&dft, "ls_dft+udccn", 1)),
        ("sfcen", nmse(&main, "sfcen", 1), nmse(&main, "sfcen+udccn", 1)),
    ];
    let ok11 = pairs.iter().all(|(_, raw, cal)| matches!((raw, cal), (Some(r), Some(c)) if *c <= r - CALIB_MARGIN_DB));
    let detail = pairs
        .iter()
        .map(|(n, r, c)| format!("{n}: {:.2} -> {:.2} dB", r.unwrap_or(f64::NAN), c.unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join("; ");
    out.push(line("11 calibration benefit", ok11, detail));

    // 12
    let tud = main.iter().find(|m| m.name == "tudcen").map(|m| m.nmse_db.clone()).unwrap_or_default();
    let hold = main.iter().find(|m| m.name == "hold").map(|m| m.nmse_db.clone()).unwrap_or_default();
    let n = sys.n_slot;
    let ok12 = tud.len() == n
        && hold.len() == n
        && (2..n).all(|t| matches!((tud[t], hold[t]), (Some(a), Some(b)) if a < b))
        && matches!((tud[2], tud[n - 1]), (Some(a), Some(b)) if b - a <= ROLLOUT_DEGRADATION_DB);
    out.push(line(
        "12 slot-level extrapolation",
        ok12,
        format!("v = {} km/h; tudcen [{}]; hold [{}]", sys.ue_velocity_kmh, fmt_series(&tud[1..]), fmt_series(&hold[1..])),
    ));

    // 13
    let rate = |name: &str| main.iter().find(|m| m.name == name).map(|m| m.sum_rate[1..].iter().flatten().sum::<f64>() / (n - 1) as f64);
    out.push(match (rate("tudcen"), rate("perfect")) {
        (Some(a), Some(p)) => line(
            "13 sum-rate share",
            a >= RATE_SHARE * p,
            format!("pipeline {a:.3} vs perfect {p:.3} bps/Hz ({:.1}%)", 100.0 * a / p),
        ),
        _ => line("13 sum-rate share", false, "missing method"),
    });

    out.push(line(
        "desk run budget",
        t_sfcen <= RUN_BUDGET_S && t_tudcen <= RUN_BUDGET_S,
        format!("sfcen training {t_sfcen:.0} s, tudcen training {t_tudcen:.0} s (limit {RUN_BUDGET_S} s each)"),
    ));
    Ok(out)
}

fn main() -> ExitCode {
    // Ignore libtest flags such as `--nocapture` or a name filter.
    let cfg = RunConfig::desk();
    let mut lines = properties();
    lines.push(determinism(&cfg));
    match experiments(&cfg) {
        Ok(l) => lines.extend(l),
        Err(e) => lines.push(line("9-13 desk experiments", false, format!("error: {e}"))),
    }
    let mut failed = 0;
    for l in &lines {
        println!("[{}] {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.detail);
        failed += usize::from(!l.passed);
    }
    println!("{} of {} acceptance lines passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
