use std::path::Path;

use mxlab::autodiff::{Graph, ParamStore, Tensor};
use mxlab::baselines::{interp_joint, ls_estimate, InterpMethod};
use mxlab::config::RunConfig;
use mxlab::container::{decode, encode, load_trace, save_trace, Record};
use mxlab::eval::{nmse_db, subcarrier_matrix, sum_rate, svd_precoder};
use mxlab::pilots::{build_srs_pattern, observe_pilots};
use mxlab::sfcen::{sub_element_shuffle, sub_element_unshuffle};
use mxlab::sim::{derive_downlink, generate_channel_trace, generate_traces, ChannelModelConfig, SystemConfig};
use mxlab::{Csi, C64};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn csi_strategy(shape: (usize, usize, usize)) -> impl Strategy<Value = Csi> {
    let n = shape.0 * shape.1 * shape.2;
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n)
        .prop_map(move |v| Csi::from_shape_vec(shape, v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shuffle_roundtrip(r in 1usize..=4, b in 1usize..3, n in 1usize..6, m in 1usize..5, seed in 0u64..1000) {
        let d = r * m;
        let x = Tensor::from_fn(&[b, n, d], |k| ((k as u64 * 2654435761 + seed) % 1000) as f64 / 7.0);
        let mut g = Graph::<f64>::inference();
        let v = g.constant(x.clone());
        let s = sub_element_shuffle(&mut g, v, r).unwrap();
        prop_assert_eq!(g.shape(s), &[b, n * r, m][..]);
        let u = sub_element_unshuffle(&mut g, s, r).unwrap();
        prop_assert_eq!(g.value(u), &x);
    }

    #[test]
    fn precoder_is_semi_unitary(h in csi_strategy((2, 6, 1)), n_s in 1usize..=2) {
        let f = svd_precoder(&subcarrier_matrix(&h, 0), n_s).unwrap();
        let e = f.adjoint() * &f - DMatrix::<C64>::identity(n_s, n_s);
        prop_assert!(e.iter().all(|z| z.norm() < 1e-10));
    }

    #[test]
    fn matched_precoder_bounds_rate(h in csi_strategy((2, 4, 3)), e in csi_strategy((2, 4, 3))) {
        let perfect = sum_rate(&h, &h, 2, 0.1).unwrap();
        let est = sum_rate(&h, &e, 2, 0.1).unwrap();
        prop_assert!(perfect + 1e-9 >= est);
    }

    #[test]
    fn nmse_is_scale_invariant(h in csi_strategy((2, 3, 4)), e in csi_strategy((2, 3, 4)), k in 0.1f64..10.0) {
        let a = nmse_db(std::slice::from_ref(&h), std::slice::from_ref(&e)).unwrap().db;
        let (hs, es) = (h.mapv(|z| z * k), e.mapv(|z| z * k));
        let b = nmse_db(&[hs], &[es]).unwrap().db;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn container_roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 0..40), name in "[a-z][a-z0-9_.]{0,12}") {
        let rec = vec![Record::real(name, vec![vals.len()], vals)];
        prop_assert_eq!(decode(&encode(&rec).unwrap()).unwrap(), rec);
    }

    #[test]
    fn config_overrides_roundtrip(n_rb in 1usize..10, comb in prop::sample::select(vec![1usize, 2, 4, 8]), r_s in prop::sample::select(vec![1usize, 2, 4]), seed in 0u64..1_000_000, snr in -10.0f64..30.0) {
        let text = format!("preset = desk\nsystem.n_rb = {n_rb}\npilots.comb = {comb}\npilots.r_s = {r_s}\ndataset.trace_seed = {seed}\neval.snr_db = {snr}\n");
        let c = RunConfig::parse(&text, Path::new("t")).unwrap();
        prop_assert_eq!(c.sys.n_sc, 12 * n_rb);
        prop_assert_eq!(c.sys.n_rf * r_s, c.sys.n_tx);
        let back = RunConfig::parse(&c.to_text(), Path::new("t")).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn reciprocity_preserves_magnitude(h in csi_strategy((4, 2, 3)), phases in proptest::collection::vec(-3.2f64..3.2, 6)) {
        let sys = SystemConfig { n_tx: 4, n_rx: 2, n_rf: 2, ..SystemConfig::desk() };
        let mut m = ChannelModelConfig::new(&sys, 0);
        m.calib_bs = phases[..4].iter().map(|&p| C64::from_polar(1.0, p)).collect();
        m.calib_ue = phases[4..].iter().map(|&p| C64::from_polar(1.0, p)).collect();
        let d = derive_downlink(h.view(), &m);
        for ((r, t, i), v) in d.indexed_iter() {
            prop_assert!((v.norm() - h[[t, r, i]].norm()).abs() < 1e-12);
        }
    }
}

#[test]
fn config_errors_carry_line_numbers() {
    let err = RunConfig::parse("preset = desk\n\nsystem.n_rb = eight\n", Path::new("run.cfg")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("run.cfg:3:"), "{msg}");
    assert!(RunConfig::parse("no equals sign", Path::new("x")).unwrap_err().to_string().contains(":1:"));
    assert!(RunConfig::parse("system.bogus = 1", Path::new("x")).is_err());
    assert!(RunConfig::load(Path::new("/nonexistent/run.cfg")).is_err());
}

#[test]
fn trace_file_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let sys = SystemConfig { n_subframes: 2, ..SystemConfig::desk() };
    let t = generate_channel_trace(&sys, &ChannelModelConfig::new(&sys, 4)).unwrap();
    let p = dir.path().join("t.mxl");
    save_trace(&p, &t).unwrap();
    let back = load_trace(&p).unwrap();
    assert_eq!(back.uplink.shape(), t.uplink.shape());
    let worst = back.uplink.iter().zip(t.uplink.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(load_trace(&p).is_err());
}

#[test]
fn hold_baseline_is_non_improving_at_30_kmh() {
    let sys = SystemConfig { ue_velocity_kmh: 30.0, ..SystemConfig::desk() };
    let models: Vec<_> = (0..25).map(|k| ChannelModelConfig::new(&sys, 500 + k)).collect();
    let traces = generate_traces(&sys, &models).unwrap();
    let p = build_srs_pattern(&sys, 4, 2, 0).unwrap();
    let mut per_slot = vec![Vec::new(); sys.n_slot];
    let mut n = 0;
    for (ti, tr) in traces.iter().enumerate() {
        for s in 0..tr.n_subframes() {
            let obs = observe_pilots(tr.uplink_slot(s, 0), &p, 20.0, (ti * 100 + s) as u64).unwrap();
            let est = interp_joint(ls_estimate(&obs).unwrap().h_ls.view(), InterpMethod::Dft, sys.n_tx, sys.n_sc).unwrap();
            let h1 = est.permuted_axes([1, 0, 2]).as_standard_layout().to_owned();
            for (k, acc) in per_slot.iter_mut().enumerate().skip(1) {
                acc.push(tr.downlink_slot(s, k).to_owned());
            }
            per_slot[0].push(h1);
            n += 1;
        }
    }
    assert_eq!(n, 500);
    let means: Vec<f64> =
        (1..sys.n_slot).map(|k| nmse_db(&per_slot[k], &per_slot[0]).unwrap().db).collect();
    for w in means.windows(2) {
        assert!(w[1] >= w[0] - 0.5, "{means:?}");
    }
}

#[test]
fn checkpoint_roundtrip_preserves_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ParamStore::<f64>::new();
    s.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap()).unwrap();
    s.insert("b", Tensor::new(vec![1], vec![7.0]).unwrap()).unwrap();
    let p = dir.path().join("c.ckpt");
    s.save(&p).unwrap();
    let back = ParamStore::<f64>::load(&p).unwrap();
    for n in ["a.w", "b"] {
        assert_eq!(back.value(n).unwrap(), s.value(n).unwrap());
    }
}
