use mxlab::autodiff::ParamStore;
use mxlab::baselines::ls_estimate;
use mxlab::eval::nmse_db;
use mxlab::pilots::{build_srs_pattern, observe_pilots};
use mxlab::sim::{generate_channel_trace, generate_traces, max_doppler_hz, ChannelModelConfig, SystemConfig};
use mxlab::training::{split_windows, train_dcen, train_udccn, TrainConfig, UplinkSource};
use mxlab::tudcen::{
    extrapolate_batch, udccn_forward, ChannelDims, GenTransformerConfig, SfseConfig, TudcenConfig, UdccnConfig,
};

/// Power series, fine for |x| < 20.
fn bessel_j0(x: f64) -> f64 {
    let q = -(x * x) / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..60 {
        term *= q / (k * k) as f64;
        sum += term;
    }
    sum
}

#[test]
fn temporal_correlation_follows_j0() {
    let sys = SystemConfig { ue_velocity_kmh: 60.0, n_subframes: 1, ..SystemConfig::desk() };
    let models: Vec<_> = (0..500).map(|k| ChannelModelConfig::new(&sys, 9000 + k)).collect();
    let traces = generate_traces(&sys, &models).unwrap();
    let fd = max_doppler_hz(&sys);
    for lag in [1usize, 3] {
        let mean = traces
            .iter()
            .map(|t| {
                let (a, b) = (t.uplink_slot(0, 1), t.uplink_slot(0, 1 + lag));
                let cross: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum();
                let pa: f64 = a.iter().map(|x| x.norm_sqr()).sum();
                let pb: f64 = b.iter().map(|x| x.norm_sqr()).sum();
                cross / (pa * pb).sqrt()
            })
            .sum::<f64>()
            / traces.len() as f64;
        let want = bessel_j0(2.0 * std::f64::consts::PI * fd * lag as f64 * sys.slot_duration_s());
        assert!((mean - want).abs() <= 0.1, "lag {lag}: {mean} vs {want}");
    }
}

#[test]
fn ls_error_tracks_snr() {
    let sys = SystemConfig::desk();
    let tr = generate_channel_trace(&sys, &ChannelModelConfig::new(&sys, 3)).unwrap();
    let p = build_srs_pattern(&sys, 4, 2, 0).unwrap();
    let slot = tr.uplink_slot(0, 0);
    let clean = ls_estimate(&observe_pilots(slot, &p, f64::INFINITY, 0).unwrap()).unwrap().h_ls;
    let (mut truth, mut est) = (Vec::new(), Vec::new());
    for seed in 0..100 {
        truth.push(clean.clone());
        est.push(ls_estimate(&observe_pilots(slot, &p, 10.0, seed).unwrap()).unwrap().h_ls);
    }
    let db = nmse_db(&truth, &est).unwrap().db;
    assert!((db + 10.0).abs() <= 0.5, "{db}");
}

fn small_net(sys: &SystemConfig, d: usize) -> TudcenConfig {
    TudcenConfig {
        dims: ChannelDims { n_tx: sys.n_tx, n_rx: sys.n_rx, n_sc: sys.n_sc },
        udccn: UdccnConfig { kernel: 3, d_feat: 4 },
        sfse: SfseConfig { n1: 2, n2: 3, d_emb: d },
        gen: GenTransformerConfig {
            n_layers: 1,
            d_rep: d,
            n_heads: 2,
            d_ff: 2 * d,
            p_attn: 0.0,
            p_ff: 0.0,
            max_tokens: sys.n_slot - 1,
        },
    }
}

#[test]
fn udccn_keeps_ideal_reciprocity() {
    // A moving UE decorrelates slot 0 and slot 1 by itself, so hold it still.
    let sys = SystemConfig { n_subframes: 10, ue_velocity_kmh: 0.0, ..SystemConfig::desk() };
    let models: Vec<_> = (0..8).map(|k| ChannelModelConfig::new(&sys, 300 + k)).collect();
    let traces = generate_traces(&sys, &models).unwrap();
    let cfg = TrainConfig { split: (6, 1, 1), epochs: 10, batch: 8, lr0: 3e-3, ..TrainConfig::full_tudcen(sys.n_slot) };
    let split = split_windows(&traces, &cfg).unwrap();
    let net = TudcenConfig { sfse: SfseConfig { n1: 2, n2: 12, d_emb: 8 }, ..small_net(&sys, 8) };
    let (store, _) = train_udccn::<f64>(&split, &net, &cfg, &UplinkSource::Truth, 0).unwrap();
    let ups: Vec<_> = split.test.iter().map(|w| w.uplink.clone()).collect();
    let truth: Vec<_> = split.test.iter().map(|w| w.downlink[0].clone()).collect();
    let db = nmse_db(&truth, &udccn_forward(&store, &net.udccn, &ups).unwrap()).unwrap().db;
    assert!(db <= -30.0, "{db}");
}

#[test]
fn static_channel_extrapolates_flat_and_positions_stay_distinct() {
    let sys = SystemConfig {
        n_tx: 4,
        n_rx: 1,
        n_rf: 2,
        n_rb: 1,
        n_sc: 12,
        n_subframes: 1,
        ue_velocity_kmh: 0.0,
        ..SystemConfig::desk()
    };
    let models: Vec<_> = (0..400).map(|k| ChannelModelConfig::new(&sys, 700 + k)).collect();
    let traces = generate_traces(&sys, &models).unwrap();
    let cfg = TrainConfig { split: (360, 20, 20), epochs: 200, batch: 16, lr0: 1e-2, ..TrainConfig::full_tudcen(sys.n_slot) };
    let split = split_windows(&traces, &cfg).unwrap();
    // Token width 2·1·2·4 = 16, so the embedding can be lossless.
    let net = small_net(&sys, 16);
    let mut udccn = mxlab::tudcen::init_udccn::<f64>(&net.udccn, 0).unwrap();
    udccn.value_mut("udccn.conv.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let (dcen, _) = train_dcen::<f64>(&split, &net, &cfg, &UplinkSource::Truth, &udccn, 0).unwrap();

    let h1: Vec<_> = split.test.iter().map(|w| w.downlink[0].clone()).collect();
    let out = extrapolate_batch(&dcen, &net, &h1, sys.n_slot - 2).unwrap();
    for k in 0..sys.n_slot - 2 {
        let est: Vec<_> = out.iter().map(|o| o[k].clone()).collect();
        let db = nmse_db(&h1, &est).unwrap().db;
        assert!(db <= -30.0, "slot {}: {db}", k + 2);
    }

    let pe = pe_rows(&dcen);
    for i in 0..pe.len() {
        for j in i + 1..pe.len() {
            let d: f64 = pe[i].iter().zip(&pe[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d > 1e-6, "rows {i} and {j}");
        }
    }
}

fn pe_rows(store: &ParamStore<f64>) -> Vec<Vec<f64>> {
    let t = store.value("dcen.pe").unwrap();
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.to_vec()).collect()
}
