//! Invariant and property suite shared by `mxlab check` and the
//! acceptance harness.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_params, Graph, ParamStore, Tensor, Var, DEFAULT_EPS};
use crate::baselines::{interp_joint, ls_estimate, InterpMethod};
use crate::error::Result;
use crate::eval::{mean_rate, noise_var, subcarrier_matrix, sum_rate, svd_precoder};
use crate::pilots::{build_srs_pattern, observe_pilots, overhead};
use crate::sfcen::{aseem_forward, csi_to_real, init_aseem, sub_element_shuffle, sub_element_unshuffle, AseemConfig};
use crate::sim::{coherence_time_s, derive_downlink, generate_channel_trace, ChannelModelConfig, SystemConfig};
use crate::tudcen::{
    causal_mask, gen_layer, gen_transformer_forward, init_dcen, init_sfse, init_udccn, sfse_embed_graph, udccn_forward_graph,
    ChannelDims, GenTransformerConfig, SfseConfig, TudcenConfig, UdccnConfig,
};
use crate::Csi;

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> Outcome {
    match r {
        Ok((passed, detail)) => Outcome { name, passed, detail },
        Err(e) => Outcome { name, passed: false, detail: format!("error: {e}") },
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

type Prim = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Finite-difference check of every autodiff primitive.
pub fn grad_primitives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |s: &[usize]| rand_t(s, &mut rng);
    let cases: Vec<(&str, Vec<Tensor>, Prim)> = vec![
        ("matmul", vec![r(&[2, 3, 4]), r(&[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("bmm", vec![r(&[2, 3, 4]), r(&[2, 4, 2])], Box::new(|g, v| g.bmm(v[0], v[1], false))),
        ("bmm_t", vec![r(&[2, 3, 4]), r(&[2, 2, 4])], Box::new(|g, v| g.bmm(v[0], v[1], true))),
        ("add", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![r(&[5])], Box::new(|g, v| Ok(g.scale(v[0], -1.5)))),
        ("relu", vec![r(&[4, 4])], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("softmax", vec![r(&[3, 4])], Box::new(|g, v| g.softmax_lastdim(v[0]))),
        (
            "layer_norm",
            vec![r(&[3, 4]), r(&[4]), r(&[4])],
            Box::new(|g, v| g.layer_norm_lastdim(v[0], Some(v[1]), Some(v[2]))),
        ),
        ("dropout_eval", vec![r(&[3, 4])], Box::new(|g, v| g.dropout(v[0], 0.5))),
        ("embedding", vec![r(&[4, 3])], Box::new(|g, v| g.embedding_lookup(v[0], &[3, 0, 3]))),
        ("gather", vec![r(&[2, 3])], Box::new(|g, v| g.gather(v[0], vec![5, 0, 2, 2], vec![2, 2]))),
        ("conv2d", vec![r(&[3, 4, 2]), r(&[18, 3])], Box::new(|g, v| g.conv2d_same(v[0], v[1], 3))),
        ("reshape", vec![r(&[2, 6])], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("transpose", vec![r(&[2, 3, 4])], Box::new(|g, v| g.transpose(v[0]))),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("concat", vec![r(&[2, 3]), r(&[2, 1])], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", vec![r(&[4, 3])], Box::new(|g, v| g.slice(v[0], 1, 1, 2))),
        ("select", vec![r(&[4, 3])], Box::new(|g, v| g.select(v[0], 0, &[3, 1, 3]))),
        ("split", vec![r(&[5, 2])], Box::new(|g, v| {
            let p = g.split(v[0], 0, &[2, 3])?;
            let a = g.scale(p[0], 2.0);
            let a = g.sum(a);
            let b = g.sum(p[1]);
            let (a, b) = (g.reshape(a, &[1])?, g.reshape(b, &[1])?);
            g.concat(&[a, b], 0)
        })),
        ("sum", vec![r(&[4, 3])], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("mean", vec![r(&[4, 3])], Box::new(|g, v| Ok(g.mean(v[0])))),
    ];
    let mut worst = (0.0f64, "");
    for (name, inputs, f) in &cases {
        match grad_check(f, inputs, DEFAULT_EPS, 1) {
            Ok(e) if e > worst.0 => worst = (e, name),
            Ok(_) => {}
            Err(e) => return outcome("grad_primitives", Err(e)),
        }
    }
    Outcome {
        name: "grad_primitives",
        passed: worst.0 <= GRAD_TOL,
        detail: format!("{} primitives, worst rel err {:.2e} ({})", cases.len(), worst.0, worst.1),
    }
}

/// Finite-difference check of a full ASEEM at `N_I = 4`, `d_R = 8`.
pub fn grad_aseem() -> Outcome {
    outcome("grad_aseem", (|| {
        let cfg = AseemConfig { n_in: 4, d_rep: 8, n_heads: 2, upscale: 2, p_attn: 0.0, p_seg: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        init_aseem(&mut store, "a", &cfg, &mut rng)?;
        let x0 = rand_t(&[2, 4, 8], &mut rng);
        let ep = grad_check_params(
            |g, st| {
                let x = g.constant(x0.clone());
                aseem_forward(g, st, "a", x, &cfg)
            },
            &store,
            DEFAULT_EPS,
            3,
        )?;
        let ex = grad_check(|g, v| aseem_forward(g, &store, "a", v[0], &cfg), &[x0], DEFAULT_EPS, 4)?;
        let e = ep.max(ex);
        Ok((e <= GRAD_TOL, format!("max rel err {e:.2e}")))
    })())
}

fn toy_tudcen() -> TudcenConfig {
    TudcenConfig {
        dims: ChannelDims { n_tx: 4, n_rx: 1, n_sc: 6 },
        udccn: UdccnConfig { kernel: 3, d_feat: 2 },
        sfse: SfseConfig { n1: 2, n2: 3, d_emb: 8 },
        gen: GenTransformerConfig { n_layers: 1, d_rep: 8, n_heads: 2, d_ff: 8, p_attn: 0.0, p_ff: 0.0, max_tokens: 7 },
    }
}

/// Finite-difference check of the calibration network.
pub fn grad_udccn() -> Outcome {
    outcome("grad_udccn", (|| {
        let cfg = toy_tudcen();
        let store = init_udccn::<f64>(&cfg.udccn, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_t(&[1, 4, 6, 2], &mut rng);
        let ex = grad_check(|g, v| udccn_forward_graph(g, &store, &cfg.udccn, cfg.dims, v[0]), std::slice::from_ref(&x0), DEFAULT_EPS, 3)?;
        let ep = grad_check_params(
            |g, st| {
                let x = g.constant(x0.clone());
                udccn_forward_graph(g, st, &cfg.udccn, cfg.dims, x)
            },
            &store,
            DEFAULT_EPS,
            4,
        )?;
        let e = ep.max(ex);
        Ok((e <= GRAD_TOL, format!("max rel err {e:.2e}")))
    })())
}

/// Finite-difference check of one masked generative layer.
pub fn grad_gen_layer() -> Outcome {
    outcome("grad_gen_layer", (|| {
        let cfg = toy_tudcen();
        let store = init_dcen::<f64>(&cfg, 5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_t(&[2, 4, 8], &mut rng);
        let ex = grad_check(
            |g, v| {
                let m = g.constant(causal_mask(4));
                gen_layer(g, &store, "dcen.layer.0", &cfg.gen, v[0], m)
            },
            std::slice::from_ref(&x0),
            DEFAULT_EPS,
            1,
        )?;
        let ep = grad_check_params(
            |g, st| {
                let x = g.constant(x0.clone());
                let m = g.constant(causal_mask(4));
                gen_layer(g, st, "dcen.layer.0", &cfg.gen, x, m)
            },
            &store,
            DEFAULT_EPS,
            2,
        )?;
        let e = ep.max(ex);
        Ok((e <= GRAD_TOL, format!("max rel err {e:.2e}")))
    })())
}

/// Noiseless LS equals the sub-sampled channel bit for bit.
pub fn ls_exactness() -> Outcome {
    outcome("ls_exactness", (|| {
        let sys = SystemConfig::desk();
        let trace = generate_channel_trace(&sys, &ChannelModelConfig::new(&sys, 3))?;
        let mut checked = 0usize;
        for (comb, r_s) in [(1, 1), (2, 2), (4, 2), (8, 4)] {
            let p = build_srs_pattern(&sys.with_spatial_ratio(r_s)?, comb, r_s, 9)?;
            let slot = trace.uplink_slot(0, 0);
            let ls = ls_estimate(&observe_pilots(slot, &p, f64::INFINITY, 0)?)?.h_ls;
            for (a, &ant) in p.rf_antenna_set.iter().enumerate() {
                for r in 0..sys.n_rx {
                    for (i, &sc) in p.pilot_sc_indices.iter().enumerate() {
                        if ls[[a, r, i]] != slot[[ant, r, sc]] {
                            return Ok((false, format!("R_f={comb}, R_s={r_s}: mismatch at ({a},{r},{i})")));
                        }
                        checked += 1;
                    }
                }
            }
        }
        Ok((true, format!("{checked} entries bitwise equal")))
    })())
}

/// Shuffle then unshuffle is the identity for 100 random tensors.
pub fn shuffle_bijection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 0..100 {
        let r = 1 + k % 4;
        let (b, n, d) = (rng.random_range(1..3), rng.random_range(1..6), r * rng.random_range(1..5));
        let x = rand_t(&[b, n, d], &mut rng);
        let res = (|| {
            let mut g = Graph::<f64>::inference();
            let v = g.constant(x.clone());
            let s = sub_element_shuffle(&mut g, v, r)?;
            let u = sub_element_unshuffle(&mut g, s, r)?;
            Ok(g.value(u) == &x && g.shape(s) == [b, n * r, d / r])
        })();
        match res {
            Ok(true) => {}
            Ok(false) => return Outcome { name: "shuffle_bijection", passed: false, detail: format!("case {k} (r={r}) not restored") },
            Err(e) => return outcome("shuffle_bijection", Err(e)),
        }
    }
    Outcome { name: "shuffle_bijection", passed: true, detail: "100 tensors over r in 1..=4 restored exactly".into() }
}

/// Perturbing token `t` of a 7-token input leaves outputs before `t` unchanged.
pub fn causality() -> Outcome {
    outcome("causality", (|| {
        let mut cfg = toy_tudcen();
        cfg.gen.n_layers = 2;
        let store = init_dcen::<f64>(&cfg, 3)?;
        let (n, d) = (7, cfg.gen.d_rep);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = rand_t(&[2, n, d], &mut rng);
        let run = |x: &Tensor| -> Result<Tensor> {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let y = gen_transformer_forward(&mut g, &store, &cfg.gen, v)?;
            Ok(g.value(y).clone())
        };
        let y0 = run(&base)?;
        for t in 0..n {
            let mut x = base.clone();
            for b in 0..2 {
                for c in 0..d {
                    x.data_mut()[(b * n + t) * d + c] += rng.random_range(0.5..1.5);
                }
            }
            let y = run(&x)?;
            for b in 0..2 {
                let lo = b * n * d;
                if y.data()[lo..lo + t * d] != y0.data()[lo..lo + t * d] {
                    return Ok((false, format!("token {t} leaked into earlier positions")));
                }
            }
        }
        Ok((true, format!("{n} tokens, earlier outputs bit-identical")))
    })())
}

/// Precoder orthonormality and the perfect-CSI rate bound on every slot.
pub fn svd_precoder_checks() -> Outcome {
    outcome("svd_precoder", (|| {
        let sys = SystemConfig::desk();
        let model = ChannelModelConfig::new(&sys, 12);
        let trace = generate_channel_trace(&sys, &model)?;
        let p = build_srs_pattern(&sys, 4, 2, 0)?;
        let mut worst_orth = 0.0f64;
        let mut slots = 0usize;
        let sigma2 = noise_var(20.0);
        for s in 0..sys.n_subframes {
            let obs = observe_pilots(trace.uplink_slot(s, 0), &p, 20.0, s as u64)?;
            let est = interp_joint(ls_estimate(&obs)?.h_ls.view(), InterpMethod::Dft, sys.n_tx, sys.n_sc)?;
            let est_dl = derive_downlink(est.view(), &model);
            for k in 1..sys.n_slot {
                let h: Csi = trace.downlink_slot(s, k).to_owned();
                for i in (0..sys.n_sc).step_by(7) {
                    let f = svd_precoder(&subcarrier_matrix(&h, i), sys.n_rx)?;
                    let e = (f.adjoint() * &f - nalgebra::DMatrix::identity(sys.n_rx, sys.n_rx)).iter().map(|z| z.norm()).fold(0.0, f64::max);
                    worst_orth = worst_orth.max(e);
                }
                let perfect = sum_rate(&h, &h, sys.n_rx, sigma2)?;
                let estimated = mean_rate(std::slice::from_ref(&h), std::slice::from_ref(&est_dl), sys.n_rx, sigma2)?;
                if perfect + 1e-9 < estimated {
                    return Ok((false, format!("subframe {s} slot {k}: perfect {perfect} < estimated {estimated}")));
                }
                slots += 1;
            }
        }
        Ok((worst_orth <= 1e-10, format!("max |F^H F - I| = {worst_orth:.1e}; rate bound held on {slots} slots")))
    })())
}

/// Embedding parameter count and instrumented MACs at full size.
pub fn sfse_accounting() -> Outcome {
    outcome("sfse_accounting", (|| {
        let dims = ChannelDims { n_tx: 32, n_rx: 4, n_sc: 624 };
        let cfg = SfseConfig::full();
        let mut store = ParamStore::<f64>::new();
        init_sfse(&mut store, &cfg, dims, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params = store.value("sfse.emb.w")?.numel();
        let formula = 2 * dims.n_rx * (dims.n_tx / cfg.n1) * (dims.n_sc / cfg.n2) * cfg.d_emb;
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_fn(&[cfg.n_groups(), cfg.group_width(dims)], |k| (k % 17) as f64));
        g.reset_macs();
        sfse_embed_graph(&mut g, &store, x)?;
        let macs = g.macs() as f64;
        let expect = (2 * dims.n_rx * dims.n_tx * dims.n_sc * cfg.d_emb) as f64;
        let rel = (macs - expect).abs() / expect;
        let ok = params == formula && params == 1_703_936 && rel <= 0.01;
        Ok((ok, format!("params {params} (formula {formula}); MACs {macs} vs {expect} ({:.2}%)", 100.0 * rel)))
    })())
}

/// `0.5 / f_d` at 28 GHz and 60 km/h.
pub fn coherence_time() -> Outcome {
    let ms = coherence_time_s(&SystemConfig::full()) * 1e3;
    Outcome { name: "coherence_time", passed: (0.31..=0.33).contains(&ms), detail: format!("{ms:.4} ms") }
}

/// Pilot RE reduction of `(R_s = 2, R_f = 4, T_p = 1 ms)`.
pub fn overhead_ratios() -> Outcome {
    outcome("overhead_ratios", (|| {
        let sys = SystemConfig::full();
        let full_sys = sys.with_spatial_ratio(1)?;
        let ours = overhead(&sys, &build_srs_pattern(&sys, 4, 2, 0)?, 1.0)?;
        let full = overhead(&full_sys, &build_srs_pattern(&full_sys, 1, 1, 0)?, 1.0)?;
        let fast_sys = SystemConfig { srs_period_ms: 0.25, ..sys.clone() };
        let fast = overhead(&fast_sys, &build_srs_pattern(&fast_sys, 4, 2, 0)?, 1.0)?;
        let ok = full.c_sl == 8 * ours.c_sl && fast.c_o == 4 * ours.c_o;
        Ok((ok, format!("per event {} vs {} (x{}); per 1 ms {} vs {} (x{})", full.c_sl, ours.c_sl, full.c_sl / ours.c_sl.max(1), fast.c_o, ours.c_o, fast.c_o / ours.c_o.max(1))))
    })())
}

/// Uplink-to-downlink real layout round trip used by every network input.
fn real_layout_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = Csi::from_shape_fn((3, 2, 5), |_| crate::C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let back = crate::sfcen::csi_from_real(&csi_to_real::<f64>(&h), (3, 2, 5));
    Outcome { name: "real_layout_roundtrip", passed: back == h, detail: "complex <-> re/im interleave".into() }
}

/// Every check, in a fixed order.
pub fn run_all() -> Vec<Outcome> {
    vec![
        grad_primitives(),
        grad_aseem(),
        grad_udccn(),
        grad_gen_layer(),
        ls_exactness(),
        shuffle_bijection(),
        causality(),
        svd_precoder_checks(),
        sfse_accounting(),
        coherence_time(),
        overhead_ratios(),
        real_layout_roundtrip(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for o in run_all() {
            assert!(o.passed, "{o}");
        }
    }
}
