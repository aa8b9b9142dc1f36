//! Knowledge-and-data-driven spatial-frequency extrapolation.
//!
//! The LS estimate on the `(A_RF, pilot subcarrier)` grid is lifted to a
//! sequence of antenna elements, grown by spatial ASEEM stages until it
//! covers every BS antenna, re-read as a sequence of subcarrier elements and
//! grown again by frequency stages until it covers every subcarrier. A
//! nearest-neighbour broadcast of the LS estimate is added at the output.
//!
//! Each ASEEM (attention-based sub-element extrapolation module) maps
//! `[N_I, d]` to `[r·N_I, d]`:
//!
//! ```text
//! x~   = x + PE
//! rc1  = MHSA(x~) + x~            ln1 = LN(rc1)
//! g    = drop(relu(rc1 W1 + b1)) W2 + b2
//! rc2  = g + ln1 W_rc             ln2 = LN(rc2)        (width r·d)
//! out  = shuffle(ln2, r)
//! ```

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::baselines::ls_estimate;
use crate::error::{Error, Result};
use crate::nn;
use crate::pilots::{PilotObservation, SrsPattern};
use crate::sim::SystemConfig;
use crate::{Csi, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct AseemConfig {
    pub n_in: usize,
    pub d_rep: usize,
    pub n_heads: usize,
    pub upscale: usize,
    pub p_attn: f64,
    pub p_seg: f64,
}

impl AseemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_rep.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_rep = {} not divisible by n_heads = {}",
                self.d_rep, self.n_heads
            )));
        }
        if self.upscale == 0 || self.n_in == 0 {
            return Err(Error::config("upscale and n_in must be >= 1"));
        }
        Ok(())
    }
}

/// Smallest `n` with `r^n >= ratio`.
pub fn stage_count(ratio: usize, r: usize) -> usize {
    if r < 2 {
        return 0;
    }
    let mut n = 0;
    let mut reach = 1;
    while reach < ratio {
        reach *= r;
        n += 1;
    }
    n
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfcenConfig {
    pub r_s: usize,
    pub r_f: usize,
    pub n_se: usize,
    pub n_fe: usize,
    pub d_sr: usize,
    pub d_fr: usize,
    /// Initial spatial elements (N_RF).
    pub n_si: usize,
    /// Initial frequency elements (N_c').
    pub n_fi: usize,
    pub n_heads: usize,
    pub p_attn: f64,
    pub p_seg: f64,
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_sc: usize,
    /// Spatial compression ratio R_s.
    pub spatial_ratio: usize,
    /// Frequency compression ratio R_f.
    pub freq_ratio: usize,
}

impl SfcenConfig {
    /// Derives stage counts from the pilot pattern with upscale factors 2.
    pub fn new(sys: &SystemConfig, pattern: &SrsPattern, d_rep: usize, n_heads: usize) -> Result<Self> {
        let (rs, rf) = (pattern.spatial_ratio(), pattern.comb);
        let cfg = SfcenConfig {
            r_s: 2,
            r_f: 2,
            n_se: stage_count(rs, 2),
            n_fe: stage_count(rf, 2),
            d_sr: d_rep,
            d_fr: d_rep,
            n_si: pattern.n_rf(),
            n_fi: pattern.n_pilot(),
            n_heads,
            p_attn: 0.5,
            p_seg: 0.5,
            n_tx: sys.n_tx,
            n_rx: sys.n_rx,
            n_sc: sys.n_sc,
            spatial_ratio: rs,
            freq_ratio: rf,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_se != stage_count(self.spatial_ratio, self.r_s)
            || self.n_fe != stage_count(self.freq_ratio, self.r_f)
        {
            return Err(Error::config("stage counts do not match compression ratios"));
        }
        if self.r_s.pow(self.n_se as u32) * self.n_si < self.n_tx
            || self.r_f.pow(self.n_fe as u32) * self.n_fi < self.n_sc
        {
            return Err(Error::config("stages cannot reach the full antenna / subcarrier grid"));
        }
        if self.n_si * self.spatial_ratio != self.n_tx || self.n_fi * self.freq_ratio != self.n_sc {
            return Err(Error::config("pilot grid inconsistent with compression ratios"));
        }
        for d in [self.d_sr, self.d_fr] {
            AseemConfig {
                n_in: 1,
                d_rep: d,
                n_heads: self.n_heads,
                upscale: 1,
                p_attn: self.p_attn,
                p_seg: self.p_seg,
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn spatial_stage(&self, i: usize) -> AseemConfig {
        AseemConfig {
            n_in: self.n_si * self.r_s.pow(i as u32),
            d_rep: self.d_sr,
            n_heads: self.n_heads,
            upscale: self.r_s,
            p_attn: self.p_attn,
            p_seg: self.p_seg,
        }
    }

    pub fn freq_stage(&self, i: usize) -> AseemConfig {
        AseemConfig {
            n_in: self.n_fi * self.r_f.pow(i as u32),
            d_rep: self.d_fr,
            n_heads: self.n_heads,
            upscale: self.r_f,
            p_attn: self.p_attn,
            p_seg: self.p_seg,
        }
    }

    fn spatial_width(&self) -> usize {
        2 * self.n_rx * self.n_fi
    }

    fn freq_width(&self) -> usize {
        2 * self.n_tx * self.n_rx
    }
}

pub fn init_aseem<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &AseemConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let (d, r) = (cfg.d_rep, cfg.upscale);
    nn::init_positional(store, &format!("{prefix}.pe"), cfg.n_in, d, rng)?;
    nn::init_mhsa(store, &format!("{prefix}.mhsa"), d, rng)?;
    nn::init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    nn::init_linear(store, &format!("{prefix}.seg1"), d, d, true, rng)?;
    nn::init_linear(store, &format!("{prefix}.seg2"), d, r * d, true, rng)?;
    nn::init_linear(store, &format!("{prefix}.rc2"), d, r * d, false, rng)?;
    nn::init_layer_norm(store, &format!("{prefix}.ln2"), r * d)
}

pub fn init_sfcen<T: Real>(cfg: &SfcenConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    nn::init_linear(&mut store, "sfcen.in_s", cfg.spatial_width(), cfg.d_sr, true, &mut rng)?;
    for i in 0..cfg.n_se {
        init_aseem(&mut store, &format!("sfcen.spatial.{i}"), &cfg.spatial_stage(i), &mut rng)?;
    }
    store.zeros("sfcen.out_s.w", &[cfg.d_sr, cfg.spatial_width()])?;
    store.zeros("sfcen.out_s.b", &[cfg.spatial_width()])?;
    nn::init_linear(&mut store, "sfcen.in_f", cfg.freq_width(), cfg.d_fr, true, &mut rng)?;
    for i in 0..cfg.n_fe {
        init_aseem(&mut store, &format!("sfcen.freq.{i}"), &cfg.freq_stage(i), &mut rng)?;
    }
    store.zeros("sfcen.out_f.w", &[cfg.d_fr, cfg.freq_width()])?;
    store.zeros("sfcen.out_f.b", &[cfg.freq_width()])?;
    Ok(store)
}

/// Adds rows `0..N_I` of the learnable table `{prefix}.pe` to `x[.., N_I, d]`.
pub fn positional_encoding<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n_in = s[s.len() - 2];
    let p = nn::positional(g, store, &format!("{prefix}.pe"), n_in)?;
    g.add(x, p)
}

/// Multi-head self-attention over each `[N_I, d]` sequence of `x[.., N_I, d]`.
pub fn mhsa<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var, cfg: &AseemConfig) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() < 2 {
        return Err(Error::shape("mhsa", format!("{s:?}")));
    }
    let tokens = s[s.len() - 2];
    let groups = g.value(x).numel() / (tokens * cfg.d_rep).max(1);
    nn::mhsa(g, store, &format!("{prefix}.mhsa"), x, groups, tokens, cfg.n_heads, cfg.p_attn, None)
}

/// Sub-element generation: `drop(relu(x_rc1 W1 + b1)) W2 + b2`, width `r·d`.
pub fn seg<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x_rc1: Var, cfg: &AseemConfig) -> Result<Var> {
    let h = nn::linear(g, store, &format!("{prefix}.seg1"), x_rc1, true)?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.p_seg)?;
    nn::linear(g, store, &format!("{prefix}.seg2"), h, true)
}

/// Flat index map of the shuffle on one `[n, r·d]` matrix:
/// `out[r·i + j, c] = x[i, c·r + j]`.
pub fn shuffle_indices(n: usize, d: usize, r: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * r * d);
    for i in 0..n {
        for j in 0..r {
            for c in 0..d {
                idx.push(i * r * d + c * r + j);
            }
        }
    }
    idx
}

fn batched(idx: &[usize], batch: usize) -> Vec<usize> {
    let block = idx.len();
    (0..batch).flat_map(|b| idx.iter().map(move |&i| b * block + i)).collect()
}

/// `[.., N_I, r·d] -> [.., r·N_I, d]`.
pub fn sub_element_shuffle<T: Real>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let k = s.len();
    if k < 2 || r == 0 || !s[k - 1].is_multiple_of(r) {
        return Err(Error::shape("sub_element_shuffle", format!("{s:?} with r = {r}")));
    }
    let (n, d) = (s[k - 2], s[k - 1] / r);
    let batch: usize = s[..k - 2].iter().product();
    let mut shape = s;
    shape[k - 2] = n * r;
    shape[k - 1] = d;
    g.gather(x, batched(&shuffle_indices(n, d, r), batch), shape)
}

/// Inverse of [`sub_element_shuffle`]: `[.., r·N_I, d] -> [.., N_I, r·d]`.
pub fn sub_element_unshuffle<T: Real>(g: &mut Graph<T>, x: Var, r: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let k = s.len();
    if k < 2 || r == 0 || !s[k - 2].is_multiple_of(r) {
        return Err(Error::shape("sub_element_unshuffle", format!("{s:?} with r = {r}")));
    }
    let (n, d) = (s[k - 2] / r, s[k - 1]);
    let fwd = shuffle_indices(n, d, r);
    let mut inv = vec![0; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    let batch: usize = s[..k - 2].iter().product();
    let mut shape = s;
    shape[k - 2] = n;
    shape[k - 1] = r * d;
    g.gather(x, batched(&inv, batch), shape)
}

/// One ASEEM stage on `x[.., N_I, d]`, giving `[.., r·N_I, d]`.
pub fn aseem_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    cfg: &AseemConfig,
) -> Result<Var> {
    let s = g.shape(x);
    if s.len() < 2 || s[s.len() - 1] != cfg.d_rep || s[s.len() - 2] != cfg.n_in {
        return Err(Error::shape("aseem", format!("{s:?} vs [{}, {}]", cfg.n_in, cfg.d_rep)));
    }
    let xt = positional_encoding(g, store, prefix, x)?;
    let att = mhsa(g, store, prefix, xt, cfg)?;
    let rc1 = g.add(att, xt)?;
    let ln1 = nn::layer_norm(g, store, &format!("{prefix}.ln1"), rc1)?;
    let xg = seg(g, store, prefix, rc1, cfg)?;
    let skip = nn::linear(g, store, &format!("{prefix}.rc2"), ln1, false)?;
    let rc2 = g.add(xg, skip)?;
    let ln2 = nn::layer_norm(g, store, &format!("{prefix}.ln2"), rc2)?;
    sub_element_shuffle(g, ln2, cfg.upscale)
}

/// `[a, r, i] -> [a, (r, i, re/im)]` real features.
fn ls_features(h_ls: &Array3<C64>) -> Vec<f64> {
    h_ls.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Runs the network on a batch of pilot observations.
///
/// Returns `[B, N_T, N_R, N_c, 2]` (real / imaginary last).
pub fn sfcen_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &SfcenConfig,
    obs: &[&PilotObservation],
) -> Result<Var> {
    let b = obs.len();
    let (nt, nr, nc, np, nrf) = (cfg.n_tx, cfg.n_rx, cfg.n_sc, cfg.n_fi, cfg.n_si);
    let (rs, rf) = (cfg.spatial_ratio, cfg.freq_ratio);
    let mut feats = Vec::with_capacity(b * nrf * cfg.spatial_width());
    let mut residual = Vec::with_capacity(b * nt * nr * nc * 2);
    for o in obs {
        let ls = ls_estimate(o)?.h_ls;
        if ls.dim() != (nrf, nr, np) {
            return Err(Error::shape("sfcen", format!("LS {:?} vs [{nrf}, {nr}, {np}]", ls.dim())));
        }
        feats.extend(ls_features(&ls).into_iter().map(T::of));
        for t in 0..nt {
            for r in 0..nr {
                for i in 0..nc {
                    let z = ls[[t / rs, r, i / rf]];
                    residual.push(T::of(z.re));
                    residual.push(T::of(z.im));
                }
            }
        }
    }
    let sw = cfg.spatial_width();
    let x0 = g.constant(Tensor::new(vec![b, nrf, sw], feats)?);

    let mut x = nn::linear(g, store, "sfcen.in_s", x0, true)?;
    for i in 0..cfg.n_se {
        x = aseem_forward(g, store, &format!("sfcen.spatial.{i}"), x, &cfg.spatial_stage(i))?;
    }
    let x = g.slice(x, 1, 0, nt)?;
    let ys = nn::linear(g, store, "sfcen.out_s", x, true)?;
    let rows: Vec<usize> = (0..nt).map(|t| t / rs).collect();
    let up = g.select(x0, 1, &rows)?;
    let hs = g.add(ys, up)?;

    // [B, N_T, (r, i, c)] -> [B, i, (t, r, c)]
    let hs = g.reshape(hs, &[b, nt, nr, np, 2])?;
    let hf = g.permute(hs, &[0, 3, 1, 2, 4])?;
    let hf = g.reshape(hf, &[b, np, cfg.freq_width()])?;
    let mut x = nn::linear(g, store, "sfcen.in_f", hf, true)?;
    for i in 0..cfg.n_fe {
        x = aseem_forward(g, store, &format!("sfcen.freq.{i}"), x, &cfg.freq_stage(i))?;
    }
    let x = g.slice(x, 1, 0, nc)?;
    let y = nn::linear(g, store, "sfcen.out_f", x, true)?;
    let y = g.reshape(y, &[b, nc, nt, nr, 2])?;
    let y = g.permute(y, &[0, 2, 3, 1, 4])?;
    let res = g.constant(Tensor::new(vec![b, nt, nr, nc, 2], residual)?);
    g.add(y, res)
}

/// `[N_T, N_R, N_c]` complex view of one sample of a `[.., 2]` real tensor.
pub fn csi_from_real<T: Real>(data: &[T], shape: (usize, usize, usize)) -> Csi {
    Array3::from_shape_fn(shape, |(a, b, c)| {
        let k = ((a * shape.1 + b) * shape.2 + c) * 2;
        C64::new(data[k].f64(), data[k + 1].f64())
    })
}

/// Interleaved real/imaginary view of a complex array.
pub fn csi_to_real<T: Real>(h: &Csi) -> Vec<T> {
    h.iter().flat_map(|z| [T::of(z.re), T::of(z.im)]).collect()
}

/// Inference on a batch of observations, returning uplink estimates `[N_T, N_R, N_c]`.
pub fn sfcen_estimate<T: Real>(store: &ParamStore<T>, cfg: &SfcenConfig, obs: &[&PilotObservation]) -> Result<Vec<Csi>> {
    let mut g = Graph::<T>::inference();
    let y = sfcen_forward(&mut g, store, cfg, obs)?;
    let per = cfg.n_tx * cfg.n_rx * cfg.n_sc * 2;
    Ok(g.value(y)
        .data()
        .chunks(per)
        .map(|c| csi_from_real(c, (cfg.n_tx, cfg.n_rx, cfg.n_sc)))
        .collect())
}
