//! Slot-level downlink extrapolation.
//!
//! Three pieces: a convolutional calibration network (UDCCN) mapping the
//! uplink estimate to the slot-1 downlink channel, a strided grouping
//! embedding (SFSE) that turns one downlink channel into one token per
//! antenna/subcarrier group, and a causal Transformer (DCEN) generating the
//! remaining slots one at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::sfcen::{csi_from_real, csi_to_real};
use crate::Csi;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UdccnConfig {
    pub kernel: usize,
    pub d_feat: usize,
}

impl UdccnConfig {
    pub fn full() -> Self {
        UdccnConfig { kernel: 3, d_feat: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.d_feat == 0 {
            return Err(Error::config(format!(
                "kernel must be odd and d_feat >= 1 (got k = {}, d_f = {})",
                self.kernel, self.d_feat
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfseConfig {
    pub n1: usize,
    pub n2: usize,
    pub d_emb: usize,
}

impl SfseConfig {
    pub fn full() -> Self {
        SfseConfig { n1: 4, n2: 12, d_emb: 512 }
    }

    pub fn n_groups(&self) -> usize {
        self.n1 * self.n2
    }

    /// Pre-projection token width `2·N_R·(N_T/n1)·(N_c/n2)`.
    pub fn group_width(&self, dims: ChannelDims) -> usize {
        2 * dims.n_rx * (dims.n_tx / self.n1) * (dims.n_sc / self.n2)
    }

    /// Weights of the embedding projection.
    pub fn linear_param_count(&self, dims: ChannelDims) -> usize {
        self.group_width(dims) * self.d_emb
    }

    pub fn validate(&self, dims: ChannelDims) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 || !dims.n_tx.is_multiple_of(self.n1) || !dims.n_sc.is_multiple_of(self.n2) {
            return Err(Error::config(format!(
                "sampling factors n1 = {}, n2 = {} must divide N_T = {}, N_c = {}",
                self.n1, self.n2, dims.n_tx, dims.n_sc
            )));
        }
        if self.d_emb == 0 {
            return Err(Error::config("d_emb must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenTransformerConfig {
    pub n_layers: usize,
    pub d_rep: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub p_attn: f64,
    pub p_ff: f64,
    pub max_tokens: usize,
}

impl GenTransformerConfig {
    pub fn full(n_slot: usize) -> Self {
        GenTransformerConfig {
            n_layers: 4,
            d_rep: 512,
            n_heads: 4,
            d_ff: 2048,
            p_attn: 0.5,
            p_ff: 0.5,
            max_tokens: n_slot - 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_rep.is_multiple_of(self.n_heads) || self.d_ff < self.d_rep {
            return Err(Error::config(format!(
                "need d_rep % n_heads == 0 and d_ff >= d_rep (d_rep = {}, heads = {}, d_ff = {})",
                self.d_rep, self.n_heads, self.d_ff
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be >= 1"));
        }
        Ok(())
    }
}

/// Downlink channel dimensions `[N_R, N_T, N_c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelDims {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_sc: usize,
}

impl ChannelDims {
    pub fn numel(&self) -> usize {
        self.n_tx * self.n_rx * self.n_sc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TudcenConfig {
    pub dims: ChannelDims,
    pub udccn: UdccnConfig,
    pub sfse: SfseConfig,
    pub gen: GenTransformerConfig,
}

impl TudcenConfig {
    pub fn validate(&self) -> Result<()> {
        self.udccn.validate()?;
        self.sfse.validate(self.dims)?;
        self.gen.validate()?;
        if self.sfse.d_emb != self.gen.d_rep {
            return Err(Error::config(format!(
                "d_emb = {} must equal d_rep = {}",
                self.sfse.d_emb, self.gen.d_rep
            )));
        }
        Ok(())
    }
}

pub fn init_udccn<T: Real>(cfg: &UdccnConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let k = cfg.kernel;
    store.xavier("udccn.conv.w", k * k * 2, cfg.d_feat, &mut rng)?;
    // Identity on the passthrough channels, zero on the conv features.
    let df = cfg.d_feat;
    store.insert(
        "udccn.proj.w",
        Tensor::from_fn(&[2 + df, 2], |i| if i == 0 || i == 3 { T::one() } else { T::zero() }),
    )?;
    Ok(store)
}

/// `x[B, N_T·N_R, N_c, 2]` uplink view to `[B, N_R, N_T, N_c, 2]` downlink view.
pub fn udccn_forward_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &UdccnConfig,
    dims: ChannelDims,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != dims.n_tx * dims.n_rx || s[2] != dims.n_sc || s[3] != 2 {
        return Err(Error::shape("udccn", format!("{s:?}")));
    }
    let b = s[0];
    let w = g.param(store, "udccn.conv.w")?;
    let f = g.conv2d_same(x, w, cfg.kernel)?;
    let f = g.relu(f);
    let cat = g.concat(&[x, f], 3)?;
    let wd = g.param(store, "udccn.proj.w")?;
    let y = g.matmul(cat, wd)?;
    let y = g.reshape(y, &[b, dims.n_tx, dims.n_rx, dims.n_sc, 2])?;
    g.permute(y, &[0, 2, 1, 3, 4])
}

/// Calibrates a batch of uplink estimates `[N_T, N_R, N_c]` into slot-1
/// downlink estimates `[N_R, N_T, N_c]`.
pub fn udccn_forward<T: Real>(store: &ParamStore<T>, cfg: &UdccnConfig, h_ul: &[Csi]) -> Result<Vec<Csi>> {
    let Some(first) = h_ul.first() else {
        return Ok(Vec::new());
    };
    let (nt, nr, nc) = first.dim();
    let dims = ChannelDims { n_tx: nt, n_rx: nr, n_sc: nc };
    let mut data = Vec::with_capacity(h_ul.len() * dims.numel() * 2);
    for h in h_ul {
        if h.dim() != (nt, nr, nc) {
            return Err(Error::shape("udccn", format!("{:?} vs {:?}", h.dim(), (nt, nr, nc))));
        }
        data.extend(csi_to_real::<T>(h));
    }
    let mut g = Graph::inference();
    let x = g.constant(Tensor::new(vec![h_ul.len(), nt * nr, nc, 2], data)?);
    let y = udccn_forward_graph(&mut g, store, cfg, dims, x)?;
    Ok(g.value(y)
        .data()
        .chunks(dims.numel() * 2)
        .map(|c| csi_from_real(c, (nr, nt, nc)))
        .collect())
}

/// Source offsets in the real view `[N_R, N_T, N_c, 2]` for each entry of
/// the grouped view `[n1·n2, w]`. Group `a·n2 + b` holds antennas
/// `a, a + n1, ..` and subcarriers `b, b + n2, ..`, laid out `(r, t', i', re/im)`.
pub fn group_indices(cfg: &SfseConfig, dims: ChannelDims) -> Vec<usize> {
    let (nt, nc) = (dims.n_tx, dims.n_sc);
    let (kt, kc) = (nt / cfg.n1, nc / cfg.n2);
    let mut idx = Vec::with_capacity(dims.numel() * 2);
    for a in 0..cfg.n1 {
        for b in 0..cfg.n2 {
            for r in 0..dims.n_rx {
                for tt in 0..kt {
                    for ii in 0..kc {
                        let (t, i) = (a + cfg.n1 * tt, b + cfg.n2 * ii);
                        let base = ((r * nt + t) * nc + i) * 2;
                        idx.extend([base, base + 1]);
                    }
                }
            }
        }
    }
    idx
}

fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (o, &i) in idx.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

/// Per-row mean and standard deviation of a `[rows, w]` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn group_stats<T: Real>(rows: &[T], w: usize) -> GroupStats {
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for row in rows.chunks(w) {
        let m = row.iter().map(|x| x.f64()).sum::<f64>() / w as f64;
        let v = row.iter().map(|x| (x.f64() - m).powi(2)).sum::<f64>() / w as f64;
        mean.push(m);
        std.push((v + crate::autodiff::LN_EPS).sqrt());
    }
    GroupStats { mean, std }
}

pub fn init_sfse<T: Real>(store: &mut ParamStore<T>, cfg: &SfseConfig, dims: ChannelDims, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate(dims)?;
    let w = cfg.group_width(dims);
    nn::init_layer_norm(store, "sfse.emb_ln1", w)?;
    nn::init_linear(store, "sfse.emb", w, cfg.d_emb, false, rng)?;
    nn::init_layer_norm(store, "sfse.emb_ln2", cfg.d_emb)?;
    nn::init_layer_norm(store, "sfse.inv_ln1", cfg.d_emb)?;
    nn::init_linear(store, "sfse.inv", cfg.d_emb, w, true, rng)?;
    nn::init_layer_norm(store, "sfse.inv_ln2", w)
}

/// Grouped rows `[.., w]` to tokens `[.., d_emb]`: LN, projection, LN.
pub fn sfse_embed_graph<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = nn::layer_norm(g, store, "sfse.emb_ln1", x)?;
    let h = nn::linear(g, store, "sfse.emb", h, false)?;
    nn::layer_norm(g, store, "sfse.emb_ln2", h)
}

/// Tokens `[.., d_emb]` back to grouped rows `[.., w]`, rescaled per row by
/// `stats` (one entry per row).
pub fn sfse_inverse_graph<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, tok: Var, stats: &GroupStats) -> Result<Var> {
    let h = nn::layer_norm(g, store, "sfse.inv_ln1", tok)?;
    let h = nn::linear(g, store, "sfse.inv", h, true)?;
    let h = nn::layer_norm(g, store, "sfse.inv_ln2", h)?;
    let shape = g.shape(h).to_vec();
    let w = *shape.last().unwrap_or(&0);
    let rows = g.value(h).numel() / w.max(1);
    if stats.std.len() != rows || stats.mean.len() != rows {
        return Err(Error::shape("sfse_inverse", format!("{rows} rows, {} stats", stats.std.len())));
    }
    let sd = g.constant(Tensor::from_fn(&shape, |i| T::of(stats.std[i / w])));
    let mu = g.constant(Tensor::from_fn(&shape, |i| T::of(stats.mean[i / w])));
    let h = g.mul(h, sd)?;
    g.add(h, mu)
}

/// Real views `[B, L, N_R·N_T·N_c·2]` to grouped rows `[B·G, L, w]` plus their stats.
fn group_sequences<T: Real>(cfg: &SfseConfig, dims: ChannelDims, seqs: &[Vec<&Csi>]) -> Result<(Tensor<T>, GroupStats)> {
    let b = seqs.len();
    let l = seqs.first().map_or(0, Vec::len);
    let (gn, w) = (cfg.n_groups(), cfg.group_width(dims));
    let idx = group_indices(cfg, dims);
    let mut out = vec![T::zero(); b * gn * l * w];
    for (bi, seq) in seqs.iter().enumerate() {
        if seq.len() != l {
            return Err(Error::shape("sfse", "ragged sequence batch".to_string()));
        }
        for (t, h) in seq.iter().enumerate() {
            if h.dim() != (dims.n_rx, dims.n_tx, dims.n_sc) {
                return Err(Error::shape("sfse", format!("{:?}", h.dim())));
            }
            let real: Vec<T> = csi_to_real(h);
            for gi in 0..gn {
                let dst = ((bi * gn + gi) * l + t) * w;
                for e in 0..w {
                    out[dst + e] = real[idx[gi * w + e]];
                }
            }
        }
    }
    let stats = group_stats(&out, w);
    Ok((Tensor::new(vec![b * gn, l, w], out)?, stats))
}

/// Grouped rows `[B·G, L, w]` back to per-slot channels.
fn ungroup<T: Real>(cfg: &SfseConfig, dims: ChannelDims, data: &[T], b: usize, l: usize) -> Vec<Vec<Csi>> {
    let (gn, w) = (cfg.n_groups(), cfg.group_width(dims));
    let inv = invert(&group_indices(cfg, dims));
    (0..b)
        .map(|bi| {
            (0..l)
                .map(|t| {
                    let real: Vec<T> = inv
                        .iter()
                        .map(|&o| {
                            let (gi, e) = (o / w, o % w);
                            data[((bi * gn + gi) * l + t) * w + e]
                        })
                        .collect();
                    csi_from_real(&real, (dims.n_rx, dims.n_tx, dims.n_sc))
                })
                .collect()
        })
        .collect()
}

/// Embeds one downlink channel into `[n1·n2, d_emb]` tokens.
pub fn sfse_embed<T: Real>(store: &ParamStore<T>, cfg: &SfseConfig, h: &Csi) -> Result<(Tensor<T>, GroupStats)> {
    let (nr, nt, nc) = h.dim();
    let dims = ChannelDims { n_tx: nt, n_rx: nr, n_sc: nc };
    cfg.validate(dims)?;
    let (x, stats) = group_sequences::<T>(cfg, dims, &[vec![h]])?;
    let mut g = Graph::inference();
    let x = g.constant(x.reshape(&[cfg.n_groups(), cfg.group_width(dims)])?);
    let y = sfse_embed_graph(&mut g, store, x)?;
    Ok((g.value(y).clone(), stats))
}

/// Inverse of [`sfse_embed`]; `stats` sets the per-group scale.
pub fn sfse_inverse<T: Real>(
    store: &ParamStore<T>,
    cfg: &SfseConfig,
    dims: ChannelDims,
    tokens: &Tensor<T>,
    stats: &GroupStats,
) -> Result<Csi> {
    if tokens.shape() != [cfg.n_groups(), cfg.d_emb] {
        return Err(Error::shape("sfse_inverse", format!("{:?}", tokens.shape())));
    }
    let mut g = Graph::inference();
    let t = g.constant(tokens.clone());
    let y = sfse_inverse_graph(&mut g, store, t, stats)?;
    Ok(ungroup(cfg, dims, g.value(y).data(), 1, 1).remove(0).remove(0))
}

/// `[n, n]` additive mask: `-inf` strictly above the diagonal, zero elsewhere.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |k| if k % n > k / n { T::neg_infinity() } else { T::zero() })
}

pub fn init_gen_transformer<T: Real>(store: &mut ParamStore<T>, cfg: &GenTransformerConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_rep;
    nn::init_positional(store, "dcen.pe", cfg.max_tokens, d, rng)?;
    for i in 0..cfg.n_layers {
        let p = format!("dcen.layer.{i}");
        nn::init_mhsa(store, &format!("{p}.mhsa"), d, rng)?;
        nn::init_layer_norm(store, &format!("{p}.ln1"), d)?;
        nn::init_linear(store, &format!("{p}.ff1"), d, cfg.d_ff, true, rng)?;
        nn::init_linear(store, &format!("{p}.ff2"), cfg.d_ff, d, true, rng)?;
        nn::init_layer_norm(store, &format!("{p}.ln2"), d)?;
    }
    Ok(())
}

/// One masked layer on `x[G, L, d]`.
pub fn gen_layer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &GenTransformerConfig,
    x: Var,
    mask: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (groups, tokens) = (s[0], s[1]);
    let a = nn::mhsa(g, store, &format!("{prefix}.mhsa"), x, groups, tokens, cfg.n_heads, cfg.p_attn, Some(mask))?;
    let rc1 = g.add(a, x)?;
    let ln1 = nn::layer_norm(g, store, &format!("{prefix}.ln1"), rc1)?;
    let h = nn::linear(g, store, &format!("{prefix}.ff1"), rc1, true)?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.p_ff)?;
    let ff = nn::linear(g, store, &format!("{prefix}.ff2"), h, true)?;
    let rc2 = g.add(ff, ln1)?;
    nn::layer_norm(g, store, &format!("{prefix}.ln2"), rc2)
}

/// Temporal PE plus `n_layers` masked layers on tokens `[G, L, d]`.
pub fn gen_transformer_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &GenTransformerConfig,
    tokens: Var,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[2] != cfg.d_rep {
        return Err(Error::shape("gen_transformer", format!("{s:?}")));
    }
    let l = s[1];
    if l > cfg.max_tokens {
        return Err(Error::TokenOverflow { have: l, max: cfg.max_tokens });
    }
    let pe = nn::positional(g, store, "dcen.pe", l)?;
    let mut x = g.add(tokens, pe)?;
    let mask = g.constant(causal_mask(l));
    for i in 0..cfg.n_layers {
        x = gen_layer(g, store, &format!("dcen.layer.{i}"), cfg, x, mask)?;
    }
    Ok(x)
}

/// SFSE and generative Transformer weights.
pub fn init_dcen<T: Real>(cfg: &TudcenConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_sfse(&mut store, &cfg.sfse, cfg.dims, &mut rng)?;
    init_gen_transformer(&mut store, &cfg.gen, &mut rng)?;
    Ok(store)
}

/// Teacher-forced pass: each input sequence holds `L` downlink channels;
/// returns predictions of the following `L` slots as a real view
/// `[B, L, N_R, N_T, N_c, 2]`.
pub fn dcen_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &TudcenConfig,
    seqs: &[Vec<&Csi>],
) -> Result<Var> {
    let (b, l) = (seqs.len(), seqs.first().map_or(0, Vec::len));
    let per = cfg.dims.numel() * 2;
    let mut data = Vec::with_capacity(b * l * per);
    for seq in seqs {
        if seq.len() != l {
            return Err(Error::shape("dcen", "ragged sequence batch".to_string()));
        }
        for h in seq {
            if h.dim() != (cfg.dims.n_rx, cfg.dims.n_tx, cfg.dims.n_sc) {
                return Err(Error::shape("dcen", format!("{:?}", h.dim())));
            }
            data.extend(csi_to_real::<T>(h));
        }
    }
    let x = g.constant(Tensor::new(vec![b, l, per], data)?);
    dcen_forward_var(g, store, cfg, x)
}

/// As [`dcen_forward`] on a real view `[B, L, N_R·N_T·N_c·2]` already in
/// the graph, so gradients can reach whatever produced it.
pub fn dcen_forward_var<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TudcenConfig, seq: Var) -> Result<Var> {
    let s = g.shape(seq).to_vec();
    let per = cfg.dims.numel() * 2;
    if s.len() != 3 || s[2] != per {
        return Err(Error::shape("dcen", format!("{s:?}")));
    }
    let (b, l) = (s[0], s[1]);
    let idx = group_indices(&cfg.sfse, cfg.dims);
    let (gn, w) = (cfg.sfse.n_groups(), cfg.sfse.group_width(cfg.dims));
    let mut gidx = Vec::with_capacity(b * l * per);
    for bi in 0..b {
        for gi in 0..gn {
            for t in 0..l {
                gidx.extend(idx[gi * w..(gi + 1) * w].iter().map(|&src| (bi * l + t) * per + src));
            }
        }
    }
    let x = g.gather(seq, gidx, vec![b * gn, l, w])?;
    let stats = group_stats(g.value(x).data(), w);
    let tok = sfse_embed_graph(g, store, x)?;
    let out = gen_transformer_forward(g, store, &cfg.gen, tok)?;
    let rows = sfse_inverse_graph(g, store, out, &stats)?;
    let inv = invert(&idx);
    let mut oidx = Vec::with_capacity(b * l * per);
    for bi in 0..b {
        for t in 0..l {
            oidx.extend(inv.iter().map(|&o| ((bi * gn + o / w) * l + t) * w + o % w));
        }
    }
    let d = cfg.dims;
    g.gather(rows, oidx, vec![b, l, d.n_rx, d.n_tx, d.n_sc, 2])
}

/// Autoregressive rollout from slot-1 channels: returns `n_out` generated
/// slots per input.
pub fn extrapolate_batch<T: Real>(
    store: &ParamStore<T>,
    cfg: &TudcenConfig,
    h1: &[Csi],
    n_out: usize,
) -> Result<Vec<Vec<Csi>>> {
    let mut seqs: Vec<Vec<Csi>> = h1.iter().map(|h| vec![h.clone()]).collect();
    if n_out > 0 && n_out > cfg.gen.max_tokens {
        return Err(Error::TokenOverflow { have: n_out, max: cfg.gen.max_tokens });
    }
    for _ in 0..n_out {
        let refs: Vec<Vec<&Csi>> = seqs.iter().map(|s| s.iter().collect()).collect();
        let l = refs.first().map_or(0, Vec::len);
        let mut g = Graph::<T>::inference();
        let y = dcen_forward(&mut g, store, cfg, &refs)?;
        let per = cfg.dims.numel() * 2;
        let data = g.value(y).data();
        for (bi, s) in seqs.iter_mut().enumerate() {
            let off = (bi * l + l - 1) * per;
            s.push(csi_from_real(&data[off..off + per], (cfg.dims.n_rx, cfg.dims.n_tx, cfg.dims.n_sc)));
        }
    }
    Ok(seqs.into_iter().map(|mut s| s.split_off(1)).collect())
}

/// Slots `2..N_slot-1` generated from the slot-1 downlink channel.
pub fn extrapolate_slots<T: Real>(store: &ParamStore<T>, cfg: &TudcenConfig, h1: &Csi, n_slot: usize) -> Result<Vec<Csi>> {
    let n_out = n_slot.saturating_sub(2);
    Ok(extrapolate_batch(store, cfg, std::slice::from_ref(h1), n_out)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, grad_check_params, DEFAULT_EPS};
    use crate::C64;
    use ndarray::Array3;
    use rand::Rng;

    fn toy_cfg() -> TudcenConfig {
        TudcenConfig {
            dims: ChannelDims { n_tx: 4, n_rx: 1, n_sc: 6 },
            udccn: UdccnConfig { kernel: 3, d_feat: 2 },
            sfse: SfseConfig { n1: 2, n2: 3, d_emb: 8 },
            gen: GenTransformerConfig {
                n_layers: 1,
                d_rep: 8,
                n_heads: 2,
                d_ff: 8,
                p_attn: 0.0,
                p_ff: 0.0,
                max_tokens: 7,
            },
        }
    }

    fn rand_csi(shape: (usize, usize, usize), seed: u64) -> Csi {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn full_size_sfse_accounting() {
        let dims = ChannelDims { n_tx: 32, n_rx: 4, n_sc: 624 };
        let c = SfseConfig::full();
        assert_eq!(c.n_groups(), 48);
        assert_eq!(c.group_width(dims), 3328);
        assert_eq!(c.linear_param_count(dims), 1_703_936);
        assert!(SfseConfig { n1: 5, ..c }.validate(dims).is_err());
        let one = SfseConfig { n1: 1, n2: 1, d_emb: 4 };
        assert_eq!(one.group_width(dims), 2 * 4 * 32 * 624);
    }

    #[test]
    fn grouping_is_a_bijection() {
        let cfg = toy_cfg();
        let idx = group_indices(&cfg.sfse, cfg.dims);
        let mut seen = idx.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..cfg.dims.numel() * 2).collect::<Vec<_>>());
        let h = rand_csi((1, 4, 6), 1);
        let (x, _) = group_sequences::<f64>(&cfg.sfse, cfg.dims, &[vec![&h]]).unwrap();
        let back = ungroup(&cfg.sfse, cfg.dims, x.data(), 1, 1);
        assert_eq!(back[0][0], h);
        // group 1 = antennas {0, 2}, subcarriers {1, 4}
        assert_eq!(x.data()[cfg.sfse.group_width(cfg.dims)], h[[0, 0, 1]].re);
    }

    #[test]
    fn embed_inverse_shapes_and_mac_count() {
        let cfg = toy_cfg();
        let store = init_dcen::<f64>(&cfg, 0).unwrap();
        let h = rand_csi((1, 4, 6), 2);
        let (tok, stats) = sfse_embed(&store, &cfg.sfse, &h).unwrap();
        assert_eq!(tok.shape(), &[6, 8]);
        let back = sfse_inverse(&store, &cfg.sfse, cfg.dims, &tok, &stats).unwrap();
        assert_eq!(back.dim(), h.dim());

        let (x, _) = group_sequences::<f64>(&cfg.sfse, cfg.dims, &[vec![&h]]).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(x);
        g.reset_macs();
        sfse_embed_graph(&mut g, &store, x).unwrap();
        assert_eq!(g.macs() as usize, 2 * 4 * 6 * 8);
    }

    #[test]
    fn mask_values() {
        assert_eq!(causal_mask::<f64>(1).data(), &[0.0]);
        let m = causal_mask::<f64>(3);
        let ninf = f64::NEG_INFINITY;
        assert_eq!(m.data(), &[0., ninf, ninf, 0., 0., ninf, 0., 0., 0.]);
    }

    #[test]
    fn causality_bitwise() {
        let cfg = toy_cfg();
        let store = init_dcen::<f64>(&cfg, 3).unwrap();
        let n = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Tensor::from_fn(&[3, n, 8], |_| rng.random_range(-1.0..1.0));
        let run = |x: &Tensor| {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let y = gen_transformer_forward(&mut g, &store, &cfg.gen, v).unwrap();
            g.value(y).clone()
        };
        let y0 = run(&base);
        for t in 0..n {
            let mut x = base.clone();
            for gi in 0..3 {
                for c in 0..8 {
                    x.data_mut()[(gi * n + t) * 8 + c] += 0.7;
                }
            }
            let y = run(&x);
            for gi in 0..3 {
                for p in 0..n {
                    let a = &y.data()[(gi * n + p) * 8..(gi * n + p + 1) * 8];
                    let b = &y0.data()[(gi * n + p) * 8..(gi * n + p + 1) * 8];
                    if p < t {
                        assert_eq!(a, b, "position {p} moved when token {t} changed");
                    } else if p == t {
                        assert_ne!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn token_overflow() {
        let cfg = toy_cfg();
        let store = init_dcen::<f64>(&cfg, 0).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 8, 8]));
        assert!(matches!(
            gen_transformer_forward(&mut g, &store, &cfg.gen, x),
            Err(Error::TokenOverflow { have: 8, max: 7 })
        ));
    }

    #[test]
    fn gen_layer_grad_check() {
        let cfg = toy_cfg();
        let store = init_dcen::<f64>(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Tensor::from_fn(&[2, 4, 8], |_| rng.random_range(-1.0..1.0));
        let err = grad_check(
            |g, v| {
                let m = g.constant(causal_mask(4));
                gen_layer(g, &store, "dcen.layer.0", &cfg.gen, v[0], m)
            },
            std::slice::from_ref(&x0),
            DEFAULT_EPS,
            1,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
        let err = grad_check_params(
            |g, st| {
                let x = g.constant(x0.clone());
                gen_transformer_forward(g, st, &cfg.gen, x)
            },
            &store,
            DEFAULT_EPS,
            2,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn udccn_identity_and_grad_check() {
        let cfg = toy_cfg();
        let mut store = init_udccn::<f64>(&cfg.udccn, 0).unwrap();
        store.value_mut("udccn.conv.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let h = rand_csi((4, 1, 6), 7);
        let out = udccn_forward(&store, &cfg.udccn, std::slice::from_ref(&h)).unwrap().remove(0);
        assert_eq!(out, h.clone().permuted_axes([1, 0, 2]));

        let store = init_udccn::<f64>(&cfg.udccn, 1).unwrap();
        let x0 = Tensor::new(vec![1, 4, 6, 2], csi_to_real(&h)).unwrap();
        let err = grad_check(|g, v| udccn_forward_graph(g, &store, &cfg.udccn, cfg.dims, v[0]), std::slice::from_ref(&x0), DEFAULT_EPS, 3).unwrap();
        assert!(err <= 1e-4, "{err}");
        let err = grad_check_params(
            |g, st| {
                let x = g.constant(x0.clone());
                udccn_forward_graph(g, st, &cfg.udccn, cfg.dims, x)
            },
            &store,
            DEFAULT_EPS,
            4,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn rollout_lengths_and_prefix_consistency() {
        let cfg = toy_cfg();
        let store = init_dcen::<f64>(&cfg, 8).unwrap();
        let h = rand_csi((1, 4, 6), 9);
        assert!(extrapolate_slots(&store, &cfg, &h, 2).unwrap().is_empty());
        let six = extrapolate_slots(&store, &cfg, &h, 8).unwrap();
        assert_eq!(six.len(), 6);
        let three = extrapolate_slots(&store, &cfg, &h, 5).unwrap();
        assert_eq!(&six[..3], &three[..]);
        // Teacher forcing on the generated sequence reproduces each step.
        let seq: Vec<&Csi> = std::iter::once(&h).chain(six[..5].iter()).collect();
        let mut g = Graph::inference();
        let y = dcen_forward(&mut g, &store, &cfg, &[seq]).unwrap();
        let per = cfg.dims.numel() * 2;
        let last = csi_from_real(&g.value(y).data()[5 * per..], (1, 4, 6));
        assert_eq!(last, six[5]);
    }
}
