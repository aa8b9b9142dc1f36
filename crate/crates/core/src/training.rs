//! Windowing, losses and the two training loops.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, clip_grad_norm, cosine_lr, AdamConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::baselines::{interp_joint, ls_estimate, InterpMethod};
use crate::pilots::{observe_pilots, PilotObservation, SrsPattern};
use crate::sfcen::{csi_to_real, sfcen_estimate, sfcen_forward, SfcenConfig};
use crate::sim::ChannelTrace;
use crate::tudcen::{dcen_forward, dcen_forward_var, udccn_forward, udccn_forward_graph, TudcenConfig};
use crate::Csi;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr0: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub window_len: usize,
    pub stride: usize,
    /// Traces assigned to (train, valid, test).
    pub split: (usize, usize, usize),
    pub clip_norm: f64,
    pub snr_db: f64,
    /// Draw the training SNR uniformly from `snr_db ± snr_spread_db`.
    pub snr_spread_db: f64,
    /// Train UDCCN and DCEN together instead of one after the other.
    pub joint: bool,
}

impl TrainConfig {
    pub fn full_sfcen(n_slot: usize) -> Self {
        TrainConfig {
            batch: 64,
            lr0: 6e-5,
            lr_floor: 0.01,
            epochs: 200,
            patience: 20,
            seed: 0,
            window_len: n_slot,
            stride: n_slot,
            split: (95, 5, 5),
            clip_norm: f64::INFINITY,
            snr_db: 5.0,
            snr_spread_db: 0.0,
            joint: false,
        }
    }

    pub fn full_tudcen(n_slot: usize) -> Self {
        TrainConfig { batch: 100, ..Self::full_sfcen(n_slot) }
    }

    pub fn validate(&self, n_slot: usize) -> Result<()> {
        if self.window_len != n_slot || self.stride != n_slot {
            return Err(Error::config(format!(
                "window_len and stride must equal N_slot = {n_slot} (got {}, {})",
                self.window_len, self.stride
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::config("batch and epochs must be >= 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0 must be positive"));
        }
        Ok(())
    }
}

/// One sub-frame: the uplink channel at slot 0 and downlink slots `1..N_slot`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub trace: usize,
    pub subframe: usize,
    pub uplink: Csi,
    pub downlink: Vec<Csi>,
}

pub fn make_windows(trace: &ChannelTrace, trace_index: usize, cfg: &TrainConfig) -> Result<Vec<Window>> {
    let n_slot = trace.n_slot();
    cfg.validate(n_slot)?;
    Ok((0..trace.n_subframes())
        .map(|s| Window {
            trace: trace_index,
            subframe: s,
            uplink: trace.uplink_slot(s, 0).to_owned(),
            downlink: (1..n_slot).map(|k| trace.downlink_slot(s, k).to_owned()).collect(),
        })
        .collect())
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<Window>,
    pub valid: Vec<Window>,
    pub test: Vec<Window>,
}

/// Splits by trace so no channel instance spans two sets.
pub fn split_windows(traces: &[ChannelTrace], cfg: &TrainConfig) -> Result<Split> {
    let (a, b, c) = cfg.split;
    if a + b + c > traces.len() {
        return Err(Error::config(format!("split {:?} needs {} traces, have {}", cfg.split, a + b + c, traces.len())));
    }
    let mut out = Split::default();
    for (i, tr) in traces.iter().enumerate().take(a + b + c) {
        let w = make_windows(tr, i, cfg)?;
        if i < a {
            out.train.extend(w);
        } else if i < a + b {
            out.valid.extend(w);
        } else {
            out.test.extend(w);
        }
    }
    Ok(out)
}

fn sq_norm(h: &Csi) -> f64 {
    h.iter().map(|z| z.norm_sqr()).sum()
}

fn sq_err(a: &Csi, b: &Csi) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum()
}

/// Mean over the batch of `||H - H^||^2`.
pub fn loss_mse_sfcen(pred: &[Csi], truth: &[Csi]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| sq_err(p, t)).sum::<f64>() / truth.len().max(1) as f64
}

/// Mean over the batch of `||H - H^||^2 / ||H||^2`.
pub fn loss_nmse_udccn(pred: &[Csi], truth: &[Csi]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| sq_err(p, t) / sq_norm(t)).sum::<f64>() / truth.len().max(1) as f64
}

/// Per window, the mean over slots of the normalized error; then the mean
/// over windows.
pub fn loss_nmse_dcen(pred: &[Vec<Csi>], truth: &[Vec<Csi>]) -> f64 {
    let per: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| loss_nmse_udccn(p, t))
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

/// `sum(((pred - truth) * weight)^2)` with `truth` and `weight` constants.
fn weighted_sq<T: Real>(g: &mut Graph<T>, pred: Var, truth: Vec<T>, weight: Vec<T>) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::new(shape.clone(), truth)?);
    let w = g.constant(Tensor::new(shape, weight)?);
    let d = g.sub(pred, t)?;
    let d = g.mul(d, w)?;
    let d2 = g.mul(d, d)?;
    Ok(g.sum(d2))
}

/// Graph form of [`loss_mse_sfcen`] for a `[B, ..]` real prediction.
pub fn loss_mse_graph<T: Real>(g: &mut Graph<T>, pred: Var, truth: &[&Csi]) -> Result<Var> {
    let b = truth.len().max(1) as f64;
    let t: Vec<T> = truth.iter().flat_map(|h| csi_to_real::<T>(h)).collect();
    let w = vec![T::of(1.0 / b.sqrt()); t.len()];
    weighted_sq(g, pred, t, w)
}

/// Graph form of the normalized losses: each truth slot is weighted by the
/// inverse of its energy and the result averaged over all slots given.
pub fn loss_nmse_graph<T: Real>(g: &mut Graph<T>, pred: Var, truth: &[&Csi]) -> Result<Var> {
    let n = truth.len().max(1) as f64;
    let mut t = Vec::new();
    let mut w = Vec::new();
    for h in truth {
        let s = T::of(1.0 / (sq_norm(h) * n).sqrt());
        let r = csi_to_real::<T>(h);
        w.extend(std::iter::repeat_n(s, r.len()));
        t.extend(r);
    }
    weighted_sq(g, pred, t, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,valid_loss,lr")?;
        for e in &self.log {
            writeln!(f, "{},{:.9e},{:.9e},{:.6e}", e.epoch, e.train_loss, e.valid_loss, e.lr)?;
        }
        Ok(())
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Generic minibatch loop with Adam, cosine decay, early stopping on the
/// validation loss and best-checkpoint restore.
fn fit<T, F, V>(
    stores: &mut [&mut ParamStore<T>],
    n_train: usize,
    cfg: &TrainConfig,
    tag: u64,
    mut batch_loss: F,
    mut valid_loss: V,
) -> Result<TrainReport>
where
    T: Real,
    F: FnMut(&mut Graph<T>, &[&ParamStore<T>], &[usize], usize) -> Result<Var>,
    V: FnMut(&[&ParamStore<T>]) -> Result<f64>,
{
    let steps_per_epoch = n_train.div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let mut report = TrainReport { best_valid: f64::INFINITY, ..Default::default() };
    let mut best: Vec<ParamStore<T>> = stores.iter().map(|s| (**s).clone()).collect();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, tag, epoch as u64));
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        let mut lr = cfg.lr0;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut g = Graph::new(true, mix(cfg.seed ^ tag, epoch as u64, bi as u64));
            let views: Vec<&ParamStore<T>> = stores.iter().map(|s| &**s).collect();
            let loss = batch_loss(&mut g, &views, chunk, epoch)?;
            let value = g.value(loss).data()[0].f64();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            acc += value * chunk.len() as f64;
            g.backward(loss)?;
            lr = cosine_lr(cfg.lr0, step, total, cfg.lr_floor);
            for s in stores.iter_mut() {
                s.zero_grad();
                g.accumulate_into(s, T::one())?;
                clip_grad_norm(s, cfg.clip_norm);
                adam_step(s, &AdamConfig::new(lr))?;
            }
            step += 1;
        }
        let views: Vec<&ParamStore<T>> = stores.iter().map(|s| &**s).collect();
        let valid = valid_loss(&views)?;
        if !valid.is_finite() {
            return Err(Error::Diverged { epoch, loss: valid });
        }
        report.log.push(EpochLog { epoch, train_loss: acc / n_train.max(1) as f64, valid_loss: valid, lr });
        if valid < report.best_valid {
            report.best_valid = valid;
            report.best_epoch = epoch;
            best = stores.iter().map(|s| (**s).clone()).collect();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    for (s, b) in stores.iter_mut().zip(best) {
        **s = b;
    }
    Ok(report)
}

/// Observes the slot-0 uplink of every window through the pilot pattern.
pub fn observe_windows(windows: &[Window], pattern: &SrsPattern, snr_db: f64, seed: u64) -> Result<Vec<PilotObservation>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| observe_pilots(w.uplink.view(), pattern, snr_db, mix(seed, 17, i as u64)))
        .collect()
}

/// Trains the spatial-frequency network; returns the best-validation
/// weights and the epoch log.
pub fn train_sfcen<T: Real>(
    split: &Split,
    pattern: &SrsPattern,
    net: &SfcenConfig,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(ParamStore<T>, TrainReport)> {
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(Error::config("train and valid splits must be non-empty"));
    }
    let mut store = crate::sfcen::init_sfcen::<T>(net, init_seed)?;
    let valid_obs = observe_windows(&split.valid, pattern, cfg.snr_db, cfg.seed ^ 0x7661_6c69)?;
    let valid_truth: Vec<Csi> = split.valid.iter().map(|w| w.uplink.clone()).collect();
    let report = fit(
        &mut [&mut store],
        split.train.len(),
        cfg,
        1,
        |g, st, idx, epoch| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2, epoch as u64));
            let obs = idx
                .iter()
                .map(|&i| {
                    let snr = if cfg.snr_spread_db > 0.0 {
                        use rand::Rng;
                        cfg.snr_db + rng.random_range(-cfg.snr_spread_db..=cfg.snr_spread_db)
                    } else {
                        cfg.snr_db
                    };
                    observe_pilots(split.train[i].uplink.view(), pattern, snr, mix(cfg.seed, epoch as u64 + 1000, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&PilotObservation> = obs.iter().collect();
            let pred = sfcen_forward(g, st[0], net, &refs)?;
            let truth: Vec<&Csi> = idx.iter().map(|&i| &split.train[i].uplink).collect();
            loss_mse_graph(g, pred, &truth)
        },
        |st| {
            let mut total = 0.0;
            for (chunk, truth) in valid_obs.chunks(cfg.batch).zip(valid_truth.chunks(cfg.batch)) {
                let refs: Vec<&PilotObservation> = chunk.iter().collect();
                let est = sfcen_estimate(st[0], net, &refs)?;
                total += loss_mse_sfcen(&est, truth) * truth.len() as f64;
            }
            Ok(total / valid_truth.len() as f64)
        },
    )?;
    Ok((store, report))
}

/// Uplink estimates feeding the calibration network.
pub enum UplinkSource<'a, T: Real> {
    /// The true slot-0 uplink channel.
    Truth,
    /// A trained spatial-frequency network on noisy pilots.
    Sfcen { store: &'a ParamStore<T>, net: &'a SfcenConfig, pattern: &'a SrsPattern },
    /// LS on noisy pilots followed by joint interpolation.
    Interp { method: InterpMethod, pattern: &'a SrsPattern, n_tx: usize, n_sc: usize },
}

impl<T: Real> UplinkSource<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            UplinkSource::Truth => "truth",
            UplinkSource::Sfcen { .. } => "sfcen",
            UplinkSource::Interp { method, .. } => method.name(),
        }
    }

    pub fn estimates(&self, windows: &[Window], snr_db: f64, seed: u64) -> Result<Vec<Csi>> {
        match self {
            UplinkSource::Truth => Ok(windows.iter().map(|w| w.uplink.clone()).collect()),
            UplinkSource::Sfcen { store, net, pattern } => {
                let obs = observe_windows(windows, pattern, snr_db, seed)?;
                let mut out = Vec::with_capacity(obs.len());
                for chunk in obs.chunks(64) {
                    let refs: Vec<&PilotObservation> = chunk.iter().collect();
                    out.extend(sfcen_estimate(store, net, &refs)?);
                }
                Ok(out)
            }
            UplinkSource::Interp { method, pattern, n_tx, n_sc } => observe_windows(windows, pattern, snr_db, seed)?
                .iter()
                .map(|o| interp_joint(ls_estimate(o)?.h_ls.view(), *method, *n_tx, *n_sc))
                .collect(),
        }
    }
}

fn real_batch<T: Real>(hs: &[&Csi], shape: Vec<usize>) -> Result<Tensor<T>> {
    Tensor::new(shape, hs.iter().flat_map(|h| csi_to_real::<T>(h)).collect())
}

#[derive(Clone, Debug)]
pub struct TudcenParams<T: Real = f64> {
    pub udccn: ParamStore<T>,
    pub dcen: ParamStore<T>,
}

#[derive(Clone, Debug, Default)]
pub struct TudcenReport {
    pub udccn: TrainReport,
    pub dcen: TrainReport,
}

/// Teacher-forcing inputs for one window: the slot-1 estimate followed by
/// the true slots `2..N_slot-2`.
fn teacher_inputs<'a>(h1: &'a Csi, w: &'a Window) -> Vec<&'a Csi> {
    let n = w.downlink.len();
    std::iter::once(h1).chain(w.downlink[1..n - 1].iter()).collect()
}

fn dcen_targets(w: &Window) -> Vec<&Csi> {
    w.downlink[1..].iter().collect()
}

/// Rollout NMSE averaged over windows and slots `2..N_slot-1`.
fn dcen_valid_loss<T: Real>(store: &ParamStore<T>, net: &TudcenConfig, h1: &[Csi], windows: &[Window]) -> Result<f64> {
    let n_out = windows.first().map_or(0, |w| w.downlink.len() - 1);
    let mut total = 0.0;
    for (hs, ws) in h1.chunks(64).zip(windows.chunks(64)) {
        let preds = crate::tudcen::extrapolate_batch(store, net, hs, n_out)?;
        let truths: Vec<Vec<Csi>> = ws.iter().map(|w| w.downlink[1..].to_vec()).collect();
        total += loss_nmse_dcen(&preds, &truths) * ws.len() as f64;
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Trains the calibration network, then the extrapolation network with the
/// calibration frozen (or both together when `cfg.joint`).
pub fn train_tudcen<T: Real>(
    split: &Split,
    net: &TudcenConfig,
    cfg: &TrainConfig,
    source: &UplinkSource<'_, T>,
    init_seed: u64,
) -> Result<(TudcenParams<T>, TudcenReport)> {
    check_tudcen_split(split, net)?;
    let n_slot = split.train[0].downlink.len() + 1;
    let mut udccn = crate::tudcen::init_udccn::<T>(&net.udccn, init_seed)?;
    let mut dcen = crate::tudcen::init_dcen::<T>(net, init_seed.wrapping_add(1))?;
    let up_train = source.estimates(&split.train, cfg.snr_db, cfg.seed ^ 0x7472)?;
    let up_valid = source.estimates(&split.valid, cfg.snr_db, cfg.seed ^ 0x7661)?;
    let d = net.dims;
    let ul_shape = |b: usize| vec![b, d.n_tx * d.n_rx, d.n_sc, 2];
    let mut report = TudcenReport::default();

    if cfg.joint {
        let per = d.numel() * 2;
        report.dcen = fit(
            &mut [&mut udccn, &mut dcen],
            split.train.len(),
            cfg,
            3,
            |g, st, idx, _| {
                let ups: Vec<&Csi> = idx.iter().map(|&i| &up_train[i]).collect();
                let x = g.constant(real_batch(&ups, ul_shape(idx.len()))?);
                let h1 = udccn_forward_graph(g, st[0], &net.udccn, d, x)?;
                let t1: Vec<&Csi> = idx.iter().map(|&i| &split.train[i].downlink[0]).collect();
                let l1 = loss_nmse_graph(g, h1, &t1)?;
                let h1 = g.reshape(h1, &[idx.len(), 1, per])?;
                let rest: Vec<&Csi> = idx
                    .iter()
                    .flat_map(|&i| {
                        let w = &split.train[i];
                        w.downlink[1..w.downlink.len() - 1].iter()
                    })
                    .collect();
                let rest = g.constant(real_batch(&rest, vec![idx.len(), n_slot - 3, per])?);
                let seq = g.concat(&[h1, rest], 1)?;
                let pred = dcen_forward_var(g, st[1], net, seq)?;
                let tg: Vec<&Csi> = idx.iter().flat_map(|&i| dcen_targets(&split.train[i])).collect();
                let l2 = loss_nmse_graph(g, pred, &tg)?;
                g.add(l1, l2)
            },
            |st| {
                let h1 = udccn_forward(st[0], &net.udccn, &up_valid)?;
                let t1: Vec<Csi> = split.valid.iter().map(|w| w.downlink[0].clone()).collect();
                Ok(loss_nmse_udccn(&h1, &t1) + dcen_valid_loss(st[1], net, &h1, &split.valid)?)
            },
        )?;
        return Ok((TudcenParams { udccn, dcen }, report));
    }

    report.udccn = fit_udccn(&mut udccn, split, net, cfg, &up_train, &up_valid)?;
    report.dcen = fit_dcen(&mut dcen, &udccn, split, net, cfg, &up_train, &up_valid)?;
    Ok((TudcenParams { udccn, dcen }, report))
}

fn fit_udccn<T: Real>(
    udccn: &mut ParamStore<T>,
    split: &Split,
    net: &TudcenConfig,
    cfg: &TrainConfig,
    up_train: &[Csi],
    up_valid: &[Csi],
) -> Result<TrainReport> {
    let d = net.dims;
    fit(
        &mut [udccn],
        split.train.len(),
        cfg,
        4,
        |g, st, idx, _| {
            let ups: Vec<&Csi> = idx.iter().map(|&i| &up_train[i]).collect();
            let x = g.constant(real_batch(&ups, vec![idx.len(), d.n_tx * d.n_rx, d.n_sc, 2])?);
            let h1 = udccn_forward_graph(g, st[0], &net.udccn, d, x)?;
            let t1: Vec<&Csi> = idx.iter().map(|&i| &split.train[i].downlink[0]).collect();
            loss_nmse_graph(g, h1, &t1)
        },
        |st| {
            let h1 = udccn_forward(st[0], &net.udccn, up_valid)?;
            let t1: Vec<Csi> = split.valid.iter().map(|w| w.downlink[0].clone()).collect();
            Ok(loss_nmse_udccn(&h1, &t1))
        },
    )
}

fn fit_dcen<T: Real>(
    dcen: &mut ParamStore<T>,
    udccn: &ParamStore<T>,
    split: &Split,
    net: &TudcenConfig,
    cfg: &TrainConfig,
    up_train: &[Csi],
    up_valid: &[Csi],
) -> Result<TrainReport> {
    let h1_train = udccn_forward(udccn, &net.udccn, up_train)?;
    let h1_valid = udccn_forward(udccn, &net.udccn, up_valid)?;
    fit(
        &mut [dcen],
        split.train.len(),
        cfg,
        5,
        |g, st, idx, _| {
            let seqs: Vec<Vec<&Csi>> = idx.iter().map(|&i| teacher_inputs(&h1_train[i], &split.train[i])).collect();
            let pred = dcen_forward(g, st[0], net, &seqs)?;
            let tg: Vec<&Csi> = idx.iter().flat_map(|&i| dcen_targets(&split.train[i])).collect();
            loss_nmse_graph(g, pred, &tg)
        },
        |st| dcen_valid_loss(st[0], net, &h1_valid, &split.valid),
    )
}

fn check_tudcen_split(split: &Split, net: &TudcenConfig) -> Result<()> {
    net.validate()?;
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(Error::config("train and valid splits must be non-empty"));
    }
    if split.train[0].downlink.len() < 2 {
        return Err(Error::config("need at least 3 slots per sub-frame"));
    }
    Ok(())
}

/// Trains the calibration network alone.
pub fn train_udccn<T: Real>(
    split: &Split,
    net: &TudcenConfig,
    cfg: &TrainConfig,
    source: &UplinkSource<'_, T>,
    init_seed: u64,
) -> Result<(ParamStore<T>, TrainReport)> {
    check_tudcen_split(split, net)?;
    let mut udccn = crate::tudcen::init_udccn::<T>(&net.udccn, init_seed)?;
    let up_train = source.estimates(&split.train, cfg.snr_db, cfg.seed ^ 0x7472)?;
    let up_valid = source.estimates(&split.valid, cfg.snr_db, cfg.seed ^ 0x7661)?;
    let report = fit_udccn(&mut udccn, split, net, cfg, &up_train, &up_valid)?;
    Ok((udccn, report))
}

/// Trains the slot extrapolator on the outputs of a fixed calibration network.
pub fn train_dcen<T: Real>(
    split: &Split,
    net: &TudcenConfig,
    cfg: &TrainConfig,
    source: &UplinkSource<'_, T>,
    udccn: &ParamStore<T>,
    init_seed: u64,
) -> Result<(ParamStore<T>, TrainReport)> {
    check_tudcen_split(split, net)?;
    let mut dcen = crate::tudcen::init_dcen::<T>(net, init_seed.wrapping_add(1))?;
    let up_train = source.estimates(&split.train, cfg.snr_db, cfg.seed ^ 0x7472)?;
    let up_valid = source.estimates(&split.valid, cfg.snr_db, cfg.seed ^ 0x7661)?;
    let report = fit_dcen(&mut dcen, udccn, split, net, cfg, &up_train, &up_valid)?;
    Ok((dcen, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_channel_trace, ChannelModelConfig, SystemConfig};
    use crate::C64;
    use ndarray::Array3;

    fn tiny_sys() -> SystemConfig {
        SystemConfig { n_subframes: 3, ..SystemConfig::desk() }
    }

    fn desk_train(n_slot: usize) -> TrainConfig {
        TrainConfig { split: (1, 1, 0), epochs: 2, batch: 2, lr0: 1e-3, ..TrainConfig::full_sfcen(n_slot) }
    }

    #[test]
    fn windows_tile_the_trace() {
        let sys = tiny_sys();
        let tr = generate_channel_trace(&sys, &ChannelModelConfig::new(&sys, 1)).unwrap();
        let w = make_windows(&tr, 0, &desk_train(8)).unwrap();
        assert_eq!(w.len(), 3);
        for (s, win) in w.iter().enumerate() {
            assert_eq!(win.subframe, s);
            assert_eq!(win.downlink.len(), 7);
            assert_eq!(win.uplink, tr.uplink_slot(s, 0));
            assert_eq!(win.downlink[6], tr.downlink_slot(s, 7));
        }
        let bad = TrainConfig { window_len: 4, ..desk_train(8) };
        assert!(make_windows(&tr, 0, &bad).is_err());
    }

    fn c(v: &[f64]) -> Csi {
        Array3::from_shape_vec((1, 1, v.len()), v.iter().map(|&x| C64::new(x, 0.0)).collect()).unwrap()
    }

    #[test]
    fn loss_values() {
        let t = vec![c(&[1.0, 2.0]), c(&[3.0, 0.0])];
        let z = vec![c(&[0.0, 0.0]), c(&[0.0, 0.0])];
        assert_eq!(loss_mse_sfcen(&t, &t), 0.0);
        assert!((loss_mse_sfcen(&z, &t) - 7.0).abs() < 1e-12);
        assert!((loss_nmse_udccn(&z, &t) - 1.0).abs() < 1e-12);
        let twice: Vec<Csi> = t.iter().map(|h| h.mapv(|x| x * 2.0)).collect();
        assert!((loss_nmse_udccn(&twice, &t) - 1.0).abs() < 1e-12);
        // two slots: errors 0.25 and 1.0 of the slot energy
        let pred = vec![vec![c(&[1.0, 1.0]), c(&[0.0, 0.0])]];
        let truth = vec![vec![c(&[1.0, 2.0]).mapv(|x| x * 0.0 + x), c(&[3.0, 0.0])]];
        let want = (1.0 / 5.0 + 1.0) / 2.0;
        assert!((loss_nmse_dcen(&pred, &truth) - want).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_reference() {
        let t = vec![c(&[1.0, 2.0]), c(&[3.0, -1.0])];
        let p = vec![c(&[0.5, 2.5]), c(&[1.0, 0.0])];
        let tr: Vec<&Csi> = t.iter().collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![2, 1, 1, 2, 2], p.iter().flat_map(csi_to_real::<f64>).collect()).unwrap());
        let l = loss_mse_graph(&mut g, x, &tr).unwrap();
        assert!((g.value(l).data()[0] - loss_mse_sfcen(&p, &t)).abs() < 1e-12);
        let l = loss_nmse_graph(&mut g, x, &tr).unwrap();
        assert!((g.value(l).data()[0] - loss_nmse_udccn(&p, &t)).abs() < 1e-12);
    }

    #[test]
    fn split_by_trace() {
        let sys = tiny_sys();
        let traces: Vec<_> = (0..3).map(|s| generate_channel_trace(&sys, &ChannelModelConfig::new(&sys, s)).unwrap()).collect();
        let cfg = TrainConfig { split: (1, 1, 1), ..desk_train(8) };
        let s = split_windows(&traces, &cfg).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (3, 3, 3));
        assert!(s.train.iter().all(|w| w.trace == 0));
        assert!(s.test.iter().all(|w| w.trace == 2));
        assert!(split_windows(&traces, &TrainConfig { split: (3, 1, 0), ..cfg }).is_err());
    }

    #[test]
    fn sfcen_training_is_deterministic_and_keeps_best() {
        let sys = tiny_sys();
        let traces: Vec<_> = (0..2).map(|s| generate_channel_trace(&sys, &ChannelModelConfig::new(&sys, s)).unwrap()).collect();
        let cfg = TrainConfig { epochs: 3, ..desk_train(8) };
        let split = split_windows(&traces, &cfg).unwrap();
        let pattern = crate::pilots::build_srs_pattern(&sys, 4, 2, 0).unwrap();
        let net = SfcenConfig::new(&sys, &pattern, 8, 2).unwrap();
        let (a, ra) = train_sfcen::<f64>(&split, &pattern, &net, &cfg, 0).unwrap();
        let (b, rb) = train_sfcen::<f64>(&split, &pattern, &net, &cfg, 0).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.to_records(), b.to_records());
        assert!(ra.log.iter().all(|e| ra.best_valid <= e.valid_loss));
        assert_eq!(ra.log.len(), 3);
    }

    #[test]
    fn tudcen_training_runs_both_modes() {
        let sys = SystemConfig { n_tx: 4, n_rx: 1, n_rf: 2, n_rb: 1, n_sc: 12, ..tiny_sys() };
        let traces: Vec<_> = (0..2).map(|s| generate_channel_trace(&sys, &ChannelModelConfig::new(&sys, s)).unwrap()).collect();
        let cfg = desk_train(8);
        let split = split_windows(&traces, &cfg).unwrap();
        let net = TudcenConfig {
            dims: crate::tudcen::ChannelDims { n_tx: 4, n_rx: 1, n_sc: 12 },
            udccn: crate::tudcen::UdccnConfig { kernel: 3, d_feat: 2 },
            sfse: crate::tudcen::SfseConfig { n1: 2, n2: 3, d_emb: 8 },
            gen: crate::tudcen::GenTransformerConfig {
                n_layers: 1,
                d_rep: 8,
                n_heads: 2,
                d_ff: 16,
                p_attn: 0.1,
                p_ff: 0.1,
                max_tokens: 7,
            },
        };
        for joint in [false, true] {
            let cfg = TrainConfig { joint, ..cfg.clone() };
            let (p, r) = train_tudcen::<f64>(&split, &net, &cfg, &UplinkSource::Truth, 0).unwrap();
            assert_eq!(r.dcen.log.len(), 2);
            assert_eq!(r.udccn.log.is_empty(), joint);
            assert!(p.dcen.num_params() > 0);
        }
    }
}
