//! NMSE, SVD precoding, achievable sum-rate and evaluation sweeps.

use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::autodiff::{ParamStore, Real};
use crate::baselines::{interp_joint, ls_estimate, InterpMethod};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pilots::{build_srs_pattern, overhead, Overhead, PilotObservation, SrsPattern};
use crate::sfcen::{sfcen_estimate, SfcenConfig};
use crate::sim::{generate_traces, SystemConfig};
use crate::training::{make_windows, observe_windows, TrainConfig, TudcenParams, Window};
use crate::tudcen::{extrapolate_batch, udccn_forward, TudcenConfig};
use crate::{Csi, C64};

pub const NMSE_FLOOR_DB: f64 = -120.0;
pub const NMSE_CEIL_DB: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nmse {
    pub db: f64,
    /// Samples skipped because their truth was all zeros.
    pub excluded: usize,
}

/// `10·log10` of the mean per-sample normalized squared error, clamped to
/// `[NMSE_FLOOR_DB, NMSE_CEIL_DB]`.
pub fn nmse_db(truth: &[Csi], est: &[Csi]) -> Result<Nmse> {
    if truth.len() != est.len() {
        return Err(Error::shape("nmse", format!("{} truths vs {} estimates", truth.len(), est.len())));
    }
    let (mut acc, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for (t, e) in truth.iter().zip(est) {
        if t.dim() != e.dim() {
            return Err(Error::shape("nmse", format!("{:?} vs {:?}", t.dim(), e.dim())));
        }
        let p: f64 = t.iter().map(|z| z.norm_sqr()).sum();
        if p == 0.0 {
            excluded += 1;
            continue;
        }
        acc += t.iter().zip(e).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / p;
        n += 1;
    }
    let db = if n == 0 { NMSE_CEIL_DB } else { 10.0 * (acc / n as f64).log10() };
    Ok(Nmse { db: db.clamp(NMSE_FLOOR_DB, NMSE_CEIL_DB), excluded })
}

/// Downlink matrix `[N_R, N_T]` of subcarrier `i` from `[N_R, N_T, N_c]`.
pub fn subcarrier_matrix(h: &Csi, i: usize) -> DMatrix<C64> {
    let (nr, nt, _) = h.dim();
    DMatrix::from_fn(nr, nt, |r, t| h[[r, t, i]])
}

/// First `n_s` right singular vectors of `h` as the columns of `F [N_T, n_s]`.
pub fn svd_precoder(h: &DMatrix<C64>, n_s: usize) -> Result<DMatrix<C64>> {
    let (nr, nt) = h.shape();
    if n_s == 0 || n_s > nr.min(nt) {
        return Err(Error::shape("svd_precoder", format!("n_s = {n_s} for a {nr}x{nt} channel")));
    }
    let svd = h.clone().try_svd(false, true, 1e-14, 500).ok_or_else(|| Error::Svd("did not converge".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Svd("missing V".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Ok(DMatrix::from_fn(nt, n_s, |t, s| v_t[(order[s], t)].conj()))
}

/// `log2 det(M)` of a Hermitian positive-definite matrix, symmetrized first.
pub fn log2_det_hpd(m: &DMatrix<C64>) -> Result<f64> {
    let sym = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let chol = sym.cholesky().ok_or_else(|| Error::Svd("matrix not positive definite".into()))?;
    Ok(chol.l().diagonal().iter().map(|d| 2.0 * d.re.log2()).sum())
}

/// Rate of one subcarrier: `log2 det(I + H F F^H H^H / (N_R σ²))`.
pub fn subcarrier_rate(h: &DMatrix<C64>, f: &DMatrix<C64>, sigma2: f64) -> Result<f64> {
    let nr = h.nrows();
    let hf = h * f;
    let m = DMatrix::<C64>::identity(nr, nr) + (&hf * hf.adjoint()) * C64::new(1.0 / (nr as f64 * sigma2), 0.0);
    log2_det_hpd(&m)
}

/// Achievable rate with the true channel and a precoder built from the
/// estimate, averaged over subcarriers (bps/Hz).
pub fn sum_rate(h_true: &Csi, h_est: &Csi, n_s: usize, sigma2: f64) -> Result<f64> {
    if h_true.dim() != h_est.dim() {
        return Err(Error::shape("sum_rate", format!("{:?} vs {:?}", h_true.dim(), h_est.dim())));
    }
    let nc = h_true.dim().2;
    let mut acc = 0.0;
    for i in 0..nc {
        let f = svd_precoder(&subcarrier_matrix(h_est, i), n_s)?;
        acc += subcarrier_rate(&subcarrier_matrix(h_true, i), &f, sigma2)?;
    }
    Ok(acc / nc as f64)
}

/// Noise variance for unit average channel gain.
pub fn noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Mean rate over samples.
pub fn mean_rate(truth: &[Csi], est: &[Csi], n_s: usize, sigma2: f64) -> Result<f64> {
    let mut acc = 0.0;
    for (t, e) in truth.iter().zip(est) {
        acc += sum_rate(t, e, n_s, sigma2)?;
    }
    Ok(acc / truth.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    FreqCr,
    SpatCr,
    Snr,
    Velocity,
    SlotIndex,
}

impl SweepKind {
    pub const ALL: [SweepKind; 5] = [SweepKind::FreqCr, SweepKind::SpatCr, SweepKind::Snr, SweepKind::Velocity, SweepKind::SlotIndex];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::FreqCr => "freq_cr",
            SweepKind::SpatCr => "spat_cr",
            SweepKind::Snr => "snr",
            SweepKind::Velocity => "velocity",
            SweepKind::SlotIndex => "slot_index",
        }
    }

    /// Axis values; `SlotIndex` has a single point and reports every slot.
    pub fn axis(self) -> Vec<f64> {
        match self {
            SweepKind::FreqCr => vec![2.0, 4.0, 8.0],
            SweepKind::SpatCr => vec![1.0, 2.0, 4.0],
            SweepKind::Snr => vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            SweepKind::Velocity => vec![5.0, 15.0, 30.0, 60.0, 90.0, 120.0],
            SweepKind::SlotIndex => vec![0.0],
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SweepKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sweep {s:?}")))
    }
}

/// Trained networks available to a sweep.
pub struct Models<'a, T: Real> {
    pub sfcen: Option<(&'a ParamStore<T>, &'a SfcenConfig)>,
    pub tudcen: Option<(&'a TudcenParams<T>, &'a TudcenConfig)>,
}

impl<T: Real> Models<'_, T> {
    pub fn none() -> Self {
        Models { sfcen: None, tudcen: None }
    }
}

/// Per-slot values of one method; `None` where it does not apply.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSeries {
    pub name: String,
    pub nmse_db: Vec<Option<f64>>,
    pub sum_rate: Vec<Option<f64>>,
}

impl MethodSeries {
    fn new(name: &str, n_slot: usize) -> Self {
        MethodSeries { name: name.to_string(), nmse_db: vec![None; n_slot], sum_rate: vec![None; n_slot] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub kind: SweepKind,
    pub axes: Vec<f64>,
    /// One entry per axis value.
    pub points: Vec<Vec<MethodSeries>>,
    pub overhead: Overhead,
    pub runtime_s: f64,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn series(&self, point: usize, name: &str) -> Option<&MethodSeries> {
        self.points.get(point)?.iter().find(|m| m.name == name)
    }

    fn value(&self, point: usize, name: &str, slot: usize) -> Option<f64> {
        self.series(point, name)?.nmse_db.get(slot).copied().flatten()
    }

    /// Desk-scale pass/fail flags applicable to this sweep; methods that
    /// were skipped produce no flag.
    pub fn threshold_flags(&self) -> Vec<(String, bool)> {
        let mut out = Vec::new();
        match self.kind {
            SweepKind::FreqCr | SweepKind::SpatCr => {
                let v: Option<Vec<f64>> = (0..self.axes.len()).map(|p| self.value(p, "ls_dft", 0)).collect();
                if let Some(v) = v {
                    let ok = v.windows(2).all(|w| w[1] >= w[0] - 0.5);
                    out.push((format!("ls_dft NMSE non-improving along {} (0.5 dB slack)", self.kind.name()), ok));
                }
            }
            SweepKind::Snr => {
                if let Some(p) = self.axes.iter().position(|&a| a == 20.0) {
                    let best = [self.value(p, "ls_spline", 0), self.value(p, "ls_dft", 0)];
                    if let (Some(s), [Some(a), Some(b)]) = (self.value(p, "sfcen", 0), best) {
                        out.push(("sfcen at least 3 dB below ls_spline and ls_dft at 20 dB".into(), s <= a.min(b) - 3.0));
                    }
                }
            }
            SweepKind::SlotIndex => {
                for src in ["ls_dft", "sfcen"] {
                    if let (Some(raw), Some(cal)) = (self.value(0, src, 1), self.value(0, &format!("{src}+udccn"), 1)) {
                        out.push((format!("{src}+udccn at least 3 dB below {src} at slot 1"), cal <= raw - 3.0));
                    }
                }
                if let (Some(t), Some(h)) = (self.series(0, "tudcen"), self.series(0, "hold")) {
                    let n = t.nmse_db.len();
                    let beats = (2..n).all(|k| matches!((t.nmse_db[k], h.nmse_db[k]), (Some(a), Some(b)) if a < b));
                    out.push(("tudcen below hold at every slot from 2".into(), beats));
                    if let (Some(a), Some(b)) = (t.nmse_db.get(2).copied().flatten(), t.nmse_db.last().copied().flatten()) {
                        out.push(("tudcen degradation from slot 2 to the last slot at most 10 dB".into(), b - a <= 10.0));
                    }
                    if let Some(p) = self.series(0, "perfect") {
                        let avg = |s: &MethodSeries| s.sum_rate[1..].iter().flatten().sum::<f64>();
                        out.push(("pipeline sum-rate at least 75% of perfect CSI".into(), avg(t) >= 0.75 * avg(p)));
                    }
                }
            }
            SweepKind::Velocity => {}
        }
        out
    }

    /// One row per axis x slot x method with at least one value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# sweep {}; rates averaged over subcarriers, then samples", self.kind.name())?;
        writeln!(f, "# pilot REs per sounding {}, per 1 ms (one period if T_p does not divide 1 ms) {}", self.overhead.c_sl, self.overhead.c_o)?;
        for n in &self.notes {
            writeln!(f, "# {n}")?;
        }
        for (name, ok) in self.threshold_flags() {
            writeln!(f, "# flag {}: {name}", if ok { "pass" } else { "FAIL" })?;
        }
        writeln!(f, "axis,slot,method,nmse_db,sum_rate")?;
        for (a, methods) in self.axes.iter().zip(&self.points) {
            for m in methods {
                for t in 0..m.nmse_db.len() {
                    if m.nmse_db[t].is_none() && m.sum_rate[t].is_none() {
                        continue;
                    }
                    let v = |x: Option<f64>| x.map_or(String::new(), |x| format!("{x:.6}"));
                    writeln!(f, "{a},{t},{},{},{}", m.name, v(m.nmse_db[t]), v(m.sum_rate[t]))?;
                }
            }
        }
        Ok(())
    }
}

fn transpose_ul(h: &Csi) -> Csi {
    h.view().permuted_axes([1, 0, 2]).as_standard_layout().to_owned()
}

/// Evaluates every applicable method on `windows` observed through `pattern`.
///
/// Slot 0 holds uplink estimation error; slot 1 the downlink estimate
/// with (`+udccn`) and without calibration; slots 2.. the rollout
/// (`tudcen`) and the held slot-1 estimate (`hold`).
pub fn evaluate_point<T: Real>(
    sys: &SystemConfig,
    pattern: &SrsPattern,
    windows: &[Window],
    snr_db: f64,
    seed: u64,
    models: &Models<'_, T>,
    notes: &mut Vec<String>,
) -> Result<Vec<MethodSeries>> {
    let n_slot = sys.n_slot;
    let sigma2 = noise_var(snr_db);
    let n_s = sys.n_rx;
    let obs = observe_windows(windows, pattern, snr_db, seed)?;
    let up_truth: Vec<Csi> = windows.iter().map(|w| w.uplink.clone()).collect();
    let dl = |k: usize| -> Vec<Csi> { windows.iter().map(|w| w.downlink[k - 1].clone()).collect() };
    let dl1 = dl(1);

    let mut estimators: Vec<(String, Vec<Csi>)> = Vec::new();
    for m in InterpMethod::ALL {
        let est = obs
            .iter()
            .map(|o| interp_joint(ls_estimate(o)?.h_ls.view(), m, sys.n_tx, sys.n_sc))
            .collect::<Result<Vec<_>>>();
        match est {
            Ok(e) => estimators.push((format!("ls_{}", m.name()), e)),
            Err(e) => notes.push(format!("ls_{} skipped: {e}", m.name())),
        }
    }
    match models.sfcen {
        Some((store, net)) if net.freq_ratio == pattern.comb && net.spatial_ratio == pattern.spatial_ratio() && net.n_tx == sys.n_tx => {
            let mut est = Vec::with_capacity(obs.len());
            for chunk in obs.chunks(64) {
                let refs: Vec<&PilotObservation> = chunk.iter().collect();
                est.extend(sfcen_estimate(store, net, &refs)?);
            }
            estimators.push(("sfcen".into(), est));
        }
        Some((_, net)) => notes.push(format!(
            "sfcen skipped: checkpoint trained for R_s={}, R_f={}, evaluated pattern R_s={}, R_f={}",
            net.spatial_ratio,
            net.freq_ratio,
            pattern.spatial_ratio(),
            pattern.comb
        )),
        None => notes.push("sfcen skipped: missing checkpoint".into()),
    }

    let mut out = Vec::new();
    let mut perfect = MethodSeries::new("perfect", n_slot);
    for k in 1..n_slot {
        perfect.sum_rate[k] = Some(mean_rate(&dl(k), &dl(k), n_s, sigma2)?);
    }
    out.push(perfect);

    let mut pipeline_h1 = None;
    for (name, est) in &estimators {
        let mut s = MethodSeries::new(name, n_slot);
        s.nmse_db[0] = Some(nmse_db(&up_truth, est)?.db);
        let raw: Vec<Csi> = est.iter().map(transpose_ul).collect();
        s.nmse_db[1] = Some(nmse_db(&dl1, &raw)?.db);
        s.sum_rate[1] = Some(mean_rate(&dl1, &raw, n_s, sigma2)?);
        out.push(s);
        if let Some((params, net)) = models.tudcen {
            let h1 = udccn_forward(&params.udccn, &net.udccn, est)?;
            let mut c = MethodSeries::new(&format!("{name}+udccn"), n_slot);
            c.nmse_db[1] = Some(nmse_db(&dl1, &h1)?.db);
            c.sum_rate[1] = Some(mean_rate(&dl1, &h1, n_s, sigma2)?);
            out.push(c);
            if name == "sfcen" || (pipeline_h1.is_none() && name == "ls_dft") {
                pipeline_h1 = Some((name.clone(), h1));
            }
        }
    }
    if models.tudcen.is_none() {
        notes.push("udccn/tudcen skipped: missing checkpoint".into());
    }

    if let (Some((params, net)), Some((src, h1))) = (models.tudcen, pipeline_h1) {
        notes.push(format!("tudcen and hold start from {src}+udccn"));
        let mut roll: Vec<Vec<Csi>> = Vec::with_capacity(h1.len());
        for chunk in h1.chunks(64) {
            roll.extend(extrapolate_batch(&params.dcen, net, chunk, n_slot - 2)?);
        }
        let mut tud = MethodSeries::new("tudcen", n_slot);
        let mut hold = MethodSeries::new("hold", n_slot);
        for k in 1..n_slot {
            let truth = dl(k);
            let pred: Vec<Csi> = if k == 1 { h1.clone() } else { roll.iter().map(|r| r[k - 2].clone()).collect() };
            tud.nmse_db[k] = Some(nmse_db(&truth, &pred)?.db);
            tud.sum_rate[k] = Some(mean_rate(&truth, &pred, n_s, sigma2)?);
            hold.nmse_db[k] = Some(nmse_db(&truth, &h1)?.db);
            hold.sum_rate[k] = Some(mean_rate(&truth, &h1, n_s, sigma2)?);
        }
        out.push(tud);
        out.push(hold);
    }
    Ok(out)
}

/// Test windows for `sys`, drawn from the test traces of `cfg`.
pub fn test_windows(cfg: &RunConfig, sys: &SystemConfig) -> Result<Vec<Window>> {
    let (a, b, c) = cfg.train_sfcen.split;
    let models: Vec<_> = (a + b..a + b + c).map(|k| cfg.channel.model(sys, cfg.trace_seed + k as u64)).collect();
    let traces = generate_traces(sys, &models)?;
    let tc = TrainConfig { window_len: sys.n_slot, stride: sys.n_slot, ..cfg.train_sfcen.clone() };
    let mut out = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        out.extend(make_windows(t, a + b + i, &tc)?);
    }
    Ok(out)
}

/// Runs one sweep over `base_windows`, the test split of `cfg`. Velocity
/// points regenerate the test traces at each speed.
pub fn run_sweep<T: Real>(kind: SweepKind, cfg: &RunConfig, base_windows: &[Window], models: &Models<'_, T>) -> Result<MetricsReport> {
    let start = Instant::now();
    let base = &cfg.sys;
    let axes = kind.axis();
    let mut notes = Vec::new();
    let mut points = Vec::new();
    for &a in &axes {
        let (mut sys, mut comb, mut r_s, mut snr) = (base.clone(), cfg.comb, cfg.r_s, cfg.eval_snr_db);
        match kind {
            SweepKind::FreqCr => comb = a as usize,
            SweepKind::SpatCr => r_s = a as usize,
            SweepKind::Snr => snr = a,
            SweepKind::Velocity => sys.ue_velocity_kmh = a,
            SweepKind::SlotIndex => {}
        }
        if kind == SweepKind::SpatCr {
            sys = sys.with_spatial_ratio(r_s)?;
        }
        let pattern = build_srs_pattern(&sys, comb, r_s, cfg.pilot_seed)?;
        let regenerated;
        let windows = if kind == SweepKind::Velocity {
            regenerated = test_windows(cfg, &sys)?;
            &regenerated
        } else {
            base_windows
        };
        let mut point_notes = Vec::new();
        let series = evaluate_point(&sys, &pattern, windows, snr, cfg.eval_seed, models, &mut point_notes)?;
        for n in point_notes {
            let n = if n.contains("skipped") { format!("axis {a}: {n}") } else { n };
            if !notes.contains(&n) {
                notes.push(n);
            }
        }
        points.push(series);
    }
    let pattern = build_srs_pattern(base, cfg.comb, cfg.r_s, cfg.pilot_seed)?;
    Ok(MetricsReport {
        kind,
        axes,
        points,
        overhead: overhead(base, &pattern, 1.0).or_else(|_| overhead(base, &pattern, base.srs_period_ms))?,
        runtime_s: start.elapsed().as_secs_f64(),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn_csi(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Csi {
        Array3::from_shape_fn(shape, |_| {
            C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * (0.5f64).sqrt()
        })
    }

    #[test]
    fn nmse_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = vec![randn_csi((2, 4, 6), &mut rng)];
        assert_eq!(nmse_db(&h, &h).unwrap().db, NMSE_FLOOR_DB);
        let z = vec![Csi::zeros((2, 4, 6))];
        assert!(nmse_db(&h, &z).unwrap().db.abs() < 1e-12);
        let r = nmse_db(&[z[0].clone(), h[0].clone()], &[h[0].clone(), h[0].clone()]).unwrap();
        assert_eq!(r.excluded, 1);
        assert!(nmse_db(&h, &[]).is_err());
    }

    #[test]
    fn nmse_monte_carlo_ten_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<Csi> = (0..500).map(|_| randn_csi((2, 4, 12), &mut rng)).collect();
        let est: Vec<Csi> = truth
            .iter()
            .map(|t| {
                let p = t.iter().map(|z| z.norm_sqr()).sum::<f64>() / t.len() as f64;
                let n = randn_csi(t.dim(), &mut rng);
                t + &(n * (p / 10.0).sqrt())
            })
            .collect();
        let db = nmse_db(&truth, &est).unwrap().db;
        assert!((db + 10.0).abs() < 0.3, "{db}");
    }

    #[test]
    fn precoder_cases() {
        let h = DMatrix::from_fn(2, 3, |r, c| if r == c { C64::new([3.0, 1.0][r], 0.0) } else { C64::new(0.0, 0.0) });
        let f = svd_precoder(&h, 2).unwrap();
        for s in 0..2 {
            assert!((f[(s, s)].norm() - 1.0).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DMatrix::from_fn(2, 1, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let v = DMatrix::from_fn(4, 1, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let f = svd_precoder(&(&u * v.adjoint()), 1).unwrap();
        let corr = (v.adjoint() * &f)[(0, 0)].norm() / v.norm();
        assert!((corr - 1.0).abs() < 1e-10);
        assert!(svd_precoder(&h, 3).is_err());
    }

    #[test]
    fn scalar_rate_closed_form() {
        let h = Csi::from_elem((1, 1, 1), C64::new(3f64.sqrt(), 0.0));
        assert!((sum_rate(&h, &h, 1, 1.0).unwrap() - 2.0).abs() < 1e-12);
        let z = Csi::zeros((2, 4, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = randn_csi((2, 4, 3), &mut rng);
        assert!(sum_rate(&z, &e, 2, 0.1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sweep_kinds_parse() {
        for k in SweepKind::ALL {
            assert_eq!(k.name().parse::<SweepKind>().unwrap(), k);
        }
        assert_eq!(SweepKind::Snr.axis().len(), 6);
        assert!("bogus".parse::<SweepKind>().is_err());
    }
}
