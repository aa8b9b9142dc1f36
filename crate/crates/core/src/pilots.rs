//! Comb-structured SRS patterns and noisy pilot observations.

use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sim::SystemConfig;
use crate::C64;

pub const ALLOWED_COMBS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct SrsPattern {
    /// Transmission comb N_TC (frequency compression ratio R_f).
    pub comb: usize,
    pub pilot_sc_indices: Vec<usize>,
    /// Orthogonal fd-CDM codes, `[N_R, N_R]`.
    pub cdm_codes: Array2<C64>,
    /// BS antennas wired to RF chains, stride R_s.
    pub rf_antenna_set: Vec<usize>,
    /// Seed for pilot symbol phases.
    pub seed: u64,
}

impl SrsPattern {
    pub fn n_pilot(&self) -> usize {
        self.pilot_sc_indices.len()
    }

    pub fn n_rf(&self) -> usize {
        self.rf_antenna_set.len()
    }

    pub fn n_rx(&self) -> usize {
        self.cdm_codes.nrows()
    }

    /// Antenna stride R_s.
    pub fn spatial_ratio(&self) -> usize {
        match self.rf_antenna_set.as_slice() {
            [_, b, ..] => *b,
            _ => 1,
        }
    }

    /// One line per field, suitable for a run manifest.
    pub fn manifest_lines(&self) -> String {
        format!(
            "pilots.comb={}\npilots.rf_antenna_set={:?}\npilots.seed={}\n",
            self.comb, self.rf_antenna_set, self.seed
        )
    }
}

/// `N x N` DFT matrix, with entries snapped to exact `±1`, `±j` where they
/// land on the axes.
pub fn dft_codes(n: usize) -> Array2<C64> {
    Array2::from_shape_fn((n, n), |(r, k)| {
        let z = C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (r * k % n) as f64 / n as f64);
        let snap = |x: f64| {
            if (x - x.round()).abs() < 1e-12 {
                x.round()
            } else {
                x
            }
        };
        C64::new(snap(z.re), snap(z.im))
    })
}

pub fn build_srs_pattern(cfg: &SystemConfig, comb: usize, r_s: usize, seed: u64) -> Result<SrsPattern> {
    if !ALLOWED_COMBS.contains(&comb) {
        return Err(Error::InvalidComb {
            comb,
            reason: format!("must be one of {ALLOWED_COMBS:?}"),
        });
    }
    if !cfg.n_sc.is_multiple_of(comb) {
        return Err(Error::InvalidComb {
            comb,
            reason: format!("does not divide {} subcarriers", cfg.n_sc),
        });
    }
    if r_s == 0 || !cfg.n_tx.is_multiple_of(r_s) {
        return Err(Error::config(format!("r_s = {r_s} must divide n_tx = {}", cfg.n_tx)));
    }
    if cfg.n_rf != cfg.n_tx / r_s {
        return Err(Error::config(format!(
            "n_rf = {} but n_tx / r_s = {}",
            cfg.n_rf,
            cfg.n_tx / r_s
        )));
    }
    Ok(SrsPattern {
        comb,
        pilot_sc_indices: (0..cfg.n_sc).step_by(comb).collect(),
        cdm_codes: dft_codes(cfg.n_rx),
        rf_antenna_set: (0..cfg.n_tx).step_by(r_s).collect(),
        seed,
    })
}

/// Per-subcarrier diagonal pilot blocks `[N_c', N_R, N_R]`: a QPSK symbol
/// per port times that port's CDM code chip.
pub fn pilot_matrix(pattern: &SrsPattern) -> Array3<C64> {
    let nr = pattern.n_rx();
    let mut rng = ChaCha8Rng::seed_from_u64(pattern.seed ^ 0x5125_0000);
    let qpsk = [
        C64::new(1.0, 0.0),
        C64::new(0.0, 1.0),
        C64::new(-1.0, 0.0),
        C64::new(0.0, -1.0),
    ];
    let mut s = Array3::zeros((pattern.n_pilot(), nr, nr));
    for i in 0..pattern.n_pilot() {
        for r in 0..nr {
            let sym = qpsk[rng.random_range(0..4)];
            s[[i, r, r]] = sym * pattern.cdm_codes[[r, i % nr]];
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotObservation {
    /// Diagonal pilot blocks `[N_c', N_R, N_R]`.
    pub s_matrix: Array3<C64>,
    /// Received pilots `[N_c', N_RF, N_R]`.
    pub y_matrix: Array3<C64>,
    pub snr_db: f64,
}

impl PilotObservation {
    /// Concatenated form `[N_RF, N_R · N_c']`, column `i · N_R + r`.
    pub fn y_flat(&self) -> Array2<C64> {
        let (np, nrf, nr) = self.y_matrix.dim();
        Array2::from_shape_fn((nrf, nr * np), |(a, c)| self.y_matrix[[c / nr, a, c % nr]])
    }
}

/// `Y_i = H_i[A_RF, :] · S_i + N_i` with the default pilot matrix of `pattern`.
/// `snr_db = +inf` disables noise.
pub fn observe_pilots(
    trace_slot: ArrayView3<'_, C64>,
    pattern: &SrsPattern,
    snr_db: f64,
    seed: u64,
) -> Result<PilotObservation> {
    observe_pilots_with(trace_slot, pattern, pilot_matrix(pattern), snr_db, seed)
}

/// As [`observe_pilots`] with caller-supplied diagonal pilot blocks.
pub fn observe_pilots_with(
    trace_slot: ArrayView3<'_, C64>,
    pattern: &SrsPattern,
    s_matrix: Array3<C64>,
    snr_db: f64,
    seed: u64,
) -> Result<PilotObservation> {
    let (nt, nr, nc) = trace_slot.dim();
    let np = pattern.n_pilot();
    if s_matrix.dim() != (np, nr, nr) || pattern.n_rx() != nr {
        return Err(Error::shape(
            "observe_pilots",
            format!("pilot blocks {:?} vs N_c' = {np}, N_R = {nr}", s_matrix.dim()),
        ));
    }
    if pattern.pilot_sc_indices.last().is_some_and(|&i| i >= nc)
        || pattern.rf_antenna_set.last().is_some_and(|&a| a >= nt)
    {
        return Err(Error::shape("observe_pilots", "pattern exceeds channel dimensions"));
    }
    let nrf = pattern.n_rf();
    let mut y = Array3::<C64>::zeros((np, nrf, nr));
    for (pi, &sc) in pattern.pilot_sc_indices.iter().enumerate() {
        for (a, &ant) in pattern.rf_antenna_set.iter().enumerate() {
            for r in 0..nr {
                y[[pi, a, r]] = trace_slot[[ant, r, sc]] * s_matrix[[pi, r, r]];
            }
        }
    }
    if snr_db.is_finite() {
        let signal = y.iter().map(|z| z.norm_sqr()).sum::<f64>() / y.len() as f64;
        let sigma = (signal / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for z in y.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *z += C64::new(re, im) * sigma;
        }
    }
    Ok(PilotObservation {
        s_matrix,
        y_matrix: y,
        snr_db,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overhead {
    /// Pilot REs per sounding event.
    pub c_sl: usize,
    /// Pilot REs over the horizon.
    pub c_o: usize,
}

pub fn overhead(cfg: &SystemConfig, pattern: &SrsPattern, horizon_ms: f64) -> Result<Overhead> {
    let events = horizon_ms / cfg.srs_period_ms;
    if !(events >= 0.0) || (events - events.round()).abs() > 1e-9 {
        return Err(Error::config(format!(
            "horizon {horizon_ms} ms is not a multiple of T_p = {} ms",
            cfg.srs_period_ms
        )));
    }
    let c_sl = pattern.n_rf() * cfg.n_rx * pattern.n_pilot();
    Ok(Overhead {
        c_sl,
        c_o: events.round() as usize * c_sl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_channel_trace, ChannelModelConfig};

    fn one_rb() -> SystemConfig {
        SystemConfig {
            n_rb: 1,
            n_sc: 12,
            ..SystemConfig::full()
        }
    }

    #[test]
    fn pattern_layout() {
        let p = build_srs_pattern(&one_rb(), 2, 2, 0).unwrap();
        assert_eq!(p.pilot_sc_indices, vec![0, 2, 4, 6, 8, 10]);
        assert_eq!(p.cdm_codes.dim(), (4, 4));
        let p = build_srs_pattern(&SystemConfig::full(), 2, 2, 0).unwrap();
        assert_eq!(p.n_pilot(), 312);
        assert_eq!(p.rf_antenna_set, (0..32).step_by(2).collect::<Vec<_>>());
        let cfg = SystemConfig::full().with_spatial_ratio(1).unwrap();
        let p = build_srs_pattern(&cfg, 4, 1, 0).unwrap();
        assert_eq!(p.rf_antenna_set, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_combs() {
        let cfg = SystemConfig::full();
        assert!(matches!(build_srs_pattern(&cfg, 3, 2, 0), Err(Error::InvalidComb { .. })));
        // 624 = 16 * 39
        assert!(build_srs_pattern(&cfg, 16, 2, 0).is_ok());
        let desk = SystemConfig::desk();
        assert!(build_srs_pattern(&desk, 16, 2, 0).is_ok());
        let odd = SystemConfig { n_rb: 2, n_sc: 24, ..desk };
        assert!(matches!(build_srs_pattern(&odd, 16, 2, 0), Err(Error::InvalidComb { .. })));
        assert!(build_srs_pattern(&SystemConfig::desk(), 2, 4, 0).is_err());
    }

    #[test]
    fn cdm_orthogonal() {
        for n in 1..=6 {
            let c = dft_codes(n);
            let g = c.dot(&c.t().mapv(|z| z.conj()));
            for ((i, j), v) in g.indexed_iter() {
                let want = if i == j { n as f64 } else { 0.0 };
                assert!((v - C64::new(want, 0.0)).norm() < 1e-12);
            }
        }
        let c4 = dft_codes(4);
        assert!(c4.iter().all(|z| (z.re == 0.0 || z.re.abs() == 1.0) && (z.im == 0.0 || z.im.abs() == 1.0)));
    }

    #[test]
    fn noiseless_and_identity_observations() {
        let cfg = SystemConfig::desk();
        let trace = generate_channel_trace(&cfg, &ChannelModelConfig::new(&cfg, 4)).unwrap();
        let slot = trace.uplink_slot(0, 0);
        let p = build_srs_pattern(&cfg, 4, 2, 1).unwrap();
        let obs = observe_pilots(slot, &p, f64::INFINITY, 0).unwrap();
        for (pi, &sc) in p.pilot_sc_indices.iter().enumerate() {
            for (a, &ant) in p.rf_antenna_set.iter().enumerate() {
                for r in 0..cfg.n_rx {
                    assert_eq!(obs.y_matrix[[pi, a, r]], slot[[ant, r, sc]] * obs.s_matrix[[pi, r, r]]);
                }
            }
        }
        assert!(obs.s_matrix.iter().all(|z| z.norm() == 0.0 || z.norm() == 1.0));

        let eye = Array3::from_shape_fn((p.n_pilot(), 2, 2), |(_, i, j)| {
            if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }
        });
        let clean = observe_pilots_with(slot, &p, eye.clone(), f64::INFINITY, 0).unwrap();
        let noisy = observe_pilots_with(slot, &p, eye, 10.0, 3).unwrap();
        for (pi, &sc) in p.pilot_sc_indices.iter().enumerate() {
            for (a, &ant) in p.rf_antenna_set.iter().enumerate() {
                assert_eq!(clean.y_matrix[[pi, a, 1]], slot[[ant, 1, sc]]);
            }
        }
        assert_ne!(clean.y_matrix, noisy.y_matrix);
        let flat = clean.y_flat();
        assert_eq!(flat.dim(), (4, 2 * p.n_pilot()));
        assert_eq!(flat[[3, 2 * 5 + 1]], clean.y_matrix[[5, 3, 1]]);
    }

    #[test]
    fn noise_power_matches_snr() {
        let cfg = SystemConfig::desk();
        let trace = generate_channel_trace(&cfg, &ChannelModelConfig::new(&cfg, 8)).unwrap();
        let slot = trace.uplink_slot(0, 0);
        let p = build_srs_pattern(&cfg, 2, 2, 1).unwrap();
        let clean = observe_pilots(slot, &p, f64::INFINITY, 0).unwrap();
        let sig: f64 = clean.y_matrix.iter().map(|z| z.norm_sqr()).sum();
        let mut ratio = 0.0;
        for seed in 0..100 {
            let noisy = observe_pilots(slot, &p, 0.0, seed).unwrap();
            let n: f64 = (&noisy.y_matrix - &clean.y_matrix).iter().map(|z| z.norm_sqr()).sum();
            ratio += n / sig / 100.0;
        }
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn overhead_counts() {
        let full_cfg = SystemConfig::full().with_spatial_ratio(1).unwrap();
        let full = build_srs_pattern(&full_cfg, 1, 1, 0).unwrap();
        let o = overhead(&full_cfg, &full, 1.0).unwrap();
        assert_eq!(o.c_sl, 32 * 4 * 624);
        assert_eq!(o.c_sl, 79872);
        assert_eq!(overhead(&full_cfg, &full, 10.0).unwrap().c_o, 10 * o.c_sl);
        let cfg = SystemConfig::full();
        let comp = build_srs_pattern(&cfg, 4, 2, 0).unwrap();
        assert_eq!(overhead(&cfg, &comp, 1.0).unwrap().c_sl, 9984);
        assert!(overhead(&cfg, &comp, 1.5).is_err());
    }
}
