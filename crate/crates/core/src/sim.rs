//! Clustered multipath channel traces for a TDD massive-MIMO OFDM link.
//!
//! The generator is a parametric stand-in for a clustered-delay-line model:
//! `n_clusters` clusters of `rays_per_cluster` rays, each ray carrying a
//! complex gain, a delay, a BS-side angle mapped onto a half-wavelength ULA,
//! a UE-side angle mapped onto a second ULA, and a Doppler shift
//! `f_d · cos(φ − α)` where `α` is the direction of travel.
//!
//! Cluster geometry (delays, powers, angles, direction of travel) can be
//! pinned by `geometry_seed`, which mirrors a fixed tap table: traces then
//! differ only in their per-ray initial phases. Without it the geometry is
//! redrawn from `seed` on every trace.

use std::f64::consts::PI;

use ndarray::{s, Array3, Array5, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::{Csi, C64};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// OFDM symbols per slot (normal cyclic prefix).
pub const SYMBOLS_PER_SLOT: usize = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    /// BS antennas (N_T).
    pub n_tx: usize,
    /// UE antennas (N_R).
    pub n_rx: usize,
    /// BS RF chains (N_RF).
    pub n_rf: usize,
    /// Resource blocks (N_RB).
    pub n_rb: usize,
    /// Subcarriers (N_c = 12 N_RB).
    pub n_sc: usize,
    pub carrier_hz: f64,
    pub scs_hz: f64,
    pub numerology: u32,
    /// Slots per sub-frame (2^numerology).
    pub n_slot: usize,
    pub n_subframes: usize,
    /// SRS period T_p.
    pub srs_period_ms: f64,
    pub ue_velocity_kmh: f64,
    pub snr_db: f64,
}

impl SystemConfig {
    /// Full-size system: 32x4 antennas, 52 RBs at 120 kHz, 28 GHz, μ = 3,
    /// 100 sub-frames, 60 km/h, training SNR 5 dB, 16 RF chains (R_s = 2).
    pub fn full() -> Self {
        SystemConfig {
            n_tx: 32,
            n_rx: 4,
            n_rf: 16,
            n_rb: 52,
            n_sc: 624,
            carrier_hz: 28e9,
            scs_hz: 120e3,
            numerology: 3,
            n_slot: 8,
            n_subframes: 100,
            srs_period_ms: 1.0,
            ue_velocity_kmh: 60.0,
            snr_db: 5.0,
        }
    }

    /// Reduced-dimension preset: 8x2 antennas, 8 RBs (96 subcarriers),
    /// 20 sub-frames per trace, R_s = 2, SNR 20 dB.
    pub fn desk() -> Self {
        SystemConfig {
            n_tx: 8,
            n_rx: 2,
            n_rf: 4,
            n_rb: 8,
            n_sc: 96,
            n_subframes: 20,
            snr_db: 20.0,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_tx", self.n_tx),
            ("n_rx", self.n_rx),
            ("n_rf", self.n_rf),
            ("n_rb", self.n_rb),
            ("n_sc", self.n_sc),
            ("n_slot", self.n_slot),
            ("n_subframes", self.n_subframes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.numerology > 6 || self.n_slot != 1usize << self.numerology {
            return Err(Error::config(format!(
                "n_slot = {} but numerology {} requires {}",
                self.n_slot,
                self.numerology,
                1u64 << self.numerology.min(63)
            )));
        }
        if self.n_sc != 12 * self.n_rb {
            return Err(Error::config(format!(
                "n_sc = {} must equal 12 * n_rb = {}",
                self.n_sc,
                12 * self.n_rb
            )));
        }
        if self.n_rf > self.n_tx || !self.n_tx.is_multiple_of(self.n_rf) {
            return Err(Error::config(format!(
                "n_rf = {} must divide n_tx = {}",
                self.n_rf, self.n_tx
            )));
        }
        if !(self.carrier_hz > 0.0) || !(self.scs_hz > 0.0) {
            return Err(Error::config("carrier_hz and scs_hz must be positive"));
        }
        if !(self.srs_period_ms > 0.0) {
            return Err(Error::config("srs_period_ms must be positive"));
        }
        if !(self.ue_velocity_kmh >= 0.0) {
            return Err(Error::config("ue_velocity_kmh must be >= 0"));
        }
        Ok(())
    }

    pub fn slot_duration_s(&self) -> f64 {
        1e-3 / self.n_slot as f64
    }

    /// Spatial compression ratio R_s = N_T / N_RF.
    pub fn spatial_ratio(&self) -> usize {
        self.n_tx / self.n_rf
    }

    /// Copy with `n_rf = n_tx / r_s`.
    pub fn with_spatial_ratio(&self, r_s: usize) -> Result<Self> {
        if r_s == 0 || !self.n_tx.is_multiple_of(r_s) {
            return Err(Error::config(format!(
                "spatial ratio {r_s} must divide n_tx = {}",
                self.n_tx
            )));
        }
        Ok(SystemConfig {
            n_rf: self.n_tx / r_s,
            ..self.clone()
        })
    }
}

/// Maximum Doppler shift `v · f_c / c` in Hz.
pub fn max_doppler_hz(cfg: &SystemConfig) -> f64 {
    cfg.ue_velocity_kmh / 3.6 * cfg.carrier_hz / SPEED_OF_LIGHT
}

/// Coherence-time diagnostic `0.5 / f_d` in seconds (infinite for a static UE).
pub fn coherence_time_s(cfg: &SystemConfig) -> f64 {
    let fd = max_doppler_hz(cfg);
    if fd == 0.0 {
        f64::INFINITY
    } else {
        0.5 / fd
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelModelConfig {
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    /// Target RMS delay spread of the cluster power-delay profile.
    pub delay_spread_s: f64,
    /// Standard deviation of intra-cluster ray angles, degrees.
    pub angle_spread_deg: f64,
    pub seed: u64,
    /// Pins cluster geometry across traces when set.
    pub geometry_seed: Option<u64>,
    /// Per-BS-antenna transceiver factors, length N_T.
    pub calib_bs: Vec<C64>,
    /// Per-UE-antenna transceiver factors, length N_R.
    pub calib_ue: Vec<C64>,
}

impl ChannelModelConfig {
    /// 5 clusters x 4 rays, 100 ns RMS delay spread, 5 degree ray spread,
    /// ideal reciprocity.
    pub fn new(cfg: &SystemConfig, seed: u64) -> Self {
        ChannelModelConfig {
            n_clusters: 5,
            rays_per_cluster: 4,
            delay_spread_s: 100e-9,
            angle_spread_deg: 5.0,
            seed,
            geometry_seed: None,
            calib_bs: vec![C64::new(1.0, 0.0); cfg.n_tx],
            calib_ue: vec![C64::new(1.0, 0.0); cfg.n_rx],
        }
    }

    pub fn with_geometry_seed(mut self, geometry_seed: u64) -> Self {
        self.geometry_seed = Some(geometry_seed);
        self
    }

    /// Draws calibration factors `common · (1 + ripple·u) · exp(j·ripple·u')`
    /// with `u, u'` uniform on [-1, 1], one per antenna on each side.
    pub fn with_random_calibration(
        mut self,
        seed: u64,
        common_bs: C64,
        common_ue: C64,
        ripple: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca11_b0a7);
        let mut draw = |common: C64| {
            let amp = 1.0 + ripple * rng.random_range(-1.0..=1.0);
            let phase = ripple * rng.random_range(-1.0..=1.0);
            common * C64::from_polar(amp, phase)
        };
        self.calib_bs = (0..self.calib_bs.len()).map(|_| draw(common_bs)).collect();
        self.calib_ue = (0..self.calib_ue.len()).map(|_| draw(common_ue)).collect();
        self
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if self.n_clusters == 0 || self.rays_per_cluster == 0 {
            return Err(Error::config("n_clusters and rays_per_cluster must be >= 1"));
        }
        if !(self.delay_spread_s >= 0.0) || !(self.angle_spread_deg >= 0.0) {
            return Err(Error::config("delay and angle spreads must be >= 0"));
        }
        if self.calib_bs.len() != cfg.n_tx || self.calib_ue.len() != cfg.n_rx {
            return Err(Error::config(format!(
                "calibration lengths ({}, {}) do not match antennas ({}, {})",
                self.calib_bs.len(),
                self.calib_ue.len(),
                cfg.n_tx,
                cfg.n_rx
            )));
        }
        for c in self.calib_bs.iter().chain(&self.calib_ue) {
            let m = c.norm();
            if !(0.5..=2.0).contains(&m) {
                return Err(Error::config(format!(
                    "calibration magnitude {m} outside [0.5, 2.0]"
                )));
            }
        }
        Ok(())
    }

    pub fn is_ideal_reciprocity(&self) -> bool {
        let one = C64::new(1.0, 0.0);
        self.calib_bs.iter().chain(&self.calib_ue).all(|&c| c == one)
    }
}

/// One propagation path.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub power: f64,
    pub delay_s: f64,
    /// Angle from BS array broadside, radians.
    pub bs_angle: f64,
    /// Angle from UE array broadside, radians.
    pub ue_angle: f64,
    /// `cos(φ − α)`; Doppler shift is `f_d` times this.
    pub doppler_cos: f64,
}

/// Draws the ray geometry shared by every trace with the same geometry seed.
pub fn draw_geometry(model: &ChannelModelConfig, rng: &mut impl Rng) -> Vec<Ray> {
    let nc = model.n_clusters;
    let mut delays: Vec<f64> = (0..nc)
        .map(|c| if c == 0 { 0.0 } else { -(1.0 - rng.random::<f64>()).ln() })
        .collect();
    delays.sort_by(|a, b| a.total_cmp(b));
    let mut powers: Vec<f64> = delays
        .iter()
        .map(|&d| {
            let shadow_db: f64 = 3.0 * rng.sample::<f64, _>(StandardNormal);
            (-d).exp() * 10f64.powf(-shadow_db / 10.0)
        })
        .collect();
    let total: f64 = powers.iter().sum();
    powers.iter_mut().for_each(|p| *p /= total);

    let mean: f64 = powers.iter().zip(&delays).map(|(p, d)| p * d).sum();
    let second: f64 = powers.iter().zip(&delays).map(|(p, d)| p * d * d).sum();
    let rms = (second - mean * mean).max(0.0).sqrt();
    let scale = if rms > 0.0 {
        model.delay_spread_s / rms
    } else {
        0.0
    };

    let travel = rng.random_range(-PI..PI);
    let spread = model.angle_spread_deg.to_radians();
    let mut rays = Vec::with_capacity(nc * model.rays_per_cluster);
    for c in 0..nc {
        let bs_mean = rng.random_range(-PI / 2.0..PI / 2.0);
        let ue_mean = rng.random_range(-PI..PI);
        for _ in 0..model.rays_per_cluster {
            let bs: f64 = bs_mean + spread * rng.sample::<f64, _>(StandardNormal);
            let ue: f64 = ue_mean + spread * rng.sample::<f64, _>(StandardNormal);
            rays.push(Ray {
                power: powers[c] / model.rays_per_cluster as f64,
                delay_s: delays[c] * scale,
                bs_angle: bs,
                ue_angle: ue,
                doppler_cos: (ue - travel).cos(),
            });
        }
    }
    rays
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTrace {
    /// `[N_sf, N_slot, N_T, N_R, N_c]`
    pub uplink: Array5<C64>,
    /// `[N_sf, N_slot, N_R, N_T, N_c]`
    pub downlink: Array5<C64>,
    pub doppler_hz: f64,
}

impl ChannelTrace {
    pub fn n_subframes(&self) -> usize {
        self.uplink.shape()[0]
    }

    pub fn n_slot(&self) -> usize {
        self.uplink.shape()[1]
    }

    pub fn uplink_slot(&self, subframe: usize, slot: usize) -> ArrayView3<'_, C64> {
        self.uplink.slice(s![subframe, slot, .., .., ..])
    }

    pub fn downlink_slot(&self, subframe: usize, slot: usize) -> ArrayView3<'_, C64> {
        self.downlink.slice(s![subframe, slot, .., .., ..])
    }
}

/// `H^d[r, t, i] = calib_ue[r] · calib_bs[t] · H[t, r, i]`.
pub fn derive_downlink(uplink_slot: ArrayView3<'_, C64>, model: &ChannelModelConfig) -> Csi {
    let (nt, nr, nc) = uplink_slot.dim();
    Array3::from_shape_fn((nr, nt, nc), |(r, t, i)| {
        model.calib_ue[r] * model.calib_bs[t] * uplink_slot[[t, r, i]]
    })
}

pub fn generate_channel_trace(
    cfg: &SystemConfig,
    model: &ChannelModelConfig,
) -> Result<ChannelTrace> {
    cfg.validate()?;
    model.validate(cfg)?;

    let mut trace_rng = ChaCha8Rng::seed_from_u64(model.seed);
    let rays = match model.geometry_seed {
        Some(gs) => draw_geometry(model, &mut ChaCha8Rng::seed_from_u64(gs)),
        None => draw_geometry(model, &mut trace_rng),
    };
    let max_delay = rays.iter().map(|r| r.delay_s).fold(0.0, f64::max);
    if max_delay > 1.0 / cfg.scs_hz {
        return Err(Error::config(format!(
            "max delay {max_delay:e} s exceeds 1/scs = {:e} s (delay aliasing)",
            1.0 / cfg.scs_hz
        )));
    }
    let phases: Vec<f64> = rays
        .iter()
        .map(|_| trace_rng.random_range(0.0..2.0 * PI))
        .collect();

    let (nt, nr, nc) = (cfg.n_tx, cfg.n_rx, cfg.n_sc);
    let fd = max_doppler_hz(cfg);
    let t_slot = cfg.slot_duration_s();

    // Per-ray space-frequency signature, flattened [N_T * N_R * N_c].
    let signatures: Vec<Vec<C64>> = rays
        .iter()
        .map(|ray| {
            let a_bs: Vec<C64> = (0..nt)
                .map(|t| C64::from_polar(1.0, PI * t as f64 * ray.bs_angle.sin()))
                .collect();
            let a_ue: Vec<C64> = (0..nr)
                .map(|r| C64::from_polar(1.0, PI * r as f64 * ray.ue_angle.sin()))
                .collect();
            let freq: Vec<C64> = (0..nc)
                .map(|i| C64::from_polar(1.0, -2.0 * PI * i as f64 * cfg.scs_hz * ray.delay_s))
                .collect();
            let mut sig = Vec::with_capacity(nt * nr * nc);
            for a in &a_bs {
                for b in &a_ue {
                    let ab = a * b;
                    sig.extend(freq.iter().map(|f| ab * f));
                }
            }
            sig
        })
        .collect();

    let (nsf, nslot) = (cfg.n_subframes, cfg.n_slot);
    let mut uplink = Array5::<C64>::zeros((nsf, nslot, nt, nr, nc));
    let mut downlink = Array5::<C64>::zeros((nsf, nslot, nr, nt, nc));
    let mut acc = vec![C64::new(0.0, 0.0); nt * nr * nc];
    for s in 0..nsf {
        for k in 0..nslot {
            // The special slot is sampled at its SRS symbol.
            let offset = if k == 0 { (SYMBOLS_PER_SLOT - 1) as f64 / SYMBOLS_PER_SLOT as f64 } else { 0.0 };
            let time = ((s * nslot + k) as f64 + offset) * t_slot;
            acc.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
            for ((ray, sig), phase) in rays.iter().zip(&signatures).zip(&phases) {
                let doppler = fd * ray.doppler_cos;
                let coef = C64::from_polar(ray.power.sqrt(), phase + 2.0 * PI * doppler * time);
                for (a, &x) in acc.iter_mut().zip(sig) {
                    *a += coef * x;
                }
            }
            let power = acc.iter().map(|x| x.norm_sqr()).sum::<f64>() / acc.len() as f64;
            let norm = if power > 0.0 { 1.0 / power.sqrt() } else { 1.0 };
            let slot = Array3::from_shape_vec((nt, nr, nc), acc.iter().map(|x| x * norm).collect())
                .expect("shape matches buffer");
            downlink
                .slice_mut(s![s, k, .., .., ..])
                .assign(&derive_downlink(slot.view(), model));
            uplink.slice_mut(s![s, k, .., .., ..]).assign(&slot);
        }
    }

    Ok(ChannelTrace {
        uplink,
        downlink,
        doppler_hz: fd,
    })
}

/// Generates one trace per model, in parallel when the `parallel` feature is on.
pub fn generate_traces(
    cfg: &SystemConfig,
    models: &[ChannelModelConfig],
) -> Result<Vec<ChannelTrace>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        models
            .par_iter()
            .map(|m| generate_channel_trace(cfg, m))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        models.iter().map(|m| generate_channel_trace(cfg, m)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    /// Carries the uplink SRS.
    Special,
    Downlink,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSchedule {
    /// One row per sub-frame.
    pub slot_roles: Vec<Vec<SlotRole>>,
    /// OFDM symbol carrying SRS inside the special slot.
    pub pilot_symbol_index: usize,
}

/// One SRS per sub-frame in slot 0, every other slot downlink.
pub fn build_frame_schedule(cfg: &SystemConfig) -> FrameSchedule {
    let row: Vec<SlotRole> = (0..cfg.n_slot)
        .map(|k| if k == 0 { SlotRole::Special } else { SlotRole::Downlink })
        .collect();
    FrameSchedule {
        slot_roles: vec![row; cfg.n_subframes],
        pilot_symbol_index: SYMBOLS_PER_SLOT - 1,
    }
}
