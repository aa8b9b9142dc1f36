//! wasm-bindgen exports for the static page in `www/`.
//!
//! Everything runs at the reduced desk dimensions so each call stays well
//! under a second in the browser.

use mxlab::baselines::{interp_joint, ls_estimate, InterpMethod};
use mxlab::eval::nmse_db;
use mxlab::pilots::{build_srs_pattern, observe_pilots};
use mxlab::sim::{generate_channel_trace, max_doppler_hz, ChannelModelConfig, SystemConfig};
use wasm_bindgen::prelude::*;

fn sys(velocity_kmh: f64, n_subframes: usize) -> SystemConfig {
    SystemConfig { ue_velocity_kmh: velocity_kmh.max(0.0), n_subframes, ..SystemConfig::desk() }
}

fn js_err(e: mxlab::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[N_T, N_c]` of the desk system, the shape of [`channel_heatmap`].
#[wasm_bindgen]
pub fn heatmap_dims() -> Vec<u32> {
    let s = SystemConfig::desk();
    vec![s.n_tx as u32, s.n_sc as u32]
}

/// `|H|` in dB for UE antenna 0 at `slot` of the first sub-frame, row-major
/// `[N_T, N_c]`.
#[wasm_bindgen]
pub fn channel_heatmap(velocity_kmh: f64, seed: u32, slot: u32) -> Result<Vec<f32>, JsError> {
    let s = sys(velocity_kmh, 1);
    let tr = generate_channel_trace(&s, &ChannelModelConfig::new(&s, seed as u64)).map_err(js_err)?;
    let k = (slot as usize).min(s.n_slot - 1);
    let h = tr.uplink_slot(0, k);
    let mut out = Vec::with_capacity(s.n_tx * s.n_sc);
    for t in 0..s.n_tx {
        for i in 0..s.n_sc {
            out.push((10.0 * h[[t, 0, i]].norm_sqr().max(1e-12).log10()) as f32);
        }
    }
    Ok(out)
}

/// NMSE in dB of LS followed by linear, spline and DFT interpolation,
/// averaged over `n_subframes` SRS slots. Spline is NaN when the grid is too
/// coarse for it.
#[wasm_bindgen]
pub fn baseline_nmse(comb: u32, r_s: u32, snr_db: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let s = sys(30.0, 8).with_spatial_ratio(r_s as usize).map_err(js_err)?;
    let p = build_srs_pattern(&s, comb as usize, r_s as usize, seed as u64).map_err(js_err)?;
    let tr = generate_channel_trace(&s, &ChannelModelConfig::new(&s, seed as u64)).map_err(js_err)?;
    let mut out = Vec::new();
    for m in [InterpMethod::Linear, InterpMethod::Spline, InterpMethod::Dft] {
        let (mut truth, mut est) = (Vec::new(), Vec::new());
        let mut ok = true;
        for sf in 0..s.n_subframes {
            let slot = tr.uplink_slot(sf, 0);
            let obs = observe_pilots(slot, &p, snr_db, seed as u64 * 1000 + sf as u64).map_err(js_err)?;
            match interp_joint(ls_estimate(&obs).map_err(js_err)?.h_ls.view(), m, s.n_tx, s.n_sc) {
                Ok(h) => {
                    truth.push(slot.to_owned());
                    est.push(h);
                }
                Err(_) => ok = false,
            }
        }
        out.push(if ok { nmse_db(&truth, &est).map_err(js_err)?.db } else { f64::NAN });
    }
    Ok(out)
}

/// Normalized slot-lag correlation averaged over `n_draws` channels, then
/// `J0(2π f_d τ)` for the same lags: `[emp_0..emp_L, j0_0..j0_L]` with
/// `L = N_slot - 2`.
#[wasm_bindgen]
pub fn doppler_correlation(velocity_kmh: f64, n_draws: u32) -> Result<Vec<f64>, JsError> {
    let s = sys(velocity_kmh, 1);
    let lags = s.n_slot - 1;
    let mut emp = vec![0.0; lags];
    let n = n_draws.max(1);
    for d in 0..n {
        let tr = generate_channel_trace(&s, &ChannelModelConfig::new(&s, 50_000 + d as u64)).map_err(js_err)?;
        let a = tr.uplink_slot(0, 1);
        let pa: f64 = a.iter().map(|x| x.norm_sqr()).sum();
        for (lag, e) in emp.iter_mut().enumerate() {
            let b = tr.uplink_slot(0, 1 + lag);
            let pb: f64 = b.iter().map(|x| x.norm_sqr()).sum();
            let c: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum();
            *e += c / (pa * pb).sqrt() / n as f64;
        }
    }
    let fd = max_doppler_hz(&s);
    let j0 = (0..lags).map(|l| bessel_j0(2.0 * std::f64::consts::PI * fd * l as f64 * s.slot_duration_s()));
    Ok(emp.into_iter().chain(j0).collect())
}

/// Power series; accurate for |x| < 20.
pub fn bessel_j0(x: f64) -> f64 {
    let q = -(x * x) / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..60 {
        term *= q / (k * k) as f64;
        sum += term;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn j0_known_values() {
        assert!((bessel_j0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_j0(2.404825557695773)).abs() < 1e-12);
        assert!((bessel_j0(1.0) - 0.7651976865579666).abs() < 1e-12);
    }

    #[test]
    fn exports_run_natively() {
        let dims = heatmap_dims();
        let h = channel_heatmap(30.0, 1, 3).unwrap();
        assert_eq!(h.len(), (dims[0] * dims[1]) as usize);
        let b = baseline_nmse(4, 2, 20.0, 0).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b[2] < b[0], "{b:?}");
        assert_eq!(baseline_nmse(2, 4, 20.0, 0).unwrap().len(), 3);
        let c = doppler_correlation(120.0, 20).unwrap();
        assert_eq!(c.len(), 14);
        assert!((c[0] - 1.0).abs() < 1e-9 && (c[7] - 1.0).abs() < 1e-12);
    }
}
