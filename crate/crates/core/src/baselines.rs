//! LS coarse estimation and classical interpolation baselines.

use ndarray::{Array3, ArrayView3, Axis};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::pilots::PilotObservation;
use crate::C64;

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseEstimate {
    /// `[N_RF, N_R, N_c']`
    pub h_ls: Array3<C64>,
}

/// `Ĥ_i = Y_i · S_i^{-1}` per pilot subcarrier.
pub fn ls_estimate(obs: &PilotObservation) -> Result<CoarseEstimate> {
    let (np, nrf, nr) = obs.y_matrix.dim();
    if obs.s_matrix.dim() != (np, nr, nr) {
        return Err(Error::shape(
            "ls_estimate",
            format!("S {:?} vs Y {:?}", obs.s_matrix.dim(), obs.y_matrix.dim()),
        ));
    }
    for i in 0..np {
        for r in 0..nr {
            let m = obs.s_matrix[[i, r, r]].norm();
            if m < 1e-12 {
                return Err(Error::SingularPilot {
                    subcarrier: i,
                    port: r,
                    magnitude: m,
                });
            }
        }
    }
    let h_ls = Array3::from_shape_fn((nrf, nr, np), |(a, r, i)| {
        obs.y_matrix[[i, a, r]] / obs.s_matrix[[i, r, r]]
    });
    Ok(CoarseEstimate { h_ls })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InterpMethod {
    Linear,
    /// Natural cubic spline.
    Spline,
    Dft,
}

impl InterpMethod {
    pub const ALL: [InterpMethod; 3] = [InterpMethod::Linear, InterpMethod::Spline, InterpMethod::Dft];

    pub fn name(self) -> &'static str {
        match self {
            InterpMethod::Linear => "linear",
            InterpMethod::Spline => "spline",
            InterpMethod::Dft => "dft",
        }
    }
}

/// Where the DFT interpolator inserts zeros in the transform domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Padding {
    /// After the last bin: content assumed at non-negative delays.
    Tail,
    /// Between the positive and negative halves: content centred on zero.
    Centre,
}

/// Interpolates along the subcarrier axis of `[N_a, N_R, N_c']`, pilots at
/// stride `n_sc_full / N_c'`.
pub fn interp_frequency(
    h_partial: ArrayView3<'_, C64>,
    method: InterpMethod,
    n_sc_full: usize,
) -> Result<Array3<C64>> {
    interp_axis(h_partial, Axis(2), method, n_sc_full, Padding::Tail)
}

/// Interpolates along the BS-antenna axis of `[N_RF, N_R, N_c]`, pilot
/// antennas at stride `n_tx_full / N_RF`.
pub fn interp_spatial(
    h_partial: ArrayView3<'_, C64>,
    method: InterpMethod,
    n_tx_full: usize,
) -> Result<Array3<C64>> {
    interp_axis(h_partial, Axis(0), method, n_tx_full, Padding::Centre)
}

/// Frequency first, then spatial.
pub fn interp_joint(
    h_ls: ArrayView3<'_, C64>,
    method: InterpMethod,
    n_tx_full: usize,
    n_sc_full: usize,
) -> Result<Array3<C64>> {
    let f = interp_frequency(h_ls, method, n_sc_full)?;
    interp_spatial(f.view(), method, n_tx_full)
}

fn interp_axis(
    h: ArrayView3<'_, C64>,
    axis: Axis,
    method: InterpMethod,
    n_full: usize,
    padding: Padding,
) -> Result<Array3<C64>> {
    let n = h.len_of(axis);
    if n == 0 || !n_full.is_multiple_of(n) {
        return Err(Error::shape(
            "interp",
            format!("{n} samples do not tile {n_full} positions"),
        ));
    }
    if n == n_full {
        return Ok(h.to_owned());
    }
    let stride = n_full / n;
    let mut shape = [h.shape()[0], h.shape()[1], h.shape()[2]];
    shape[axis.index()] = n_full;
    let mut out = Array3::<C64>::zeros(shape);
    let mut planner = FftPlanner::<f64>::new();
    for (src, mut dst) in h.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let samples: Vec<C64> = src.iter().copied().collect();
        let full = match method {
            InterpMethod::Linear => real_imag(&samples, |v| linear_1d(v, stride, n_full))?,
            InterpMethod::Spline => real_imag(&samples, |v| spline_1d(v, stride, n_full))?,
            InterpMethod::Dft => dft_1d(&mut planner, &samples, n_full, padding),
        };
        dst.iter_mut().zip(full).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

fn real_imag(
    samples: &[C64],
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<C64>> {
    let re: Vec<f64> = samples.iter().map(|z| z.re).collect();
    let im: Vec<f64> = samples.iter().map(|z| z.im).collect();
    let (re, im) = (f(&re)?, f(&im)?);
    Ok(re.into_iter().zip(im).map(|(a, b)| C64::new(a, b)).collect())
}

/// Sample `k` sits at position `k * stride`; ends extrapolate the boundary segment.
fn linear_1d(v: &[f64], stride: usize, n_full: usize) -> Result<Vec<f64>> {
    let n = v.len();
    if n < 2 {
        return Err(Error::InsufficientPoints {
            method: "linear",
            have: n,
            need: 2,
        });
    }
    Ok((0..n_full)
        .map(|x| {
            let k = (x / stride).min(n - 2);
            let t = (x as f64 - (k * stride) as f64) / stride as f64;
            v[k] + t * (v[k + 1] - v[k])
        })
        .collect())
}

fn spline_1d(v: &[f64], stride: usize, n_full: usize) -> Result<Vec<f64>> {
    let n = v.len();
    if n < 4 {
        return Err(Error::InsufficientPoints {
            method: "spline",
            have: n,
            need: 4,
        });
    }
    // Second derivatives of the natural spline on unit knot spacing:
    // m[k-1] + 4 m[k] + m[k+1] = 6 (v[k+1] - 2 v[k] + v[k-1]), m[0] = m[n-1] = 0.
    let inner = n - 2;
    let mut diag = vec![4.0; inner];
    let mut rhs: Vec<f64> = (1..n - 1).map(|k| 6.0 * (v[k + 1] - 2.0 * v[k] + v[k - 1])).collect();
    for i in 1..inner {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    let mut m = vec![0.0; n];
    for i in (0..inner).rev() {
        let next = if i + 1 < inner { m[i + 2] } else { 0.0 };
        m[i + 1] = (rhs[i] - next) / diag[i];
    }
    Ok((0..n_full)
        .map(|x| {
            let k = (x / stride).min(n - 2);
            let t = (x as f64 - (k * stride) as f64) / stride as f64;
            let (a, b) = (v[k], v[k + 1]);
            let (ma, mb) = (m[k], m[k + 1]);
            let c1 = b - a - (2.0 * ma + mb) / 6.0;
            a + c1 * t + ma / 2.0 * t * t + (mb - ma) / 6.0 * t * t * t
        })
        .collect())
}

fn dft_1d(planner: &mut FftPlanner<f64>, samples: &[C64], n_full: usize, padding: Padding) -> Vec<C64> {
    let n = samples.len();
    let mut coef = samples.to_vec();
    planner.plan_fft_inverse(n).process(&mut coef);
    let scale = 1.0 / n as f64;
    let mut padded = vec![C64::new(0.0, 0.0); n_full];
    match padding {
        Padding::Tail => {
            for (p, c) in padded.iter_mut().zip(&coef) {
                *p = c * scale;
            }
        }
        Padding::Centre => {
            let half = n / 2;
            for m in 0..n {
                let c = coef[m] * scale;
                if n.is_multiple_of(2) && m == half {
                    padded[m] += c * 0.5;
                    padded[n_full - half] += c * 0.5;
                } else if m < half || (n % 2 == 1 && m == half) {
                    padded[m] = c;
                } else {
                    padded[n_full - (n - m)] = c;
                }
            }
        }
    }
    planner.plan_fft_forward(n_full).process(&mut padded);
    padded
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn nmse(a: &Array3<C64>, b: &Array3<C64>) -> f64 {
        let e: f64 = (a - b).iter().map(|z| z.norm_sqr()).sum();
        let p: f64 = b.iter().map(|z| z.norm_sqr()).sum();
        10.0 * (e / p).log10()
    }

    #[test]
    fn linear_exact_on_linear_field() {
        let full = Array3::from_shape_fn((2, 1, 12), |(a, _, i)| C64::new(0.5 * i as f64 + a as f64, -2.0 * i as f64));
        let part = full.slice(ndarray::s![.., .., ..;2]).to_owned();
        let out = interp_frequency(part.view(), InterpMethod::Linear, 12).unwrap();
        for (o, f) in out.iter().zip(full.iter()) {
            assert!((o - f).norm() < 1e-12);
        }
    }

    #[test]
    fn spline_exact_on_cubic_free_quadratic_interior() {
        // Natural splines reproduce straight lines exactly.
        let full = Array3::from_shape_fn((1, 1, 16), |(_, _, i)| C64::new(3.0 - i as f64, 0.0));
        let part = full.slice(ndarray::s![.., .., ..;4]).to_owned();
        let out = interp_frequency(part.view(), InterpMethod::Spline, 16).unwrap();
        for (o, f) in out.iter().zip(full.iter()) {
            assert!((o - f).norm() < 1e-12);
        }
    }

    #[test]
    fn insufficient_points() {
        let p = Array3::<C64>::zeros((1, 1, 3));
        assert!(matches!(
            interp_frequency(p.view(), InterpMethod::Spline, 12),
            Err(Error::InsufficientPoints { need: 4, .. })
        ));
        let p = Array3::<C64>::zeros((1, 1, 1));
        assert!(matches!(
            interp_frequency(p.view(), InterpMethod::Linear, 4),
            Err(Error::InsufficientPoints { need: 2, .. })
        ));
    }

    #[test]
    fn dft_single_path_on_grid_delay() {
        let n = 96;
        let (scs, tau) = (120e3, 5.0 / (96.0 * 120e3));
        let full = Array3::from_shape_fn((1, 1, n), |(_, _, i)| {
            C64::from_polar(1.0, -2.0 * PI * i as f64 * scs * tau)
        });
        let part = full.slice(ndarray::s![.., .., ..;2]).to_owned();
        let out = interp_frequency(part.view(), InterpMethod::Dft, n).unwrap();
        assert!(nmse(&out, &full) < -40.0);
    }

    #[test]
    fn dft_spatial_signed_angles() {
        for sin in [0.25, -0.25, 0.0] {
            let full = Array3::from_shape_fn((8, 1, 1), |(t, _, _)| C64::from_polar(1.0, PI * t as f64 * sin));
            let part = full.slice(ndarray::s![..;2, .., ..]).to_owned();
            let out = interp_spatial(part.view(), InterpMethod::Dft, 8).unwrap();
            assert!(nmse(&out, &full) < -30.0, "sin = {sin}");
        }
    }

    #[test]
    fn identity_at_unit_stride() {
        let h = Array3::from_shape_fn((3, 2, 5), |(a, b, c)| C64::new(a as f64, (b * c) as f64));
        for m in InterpMethod::ALL {
            assert_eq!(interp_spatial(h.view(), m, 3).unwrap(), h);
        }
    }
}
