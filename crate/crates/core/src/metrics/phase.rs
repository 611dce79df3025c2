//! Phase congruency from a log-Gabor filter bank, and the fusion measure
//! built on it.
//!
//! Filters are applied in the frequency domain. For each orientation the
//! local energy across scales is compared against the summed amplitudes,
//! with a noise threshold estimated from the finest scale and a sigmoid
//! weight penalising narrow frequency spread. The fusion measure correlates
//! the phase congruency map and its principal moments between the fused
//! image and each source (and their pixel-wise maximum).

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::plane;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub scales: usize,
    pub orientations: usize,
    /// Wavelength of the finest filter, in pixels.
    pub min_wavelength: f64,
    /// Ratio between successive filter wavelengths.
    pub mult: f64,
    /// Bandwidth: σ of the log-Gabor over its centre frequency.
    pub sigma_on_f: f64,
    /// Noise threshold in standard deviations above the mean noise energy.
    pub noise_k: f64,
    /// Frequency-spread cut-off and sigmoid gain.
    pub cut_off: f64,
    pub gain: f64,
    /// Exponents of the phase, maximum-moment and minimum-moment factors.
    pub exponents: [f64; 3],
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            scales: 4,
            orientations: 4,
            min_wavelength: 3.0,
            mult: 2.1,
            sigma_on_f: 0.55,
            noise_k: 2.0,
            cut_off: 0.5,
            gain: 10.0,
            exponents: [1.0, 1.0, 1.0],
        }
    }
}

/// Phase congruency map with its maximum and minimum moments, each `H×W`.
#[derive(Debug, Clone)]
pub struct PhaseCongruency {
    pub pc: Vec<f64>,
    pub max_moment: Vec<f64>,
    pub min_moment: Vec<f64>,
}

fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Signed frequency of FFT bin `k` out of `n`, in cycles per pixel.
fn freq(k: usize, n: usize) -> f64 {
    let k = k as isize;
    let n = n as isize;
    (if k < (n + 1) / 2 { k } else { k - n }) as f64 / n as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if v.len() % 2 == 1 {
        m
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (m + lower)
    }
}

pub fn phase_congruency(x: &Tensor, cfg: &PhaseConfig) -> Result<PhaseCongruency> {
    let (h, w, d) = plane(x)?;
    if cfg.scales < 2 || cfg.orientations < 1 {
        return Err(Error::Metric("phase congruency needs ≥ 2 scales and ≥ 1 orientation".into()));
    }
    let n = h * w;
    let eps = 1e-4;
    let mut spectrum: Vec<Complex64> = d.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut spectrum, h, w, false);

    // Radial log-Gabor profiles, low-pass limited to suppress the corners.
    let mut radius = vec![0.0; n];
    let mut theta = vec![0.0; n];
    for y in 0..h {
        for xx in 0..w {
            let (fx, fy) = (freq(xx, w), freq(y, h));
            radius[y * w + xx] = (fx * fx + fy * fy).sqrt();
            theta[y * w + xx] = (-fy).atan2(fx);
        }
    }
    // The Nyquist row and column of an even extent are their own mirror
    // images; leaving them out keeps the filter bank flip-symmetric.
    let nyquist = |k: usize, n: usize| n % 2 == 0 && k == n / 2;
    let lowpass: Vec<f64> = (0..n)
        .map(|i| {
            if nyquist(i / w, h) || nyquist(i % w, w) {
                0.0
            } else {
                1.0 / (1.0 + (radius[i] / 0.45).powi(30))
            }
        })
        .collect();
    let log_sigma = cfg.sigma_on_f.ln();
    let radial: Vec<Vec<f64>> = (0..cfg.scales)
        .map(|s| {
            let f0 = 1.0 / (cfg.min_wavelength * cfg.mult.powi(s as i32));
            radius
                .iter()
                .zip(&lowpass)
                .map(|(&r, &lp)| {
                    if r == 0.0 {
                        0.0
                    } else {
                        (-(r / f0).ln().powi(2) / (2.0 * log_sigma * log_sigma)).exp() * lp
                    }
                })
                .collect()
        })
        .collect();

    let mut energy_all = vec![0.0; n];
    let mut amp_all = vec![0.0; n];
    let (mut covx, mut covy, mut covxy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut filtered = vec![Complex64::new(0.0, 0.0); n];
    for o in 0..cfg.orientations {
        let angle = o as f64 * PI / cfg.orientations as f64;
        let (sa, ca) = angle.sin_cos();
        let spread: Vec<f64> = theta
            .iter()
            .map(|&t| {
                let (st, ct) = t.sin_cos();
                let ds = st * ca - ct * sa;
                let dc = ct * ca + st * sa;
                let dtheta = (ds.atan2(dc).abs() * cfg.orientations as f64 / 2.0).min(PI);
                (dtheta.cos() + 1.0) / 2.0
            })
            .collect();
        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut sum_an = vec![0.0; n];
        let mut max_an = vec![0.0; n];
        let mut responses = Vec::with_capacity(cfg.scales);
        let mut tau = 0.0;
        for (s, rad) in radial.iter().enumerate() {
            for i in 0..n {
                filtered[i] = spectrum[i] * (rad[i] * spread[i]);
            }
            fft2(&mut filtered, h, w, true);
            let an: Vec<f64> = filtered.iter().map(|c| c.norm()).collect();
            for i in 0..n {
                sum_an[i] += an[i];
                sum_e[i] += filtered[i].re;
                sum_o[i] += filtered[i].im;
                max_an[i] = if s == 0 { an[i] } else { f64::max(max_an[i], an[i]) };
            }
            if s == 0 {
                tau = median(an.clone()) / 4f64.ln().sqrt();
            }
            responses.push(filtered.iter().map(|c| (c.re, c.im)).collect::<Vec<_>>());
        }
        let mut energy = vec![0.0; n];
        for i in 0..n {
            let xe = (sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]).sqrt() + eps;
            let (me, mo) = (sum_e[i] / xe, sum_o[i] / xe);
            energy[i] = responses
                .iter()
                .map(|r| {
                    let (e, od) = r[i];
                    e * me + od * mo - (e * mo - od * me).abs()
                })
                .sum();
        }
        let total_tau = tau * (1.0 - (1.0 / cfg.mult).powi(cfg.scales as i32)) / (1.0 - 1.0 / cfg.mult);
        let noise_mean = total_tau * (PI / 2.0).sqrt();
        let noise_sigma = total_tau * ((4.0 - PI) / 2.0).sqrt();
        let threshold = noise_mean + cfg.noise_k * noise_sigma;
        for i in 0..n {
            let e = (energy[i] - threshold).max(0.0);
            let width = (sum_an[i] / (max_an[i] + eps) - 1.0) / (cfg.scales as f64 - 1.0);
            let weight = 1.0 / (1.0 + ((cfg.cut_off - width) * cfg.gain).exp());
            let we = weight * e;
            energy_all[i] += we;
            amp_all[i] += sum_an[i];
            let pc_o = we / (sum_an[i] + eps);
            covx[i] += (pc_o * ca).powi(2);
            covy[i] += (pc_o * sa).powi(2);
            covxy[i] += pc_o * pc_o * ca * sa;
        }
    }
    let half = cfg.orientations as f64 / 2.0;
    let mut max_moment = vec![0.0; n];
    let mut min_moment = vec![0.0; n];
    for i in 0..n {
        let (cx, cy, cxy) = (covx[i] / half, covy[i] / half, 2.0 * covxy[i] / half);
        let denom = (cxy * cxy + (cx - cy) * (cx - cy)).sqrt() + 1e-12;
        max_moment[i] = (cy + cx + denom) / 2.0;
        min_moment[i] = ((cy + cx - denom) / 2.0).max(0.0);
    }
    let pc = energy_all
        .iter()
        .zip(&amp_all)
        .map(|(e, a)| e / (a + eps))
        .collect();
    Ok(PhaseCongruency {
        pc,
        max_moment,
        min_moment,
    })
}

/// Pearson correlation; zero when either map is constant.
fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let den = (saa * sbb).sqrt();
    if den <= 1e-300 {
        0.0
    } else {
        (sab / den).clamp(-1.0, 1.0)
    }
}

fn pointwise_max(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.max(*y)).collect()
}

/// Product of the best correlations of phase congruency, maximum moment and
/// minimum moment between the fused image and {ir, vi, max(ir, vi)}, each
/// clamped at zero and raised to its exponent.
pub fn pc_metric(f: &Tensor, ir: &Tensor, vi: &Tensor, cfg: &PhaseConfig) -> Result<f64> {
    let (hf, wf, _) = plane(f)?;
    for s in [ir, vi] {
        let (h, w, _) = plane(s)?;
        if (h, w) != (hf, wf) {
            return Err(Error::shape("pc_metric", format!("{h}x{w} vs {hf}x{wf}")));
        }
    }
    let pf = phase_congruency(f, cfg)?;
    let pa = phase_congruency(ir, cfg)?;
    let pb = phase_congruency(vi, cfg)?;
    let factor = |get: fn(&PhaseCongruency) -> &Vec<f64>| {
        let (a, b, ff) = (get(&pa), get(&pb), get(&pf));
        let m = pointwise_max(a, b);
        [correlation(a, ff), correlation(b, ff), correlation(&m, ff)]
            .into_iter()
            .fold(0.0f64, f64::max)
    };
    let p = factor(|p| &p.pc);
    let big = factor(|p| &p.max_moment);
    let small = factor(|p| &p.min_moment);
    let [a, b, c] = cfg.exponents;
    Ok(p.powf(a) * big.powf(b) * small.powf(c))
}
