//! Reference-based fusion quality measures on single-channel images in
//! `[0, 1]`.

use nalgebra::Matrix3;

use super::{plane, MetricsConfig};
use crate::error::{Error, Result};
use crate::losses;
use crate::numerics::kernels::reflect_index;
use crate::numerics::Tensor;

/// Histogram bin of `v ∈ [0, 1]` among `bins` equal-width bins.
pub(crate) fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Shannon entropy in bits of a histogram with `total` samples.
fn entropy_of(counts: &[u64], total: u64) -> f64 {
    let n = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Marginal and joint entropies (bits) of two binned sequences.
fn joint_entropies(a: &[usize], b: &[usize], bins: usize) -> (f64, f64, f64) {
    let mut ha = vec![0u64; bins];
    let mut hb = vec![0u64; bins];
    let mut hab = vec![0u64; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        ha[x] += 1;
        hb[y] += 1;
        hab[x * bins + y] += 1;
    }
    let n = a.len() as u64;
    (entropy_of(&ha, n), entropy_of(&hb, n), entropy_of(&hab, n))
}

fn binned(x: &[f64], bins: usize) -> Vec<usize> {
    x.iter().map(|&v| bin_of(v, bins)).collect()
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::Metric(format!("{bins} histogram bins (need at least 2)")));
    }
    Ok(())
}

/// Entropy in bits of an image quantised to `bins` levels.
pub fn entropy(x: &Tensor, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let (_, _, d) = plane(x)?;
    let b = binned(d, bins);
    let mut counts = vec![0u64; bins];
    b.iter().for_each(|&i| counts[i] += 1);
    Ok(entropy_of(&counts, b.len() as u64))
}

/// Mutual information in bits between two images quantised to `bins`
/// levels.
pub fn mutual_information(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let (ha, hb, hab) = same_plane(a, b).map(|(x, y)| joint_entropies(&binned(x, bins), &binned(y, bins), bins))?;
    Ok(ha + hb - hab)
}

/// `MI(I_f; I_ir) + MI(I_f; I_vis)`.
pub fn mi(f: &Tensor, ir: &Tensor, vi: &Tensor, bins: usize) -> Result<f64> {
    Ok(mutual_information(f, ir, bins)? + mutual_information(f, vi, bins)?)
}

fn same_plane<'a>(a: &'a Tensor, b: &'a Tensor) -> Result<(&'a [f64], &'a [f64])> {
    let (ha, wa, x) = plane(a)?;
    let (hb, wb, y) = plane(b)?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape("metric", format!("{ha}x{wa} vs {hb}x{wb}")));
    }
    Ok((x, y))
}

/// `10·log10(1 / MSE)` for unit peak; `sentinel` when the images agree.
pub fn psnr_pair(x: &Tensor, reference: &Tensor, sentinel: f64) -> Result<f64> {
    let (a, b) = same_plane(x, reference)?;
    let mse = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { sentinel } else { -10.0 * mse.log10() })
}

/// Mean PSNR of the fused image against each source.
pub fn psnr(f: &Tensor, ir: &Tensor, vi: &Tensor, sentinel: f64) -> Result<f64> {
    Ok(0.5 * (psnr_pair(f, ir, sentinel)? + psnr_pair(f, vi, sentinel)?))
}

/// Mean SSIM of the fused image against each source, with the loss kernel.
pub fn ssim_metric(f: &Tensor, ir: &Tensor, vi: &Tensor, cfg: &losses::LossConfig) -> Result<f64> {
    Ok(0.5 * (losses::ssim(f, ir, cfg)? + losses::ssim(f, vi, cfg)?))
}

/// Sobel edge strength and orientation of every pixel (reflect borders).
pub struct EdgeMap {
    pub strength: Vec<f64>,
    /// `atan(s_y / s_x)` in `(−π/2, π/2]`; `π/2` where `s_x = 0`.
    pub orientation: Vec<f64>,
}

pub fn sobel(x: &Tensor) -> Result<EdgeMap> {
    let (h, w, d) = plane(x)?;
    if h < 3 || w < 3 {
        return Err(Error::Metric(format!("{h}x{w} image is smaller than 3x3")));
    }
    let at = |y: isize, xx: isize| d[reflect_index(y, h) * w + reflect_index(xx, w)];
    let mut strength = Vec::with_capacity(h * w);
    let mut orientation = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let sx = (at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y, xx - 1) + at(y + 1, xx - 1));
            let sy = (at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y - 1, xx) + at(y - 1, xx + 1));
            strength.push((sx * sx + sy * sy).sqrt());
            orientation.push(if sx == 0.0 {
                std::f64::consts::FRAC_PI_2
            } else {
                (sy / sx).atan()
            });
        }
    }
    Ok(EdgeMap {
        strength,
        orientation,
    })
}

/// Edge-preservation constants of the gradient-based measures.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeModel {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Exponent `L` of the edge-strength weights.
    pub weight_exponent: f64,
}

impl Default for EdgeModel {
    fn default() -> Self {
        EdgeModel {
            gamma_g: 1.0,
            kappa_g: -10.0,
            sigma_g: 0.5,
            gamma_a: 1.0,
            kappa_a: -20.0,
            sigma_a: 0.75,
            weight_exponent: 1.0,
        }
    }
}

impl EdgeModel {
    /// Per-pixel preservation `Q^{SF}` of source edges `s` in fused edges `f`.
    pub fn preservation(&self, s: &EdgeMap, f: &EdgeMap) -> Vec<f64> {
        s.strength
            .iter()
            .zip(&f.strength)
            .zip(s.orientation.iter().zip(&f.orientation))
            .map(|((&gs, &gf), (&as_, &af))| {
                let g = if gs == 0.0 || gf == 0.0 {
                    0.0
                } else if gs > gf {
                    gf / gs
                } else {
                    gs / gf
                };
                // Orientations are axial: a difference of π is no difference.
                let a = ((as_ - af).abs() - std::f64::consts::FRAC_PI_2).abs() / std::f64::consts::FRAC_PI_2;
                let qg = self.gamma_g / (1.0 + (self.kappa_g * (g - self.sigma_g)).exp());
                let qa = self.gamma_a / (1.0 + (self.kappa_a * (a - self.sigma_a)).exp());
                qg * qa
            })
            .collect()
    }

    fn weights(&self, e: &EdgeMap) -> Vec<f64> {
        e.strength.iter().map(|g| g.powf(self.weight_exponent)).collect()
    }
}

struct EdgeTriple {
    q_af: Vec<f64>,
    q_bf: Vec<f64>,
    w_a: Vec<f64>,
    w_b: Vec<f64>,
    g: [Vec<f64>; 3],
}

fn edge_triple(f: &Tensor, a: &Tensor, b: &Tensor, m: &EdgeModel) -> Result<EdgeTriple> {
    same_plane(f, a)?;
    same_plane(f, b)?;
    let (ef, ea, eb) = (sobel(f)?, sobel(a)?, sobel(b)?);
    Ok(EdgeTriple {
        q_af: m.preservation(&ea, &ef),
        q_bf: m.preservation(&eb, &ef),
        w_a: m.weights(&ea),
        w_b: m.weights(&eb),
        g: [ea.strength, eb.strength, ef.strength],
    })
}

/// Gradient-based fusion quality: source edge preservation weighted by
/// source edge strength, in `[0, 1]`. Zero when neither source has edges.
pub fn qabf(f: &Tensor, ir: &Tensor, vi: &Tensor, m: &EdgeModel) -> Result<f64> {
    let t = edge_triple(f, ir, vi, m)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..t.q_af.len() {
        num += t.q_af[i] * t.w_a[i] + t.q_bf[i] * t.w_b[i];
        den += t.w_a[i] + t.w_b[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Fusion artifacts: edge-preservation loss at pixels where the fused edge is
/// stronger than both source edges, normalised by total source edge weight.
pub fn nabf(f: &Tensor, ir: &Tensor, vi: &Tensor, m: &EdgeModel) -> Result<f64> {
    let t = edge_triple(f, ir, vi, m)?;
    let [ga, gb, gf] = &t.g;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..t.q_af.len() {
        if gf[i] > ga[i] && gf[i] > gb[i] {
            num += (1.0 - t.q_af[i]) * t.w_a[i] + (1.0 - t.q_bf[i]) * t.w_b[i];
        }
        den += t.w_a[i] + t.w_b[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Equal-population rank bins: sample `i` goes to
/// `floor(midrank_i · bins / n)`, where tied values share their mid-rank and
/// so share a bin.
pub fn rank_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // Mid-rank of the tie group, 0-based, doubled to stay integral.
        let twice_mid = start + end - 1;
        let bin = ((twice_mid * bins) / (2 * n)).min(bins - 1);
        for &i in &order[start..end] {
            out[i] = bin;
        }
        start = end;
    }
    out
}

/// Nonlinear correlation coefficient of two samples: mutual information of
/// their rank bins, normalised by the geometric mean of the marginal
/// entropies. With distinct values and `n` a multiple of `bins` the marginals
/// are uniform and this is the classic `2 + Σ p log_b p`.
pub fn ncc(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let (ha, hb, hab) = joint_entropies(&rank_bins(a, bins), &rank_bins(b, bins), bins);
    if ha == 0.0 || hb == 0.0 {
        return if ha == hb { 1.0 } else { 0.0 };
    }
    ((ha + hb - hab) / (ha * hb).sqrt()).clamp(0.0, 1.0)
}

/// Nonlinear correlation information entropy of `(I_ir, I_vis, I_f)`: one
/// plus the base-`bins` entropy-like sum over the eigenvalues of their 3×3
/// nonlinear correlation matrix, divided by 3.
pub fn ncie(f: &Tensor, ir: &Tensor, vi: &Tensor, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let (x, y) = same_plane(ir, vi)?;
    let (_, z) = same_plane(ir, f)?;
    let (xy, xz, yz) = (ncc(x, y, bins), ncc(x, z, bins), ncc(y, z, bins));
    let r = Matrix3::new(1.0, xy, xz, xy, 1.0, yz, xz, yz, 1.0);
    let eig = r.symmetric_eigenvalues();
    let k = 3.0;
    let base = (bins as f64).ln();
    let s: f64 = eig
        .iter()
        .map(|&l| {
            let p = l.max(0.0) / k;
            if p > 0.0 {
                p * p.ln() / base
            } else {
                0.0
            }
        })
        .sum();
    Ok((1.0 + s).clamp(0.0, 1.0))
}

/// Magnitudes of the three single-level Haar detail sub-bands, concatenated.
/// An odd last row or column is dropped.
pub fn haar_details(x: &Tensor) -> Result<Vec<f64>> {
    let (h, w, d) = plane(x)?;
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(Error::Metric(format!("{h}x{w} image is too small for a wavelet level")));
    }
    let mut out = vec![0.0; 3 * h2 * w2];
    for i in 0..h2 {
        for j in 0..w2 {
            let a = d[2 * i * w + 2 * j];
            let b = d[2 * i * w + 2 * j + 1];
            let c = d[(2 * i + 1) * w + 2 * j];
            let e = d[(2 * i + 1) * w + 2 * j + 1];
            let k = i * w2 + j;
            out[k] = ((a + b - c - e) / 2.0).abs();
            out[h2 * w2 + k] = ((a - b + c - e) / 2.0).abs();
            out[2 * h2 * w2 + k] = ((a - b - c + e) / 2.0).abs();
        }
    }
    Ok(out)
}

/// Equal-width bins over `[0, max]` of a non-negative feature vector.
fn feature_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let max = x.iter().fold(0.0f64, |m, &v| m.max(v));
    if max == 0.0 {
        return vec![0; x.len()];
    }
    x.iter().map(|&v| bin_of(v / max, bins)).collect()
}

/// `2·I(A;F) / (H(A) + H(F))` of two feature vectors, in `[0, 1]`; zero when
/// both are constant.
pub fn normalized_feature_mi(a: &[f64], f: &[f64], bins: usize) -> f64 {
    let (ha, hf, haf) = joint_entropies(&feature_bins(a, bins), &feature_bins(f, bins), bins);
    if ha + hf == 0.0 {
        return 0.0;
    }
    (2.0 * (ha + hf - haf) / (ha + hf)).clamp(0.0, 1.0)
}

/// Wavelet feature mutual information: mean over the two sources of the
/// normalised feature MI on Haar detail magnitudes.
pub fn fmi_w(f: &Tensor, ir: &Tensor, vi: &Tensor, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    same_plane(f, ir)?;
    same_plane(f, vi)?;
    let (df, da, db) = (haar_details(f)?, haar_details(ir)?, haar_details(vi)?);
    Ok(0.5 * (normalized_feature_mi(&da, &df, bins) + normalized_feature_mi(&db, &df, bins)))
}

/// All eight fusion metrics in report column order.
pub fn fusion_metrics(f: &Tensor, ir: &Tensor, vi: &Tensor, cfg: &MetricsConfig) -> Result<[f64; 8]> {
    Ok([
        super::phase::pc_metric(f, ir, vi, &cfg.phase)?,
        ssim_metric(f, ir, vi, &cfg.ssim)?,
        mi(f, ir, vi, cfg.mi_bins)?,
        qabf(f, ir, vi, &cfg.edge)?,
        psnr(f, ir, vi, cfg.psnr_sentinel)?,
        fmi_w(f, ir, vi, cfg.fmi_bins)?,
        nabf(f, ir, vi, &cfg.edge)?,
        ncie(f, ir, vi, cfg.ncie_bins)?,
    ])
}
