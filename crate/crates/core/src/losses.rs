//! Training objectives: fusion losses, focal classification loss and the
//! uncertainty-weighted task combination.
//!
//! Image arguments are `[1×H×W]` luminance maps in `[0, 1]`. The fused image
//! is a graph variable; source images are data.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::entity_ingest::LabelVector;
use crate::error::{Error, Result};
use crate::numerics::{kernels, FocalForm, Graph, Padding, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weights of the intensity, edge and SSIM terms.
    pub fusion_weights: [f64; 3],
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub gamma: f64,
    pub focal_form: FocalForm,
    /// Temperature of the task-weight softmax.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            fusion_weights: [1.0, 15.0, 5.0],
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            gamma: 2.0,
            focal_form: FocalForm::Standard,
            tau: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_weights.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::invalid("fusion_weights", "must be finite and non-negative"));
        }
        if self.ssim_window % 2 == 0 {
            return Err(Error::invalid("ssim_window", "must be odd"));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::invalid("ssim_sigma", "must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma", "must be non-negative"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", "must be positive"));
        }
        Ok(())
    }
}

fn check_triple(what: &'static str, f: &[usize], ir: &Tensor, vi: &Tensor) -> Result<()> {
    if f.len() != 3 || f[0] != 1 || ir.shape() != f || vi.shape() != f {
        return Err(Error::shape(
            what,
            format!("fused {:?}, ir {:?}, vi {:?}; expected equal [1, H, W]", f, ir.shape(), vi.shape()),
        ));
    }
    Ok(())
}

fn laplacian_kernel() -> Tensor {
    Tensor::new(&[1, 1, 3, 3], vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]).expect("3x3")
}

/// Laplacian of a `[1×H×W]` image under reflect padding.
pub fn laplacian(x: &Tensor) -> Result<Tensor> {
    kernels::conv2d(x, &laplacian_kernel(), 1, Padding::Reflect)
}

/// Normalised `size×size` Gaussian window as a `[1×1×size×size]` kernel.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    Tensor::from_fn(&[1, 1, size, size], |i| g[i / size] * g[i % size] / (s * s))
}

/// `(1/HW)·‖I_f − max(I_ir, I_vis)‖₁`.
pub fn intensity_loss(g: &Graph, f: &Var, ir: &Tensor, vi: &Tensor) -> Result<Var> {
    check_triple("intensity_loss", f.shape(), ir, vi)?;
    let target = g.constant(ir.zip_map(vi, f64::max)?);
    Ok(g.mean(&g.abs(&g.sub(f, &target)?)))
}

/// `(1/HW)·‖ |∇I_f| − max(|∇I_ir|, |∇I_vis|) ‖₁` with the 4-neighbour
/// Laplacian.
pub fn edge_loss(g: &Graph, f: &Var, ir: &Tensor, vi: &Tensor) -> Result<Var> {
    check_triple("edge_loss", f.shape(), ir, vi)?;
    let target = laplacian(ir)?.zip_map(&laplacian(vi)?, |a, b| a.abs().max(b.abs()))?;
    let k = g.constant(laplacian_kernel());
    let lf = g.abs(&g.conv2d(f, &k, None, Padding::Reflect)?);
    Ok(g.mean(&g.abs(&g.sub(&lf, &g.constant(target))?)))
}

/// Mean SSIM between a variable image and a fixed reference, Gaussian window,
/// valid positions only.
pub fn ssim_var(g: &Graph, x: &Var, y: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let s = x.shape();
    let win = cfg.ssim_window;
    if s.len() != 3 || s[0] != 1 || y.shape() != s {
        return Err(Error::shape("ssim", format!("{s:?} against {:?}", y.shape())));
    }
    if s[1] < win || s[2] < win {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} image is smaller than the {win}x{win} window", s[1], s[2]),
        ));
    }
    let w = gaussian_window(win, cfg.ssim_sigma);
    let blur = |t: &Tensor| kernels::conv2d(t, &w, 1, Padding::Valid);
    let mu_y = blur(y)?;
    let yy = blur(&y.map(|v| v * v))?;
    let wv = g.constant(w.clone());
    let conv = |v: &Var| g.conv2d(v, &wv, None, Padding::Valid);

    let mu_x = conv(x)?;
    let xx = conv(&g.square(x))?;
    let xy = conv(&g.mul(x, &g.constant(y.clone()))?)?;
    let mu_y_v = g.constant(mu_y.clone());
    let mu_xy = g.mul(&mu_x, &mu_y_v)?;
    let mu_x2 = g.square(&mu_x);

    let n1 = g.add_scalar(&g.scale(&mu_xy, 2.0), cfg.ssim_c1);
    let n2 = g.add_scalar(&g.scale(&g.sub(&xy, &mu_xy)?, 2.0), cfg.ssim_c2);
    let d1 = g.add(&mu_x2, &g.constant(mu_y.map(|m| m * m + cfg.ssim_c1)))?;
    let var_y = yy.zip_map(&mu_y, |e, m| e - m * m + cfg.ssim_c2)?;
    let d2 = g.add(&g.sub(&xx, &mu_x2)?, &g.constant(var_y))?;
    let map = g.div(&g.mul(&n1, &n2)?, &g.mul(&d1, &d2)?)?;
    Ok(g.mean(&map))
}

/// Mean SSIM of two fixed images.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let g = Graph::inference();
    Ok(ssim_var(&g, &g.constant(x.clone()), y, cfg)?.item())
}

/// `(1 − SSIM(I_f, I_ir)) + (1 − SSIM(I_f, I_vis))`.
pub fn ssim_loss(g: &Graph, f: &Var, ir: &Tensor, vi: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_triple("ssim_loss", f.shape(), ir, vi)?;
    let s = g.add(&ssim_var(g, f, ir, cfg)?, &ssim_var(g, f, vi, cfg)?)?;
    Ok(g.add_scalar(&g.scale(&s, -1.0), 2.0))
}

pub struct FusionTerms {
    pub total: Var,
    pub intensity: Var,
    pub edge: Var,
    pub ssim: Var,
}

pub fn fusion_loss(g: &Graph, f: &Var, ir: &Tensor, vi: &Tensor, cfg: &LossConfig) -> Result<FusionTerms> {
    let [a1, a2, a3] = cfg.fusion_weights;
    let intensity = intensity_loss(g, f, ir, vi)?;
    let edge = edge_loss(g, f, ir, vi)?;
    let ssim = ssim_loss(g, f, ir, vi, cfg)?;
    let total = g.add(
        &g.add(&g.scale(&intensity, a1), &g.scale(&edge, a2))?,
        &g.scale(&ssim, a3),
    )?;
    Ok(FusionTerms {
        total,
        intensity,
        edge,
        ssim,
    })
}

/// Focal loss of one probability vector against its labels.
pub fn focal_loss(g: &Graph, p: &Var, y: &LabelVector, class_alpha: &[f64], cfg: &LossConfig) -> Result<Var> {
    g.focal_loss(p, &y.as_f64(), class_alpha, cfg.gamma, cfg.focal_form)
}

/// Class-balancing weights from training labels: the fraction of negatives
/// per class, clamped to `[0.05, 0.95]`.
pub fn class_weights(labels: &[LabelVector]) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("labels", "no training labels to derive class weights from"));
    }
    let n = labels.len() as f64;
    let k = labels[0].0.len();
    Ok((0..k)
        .map(|c| {
            let neg = labels.iter().filter(|l| !l.0[c]).count() as f64;
            (neg / n).clamp(0.05, 0.95)
        })
        .collect())
}

/// `λ_i = exp(−w_i/τ) / Σ_j exp(−w_j/τ)`.
pub fn task_weights(w: [f64; 2], tau: f64) -> Result<[f64; 2]> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    // The smaller weight is computed directly and the larger as its
    // complement, so the pair sums to exactly 1.
    let d = (w[0] - w[1]) / tau;
    if d >= 0.0 {
        let small = 1.0 / (1.0 + d.exp());
        Ok([small, 1.0 - small])
    } else {
        let small = 1.0 / (1.0 + (-d).exp());
        Ok([1.0 - small, small])
    }
}

/// Differentiable form of [`task_weights`] over the `[2]` parameter.
pub fn task_weights_var(g: &Graph, w: &Var, tau: f64) -> Result<(Var, Var)> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be positive, got {tau}")));
    }
    let w0 = g.gather(w, Rc::new(vec![0]), &[1])?;
    let w1 = g.gather(w, Rc::new(vec![1]), &[1])?;
    let l1 = g.sigmoid(&g.scale(&g.sub(&w1, &w0)?, 1.0 / tau));
    let l2 = g.add_scalar(&g.scale(&l1, -1.0), 1.0);
    Ok((l1, l2))
}

/// Scalar values of every loss term, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub fusion: f64,
    pub intensity: f64,
    pub edge: f64,
    pub ssim: f64,
    /// Zero when the classification task is off.
    pub classification: f64,
    pub lambda: [f64; 2],
    pub w: [f64; 2],
}

/// `λ1·L_fus + λ2·L_cla`. Without a classification input the weights are
/// forced to `(1, 0)` and the total is the fusion loss.
pub fn total_loss(
    g: &Graph,
    fused: &Var,
    ir: &Tensor,
    vi: &Tensor,
    classification: Option<(&Var, &LabelVector, &[f64])>,
    task_w: &Var,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let fus = fusion_loss(g, fused, ir, vi, cfg)?;
    let w = [task_w.value().data()[0], task_w.value().data()[1]];
    let mut b = LossBreakdown {
        total: 0.0,
        fusion: fus.total.item(),
        intensity: fus.intensity.item(),
        edge: fus.edge.item(),
        ssim: fus.ssim.item(),
        classification: 0.0,
        lambda: [1.0, 0.0],
        w,
    };
    let total = match classification {
        None => fus.total,
        Some((p, y, alpha)) => {
            let cla = focal_loss(g, p, y, alpha, cfg)?;
            let (l1, l2) = task_weights_var(g, task_w, cfg.tau)?;
            b.classification = cla.item();
            b.lambda = task_weights(w, cfg.tau)?;
            g.add(&g.mul(&l1, &fus.total)?, &g.mul(&l2, &cla)?)?
        }
    };
    b.total = total.item();
    Ok((total, b))
}
