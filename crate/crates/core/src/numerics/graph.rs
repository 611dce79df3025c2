//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation whose inputs depend on a tracked leaf;
//! [`Graph::backward`] then walks the record in reverse creation order and
//! accumulates adjoints. Operations on untracked values (constants, or
//! anything built on an inference graph) record nothing, so an inference
//! forward pass frees intermediates as soon as their [`Var`]s drop.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeometry, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// A value flowing through a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        self.value.data()[0]
    }
}

/// Which probability is modulated in the focal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalForm {
    /// `(1 - p_t)^γ` with `p_t` the probability assigned to the true label.
    Standard,
    /// `(1 - p)^γ` regardless of the label.
    Verbatim,
}

/// Summary of one attention call, recorded when
/// [`Graph::record_attention`] is on.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub label: String,
    pub groups: usize,
    pub rows: usize,
    pub cols: usize,
    /// Largest `|row sum - 1|` over every row of every group.
    pub max_row_error: f64,
    pub min_weight: f64,
}

enum Op {
    Leaf,
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        av: Rc<Tensor>,
        bv: Rc<Tensor>,
    },
    Div {
        a: Option<usize>,
        b: Option<usize>,
        av: Rc<Tensor>,
        bv: Rc<Tensor>,
    },
    Scale(Option<usize>, f64),
    AddBias {
        x: Option<usize>,
        b: Option<usize>,
        cols: usize,
    },
    ScaleRows {
        x: Option<usize>,
        v: Option<usize>,
        xv: Rc<Tensor>,
        vv: Rc<Tensor>,
    },
    MatMul {
        a: Option<usize>,
        b: Option<usize>,
        av: Rc<Tensor>,
        bv: Rc<Tensor>,
    },
    Gather {
        x: Option<usize>,
        index: Rc<Vec<u32>>,
        in_len: usize,
    },
    Reshape(Option<usize>),
    Concat(Vec<(Option<usize>, usize)>),
    SoftmaxRows {
        x: Option<usize>,
        out: Rc<Tensor>,
    },
    LayerNorm {
        x: Option<usize>,
        g: Option<usize>,
        b: Option<usize>,
        xv: Rc<Tensor>,
        gv: Rc<Tensor>,
        eps: f64,
    },
    Gelu(Option<usize>, Rc<Tensor>),
    LeakyRelu(Option<usize>, Rc<Tensor>, f64),
    Sigmoid(Option<usize>, Rc<Tensor>),
    Abs(Option<usize>, Rc<Tensor>),
    Square(Option<usize>, Rc<Tensor>),
    Sum(Option<usize>, usize),
    MaxRows {
        x: Option<usize>,
        argmax: Vec<usize>,
        in_len: usize,
    },
    Conv2d {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Rc<Tensor>,
        wv: Rc<Tensor>,
        geom: ConvGeometry,
        c_out: usize,
    },
    Attention {
        q: Option<usize>,
        k: Option<usize>,
        v: Option<usize>,
        qv: Rc<Tensor>,
        kv: Rc<Tensor>,
        vv: Rc<Tensor>,
        scale: f64,
        /// Forward weights, one transposed `[S×T]` block per group, kept when
        /// small enough; otherwise backward recomputes them.
        weights: Option<Rc<Vec<f64>>>,
    },
    Focal {
        p: Option<usize>,
        pv: Rc<Tensor>,
        labels: Vec<f64>,
        alpha: Vec<f64>,
        gamma: f64,
        form: FocalForm,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Operation recorder. See the module docs.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    tracking: bool,
    attention_log: RefCell<Option<Vec<AttentionRecord>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the tracked leaves, keyed by leaf.
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to `leaf`; `None` if `leaf` did not influence
    /// the differentiated value.
    pub fn wrt(&self, leaf: &Var) -> Option<&Tensor> {
        leaf.id.and_then(|id| self.by_id.get(&id))
    }

    /// Gradient with respect to `leaf`, zero-filled if it was unused.
    pub fn wrt_or_zero(&self, leaf: &Var) -> Tensor {
        self.wrt(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn any_tracked(ids: &[Option<usize>]) -> bool {
    ids.iter().any(Option::is_some)
}

impl Graph {
    /// A graph that records operations for differentiation.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            tracking: true,
            attention_log: RefCell::new(None),
        }
    }

    /// A graph that never records; [`Graph::param`] returns constants.
    pub fn inference() -> Self {
        Graph {
            tracking: false,
            ..Graph::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    /// Starts collecting an [`AttentionRecord`] for every attention call.
    pub fn record_attention(&self) {
        *self.attention_log.borrow_mut() = Some(Vec::new());
    }

    pub fn attention_records(&self) -> Vec<AttentionRecord> {
        self.attention_log.borrow().clone().unwrap_or_default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        if !tracked {
            return Var {
                value: Rc::new(value),
                id: None,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: op(),
            shape: value.shape().to_vec(),
        });
        Var {
            value: Rc::new(value),
            id: Some(id),
        }
    }

    /// A differentiable leaf (when tracking).
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.clone(), self.tracking, || Op::Leaf)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Rc::new(t),
            id: None,
        }
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", &a.value, &b.value)?;
        let out = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.push(out, any_tracked(&[a.id, b.id]), || Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", &a.value, &b.value)?;
        let out = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.push(out, any_tracked(&[a.id, b.id]), || Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", &a.value, &b.value)?;
        let out = a.value.zip_map(&b.value, |x, y| x * y)?;
        Ok(self.push(out, any_tracked(&[a.id, b.id]), || Op::Mul {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("div", &a.value, &b.value)?;
        let out = a.value.zip_map(&b.value, |x, y| x / y)?;
        Ok(self.push(out, any_tracked(&[a.id, b.id]), || Op::Div {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    pub fn scale(&self, a: &Var, s: f64) -> Var {
        let out = a.value.map(|x| x * s);
        self.push(out, a.id.is_some(), || Op::Scale(a.id, s))
    }

    pub fn add_scalar(&self, a: &Var, s: f64) -> Var {
        let out = a.value.map(|x| x + s);
        self.push(out, a.id.is_some(), || Op::Add(a.id, None))
    }

    /// `x[.. × C] + b[C]`, broadcasting `b` over leading rows.
    pub fn add_bias(&self, x: &Var, b: &Var) -> Result<Var> {
        let cols = *x.shape().last().unwrap();
        if b.value.len() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", x.shape(), b.shape()),
            ));
        }
        let mut out = (*x.value).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b.value.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, any_tracked(&[x.id, b.id]), || Op::AddBias {
            x: x.id,
            b: b.id,
            cols,
        }))
    }

    /// Multiplies row `r` of `x[R × ..]` by `v[r]`.
    pub fn scale_rows(&self, x: &Var, v: &Var) -> Result<Var> {
        let rows = x.shape()[0];
        if v.value.len() != rows {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} * {:?}", x.shape(), v.shape()),
            ));
        }
        let cols = x.value.len() / rows;
        let mut out = (*x.value).clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            let s = v.value.data()[r];
            row.iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(out, any_tracked(&[x.id, v.id]), || Op::ScaleRows {
            x: x.id,
            v: v.id,
            xv: x.value.clone(),
            vv: v.value.clone(),
        }))
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(&a.value, &b.value)?;
        Ok(self.push(out, any_tracked(&[a.id, b.id]), || Op::MatMul {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Covers transposes,
    /// window partitions, slicing and padding; repeated indices are allowed.
    pub fn gather(&self, x: &Var, index: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        let src = x.value.data();
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} >= {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let out = Tensor::new(shape, data)?;
        let in_len = src.len();
        Ok(self.push(out, x.id.is_some(), || Op::Gather {
            x: x.id,
            index,
            in_len,
        }))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = (*x.value).clone().reshape(shape)?;
        Ok(self.push(out, x.id.is_some(), || Op::Reshape(x.id)))
    }

    pub fn transpose(&self, x: &Var) -> Result<Var> {
        if x.value.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let index: Vec<u32> = (0..r * c).map(|i| ((i % r) * c + i / r) as u32).collect();
        self.gather(x, Rc::new(index), &[c, r])
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat(&self, parts: &[&Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("parts", "concat of nothing"))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.value.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let ids: Vec<Option<usize>> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, any_tracked(&ids), || {
            Op::Concat(parts.iter().map(|p| (p.id, p.value.len())).collect())
        }))
    }

    pub fn softmax_rows(&self, x: &Var) -> Result<Var> {
        let out = kernels::softmax_rows(&x.value)?;
        let tracked = x.id.is_some();
        let out = Rc::new(out);
        let saved = out.clone();
        let var = self.push((*out).clone(), tracked, || Op::SoftmaxRows { x: x.id, out: saved });
        Ok(var)
    }

    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let out = kernels::layer_norm(&x.value, &gain.value, &bias.value, eps)?;
        Ok(self.push(out, any_tracked(&[x.id, gain.id, bias.id]), || Op::LayerNorm {
            x: x.id,
            g: gain.id,
            b: bias.id,
            xv: x.value.clone(),
            gv: gain.value.clone(),
            eps,
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Var) -> Var {
        let out = x.value.map(gelu);
        self.push(out, x.id.is_some(), || Op::Gelu(x.id, x.value.clone()))
    }

    pub fn leaky_relu(&self, x: &Var, slope: f64) -> Var {
        let out = x.value.map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, x.id.is_some(), || {
            Op::LeakyRelu(x.id, x.value.clone(), slope)
        })
    }

    pub fn sigmoid(&self, x: &Var) -> Var {
        let out = Rc::new(x.value.map(sigmoid));
        let saved = out.clone();
        self.push((*out).clone(), x.id.is_some(), || Op::Sigmoid(x.id, saved))
    }

    pub fn abs(&self, x: &Var) -> Var {
        let out = x.value.map(f64::abs);
        self.push(out, x.id.is_some(), || Op::Abs(x.id, x.value.clone()))
    }

    pub fn square(&self, x: &Var) -> Var {
        let out = x.value.map(|v| v * v);
        self.push(out, x.id.is_some(), || Op::Square(x.id, x.value.clone()))
    }

    pub fn sum(&self, x: &Var) -> Var {
        let out = Tensor::scalar(x.value.sum());
        let n = x.value.len();
        self.push(out, x.id.is_some(), || Op::Sum(x.id, n))
    }

    pub fn mean(&self, x: &Var) -> Var {
        let s = self.sum(x);
        self.scale(&s, 1.0 / x.value.len() as f64)
    }

    /// Maximum of each row of `x[R × N]` (first maximum wins ties).
    pub fn max_rows(&self, x: &Var) -> Result<Var> {
        let rows = x.shape()[0];
        let cols = x.value.len() / rows;
        let mut argmax = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for (r, row) in x.value.data().chunks(cols).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(r * cols + best);
            out.push(row[best]);
        }
        let in_len = x.value.len();
        let out = Tensor::new(&[rows], out)?;
        Ok(self.push(out, x.id.is_some(), || Op::MaxRows {
            x: x.id,
            argmax,
            in_len,
        }))
    }

    /// Stride-1 convolution of `x[C_in×H×W]` with `w[C_out×C_in×k×k]`.
    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, padding: Padding) -> Result<Var> {
        let out = kernels::conv2d_with_bias(&x.value, &w.value, b.map(|b| b.value()), 1, padding)?;
        let geom = ConvGeometry::new(x.shape()[0], x.shape()[1], x.shape()[2], w.shape()[2], 1, padding)?;
        let b_id = b.and_then(|b| b.id);
        Ok(self.push(out, any_tracked(&[x.id, w.id, b_id]), || Op::Conv2d {
            x: x.id,
            w: w.id,
            b: b_id,
            xv: x.value.clone(),
            wv: w.value.clone(),
            geom,
            c_out: w.shape()[0],
        }))
    }

    /// Batched scaled dot-product attention.
    ///
    /// `q[G×T×D]`, `k[G×S×D]`, `v[G×S×E]` give `out[G×T×E]` with
    /// `out_g = softmax(q_g k_gᵀ · scale) v_g`. Attention weights are not
    /// stored; the backward pass recomputes them one group at a time.
    pub fn attention(&self, q: &Var, k: &Var, v: &Var, scale: f64, label: &str) -> Result<Var> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 3
            || ks.len() != 3
            || vs.len() != 3
            || qs[0] != ks[0]
            || ks[0] != vs[0]
            || qs[2] != ks[2]
            || ks[1] != vs[1]
        {
            return Err(Error::shape(
                "attention",
                format!("q {qs:?}, k {ks:?}, v {vs:?}"),
            ));
        }
        let (groups, t, d, s, e) = (qs[0], qs[1], qs[2], ks[1], vs[2]);
        let mut out = vec![0.0; groups * t * e];
        let mut record = self.attention_log.borrow().as_ref().map(|_| AttentionRecord {
            label: label.to_string(),
            groups,
            rows: t,
            cols: s,
            max_row_error: 0.0,
            min_weight: f64::INFINITY,
        });
        let tracked = any_tracked(&[q.id, k.id, v.id]);
        let mut kept = (tracked && groups * t * s <= ATTENTION_CACHE_LIMIT)
            .then(|| Vec::with_capacity(groups * t * s));
        let mut scratch = AttentionScratch::new(t, s);
        for g in 0..groups {
            scratch.weights(&q.value, &k.value, g, d, scale);
            let pt = &scratch.pt;
            if let Some(kept) = kept.as_mut() {
                kept.extend_from_slice(pt);
            }
            if let Some(rec) = record.as_mut() {
                let mut sums = vec![0.0; t];
                for row in pt.chunks(t) {
                    for (acc, &w) in sums.iter_mut().zip(row) {
                        *acc += w;
                        rec.min_weight = rec.min_weight.min(w);
                    }
                }
                for sum in sums {
                    rec.max_row_error = rec.max_row_error.max((sum - 1.0).abs());
                }
            }
            // outᵀ[E×T] = vᵀ·Pᵀ, written straight into the row-major output.
            let vg = &v.value.data()[g * s * e..(g + 1) * s * e];
            let og = &mut out[g * t * e..(g + 1) * t * e];
            kernels::gemm(e, s, t, vg, (1, e), pt, (t, 1), 0.0, og, (1, e));
        }
        if let (Some(rec), Some(log)) = (record, self.attention_log.borrow_mut().as_mut()) {
            log.push(rec);
        }
        let out = Tensor::new(&[groups, t, e], out)?;
        Ok(self.push(out, tracked, || Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            qv: q.value.clone(),
            kv: k.value.clone(),
            vv: v.value.clone(),
            scale,
            weights: kept.map(Rc::new),
        }))
    }

    /// Mean over classes of `α_i · modulation · BCE(p_i, y_i)`, with `p`
    /// clamped to `[1e-7, 1 - 1e-7]`.
    pub fn focal_loss(
        &self,
        p: &Var,
        labels: &[f64],
        alpha: &[f64],
        gamma: f64,
        form: FocalForm,
    ) -> Result<Var> {
        let n = p.value.len();
        if labels.len() != n || alpha.len() != n {
            return Err(Error::shape(
                "focal_loss",
                format!("{n} probabilities, {} labels, {} weights", labels.len(), alpha.len()),
            ));
        }
        let total: f64 = (0..n)
            .map(|i| focal_term(p.value.data()[i], labels[i], alpha[i], gamma, form).0)
            .sum();
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(out, p.id.is_some(), || Op::Focal {
            p: p.id,
            pv: p.value.clone(),
            labels: labels.to_vec(),
            alpha: alpha.to_vec(),
            gamma,
            form,
        }))
    }

    /// Differentiates the one-element `loss` with respect to every tracked
    /// leaf it depends on.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::shape("backward", format!("loss shape {:?}", loss.shape())));
        }
        let Some(root) = loss.id else {
            return Ok(Gradients {
                by_id: HashMap::new(),
            });
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut by_id = HashMap::new();
        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                by_id.insert(id, dy);
                continue;
            }
            propagate(&node.op, &dy, &mut grads);
        }
        let by_id = by_id
            .into_iter()
            .map(|(id, g)| (id, Tensor::from_parts(nodes[id].shape.clone(), g)))
            .collect();
        Ok(Gradients { by_id })
    }
}

/// `tanh` to within a few ulp of absolute error (not relative: tiny
/// arguments lose relative precision, which is harmless inside GELU).
fn tanh_abs(x: f64) -> f64 {
    let e = kernels::exp_nonpositive(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + tanh_abs(C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = tanh_abs(C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const PROB_CLAMP: f64 = 1e-7;

/// Value and derivative (w.r.t. the unclamped probability) of one focal term.
pub(crate) fn focal_term(p_raw: f64, y: f64, alpha: f64, gamma: f64, form: FocalForm) -> (f64, f64) {
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p_raw);
    let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let dbce = -(y / p) + (1.0 - y) / (1.0 - p);
    // Modulated probability q and dq/dp.
    let (q, dq) = match form {
        FocalForm::Standard => {
            if y >= 0.5 {
                (p, 1.0)
            } else {
                (1.0 - p, -1.0)
            }
        }
        FocalForm::Verbatim => (p, 1.0),
    };
    let modulation = (1.0 - q).powf(gamma);
    let dmod = if gamma == 0.0 {
        0.0
    } else {
        -gamma * (1.0 - q).powf(gamma - 1.0) * dq
    };
    let value = alpha * modulation * bce;
    let grad = if clamped {
        0.0
    } else {
        alpha * (dmod * bce + modulation * dbce)
    };
    (value, grad)
}

/// Row-stochastic weights `softmax(q_g k_gᵀ · scale)` for group `g`.
/// Attention weights up to this many values are kept from the forward pass.
const ATTENTION_CACHE_LIMIT: usize = 1 << 23;

/// Per-call buffers for attention weights, reused across groups.
struct AttentionScratch {
    t: usize,
    s: usize,
    /// Weights of the current group, transposed: `[S×T]`, column `i` holding
    /// the softmax over keys for query `i`.
    pt: Vec<f64>,
    ds: Vec<f64>,
    max: Vec<f64>,
    sum: Vec<f64>,
}

impl AttentionScratch {
    fn new(t: usize, s: usize) -> Self {
        AttentionScratch {
            t,
            s,
            pt: vec![0.0; s * t],
            ds: Vec::new(),
            max: vec![0.0; t],
            sum: vec![0.0; t],
        }
    }

    fn weights(&mut self, q: &Tensor, k: &Tensor, g: usize, d: usize, scale: f64) {
        let (t, s) = (self.t, self.s);
        let qg = &q.data()[g * t * d..(g + 1) * t * d];
        let kg = &k.data()[g * s * d..(g + 1) * s * d];
        kernels::gemm(s, d, t, kg, (d, 1), qg, (1, d), 0.0, &mut self.pt, (t, 1));
        self.max.fill(f64::NEG_INFINITY);
        for row in self.pt.chunks(t) {
            for (m, &v) in self.max.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        self.sum.fill(0.0);
        for row in self.pt.chunks_mut(t) {
            for ((v, &m), acc) in row.iter_mut().zip(&self.max).zip(self.sum.iter_mut()) {
                *v = kernels::exp_nonpositive((*v - m) * scale);
                *acc += *v;
            }
        }
        for x in self.sum.iter_mut() {
            *x = 1.0 / *x;
        }
        for row in self.pt.chunks_mut(t) {
            for (v, &r) in row.iter_mut().zip(&self.sum) {
                *v *= r;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: Option<usize>, contribution: Vec<f64>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    id: Option<usize>,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    let Some(id) = id else { return };
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(op: &Op, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, dy.to_vec());
            }
            accumulate(grads, *a, dy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *b, dy.iter().map(|v| -v).collect());
            accumulate(grads, *a, dy.to_vec());
        }
        Op::Mul { a, b, av, bv } => {
            if a.is_some() {
                accumulate(grads, *a, dy.iter().zip(bv.data()).map(|(d, y)| d * y).collect());
            }
            if b.is_some() {
                accumulate(grads, *b, dy.iter().zip(av.data()).map(|(d, x)| d * x).collect());
            }
        }
        Op::Div { a, b, av, bv } => {
            if a.is_some() {
                accumulate(grads, *a, dy.iter().zip(bv.data()).map(|(d, y)| d / y).collect());
            }
            if b.is_some() {
                let g = dy
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(d, (x, y))| -d * x / (y * y))
                    .collect();
                accumulate(grads, *b, g);
            }
        }
        Op::Scale(a, s) => accumulate(grads, *a, dy.iter().map(|v| v * s).collect()),
        Op::AddBias { x, b, cols } => {
            accumulate_with(grads, *b, *cols, |db| {
                for row in dy.chunks(*cols) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            });
            accumulate(grads, *x, dy.to_vec());
        }
        Op::ScaleRows { x, v, xv, vv } => {
            let rows = vv.len();
            let cols = dy.len() / rows;
            if v.is_some() {
                accumulate_with(grads, *v, rows, |dv| {
                    for (r, (drow, xrow)) in dy.chunks(cols).zip(xv.data().chunks(cols)).enumerate() {
                        dv[r] += kernels::dot(drow, xrow);
                    }
                });
            }
            if x.is_some() {
                let mut dx = dy.to_vec();
                for (r, row) in dx.chunks_mut(cols).enumerate() {
                    let s = vv.data()[r];
                    row.iter_mut().for_each(|o| *o *= s);
                }
                accumulate(grads, *x, dx);
            }
        }
        Op::MatMul { a, b, av, bv } => {
            let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
            if a.is_some() {
                accumulate(grads, *a, kernels::mm_nt(dy, bv.data(), m, n, k));
            }
            if b.is_some() {
                accumulate_with(grads, *b, k * n, |db| {
                    kernels::mm_tn_acc(av.data(), dy, m, k, n, db)
                });
            }
        }
        Op::Gather { x, index, in_len } => {
            accumulate_with(grads, *x, *in_len, |dx| {
                for (&i, &d) in index.iter().zip(dy) {
                    dx[i as usize] += d;
                }
            });
        }
        Op::Reshape(x) => accumulate(grads, *x, dy.to_vec()),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &(id, len) in parts {
                if id.is_some() {
                    accumulate(grads, id, dy[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::SoftmaxRows { x, out } => {
            let cols = *out.shape().last().unwrap();
            let mut dx = vec![0.0; dy.len()];
            for ((drow, prow), orow) in dy.chunks(cols).zip(out.data().chunks(cols)).zip(dx.chunks_mut(cols)) {
                let inner = kernels::dot(drow, prow);
                for j in 0..cols {
                    orow[j] = prow[j] * (drow[j] - inner);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::LayerNorm { x, g, b, xv, gv, eps } => {
            let d = gv.len();
            let rows = xv.len() / d;
            let mut dx = vec![0.0; xv.len()];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for r in 0..rows {
                let xr = &xv.data()[r * d..(r + 1) * d];
                let dyr = &dy[r * d..(r + 1) * d];
                let (mean, rstd) = kernels::row_stats(xr, *eps);
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for j in 0..d {
                    let xh = (xr[j] - mean) * rstd;
                    dg[j] += dyr[j] * xh;
                    db[j] += dyr[j];
                    let dxh = dyr[j] * gv.data()[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                let (m1, m2) = (sum_dxh / d as f64, sum_dxh_xh / d as f64);
                for j in 0..d {
                    let xh = (xr[j] - mean) * rstd;
                    let dxh = dyr[j] * gv.data()[j];
                    dx[r * d + j] = rstd * (dxh - m1 - xh * m2);
                }
            }
            accumulate(grads, *x, dx);
            accumulate(grads, *g, dg);
            accumulate(grads, *b, db);
        }
        Op::Gelu(x, xv) => accumulate(
            grads,
            *x,
            dy.iter().zip(xv.data()).map(|(d, &v)| d * gelu_grad(v)).collect(),
        ),
        Op::LeakyRelu(x, xv, slope) => accumulate(
            grads,
            *x,
            dy.iter()
                .zip(xv.data())
                .map(|(d, &v)| if v > 0.0 { *d } else { d * slope })
                .collect(),
        ),
        Op::Sigmoid(x, out) => accumulate(
            grads,
            *x,
            dy.iter().zip(out.data()).map(|(d, s)| d * s * (1.0 - s)).collect(),
        ),
        Op::Abs(x, xv) => accumulate(
            grads,
            *x,
            dy.iter()
                .zip(xv.data())
                .map(|(d, &v)| if v > 0.0 { *d } else if v < 0.0 { -d } else { 0.0 })
                .collect(),
        ),
        Op::Square(x, xv) => accumulate(
            grads,
            *x,
            dy.iter().zip(xv.data()).map(|(d, v)| 2.0 * d * v).collect(),
        ),
        Op::Sum(x, n) => accumulate(grads, *x, vec![dy[0]; *n]),
        Op::MaxRows { x, argmax, in_len } => {
            accumulate_with(grads, *x, *in_len, |dx| {
                for (&i, &d) in argmax.iter().zip(dy) {
                    dx[i] += d;
                }
            });
        }
        Op::Conv2d { x, w, b, xv, wv, geom, c_out } => {
            let n = geom.out_len();
            if b.is_some() {
                accumulate(grads, *b, dy.chunks(n).take(*c_out).map(|r| r.iter().sum()).collect());
            }
            let (dx, dw) =
                kernels::conv_backward(geom, wv.data(), xv.data(), dy, x.is_some(), w.is_some());
            if let Some(dw) = dw {
                accumulate(grads, *w, dw);
            }
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
        }
        Op::Attention { q, k, v, qv, kv, vv, scale, weights } => {
            let (groups, t, d) = (qv.dim(0), qv.dim(1), qv.dim(2));
            let (s, e) = (kv.dim(1), vv.dim(2));
            let mut dq = vec![0.0; q.map_or(0, |_| groups * t * d)];
            let mut dk = vec![0.0; k.map_or(0, |_| groups * s * d)];
            let mut dv = vec![0.0; v.map_or(0, |_| groups * s * e)];
            let mut scratch = AttentionScratch::new(t, s);
            if q.is_some() || k.is_some() {
                scratch.ds = vec![0.0; s * t];
            }
            for g in 0..groups {
                match weights {
                    Some(w) => scratch.pt.copy_from_slice(&w[g * s * t..(g + 1) * s * t]),
                    None => scratch.weights(qv, kv, g, d, *scale),
                }
                let dout = &dy[g * t * e..(g + 1) * t * e];
                let vg = &vv.data()[g * s * e..(g + 1) * s * e];
                if v.is_some() {
                    let dvg = &mut dv[g * s * e..(g + 1) * s * e];
                    kernels::gemm(s, t, e, &scratch.pt, (t, 1), dout, (e, 1), 1.0, dvg, (e, 1));
                }
                if q.is_none() && k.is_none() {
                    continue;
                }
                let AttentionScratch { pt, ds, sum: inner, .. } = &mut scratch;
                // dSᵀ = v·doutᵀ, then the softmax adjoint column by column.
                kernels::gemm(s, e, t, vg, (e, 1), dout, (1, e), 0.0, ds, (t, 1));
                inner.fill(0.0);
                for (drow, prow) in ds.chunks(t).zip(pt.chunks(t)) {
                    for ((acc, &dp), &p) in inner.iter_mut().zip(drow).zip(prow) {
                        *acc += dp * p;
                    }
                }
                for (drow, prow) in ds.chunks_mut(t).zip(pt.chunks(t)) {
                    for ((dp, &p), &inn) in drow.iter_mut().zip(prow).zip(inner.iter()) {
                        *dp = p * (*dp - inn) * scale;
                    }
                }
                let kg = &kv.data()[g * s * d..(g + 1) * s * d];
                let qg = &qv.data()[g * t * d..(g + 1) * t * d];
                if q.is_some() {
                    let dqg = &mut dq[g * t * d..(g + 1) * t * d];
                    kernels::gemm(t, s, d, ds, (1, t), kg, (d, 1), 1.0, dqg, (d, 1));
                }
                if k.is_some() {
                    let dkg = &mut dk[g * s * d..(g + 1) * s * d];
                    kernels::gemm(s, t, d, ds, (t, 1), qg, (d, 1), 1.0, dkg, (d, 1));
                }
            }
            if q.is_some() {
                accumulate(grads, *q, dq);
            }
            if k.is_some() {
                accumulate(grads, *k, dk);
            }
            if v.is_some() {
                accumulate(grads, *v, dv);
            }
        }
        Op::Focal { p, pv, labels, alpha, gamma, form } => {
            let n = pv.len() as f64;
            let g = pv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &pi)| dy[0] * focal_term(pi, labels[i], alpha[i], *gamma, *form).1 / n)
                .collect();
            accumulate(grads, *p, g);
        }
    }
}
