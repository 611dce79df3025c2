use std::rc::Rc;

use super::layout::head_split;
use super::{Layout, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, Padding, Rng, Tensor, Var};

/// Every intermediate feature map of one forward pass, in `C×H×W` layout.
/// Index 0 is the infrared branch, index 1 the visible branch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub phi_s: [Tensor; 2],
    pub phi_ic: [Tensor; 2],
    pub phi_ct: [Tensor; 2],
    /// First entity-attention stage output; `None` when that block is off.
    pub phi_text: Option<[Tensor; 2]>,
    pub phi_enm: [Tensor; 2],
    pub phi_sr: Tensor,
    /// Reconstructor output before any clamping.
    pub fused: Tensor,
    pub probs: Option<Tensor>,
}

pub struct Outputs {
    /// `[1×H×W]`, unclamped.
    pub fused: Var,
    /// `[num_labels]` probabilities, when requested.
    pub probs: Option<Var>,
    pub trace: Option<ForwardTrace>,
}

#[derive(Default)]
pub struct ForwardOptions<'r> {
    pub classify: bool,
    pub trace: bool,
    /// Draws the classifier's entity mask; `None` means no masking
    /// (inference).
    pub mask_rng: Option<&'r mut Rng>,
}

#[derive(Clone, Copy)]
enum WindowTokens {
    Channels,
    Pixels,
}

/// Entity rows in a canonical order (lexicographic on the values), so that
/// downstream reductions do not depend on the order entities were listed in.
pub fn canonical_entities(entities: &Tensor) -> Tensor {
    let cols = entities.dim(1);
    let mut rows: Vec<&[f64]> = entities.data().chunks(cols).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let data = rows.concat();
    Tensor::new(entities.shape(), data).expect("same shape")
}

/// The network bound to one graph and one input extent.
pub struct Network<'a> {
    pub graph: &'a Graph,
    pub params: &'a BoundParams,
    pub cfg: &'a ModelConfig,
    pub layout: Layout,
}

impl<'a> Network<'a> {
    pub fn new(
        graph: &'a Graph,
        params: &'a BoundParams,
        cfg: &'a ModelConfig,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Network {
            graph,
            params,
            cfg,
            layout: Layout::new(cfg, h, w)?,
        })
    }

    fn p(&self, name: &str) -> Result<&Var> {
        self.params.get(name)
    }

    fn linear(&self, x: &Var, name: &str, bias: bool) -> Result<Var> {
        let y = self.graph.matmul(x, self.p(&format!("{name}.w"))?)?;
        if bias {
            self.graph.add_bias(&y, self.p(&format!("{name}.b"))?)
        } else {
            Ok(y)
        }
    }

    fn conv(&self, x: &Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.graph.conv2d(x, w, Some(b), Padding::Reflect)
    }

    fn leaky(&self, x: &Var) -> Var {
        self.graph.leaky_relu(x, self.cfg.leaky_slope)
    }

    /// `[C×H×W] → [N×C]`.
    pub fn tokens(&self, x: &Var) -> Result<Var> {
        let l = &self.layout;
        self.graph
            .gather(x, l.to_tokens.clone(), &[l.pixels(), l.channels])
    }

    /// `[N×C] → [C×H×W]`.
    pub fn chw(&self, x: &Var) -> Result<Var> {
        let l = &self.layout;
        self.graph
            .gather(x, l.to_chw.clone(), &[l.channels, l.h, l.w])
    }

    fn check_features(&self, x: &Var, what: &str) -> Result<()> {
        let l = &self.layout;
        if x.shape() != [l.channels, l.h, l.w] {
            return Err(Error::shape(
                "features",
                format!("{what} is {:?}, expected [{}, {}, {}]", x.shape(), l.channels, l.h, l.w),
            ));
        }
        Ok(())
    }

    /// Two reflect-padded 3×3 convolutions with leaky activations:
    /// `[1×H×W] → [C×H×W]`.
    pub fn encode_shallow(&self, image: &Var, modality: &str) -> Result<Var> {
        let l = &self.layout;
        if image.shape() != [1, l.h, l.w] {
            return Err(Error::shape(
                "encode_shallow",
                format!("image {:?}, expected [1, {}, {}]", image.shape(), l.h, l.w),
            ));
        }
        let x = self.leaky(&self.conv(image, &format!("enc.{modality}.conv1"))?);
        Ok(self.leaky(&self.conv(&x, &format!("enc.{modality}.conv2"))?))
    }

    fn window_attention(
        &self,
        q: &Var,
        k: &Var,
        v: &Var,
        tokens: WindowTokens,
        label: &str,
    ) -> Result<Var> {
        let l = &self.layout;
        let g = self.graph;
        let groups = l.windows() * l.heads;
        let (d, pp) = (l.head_dim(), l.patch * l.patch);
        let (map, inv, shape, scale) = match tokens {
            WindowTokens::Channels => (
                &l.channel_heads,
                &l.channel_heads_inv,
                [groups, d, pp],
                1.0 / (pp as f64).sqrt(),
            ),
            WindowTokens::Pixels => (
                &l.pixel_heads,
                &l.pixel_heads_inv,
                [groups, pp, d],
                1.0 / (d as f64).sqrt(),
            ),
        };
        let q = g.gather(q, map.clone(), &shape)?;
        let k = g.gather(k, map.clone(), &shape)?;
        let v = g.gather(v, map.clone(), &shape)?;
        let out = g.attention(&q, &k, &v, scale, label)?;
        g.gather(&out, inv.clone(), &[l.pixels(), l.channels])
    }

    /// `LN(a + FFN(a))` on `[N×C]` tokens.
    fn ffn_ln(&self, a: &Var, prefix: &str) -> Result<Var> {
        let g = self.graph;
        let h = g.gelu(&self.linear(a, &format!("{prefix}.ffn1"), true)?);
        let f = self.linear(&h, &format!("{prefix}.ffn2"), true)?;
        g.layer_norm(
            &g.add(a, &f)?,
            self.p(&format!("{prefix}.ln.g"))?,
            self.p(&format!("{prefix}.ln.b"))?,
            self.cfg.layer_norm_eps,
        )
    }

    fn mca_tokens(&self, ir: &Var, vi: &Var) -> Result<[Var; 2]> {
        let g = self.graph;
        let t = [self.tokens(ir)?, self.tokens(vi)?];
        let mut qkv = Vec::new();
        for (m, x) in ["ir", "vi"].iter().zip(&t) {
            qkv.push([
                self.linear(x, &format!("ca.{m}.wq"), false)?,
                self.linear(x, &format!("ca.{m}.wk"), false)?,
                self.linear(x, &format!("ca.{m}.wv"), false)?,
            ]);
        }
        let mut out = Vec::with_capacity(2);
        for (own, other) in [(0, 1), (1, 0)] {
            let att = self.window_attention(
                &qkv[own][0],
                &qkv[other][1],
                &qkv[other][2],
                WindowTokens::Channels,
                "mca",
            )?;
            out.push(g.add(&t[own], &att)?);
        }
        Ok([out[0].clone(), out[1].clone()])
    }

    /// Channel cross-attention plus residual, before the feed-forward
    /// sub-layer. Within every window each modality's channels attend to the
    /// other modality's channels.
    pub fn mca(&self, ir: &Var, vi: &Var) -> Result<(Var, Var)> {
        self.check_features(ir, "ir")?;
        self.check_features(vi, "vi")?;
        let [a, b] = self.mca_tokens(ir, vi)?;
        Ok((self.chw(&a)?, self.chw(&b)?))
    }

    pub fn channel_cross_attention(&self, ir: &Var, vi: &Var) -> Result<(Var, Var)> {
        self.check_features(ir, "ir")?;
        self.check_features(vi, "vi")?;
        let [a, b] = self.mca_tokens(ir, vi)?;
        let a = self.ffn_ln(&a, "ca.ir")?;
        let b = self.ffn_ln(&b, "ca.vi")?;
        Ok((self.chw(&a)?, self.chw(&b)?))
    }

    /// Self-attention among the pixels of each window.
    pub fn token_self_attention(&self, x: &Var, modality: &str) -> Result<Var> {
        self.check_features(x, modality)?;
        let g = self.graph;
        let t = self.tokens(x)?;
        let q = self.linear(&t, &format!("ta.{modality}.wq"), false)?;
        let k = self.linear(&t, &format!("ta.{modality}.wk"), false)?;
        let v = self.linear(&t, &format!("ta.{modality}.wv"), false)?;
        let att = self.window_attention(&q, &k, &v, WindowTokens::Pixels, "msa")?;
        let out = self.ffn_ln(&g.add(&t, &att)?, &format!("ta.{modality}"))?;
        self.chw(&out)
    }

    /// Canonically ordered entity features projected to the visual width:
    /// `[E×D] → [E×C]`.
    pub fn align_entities(&self, entities: &Tensor) -> Result<Var> {
        if entities.rank() != 2 || entities.dim(1) != self.cfg.embedding_dim {
            return Err(Error::shape(
                "entities",
                format!("{:?}, expected [E, {}]", entities.shape(), self.cfg.embedding_dim),
            ));
        }
        let e = self.graph.constant(canonical_entities(entities));
        self.linear(&e, "cgha.en.align", true)
    }

    /// Entity-guided attention. Stage one: every visual token queries the
    /// entities. Stage two: the entity-informed tokens query the visual
    /// tokens of their window. Returns `(stage one [N×C], stage two
    /// [C×H×W])`.
    pub fn cgha(&self, x: &Var, aligned: &Var, modality: &str) -> Result<(Var, Var)> {
        self.check_features(x, modality)?;
        let g = self.graph;
        let l = &self.layout;
        let t = self.tokens(x)?;
        let e = aligned.shape()[0];
        let d = l.head_dim();
        let k = self.linear(aligned, "cgha.en.wk", false)?;
        let v = self.linear(aligned, "cgha.en.wv", false)?;
        let q = self.linear(&t, &format!("cgha.{modality}.s1.wq"), false)?;
        let (emap, _) = head_split(e, l.channels, l.heads);
        let emap = Rc::new(emap);
        let qh = g.gather(&q, l.global_heads.clone(), &[l.heads, l.pixels(), d])?;
        let kh = g.gather(&k, emap.clone(), &[l.heads, e, d])?;
        let vh = g.gather(&v, emap, &[l.heads, e, d])?;
        let att = g.attention(&qh, &kh, &vh, 1.0 / (d as f64).sqrt(), "cgha.visual_entity")?;
        let att = g.gather(&att, l.global_heads_inv.clone(), &[l.pixels(), l.channels])?;
        let s1 = self.ffn_ln(&g.add(&t, &att)?, &format!("cgha.{modality}.s1"))?;

        let q2 = self.linear(&s1, &format!("cgha.{modality}.s2.wq"), false)?;
        let k2 = self.linear(&t, &format!("cgha.{modality}.s2.wk"), false)?;
        let v2 = self.linear(&t, &format!("cgha.{modality}.s2.wv"), false)?;
        let att2 = self.window_attention(&q2, &k2, &v2, WindowTokens::Pixels, "cgha.entity_visual")?;
        let s2 = self.ffn_ln(&g.add(&s1, &att2)?, &format!("cgha.{modality}.s2"))?;
        Ok((s1, self.chw(&s2)?))
    }

    /// Channel concatenation, infrared first: `2 × [C×H×W] → [2C×H×W]`.
    pub fn assemble_shared(&self, ir: &Var, vi: &Var) -> Result<Var> {
        if ir.shape() != vi.shape() {
            return Err(Error::shape(
                "assemble_shared",
                format!("{:?} vs {:?}", ir.shape(), vi.shape()),
            ));
        }
        self.graph.concat(&[ir, vi])
    }

    /// `[2C×H×W] → [1×H×W]`; the output is not clamped.
    pub fn reconstruct(&self, shared: &Var) -> Result<Var> {
        let x = self.leaky(&self.conv(shared, "rec.conv1")?);
        let x = self.leaky(&self.conv(&x, "rec.conv2")?);
        self.conv(&x, "rec.conv3")
    }

    /// Multi-label probabilities from the shared representation, modulated
    /// channel-wise by the (masked, entity-averaged) embedded entities.
    pub fn classify(
        &self,
        shared: &Var,
        aligned: Option<&Var>,
        mask_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let g = self.graph;
        let c2 = self.cfg.shared_channels();
        let n = shared.value().len() / c2;
        let sr = g.reshape(shared, &[c2, n])?;
        let modulated = match aligned {
            Some(aligned) => {
                let e = aligned.shape()[0];
                let mut emb = self.linear(aligned, "cls.embed", true)?;
                if let Some(rng) = mask_rng {
                    if self.cfg.mask_ratio > 0.0 {
                        let ratio = self.cfg.mask_ratio;
                        let mask = Tensor::from_fn(&[e, c2], |_| {
                            if rng.uniform() < ratio {
                                0.0
                            } else {
                                1.0
                            }
                        });
                        emb = g.mul(&emb, &g.constant(mask))?;
                    }
                }
                let avg = g.constant(Tensor::full(&[1, e], 1.0 / e as f64));
                let pooled = g.reshape(&g.matmul(&avg, &emb)?, &[c2])?;
                g.scale_rows(&sr, &pooled)?
            }
            None => sr,
        };
        let v = g.reshape(&g.max_rows(&modulated)?, &[1, c2])?;
        let logits = self.linear(&v, "cls.fc", true)?;
        let logits = g.reshape(&logits, &[self.cfg.num_labels])?;
        Ok(g.sigmoid(&logits))
    }

    /// Full forward pass honouring the ablation switches. `entities` is
    /// `[E×D]` and may be `None` only when entity text is disabled.
    pub fn forward(
        &self,
        ir: &Tensor,
        vi: &Tensor,
        entities: Option<&Tensor>,
        opts: ForwardOptions<'_>,
    ) -> Result<Outputs> {
        let g = self.graph;
        let cfg = self.cfg;
        if ir.shape() != vi.shape() {
            return Err(Error::shape(
                "forward",
                format!("ir {:?} vs vi {:?}", ir.shape(), vi.shape()),
            ));
        }
        let s = [
            self.encode_shallow(&g.constant(ir.clone()), "ir")?,
            self.encode_shallow(&g.constant(vi.clone()), "vi")?,
        ];
        let ic = if cfg.use_ca {
            let (a, b) = self.channel_cross_attention(&s[0], &s[1])?;
            [a, b]
        } else {
            s.clone()
        };
        let ct = if cfg.use_ta {
            [
                self.token_self_attention(&ic[0], "ir")?,
                self.token_self_attention(&ic[1], "vi")?,
            ]
        } else {
            ic.clone()
        };
        let aligned = if cfg.use_text {
            let e = entities.ok_or_else(|| {
                Error::invalid("entities", "required when entity text is enabled")
            })?;
            if e.rank() != 2 || e.dim(0) == 0 {
                return Err(Error::invalid("entities", "at least one entity is required"));
            }
            Some(self.align_entities(e)?)
        } else {
            None
        };
        let (text, enm) = match (&aligned, cfg.cgha_active()) {
            (Some(al), true) => {
                let (t0, e0) = self.cgha(&ct[0], al, "ir")?;
                let (t1, e1) = self.cgha(&ct[1], al, "vi")?;
                (Some([t0, t1]), [e0, e1])
            }
            _ => (None, ct.clone()),
        };
        let sr = self.assemble_shared(&enm[0], &enm[1])?;
        let fused = self.reconstruct(&sr)?;
        let probs = if opts.classify {
            Some(self.classify(&sr, aligned.as_ref(), opts.mask_rng)?)
        } else {
            None
        };
        let trace = if opts.trace {
            let v = |x: &[Var; 2]| [x[0].value().clone(), x[1].value().clone()];
            let phi_text = match &text {
                Some([a, b]) => Some([self.chw(a)?.value().clone(), self.chw(b)?.value().clone()]),
                None => None,
            };
            Some(ForwardTrace {
                phi_s: v(&s),
                phi_ic: v(&ic),
                phi_ct: v(&ct),
                phi_text,
                phi_enm: v(&enm),
                phi_sr: sr.value().clone(),
                fused: fused.value().clone(),
                probs: probs.as_ref().map(|p| p.value().clone()),
            })
        } else {
            None
        };
        Ok(Outputs {
            fused,
            probs,
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::{kernels, ParamSet};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            shallow_channels: 4,
            patch: 4,
            heads: 2,
            ..Default::default()
        }
    }

    fn with_net<R>(
        cfg: &ModelConfig,
        params: &ParamSet,
        h: usize,
        w: usize,
        f: impl FnOnce(&Network) -> R,
    ) -> R {
        let g = Graph::inference();
        let b = params.bind(&g);
        let net = Network::new(&g, &b, cfg, h, w).unwrap();
        f(&net)
    }

    fn image(rng: &mut Rng, h: usize, w: usize) -> Tensor {
        rng.uniform_tensor(&[1, h, w], 0.0, 1.0)
    }

    fn entities(rng: &mut Rng, e: usize) -> Tensor {
        rng.normal_tensor(&[e, 768], 0.05)
    }

    // Naive oracles, written independently of the graph ops.
    fn lin(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let (n, a, o) = (x.dim(0), x.dim(1), w.dim(1));
        Tensor::from_fn(&[n, o], |i| {
            let (r, c) = (i / o, i % o);
            let mut s = b.map_or(0.0, |b| b.data()[c]);
            for k in 0..a {
                s += x.data()[r * a + k] * w.data()[k * o + c];
            }
            s
        })
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn ffn_ln_oracle(a: &Tensor, p: &ParamSet, prefix: &str, eps: f64) -> Tensor {
        let get = |s: &str| p.get(&format!("{prefix}.{s}")).unwrap();
        let h = lin(a, get("ffn1.w"), Some(get("ffn1.b"))).map(gelu);
        let f = lin(&h, get("ffn2.w"), Some(get("ffn2.b")));
        let s = a.zip_map(&f, |x, y| x + y).unwrap();
        let d = s.dim(1);
        Tensor::from_fn(s.shape(), |i| {
            let row = s.row(i / d);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (row[i % d] - mean) / (var + eps).sqrt() * get("ln.g").data()[i % d]
                + get("ln.b").data()[i % d]
        })
    }

    fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// `[C×H×W] → [N×C]`.
    fn tokens(x: &Tensor) -> Tensor {
        let (c, n) = (x.dim(0), x.dim(1) * x.dim(2));
        Tensor::from_fn(&[n, c], |i| x.data()[(i % c) * n + i / c])
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let d = a.max_abs_diff(b);
        assert!(d < tol, "max diff {d}");
    }

    #[test]
    fn trace_shapes_at_default_width() {
        let cfg = ModelConfig::default();
        let mut rng = Rng::seed_from_u64(1);
        let p = init_params(&cfg, &mut rng);
        let (ir, vi, e) = (image(&mut rng, 32, 32), image(&mut rng, 32, 32), entities(&mut rng, 3));
        let out = with_net(&cfg, &p, 32, 32, |n| {
            let opts = ForwardOptions {
                classify: true,
                trace: true,
                mask_rng: None,
            };
            n.forward(&ir, &vi, Some(&e), opts).unwrap()
        });
        let t = out.trace.unwrap();
        for pair in [&t.phi_s, &t.phi_ic, &t.phi_ct, &t.phi_enm, t.phi_text.as_ref().unwrap()] {
            for x in pair {
                assert_eq!(x.shape(), &[32, 32, 32]);
            }
        }
        assert_eq!(t.phi_sr.shape(), &[64, 32, 32]);
        assert_eq!(t.fused.shape(), &[1, 32, 32]);
        let probs = t.probs.unwrap();
        assert_eq!(probs.shape(), &[9]);
        assert!(probs.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn zero_image_with_zero_bias_encodes_to_zero() {
        let cfg = small_cfg();
        let p = init_params(&cfg, &mut Rng::seed_from_u64(2));
        let out = with_net(&cfg, &p, 8, 8, |n| {
            let x = n.graph.constant(Tensor::zeros(&[1, 8, 8]));
            n.encode_shallow(&x, "ir").unwrap().value().clone()
        });
        assert_eq!(out, Tensor::zeros(&[4, 8, 8]));
    }

    #[test]
    fn degenerate_channel_attention_averages_the_other_modality() {
        let cfg = ModelConfig {
            heads: 1,
            ..small_cfg()
        };
        let mut rng = Rng::seed_from_u64(3);
        let mut p = init_params(&cfg, &mut rng);
        for m in ["ir", "vi"] {
            *p.get_mut(&format!("ca.{m}.wq.w")).unwrap() = Tensor::zeros(&[4, 4]);
            *p.get_mut(&format!("ca.{m}.wk.w")).unwrap() = Tensor::zeros(&[4, 4]);
            *p.get_mut(&format!("ca.{m}.wv.w")).unwrap() = Tensor::identity(4);
        }
        let ir = rng.uniform_tensor(&[4, 8, 8], -1.0, 1.0);
        let vi = rng.uniform_tensor(&[4, 8, 8], -1.0, 1.0);
        let (a, b) = with_net(&cfg, &p, 8, 8, |n| {
            let g = n.graph;
            let (a, b) = n.mca(&g.constant(ir.clone()), &g.constant(vi.clone())).unwrap();
            (a.value().clone(), b.value().clone())
        });
        let expect = |own: &Tensor, other: &Tensor| {
            Tensor::from_fn(&[4, 8, 8], |i| {
                let px = i % 64;
                let mean = (0..4).map(|c| other.data()[c * 64 + px]).sum::<f64>() / 4.0;
                own.data()[i] + mean
            })
        };
        close(&a, &expect(&ir, &vi), 1e-12);
        close(&b, &expect(&vi, &ir), 1e-12);
    }

    #[test]
    fn swapping_modalities_swaps_outputs_under_shared_parameters() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(4);
        let mut p = init_params(&cfg, &mut rng);
        let names: Vec<String> = p.names().filter(|n| n.starts_with("ca.ir.")).map(String::from).collect();
        for n in names {
            let t = p.get(&n).unwrap().clone();
            *p.get_mut(&n.replacen("ca.ir.", "ca.vi.", 1)).unwrap() = t;
        }
        let x = rng.uniform_tensor(&[4, 8, 8], -1.0, 1.0);
        let y = rng.uniform_tensor(&[4, 8, 8], -1.0, 1.0);
        let run = |a: &Tensor, b: &Tensor| {
            with_net(&cfg, &p, 8, 8, |n| {
                let g = n.graph;
                let (u, v) = n
                    .channel_cross_attention(&g.constant(a.clone()), &g.constant(b.clone()))
                    .unwrap();
                (u.value().clone(), v.value().clone())
            })
        };
        let (u1, v1) = run(&x, &y);
        let (u2, v2) = run(&y, &x);
        assert_eq!(u1, v2);
        assert_eq!(v1, u2);
    }

    #[test]
    fn zero_value_projection_reduces_blocks_to_their_residual_path() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(5);
        let mut p = init_params(&cfg, &mut rng);
        for name in ["ca.ir.wv.w", "ca.vi.wv.w", "ta.ir.wv.w"] {
            *p.get_mut(name).unwrap() = Tensor::zeros(&[4, 4]);
        }
        let ir = rng.uniform_tensor(&[4, 8, 8], -1.0, 1.0);
        let vi = rng.uniform_tensor(&[4, 8, 8], -1.0, 1.0);
        let (a, t) = with_net(&cfg, &p, 8, 8, |n| {
            let g = n.graph;
            let (a, _) = n
                .channel_cross_attention(&g.constant(ir.clone()), &g.constant(vi.clone()))
                .unwrap();
            let t = n.token_self_attention(&g.constant(ir.clone()), "ir").unwrap();
            (n.tokens(&a).unwrap().value().clone(), n.tokens(&t).unwrap().value().clone())
        });
        close(&a, &ffn_ln_oracle(&tokens(&ir), &p, "ca.ir", 1e-5), 1e-10);
        close(&t, &ffn_ln_oracle(&tokens(&ir), &p, "ta.ir", 1e-5), 1e-10);
    }

    #[test]
    fn token_attention_on_a_single_window_matches_direct_computation() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(6);
        let p = init_params(&cfg, &mut rng);
        let x = rng.uniform_tensor(&[4, 4, 4], -1.0, 1.0);
        let got = with_net(&cfg, &p, 4, 4, |n| {
            let t = n.token_self_attention(&n.graph.constant(x.clone()), "vi").unwrap();
            n.tokens(&t).unwrap().value().clone()
        });
        let t = tokens(&x);
        let q = lin(&t, p.get("ta.vi.wq.w").unwrap(), None);
        let k = lin(&t, p.get("ta.vi.wk.w").unwrap(), None);
        let v = lin(&t, p.get("ta.vi.wv.w").unwrap(), None);
        let d = 2;
        let mut a = t.clone();
        for h in 0..2 {
            for i in 0..16 {
                let scores: Vec<f64> = (0..16)
                    .map(|j| {
                        (0..d).map(|c| q.data()[i * 4 + h * d + c] * k.data()[j * 4 + h * d + c]).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for c in 0..d {
                    let o: f64 = (0..16).map(|j| w[j] * v.data()[j * 4 + h * d + c]).sum();
                    a.data_mut()[i * 4 + h * d + c] += o;
                }
            }
        }
        close(&got, &ffn_ln_oracle(&a, &p, "ta.vi", 1e-5), 1e-10);
    }

    #[test]
    fn constant_window_attends_to_its_own_value() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(7);
        let p = init_params(&cfg, &mut rng);
        let x = Tensor::from_fn(&[4, 4, 4], |i| [0.3, -0.2, 0.9, 0.1][i / 16]);
        let got = with_net(&cfg, &p, 4, 4, |n| {
            let t = n.token_self_attention(&n.graph.constant(x.clone()), "ir").unwrap();
            n.tokens(&t).unwrap().value().clone()
        });
        let t = tokens(&x);
        let v = lin(&t, p.get("ta.ir.wv.w").unwrap(), None);
        let a = t.zip_map(&v, |x, y| x + y).unwrap();
        close(&got, &ffn_ln_oracle(&a, &p, "ta.ir", 1e-5), 1e-12);
    }

    #[test]
    fn entity_attention_by_hand_two_tokens_two_entities() {
        let cfg = ModelConfig {
            shallow_channels: 2,
            patch: 1,
            heads: 1,
            embedding_dim: 2,
            ..Default::default()
        };
        let mut p = init_params(&cfg, &mut Rng::seed_from_u64(8));
        let set = |p: &mut ParamSet, n: &str, rows: &[&[f64]]| *p.get_mut(n).unwrap() = Tensor::from_rows(rows);
        set(&mut p, "cgha.en.align.w", &[&[1.0, 0.0], &[0.0, 1.0]]);
        set(&mut p, "cgha.en.wk.w", &[&[1.0, 0.0], &[0.0, 1.0]]);
        set(&mut p, "cgha.en.wv.w", &[&[2.0, 0.0], &[0.0, 2.0]]);
        set(&mut p, "cgha.ir.s1.wq.w", &[&[1.0, 0.0], &[0.0, 1.0]]);
        // Tokens (1, 0) and (0, 1); entities (ln 3, 0) and (0, 0).
        let x = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = Tensor::from_rows(&[&[3f64.ln() * 2f64.sqrt(), 0.0], &[0.0, 0.0]]);
        let s1 = with_net(&cfg, &p, 1, 2, |n| {
            let al = n.align_entities(&e).unwrap();
            n.cgha(&n.graph.constant(x.clone()), &al, "ir").unwrap().0.value().clone()
        });
        // Token 0 scores (ln 3, 0) → weights (3/4, 1/4); token 1 scores (0, 0).
        let v = [[2.0 * 3f64.ln() * 2f64.sqrt(), 0.0], [0.0, 0.0]];
        let w = [[0.75, 0.25], [0.5, 0.5]];
        let mut a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        for t in 0..2 {
            for c in 0..2 {
                a.data_mut()[t * 2 + c] += w[t][0] * v[0][c] + w[t][1] * v[1][c];
            }
        }
        close(&s1, &ffn_ln_oracle(&a, &p, "cgha.ir.s1", 1e-5), 1e-12);
    }

    #[test]
    fn single_entity_gives_every_token_the_same_attention_output() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(9);
        let p = init_params(&cfg, &mut rng);
        let x = rng.uniform_tensor(&[4, 8, 8], -1.0, 1.0);
        let e = entities(&mut rng, 1);
        let g = Graph::inference();
        g.record_attention();
        let b = p.bind(&g);
        let n = Network::new(&g, &b, &cfg, 8, 8).unwrap();
        let al = n.align_entities(&e).unwrap();
        let s1 = n.cgha(&g.constant(x.clone()), &al, "vi").unwrap().0;
        let rec = g.attention_records().into_iter().find(|r| r.label == "cgha.visual_entity").unwrap();
        assert_eq!((rec.cols, rec.min_weight, rec.max_row_error), (1, 1.0, 0.0));
        let aligned = al.value().clone();
        let v = lin(&aligned, p.get("cgha.en.wv.w").unwrap(), None);
        let t = tokens(&x);
        let a = Tensor::from_fn(t.shape(), |i| t.data()[i] + v.data()[i % 4]);
        close(s1.value(), &ffn_ln_oracle(&a, &p, "cgha.vi.s1", 1e-5), 1e-12);
    }

    #[test]
    fn shared_representation_concatenates_ir_first() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(10);
        let p = init_params(&cfg, &mut rng);
        let x = rng.uniform_tensor(&[4, 4, 4], -1.0, 1.0);
        let out = with_net(&cfg, &p, 4, 4, |n| {
            let g = n.graph;
            let z = g.constant(Tensor::zeros(&[4, 4, 4]));
            n.assemble_shared(&g.constant(x.clone()), &z).unwrap().value().clone()
        });
        assert_eq!(out.shape(), &[8, 4, 4]);
        assert_eq!(&out.data()[..64], x.data());
        assert!(out.data()[64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstructor_is_a_conv_composition() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(11);
        let mut p = init_params(&cfg, &mut rng);
        for name in ["rec.conv1.b", "rec.conv2.b", "rec.conv3.b"] {
            let t = p.get_mut(name).unwrap();
            *t = rng.uniform_tensor(t.shape(), -0.1, 0.1);
        }
        let sr = rng.uniform_tensor(&[8, 8, 8], -1.0, 1.0);
        let got = with_net(&cfg, &p, 8, 8, |n| n.reconstruct(&n.graph.constant(sr.clone())).unwrap().value().clone());
        let conv = |x: &Tensor, name: &str| {
            let y = kernels::conv2d(x, p.get(&format!("{name}.w")).unwrap(), 1, Padding::Reflect).unwrap();
            let b = p.get(&format!("{name}.b")).unwrap();
            let plane = y.dim(1) * y.dim(2);
            Tensor::from_fn(y.shape(), |i| y.data()[i] + b.data()[i / plane])
        };
        let leaky = |t: Tensor| t.map(|v| if v > 0.0 { v } else { 0.2 * v });
        let expect = conv(&leaky(conv(&leaky(conv(&sr, "rec.conv1")), "rec.conv2")), "rec.conv3");
        assert_eq!(got.shape(), &[1, 8, 8]);
        close(&got, &expect, 1e-12);

        for name in ["rec.conv1", "rec.conv2", "rec.conv3"] {
            for s in ["w", "b"] {
                let t = p.get_mut(&format!("{name}.{s}")).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        let zero = with_net(&cfg, &p, 8, 8, |n| n.reconstruct(&n.graph.constant(sr.clone())).unwrap().value().clone());
        assert_eq!(zero, Tensor::zeros(&[1, 8, 8]));
    }

    #[test]
    fn classifier_mask_semantics() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(12);
        let p = init_params(&cfg, &mut rng);
        let sr = rng.uniform_tensor(&[8, 8, 8], -1.0, 1.0);
        let e = entities(&mut rng, 3);
        let run = |cfg: &ModelConfig, mask: Option<&mut Rng>| {
            with_net(cfg, &p, 8, 8, |n| {
                let al = n.align_entities(&e).unwrap();
                n.classify(&n.graph.constant(sr.clone()), Some(&al), mask).unwrap().value().clone()
            })
        };
        let a = run(&cfg, None);
        assert_eq!(a, run(&cfg, None));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let unmasked = ModelConfig {
            mask_ratio: 0.0,
            ..cfg.clone()
        };
        assert_eq!(run(&unmasked, Some(&mut Rng::seed_from_u64(1))), a);
        assert_ne!(run(&cfg, Some(&mut Rng::seed_from_u64(1))), a);
    }

    fn fused(cfg: &ModelConfig, p: &ParamSet, ir: &Tensor, vi: &Tensor, e: &Tensor) -> Tensor {
        with_net(cfg, p, ir.dim(1), ir.dim(2), |n| {
            n.forward(ir, vi, Some(e), ForwardOptions::default()).unwrap().fused.value().clone()
        })
    }

    #[test]
    fn entity_order_does_not_change_the_fused_image() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(13);
        let p = init_params(&cfg, &mut rng);
        let (ir, vi) = (image(&mut rng, 8, 8), image(&mut rng, 8, 8));
        let e = entities(&mut rng, 4);
        let rows: Vec<&[f64]> = e.data().chunks(768).collect();
        let permuted = Tensor::new(&[4, 768], [rows[2], rows[0], rows[3], rows[1]].concat()).unwrap();
        assert_eq!(fused(&cfg, &p, &ir, &vi, &e), fused(&cfg, &p, &ir, &vi, &permuted));
        assert_ne!(fused(&cfg, &p, &ir, &vi, &e), fused(&cfg, &p, &ir, &vi, &entities(&mut rng, 2)));
    }

    #[test]
    fn without_entity_attention_the_fused_image_ignores_entities() {
        let cfg = ModelConfig {
            use_cgha: false,
            ..small_cfg()
        };
        let mut rng = Rng::seed_from_u64(14);
        let p = init_params(&cfg, &mut rng);
        let (ir, vi) = (image(&mut rng, 8, 8), image(&mut rng, 8, 8));
        let a = fused(&cfg, &p, &ir, &vi, &entities(&mut rng, 2));
        let b = fused(&cfg, &p, &ir, &vi, &entities(&mut rng, 5));
        assert_eq!(a, b);
    }

    #[test]
    fn forward_equals_manual_composition() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(15);
        let p = init_params(&cfg, &mut rng);
        let (ir, vi, e) = (image(&mut rng, 8, 8), image(&mut rng, 8, 8), entities(&mut rng, 2));
        with_net(&cfg, &p, 8, 8, |n| {
            let g = n.graph;
            let opts = ForwardOptions {
                classify: true,
                trace: true,
                mask_rng: None,
            };
            let t = n.forward(&ir, &vi, Some(&e), opts).unwrap().trace.unwrap();
            let s0 = n.encode_shallow(&g.constant(ir.clone()), "ir").unwrap();
            let s1 = n.encode_shallow(&g.constant(vi.clone()), "vi").unwrap();
            let (c0, c1) = n.channel_cross_attention(&s0, &s1).unwrap();
            let t0 = n.token_self_attention(&c0, "ir").unwrap();
            let t1 = n.token_self_attention(&c1, "vi").unwrap();
            let al = n.align_entities(&e).unwrap();
            let (_, e0) = n.cgha(&t0, &al, "ir").unwrap();
            let (_, e1) = n.cgha(&t1, &al, "vi").unwrap();
            let sr = n.assemble_shared(&e0, &e1).unwrap();
            let f = n.reconstruct(&sr).unwrap();
            let pr = n.classify(&sr, Some(&al), None).unwrap();
            assert_eq!(&t.phi_s[1], s1.value());
            assert_eq!(&t.phi_ct[0], t0.value());
            assert_eq!(&t.phi_enm[1], e1.value());
            assert_eq!(&t.phi_sr, sr.value());
            assert_eq!(&t.fused, f.value());
            assert_eq!(t.probs.as_ref().unwrap(), pr.value());
        });
    }

    #[test]
    fn ablations_skip_their_blocks() {
        let mut rng = Rng::seed_from_u64(16);
        let base = small_cfg();
        let p = init_params(&base, &mut rng);
        let (ir, vi, e) = (image(&mut rng, 8, 8), image(&mut rng, 8, 8), entities(&mut rng, 2));
        let trace = |cfg: &ModelConfig, e: Option<&Tensor>| {
            with_net(cfg, &p, 8, 8, |n| {
                let opts = ForwardOptions {
                    classify: true,
                    trace: true,
                    mask_rng: None,
                };
                n.forward(&ir, &vi, e, opts).unwrap().trace.unwrap()
            })
        };
        let t = trace(&ModelConfig { use_ca: false, ..base.clone() }, Some(&e));
        assert_eq!(t.phi_ic, t.phi_s);
        let t = trace(&ModelConfig { use_ta: false, ..base.clone() }, Some(&e));
        assert_eq!(t.phi_ct, t.phi_ic);
        let t = trace(&ModelConfig { use_cgha: false, ..base.clone() }, Some(&e));
        assert_eq!(t.phi_enm, t.phi_ct);
        assert!(t.phi_text.is_none());
        let t = trace(&ModelConfig { use_text: false, ..base.clone() }, None);
        assert_eq!(t.phi_enm, t.phi_ct);
        assert!(t.probs.is_some());
    }

    #[test]
    fn every_attention_matrix_is_row_stochastic() {
        let cfg = small_cfg();
        let mut rng = Rng::seed_from_u64(17);
        let p = init_params(&cfg, &mut rng);
        let (ir, vi, e) = (image(&mut rng, 8, 8), image(&mut rng, 8, 8), entities(&mut rng, 3));
        let g = Graph::inference();
        g.record_attention();
        let b = p.bind(&g);
        let n = Network::new(&g, &b, &cfg, 8, 8).unwrap();
        n.forward(&ir, &vi, Some(&e), ForwardOptions::default()).unwrap();
        let recs = g.attention_records();
        let labels: Vec<&str> = recs.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            ["mca", "mca", "msa", "msa", "cgha.visual_entity", "cgha.entity_visual", "cgha.visual_entity", "cgha.entity_visual"]
        );
        for r in &recs {
            assert!(r.max_row_error < 1e-12 && r.min_weight >= 0.0, "{r:?}");
        }
        assert_eq!((recs[0].rows, recs[0].cols), (2, 2));
        assert_eq!((recs[2].rows, recs[2].cols), (16, 16));
        assert_eq!((recs[4].rows, recs[4].cols), (64, 3));
    }
}
