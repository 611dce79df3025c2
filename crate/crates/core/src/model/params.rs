use super::{ModelConfig, MODALITIES};
use crate::numerics::{ParamSet, Rng, Tensor};

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with σ = 0.02, redrawn beyond 2σ.
    TruncNormal,
    /// Uniform on `±1/√fan_in`.
    ConvUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn conv(out: &mut Vec<ParamSpec>, name: &str, c_out: usize, c_in: usize, k: usize) {
    let fan_in = c_in * k * k;
    spec(out, format!("{name}.w"), &[c_out, c_in, k, k], Init::ConvUniform { fan_in });
    spec(out, format!("{name}.b"), &[c_out], Init::Zeros);
}

fn linear(out: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize, bias: bool) {
    spec(out, format!("{name}.w"), &[d_in, d_out], Init::TruncNormal);
    if bias {
        spec(out, format!("{name}.b"), &[d_out], Init::Zeros);
    }
}

/// Feed-forward network followed by layer normalisation.
fn ffn_ln(out: &mut Vec<ParamSpec>, name: &str, c: usize, expansion: usize) {
    linear(out, &format!("{name}.ffn1"), c, expansion * c, true);
    linear(out, &format!("{name}.ffn2"), expansion * c, c, true);
    spec(out, format!("{name}.ln.g"), &[c], Init::Ones);
    spec(out, format!("{name}.ln.b"), &[c], Init::Zeros);
}

/// Every trainable tensor, in initialisation order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.shallow_channels;
    let x = cfg.ffn_expansion;
    let mut out = Vec::new();
    for m in MODALITIES {
        conv(&mut out, &format!("enc.{m}.conv1"), c, 1, 3);
        conv(&mut out, &format!("enc.{m}.conv2"), c, c, 3);
    }
    for block in ["ca", "ta"] {
        for m in MODALITIES {
            for p in ["wq", "wk", "wv"] {
                linear(&mut out, &format!("{block}.{m}.{p}"), c, c, false);
            }
            ffn_ln(&mut out, &format!("{block}.{m}"), c, x);
        }
    }
    linear(&mut out, "cgha.en.align", cfg.embedding_dim, c, true);
    linear(&mut out, "cgha.en.wk", c, c, false);
    linear(&mut out, "cgha.en.wv", c, c, false);
    for m in MODALITIES {
        linear(&mut out, &format!("cgha.{m}.s1.wq"), c, c, false);
        ffn_ln(&mut out, &format!("cgha.{m}.s1"), c, x);
        for p in ["wq", "wk", "wv"] {
            linear(&mut out, &format!("cgha.{m}.s2.{p}"), c, c, false);
        }
        ffn_ln(&mut out, &format!("cgha.{m}.s2"), c, x);
    }
    let [(a0, a1), (b0, b1), (c0, c1)] = cfg.reconstructor_plan();
    conv(&mut out, "rec.conv1", a1, a0, 3);
    conv(&mut out, "rec.conv2", b1, b0, 3);
    conv(&mut out, "rec.conv3", c1, c0, 1);
    linear(&mut out, "cls.embed", c, cfg.shared_channels(), true);
    linear(&mut out, "cls.fc", cfg.shared_channels(), cfg.num_labels, true);
    spec(&mut out, "task.w".into(), &[2], Init::Zeros);
    out
}

/// Draws a fresh parameter set; values are rounded to `f32` so that
/// checkpoints reproduce them exactly.
pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> ParamSet {
    let mut params = ParamSet::new();
    for s in param_specs(cfg) {
        let mut t = match s.init {
            Init::TruncNormal => Tensor::from_fn(&s.shape, |_| rng.truncated_normal(0.02)),
            Init::ConvUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                rng.uniform_tensor(&s.shape, -bound, bound)
            }
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::full(&s.shape, 1.0),
        };
        t.round_to_f32();
        params.insert(s.name, t);
    }
    params
}
