//! Optimisation loop: Adam over every parameter (task weights included),
//! per-step loss logging, checkpoints, and whole-image fusion.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_pipeline::{recolor, save_gray_png, save_rgb_png, ImagePairSample};
use crate::error::{Error, Result};
use crate::entity_ingest::NUM_LABELS;
use crate::losses::{class_weights, total_loss, LossBreakdown, LossConfig};
use crate::metrics::MetricsConfig;
use crate::model::{init_params, Checkpoint, ForwardOptions, ModelConfig, Network};
use crate::numerics::kernels::{crop, pad_reflect};
use crate::numerics::grad_check::Objective;
use crate::numerics::{BoundParams, Graph, ParamSet, Rng, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: u64,
    pub batch: usize,
    pub seed: u64,
    /// Exact number of optimizer steps; overrides `epochs` when set.
    pub steps: Option<u64>,
    /// Multi-task learning: classification head and focal loss.
    pub use_mt: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; off unless set.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 20,
            batch: 4,
            seed: 0,
            steps: None,
            use_mt: true,
            checkpoint_every: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Everything a run depends on; the shape of the `--config` JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub metrics: MetricsConfig,
}

/// Named switch combinations of the ablation table, as `--ablation` lists.
pub const ABLATIONS: [(&str, &str); 8] = [
    ("EGMT", ""),
    ("w/o MT", "mt"),
    ("w/o TI", "ti"),
    ("w/o MT&TI", "mt,ti"),
    ("w/o CA", "ca"),
    ("w/o TA", "ta"),
    ("w/o CGHA", "cgha"),
    ("w/o CA&TA", "ca,ta"),
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.metrics.validate()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Turns off each block named in a comma list of `ca`, `ta`, `cgha`,
    /// `mt`, `ti`.
    pub fn apply_ablation(&mut self, list: &str) -> Result<()> {
        for flag in list.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "ca" => self.model.use_ca = false,
                "ta" => self.model.use_ta = false,
                "cgha" => self.model.use_cgha = false,
                "ti" => self.model.use_text = false,
                "mt" => self.train.use_mt = false,
                other => {
                    return Err(Error::invalid(
                        "ablation",
                        format!("unknown flag {other:?} (expected ca, ta, cgha, mt, ti)"),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Whether the classification task contributes to the loss. It needs
    /// both the multi-task switch and entity text.
    pub fn multitask(&self) -> bool {
        self.train.use_mt && self.model.use_text
    }
}

/// One bias-corrected Adam update of every tensor in `params`; `step` counts
/// from 1.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    m: &mut ParamSet,
    v: &mut ParamSet,
    step: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = m.get_mut(name)?.data_mut();
        let v = v.get_mut(name)?.data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            *x -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max`; returns the norm
/// before clipping.
pub fn clip_by_norm(grads: &mut ParamSet, max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Loss of one sample. `mask_rng` draws the classifier's entity mask; `None`
/// disables masking.
pub fn sample_loss(
    g: &Graph,
    params: &BoundParams,
    run: &RunConfig,
    sample: &ImagePairSample,
    class_alpha: &[f64],
    mask_rng: Option<&mut Rng>,
) -> Result<(Var, LossBreakdown)> {
    let net = Network::new(g, params, &run.model, sample.height(), sample.width())?;
    let entities = run.model.use_text.then(|| sample.entity_features());
    let multitask = run.multitask();
    let out = net.forward(
        &sample.ir,
        &sample.vi_y,
        entities.as_ref(),
        ForwardOptions {
            classify: multitask,
            trace: false,
            mask_rng,
        },
    )?;
    let cls = out
        .probs
        .as_ref()
        .map(|p| (p, &sample.label, class_alpha));
    total_loss(
        g,
        &out.fused,
        &sample.ir,
        &sample.vi_y,
        cls,
        params.get("task.w")?,
        &run.loss,
    )
}

/// Total loss of one sample as a function of the parameters, with the
/// classifier's entity mask disabled; for gradient checking.
pub struct SampleObjective<'a> {
    pub run: &'a RunConfig,
    pub sample: &'a ImagePairSample,
    pub class_alpha: &'a [f64],
}

impl Objective for SampleObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let g = Graph::inference();
        let bound = params.bind(&g);
        Ok(sample_loss(&g, &bound, self.run, self.sample, self.class_alpha, None)?.0.item())
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let g = Graph::new();
        let bound = params.bind(&g);
        let (loss, _) = sample_loss(&g, &bound, self.run, self.sample, self.class_alpha, None)?;
        let grads = g.backward(&loss)?;
        Ok((loss.item(), bound.gradients(&grads)))
    }
}

/// Gradient and loss breakdown of the batch-mean loss. Samples may run in
/// parallel; their contributions are summed in batch order.
pub fn batch_gradients(
    params: &ParamSet,
    run: &RunConfig,
    batch: &[&ImagePairSample],
    class_alpha: &[f64],
    mask_rngs: Vec<Option<Rng>>,
) -> Result<(ParamSet, LossBreakdown)> {
    let parts: Vec<Result<(ParamSet, LossBreakdown)>> = batch
        .par_iter()
        .zip(mask_rngs.into_par_iter())
        .map(|(sample, mut rng)| {
            let g = Graph::new();
            let bound = params.bind(&g);
            let (loss, b) = sample_loss(&g, &bound, run, sample, class_alpha, rng.as_mut())?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite(format!("loss of sample {}", sample.id)));
            }
            let grads = g.backward(&loss)?;
            Ok((bound.gradients(&grads), b))
        })
        .collect();
    let n = batch.len() as f64;
    let mut total = params.zeros_like();
    let mut mean = LossBreakdown {
        total: 0.0,
        fusion: 0.0,
        intensity: 0.0,
        edge: 0.0,
        ssim: 0.0,
        classification: 0.0,
        lambda: [0.0; 2],
        w: [0.0; 2],
    };
    for part in parts {
        let (grads, b) = part?;
        total.add_scaled(&grads, 1.0 / n)?;
        mean.total += b.total / n;
        mean.fusion += b.fusion / n;
        mean.intensity += b.intensity / n;
        mean.edge += b.edge / n;
        mean.ssim += b.ssim / n;
        mean.classification += b.classification / n;
        mean.lambda = b.lambda;
        mean.w = b.w;
    }
    Ok((total, mean))
}

/// Parameters, optimizer moments and generator of a run in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub params: ParamSet,
    pub m: ParamSet,
    pub v: ParamSet,
    /// Source of classifier masks.
    pub rng: Rng,
    pub class_alpha: Vec<f64>,
}

impl TrainState {
    /// Fresh state: parameters drawn from the run seed, zero moments.
    pub fn init(run: &RunConfig, samples: &[ImagePairSample]) -> Result<Self> {
        run.validate()?;
        let mut rng = Rng::seed_from_u64(run.train.seed);
        let params = init_params(&run.model, &mut rng);
        let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
        Ok(TrainState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            rng,
            class_alpha: class_weights(&labels)?,
        })
    }

    pub fn to_checkpoint(&self, run: &RunConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: run.model.clone(),
            train: serde_json::to_value(run)?,
            seed: run.train.seed,
            step: self.step,
            rng: Some(self.rng.state()),
            focal_alpha: Some(self.class_alpha.clone()),
            params: self.params.clone(),
            adam_m: Some(self.m.clone()),
            adam_v: Some(self.v.clone()),
        })
    }

    /// Restores a state written by [`TrainState::to_checkpoint`], together
    /// with its run configuration.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, RunConfig)> {
        let bad = |why: &str| Error::Checkpoint(format!("cannot resume: {why}"));
        let run: RunConfig = serde_json::from_value(ck.train.clone())
            .map_err(|e| Error::Checkpoint(format!("cannot resume: training settings: {e}")))?;
        if run.model != ck.model {
            return Err(bad("model configuration disagrees with training settings"));
        }
        let state = TrainState {
            step: ck.step,
            params: ck.params.clone(),
            m: ck.adam_m.clone().ok_or_else(|| bad("no optimizer moments"))?,
            v: ck.adam_v.clone().ok_or_else(|| bad("no optimizer moments"))?,
            rng: Rng::from_state(ck.rng.as_ref().ok_or_else(|| bad("no generator state"))?)?,
            class_alpha: ck.focal_alpha.clone().ok_or_else(|| bad("no class weights"))?,
        };
        Ok((state, run))
    }
}

/// Loss-log columns, one row per optimizer step.
pub const LOG_HEADER: [&str; 11] = [
    "step", "L_total", "L_fus", "L_int", "L_edge", "L_ssim", "L_cla", "lambda1", "lambda2", "w1", "w2",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based index of the step whose pre-update losses are recorded.
    pub step: u64,
    pub loss: LossBreakdown,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let b = &self.loss;
        let vals = [
            b.total, b.fusion, b.intensity, b.edge, b.ssim, b.classification, b.lambda[0], b.lambda[1], b.w[0],
            b.w[1],
        ];
        let mut row = self.step.to_string();
        for v in vals {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }
}

/// Parses a loss log back into rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepLog>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Dataset {
        id: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let bad = |e: String| Error::Dataset {
        id: path.display().to_string(),
        reason: e,
    };
    let header: Vec<String> = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if header != LOG_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(format!("bad number {:?}", &rec[i]))) };
        out.push(StepLog {
            step: rec[0].parse().map_err(|_| bad(format!("bad step {:?}", &rec[0])))?,
            loss: LossBreakdown {
                total: f(1)?,
                fusion: f(2)?,
                intensity: f(3)?,
                edge: f(4)?,
                ssim: f(5)?,
                classification: f(6)?,
                lambda: [f(7)?, f(8)?],
                w: [f(9)?, f(10)?],
            },
        });
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
}

pub const LOG_FILE: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.egck";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.egck"))
}

/// Total optimizer steps of a run over `n` samples.
pub fn total_steps(cfg: &TrainConfig, n: usize) -> u64 {
    cfg.steps.unwrap_or(cfg.epochs * n.div_ceil(cfg.batch) as u64)
}

/// Trains from scratch; see [`train_from`].
pub fn train(samples: &[ImagePairSample], run: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let state = TrainState::init(run, samples)?;
    train_from(samples, run, state, out_dir)
}

/// Runs the remaining steps of `state`. Batches come from
/// [`crate::data_pipeline::batch_iter`] keyed by `(seed, epoch)`, so a run
/// resumed from a checkpoint continues exactly where it stopped. The loss log
/// is appended to, one row per step.
pub fn train_from(
    samples: &[ImagePairSample],
    run: &RunConfig,
    mut state: TrainState,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    run.validate()?;
    let n = samples.len();
    let per_epoch = n.div_ceil(run.train.batch) as u64;
    let total = total_steps(&run.train, n);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file = if state.step == 0 {
        let mut f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{}", LOG_HEADER.join(",")).map_err(|e| Error::io(&log_path, e))?;
        f
    } else {
        OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    };
    let mut log = Vec::new();
    let mut epoch_batches: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step < total {
        let epoch = state.step / per_epoch;
        if epoch_batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let b = crate::data_pipeline::batch_iter(n, run.train.batch, run.train.seed, epoch)?;
            epoch_batches = Some((epoch, b));
        }
        let indices = &epoch_batches.as_ref().expect("set above").1[(state.step % per_epoch) as usize];
        let batch: Vec<&ImagePairSample> = indices.iter().map(|&i| &samples[i]).collect();
        let rngs = batch.iter().map(|_| Some(state.rng.fork())).collect();
        let (mut grads, loss) = batch_gradients(&state.params, run, &batch, &state.class_alpha, rngs)?;
        if let Some(max) = run.train.clip_norm {
            clip_by_norm(&mut grads, max);
        }
        adam_step(&mut state.params, &grads, &mut state.m, &mut state.v, state.step + 1, &run.train)?;
        for set in [&mut state.params, &mut state.m, &mut state.v] {
            set.round_to_f32();
        }
        state.step += 1;
        let row = StepLog {
            step: state.step,
            loss,
        };
        writeln!(log_file, "{}", row.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "step {}/{total} L_total {:.6} L_fus {:.6} L_cla {:.6}",
            state.step,
            loss.total,
            loss.fusion,
            loss.classification
        );
        log.push(row);
        let every = run.train.checkpoint_every;
        if every > 0 && state.step % every == 0 {
            let p = checkpoint_path(out_dir, state.step);
            fs::create_dir_all(p.parent().expect("nested")).map_err(|e| Error::io(&p, e))?;
            state.to_checkpoint(run)?.save(&p)?;
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    state.to_checkpoint(run)?.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        log,
        final_checkpoint,
    })
}

/// Inference forward pass over the whole image. Extents that do not tile
/// into whole windows are reflect-padded on the bottom/right and the fused
/// map is cropped back.
fn infer(
    params: &ParamSet,
    cfg: &ModelConfig,
    sample: &ImagePairSample,
    classify: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (h, w) = (sample.height(), sample.width());
    let p = cfg.patch;
    let (ph, pw) = (h.div_ceil(p) * p - h, w.div_ceil(p) * p - w);
    let ir = pad_reflect(&sample.ir, 0, ph, 0, pw);
    let vi = pad_reflect(&sample.vi_y, 0, ph, 0, pw);
    let g = Graph::inference();
    let bound = params.bind(&g);
    let net = Network::new(&g, &bound, cfg, h + ph, w + pw)?;
    let entities = cfg.use_text.then(|| sample.entity_features());
    let opts = ForwardOptions {
        classify,
        ..ForwardOptions::default()
    };
    let out = net.forward(&ir, &vi, entities.as_ref(), opts)?;
    let fused = crop(out.fused.value(), 0, 0, h, w)?;
    Ok((fused, out.probs.map(|p| p.value().clone())))
}

/// Fused luminance `[1×H×W]`, clamped to `[0, 1]`.
pub fn fuse_image(params: &ParamSet, cfg: &ModelConfig, sample: &ImagePairSample) -> Result<Tensor> {
    let (fused, _) = infer(params, cfg, sample, false)?;
    fused.check_finite(&format!("fused image {}", sample.id))?;
    Ok(fused.map(|v| v.clamp(0.0, 1.0)))
}

/// Per-class probabilities of the classification branch.
pub fn predict_labels(params: &ParamSet, cfg: &ModelConfig, sample: &ImagePairSample) -> Result<[f64; NUM_LABELS]> {
    if !cfg.use_text {
        return Err(Error::invalid("model", "the classifier needs text input (use_text = false)"));
    }
    let (_, probs) = infer(params, cfg, sample, true)?;
    let probs = probs.ok_or_else(|| Error::invalid("model", "no classification output"))?;
    probs.check_finite(&format!("class probabilities of {}", sample.id))?;
    probs
        .data()
        .try_into()
        .map_err(|_| Error::shape("predict_labels", format!("{} probabilities", probs.len())))
}

/// File name of the fused output for sample `id`.
pub fn fused_name(id: &str) -> String {
    format!("{id}_fused.png")
}

/// Fuses every sample with the checkpoint's parameters and writes
/// `<id>_fused.png` under `out_dir`, recoloured with the visible chroma when
/// `color` is set.
pub fn fuse_inference(
    ck: &Checkpoint,
    samples: &[ImagePairSample],
    out_dir: &Path,
    color: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    samples
        .par_iter()
        .map(|s| {
            let fused = fuse_image(&ck.params, &ck.model, s)?;
            let path = out_dir.join(fused_name(&s.id));
            if color && s.vi_cbcr.is_some() {
                save_rgb_png(&path, &recolor(&fused, s.vi_cbcr.as_ref())?)?;
            } else {
                save_gray_png(&path, &fused)?;
            }
            Ok(path)
        })
        .collect()
}
