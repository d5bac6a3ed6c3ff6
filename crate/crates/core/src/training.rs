//! SGD with momentum, the warmup-then-cosine schedule, stage plans with
//! parameter freezing, and the single-stage and three-stage recipes.

use std::collections::BTreeMap;

use glob::Pattern;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::egoaco::EgoAcoModel;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{multitask_loss, Labels, Mode, VideoNet};
use crate::nn::is_no_decay;
use crate::parallel::Parallelism;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{augment, flip_labels, sample_frames, ActionVocab, AugmentConfig, SamplerConfig, VideoClip};

/// Per-epoch learning rate: linear warmup from `base/W`, then half-cosine decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        let s = Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        };
        let errs = s.validate();
        if errs.is_empty() {
            Ok(s)
        } else {
            Err(invalid!("{}", errs.join("; ")))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            errs.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.warmup_epochs >= self.total_epochs {
            errs.push(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        errs
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_at(epoch, self)
    }
}

pub fn lr_at(epoch: usize, s: &LrSchedule) -> Result<f64> {
    if epoch >= s.total_epochs {
        return Err(invalid!("epoch {epoch} outside schedule of {} epochs", s.total_epochs));
    }
    let (w, t) = (s.warmup_epochs, s.total_epochs);
    if epoch < w {
        return Ok(s.base_lr * (epoch + 1) as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (t - w) as f64;
    Ok(0.5 * s.base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Warmup of one sixth of the stage, at least one epoch; none for a
/// single-epoch stage.
pub fn default_warmup(epochs: usize) -> usize {
    if epochs < 2 {
        return 0;
    }
    ((epochs as f64 / 6.0).round() as usize).clamp(1, epochs - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState<S: Scalar = f64> {
    pub cfg: SgdConfig,
    buffers: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<S>> {
        self.buffers.get(name)
    }
}

/// `g' = g + wd·p` (no decay on biases and norm affines), `v ← μ·v + g'`,
/// `p ← p − lr·v`. Parameters without a gradient are left alone.
pub fn sgd_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(shape_err!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            ));
        }
    }
    let mu = S::lit(state.cfg.momentum);
    let lr = S::lit(lr);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let wd = if is_no_decay(name) { S::zero() } else { S::lit(state.cfg.weight_decay) };
        let v = state
            .buffers
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let gd = gv + wd * *pv;
            *vv = mu * *vv + gd;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// Which parameters a stage updates. Patterns are shell-style globs over
/// dotted parameter names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: usize,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub schedule: LrSchedule,
}

impl StagePlan {
    /// Every parameter trainable.
    pub fn full(stage: usize, schedule: LrSchedule) -> Self {
        Self {
            stage,
            trainable: vec!["*".into()],
            frozen: vec![],
            schedule,
        }
    }

    pub fn epochs(&self) -> usize {
        self.schedule.total_epochs
    }

    fn compile(pats: &[String]) -> Result<Vec<Pattern>> {
        pats.iter()
            .map(|p| Pattern::new(p).map_err(|e| invalid!("bad parameter pattern `{p}`: {e}")))
            .collect()
    }

    /// Checks that each parameter matches exactly one of the two sets and
    /// returns the trainable names.
    pub fn resolve<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Vec<String>> {
        let train = Self::compile(&self.trainable)?;
        let frozen = Self::compile(&self.frozen)?;
        let mut errs = Vec::new();
        let mut out = Vec::new();
        for n in names {
            let t = train.iter().any(|p| p.matches(n));
            let f = frozen.iter().any(|p| p.matches(n));
            match (t, f) {
                (true, false) => out.push(n.to_string()),
                (false, true) => {}
                (false, false) => errs.push(format!("parameter `{n}` is neither trainable nor frozen")),
                (true, true) => errs.push(format!("parameter `{n}` is both trainable and frozen")),
            }
        }
        errs.extend(self.schedule.validate());
        if errs.is_empty() {
            Ok(out)
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub sampler: SamplerConfig,
    /// None disables augmentation.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub parallelism: Parallelism,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}

impl TrainOptions {
    pub fn new(sampler: SamplerConfig, seed: u64) -> Self {
        Self {
            batch_size: default_batch(),
            sampler,
            augment: Some(AugmentConfig::default()),
            sgd: SgdConfig::default(),
            parallelism: Parallelism::default(),
            seed,
        }
    }
}

/// One training-log record; `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub verb_acc: f64,
    pub noun_acc: f64,
    pub action_acc: f64,
}

/// Clips plus the action vocabulary used to relabel flipped clips.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub clips: &'a [VideoClip],
    pub vocab: &'a ActionVocab,
}

struct ClipStep<S: Scalar> {
    loss: f64,
    grads: BTreeMap<String, Tensor<S>>,
    hits: [bool; 3],
}

fn stream_rng(seed: u64, stage: usize, epoch: usize, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stage as u64) << 56) ^ ((epoch as u64) << 32));
    rng.set_stream(item);
    rng
}

fn clip_step<S: Scalar, M: VideoNet<S> + ?Sized>(
    model: &M,
    trainable: &dyn Fn(&str) -> bool,
    clip: &VideoClip,
    data: &TrainData<'_>,
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ClipStep<S>> {
    let frames = sample_frames(clip, opts.sampler, rng)?;
    let (frames, labels) = match &opts.augment {
        Some(cfg) => {
            let (f, p) = augment(&frames, rng, cfg);
            let l = if p.flip { flip_labels(clip.labels(), data.vocab) } else { clip.labels() };
            (f, l)
        }
        None => (frames, clip.labels()),
    };
    let tape = Tape::<S>::new();
    let bindings = model.params().bind(&tape, trainable);
    let x = tape.constant(frames.cast());
    let scores = model.forward(&tape, &bindings, x, &mut Mode::Train(rng))?;
    let loss = multitask_loss(&tape, &scores, labels)?;
    let loss_value = tape.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss_value} on clip {}", clip.clip_id)));
    }
    let pred = scores.values(&tape).top1();
    let mut grads = tape.backward(loss)?;
    let grads = bindings.collect_grads(&tape, &mut grads);
    Ok(ClipStep {
        loss: loss_value,
        grads,
        hits: [
            pred.verb == labels.verb,
            pred.noun == labels.noun,
            pred.action == labels.action,
        ],
    })
}

/// Trains the plan's parameters for its full schedule. Frozen parameters are
/// bound as constants and never touched. `on_epoch` sees each log record with
/// the parameters at the end of that epoch.
pub fn run_stage<S: Scalar, M: VideoNet<S> + ?Sized>(
    model: &mut M,
    data: TrainData<'_>,
    plan: &StagePlan,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochLog, &ParamStore<S>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let trainable: std::collections::BTreeSet<String> = plan.resolve(model.params().names())?.into_iter().collect();
    if data.clips.is_empty() {
        return Err(invalid!("no training clips"));
    }
    if opts.batch_size == 0 {
        return Err(invalid!("batch_size must be positive"));
    }
    let is_trainable = |n: &str| trainable.contains(n);
    let mut state = OptimizerState::<S>::new(opts.sgd);
    let mut logs = Vec::with_capacity(plan.epochs());
    for epoch in 0..plan.epochs() {
        let lr = plan.schedule.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..data.clips.len()).collect();
        order.shuffle(&mut stream_rng(opts.seed, plan.stage, epoch, u64::MAX));
        let (mut loss_sum, mut hits) = (0.0, [0usize; 3]);
        for batch in order.chunks(opts.batch_size) {
            let model_ref: &M = model;
            let steps = opts.parallelism.map(batch, |_, &ci| {
                let mut rng = stream_rng(opts.seed, plan.stage, epoch, ci as u64);
                clip_step(model_ref, &is_trainable, &data.clips[ci], &data, opts, &mut rng)
            });
            let mut sum: BTreeMap<String, Tensor<S>> = BTreeMap::new();
            for step in steps {
                let step = step?;
                loss_sum += step.loss;
                for (k, h) in step.hits.iter().enumerate() {
                    hits[k] += *h as usize;
                }
                for (name, g) in step.grads {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let inv = S::one() / S::lit(batch.len() as f64);
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = *v * inv);
            }
            sgd_step(model.params_mut(), &sum, &mut state, lr)?;
        }
        let n = data.clips.len() as f64;
        let log = EpochLog {
            stage: plan.stage,
            epoch: epoch + 1,
            lr,
            loss: loss_sum / n,
            verb_acc: hits[0] as f64 / n,
            noun_acc: hits[1] as f64 / n,
            action_acc: hits[2] as f64 / n,
        };
        on_epoch(&log, model.params())?;
        logs.push(log);
    }
    Ok(logs)
}

/// Epochs and base learning rates of the three EgoACO stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreeStageConfig {
    pub epochs: [usize; 3],
    pub base_lr: [f64; 3],
    /// Defaults to one sixth of each stage.
    #[serde(default)]
    pub warmup: Option<[usize; 3]>,
}

impl ThreeStageConfig {
    /// Full-length recipe: 60/60/30 epochs at 0.01/0.01/1e-4.
    pub fn full() -> Self {
        Self {
            epochs: [60, 60, 30],
            base_lr: [0.01, 0.01, 1e-4],
            warmup: None,
        }
    }

    /// Shortened 10/10/5 schedule with the same learning rates.
    pub fn desk() -> Self {
        Self {
            epochs: [10, 10, 5],
            ..Self::full()
        }
    }

    pub fn schedules(&self) -> Result<[LrSchedule; 3]> {
        let w = self.warmup.unwrap_or(self.epochs.map(default_warmup));
        let mk = |i: usize| LrSchedule::new(self.base_lr[i], w[i], self.epochs[i]);
        Ok([mk(0)?, mk(1)?, mk(2)?])
    }
}

/// Stage plans for an EgoACO model whose trunk has `trunk_blocks` blocks.
/// Stage 1 trains LSTA, the attention layers and the classifier; stage 2 adds
/// the cloned heads; stage 3 adds the last trunk block. The stem is never trained.
pub fn egoaco_stage_plans(trunk_blocks: usize, cfg: &ThreeStageConfig) -> Result<[StagePlan; 3]> {
    let [s1, s2, s3] = cfg.schedules()?;
    let base = ["lsta.*", "ctx_attn.*", "obj_attn.*", "classifier.*"].map(String::from).to_vec();
    let blocks: Vec<String> = (0..trunk_blocks).map(|i| format!("trunk.blocks.{i}.*")).collect();
    let mut stage2 = base.clone();
    stage2.push("heads.*".into());
    let mut stage3 = stage2.clone();
    let mut frozen3 = vec!["trunk.stem.*".to_string()];
    if let Some((last, rest)) = blocks.split_last() {
        stage3.push(last.clone());
        frozen3.extend(rest.iter().cloned());
    }
    Ok([
        StagePlan {
            stage: 1,
            trainable: base,
            frozen: vec!["trunk.*".into(), "heads.*".into()],
            schedule: s1,
        },
        StagePlan {
            stage: 2,
            trainable: stage2,
            frozen: vec!["trunk.*".into()],
            schedule: s2,
        },
        StagePlan {
            stage: 3,
            trainable: stage3,
            frozen: frozen3,
            schedule: s3,
        },
    ])
}

/// Runs the three EgoACO stages in order; the returned model holds the
/// parameters at the last epoch of stage 3.
pub fn three_stage_protocol<S: Scalar>(
    model: &mut EgoAcoModel<S>,
    data: TrainData<'_>,
    cfg: &ThreeStageConfig,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochLog, &ParamStore<S>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let plans = egoaco_stage_plans(model.trunk_len(), cfg)?;
    for p in &plans {
        p.resolve(model.params().names())?;
    }
    let mut logs = Vec::new();
    for p in &plans {
        logs.extend(run_stage(model, data, p, opts, on_epoch)?);
    }
    Ok(logs)
}

/// Single-stage GSN recipe: all parameters, lr 0.01, 60 epochs, warmup 10.
pub fn gsn_recipe() -> StagePlan {
    StagePlan::full(
        1,
        LrSchedule {
            base_lr: 0.01,
            warmup_epochs: 10,
            total_epochs: 60,
        },
    )
}

/// Fraction of correct top-1 predictions per task in eval mode.
pub fn eval_accuracy<S: Scalar, M: VideoNet<S> + ?Sized>(
    model: &M,
    clips: &[VideoClip],
    sampler: SamplerConfig,
    par: Parallelism,
) -> Result<[f64; 3]> {
    let preds = par.map(clips, |_, c| -> Result<Labels> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frames = sample_frames(c, sampler, &mut rng)?;
        Ok(model.predict(&frames.cast())?.top1())
    });
    let mut hits = [0usize; 3];
    for (c, p) in clips.iter().zip(preds) {
        let p = p?;
        hits[0] += (p.verb == c.verb) as usize;
        hits[1] += (p.noun == c.noun) as usize;
        hits[2] += (p.action == c.action) as usize;
    }
    let n = clips.len().max(1) as f64;
    Ok(hits.map(|h| h as f64 / n))
}
