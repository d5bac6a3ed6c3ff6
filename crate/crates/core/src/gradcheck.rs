//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{OpKind, Tape, Var};
use crate::backbone::{self, BackboneConfig, Block};
use crate::egoaco::{self, EgoAcoConfig, EgoAcoModel, MultiTaskHead};
use crate::error::Result;
use crate::gsm::{self, GsmLayer};
use crate::gsn::{GsnConfig, GsnModel};
use crate::kernels::ConvGeom;
use crate::lsta::{LstaCell, LstaConfig};
use crate::model::{multitask_loss, HeadDims, Labels, Mode, VideoNet};
use crate::nn;
use crate::params::{Bindings, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Coordinates probed per input tensor (all of them when the tensor is smaller).
    pub coords: usize,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-5,
            coords: 20,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst probe.
    pub worst: (usize, usize, f64, f64),
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences, perturbing every input in turn.
///
/// `fault` perturbs one adjoint in the analytic pass (negative control).
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let tape = Tape::new();
    tape.inject_adjoint_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ hash(name));
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = inputs[i].len();
        let coords: Vec<usize> = if n <= cfg.coords {
            (0..n).collect()
        } else {
            (0..cfg.coords).map(|_| rng.random_range(0..n)).collect()
        };
        for k in coords {
            let orig = probe[i].data()[k];
            probe[i].data_mut()[k] = orig + cfg.eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[k] = orig - cfg.eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = (i, k, a, numeric);
            }
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

/// Checks the multi-task loss of a whole model with respect to every
/// parameter tensor and the input frames, in eval mode.
pub fn check_model<M: VideoNet<f64> + ?Sized>(
    name: &str,
    model: &M,
    frames: &Tensor<f64>,
    labels: Labels,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let mut inputs = names
        .iter()
        .map(|n| model.params().get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    inputs.push(frames.clone());
    let f = |tape: &Tape<f64>, vars: &[Var]| -> Result<Var> {
        let params: Bindings = names.iter().cloned().zip(vars.iter().copied()).collect();
        let scores = model.forward(tape, &params, vars[names.len()], &mut Mode::Eval)?;
        multitask_loss(tape, &scores, labels)
    };
    check(name, &inputs, f, cfg, fault)
}

/// Full models exercised by [`model_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gsn,
    EgoAco,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gsn => "model/gsn",
            ModelKind::EgoAco => "model/egoaco",
        }
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values at least 0.05 away from zero, so kinks stay out of the stencil.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(w ⊙ v)` with fixed pseudo-random weights, so every output element
/// gets a distinct adjoint.
fn project(tape: &Tape<f64>, v: Var, salt: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ salt);
    let w = tape.constant(randn(&tape.shape(v), &mut rng));
    Ok(tape.sum(tape.mul(v, w)?))
}

fn jitter(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// Checks a layer whose parameters live in `store` plus extra free inputs.
fn check_layer<F>(
    name: &str,
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    f: F,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Bindings, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra);
    let g = |tape: &Tape<f64>, vars: &[Var]| -> Result<Var> {
        let params: Bindings = names.iter().cloned().zip(vars.iter().copied()).collect();
        f(tape, &params, &vars[names.len()..])
    };
    check(name, &inputs, g, cfg, fault)
}

/// Every differentiable primitive and every composite layer at tiny shapes.
pub fn layer_suite(cfg: &GradCheckConfig, fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let mut op = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        let salt = hash(name);
        let g = |t: &Tape<f64>, v: &[Var]| project(t, f(t, v)?, salt);
        out.push(check(name, &inputs, g, cfg, fault)?);
        Ok(())
    };
    let r = &mut rng;
    op("op/add", vec![randn(&[2, 3], r), randn(&[2, 3], r)], &|t, v| t.add(v[0], v[1]))?;
    op("op/sub", vec![randn(&[2, 3], r), randn(&[2, 3], r)], &|t, v| t.sub(v[0], v[1]))?;
    op("op/mul", vec![randn(&[2, 3], r), randn(&[2, 3], r)], &|t, v| t.mul(v[0], v[1]))?;
    op("op/scale", vec![randn(&[4], r)], &|t, v| Ok(t.scale(v[0], -1.75)))?;
    op("op/add_scalar", vec![randn(&[4], r)], &|t, v| Ok(t.add_scalar(v[0], 0.5)))?;
    op("op/tanh", vec![randn(&[5], r)], &|t, v| Ok(t.tanh(v[0])))?;
    op("op/sigmoid", vec![randn(&[5], r)], &|t, v| Ok(t.sigmoid(v[0])))?;
    op("op/relu", vec![off_zero(&[6], r)], &|t, v| Ok(t.relu(v[0])))?;
    op("op/exp", vec![randn(&[5], r)], &|t, v| Ok(t.exp(v[0])))?;
    let pos = randn(&[5], r).map(|x| x.abs() + 0.2);
    op("op/ln", vec![pos], &|t, v| Ok(t.ln(v[0])))?;
    op(
        "op/conv2d",
        vec![randn(&[2, 4, 5, 5], r), randn(&[6, 2, 3, 3], r), randn(&[6], r)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 1).with_groups(2)),
    )?;
    op(
        "op/conv2d_1x1",
        vec![randn(&[1, 3, 2, 3], r), randn(&[4, 3, 1, 1], r)],
        &|t, v| t.conv2d(v[0], v[1], None, ConvGeom::default()),
    )?;
    op(
        "op/linear",
        vec![randn(&[2, 3], r), randn(&[4, 3], r), randn(&[4], r)],
        &|t, v| t.linear(v[0], v[1], Some(v[2])),
    )?;
    op("op/matmul", vec![randn(&[2, 3], r), randn(&[3, 4], r)], &|t, v| t.matmul(v[0], v[1]))?;
    op("op/expand", vec![randn(&[1, 3, 1], r)], &|t, v| t.expand(v[0], &[2, 3, 4]))?;
    op("op/reshape", vec![randn(&[2, 6], r)], &|t, v| t.reshape(v[0], &[3, 4]))?;
    op("op/narrow", vec![randn(&[3, 5], r)], &|t, v| t.narrow(v[0], 1, 1, 3))?;
    op(
        "op/concat",
        vec![randn(&[2, 2], r), randn(&[2, 3], r)],
        &|t, v| t.concat(&[v[0], v[1]], 1),
    )?;
    op(
        "op/temporal_shift",
        vec![randn(&[2, 3, 4, 2, 2], r)],
        &|t, v| t.temporal_shift(v[0], 0..2, 2..4),
    )?;
    op("op/softmax", vec![randn(&[3, 4], r)], &|t, v| t.softmax(v[0], 4))?;
    op("op/log_softmax", vec![randn(&[3, 4], r)], &|t, v| t.log_softmax(v[0], 4))?;
    op("op/sum_axis", vec![randn(&[2, 3, 4], r)], &|t, v| t.sum_axis(v[0], 1))?;
    op("op/mean_axis", vec![randn(&[2, 3, 4], r)], &|t, v| t.mean_axis(v[0], 2))?;
    op("op/sum", vec![randn(&[2, 3], r)], &|t, v| Ok(t.sum(v[0])))?;
    op("op/cross_entropy", vec![randn(&[5], r)], &|t, v| t.cross_entropy(v[0], 3))?;
    op("layer/softmax_spatial", vec![randn(&[2, 1, 3, 3], r)], &|t, v| nn::softmax_spatial(t, v[0]))?;
    op("layer/avg_pool_spatial", vec![randn(&[2, 3, 2, 3], r)], &|t, v| nn::avg_pool_spatial(t, v[0]))?;
    op("layer/avg_pool_temporal", vec![randn(&[3, 2, 2, 2], r)], &|t, v| nn::avg_pool_temporal(t, v[0]))?;
    op("layer/group_shift", vec![randn(&[1, 4, 4, 2, 2], r)], &|t, v| gsm::group_shift(t, v[0]))?;
    op("layer/dropout", vec![randn(&[10], r)], &|t, v| {
        nn::dropout(t, v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(3))
    })?;

    let init = Init::new(cfg.seed);
    let mut layer = |name: &str,
                     build: &dyn Fn(&mut ParamStore<f64>),
                     extra: Vec<Tensor<f64>>,
                     f: &dyn Fn(&Tape<f64>, &Bindings, &[Var]) -> Result<Var>|
     -> Result<()> {
        let mut store = ParamStore::new();
        build(&mut store);
        jitter(&mut store, cfg.seed ^ hash(name), 0.3);
        let salt = hash(name);
        let g = |t: &Tape<f64>, p: &Bindings, v: &[Var]| project(t, f(t, p, v)?, salt);
        out.push(check_layer(name, &store, extra, g, cfg, fault)?);
        Ok(())
    };

    layer(
        "layer/affine_norm",
        &|s| nn::init_affine_norm(s, "n", 3),
        vec![randn(&[2, 3, 2, 2], r)],
        &|t, p, v| nn::affine_norm(t, p, "n", v[0]),
    )?;
    let bb = BackboneConfig {
        stem_channels: 4,
        block_channels: vec![4],
        block_strides: vec![1],
        ..BackboneConfig::default()
    };
    layer(
        "layer/stem",
        &|s| backbone::init_stem(&bb, s, &init, "stem"),
        vec![Tensor::uniform([2, 3, 6, 6], 0.0, 1.0, r)],
        &|t, p, v| backbone::forward_stem(&bb, t, p, "stem", v[0]),
    )?;
    let g = GsmLayer::new(4)?;
    layer(
        "layer/gsm",
        &|s| g.init(s, "g"),
        vec![randn(&[1, 3, 4, 3, 3], r)],
        &|t, p, v| g.forward(t, p, "g", v[0]),
    )?;
    let block = Block {
        c_in: 2,
        c_out: 4,
        stride: 2,
        gsm: Some(g),
    };
    layer(
        "layer/block",
        &|s| block.init(s, &init, "b", "b"),
        vec![randn(&[3, 2, 5, 5], r)],
        &|t, p, v| block.forward(t, p, "b", v[0], 3),
    )?;
    let lsta = LstaCell::new(
        3,
        LstaConfig {
            memory_size: 4,
            pooling_classes: 3,
            attention_coupling: 1.0,
        },
        "lsta",
    )?;
    layer(
        "layer/lsta",
        &|s| lsta.init(s, &init),
        vec![randn(&[3, 3, 3, 3], r)],
        &|t, p, v| lsta.aggregate(t, p, v[0]),
    )?;
    layer(
        "layer/context_attention",
        &|s| nn::init_conv(s, &init, "ctx", "ctx", 1, 3, 3),
        vec![randn(&[3, 3, 3, 3], r)],
        &|t, p, v| egoaco::encode_context(t, p, "ctx", v[0]),
    )?;
    layer(
        "layer/object_attention",
        &|s| nn::init_conv(s, &init, "obj", "obj", 1, 3, 3),
        vec![randn(&[3, 3, 3, 3], r)],
        &|t, p, v| egoaco::encode_object(t, p, "obj", v[0]),
    )?;
    let dims = HeadDims {
        verbs: 3,
        nouns: 2,
        actions: 4,
    };
    let head = MultiTaskHead::new(dims, 3, 2, 5, "h");
    let scores_sum = |t: &Tape<f64>, s: crate::model::ClipScores| -> Result<Var> {
        let cat = t.concat(&[s.verb, s.noun, s.action], 0)?;
        Ok(cat)
    };
    layer(
        "layer/multitask_head",
        &|s| head.init(s, &init),
        vec![randn(&[3], r), randn(&[2], r), randn(&[5], r)],
        &|t, p, v| scores_sum(t, head.classify(t, p, v[0], v[1], v[2])?),
    )?;
    let square = MultiTaskHead::new(dims, 3, 3, 3, "h");
    layer(
        "layer/multitask_head_map",
        &|s| square.init(s, &init),
        vec![randn(&[1, 3, 2, 3], r)],
        &|t, p, v| scores_sum(t, square.classify_map(t, p, v[0])?),
    )?;
    let labels = Labels {
        verb: 1,
        noun: 0,
        action: 3,
    };
    layer(
        "layer/multitask_loss",
        &|s| head.init(s, &init),
        vec![randn(&[3], r), randn(&[2], r), randn(&[5], r)],
        &|t, p, v| multitask_loss(t, &head.classify(t, p, v[0], v[1], v[2])?, labels),
    )?;
    Ok(out)
}

/// The multi-task loss of a tiny instance of each family against every
/// parameter tensor and the input frames.
pub fn model_suite(kind: ModelKind, cfg: &GradCheckConfig, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let dims = HeadDims {
        verbs: 3,
        nouns: 2,
        actions: 4,
    };
    let backbone = BackboneConfig {
        stem_channels: 4,
        block_channels: vec![4, 6, 4],
        block_strides: vec![1, 2, 1],
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ hash(kind.name()));
    let frames = Tensor::uniform([3, 3, 8, 8], 0.0, 1.0, &mut rng);
    let labels = Labels {
        verb: 2,
        noun: 1,
        action: 0,
    };
    match kind {
        ModelKind::Gsn => {
            let mut m = GsnModel::<f64>::new(GsnConfig::new(backbone, dims), cfg.seed)?;
            jitter(m.params_mut(), cfg.seed ^ 1, 0.1);
            check_model(kind.name(), &m, &frames, labels, cfg, fault)
        }
        ModelKind::EgoAco => {
            let ec = EgoAcoConfig {
                backbone: BackboneConfig { gsm: false, ..backbone },
                lsta: LstaConfig {
                    memory_size: 4,
                    pooling_classes: 3,
                    attention_coupling: 1.0,
                },
                dims,
                dropout: 0.5,
            };
            let mut m = EgoAcoModel::<f64>::new(ec, cfg.seed)?;
            jitter(m.params_mut(), cfg.seed ^ 2, 0.1);
            check_model(kind.name(), &m, &frames, labels, cfg, fault)
        }
    }
}

fn hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_fault_is_caught() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let f = |t: &Tape<f64>, v: &[Var]| -> Result<Var> {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(t.tanh(sq)))
        };
        let cfg = GradCheckConfig::default();
        let ok = check("quad", &[x.clone()], f, &cfg, None).unwrap();
        assert!(ok.passed, "{ok:?}");
        let bad = check("quad", &[x], f, &cfg, Some(OpKind::Tanh)).unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn every_layer_passes() {
        let cfg = GradCheckConfig::default();
        for r in layer_suite(&cfg, None).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }
}
