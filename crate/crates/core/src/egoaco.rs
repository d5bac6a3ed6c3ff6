//! EgoACO: three clip descriptors from three cloned backbone heads, and the
//! multi-task verb/noun/action classifier shared with the GSN family.
//!
//! - `d_act`: LSTA aggregation of the action head's feature sequence.
//! - `d_ctx`: per-frame spatial attention pooling, averaged over time.
//! - `d_obj`: spatial attention pooling whose logits are coupled to the running
//!   mean of earlier attention maps, averaged over time.
//!
//! Verbs are predicted from `d_act`, nouns from `d_obj`, actions from all three
//! concatenated; action logits feed the verb and noun logits through learned
//! linear bias maps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{self, BackboneConfig, Block};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::ConvGeom;
use crate::lsta::{LstaCell, LstaConfig};
use crate::model::{ClipScores, HeadDims, Mode, VideoNet};
use crate::nn;
use crate::params::{Bindings, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear classifiers for the three tasks plus action-to-verb/noun bias maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskHead {
    pub dims: HeadDims,
    pub verb_in: usize,
    pub noun_in: usize,
    pub action_in: usize,
    prefix: String,
}

impl MultiTaskHead {
    pub fn new(dims: HeadDims, verb_in: usize, noun_in: usize, action_in: usize, prefix: &str) -> Self {
        Self {
            dims,
            verb_in,
            noun_in,
            action_in,
            prefix: prefix.to_string(),
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Bias maps start at zero so the three classifiers begin decoupled.
    pub fn init<S: Scalar>(&self, store: &mut ParamStore<S>, init: &Init) {
        let d = self.dims;
        for (part, k, width) in [
            ("action", d.actions, self.action_in),
            ("verb", d.verbs, self.verb_in),
            ("noun", d.nouns, self.noun_in),
        ] {
            let w = self.name(&format!("{part}.weight"));
            store.insert(w.clone(), init.linear(&w, k, width));
            store.insert(self.name(&format!("{part}.bias")), Tensor::zeros([k]));
        }
        store.insert(self.name("verb_from_action.weight"), Tensor::zeros([d.verbs, d.actions]));
        store.insert(self.name("noun_from_action.weight"), Tensor::zeros([d.nouns, d.actions]));
    }

    fn row<S: Scalar>(tape: &Tape<S>, v: Var, width: usize, what: &str) -> Result<Var> {
        let s = tape.shape(v);
        if s.iter().product::<usize>() != width || s.len() > 2 || (s.len() == 2 && s[0] != 1) {
            return Err(shape_err!("{} input has shape {:?}, expected [{}]", what, s, width));
        }
        tape.reshape(v, &[1, width])
    }

    /// `s_a = W_a·d_action + b_a`, `s_v = W_v·d_verb + b_v + B_v·s_a`,
    /// `s_n = W_n·d_noun + b_n + B_n·s_a`.
    pub fn classify<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        d_verb: Var,
        d_noun: Var,
        d_action: Var,
    ) -> Result<ClipScores> {
        let xa = Self::row(tape, d_action, self.action_in, "action classifier")?;
        let xv = Self::row(tape, d_verb, self.verb_in, "verb classifier")?;
        let xn = Self::row(tape, d_noun, self.noun_in, "noun classifier")?;
        let p = |n: &str| params.get(&self.name(n));
        let action = tape.linear(xa, p("action.weight")?, Some(p("action.bias")?))?;
        let verb = tape.add(
            tape.linear(xv, p("verb.weight")?, Some(p("verb.bias")?))?,
            tape.linear(action, p("verb_from_action.weight")?, None)?,
        )?;
        let noun = tape.add(
            tape.linear(xn, p("noun.weight")?, Some(p("noun.bias")?))?,
            tape.linear(action, p("noun_from_action.weight")?, None)?,
        )?;
        let d = self.dims;
        Ok(ClipScores {
            verb: tape.reshape(verb, &[d.verbs])?,
            noun: tape.reshape(noun, &[d.nouns])?,
            action: tape.reshape(action, &[d.actions])?,
        })
    }

    /// Classifier applied as 1×1 convolutions at every position of a 1×C×h×w
    /// map (all three inputs equal), then spatially averaged.
    pub fn classify_map<S: Scalar>(&self, tape: &Tape<S>, params: &Bindings, map: Var) -> Result<ClipScores> {
        let s = tape.shape(map);
        if s.len() != 4 || s[0] != 1 {
            return Err(shape_err!("classify_map expects 1×C×h×w, got {:?}", s));
        }
        let c = s[1];
        if self.verb_in != c || self.noun_in != c || self.action_in != c {
            return Err(invalid!("classifier inputs differ, head is not spatially collapsible"));
        }
        let d = self.dims;
        let p = |n: &str| params.get(&self.name(n));
        let as_kernel = |w: Var, k: usize, width: usize| tape.reshape(w, &[k, width, 1, 1]);
        let one = ConvGeom::default();
        let action = tape.conv2d(
            map,
            as_kernel(p("action.weight")?, d.actions, c)?,
            Some(p("action.bias")?),
            one,
        )?;
        let verb = tape.add(
            tape.conv2d(map, as_kernel(p("verb.weight")?, d.verbs, c)?, Some(p("verb.bias")?), one)?,
            tape.conv2d(action, as_kernel(p("verb_from_action.weight")?, d.verbs, d.actions)?, None, one)?,
        )?;
        let noun = tape.add(
            tape.conv2d(map, as_kernel(p("noun.weight")?, d.nouns, c)?, Some(p("noun.bias")?), one)?,
            tape.conv2d(action, as_kernel(p("noun_from_action.weight")?, d.nouns, d.actions)?, None, one)?,
        )?;
        let pool = |v: Var, k: usize| -> Result<Var> {
            let pooled = nn::avg_pool_spatial(tape, v)?;
            tape.reshape(pooled, &[k])
        };
        Ok(ClipScores {
            verb: pool(verb, d.verbs)?,
            noun: pool(noun, d.nouns)?,
            action: pool(action, d.actions)?,
        })
    }

    pub fn classify_descriptors<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        d: &DescriptorSet,
    ) -> Result<ClipScores> {
        let cat = tape.concat(&[d.act, d.ctx, d.obj], 0)?;
        self.classify(tape, params, d.act, d.obj, cat)
    }
}

/// The three clip descriptors, each a 1-D value on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DescriptorSet {
    pub act: Var,
    pub ctx: Var,
    pub obj: Var,
}

fn check_sequence<S: Scalar>(tape: &Tape<S>, x: Var, what: &str) -> Result<Vec<usize>> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(shape_err!("{} expects a T×C×H×W sequence, got {:?}", what, s));
    }
    if s[0] == 0 {
        return Err(invalid!("{} over an empty sequence", what));
    }
    Ok(s)
}

/// Attention-weighted spatial sum per frame (T×1×H×W maps over T×C×H×W
/// features), averaged over time.
fn attention_pool<S: Scalar>(tape: &Tape<S>, x: Var, maps: Var) -> Result<Var> {
    let s = tape.shape(x);
    let weighted = tape.mul(tape.expand(maps, &s)?, x)?;
    let flat = tape.reshape(weighted, &[s[0], s[1], s[2] * s[3]])?;
    let per_frame = tape.sum_axis(flat, 2)?;
    nn::avg_pool_temporal(tape, per_frame)
}

/// Scene-context descriptor from independent per-frame attention.
pub fn encode_context<S: Scalar>(tape: &Tape<S>, params: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    check_sequence(tape, x, "encode_context")?;
    let logits = nn::conv(tape, params, prefix, x, ConvGeom::same(3))?;
    let maps = nn::softmax_spatial(tape, logits)?;
    attention_pool(tape, x, maps)
}

/// Active-object descriptor. For t > 1 the logits are
/// `½·conv(x_t) + ½·ln(mean(a_1..a_{t-1}))`, so a constant sequence keeps the
/// first frame's map as a fixed point. Returns the descriptor and the maps.
pub fn encode_object_with_maps<S: Scalar>(
    tape: &Tape<S>,
    params: &Bindings,
    prefix: &str,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let s = check_sequence(tape, x, "encode_object")?;
    let logits = nn::conv(tape, params, prefix, x, ConvGeom::same(3))?;
    let half = S::lit(0.5);
    let mut maps = Vec::with_capacity(s[0]);
    let mut running_sum: Option<Var> = None;
    for t in 0..s[0] {
        let z = tape.narrow(logits, 0, t, 1)?;
        let z = match running_sum {
            None => z,
            Some(sum) => {
                let mean = tape.scale(sum, S::one() / S::lit(t as f64));
                tape.add(tape.scale(z, half), tape.scale(tape.ln(mean), half))?
            }
        };
        let a = nn::softmax_spatial(tape, z)?;
        running_sum = Some(match running_sum {
            None => a,
            Some(sum) => tape.add(sum, a)?,
        });
        maps.push(a);
    }
    let stacked = if maps.len() == 1 { maps[0] } else { tape.concat(&maps, 0)? };
    let d = attention_pool(tape, x, stacked)?;
    Ok((d, maps))
}

pub fn encode_object<S: Scalar>(tape: &Tape<S>, params: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    Ok(encode_object_with_maps(tape, params, prefix, x)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoAcoConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub lsta: LstaConfig,
    pub dims: HeadDims,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.5
}

impl EgoAcoConfig {
    /// Desk-scale defaults; the trunk downsamples to a 4×4 map for 32×32 input.
    pub fn desk(dims: HeadDims) -> Self {
        Self {
            backbone: BackboneConfig {
                gsm: false,
                ..BackboneConfig::default()
            },
            lsta: LstaConfig::default(),
            dims,
            dropout: default_dropout(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.backbone.validate();
        errs.extend(self.lsta.validate());
        errs.extend(self.dims.validate());
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        errs
    }
}

/// Names of the three cloned heads.
pub const HEADS: [&str; 3] = ["act", "ctx", "obj"];

#[derive(Clone, Debug)]
pub struct EgoAcoModel<S: Scalar = f64> {
    cfg: EgoAcoConfig,
    trunk: Vec<Block>,
    head_block: Block,
    lsta: LstaCell,
    head: MultiTaskHead,
    params: ParamStore<S>,
}

impl<S: Scalar> EgoAcoModel<S> {
    pub fn new(cfg: EgoAcoConfig, seed: u64) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(crate::Error::Config(errs));
        }
        let mut blocks = cfg.backbone.blocks()?;
        let head_block = blocks.pop().expect("validated non-empty");
        let c_f = head_block.c_out;
        let c_m = cfg.lsta.memory_size;
        let lsta = LstaCell::new(c_f, cfg.lsta, "lsta")?;
        let head = MultiTaskHead::new(cfg.dims, c_m, c_f, c_m + 2 * c_f, "classifier");

        let init = Init::new(seed);
        let mut params = ParamStore::new();
        backbone::init_stem(&cfg.backbone, &mut params, &init, "trunk.stem");
        for (i, b) in blocks.iter().enumerate() {
            let name = format!("trunk.blocks.{i}");
            b.init(&mut params, &init, &name, &name);
        }
        // The top block is cloned: all three heads draw from the same stream.
        let clone_key = format!("trunk.blocks.{}", blocks.len());
        for h in HEADS {
            head_block.init(&mut params, &init, &format!("heads.{h}"), &clone_key);
        }
        lsta.init(&mut params, &init);
        nn::init_conv(&mut params, &init, "ctx_attn", "ctx_attn", 1, c_f, 3);
        nn::init_conv(&mut params, &init, "obj_attn", "obj_attn", 1, c_f, 3);
        head.init(&mut params, &init);
        Ok(Self {
            cfg,
            trunk: blocks,
            head_block,
            lsta,
            head,
            params,
        })
    }

    pub fn config(&self) -> &EgoAcoConfig {
        &self.cfg
    }

    pub fn head(&self) -> &MultiTaskHead {
        &self.head
    }

    pub fn lsta(&self) -> &LstaCell {
        &self.lsta
    }

    pub fn trunk_len(&self) -> usize {
        self.trunk.len()
    }

    /// Runs trunk and heads, returning the three descriptors.
    pub fn descriptors(&self, tape: &Tape<S>, params: &Bindings, frames: Var) -> Result<DescriptorSet> {
        let t = tape.shape(frames)[0];
        let mut x = backbone::forward_stem(&self.cfg.backbone, tape, params, "trunk.stem", frames)?;
        for (i, b) in self.trunk.iter().enumerate() {
            x = b.forward(tape, params, &format!("trunk.blocks.{i}"), x, t)?;
        }
        let head = |h: &str| self.head_block.forward(tape, params, &format!("heads.{h}"), x, t);
        let act = self.lsta.aggregate(tape, params, head("act")?)?;
        let ctx = encode_context(tape, params, "ctx_attn", head("ctx")?)?;
        let obj = encode_object(tape, params, "obj_attn", head("obj")?)?;
        Ok(DescriptorSet { act, ctx, obj })
    }
}

impl<S: Scalar> VideoNet<S> for EgoAcoModel<S> {
    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn dims(&self) -> HeadDims {
        self.cfg.dims
    }

    fn forward(&self, tape: &Tape<S>, params: &Bindings, frames: Var, mode: &mut Mode<'_>) -> Result<ClipScores> {
        let mut d = self.descriptors(tape, params, frames)?;
        if let Mode::Train(rng) = mode {
            let p = self.cfg.dropout;
            d.act = nn::dropout(tape, d.act, p, &mut **rng)?;
            d.ctx = nn::dropout(tape, d.ctx, p, &mut **rng)?;
            d.obj = nn::dropout(tape, d.obj, p, &mut **rng)?;
        }
        self.head.classify_descriptors(tape, params, &d)
    }

    fn min_input_side(&self) -> usize {
        self.cfg.backbone.total_stride()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: HeadDims = HeadDims {
        verbs: 4,
        nouns: 3,
        actions: 12,
    };

    fn head_store(head: &MultiTaskHead, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        head.init(&mut store, &Init::new(seed));
        store
    }

    #[test]
    fn score_shapes_follow_vocabulary() {
        let head = MultiTaskHead::new(DIMS, 5, 6, 17, "classifier");
        let store = head_store(&head, 0);
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let d = DescriptorSet {
            act: tape.constant(Tensor::ones([5])),
            ctx: tape.constant(Tensor::ones([6])),
            obj: tape.constant(Tensor::ones([6])),
        };
        let s = head.classify_descriptors(&tape, &p, &d).unwrap();
        assert_eq!(tape.shape(s.verb), vec![4]);
        assert_eq!(tape.shape(s.noun), vec![3]);
        assert_eq!(tape.shape(s.action), vec![12]);
        let wrong = DescriptorSet {
            act: tape.constant(Tensor::ones([4])),
            ..d
        };
        assert!(head.classify_descriptors(&tape, &p, &wrong).is_err());
    }

    #[test]
    fn bias_maps_shift_verb_scores_linearly() {
        let head = MultiTaskHead::new(DIMS, 3, 3, 3, "c");
        let mut store = head_store(&head, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        store.insert("c.verb_from_action.weight", Tensor::randn([4, 12], 1.0, &mut rng));
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let d = tape.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let s = head.classify(&tape, &p, d, d, d).unwrap();
        let sa = tape.value(s.action);
        let sv = tape.value(s.verb);
        // s_v - B_v·s_a must not depend on s_a.
        let bv = store.get("c.verb_from_action.weight").unwrap();
        let direct = crate::kernels::linear(
            &Tensor::new([1, 3], vec![0.5, -1.0, 2.0]).unwrap(),
            store.get("c.verb.weight").unwrap(),
            Some(store.get("c.verb.bias").unwrap()),
        )
        .unwrap();
        for k in 0..4 {
            let coupling: f64 = (0..12).map(|j| bv.data()[k * 12 + j] * sa.data()[j]).sum();
            assert!((sv.data()[k] - direct.data()[k] - coupling).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_bias_maps_decouple_tasks() {
        let head = MultiTaskHead::new(DIMS, 3, 3, 3, "c");
        let store = head_store(&head, 1);
        let run = |action_bias: f64| {
            let mut s = store.clone();
            s.get_mut("c.action.bias").unwrap().data_mut().fill(action_bias);
            let tape = Tape::new();
            let p = s.bind(&tape, &|_| false);
            let d = tape.constant(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
            let out = head.classify(&tape, &p, d, d, d).unwrap();
            (tape.value(out.verb).data().to_vec(), tape.value(out.noun).data().to_vec())
        };
        assert_eq!(run(0.0), run(5.0));
    }

    fn attn_store(prefix: &str, c: usize, seed: u64, zero: bool) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        nn::init_conv(&mut store, &Init::new(seed), prefix, prefix, 1, c, 3);
        if zero {
            for (_, t) in store.iter_mut() {
                t.data_mut().fill(0.0);
            }
        }
        store
    }

    #[test]
    fn uniform_context_attention_is_global_average() {
        let store = attn_store("a", 3, 0, true);
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = Tensor::randn([4, 3, 2, 5], 1.0, &mut rng);
        let x = tape.constant(xt.clone());
        let d = tape.value(encode_context(&tape, &p, "a", x).unwrap());
        for c in 0..3 {
            let mut sum = 0.0;
            for t in 0..4 {
                sum += xt.data()[(t * 3 + c) * 10..(t * 3 + c + 1) * 10].iter().sum::<f64>();
            }
            assert!((d.data()[c] - sum / 40.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_context_attention_selects_position() {
        let mut store = attn_store("a", 2, 0, true);
        // Large bias-free logit at (1, 2) via a single input channel of ones at that spot.
        store.get_mut("a.weight").unwrap().data_mut()[4] = 1.0; // centre tap of channel 0
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let mut x = Tensor::zeros([1, 2, 3, 4]);
        x.data_mut()[4 + 2] = 800.0; // channel 0, (1, 2)
        x.data_mut()[12 + 4 + 2] = -3.5; // channel 1, (1, 2)
        let d = tape.value(encode_context(&tape, &p, "a", tape.constant(x)).unwrap());
        assert_eq!(d.data(), &[800.0, -3.5]);
    }

    #[test]
    fn context_ignores_frame_order() {
        let store = attn_store("a", 3, 7, false);
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([3, 3, 3, 3], 1.0, &mut rng);
        let frames: Vec<_> = (0..3).map(|t| x.index0(t).unwrap()).collect();
        let rev = Tensor::stack(&[frames[2].clone(), frames[0].clone(), frames[1].clone()]).unwrap();
        let a = tape.value(encode_context(&tape, &p, "a", tape.constant(x)).unwrap());
        let b = tape.value(encode_context(&tape, &p, "a", tape.constant(rev)).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn single_frame_object_equals_context() {
        let store = attn_store("a", 3, 5, false);
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.constant(Tensor::randn([1, 3, 4, 4], 1.0, &mut rng));
        let a = tape.value(encode_context(&tape, &p, "a", x).unwrap());
        let b = tape.value(encode_object(&tape, &p, "a", x).unwrap());
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn constant_sequence_is_object_fixed_point() {
        let store = attn_store("a", 3, 6, false);
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame = Tensor::randn([3, 4, 4], 1.0, &mut rng);
        let seq = Tensor::stack(&vec![frame.clone(); 6]).unwrap();
        let single = Tensor::stack(&[frame]).unwrap();
        let (d_seq, maps) = encode_object_with_maps(&tape, &p, "a", tape.constant(seq)).unwrap();
        let d_one = encode_object(&tape, &p, "a", tape.constant(single)).unwrap();
        assert!(tape.value(d_seq).max_abs_diff(&tape.value(d_one)) < 1e-12);
        let first = tape.value(maps[0]);
        for m in &maps[1..] {
            assert!(tape.value(*m).max_abs_diff(&first) < 1e-14);
        }
    }

    #[test]
    fn empty_sequences_rejected() {
        let store = attn_store("a", 3, 6, false);
        let tape = Tape::new();
        let p = store.bind(&tape, &|_| false);
        let x = tape.constant(Tensor::zeros([0, 3, 4, 4]));
        assert!(encode_context(&tape, &p, "a", x).is_err());
        assert!(encode_object(&tape, &p, "a", x).is_err());
    }

    #[test]
    fn cloned_heads_start_identical() {
        let model = EgoAcoModel::<f64>::new(EgoAcoConfig::desk(DIMS), 11).unwrap();
        let p = model.params();
        for part in ["conv.weight", "conv.bias", "norm.scale"] {
            let a = p.get(&format!("heads.act.{part}")).unwrap();
            assert!(a.bit_eq(p.get(&format!("heads.ctx.{part}")).unwrap()));
            assert!(a.bit_eq(p.get(&format!("heads.obj.{part}")).unwrap()));
        }
    }
}
