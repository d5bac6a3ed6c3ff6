//! Gate-Shift Network: the desk-scale trunk with a GSM in every block, global
//! average pooling over time and space, and the multi-task classifier.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{self, BackboneConfig, Block};
use crate::egoaco::MultiTaskHead;
use crate::error::{shape_err, Error, Result};
use crate::model::{ClipScores, HeadDims, Mode, VideoNet};
use crate::nn;
use crate::params::{Bindings, Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsnConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    pub dims: HeadDims,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.5
}

impl GsnConfig {
    pub fn new(backbone: BackboneConfig, dims: HeadDims) -> Self {
        Self {
            backbone,
            dims,
            dropout: default_dropout(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.backbone.validate();
        errs.extend(self.dims.validate());
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        errs
    }

    /// Same configuration with every GSM removed.
    pub fn ablated(&self) -> Self {
        Self {
            backbone: self.backbone.same_without_gsm(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GsnModel<S: Scalar = f64> {
    cfg: GsnConfig,
    blocks: Vec<Block>,
    head: MultiTaskHead,
    params: ParamStore<S>,
}

/// Builds a GSN with seeded weights and zero gates.
pub fn build_gsn<S: Scalar>(cfg: &GsnConfig, seed: u64) -> Result<GsnModel<S>> {
    GsnModel::new(cfg.clone(), seed)
}

impl<S: Scalar> GsnModel<S> {
    pub fn new(cfg: GsnConfig, seed: u64) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let blocks = cfg.backbone.blocks()?;
        let c = cfg.backbone.out_channels();
        let head = MultiTaskHead::new(cfg.dims, c, c, c, "classifier");
        let init = Init::new(seed);
        let mut params = ParamStore::new();
        backbone::init_stem(&cfg.backbone, &mut params, &init, "trunk.stem");
        for (i, b) in blocks.iter().enumerate() {
            let name = format!("trunk.blocks.{i}");
            b.init(&mut params, &init, &name, &name);
        }
        head.init(&mut params, &init);
        Ok(Self {
            cfg,
            blocks,
            head,
            params,
        })
    }

    pub fn config(&self) -> &GsnConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &MultiTaskHead {
        &self.head
    }

    /// Temporally pooled final feature map, 1×C×h×w.
    pub fn pooled_map(&self, tape: &Tape<S>, params: &Bindings, frames: Var) -> Result<Var> {
        let t = tape.shape(frames)[0];
        if t == 0 {
            return Err(shape_err!("clip has no frames"));
        }
        let mut x = backbone::forward_stem(&self.cfg.backbone, tape, params, "trunk.stem", frames)?;
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.forward(tape, params, &format!("trunk.blocks.{i}"), x, t)?;
        }
        let s = tape.shape(x);
        let pooled = nn::avg_pool_temporal(tape, x)?;
        tape.reshape(pooled, &[1, s[1], s[2], s[3]])
    }
}

impl<S: Scalar> VideoNet<S> for GsnModel<S> {
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
        let map = self.pooled_map(tape, params, frames)?;
        let c = tape.shape(map)[1];
        let mut d = tape.reshape(nn::avg_pool_spatial(tape, map)?, &[c])?;
        if let Mode::Train(rng) = mode {
            d = nn::dropout(tape, d, self.cfg.dropout, &mut **rng)?;
        }
        self.head.classify(tape, params, d, d, d)
    }

    fn forward_fully_conv(&self, tape: &Tape<S>, params: &Bindings, frames: Var) -> Result<ClipScores> {
        let map = self.pooled_map(tape, params, frames)?;
        self.head.classify_map(tape, params, map)
    }

    fn min_input_side(&self) -> usize {
        self.cfg.backbone.total_stride()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GsnConfig {
        GsnConfig::new(
            BackboneConfig::default(),
            HeadDims {
                verbs: 5,
                nouns: 3,
                actions: 15,
            },
        )
    }

    #[test]
    fn parameter_count_adds_gate_kernels() {
        let with = build_gsn::<f64>(&cfg(), 0).unwrap();
        let without = build_gsn::<f64>(&cfg().ablated(), 0).unwrap();
        // gates over 8, 16, 16 channels: 2·(c/2)·9 + 2 each
        let gates = (8 * 9 + 2) + (16 * 9 + 2) + (16 * 9 + 2);
        assert_eq!(with.params().numel(), without.params().numel() + gates);
        let summed: usize = with.blocks().iter().map(|b| b.gsm.unwrap().param_count()).sum();
        assert_eq!(summed, gates);
    }

    #[test]
    fn fresh_gsn_matches_ablated_backbone() {
        let a = build_gsn::<f64>(&cfg(), 3).unwrap();
        let b = build_gsn::<f64>(&cfg().ablated(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clip = Tensor::randn([4, 3, 16, 16], 1.0, &mut rng);
        let sa = a.predict(&clip).unwrap();
        let sb = b.predict(&clip).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn same_seed_builds_are_identical() {
        let a = build_gsn::<f64>(&cfg(), 5).unwrap();
        let b = build_gsn::<f64>(&cfg(), 5).unwrap();
        assert_eq!(a.params().checksum(|_| true), b.params().checksum(|_| true));
        let c = build_gsn::<f64>(&cfg(), 6).unwrap();
        assert_ne!(a.params().checksum(|_| true), c.params().checksum(|_| true));
    }

    #[test]
    fn odd_channels_rejected() {
        let mut c = cfg();
        c.backbone.block_channels = vec![8, 7];
        assert!(build_gsn::<f64>(&c, 0).is_err());
    }

    #[test]
    fn one_by_one_map_fully_conv_is_bitwise_standard() {
        let mut c = cfg();
        c.backbone.block_strides = vec![2, 2, 2];
        let m = build_gsn::<f64>(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = Tensor::randn([3, 3, 16, 16], 1.0, &mut rng);
        assert_eq!(m.predict(&clip).unwrap(), m.predict_fully_conv(&clip).unwrap());
    }
}
