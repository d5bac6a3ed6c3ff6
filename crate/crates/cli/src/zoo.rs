//! Model construction from run configs and checkpoints.

use std::path::{Path, PathBuf};

use egoshift::autograd::{Tape, Var};
use egoshift::checkpoint::Checkpoint;
use egoshift::config::Precision;
use egoshift::egoaco::{EgoAcoConfig, EgoAcoModel};
use egoshift::gsn::{GsnConfig, GsnModel};
use egoshift::model::{ClipScores, HeadDims, Mode, VideoNet};
use egoshift::videodata::ActionVocab;
use egoshift::{Bindings, Error, ParamStore, Result, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum ModelSpec {
    #[serde(rename = "gsn")]
    Gsn { config: GsnConfig },
    #[serde(rename = "egoaco")]
    EgoAco { config: EgoAcoConfig },
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Gsn { .. } => "gsn",
            ModelSpec::EgoAco { .. } => "egoaco",
        }
    }

    pub fn build<S: Scalar>(&self, seed: u64) -> Result<AnyModel<S>> {
        Ok(match self {
            ModelSpec::Gsn { config } => AnyModel::Gsn(GsnModel::new(config.clone(), seed)?),
            ModelSpec::EgoAco { config } => AnyModel::EgoAco(EgoAcoModel::new(config.clone(), seed)?),
        })
    }
}

pub enum AnyModel<S: Scalar> {
    Gsn(GsnModel<S>),
    EgoAco(EgoAcoModel<S>),
}

impl<S: Scalar> AnyModel<S> {
    fn net(&self) -> &dyn VideoNet<S> {
        match self {
            AnyModel::Gsn(m) => m,
            AnyModel::EgoAco(m) => m,
        }
    }
}

impl<S: Scalar> VideoNet<S> for AnyModel<S> {
    fn params(&self) -> &ParamStore<S> {
        self.net().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        match self {
            AnyModel::Gsn(m) => m.params_mut(),
            AnyModel::EgoAco(m) => m.params_mut(),
        }
    }

    fn dims(&self) -> HeadDims {
        self.net().dims()
    }

    fn forward(&self, tape: &Tape<S>, params: &Bindings, frames: Var, mode: &mut Mode<'_>) -> Result<ClipScores> {
        self.net().forward(tape, params, frames, mode)
    }

    fn forward_fully_conv(&self, tape: &Tape<S>, params: &Bindings, frames: Var) -> Result<ClipScores> {
        self.net().forward_fully_conv(tape, params, frames)
    }

    fn min_input_side(&self) -> usize {
        self.net().min_input_side()
    }
}

/// Everything needed to rebuild a model and run inference, stored next to
/// the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub precision: Precision,
    pub vocab: ActionVocab,
    pub num_frames: usize,
    pub frame_size: [usize; 2],
    pub stage: usize,
    pub epoch: usize,
    pub seed: u64,
    pub manifest: PathBuf,
}

impl CheckpointMeta {
    pub fn to_checkpoint<S: Scalar>(&self, params: &ParamStore<S>) -> Checkpoint {
        Checkpoint::new(params, serde_json::to_value(self).expect("metadata serializes"))
    }

    pub fn from_checkpoint(c: &Checkpoint, path: &Path) -> Result<Self> {
        serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Format(format!("{}: checkpoint metadata: {e}", path.display())))
    }
}

/// Model rebuilt from a checkpoint in the precision it was trained in.
pub fn restore<S: Scalar>(ckpt: &Checkpoint, meta: &CheckpointMeta) -> Result<AnyModel<S>> {
    let mut model = meta.model.build::<S>(meta.seed)?;
    ckpt.restore_into(model.params_mut())?;
    Ok(model)
}
