//! Desk-scale 2D CNN trunk: a strided stem followed by blocks of
//! {3×3 conv, affine norm, relu, optional GSM}.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::gsm::GsmLayer;
use crate::kernels::ConvGeom;
use crate::nn;
use crate::params::{Bindings, Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem_channels: usize,
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    pub block_channels: Vec<usize>,
    /// Per-block conv stride; empty means all 1.
    #[serde(default = "default_block_strides")]
    pub block_strides: Vec<usize>,
    /// Insert a GSM after every block.
    #[serde(default = "default_true")]
    pub gsm: bool,
    /// Frames are standardized as `(x - input_mean) / input_std` before the stem.
    #[serde(default = "default_input_mean")]
    pub input_mean: f64,
    #[serde(default = "default_input_std")]
    pub input_std: f64,
}

fn default_in_channels() -> usize {
    3
}

fn default_stem_stride() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_block_strides() -> Vec<usize> {
    vec![1, 2, 2]
}

fn default_input_mean() -> f64 {
    0.45
}

fn default_input_std() -> f64 {
    0.25
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            stem_stride: 2,
            block_channels: vec![8, 16, 16],
            block_strides: default_block_strides(),
            gsm: true,
            input_mean: default_input_mean(),
            input_std: default_input_std(),
        }
    }
}

/// One {conv, norm, relu, gsm?} block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub gsm: Option<GsmLayer>,
}

impl Block {
    pub fn init<S: Scalar>(&self, store: &mut ParamStore<S>, init: &Init, prefix: &str, init_key: &str) {
        nn::init_conv(
            store,
            init,
            &format!("{prefix}.conv"),
            &format!("{init_key}.conv"),
            self.c_out,
            self.c_in,
            3,
        );
        nn::init_affine_norm(store, &format!("{prefix}.norm"), self.c_out);
        if let Some(gsm) = &self.gsm {
            gsm.init(store, &format!("{prefix}.gsm"));
        }
    }

    /// `x` is (B·T)×C×H×W, frames of each clip contiguous.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        prefix: &str,
        x: Var,
        frames: usize,
    ) -> Result<Var> {
        let y = nn::conv(tape, params, &format!("{prefix}.conv"), x, ConvGeom::new(self.stride, 1))?;
        let y = nn::affine_norm(tape, params, &format!("{prefix}.norm"), y)?;
        let y = tape.relu(y);
        match &self.gsm {
            None => Ok(y),
            Some(gsm) => {
                let s = tape.shape(y);
                if !s[0].is_multiple_of(frames) {
                    return Err(shape_err!(
                        "batch of {} frames is not a multiple of clip length {}",
                        s[0],
                        frames
                    ));
                }
                let clip = tape.reshape(y, &[s[0] / frames, frames, s[1], s[2], s[3]])?;
                let out = gsm.forward(tape, params, &format!("{prefix}.gsm"), clip)?;
                tape.reshape(out, &s)
            }
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.in_channels == 0 {
            errs.push("backbone.in_channels must be positive".into());
        }
        if self.stem_channels == 0 || !self.stem_channels.is_multiple_of(2) {
            errs.push(format!(
                "backbone.stem_channels must be even and positive, got {}",
                self.stem_channels
            ));
        }
        if self.stem_stride == 0 {
            errs.push("backbone.stem_stride must be positive".into());
        }
        if self.block_channels.is_empty() {
            errs.push("backbone.block_channels must list at least one block".into());
        }
        for (i, &c) in self.block_channels.iter().enumerate() {
            if c == 0 || c % 2 != 0 {
                errs.push(format!("backbone.block_channels[{i}] must be even and positive, got {c}"));
            }
        }
        if !self.block_strides.is_empty() && self.block_strides.len() != self.block_channels.len() {
            errs.push(format!(
                "backbone.block_strides has {} entries for {} blocks",
                self.block_strides.len(),
                self.block_channels.len()
            ));
        }
        if !self.input_mean.is_finite() || !(self.input_std.is_finite() && self.input_std > 0.0) {
            errs.push(format!(
                "backbone input standardization needs a finite mean and positive std, got {} and {}",
                self.input_mean, self.input_std
            ));
        }
        if self.block_strides.contains(&0) {
            errs.push("backbone.block_strides entries must be positive".into());
        }
        errs
    }

    pub fn blocks(&self) -> Result<Vec<Block>> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(invalid!("{}", errs.join("; ")));
        }
        let mut c_in = self.stem_channels;
        self.block_channels
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let block = Block {
                    c_in,
                    c_out,
                    stride: self.block_strides.get(i).copied().unwrap_or(1),
                    gsm: if self.gsm { Some(GsmLayer::new(c_out)?) } else { None },
                };
                c_in = c_out;
                Ok(block)
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.stem_channels)
    }

    /// Total downsampling factor of the trunk.
    pub fn total_stride(&self) -> usize {
        self.stem_stride * self.block_strides.iter().product::<usize>()
    }

    pub fn same_without_gsm(&self) -> Self {
        Self {
            gsm: false,
            ..self.clone()
        }
    }
}

pub fn init_stem<S: Scalar>(cfg: &BackboneConfig, store: &mut ParamStore<S>, init: &Init, prefix: &str) {
    nn::init_conv(store, init, prefix, "stem", cfg.stem_channels, cfg.in_channels, 3);
}

/// Standardization, stem conv and relu over a T×C×H×W frame batch.
pub fn forward_stem<S: Scalar>(
    cfg: &BackboneConfig,
    tape: &Tape<S>,
    params: &Bindings,
    prefix: &str,
    frames: Var,
) -> Result<Var> {
    let s = tape.shape(frames);
    if s.len() != 4 || s[1] != cfg.in_channels {
        return Err(shape_err!(
            "backbone expects T×{}×H×W frames, got {:?}",
            cfg.in_channels,
            s
        ));
    }
    let x = tape.add_scalar(frames, S::lit(-cfg.input_mean));
    let x = tape.scale(x, S::lit(1.0 / cfg.input_std));
    let y = nn::conv(tape, params, prefix, x, ConvGeom::new(cfg.stem_stride, 1))?;
    Ok(tape.relu(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_channels_are_reported_together() {
        let cfg = BackboneConfig {
            stem_channels: 7,
            block_channels: vec![8, 5],
            block_strides: vec![1],
            input_std: 0.0,
            ..Default::default()
        };
        let errs = cfg.validate();
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(cfg.blocks().is_err());
    }

    #[test]
    fn default_chain() {
        let blocks = BackboneConfig::default().blocks().unwrap();
        let chans: Vec<_> = blocks.iter().map(|b| (b.c_in, b.c_out)).collect();
        assert_eq!(chans, vec![(8, 8), (8, 16), (16, 16)]);
    }
}
