//! Gate-Shift Module.
//!
//! A GSM takes a B×T×C×H×W feature map `y`, computes one tanh gating plane
//! per channel group from a 3×3 convolution, splits `y` into a gated part and
//! a residual, shifts the gated part of group 0 forward in time and that of
//! group 1 backward (zero-filling the vacated frame), and adds the residual
//! back. With zero gate weights it is the identity, so a freshly built
//! network behaves exactly like its per-frame 2D counterpart.

use crate::autograd::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::ConvGeom;
use crate::params::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of channel groups; group 0 shifts forward, group 1 backward.
pub const GROUP_COUNT: usize = 2;
pub const GATE_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GsmLayer {
    channels: usize,
}

impl GsmLayer {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(GROUP_COUNT) {
            return Err(invalid!(
                "GSM needs a positive channel count divisible by {GROUP_COUNT}, got {channels}"
            ));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn group_channels(&self) -> usize {
        self.channels / GROUP_COUNT
    }

    /// Gate kernel plus per-group bias.
    pub fn param_count(&self) -> usize {
        GROUP_COUNT * self.group_channels() * GATE_KERNEL * GATE_KERNEL + GROUP_COUNT
    }

    /// Zero-initialized gate parameters under `{prefix}.gate`.
    pub fn init<S: Scalar>(&self, store: &mut ParamStore<S>, prefix: &str) {
        store.insert(
            format!("{prefix}.gate.weight"),
            Tensor::zeros([GROUP_COUNT, self.group_channels(), GATE_KERNEL, GATE_KERNEL]),
        );
        store.insert(format!("{prefix}.gate.bias"), Tensor::zeros([GROUP_COUNT]));
    }

    /// Splits `y` into `(gated, residual)` with `gated + residual == y`.
    pub fn spatial_gate<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        prefix: &str,
        y: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(y);
        if shape.len() != 5 {
            return Err(shape_err!("GSM expects B×T×C×H×W, got {:?}", shape));
        }
        let (b, t, c, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        if c != self.channels {
            return Err(shape_err!(
                "GSM built for {} channels received {} (input {:?})",
                self.channels,
                c,
                shape
            ));
        }
        let frames = tape.reshape(y, &[b * t, c, h, w])?;
        // Grouped conv: one output plane per channel group.
        let logits = tape.conv2d(
            frames,
            params.get(&format!("{prefix}.gate.weight"))?,
            Some(params.get(&format!("{prefix}.gate.bias"))?),
            ConvGeom::same(GATE_KERNEL).with_groups(GROUP_COUNT),
        )?;
        let planes = tape.tanh(logits);
        let cg = self.group_channels();
        let mut per_group = Vec::with_capacity(GROUP_COUNT);
        for g in 0..GROUP_COUNT {
            let plane = tape.narrow(planes, 1, g, 1)?;
            per_group.push(tape.expand(plane, &[b * t, cg, h, w])?);
        }
        let gate = tape.concat(&per_group, 1)?;
        let gate = tape.reshape(gate, &shape)?;
        let scaled = tape.mul(gate, y)?;
        let residual = tape.sub(y, scaled)?;
        // |gate| <= 1, so `y - residual` is exact and `gated + residual == y`
        // holds bitwise, not just up to rounding.
        let gated = tape.sub(y, residual)?;
        Ok((gated, residual))
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        prefix: &str,
        y: Var,
    ) -> Result<Var> {
        let (gated, residual) = self.spatial_gate(tape, params, prefix, y)?;
        let shifted = group_shift(tape, gated)?;
        tape.add(shifted, residual)
    }
}

/// Shifts the first half of the channels forward in time (`out[t] = in[t-1]`)
/// and the second half backward (`out[t] = in[t+1]`), zero-filling at the clip
/// boundary.
pub fn group_shift<S: Scalar>(tape: &Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 5 {
        return Err(shape_err!("group_shift expects B×T×C×H×W, got {:?}", shape));
    }
    let c = shape[2];
    let half = c / GROUP_COUNT;
    tape.temporal_shift(x, 0..half, half..c)
}
