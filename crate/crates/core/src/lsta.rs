//! LSTA: a convolutional LSTM with recurrent spatial attention on its input
//! and an output gate biased by a pooled view of its memory.
//!
//! One step on input `x_t` (C_in×H×W) and state `(c, h, a)`:
//!
//! ```text
//! a_t  = softmax_hw( conv_attn([x_t; h]) + λ·ln(a + 1e-8) )
//! x̃_t  = a_t ⊙ x_t
//! z    = [x̃_t; h]
//! c_t  = σ(conv_f z) ⊙ c + σ(conv_i z) ⊙ tanh(conv_g z)
//! s_t  = softmax(P · mean_hw(c_t))          P: prototypes, pooling_classes × C_m
//! w_t  = s_tᵀ P
//! o_t  = σ(conv_o z + w_t)
//! h_t  = o_t ⊙ tanh(c_t)
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::ConvGeom;
use crate::nn;
use crate::params::{Bindings, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to attention before taking its log.
pub const ATTENTION_LOG_EPS: f64 = 1e-8;

/// Full-scale memory size used with large backbones.
pub const PAPER_MEMORY_SIZE: usize = 512;
/// Full-scale number of output pooling classes.
pub const PAPER_POOLING_CLASSES: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstaConfig {
    #[serde(default = "default_memory")]
    pub memory_size: usize,
    #[serde(default = "default_pooling")]
    pub pooling_classes: usize,
    /// λ: weight of the previous attention map's log in the new logits.
    #[serde(default = "default_coupling")]
    pub attention_coupling: f64,
}

fn default_memory() -> usize {
    16
}

fn default_pooling() -> usize {
    8
}

fn default_coupling() -> f64 {
    1.0
}

impl Default for LstaConfig {
    fn default() -> Self {
        Self {
            memory_size: default_memory(),
            pooling_classes: default_pooling(),
            attention_coupling: default_coupling(),
        }
    }
}

impl LstaConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.memory_size == 0 {
            errs.push("lsta.memory_size must be positive".into());
        }
        if self.pooling_classes == 0 {
            errs.push("lsta.pooling_classes must be positive".into());
        }
        if !self.attention_coupling.is_finite() {
            errs.push("lsta.attention_coupling must be finite".into());
        }
        errs
    }
}

const GATES: [&str; 4] = ["gate_i", "gate_f", "gate_g", "gate_o"];

#[derive(Clone, Debug, PartialEq)]
pub struct LstaCell {
    pub input_channels: usize,
    pub cfg: LstaConfig,
    prefix: String,
}

/// Recurrent state; every tensor carries a leading batch dim of 1.
#[derive(Clone, Copy, Debug)]
pub struct LstaState {
    /// 1×C_m×H×W
    pub memory: Var,
    /// 1×C_m×H×W
    pub hidden: Var,
    /// 1×1×H×W, a spatial distribution.
    pub attention: Var,
}

impl LstaCell {
    pub fn new(input_channels: usize, cfg: LstaConfig, prefix: impl Into<String>) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(invalid!("{}", errs.join("; ")));
        }
        if input_channels == 0 {
            return Err(invalid!("LSTA input channel count must be positive"));
        }
        Ok(Self {
            input_channels,
            cfg,
            prefix: prefix.into(),
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<S: Scalar>(&self, store: &mut ParamStore<S>, init: &Init) {
        let z = self.input_channels + self.cfg.memory_size;
        for g in GATES {
            nn::init_conv(store, init, &self.name(g), &self.name(g), self.cfg.memory_size, z, 3);
        }
        nn::init_conv(store, init, &self.name("attn"), &self.name("attn"), 1, z, 3);
        let p = self.cfg.pooling_classes;
        let m = self.cfg.memory_size;
        store.insert(
            self.name("prototypes"),
            init.normal(&self.name("prototypes"), &[p, m], 1.0 / (m as f64).sqrt()),
        );
    }

    /// Zero memory and hidden state with a uniform attention map.
    pub fn zero_state<S: Scalar>(&self, tape: &Tape<S>, h: usize, w: usize) -> LstaState {
        let m = self.cfg.memory_size;
        LstaState {
            memory: tape.constant(Tensor::zeros([1, m, h, w])),
            hidden: tape.constant(Tensor::zeros([1, m, h, w])),
            attention: tape.constant(Tensor::full([1, 1, h, w], S::lit(1.0 / (h * w) as f64))),
        }
    }

    fn check_input<S: Scalar>(&self, tape: &Tape<S>, x_t: Var, state: &LstaState) -> Result<()> {
        let xs = tape.shape(x_t);
        let hs = tape.shape(state.hidden);
        if xs.len() != 4 || xs[0] != 1 || xs[1] != self.input_channels {
            return Err(shape_err!(
                "LSTA expects a 1×{}×H×W frame, got {:?}",
                self.input_channels,
                xs
            ));
        }
        if xs[2..] != hs[2..] {
            return Err(shape_err!(
                "LSTA frame spatial shape {:?} differs from state {:?}",
                &xs[2..],
                &hs[2..]
            ));
        }
        Ok(())
    }

    /// Spatial attention map for `x_t` given the previous state.
    pub fn attend<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        x_t: Var,
        state: &LstaState,
    ) -> Result<Var> {
        self.check_input(tape, x_t, state)?;
        let z = tape.concat(&[x_t, state.hidden], 1)?;
        let mut logits = nn::conv(tape, params, &self.name("attn"), z, ConvGeom::same(3))?;
        let lambda = self.cfg.attention_coupling;
        if lambda != 0.0 {
            let prev = tape.ln(tape.add_scalar(state.attention, S::lit(ATTENTION_LOG_EPS)));
            logits = tape.add(logits, tape.scale(prev, S::lit(lambda)))?;
        }
        nn::softmax_spatial(tape, logits)
    }

    /// Output-gate channel bias from the spatial mean of the memory, 1×C_m×1×1.
    pub fn output_gate_bias<S: Scalar>(&self, tape: &Tape<S>, params: &Bindings, memory: Var) -> Result<Var> {
        let m = self.cfg.memory_size;
        let pooled = nn::avg_pool_spatial(tape, memory)?;
        let prototypes = params.get(&self.name("prototypes"))?;
        let logits = tape.linear(pooled, prototypes, None)?;
        let weights = tape.softmax(logits, self.cfg.pooling_classes)?;
        let w = tape.matmul(weights, prototypes)?;
        tape.reshape(w, &[1, m, 1, 1])
    }

    /// One recurrent step; returns the new state (whose `hidden` is h_t).
    pub fn step<S: Scalar>(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        x_t: Var,
        state: &LstaState,
    ) -> Result<LstaState> {
        let attention = self.attend(tape, params, x_t, state)?;
        let xs = tape.shape(x_t);
        let attended = tape.mul(tape.expand(attention, &xs)?, x_t)?;
        let z = tape.concat(&[attended, state.hidden], 1)?;
        let gate = |name: &str| nn::conv(tape, params, &self.name(name), z, ConvGeom::same(3));
        let i = tape.sigmoid(gate("gate_i")?);
        let f = tape.sigmoid(gate("gate_f")?);
        let g = tape.tanh(gate("gate_g")?);
        let memory = tape.add(tape.mul(f, state.memory)?, tape.mul(i, g)?)?;
        let ms = tape.shape(memory);
        let bias = tape.expand(self.output_gate_bias(tape, params, memory)?, &ms)?;
        let o = tape.sigmoid(tape.add(gate("gate_o")?, bias)?);
        let hidden = tape.mul(o, tape.tanh(memory))?;
        Ok(LstaState {
            memory,
            hidden,
            attention,
        })
    }

    /// Runs the cell over a T×C_in×H×W sequence from the zero state and
    /// returns the per-step states.
    pub fn unroll<S: Scalar>(&self, tape: &Tape<S>, params: &Bindings, x: Var) -> Result<Vec<LstaState>> {
        let s = tape.shape(x);
        if s.len() != 4 {
            return Err(shape_err!("LSTA sequence must be T×C×H×W, got {:?}", s));
        }
        if s[0] == 0 {
            return Err(invalid!("LSTA aggregation over an empty sequence"));
        }
        let mut state = self.zero_state(tape, s[2], s[3]);
        let mut states = Vec::with_capacity(s[0]);
        for t in 0..s[0] {
            let x_t = tape.narrow(x, 0, t, 1)?;
            state = self.step(tape, params, x_t, &state)?;
            states.push(state);
        }
        Ok(states)
    }

    /// Action descriptor: spatial mean of the final hidden state, length C_m.
    pub fn aggregate<S: Scalar>(&self, tape: &Tape<S>, params: &Bindings, x: Var) -> Result<Var> {
        let states = self.unroll(tape, params, x)?;
        let last = states.last().expect("non-empty sequence");
        let pooled = nn::avg_pool_spatial(tape, last.hidden)?;
        tape.reshape(pooled, &[self.cfg.memory_size])
    }
}
