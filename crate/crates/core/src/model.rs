//! Interfaces shared by the two model families.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{Bindings, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward-pass mode. Dropout only fires in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Vocabulary sizes of the three tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadDims {
    pub verbs: usize,
    pub nouns: usize,
    pub actions: usize,
}

impl HeadDims {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, n) in [("verbs", self.verbs), ("nouns", self.nouns), ("actions", self.actions)] {
            if n < 2 {
                errs.push(format!("vocabulary size `{name}` must be at least 2, got {n}"));
            }
        }
        errs
    }
}

/// Ground-truth triple for one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

/// Per-task logit vectors recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ClipScores {
    pub verb: Var,
    pub noun: Var,
    pub action: Var,
}

/// Plain per-task logit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreValues<S = f64> {
    pub verb: Vec<S>,
    pub noun: Vec<S>,
    pub action: Vec<S>,
}

impl ClipScores {
    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> ScoreValues<S> {
        ScoreValues {
            verb: tape.value(self.verb).data().to_vec(),
            noun: tape.value(self.noun).data().to_vec(),
            action: tape.value(self.action).data().to_vec(),
        }
    }
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax<S: Scalar>(scores: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> ScoreValues<S> {
    /// Top-1 predictions (verb, noun, action).
    pub fn top1(&self) -> Labels {
        Labels {
            verb: argmax(&self.verb),
            noun: argmax(&self.noun),
            action: argmax(&self.action),
        }
    }
}

/// Equal-weight sum of the three cross-entropies.
pub fn multitask_loss<S: Scalar>(tape: &Tape<S>, scores: &ClipScores, labels: Labels) -> Result<Var> {
    let v = tape.cross_entropy(scores.verb, labels.verb)?;
    let n = tape.cross_entropy(scores.noun, labels.noun)?;
    let a = tape.cross_entropy(scores.action, labels.action)?;
    tape.add(tape.add(v, n)?, a)
}

/// A clip classifier trained end to end on the tape.
pub trait VideoNet<S: Scalar>: Send + Sync {
    fn params(&self) -> &ParamStore<S>;

    fn params_mut(&mut self) -> &mut ParamStore<S>;

    fn dims(&self) -> HeadDims;

    /// Scores for one clip of T×C×H×W frames.
    fn forward(
        &self,
        tape: &Tape<S>,
        params: &Bindings,
        frames: Var,
        mode: &mut Mode<'_>,
    ) -> Result<ClipScores>;

    /// Applies the classifier at every position of the final feature map and
    /// averages the score map. Only defined for spatially collapsible heads.
    fn forward_fully_conv(
        &self,
        _tape: &Tape<S>,
        _params: &Bindings,
        _frames: Var,
    ) -> Result<ClipScores> {
        Err(invalid!("this model's classifier is not spatially collapsible"))
    }

    /// Smallest frame side the network accepts.
    fn min_input_side(&self) -> usize {
        1
    }

    fn predict(&self, frames: &Tensor<S>) -> Result<ScoreValues<S>> {
        let tape = Tape::new();
        let params = self.params().bind(&tape, &|_| false);
        let x = tape.constant(frames.clone());
        Ok(self.forward(&tape, &params, x, &mut Mode::Eval)?.values(&tape))
    }

    fn predict_fully_conv(&self, frames: &Tensor<S>) -> Result<ScoreValues<S>> {
        let tape = Tape::new();
        let params = self.params().bind(&tape, &|_| false);
        let x = tape.constant(frames.clone());
        Ok(self.forward_fully_conv(&tape, &params, x)?.values(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(tape: &Tape<f64>, v: Vec<f64>, n: Vec<f64>, a: Vec<f64>) -> ClipScores {
        ClipScores {
            verb: tape.constant(Tensor::from_vec(v)),
            noun: tape.constant(Tensor::from_vec(n)),
            action: tape.constant(Tensor::from_vec(a)),
        }
    }

    #[test]
    fn uniform_scores_give_log_vocab_sizes() {
        let tape = Tape::new();
        let s = scores(&tape, vec![0.0; 4], vec![0.0; 3], vec![0.0; 12]);
        let labels = Labels { verb: 1, noun: 2, action: 7 };
        let loss = tape.value(multitask_loss(&tape, &s, labels).unwrap()).item();
        let expect = 4f64.ln() + 3f64.ln() + 12f64.ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn confident_scores_give_vanishing_loss() {
        let tape = Tape::new();
        let s = scores(&tape, vec![200.0, 0.0], vec![0.0, 200.0], vec![200.0, 0.0]);
        let labels = Labels { verb: 0, noun: 1, action: 0 };
        let loss = tape.value(multitask_loss(&tape, &s, labels).unwrap()).item();
        assert!(loss < 1e-80);
    }

    #[test]
    fn two_class_hand_example() {
        // CE([0, ln 3], 1) = -ln(3/4); CE([1, 1], 0) = ln 2; CE([ln 2, 0], 0) = -ln(2/3)
        let tape = Tape::new();
        let s = scores(&tape, vec![0.0, 3f64.ln()], vec![1.0, 1.0], vec![2f64.ln(), 0.0]);
        let labels = Labels { verb: 1, noun: 0, action: 0 };
        let loss = tape.value(multitask_loss(&tape, &s, labels).unwrap()).item();
        let expect = -(0.75f64).ln() + 2f64.ln() - (2.0f64 / 3.0).ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let tape = Tape::new();
        let s = scores(&tape, vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]);
        let labels = Labels { verb: 2, noun: 0, action: 0 };
        assert!(multitask_loss(&tape, &s, labels).is_err());
    }
}
