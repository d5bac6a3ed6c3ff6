//! Synthetic moving-shape videos, segment frame sampling and clip-consistent
//! augmentation, plus the on-disk manifest and raw clip tensor format.
//!
//! Each clip shows one shape (square, cross, bar) over a textured noisy
//! background, moving left, right, up, down or not at all with toroidal
//! wrap-around. Start positions are uniform on the torus, so every single
//! frame has the same distribution whatever the direction.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};
use crate::model::{HeadDims, Labels};
use crate::parallel::Parallelism;
use crate::tensor::Tensor;

pub const VERB_NAMES: [&str; 5] = ["left", "right", "up", "down", "static"];
pub const NOUN_NAMES: [&str; 3] = ["square", "cross", "bar"];
const SHAPE_SIZE: usize = 7;
const SEEN_TEXTURES: Range<u64> = 0..4;
const UNSEEN_TEXTURES: Range<u64> = 4..8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestS1,
    TestS2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestS1, Split::TestS2];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestS1 => "test_s1",
            Split::TestS2 => "test_s2",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::TestS1 => 1,
            Split::TestS2 => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| invalid!("unknown split `{s}` (expected train, test_s1 or test_s2)"))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled clip; `frames` is T_raw×3×H×W with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub split: Split,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    pub frames: Tensor<f32>,
}

impl VideoClip {
    pub fn labels(&self) -> Labels {
        Labels {
            verb: self.verb,
            noun: self.noun,
            action: self.action,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_verbs")]
    pub verbs: usize,
    #[serde(default = "d_nouns")]
    pub nouns: usize,
    /// Std of the per-frame pixel noise.
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    #[serde(default = "d_s1")]
    pub test_s1_fraction: f64,
    #[serde(default = "d_s2")]
    pub test_s2_fraction: f64,
}

fn d_side() -> usize {
    32
}
fn d_frames() -> usize {
    40
}
fn d_verbs() -> usize {
    5
}
fn d_nouns() -> usize {
    3
}
fn d_noise() -> f64 {
    0.03
}
fn d_s1() -> f64 {
    0.2
}
fn d_s2() -> f64 {
    0.1
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: d_side(),
            width: d_side(),
            frames: d_frames(),
            verbs: d_verbs(),
            nouns: d_nouns(),
            noise_std: d_noise(),
            test_s1_fraction: d_s1(),
            test_s2_fraction: d_s2(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.verbs < 2 || self.verbs > VERB_NAMES.len() {
            errs.push(format!("synth.verbs must lie in 2..={}, got {}", VERB_NAMES.len(), self.verbs));
        }
        if self.nouns < 2 || self.nouns > NOUN_NAMES.len() {
            errs.push(format!("synth.nouns must lie in 2..={}, got {}", NOUN_NAMES.len(), self.nouns));
        }
        if self.height < SHAPE_SIZE || self.width < SHAPE_SIZE {
            errs.push(format!("synth frame side must be at least {SHAPE_SIZE}"));
        }
        if self.frames == 0 {
            errs.push("synth.frames must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            errs.push(format!("synth.noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        let (a, b) = (self.test_s1_fraction, self.test_s2_fraction);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a + b > 1.0 {
            errs.push(format!("split fractions {a} + {b} must be non-negative and sum to at most 1"));
        }
        errs
    }

    pub fn pair_count(&self) -> usize {
        self.verbs * self.nouns
    }

    /// Clip counts per split for a dataset of `n` clips.
    pub fn split_sizes(&self, n: usize) -> [(Split, usize); 3] {
        let s1 = (n as f64 * self.test_s1_fraction).round() as usize;
        let s2 = ((n as f64 * self.test_s2_fraction).round() as usize).min(n - s1.min(n));
        let s1 = s1.min(n);
        [(Split::Train, n - s1 - s2), (Split::TestS1, s1), (Split::TestS2, s2)]
    }
}

/// Action classes: (verb, noun) pairs indexed by first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ActionVocab {
    pairs: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
}

impl From<Vec<(usize, usize)>> for ActionVocab {
    fn from(pairs: Vec<(usize, usize)>) -> Self {
        let mut v = ActionVocab::default();
        for p in pairs {
            v.insert(p.0, p.1);
        }
        v
    }
}

impl From<ActionVocab> for Vec<(usize, usize)> {
    fn from(v: ActionVocab) -> Self {
        v.pairs
    }
}

impl ActionVocab {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self::from(pairs.into_iter().collect::<Vec<_>>())
    }

    /// Index of the pair, adding it if new.
    pub fn insert(&mut self, verb: usize, noun: usize) -> usize {
        let next = self.pairs.len();
        *self.index.entry((verb, noun)).or_insert_with(|| {
            self.pairs.push((verb, noun));
            next
        })
    }

    pub fn action(&self, verb: usize, noun: usize) -> Option<usize> {
        self.index.get(&(verb, noun)).copied()
    }

    pub fn pair(&self, action: usize) -> Option<(usize, usize)> {
        self.pairs.get(action).copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Left and right swap under a horizontal flip; other verbs are unchanged.
pub fn flip_verb(verb: usize) -> usize {
    match verb {
        0 => 1,
        1 => 0,
        v => v,
    }
}

/// Labels of a horizontally flipped clip.
pub fn flip_labels(labels: Labels, vocab: &ActionVocab) -> Labels {
    let verb = flip_verb(labels.verb);
    Labels {
        verb,
        noun: labels.noun,
        action: vocab.action(verb, labels.noun).unwrap_or(labels.action),
    }
}

/// (dy, dx) per raw frame.
fn velocity(verb: usize) -> (isize, isize) {
    match verb {
        0 => (0, -1),
        1 => (0, 1),
        2 => (-1, 0),
        3 => (1, 0),
        _ => (0, 0),
    }
}

fn shape_mask(noun: usize, dy: usize, dx: usize) -> bool {
    let mid = SHAPE_SIZE / 2;
    match noun {
        0 => true,
        1 => dy.abs_diff(mid) <= 1 || dx.abs_diff(mid) <= 1,
        _ => dy.abs_diff(mid) <= 1,
    }
}

struct Texture {
    base: [f64; 3],
    amp: [f64; 3],
    freq: (f64, f64),
    phase: [f64; 3],
}

impl Texture {
    fn new(id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e87_u64 ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut three = |lo: f64, hi: f64| [(); 3].map(|_| rng.random_range(lo..hi));
        let base = three(0.15, 0.45);
        let amp = three(0.04, 0.12);
        let phase = three(0.0, std::f64::consts::TAU);
        let freq = (rng.random_range(0.2..1.2), rng.random_range(0.2..1.2));
        Self { base, amp, freq, phase }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.base[c] + self.amp[c] * (self.freq.0 * y as f64 + self.freq.1 * x as f64 + self.phase[c]).sin()
    }
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub verb: usize,
    pub noun: usize,
    pub texture: u64,
    pub start: (usize, usize),
    pub color: [f64; 3],
}

/// Renders raw frame `t` of a clip, noise drawn from `rng`.
pub fn render_frame<R: Rng + ?Sized>(cfg: &SynthConfig, spec: &ClipSpec, t: usize, rng: &mut R) -> Tensor<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let tex = Texture::new(spec.texture);
    let (vy, vx) = velocity(spec.verb);
    let y0 = (spec.start.0 as isize + vy * t as isize).rem_euclid(h as isize) as usize;
    let x0 = (spec.start.1 as isize + vx * t as isize).rem_euclid(w as isize) as usize;
    let mut inside = vec![false; h * w];
    for dy in 0..SHAPE_SIZE {
        for dx in 0..SHAPE_SIZE {
            if shape_mask(spec.noun, dy, dx) {
                inside[((y0 + dy) % h) * w + (x0 + dx) % w] = true;
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("validated noise std");
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let clean = if inside[y * w + x] { spec.color[c] } else { tex.at(c, y, x) };
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push((clean + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new([3, h, w], data).expect("consistent frame size")
}

fn clip_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 48) | index as u64);
    rng
}

/// Render parameters of clip `index` of `split`, and the rng that then
/// drives its noise. Labels cycle over all (verb, noun) pairs.
pub fn clip_spec(seed: u64, split: Split, index: usize, cfg: &SynthConfig) -> (ClipSpec, ChaCha8Rng) {
    let pair = index % cfg.pair_count();
    let mut rng = clip_rng(seed, split, index);
    let textures = if split == Split::TestS2 { UNSEEN_TEXTURES } else { SEEN_TEXTURES };
    let spec = ClipSpec {
        verb: pair / cfg.nouns,
        noun: pair % cfg.nouns,
        texture: rng.random_range(textures),
        start: (rng.random_range(0..cfg.height), rng.random_range(0..cfg.width)),
        color: [(); 3].map(|_| rng.random_range(0.7..1.0)),
    };
    (spec, rng)
}

pub fn synth_clip(seed: u64, split: Split, index: usize, cfg: &SynthConfig) -> VideoClip {
    let (spec, mut rng) = clip_spec(seed, split, index, cfg);
    let frames: Vec<_> = (0..cfg.frames).map(|t| render_frame(cfg, &spec, t, &mut rng)).collect();
    VideoClip {
        clip_id: format!("{}_{index:05}", split.as_str()),
        split,
        verb: spec.verb,
        noun: spec.noun,
        action: index % cfg.pair_count(),
        frames: Tensor::stack(&frames).expect("frames share a shape"),
    }
}

/// `n` clips of one split.
pub fn generate_split(seed: u64, split: Split, n: usize, cfg: &SynthConfig, par: Parallelism) -> Result<Vec<VideoClip>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(par.map(&idx, |_, &i| synth_clip(seed, split, i, cfg)))
}

/// A full dataset of `n_clips` clips divided according to the split fractions.
/// Action indices follow first appearance of each pair in the training split.
pub fn generate_synthetic(seed: u64, n_clips: usize, cfg: &SynthConfig, par: Parallelism) -> Result<Vec<VideoClip>> {
    if n_clips == 0 {
        return Err(invalid!("n_clips must be at least 1"));
    }
    let mut clips = Vec::with_capacity(n_clips);
    for (split, n) in cfg.split_sizes(n_clips) {
        clips.extend(generate_split(seed, split, n, cfg, par)?);
    }
    let vocab = vocab_from_clips(&clips);
    for c in &mut clips {
        c.action = vocab.action(c.verb, c.noun).expect("vocab covers every clip");
    }
    Ok(clips)
}

/// Vocabulary from training clips first, then any remaining pairs in order.
pub fn vocab_from_clips(clips: &[VideoClip]) -> ActionVocab {
    let mut vocab = ActionVocab::default();
    for c in clips.iter().filter(|c| c.split == Split::Train) {
        vocab.insert(c.verb, c.noun);
    }
    for c in clips {
        vocab.insert(c.verb, c.noun);
    }
    vocab
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    RandomPerSegment,
    CenterPerSegment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_frames: usize,
    pub mode: SampleMode,
}

impl SamplerConfig {
    pub fn center(num_frames: usize) -> Self {
        Self {
            num_frames,
            mode: SampleMode::CenterPerSegment,
        }
    }

    pub fn random(num_frames: usize) -> Self {
        Self {
            num_frames,
            mode: SampleMode::RandomPerSegment,
        }
    }
}

/// `K` equal segments `[⌊i·T/K⌋, ⌊(i+1)·T/K⌋)` of `0..T`.
pub fn segment_bounds(t_raw: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 {
        return Err(invalid!("cannot sample zero frames"));
    }
    if k > t_raw {
        return Err(invalid!("cannot sample {k} frames from a clip of {t_raw}"));
    }
    Ok((0..k).map(|i| i * t_raw / k..(i + 1) * t_raw / k).collect())
}

/// Sorted frame indices inside `range`, one per segment.
pub fn sample_indices_in<R: Rng + ?Sized>(range: Range<usize>, cfg: SamplerConfig, rng: &mut R) -> Result<Vec<usize>> {
    let segs = segment_bounds(range.len(), cfg.num_frames)?;
    Ok(segs
        .into_iter()
        .map(|s| {
            range.start
                + match cfg.mode {
                    SampleMode::CenterPerSegment => (s.start + s.end) / 2,
                    SampleMode::RandomPerSegment => rng.random_range(s),
                }
        })
        .collect())
}

pub fn sample_indices<R: Rng + ?Sized>(t_raw: usize, cfg: SamplerConfig, rng: &mut R) -> Result<Vec<usize>> {
    sample_indices_in(0..t_raw, cfg, rng)
}

pub fn gather_frames(frames: &Tensor<f32>, indices: &[usize]) -> Result<Tensor<f32>> {
    let picked = indices.iter().map(|&i| frames.index0(i)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&picked)
}

/// K sampled frames of a clip.
pub fn sample_frames<R: Rng + ?Sized>(clip: &VideoClip, cfg: SamplerConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let idx = sample_indices(clip.num_frames(), cfg, rng)?;
    gather_frames(&clip.frames, &idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.25,
        }
    }
}

/// One clip-wide transform: scale the frame, take an H×W window at `offset`
/// in the scaled frame (negative offsets when shrinking), then flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub offset: (f64, f64),
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            scale: 1.0,
            offset: (0.0, 0.0),
        }
    }

    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let mut off = |side: usize| {
            let slack = side as f64 * (scale - 1.0);
            let (lo, hi) = if slack >= 0.0 { (0.0, slack) } else { (slack, 0.0) };
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let offset = (off(h), off(w));
        Self { flip, scale, offset }
    }

    /// Applies the transform to every frame of an N×C×H×W stack.
    pub fn apply(&self, frames: &Tensor<f32>) -> Tensor<f32> {
        let s = frames.shape();
        let (h, w) = (s[2], s[3]);
        let src_y: Vec<f64> = (0..h).map(|i| (i as f64 + self.offset.0 + 0.5) / self.scale - 0.5).collect();
        let src_x: Vec<f64> = (0..w).map(|j| (j as f64 + self.offset.1 + 0.5) / self.scale - 0.5).collect();
        let out = sample_bilinear(frames, &src_y, &src_x);
        if self.flip {
            hflip(&out)
        } else {
            out
        }
    }
}

/// Bilinear lookup at the given source row/column coordinates, clamped to the
/// frame border.
fn sample_bilinear(frames: &Tensor<f32>, src_y: &[f64], src_x: &[f64]) -> Tensor<f32> {
    let s = frames.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let taps = |src: &[f64], n: usize| -> Vec<(usize, usize, f64)> {
        src.iter()
            .map(|&p| {
                let p = p.clamp(0.0, (n - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect()
    };
    let ty = taps(src_y, h);
    let tx = taps(src_x, w);
    let (oh, ow) = (src_y.len(), src_x.len());
    let src = frames.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new([s[0], s[1], oh, ow], out).expect("consistent resample size")
}

/// Horizontal mirror of an N×C×H×W stack.
pub fn hflip(frames: &Tensor<f32>) -> Tensor<f32> {
    let s = frames.shape();
    let w = s[3];
    let mut out = frames.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(frames.data().chunks(w)) {
        for j in 0..w {
            dst[j] = src[w - 1 - j];
        }
    }
    out
}

/// Draws one transform and applies it to all frames.
pub fn augment<R: Rng + ?Sized>(frames: &Tensor<f32>, rng: &mut R, cfg: &AugmentConfig) -> (Tensor<f32>, AugmentParams) {
    let s = frames.shape();
    let p = AugmentParams::draw(cfg, s[2], s[3], rng);
    (p.apply(frames), p)
}

/// Bilinear resize of an N×C×H×W stack (half-pixel centres).
pub fn resize_bilinear(frames: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = frames.shape();
    let coords = |n_out: usize, n_in: usize| -> Vec<f64> {
        let r = n_in as f64 / n_out as f64;
        (0..n_out).map(|i| (i as f64 + 0.5) * r - 0.5).collect()
    };
    sample_bilinear(frames, &coords(out_h, s[2]), &coords(out_w, s[3]))
}

/// Resizes so the shorter side equals `short_side`, keeping the aspect ratio.
pub fn resize_short_side(frames: &Tensor<f32>, short_side: usize) -> Tensor<f32> {
    let s = frames.shape();
    let (h, w) = (s[2], s[3]);
    if h.min(w) == short_side {
        return frames.clone();
    }
    let (oh, ow) = if h <= w {
        (short_side, ((w * short_side) as f64 / h as f64).round() as usize)
    } else {
        (((h * short_side) as f64 / w as f64).round() as usize, short_side)
    };
    resize_bilinear(frames, oh, ow)
}

/// Central `h`×`w` window.
pub fn center_crop(frames: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = frames.shape();
    if h > s[2] || w > s[3] {
        return Err(invalid!("crop {h}×{w} larger than frame {}×{}", s[2], s[3]));
    }
    let (y0, x0) = ((s[2] - h) / 2, (s[3] - w) / 2);
    let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
    for plane in frames.data().chunks(s[2] * s[3]) {
        for y in y0..y0 + h {
            out.extend_from_slice(&plane[y * s[3] + x0..y * s[3] + x0 + w]);
        }
    }
    Tensor::new([s[0], s[1], h, w], out)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: String,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    pub split: Split,
}

const TENSOR_MAGIC: &[u8; 8] = b"EGSTNSR\0";
const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// Raw tensor file: magic, version, dtype code, ndim, u64 dims, little-endian f32 payload.
pub fn write_tensor_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor<f32>> {
    let fmt = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut bytes = Vec::new();
    File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(fmt("truncated tensor file".into()));
        }
        let (a, b) = cur.split_at(n);
        cur = b;
        Ok(a)
    };
    if take(8)? != TENSOR_MAGIC {
        return Err(fmt("not a clip tensor file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(fmt(format!("unsupported tensor file version {version}")));
    }
    let dtype = take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(fmt(format!("unsupported dtype code {dtype}")));
    }
    let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let shape = (0..ndim)
        .map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let payload = take(n * 4)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if !take(0)?.is_empty() || !cur.is_empty() {
        return Err(fmt("trailing bytes after payload".into()));
    }
    Tensor::new(shape, data)
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `clips/<id>.bin` files and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, clips: &[VideoClip]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("clips")).at(dir)?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut w = BufWriter::new(File::create(&manifest).at(&manifest)?);
    for c in clips {
        let rel = format!("clips/{}.bin", c.clip_id);
        write_tensor_file(&dir.join(&rel), &c.frames)?;
        let entry = ManifestEntry {
            clip_id: c.clip_id.clone(),
            path: rel,
            verb: c.verb,
            noun: c.noun,
            action: c.action,
            split: c.split,
        };
        serde_json::to_writer(&mut w, &entry).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Loads the clips of a manifest, optionally keeping one split.
pub fn load_dataset(manifest: &Path, split: Option<Split>) -> Result<Vec<VideoClip>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| {
            let frames = read_tensor_file(&base.join(&e.path))?;
            if frames.ndim() != 4 {
                return Err(Error::Format(format!("clip {} is not T×C×H×W", e.clip_id)));
            }
            Ok(VideoClip {
                clip_id: e.clip_id,
                split: e.split,
                verb: e.verb,
                noun: e.noun,
                action: e.action,
                frames,
            })
        })
        .collect()
}

/// Action vocabulary recorded by a manifest, with index `a` mapping to the
/// (verb, noun) pair of the clips labelled `a`.
pub fn manifest_vocab(entries: &[ManifestEntry]) -> Result<ActionVocab> {
    let mut by_action: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for e in entries {
        let pair = (e.verb, e.noun);
        if let Some(prev) = by_action.insert(e.action, pair) {
            if prev != pair {
                return Err(invalid!(
                    "action {} labels both (verb {}, noun {}) and (verb {}, noun {}) (clip {})",
                    e.action,
                    prev.0,
                    prev.1,
                    pair.0,
                    pair.1,
                    e.clip_id
                ));
            }
        }
    }
    if let Some((pos, (&a, _))) = by_action.iter().enumerate().find(|(i, (&a, _))| a != *i) {
        return Err(invalid!("action indices are not contiguous: index {pos} missing (next is {a})"));
    }
    let vocab = ActionVocab::from_pairs(by_action.into_values());
    if let Some(e) = entries.iter().find(|e| vocab.action(e.verb, e.noun) != Some(e.action)) {
        return Err(invalid!("pair (verb {}, noun {}) has two action indices", e.verb, e.noun));
    }
    Ok(vocab)
}

/// Vocabulary sizes implied by a manifest.
pub fn manifest_dims(entries: &[ManifestEntry]) -> Result<HeadDims> {
    let vocab = manifest_vocab(entries)?;
    let max = |f: fn(&ManifestEntry) -> usize| entries.iter().map(f).max().map_or(0, |m| m + 1);
    Ok(HeadDims {
        verbs: max(|e| e.verb),
        nouns: max(|e| e.noun),
        actions: vocab.len(),
    })
}

/// Per-class label counts of one split and the largest relative deviation
/// from a uniform share.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelBalance {
    pub split: Split,
    pub clips: usize,
    pub verb_counts: Vec<usize>,
    pub noun_counts: Vec<usize>,
    pub max_deviation: f64,
}

pub fn label_balance(entries: &[ManifestEntry], split: Split, verbs: usize, nouns: usize) -> LabelBalance {
    let mut vc = vec![0usize; verbs];
    let mut nc = vec![0usize; nouns];
    let mut n = 0;
    for e in entries.iter().filter(|e| e.split == split) {
        n += 1;
        if let Some(c) = vc.get_mut(e.verb) {
            *c += 1;
        }
        if let Some(c) = nc.get_mut(e.noun) {
            *c += 1;
        }
    }
    let dev = |counts: &[usize]| {
        let expect = n as f64 / counts.len().max(1) as f64;
        counts
            .iter()
            .map(|&c| if expect > 0.0 { (c as f64 - expect).abs() / expect } else { 0.0 })
            .fold(0.0, f64::max)
    };
    LabelBalance {
        split,
        clips: n,
        max_deviation: dev(&vc).max(dev(&nc)),
        verb_counts: vc,
        noun_counts: nc,
    }
}
