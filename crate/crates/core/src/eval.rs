//! Inference protocols, score files, ensembling and challenge-style metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};
use crate::model::{Labels, ScoreValues, VideoNet};
use crate::parallel::Parallelism;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::videodata::{center_crop, gather_frames, resize_short_side, sample_indices_in, SamplerConfig, VideoClip};

/// Pre-softmax scores of one clip for the three tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub clip_id: String,
    pub verb: Vec<f64>,
    pub noun: Vec<f64>,
    pub action: Vec<f64>,
}

impl ScoreRecord {
    pub fn new<S: Scalar>(clip_id: impl Into<String>, v: &ScoreValues<S>) -> Self {
        let f = |x: &[S]| x.iter().map(|s| s.as_f64()).collect();
        Self {
            clip_id: clip_id.into(),
            verb: f(&v.verb),
            noun: f(&v.noun),
            action: f(&v.action),
        }
    }

    pub fn tasks(&self) -> [&[f64]; 3] {
        [&self.verb, &self.noun, &self.action]
    }

    pub fn lens(&self) -> [usize; 3] {
        self.tasks().map(<[f64]>::len)
    }

    pub fn top1(&self) -> Labels {
        let [v, n, a] = self.tasks().map(crate::model::argmax);
        Labels {
            verb: v,
            noun: n,
            action: a,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.clip_id.is_empty() {
            return Err("empty clip_id".into());
        }
        for (task, xs) in TASKS.iter().zip(self.tasks()) {
            if xs.is_empty() {
                return Err(format!("clip {}: empty {task} scores", self.clip_id));
            }
            if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
                return Err(format!("clip {}: non-finite {task} score {x}", self.clip_id));
            }
        }
        Ok(())
    }
}

pub const TASKS: [&str; 3] = ["verb", "noun", "action"];

fn write_vec(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // 17 significant digits round-trip every finite f64
        write!(out, "{x:.16e}").unwrap();
    }
    out.push(']');
}

/// One JSON line per record; floats carry 17 significant digits.
pub fn format_record(r: &ScoreRecord) -> Result<String> {
    r.check().map_err(Error::InvalidArgument)?;
    let mut s = String::from("{\"clip_id\":");
    s.push_str(&serde_json::to_string(&r.clip_id).map_err(|e| Error::Format(e.to_string()))?);
    for (task, xs) in TASKS.iter().zip(r.tasks()) {
        write!(s, ",\"{task}\":").unwrap();
        write_vec(&mut s, xs);
    }
    s.push('}');
    Ok(s)
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    for r in records {
        writeln!(w, "{}", format_record(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a score file. Blank lines are skipped; the first malformed line,
/// repeated clip id or vector length change is reported with its line number.
pub fn parse_scores(text: &str, source: &str) -> Result<Vec<ScoreRecord>> {
    let mut out: Vec<ScoreRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let r: ScoreRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        r.check().map_err(bad)?;
        if let Some(first) = out.first() {
            if first.lens() != r.lens() {
                return Err(bad(format!(
                    "clip {}: score lengths {:?} differ from {:?}",
                    r.clip_id,
                    r.lens(),
                    first.lens()
                )));
            }
        }
        if !seen.insert(r.clip_id.clone()) {
            return Err(bad(format!("duplicate clip_id `{}`", r.clip_id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut text = String::new();
    for line in BufReader::new(File::open(path).at(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_scores(&text, &path.display().to_string())
}

/// Elementwise mean with the addends sorted first, so the result does not
/// depend on their order.
fn mean_sorted(columns: &[&[f64]]) -> Vec<f64> {
    let n = columns[0].len();
    let mut buf = Vec::with_capacity(columns.len());
    (0..n)
        .map(|j| {
            buf.clear();
            buf.extend(columns.iter().map(|c| c[j]));
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / columns.len() as f64
        })
        .collect()
}

/// Elementwise mean of records for the same clip.
pub fn average_records(clip_id: &str, records: &[&ScoreRecord]) -> Result<ScoreRecord> {
    let first = records.first().ok_or_else(|| invalid!("nothing to average for clip {clip_id}"))?;
    if let Some(r) = records.iter().find(|r| r.lens() != first.lens()) {
        return Err(invalid!(
            "clip {clip_id}: score lengths {:?} differ from {:?}",
            r.lens(),
            first.lens()
        ));
    }
    let col = |k: usize| mean_sorted(&records.iter().map(|r| r.tasks()[k]).collect::<Vec<_>>());
    Ok(ScoreRecord {
        clip_id: clip_id.to_string(),
        verb: col(0),
        noun: col(1),
        action: col(2),
    })
}

/// Per-clip, per-task arithmetic mean across models. Output is ordered by
/// clip id; every member must cover exactly the same clips.
pub fn ensemble(members: &[Vec<ScoreRecord>]) -> Result<Vec<ScoreRecord>> {
    if members.is_empty() {
        return Err(invalid!("ensemble needs at least one member"));
    }
    let index: Vec<BTreeMap<&str, &ScoreRecord>> = members
        .iter()
        .map(|m| m.iter().map(|r| (r.clip_id.as_str(), r)).collect())
        .collect();
    for (k, (m, idx)) in members.iter().zip(&index).enumerate() {
        if idx.len() != m.len() {
            return Err(invalid!("ensemble member {k} repeats a clip id"));
        }
    }
    for (k, idx) in index.iter().enumerate().skip(1) {
        if let Some(id) = index[0].keys().find(|id| !idx.contains_key(*id)) {
            return Err(invalid!("clip `{id}` missing from ensemble member {k}"));
        }
        if let Some(id) = idx.keys().find(|id| !index[0].contains_key(*id)) {
            return Err(invalid!("clip `{id}` missing from ensemble member 0"));
        }
    }
    index[0]
        .keys()
        .map(|id| {
            let rs: Vec<&ScoreRecord> = index.iter().map(|idx| idx[id]).collect();
            average_records(id, &rs)
        })
        .collect()
}

/// Accuracy and macro precision/recall of one task, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub top1: f64,
    pub top5: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub clips: usize,
    pub verb: TaskMetrics,
    pub noun: TaskMetrics,
    pub action: TaskMetrics,
}

impl MetricsReport {
    pub fn tasks(&self) -> [&TaskMetrics; 3] {
        [&self.verb, &self.noun, &self.action]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Position of `label` when classes are ordered by descending score, ties
/// broken by lower index.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < label))
        .count()
}

fn task_metrics(scores: &[&[f64]], labels: &[usize]) -> TaskMetrics {
    let n = labels.len();
    let classes = scores[0].len();
    let k = 5.min(classes);
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut actual = vec![0usize; classes];
    for (s, &y) in scores.iter().zip(labels) {
        let r = rank_of(s, y);
        top1 += (r == 0) as usize;
        top5 += (r < k) as usize;
        let p = crate::model::argmax(s);
        predicted[p] += 1;
        actual[y] += 1;
        tp[p] += (p == y) as usize;
    }
    let present: Vec<usize> = (0..classes).filter(|&c| actual[c] > 0).collect();
    let macro_mean = |f: &dyn Fn(usize) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            100.0 * present.iter().map(|&c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let pct = |x: usize| if n == 0 { 0.0 } else { 100.0 * x as f64 / n as f64 };
    TaskMetrics {
        top1: pct(top1),
        top5: pct(top5),
        precision: macro_mean(&|c| {
            if predicted[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / predicted[c] as f64
            }
        }),
        recall: macro_mean(&|c| tp[c] as f64 / actual[c] as f64),
    }
}

/// Top-1/top-5 accuracy and macro precision/recall per task. Macro means run
/// over the classes present in the ground truth; a class never predicted has
/// precision 0.
pub fn compute_metrics(split: &str, records: &[ScoreRecord], labels: &BTreeMap<String, Labels>) -> Result<MetricsReport> {
    let mut ys = Vec::with_capacity(records.len());
    for r in records {
        let y = labels
            .get(&r.clip_id)
            .ok_or_else(|| invalid!("no label for clip `{}`", r.clip_id))?;
        let lens = r.lens();
        for (k, (task, yk)) in TASKS.iter().zip([y.verb, y.noun, y.action]).enumerate() {
            if yk >= lens[k] {
                return Err(invalid!(
                    "clip `{}`: {task} label {yk} outside {} scores",
                    r.clip_id,
                    lens[k]
                ));
            }
        }
        if let Some(first) = records.first() {
            if first.lens() != lens {
                return Err(invalid!("clip `{}`: score lengths differ from the first record", r.clip_id));
            }
        }
        ys.push(*y);
    }
    if records.is_empty() {
        return Err(invalid!("no score records to evaluate"));
    }
    let per_task = |k: usize, pick: fn(&Labels) -> usize| {
        let s: Vec<&[f64]> = records.iter().map(|r| r.tasks()[k]).collect();
        let y: Vec<usize> = ys.iter().map(pick).collect();
        task_metrics(&s, &y)
    };
    Ok(MetricsReport {
        split: split.to_string(),
        clips: records.len(),
        verb: per_task(0, |l| l.verb),
        noun: per_task(1, |l| l.noun),
        action: per_task(2, |l| l.action),
    })
}

/// Text table with one row per split: Top-1, Top-5, Precision and Recall
/// column groups, each split into Verb, Noun and Action.
pub fn format_table(reports: &[MetricsReport]) -> String {
    const GROUPS: [&str; 4] = ["Top-1 Accuracy (%)", "Top-5 Accuracy (%)", "Precision (%)", "Recall (%)"];
    let cell = 7;
    let group_w = 3 * cell + 2;
    let split_w = reports.iter().map(|r| r.split.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    write!(s, "{:split_w$}", "").unwrap();
    for g in GROUPS {
        write!(s, " | {g:^group_w$}").unwrap();
    }
    let header_len = s.chars().count();
    s.truncate(s.trim_end().len());
    s.push('\n');
    write!(s, "{:split_w$}", "Split").unwrap();
    for _ in GROUPS {
        write!(s, " | {:>cell$} {:>cell$} {:>cell$}", "Verb", "Noun", "Action").unwrap();
    }
    s.push('\n');
    s.push_str(&"-".repeat(header_len));
    s.push('\n');
    for r in reports {
        write!(s, "{:split_w$}", r.split).unwrap();
        let pick: [fn(&TaskMetrics) -> f64; 4] = [|m| m.top1, |m| m.top5, |m| m.precision, |m| m.recall];
        for f in pick {
            let [v, n, a] = r.tasks().map(f);
            write!(s, " | {v:>cell$.2} {n:>cell$.2} {a:>cell$.2}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Spatial handling of the sampled frames at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpatialMode {
    /// Central window of the given side (no-op when the frame already fits).
    CenterCrop { side: usize },
    /// Short side rescaled, classifier applied at every map position.
    FullyConv { short_side: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub num_frames: usize,
    pub two_clip: bool,
    pub spatial: SpatialMode,
}

/// Scores of an already-sampled K×C×H×W stack under `spatial`.
pub fn infer_frames<S: Scalar, M: VideoNet<S> + ?Sized>(
    model: &M,
    frames: &Tensor<f32>,
    spatial: SpatialMode,
) -> Result<ScoreValues<S>> {
    match spatial {
        SpatialMode::CenterCrop { side } => {
            let s = frames.shape();
            let cropped = center_crop(frames, side.min(s[2]), side.min(s[3]))?;
            model.predict(&cropped.cast())
        }
        SpatialMode::FullyConv { short_side } => {
            let min = model.min_input_side();
            if short_side < min {
                return Err(invalid!("short side {short_side} is below the network minimum {min}"));
            }
            let resized = resize_short_side(frames, short_side);
            model.predict_fully_conv(&resized.cast())
        }
    }
}

/// Rescales the short side to `short_side`, runs the network on the whole
/// frame and averages the classifier's score map.
pub fn fully_conv_infer<S: Scalar, M: VideoNet<S> + ?Sized>(
    model: &M,
    clip_id: &str,
    frames: &Tensor<f32>,
    short_side: usize,
) -> Result<ScoreRecord> {
    let v = infer_frames(model, frames, SpatialMode::FullyConv { short_side })?;
    Ok(ScoreRecord::new(clip_id, &v))
}

/// Frame indices of the two test clips: segment centres over the first and
/// the second temporal half.
pub fn two_clip_indices(t_raw: usize, num_frames: usize) -> Result<[Vec<usize>; 2]> {
    let half = t_raw / 2;
    if half < num_frames {
        return Err(invalid!(
            "two-clip sampling of {num_frames} frames needs at least {} frames, clip has {t_raw}",
            2 * num_frames
        ));
    }
    let cfg = SamplerConfig::center(num_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok([sample_indices_in(0..half, cfg, &mut rng)?, sample_indices_in(half..t_raw, cfg, &mut rng)?])
}

/// Averages the scores of the two half-clips.
pub fn two_clip_infer<S: Scalar, M: VideoNet<S> + ?Sized>(
    model: &M,
    clip: &VideoClip,
    num_frames: usize,
    spatial: SpatialMode,
) -> Result<ScoreRecord> {
    let [a, b] = two_clip_indices(clip.num_frames(), num_frames)?;
    let ra = ScoreRecord::new(&clip.clip_id, &infer_frames::<S, M>(model, &gather_frames(&clip.frames, &a)?, spatial)?);
    let rb = ScoreRecord::new(&clip.clip_id, &infer_frames::<S, M>(model, &gather_frames(&clip.frames, &b)?, spatial)?);
    average_records(&clip.clip_id, &[&ra, &rb])
}

/// One record per clip under `cfg`; single-clip mode uses centre sampling
/// over the whole clip.
pub fn infer_clips<S: Scalar, M: VideoNet<S> + ?Sized>(
    model: &M,
    clips: &[VideoClip],
    cfg: &InferConfig,
    par: Parallelism,
) -> Result<Vec<ScoreRecord>> {
    par.map(clips, |_, c| {
        if cfg.two_clip {
            two_clip_infer::<S, M>(model, c, cfg.num_frames, cfg.spatial)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let idx = crate::videodata::sample_indices(c.num_frames(), SamplerConfig::center(cfg.num_frames), &mut rng)?;
            let v = infer_frames::<S, M>(model, &gather_frames(&c.frames, &idx)?, cfg.spatial)?;
            Ok(ScoreRecord::new(&c.clip_id, &v))
        }
    })
    .into_iter()
    .collect()
}

pub fn labels_of(clips: &[VideoClip]) -> BTreeMap<String, Labels> {
    clips.iter().map(|c| (c.clip_id.clone(), c.labels())).collect()
}
