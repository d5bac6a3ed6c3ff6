use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use egoshift::checkpoint::Checkpoint;
use egoshift::config::{Family, Precision, RunConfig};
use egoshift::eval::{self, InferConfig, SpatialMode};
use egoshift::gradcheck::{self, GradCheckConfig, GradCheckReport, ModelKind};
use egoshift::model::HeadDims;
use egoshift::training::{self, EpochLog, StagePlan, TrainData, TrainOptions};
use egoshift::videodata::{self, Split, SynthConfig, VideoClip};
use egoshift::{Error, IoContext, OpKind, Parallelism, ParamStore, Scalar};

use crate::zoo::{self, CheckpointMeta, ModelSpec};

pub struct SynthArgs {
    pub seed: u64,
    pub n: usize,
    pub out: PathBuf,
    pub force: bool,
    pub synth: SynthConfig,
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let errs = a.synth.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs).into());
    }
    if a.n == 0 {
        return Err(Error::Config(vec!["--n must be at least 1".into()]).into());
    }
    if a.out.is_dir() && fs::read_dir(&a.out).at(&a.out)?.next().is_some() && !a.force {
        return Err(Error::InvalidArgument(format!(
            "output directory `{}` is not empty (use --force to overwrite)",
            a.out.display()
        ))
        .into());
    }
    let clips = videodata::generate_synthetic(a.seed, a.n, &a.synth, Parallelism::default())?;
    let manifest = videodata::write_dataset(&a.out, &clips)?;
    let entries = videodata::read_manifest(&manifest)?;
    println!("wrote {} clips to {}", entries.len(), manifest.display());
    for split in Split::ALL {
        let b = videodata::label_balance(&entries, split, a.synth.verbs, a.synth.nouns);
        println!(
            "  {:<8} {:>5} clips  verbs {:?}  nouns {:?}  max deviation from uniform {:.1}%",
            split.as_str(),
            b.clips,
            b.verb_counts,
            b.noun_counts,
            100.0 * b.max_deviation
        );
    }
    Ok(())
}

struct Dataset {
    manifest: PathBuf,
    dims: HeadDims,
    vocab: videodata::ActionVocab,
    train: Vec<VideoClip>,
}

fn load_train(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let manifest = cfg
        .data
        .manifest
        .canonicalize()
        .with_context(|| format!("resolving {}", cfg.data.manifest.display()))?;
    let entries = videodata::read_manifest(&manifest)?;
    let vocab = videodata::manifest_vocab(&entries)?;
    let dims = videodata::manifest_dims(&entries)?;
    let train = videodata::load_dataset(&manifest, Some(cfg.data.train_split))?;
    Ok(Dataset {
        manifest,
        dims,
        vocab,
        train,
    })
}

/// Checks that need the dataset; run before any output is written.
fn validate_against_data(cfg: &RunConfig, data: &Dataset) -> Vec<String> {
    let mut errs = Vec::new();
    if data.train.is_empty() {
        errs.push(format!("data: split `{}` has no clips", cfg.data.train_split));
    }
    errs.extend(data.dims.validate().into_iter().map(|e| format!("data: {e}")));
    let shortest = data.train.iter().map(VideoClip::num_frames).min().unwrap_or(0);
    let mut frames = |section: &str, k: usize| {
        if k > shortest {
            errs.push(format!("{section}: num_frames {k} exceeds the shortest training clip ({shortest} frames)"));
        }
    };
    if cfg.family.includes_gsn() {
        frames("gsn", cfg.gsn.num_frames);
    }
    if cfg.family.includes_egoaco() {
        frames("egoaco", cfg.egoaco.num_frames);
    }
    let mut sizes: Vec<_> = data.train.iter().map(|c| (c.frames.dim(2), c.frames.dim(3))).collect();
    sizes.dedup();
    if sizes.len() > 1 {
        errs.push("data: training clips differ in frame size".into());
    }
    errs
}

struct Job {
    spec: ModelSpec,
    num_frames: usize,
    plans: Vec<StagePlan>,
}

fn jobs(cfg: &RunConfig, dims: HeadDims) -> anyhow::Result<Vec<Job>> {
    let mut out = Vec::new();
    if cfg.family.includes_gsn() {
        out.push(Job {
            spec: ModelSpec::Gsn {
                config: cfg.gsn.model_config(dims),
            },
            num_frames: cfg.gsn.num_frames,
            plans: vec![StagePlan::full(1, cfg.gsn.schedule)],
        });
    }
    if cfg.family.includes_egoaco() {
        let trunk = cfg.egoaco.backbone.block_channels.len() - 1;
        out.push(Job {
            spec: ModelSpec::EgoAco {
                config: cfg.egoaco.model_config(dims),
            },
            num_frames: cfg.egoaco.num_frames,
            plans: training::egoaco_stage_plans(trunk, &cfg.egoaco.stages)?.to_vec(),
        });
    }
    Ok(out)
}

/// Checkpoint file name for the end of a stage.
pub fn checkpoint_name(stage: usize, epoch: usize) -> String {
    format!("stage{stage}_epoch{epoch}.ckpt")
}

pub fn train(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?.validated()?;
    let data = load_train(&cfg)?;
    let errs = validate_against_data(&cfg, &data);
    if !errs.is_empty() {
        return Err(Error::Config(errs).into());
    }
    let jobs = jobs(&cfg, data.dims)?;
    // Build every model and resolve every plan before writing anything.
    for job in &jobs {
        let model = job.spec.build::<f64>(cfg.seed)?;
        for plan in &job.plans {
            plan.resolve(egoshift::model::VideoNet::params(&model).names())?;
        }
    }
    fs::create_dir_all(out).at(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).at(out)?;
    for job in &jobs {
        let path = match cfg.precision {
            Precision::F32 => train_job::<f32>(&cfg, &data, job, out)?,
            Precision::F64 => train_job::<f64>(&cfg, &data, job, out)?,
        };
        println!("{}: final checkpoint {}", job.spec.family(), path.display());
    }
    Ok(())
}

fn train_job<S: Scalar>(cfg: &RunConfig, data: &Dataset, job: &Job, out: &Path) -> anyhow::Result<PathBuf> {
    let dir = out.join(job.spec.family());
    fs::create_dir_all(&dir).at(&dir)?;
    let mut model = job.spec.build::<S>(cfg.seed)?;
    let first = &data.train[0].frames;
    let meta = |stage: usize, epoch: usize| CheckpointMeta {
        model: job.spec.clone(),
        precision: cfg.precision,
        vocab: data.vocab.clone(),
        num_frames: job.num_frames,
        frame_size: [first.dim(2), first.dim(3)],
        stage,
        epoch,
        seed: cfg.seed,
        manifest: data.manifest.clone(),
    };
    let opts = TrainOptions {
        batch_size: cfg.train.batch_size,
        sampler: RunConfig::training_sampler(job.num_frames),
        augment: cfg.train.augment.config(),
        sgd: cfg.train.sgd,
        parallelism: cfg.train.parallelism,
        seed: cfg.seed,
    };
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl")).at(&dir)?);
    let mut last = PathBuf::new();
    let train_data = TrainData {
        clips: &data.train,
        vocab: &data.vocab,
    };
    for plan in &job.plans {
        let mut on_epoch = |rec: &EpochLog, params: &ParamStore<S>| -> egoshift::Result<()> {
            serde_json::to_writer(&mut log, rec).map_err(|e| Error::Format(e.to_string()))?;
            log.write_all(b"\n")?;
            log.flush()?;
            eprintln!(
                "{} stage {} epoch {:>3}  lr {:.3e}  loss {:.4}  acc v/n/a {:.3}/{:.3}/{:.3}",
                job.spec.family(),
                rec.stage,
                rec.epoch,
                rec.lr,
                rec.loss,
                rec.verb_acc,
                rec.noun_acc,
                rec.action_acc
            );
            if rec.epoch == plan.epochs() {
                last = dir.join(checkpoint_name(rec.stage, rec.epoch));
                meta(rec.stage, rec.epoch).to_checkpoint(params).save(&last)?;
            }
            Ok(())
        };
        training::run_stage(&mut model, train_data, plan, &opts, &mut on_epoch)?;
    }
    Ok(last)
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub manifest: Option<PathBuf>,
    pub split: Split,
    pub two_clip: Option<bool>,
    pub fully_conv: Option<bool>,
    pub short_side: Option<usize>,
    pub out: PathBuf,
}

/// Test-time protocol: two clips by default; fully convolutional for GSN and
/// centre crop for EgoACO unless overridden.
pub fn infer_config(meta: &CheckpointMeta, a: &InferArgs) -> InferConfig {
    let side = meta.frame_size[0].min(meta.frame_size[1]);
    let fully_conv = a.fully_conv.unwrap_or(matches!(meta.model, ModelSpec::Gsn { .. }));
    InferConfig {
        num_frames: meta.num_frames,
        two_clip: a.two_clip.unwrap_or(true),
        spatial: if fully_conv {
            SpatialMode::FullyConv {
                short_side: a.short_side.unwrap_or(side),
            }
        } else {
            SpatialMode::CenterCrop {
                side: a.short_side.unwrap_or(side),
            }
        },
    }
}

pub fn infer(a: &InferArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let meta = CheckpointMeta::from_checkpoint(&ckpt, &a.checkpoint)?;
    let manifest = a.manifest.clone().unwrap_or_else(|| meta.manifest.clone());
    let entries = videodata::read_manifest(&manifest)?;
    let vocab = videodata::manifest_vocab(&entries)?;
    if vocab != meta.vocab {
        return Err(Error::InvalidArgument(format!(
            "vocabulary mismatch: checkpoint has {} actions {:?}, manifest `{}` has {} actions {:?}",
            meta.vocab.len(),
            meta.vocab.pairs(),
            manifest.display(),
            vocab.len(),
            vocab.pairs()
        ))
        .into());
    }
    let clips = videodata::load_dataset(&manifest, Some(a.split))?;
    let cfg = infer_config(&meta, a);
    let records = match meta.precision {
        Precision::F32 => eval::infer_clips(&zoo::restore::<f32>(&ckpt, &meta)?, &clips, &cfg, Parallelism::default())?,
        Precision::F64 => eval::infer_clips(&zoo::restore::<f64>(&ckpt, &meta)?, &clips, &cfg, Parallelism::default())?,
    };
    eval::write_scores(&a.out, &records)?;
    println!(
        "wrote {} score records ({}, {}) to {}",
        records.len(),
        if cfg.two_clip { "two clips" } else { "one clip" },
        match cfg.spatial {
            SpatialMode::FullyConv { short_side } => format!("fully convolutional, short side {short_side}"),
            SpatialMode::CenterCrop { side } => format!("centre crop {side}"),
        },
        a.out.display()
    );
    Ok(())
}

pub fn ensemble(scores: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let members = scores
        .iter()
        .map(|p| eval::read_scores(p))
        .collect::<egoshift::Result<Vec<_>>>()?;
    let avg = eval::ensemble(&members)?;
    eval::write_scores(out, &avg)?;
    println!("averaged {} members over {} clips into {}", members.len(), avg.len(), out.display());
    Ok(())
}

pub fn evaluate(scores: &Path, manifest: &Path, split: Split, json: Option<&Path>) -> anyhow::Result<()> {
    let records = eval::read_scores(scores)?;
    let entries = videodata::read_manifest(manifest)?;
    let labels: BTreeMap<String, egoshift::model::Labels> = entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            (
                e.clip_id.clone(),
                egoshift::model::Labels {
                    verb: e.verb,
                    noun: e.noun,
                    action: e.action,
                },
            )
        })
        .collect();
    let scored: std::collections::BTreeSet<&str> = records.iter().map(|r| r.clip_id.as_str()).collect();
    if let Some(r) = records.iter().find(|r| !labels.contains_key(&r.clip_id)) {
        return Err(Error::InvalidArgument(format!("clip `{}` is not in split {split} of the manifest", r.clip_id)).into());
    }
    if let Some(id) = labels.keys().find(|id| !scored.contains(id.as_str())) {
        return Err(Error::InvalidArgument(format!("split {split} clip `{id}` has no score record")).into());
    }
    let report = eval::compute_metrics(split.as_str(), &records, &labels)?;
    print!("{}", eval::format_table(std::slice::from_ref(&report)));
    if let Some(path) = json {
        fs::write(path, report.to_json() + "\n").at(path)?;
    }
    Ok(())
}

pub fn gradcheck(family: Option<Family>, seed: u64, fault: Option<&str>) -> anyhow::Result<bool> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<_> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            Error::InvalidArgument(format!("unknown op `{name}` (known: {})", known.join(", ")))
        })?),
    };
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let start = std::time::Instant::now();
    let mut reports: Vec<GradCheckReport> = gradcheck::layer_suite(&cfg, fault)?;
    let family = family.unwrap_or(Family::Both);
    if family.includes_gsn() {
        reports.push(gradcheck::model_suite(ModelKind::Gsn, &cfg, fault)?);
    }
    if family.includes_egoaco() {
        reports.push(gradcheck::model_suite(ModelKind::EgoAco, &cfg, fault)?);
    }
    let mut failed = 0;
    for r in &reports {
        failed += !r.passed as usize;
        println!(
            "{} {:<28} max rel err {:.3e} over {:>4} probes",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.checked
        );
    }
    println!(
        "{} of {} checks passed (tolerance {:.0e}, eps {:.0e}) in {:.2?}",
        reports.len() - failed,
        reports.len(),
        cfg.tolerance,
        cfg.eps,
        start.elapsed()
    );
    if let Some(k) = fault {
        println!("adjoint fault injected into {}", k.name());
    }
    Ok(failed == 0)
}
