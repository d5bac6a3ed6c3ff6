//! End-to-end training behaviour: overfitting, freezing and determinism.

use egoshift::backbone::BackboneConfig;
use egoshift::checkpoint::Checkpoint;
use egoshift::egoaco::{EgoAcoConfig, EgoAcoModel};
use egoshift::gsn::{build_gsn, GsnConfig};
use egoshift::model::{HeadDims, VideoNet};
use egoshift::training::{
    eval_accuracy, run_stage, three_stage_protocol, EpochLog, LrSchedule, StagePlan, ThreeStageConfig, TrainData,
    TrainOptions,
};
use egoshift::videodata::{generate_split, vocab_from_clips, SamplerConfig, Split, SynthConfig, VideoClip};
use egoshift::{Parallelism, ParamStore};

const DIMS: HeadDims = HeadDims {
    verbs: 5,
    nouns: 3,
    actions: 15,
};

fn clips(seed: u64, n: usize) -> Vec<VideoClip> {
    generate_split(seed, Split::Train, n, &SynthConfig::default(), Parallelism::default()).unwrap()
}

fn short_plan(stage: usize, epochs: usize) -> StagePlan {
    StagePlan::full(stage, LrSchedule::new(0.01, 1, epochs).unwrap())
}

#[test]
fn eight_clips_are_memorized() {
    let train = clips(0, 8);
    let vocab = vocab_from_clips(&train);
    let mut cfg = GsnConfig::new(BackboneConfig::default(), DIMS);
    cfg.dropout = 0.0;
    let mut model = build_gsn::<f64>(&cfg, 0).unwrap();
    let plan = StagePlan::full(1, LrSchedule::new(0.02, 8, 50).unwrap());
    let mut opts = TrainOptions::new(SamplerConfig::center(16), 0);
    opts.augment = None;
    opts.batch_size = 2;
    let logs = run_stage(
        &mut model,
        TrainData {
            clips: &train,
            vocab: &vocab,
        },
        &plan,
        &opts,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(logs.len(), 50);

    // Running mean of the epoch losses falls over the first five epochs.
    let losses: Vec<f64> = logs.iter().map(|l| l.loss).collect();
    let running: Vec<f64> = (1..=5).map(|k| losses[..k].iter().sum::<f64>() / k as f64).collect();
    assert!(running.windows(2).all(|p| p[1] < p[0]), "first losses {:?}", &losses[..5]);

    let acc = eval_accuracy(&model, &train, SamplerConfig::center(16), Parallelism::default()).unwrap();
    assert_eq!(acc[2], 1.0, "train accuracy {acc:?}");
}

fn small_gsn() -> GsnConfig {
    GsnConfig::new(
        BackboneConfig {
            stem_channels: 4,
            block_channels: vec![4, 8],
            block_strides: vec![2, 2],
            ..BackboneConfig::default()
        },
        DIMS,
    )
}

fn train_gsn(par: Parallelism, seed: u64, train: &[VideoClip]) -> (Vec<EpochLog>, Vec<u8>) {
    let vocab = vocab_from_clips(train);
    let mut model = build_gsn::<f32>(&small_gsn(), seed).unwrap();
    let mut opts = TrainOptions::new(SamplerConfig::random(8), seed);
    opts.parallelism = par;
    opts.batch_size = 3;
    let logs = run_stage(
        &mut model,
        TrainData {
            clips: train,
            vocab: &vocab,
        },
        &short_plan(1, 3),
        &opts,
        &mut |_, _| Ok(()),
    )
    .unwrap();
    let bytes = Checkpoint::new(model.params(), serde_json::json!({})).to_bytes();
    (logs, bytes)
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let train = clips(4, 10);
    let (log_a, a) = train_gsn(Parallelism::default(), 5, &train);
    let (log_b, b) = train_gsn(Parallelism::default(), 5, &train);
    assert_eq!(log_a, log_b);
    assert_eq!(a, b);
    let (_, c) = train_gsn(Parallelism::default(), 6, &train);
    assert_ne!(a, c);
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let train = clips(4, 10);
    let (log_s, s) = train_gsn(Parallelism::Sequential, 5, &train);
    let (log_p, p) = train_gsn(Parallelism::Rayon, 5, &train);
    assert_eq!(log_s, log_p);
    assert_eq!(s, p);
}

#[test]
fn frozen_backbone_checksum_is_stable() {
    let train = clips(2, 6);
    let vocab = vocab_from_clips(&train);
    let mut model = build_gsn::<f32>(&small_gsn(), 0).unwrap();
    let frozen = |n: &str| !n.starts_with("classifier.");
    let before = model.params().checksum(frozen);
    let head_before = model.params().checksum(|n| !frozen(n));
    let plan = StagePlan {
        stage: 1,
        trainable: vec!["classifier.*".into()],
        frozen: vec!["trunk.*".into()],
        schedule: LrSchedule::new(0.05, 1, 3).unwrap(),
    };
    plan.resolve(model.params().names()).unwrap();
    run_stage(
        &mut model,
        TrainData {
            clips: &train,
            vocab: &vocab,
        },
        &plan,
        &TrainOptions::new(SamplerConfig::random(8), 0),
        &mut |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(model.params().checksum(frozen), before);
    assert_ne!(model.params().checksum(|n| !frozen(n)), head_before);
}

#[test]
fn uncovered_parameters_are_rejected_before_training() {
    let train = clips(2, 4);
    let vocab = vocab_from_clips(&train);
    let mut model = build_gsn::<f32>(&small_gsn(), 0).unwrap();
    let before = model.params().clone();
    let plan = StagePlan {
        stage: 1,
        trainable: vec!["classifier.*".into()],
        frozen: vec!["trunk.stem.*".into()],
        schedule: LrSchedule::new(0.05, 1, 3).unwrap(),
    };
    let mut epochs = 0;
    let err = run_stage(
        &mut model,
        TrainData {
            clips: &train,
            vocab: &vocab,
        },
        &plan,
        &TrainOptions::new(SamplerConfig::random(8), 0),
        &mut |_, _| {
            epochs += 1;
            Ok(())
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("neither trainable nor frozen"), "{err}");
    assert_eq!(epochs, 0);
    assert_eq!(model.params().checksum(|_| true), before.checksum(|_| true));
}

#[test]
fn stem_never_moves_across_three_stages() {
    let train = clips(3, 6);
    let vocab = vocab_from_clips(&train);
    let mut model = EgoAcoModel::<f32>::new(EgoAcoConfig::desk(DIMS), 2).unwrap();
    let stem = |n: &str| n.starts_with("trunk.stem.");
    let before = model.params().checksum(stem);
    let cfg = ThreeStageConfig {
        epochs: [2, 2, 5],
        warmup: Some([1, 1, 4]),
        ..ThreeStageConfig::desk()
    };
    let mut stages = Vec::new();
    let mut last = ParamStore::<f32>::new();
    let logs = three_stage_protocol(
        &mut model,
        TrainData {
            clips: &train,
            vocab: &vocab,
        },
        &cfg,
        &TrainOptions::new(SamplerConfig::random(20), 2),
        &mut |log, params| {
            stages.push(log.stage);
            last = params.clone();
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(stages, [1, 1, 2, 2, 3, 3, 3, 3, 3]);
    assert_eq!(logs.len(), 9);
    assert_eq!(model.params().checksum(stem), before);
    // The returned model holds the last epoch of stage 3.
    assert_eq!(model.params().checksum(|_| true), last.checksum(|_| true));
    // Stage 3 restarts its own warmup at base / W.
    assert_eq!(logs[4].lr, 1e-4 / 4.0);
    assert_eq!(logs[7].lr, 1e-4);
}
