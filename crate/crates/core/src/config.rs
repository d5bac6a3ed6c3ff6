//! Run configuration files (TOML).
//!
//! ```toml
//! family = "gsn+egoaco"
//! seed = 7
//!
//! [data]
//! manifest = "data/manifest.jsonl"
//!
//! [gsn]
//! schedule = { base_lr = 0.01, warmup_epochs = 2, total_epochs = 10 }
//!
//! [egoaco.stages]
//! epochs = [10, 10, 5]
//! base_lr = [0.01, 0.01, 1e-4]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::egoaco::EgoAcoConfig;
use crate::error::{invalid, Error, IoContext, Result};
use crate::gsn::GsnConfig;
use crate::lsta::LstaConfig;
use crate::model::HeadDims;
use crate::parallel::Parallelism;
use crate::training::{LrSchedule, SgdConfig, ThreeStageConfig};
use crate::videodata::{AugmentConfig, SampleMode, SamplerConfig, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "gsn")]
    Gsn,
    #[serde(rename = "egoaco")]
    EgoAco,
    #[serde(rename = "gsn+egoaco")]
    Both,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Gsn => "gsn",
            Family::EgoAco => "egoaco",
            Family::Both => "gsn+egoaco",
        }
    }

    pub fn includes_gsn(self) -> bool {
        matches!(self, Family::Gsn | Family::Both)
    }

    pub fn includes_egoaco(self) -> bool {
        matches!(self, Family::EgoAco | Family::Both)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gsn" => Ok(Family::Gsn),
            "egoaco" => Ok(Family::EgoAco),
            "gsn+egoaco" => Ok(Family::Both),
            _ => Err(invalid!("unknown family `{s}` (expected gsn, egoaco or gsn+egoaco)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: Split,
}

fn default_train_split() -> Split {
    Split::Train
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
    #[serde(default = "default_scale_min")]
    pub scale_min: f64,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
}

fn default_true() -> bool {
    true
}

fn default_flip() -> f64 {
    AugmentConfig::default().flip_prob
}

fn default_scale_min() -> f64 {
    AugmentConfig::default().scale_min
}

fn default_scale_max() -> f64 {
    AugmentConfig::default().scale_max
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: default_flip(),
            scale_min: default_scale_min(),
            scale_max: default_scale_max(),
        }
    }
}

impl AugmentSection {
    pub fn config(&self) -> Option<AugmentConfig> {
        self.enabled.then_some(AugmentConfig {
            flip_prob: self.flip_prob,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub parallelism: Parallelism,
}

fn default_batch() -> usize {
    8
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            sgd: SgdConfig::default(),
            augment: AugmentSection::default(),
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsnSection {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_gsn_frames")]
    pub num_frames: usize,
    #[serde(default = "default_gsn_schedule")]
    pub schedule: LrSchedule,
}

fn default_dropout() -> f64 {
    0.5
}

fn default_gsn_frames() -> usize {
    16
}

fn default_gsn_schedule() -> LrSchedule {
    LrSchedule {
        base_lr: 0.01,
        warmup_epochs: 10,
        total_epochs: 60,
    }
}

impl Default for GsnSection {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            dropout: default_dropout(),
            num_frames: default_gsn_frames(),
            schedule: default_gsn_schedule(),
        }
    }
}

impl GsnSection {
    pub fn model_config(&self, dims: HeadDims) -> GsnConfig {
        GsnConfig {
            backbone: self.backbone.clone(),
            dims,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoAcoSection {
    #[serde(default = "default_ego_backbone")]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub lsta: LstaConfig,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_ego_frames")]
    pub num_frames: usize,
    #[serde(default = "ThreeStageConfig::full")]
    pub stages: ThreeStageConfig,
}

fn default_ego_backbone() -> BackboneConfig {
    BackboneConfig {
        gsm: false,
        ..BackboneConfig::default()
    }
}

fn default_ego_frames() -> usize {
    20
}

impl Default for EgoAcoSection {
    fn default() -> Self {
        Self {
            backbone: default_ego_backbone(),
            lsta: LstaConfig::default(),
            dropout: default_dropout(),
            num_frames: default_ego_frames(),
            stages: ThreeStageConfig::full(),
        }
    }
}

impl EgoAcoSection {
    pub fn model_config(&self, dims: HeadDims) -> EgoAcoConfig {
        EgoAcoConfig {
            backbone: self.backbone.clone(),
            lsta: self.lsta,
            dims,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: Family,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub gsn: GsnSection,
    #[serde(default)]
    pub egoaco: EgoAcoSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: source.to_string(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn training_sampler(num_frames: usize) -> SamplerConfig {
        SamplerConfig {
            num_frames,
            mode: SampleMode::RandomPerSegment,
        }
    }

    /// Every problem found, in one pass; empty when the config is usable.
    /// Vocabulary-dependent checks wait until the dataset is read.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut section = |name: &str, list: Vec<String>| errs.extend(list.into_iter().map(|e| format!("{name}: {e}")));
        if !self.data.manifest.is_file() {
            section("data", vec![format!("manifest `{}` does not exist", self.data.manifest.display())]);
        }
        let t = &self.train;
        let mut train = Vec::new();
        if t.batch_size == 0 {
            train.push("batch_size must be positive".to_string());
        }
        if !(0.0..1.0).contains(&t.sgd.momentum) {
            train.push(format!("sgd.momentum must lie in [0, 1), got {}", t.sgd.momentum));
        }
        if !(t.sgd.weight_decay >= 0.0 && t.sgd.weight_decay.is_finite()) {
            train.push(format!("sgd.weight_decay must be a non-negative number, got {}", t.sgd.weight_decay));
        }
        let a = &t.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) {
            train.push(format!("augment.flip_prob must lie in [0, 1], got {}", a.flip_prob));
        }
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max && a.scale_max.is_finite()) {
            train.push(format!(
                "augment scale range must satisfy 0 < scale_min <= scale_max, got {}..{}",
                a.scale_min, a.scale_max
            ));
        }
        section("train", train);
        let dropout = |p: f64| (!(0.0..1.0).contains(&p)).then(|| format!("dropout must lie in [0, 1), got {p}"));
        if self.family.includes_gsn() {
            let g = &self.gsn;
            let mut list = g.backbone.validate();
            list.extend(dropout(g.dropout));
            if g.num_frames == 0 {
                list.push("num_frames must be positive".into());
            }
            list.extend(g.schedule.validate());
            section("gsn", list);
        }
        if self.family.includes_egoaco() {
            let e = &self.egoaco;
            let mut list = e.backbone.validate();
            list.extend(e.lsta.validate());
            list.extend(dropout(e.dropout));
            if e.num_frames == 0 {
                list.push("num_frames must be positive".into());
            }
            if e.backbone.block_channels.len() < 2 {
                list.push("backbone needs at least two blocks (trunk plus cloned heads)".into());
            }
            if let Err(err) = e.stages.schedules() {
                list.push(format!("stages: {err}"));
            }
            section("egoaco", list);
        }
        errs
    }

    pub fn validated(self) -> Result<Self> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_manifest(body: &str) -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.jsonl");
        std::fs::write(&m, "").unwrap();
        let text = format!("{body}\n[data]\nmanifest = {:?}\n", m.display().to_string());
        (dir, text)
    }

    #[test]
    fn minimal_config_takes_recipe_defaults() {
        let (_d, text) = with_manifest("family = \"gsn+egoaco\"");
        let c = RunConfig::from_toml(&text, "c.toml").unwrap().validated().unwrap();
        assert_eq!(c.family, Family::Both);
        assert_eq!(c.gsn.schedule, default_gsn_schedule());
        assert_eq!(c.egoaco.stages, ThreeStageConfig::full());
        assert!(!c.egoaco.backbone.gsm && c.gsn.backbone.gsm);
        assert_eq!((c.gsn.num_frames, c.egoaco.num_frames), (16, 20));
        assert_eq!(c.precision, Precision::F32);
        let again = RunConfig::from_toml(&c.to_toml(), "round").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let (_d, text) = with_manifest("family = \"gsn\"\n[gsn]\nlearning_rate = 3");
        let e = RunConfig::from_toml(&text, "c.toml").unwrap_err().to_string();
        assert!(e.contains("learning_rate") && e.contains("line 3"), "{e}");
        assert!(RunConfig::from_toml("family = \"tsn\"\n", "c").is_err());
    }

    #[test]
    fn all_errors_reported_together() {
        let text = r#"
family = "gsn+egoaco"
[data]
manifest = "/nonexistent/manifest.jsonl"
[train]
batch_size = 0
[gsn]
dropout = 1.5
schedule = { base_lr = 0.01, warmup_epochs = 5, total_epochs = 5 }
[egoaco]
num_frames = 0
[egoaco.backbone]
stem_channels = 8
block_channels = [8]
"#;
        let c = RunConfig::from_toml(text, "c").unwrap();
        let errs = c.validate();
        let joined = errs.join("\n");
        for needle in ["manifest", "batch_size", "gsn: dropout", "gsn: warmup", "egoaco: num_frames", "two blocks"] {
            assert!(joined.contains(needle), "missing {needle}: {joined}");
        }
        assert!(matches!(c.validated(), Err(Error::Config(v)) if v.len() == errs.len()));
    }
}
