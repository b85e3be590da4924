//! Run configuration and per-stage config hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignTrainConfig;
use crate::anchors::{AnchorTrainConfig, TextTrainConfig};
use crate::corpus::{CorpusConfig, SplitSpec};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ApMode;
use crate::tensor::read_artifact;
use crate::volume::VolumeConfig;

/// Supervision used for the text head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Planted weight at which a secondary organ counts as a positive.
    pub label_threshold: f64,
    pub ap_mode: ApMode,
    /// Records listed per anchor in the closest/farthest report.
    pub closest_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            label_threshold: 0.5,
            ap_mode: ApMode::ClassWise,
            closest_n: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Generated corpus and volumes.
    pub data_dir: PathBuf,
    /// Anchors, labels, checkpoint and reports.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("sora-run/data"),
            out_dir: PathBuf::from("sora-run/out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Copied into every stage's seed by [`RunConfig::resolved`].
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub split: SplitSpec,
    pub anchors: AnchorTrainConfig,
    pub labels: LabelMode,
    pub text: TextTrainConfig,
    pub volumes: VolumeConfig,
    pub encoder: EncoderConfig,
    pub align: AlignTrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            split: SplitSpec::default(),
            anchors: AnchorTrainConfig::default(),
            labels: LabelMode::Soft,
            text: TextTrainConfig::default(),
            volumes: VolumeConfig::default(),
            encoder: EncoderConfig::default(),
            align: AlignTrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Pipeline stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    Volumes,
    Anchors,
    Labels,
    Model,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Volumes => "volumes",
            Stage::Anchors => "anchors",
            Stage::Labels => "labels",
            Stage::Model => "model",
            Stage::Eval => "eval",
        }
    }
}

fn digest(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copies the run seed into each stage and checks cross-stage consistency.
    pub fn resolved(mut self) -> Result<Self> {
        let s = self.seed;
        self.corpus.seed = s;
        self.split.seed = s;
        self.anchors.seed = s;
        self.text.seed = s;
        self.volumes.seed = s;
        self.align.seed = s;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.anchors.validate()?;
        self.volumes.validate()?;
        self.encoder.validate()?;
        self.align.validate()?;
        if self.volumes.n_organs != self.corpus.n_organs {
            return Err(Error::Config(format!(
                "corpus has {} organs but volumes have {}",
                self.corpus.n_organs, self.volumes.n_organs
            )));
        }
        if self.volumes.dims() != self.encoder.dims() {
            return Err(Error::Config(format!(
                "volume extents {:?} differ from encoder extents {:?}",
                self.volumes.dims(),
                self.encoder.dims()
            )));
        }
        if !(0.0 < self.split.train_fraction && self.split.train_fraction < 1.0) {
            return Err(Error::Config("split.train_fraction must lie in (0, 1)".into()));
        }
        if self.text.epochs == 0 || self.text.batch_size == 0 || !(self.text.learning_rate > 0.0) {
            return Err(Error::Config(
                "text epochs, batch_size and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Hash of the configuration sections a stage's artifacts depend on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let parts = match stage {
            Stage::Corpus => vec![json(&self.corpus), json(&self.split)],
            Stage::Volumes => vec![json(&self.volumes)],
            Stage::Anchors => vec![self.stage_hash(Stage::Corpus), json(&self.anchors)],
            Stage::Labels => vec![self.stage_hash(Stage::Anchors), json(&self.labels)],
            Stage::Model => vec![
                self.stage_hash(Stage::Labels),
                self.stage_hash(Stage::Volumes),
                json(&self.text),
                json(&self.encoder),
                json(&self.align),
            ],
            Stage::Eval => vec![self.stage_hash(Stage::Model), json(&self.eval)],
        };
        let mut all = vec![stage.name().to_string()];
        all.extend(parts);
        digest(&all)
    }
}
