//! Run configuration: every hyperparameter of the pipeline in one tree.
//!
//! Defaults are the desk-scale settings. Every stage writes the resolved
//! configuration next to its outputs, and all random streams are derived from
//! the single root `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::KneeRule;
use crate::corpus::GeneratorProfile;
use crate::detect::TrainConfig;
use crate::digest::DigestConfig;
use crate::error::{Error, Result};
use crate::featurize::HashConfig;
use crate::inst2vec::{Inst2VecConfig, Objective};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    /// Share of the initial apps used for building; the rest is tested.
    pub build_ratio: f64,
    pub embed: EmbedSection,
    pub detect: DetectSection,
    pub featurize: FeaturizeSection,
    pub digest: DigestSection,
    pub cluster: ClusterSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub malware: usize,
    pub benign: usize,
    pub families: usize,
    pub profile: GeneratorProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub objective: Option<Objective>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub fragment_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Ensemble size φ.
    pub phi: usize,
    /// Independent training runs pooled before snapshot selection.
    pub runs: usize,
    /// Fragments averaged per app and member at inference.
    pub per_app: usize,
    pub valid_fragments: usize,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: [usize; 2],
    pub fine_tune_embeddings: bool,
    pub target_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeSection {
    /// N-gram length.
    pub n: usize,
    /// Hash length L; `None` means the vocabulary size.
    pub dim: Option<usize>,
    pub signed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigestSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub min_pts: usize,
    /// Fixed radius; `None` picks it from the k-distance knee.
    pub eps: Option<f64>,
    pub knee: KneeRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            corpus: CorpusSection::default(),
            build_ratio: 0.5,
            embed: EmbedSection::default(),
            detect: DetectSection::default(),
            featurize: FeaturizeSection::default(),
            digest: DigestSection::default(),
            cluster: ClusterSection::default(),
        }
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            malware: 1000,
            benign: 1000,
            families: 10,
            profile: GeneratorProfile::default(),
        }
    }
}

impl Default for EmbedSection {
    fn default() -> Self {
        let d = Inst2VecConfig::default();
        EmbedSection {
            dim: d.dim,
            window: d.window,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            objective: d.objective,
        }
    }
}

impl Default for DetectSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        DetectSection {
            fragment_len: t.fragment_len,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            phi: 3,
            runs: 1,
            per_app: 6,
            valid_fragments: t.valid_fragments,
            filters: t.filters,
            kernel: t.kernel,
            hidden: t.hidden,
            fine_tune_embeddings: t.fine_tune_embeddings,
            target_error: 0.01,
        }
    }
}

impl Default for FeaturizeSection {
    fn default() -> Self {
        FeaturizeSection {
            n: 4,
            dim: None,
            signed: true,
        }
    }
}

impl Default for DigestSection {
    fn default() -> Self {
        let d = DigestConfig::default();
        DigestSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
        }
    }
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            min_pts: crate::cluster::DEFAULT_MIN_PTS,
            eps: None,
            knee: KneeRule::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.profile.validate()?;
        if !(self.build_ratio > 0.0 && self.build_ratio < 1.0) {
            return Err(Error::invalid("build_ratio must lie in (0, 1)"));
        }
        let d = &self.detect;
        if d.phi == 0 || d.runs == 0 || d.per_app == 0 || d.epochs == 0 {
            return Err(Error::invalid(
                "phi, runs, per_app and epochs must be positive",
            ));
        }
        if d.phi > d.runs * d.epochs {
            return Err(Error::invalid(format!(
                "phi = {} exceeds the {} snapshots produced",
                d.phi,
                d.runs * d.epochs
            )));
        }
        if !(d.target_error > 0.0 && d.target_error <= 1.0) {
            return Err(Error::invalid("target_error must lie in (0, 1]"));
        }
        if self.featurize.n == 0 || self.featurize.dim == Some(0) {
            return Err(Error::invalid(
                "n-gram length and hash length must be positive",
            ));
        }
        if self.cluster.min_pts == 0 {
            return Err(Error::invalid("min_pts must be positive"));
        }
        if self.cluster.eps.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive_seed(self.seed, stage)
    }

    pub fn inst2vec(&self) -> Inst2VecConfig {
        let e = &self.embed;
        Inst2VecConfig {
            dim: e.dim,
            window: e.window,
            epochs: e.epochs,
            learning_rate: e.learning_rate,
            batch_size: e.batch_size,
            objective: e.objective,
            seed: self.stage_seed("inst2vec"),
        }
    }

    /// Training settings; `stage` separates retraining rounds.
    pub fn train(&self, stage: &str) -> TrainConfig {
        let d = &self.detect;
        TrainConfig {
            fragment_len: d.fragment_len,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            valid_fragments: d.valid_fragments,
            filters: d.filters,
            kernel: d.kernel,
            hidden: d.hidden,
            fine_tune_embeddings: d.fine_tune_embeddings,
            seed: self.stage_seed(stage),
        }
    }

    pub fn hash(&self, vocab_size: usize) -> HashConfig {
        HashConfig {
            dim: self.featurize.dim.unwrap_or(vocab_size),
            seed: self.stage_seed("hash"),
            signed: self.featurize.signed,
        }
    }

    pub fn digest(&self) -> DigestConfig {
        DigestConfig {
            epochs: self.digest.epochs,
            batch_size: self.digest.batch_size,
            learning_rate: self.digest.learning_rate,
            seed: self.stage_seed("digest"),
        }
    }
}
