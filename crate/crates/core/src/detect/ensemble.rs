//! Ensembles of snapshots and the averaged maliciousness score.

use std::path::Path;

use dexprint_nn::{Checkpoint, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decision::{fit_thresholds, Thresholds};
use super::model::{CnnWeights, InferenceCnn};
use super::train::{select_ensemble, train_single, Snapshot, SnapshotSummary, TrainConfig};
use crate::asmparse::AppRepresentation;
use crate::error::{Error, Result};
use crate::fragment::make_fragment;
use crate::seed;

pub struct Ensemble {
    pub members: Vec<Snapshot>,
    engines: Vec<InferenceCnn>,
    pub fragment_len: usize,
    /// Fragments averaged inside each member.
    pub per_app: usize,
}

/// ŷ together with each member's fragment mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub y_hat: f64,
    pub member_means: Vec<f64>,
    /// Per member, per fragment probabilities.
    pub fragment_scores: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn new(
        members: Vec<Snapshot>,
        table: &Tensor<f32>,
        fragment_len: usize,
        per_app: usize,
    ) -> Result<Ensemble> {
        if members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        if per_app == 0 {
            return Err(Error::invalid("per_app must be at least 1"));
        }
        let engines = members
            .iter()
            .map(|m| InferenceCnn::new(&m.weights, m.embedding.as_ref().unwrap_or(table)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(e) = engines.first() {
            if fragment_len < e.kernel() {
                return Err(Error::invalid(
                    "fragment length must cover the kernel width",
                ));
            }
        }
        Ok(Ensemble {
            members,
            engines,
            fragment_len,
            per_app,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// (1/φ) Σ_i mean_f CNN_i(f) over the given fragments.
    pub fn score_fragments(&self, fragments: &[&[u32]]) -> Result<Score> {
        if fragments.is_empty() {
            return Err(Error::invalid("no fragments to score"));
        }
        let fragment_scores = self
            .engines
            .iter()
            .map(|e| {
                Ok(e.predict(fragments)?
                    .into_iter()
                    .map(f64::from)
                    .collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let member_means: Vec<f64> = fragment_scores
            .iter()
            .map(|s| s.iter().sum::<f64>() / s.len() as f64)
            .collect();
        let y_hat = member_means.iter().sum::<f64>() / member_means.len() as f64;
        Ok(Score {
            y_hat,
            member_means,
            fragment_scores,
        })
    }

    /// Scores one app on `per_app` fragments drawn from `fragment_seed`; all
    /// members see the same fragments.
    pub fn score(&self, app: &AppRepresentation, fragment_seed: u64) -> Result<Score> {
        if app.total_tokens() == 0 {
            return Err(Error::Degenerate("app has no in-vocabulary tokens".into()));
        }
        self.score_with(app, fragment_seed)
    }

    fn score_with(&self, app: &AppRepresentation, fragment_seed: u64) -> Result<Score> {
        let mut rng = seed::rng(fragment_seed);
        let frags = (0..self.per_app)
            .map(|_| make_fragment(app, self.fragment_len, &mut rng).map(|f| f.tokens))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[u32]> = frags.iter().map(|f| f.as_slice()).collect();
        self.score_fragments(&refs)
    }

    /// Scores many apps in parallel. Apps without tokens are scored on the
    /// all-PAD fragment and reported as degenerate (`true` in the flag).
    pub fn score_all(
        &self,
        apps: &[&AppRepresentation],
        seeds: &[u64],
    ) -> Result<Vec<(Score, bool)>> {
        if apps.len() != seeds.len() {
            return Err(Error::invalid("one fragment seed per app is required"));
        }
        apps.par_iter()
            .zip(seeds.par_iter())
            .map(|(app, &s)| {
                let degenerate = app.total_tokens() == 0;
                Ok((self.score_with(app, s)?, degenerate))
            })
            .collect()
    }

    /// Writes `member_<i>.ckpt` files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.members.iter().enumerate() {
            let meta = serde_json::json!({
                "run": m.run,
                "epoch": m.epoch,
                "loss_t": m.loss_t,
                "loss_v": m.loss_v,
                "fragment_len": self.fragment_len,
                "per_app": self.per_app,
            });
            let mut ck = m.weights.to_checkpoint(meta);
            if let Some(e) = &m.embedding {
                ck.arrays.push(dexprint_nn::NamedArray {
                    name: "embedding".into(),
                    shape: e.shape().to_vec(),
                    data: e.data().to_vec(),
                });
            }
            let path = dir.join(member_file(i));
            ck.save(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Reads `count` members from `dir`.
    pub fn load(dir: &Path, count: usize, table: &Tensor<f32>) -> Result<Ensemble> {
        let mut members = Vec::with_capacity(count);
        let (mut fragment_len, mut per_app) = (0, 0);
        for i in 0..count {
            let path = dir.join(member_file(i));
            if !path.exists() {
                return Err(Error::MissingInput(path));
            }
            let ck = Checkpoint::load(&path)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let meta = &ck.metadata;
            let field = |k: &str| {
                meta[k]
                    .as_f64()
                    .ok_or_else(|| Error::Data(format!("{}: missing `{k}`", path.display())))
            };
            fragment_len = field("fragment_len")? as usize;
            per_app = field("per_app")? as usize;
            let embedding = ck
                .array("embedding")
                .map(|a| Tensor::new(a.shape.clone(), a.data.clone()))
                .transpose()?;
            members.push(Snapshot {
                run: field("run")? as usize,
                epoch: field("epoch")? as usize,
                loss_t: field("loss_t")?,
                loss_v: field("loss_v")?,
                weights: CnnWeights::from_checkpoint(&ck)?,
                embedding,
            });
        }
        Ensemble::new(members, table, fragment_len, per_app)
    }
}

pub fn member_file(i: usize) -> String {
    format!("member_{i}.ckpt")
}

/// Ensemble-level settings on top of [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub runs: usize,
    pub phi: usize,
    pub per_app: usize,
    pub target_error: f64,
}

pub struct TrainedEnsemble {
    pub ensemble: Ensemble,
    pub thresholds: Thresholds,
    /// ŷ of every validation app, in input order.
    pub valid_scores: Vec<f64>,
    /// Every snapshot produced, selected or not.
    pub snapshots: Vec<SnapshotSummary>,
}

/// Trains `runs` independent models, keeps the best `phi` snapshots, scores
/// the validation apps with the ensemble and fits both thresholds there.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble(
    train: &[&AppRepresentation],
    train_y: &[bool],
    valid: &[&AppRepresentation],
    valid_y: &[bool],
    valid_seeds: &[u64],
    table: &Tensor<f32>,
    cfg: &TrainConfig,
    ens: &EnsembleConfig,
) -> Result<TrainedEnsemble> {
    if ens.runs == 0 {
        return Err(Error::invalid("at least one training run is required"));
    }
    let runs = (0..ens.runs)
        .into_par_iter()
        .map(|run| train_single(train, train_y, valid, valid_y, table, cfg, run))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<Snapshot> = runs.into_iter().flatten().collect();
    let snapshots = all.iter().map(Snapshot::summary).collect();
    let members = select_ensemble(all, ens.phi)?;
    let ensemble = Ensemble::new(members, table, cfg.fragment_len, ens.per_app)?;
    let valid_scores: Vec<f64> = ensemble
        .score_all(valid, valid_seeds)?
        .into_iter()
        .map(|(s, _)| s.y_hat)
        .collect();
    let thresholds = fit_thresholds(&valid_scores, valid_y, ens.target_error)?;
    Ok(TrainedEnsemble {
        ensemble,
        thresholds,
        valid_scores,
        snapshots,
    })
}
