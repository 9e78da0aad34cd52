//! Self-training adaptation to drift.
//!
//! Every epoch the current ensemble decides on the new stream with the
//! confidence strategy. Confident apps, labeled by their verdict, form the
//! extension set and join the build set; uncertain apps are carried over into
//! the next epoch's stream. The ensemble is then retrained from scratch on the
//! enlarged build set and the epoch's remaining apps are rescanned.

use std::collections::{BTreeSet, HashMap};

use dexprint_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::asmparse::AppRepresentation;
use crate::corpus::{split_train_valid, Label};
use crate::detect::{
    confidence_verdict, general_verdict, metrics, train_ensemble, Ensemble, EnsembleConfig,
    Metrics, Thresholds, TrainConfig, TrainedEnsemble, Verdict,
};
use crate::error::{Error, Result};
use crate::seed;

/// One app of a stream. `truth` is used for reporting only.
#[derive(Debug, Clone, Copy)]
pub struct StreamApp<'a> {
    pub id: &'a str,
    pub rep: &'a AppRepresentation,
    pub truth: Label,
    pub fragment_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppDecision {
    pub id: String,
    pub y_hat: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    /// Confidence-strategy decisions, in stream order.
    pub decisions: Vec<AppDecision>,
    /// Confident apps with their verdict as label.
    pub exten: Vec<(String, Label)>,
    pub uncertain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEpochReport {
    pub epoch: u32,
    /// Apps decided this epoch: new arrivals plus carried-over ones.
    pub stream_size: usize,
    pub carried_over: usize,
    /// Build set after absorbing this epoch's extension set.
    pub build_size: usize,
    pub exten_size: usize,
    pub uncertain_size: usize,
    /// Initial ensemble, general strategy, whole stream.
    pub f1_no_update: f64,
    /// Current ensemble, general strategy, whole stream.
    pub f1_general: f64,
    /// Current ensemble, confidence strategy, confident subset.
    pub f1_confidence: f64,
    /// Retrained ensemble, general strategy, stream minus the extension set;
    /// absent when every app was absorbed.
    pub f1_update: Option<f64>,
    /// Current ensemble, general strategy, on the apps `f1_update` covers.
    pub f1_before_update: Option<f64>,
    pub update_evaluated: usize,
    pub coverage: f64,
    /// Share of extension apps whose verdict disagrees with the truth.
    pub pseudo_label_error: f64,
    /// Thresholds used for this epoch's decisions.
    pub thresholds: Thresholds,
    /// Thresholds refit after retraining.
    pub refit_thresholds: Thresholds,
}

fn scores(ensemble: &Ensemble, stream: &[StreamApp]) -> Result<Vec<f64>> {
    let reps: Vec<&AppRepresentation> = stream.iter().map(|a| a.rep).collect();
    let seeds: Vec<u64> = stream.iter().map(|a| a.fragment_seed).collect();
    Ok(ensemble
        .score_all(&reps, &seeds)?
        .into_iter()
        .map(|(s, _)| s.y_hat)
        .collect())
}

fn general_metrics(scores: &[f64], stream: &[StreamApp], zeta: f64) -> Metrics {
    metrics(
        scores
            .iter()
            .zip(stream)
            .map(|(&s, a)| (general_verdict(s, zeta), a.truth.is_malware())),
    )
}

/// Decides on a stream with the confidence strategy and collects the
/// extension set.
pub fn run_epoch(
    ensemble: &Ensemble,
    thresholds: &Thresholds,
    stream: &[StreamApp],
) -> Result<EpochOutcome> {
    let ys = scores(ensemble, stream)?;
    Ok(outcome(&ys, stream, thresholds.eta))
}

fn outcome(ys: &[f64], stream: &[StreamApp], eta: f64) -> EpochOutcome {
    let mut out = EpochOutcome {
        decisions: Vec::with_capacity(stream.len()),
        exten: Vec::new(),
        uncertain: Vec::new(),
    };
    for (&y_hat, app) in ys.iter().zip(stream) {
        let verdict = confidence_verdict(y_hat, eta);
        match verdict {
            Verdict::Malware => out.exten.push((app.id.to_string(), Label::Malware)),
            Verdict::Benign => out.exten.push((app.id.to_string(), Label::Benign)),
            Verdict::Uncertain => out.uncertain.push(app.id.to_string()),
        }
        out.decisions.push(AppDecision {
            id: app.id.to_string(),
            y_hat,
            verdict,
        });
    }
    out
}

/// Set union in insertion order; an id already present keeps its first label.
pub fn union_build(old: &[(String, Label)], exten: &[(String, Label)]) -> Vec<(String, Label)> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::with_capacity(old.len() + exten.len());
    for (id, label) in old.iter().chain(exten) {
        if seen.insert(id.as_str()) {
            out.push((id.clone(), *label));
        }
    }
    out
}

/// Everything needed to train an ensemble on a set of labeled ids.
pub struct BuildContext<'a> {
    pub reps: &'a HashMap<String, AppRepresentation>,
    pub table: &'a Tensor<f32>,
    pub train: &'a TrainConfig,
    pub ensemble: &'a EnsembleConfig,
    /// Fragment seed of an app id.
    pub fragment_seed: &'a (dyn Fn(&str) -> u64 + Sync),
}

/// Retrains from scratch on `build`, split 80/20 by label with `split_seed`.
pub fn rebuild(
    build: &[(String, Label)],
    ctx: &BuildContext,
    split_seed: u64,
) -> Result<TrainedEnsemble> {
    let (train_ids, valid_ids) = split_train_valid(build, split_seed)?;
    let labels: HashMap<&str, Label> = build.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let gather = |ids: &[String]| -> Result<(Vec<&AppRepresentation>, Vec<bool>)> {
        ids.iter()
            .map(|id| {
                let rep = ctx
                    .reps
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("no representation for app `{id}`")))?;
                Ok((rep, labels[id.as_str()].is_malware()))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().unzip())
    };
    let (train, train_y) = gather(&train_ids)?;
    let (valid, valid_y) = gather(&valid_ids)?;
    let valid_seeds: Vec<u64> = valid_ids.iter().map(|id| (ctx.fragment_seed)(id)).collect();
    train_ensemble(
        &train,
        &train_y,
        &valid,
        &valid_y,
        &valid_seeds,
        ctx.table,
        ctx.train,
        ctx.ensemble,
    )
}

/// General-strategy metrics of `ensemble` over the archived apps that were
/// not absorbed into the build set; `None` when nothing is left.
pub fn revisit(
    archive: &[StreamApp],
    absorbed: &BTreeSet<&str>,
    ensemble: &Ensemble,
    thresholds: &Thresholds,
) -> Result<Option<Metrics>> {
    let left: Vec<StreamApp> = archive
        .iter()
        .filter(|a| !absorbed.contains(a.id))
        .copied()
        .collect();
    if left.is_empty() {
        return Ok(None);
    }
    let ys = scores(ensemble, &left)?;
    Ok(Some(general_metrics(&ys, &left, thresholds.zeta)))
}

/// Runs the loop over `epochs` (each a list of newly arrived apps), starting
/// from the initial build set and its trained ensemble.
pub fn run_adaptation(
    epochs: &[(u32, Vec<StreamApp>)],
    initial_build: &[(String, Label)],
    initial: TrainedEnsemble,
    ctx: &BuildContext,
    root: u64,
) -> Result<Vec<AdaptationEpochReport>> {
    let frozen = &initial;
    let mut build: Vec<(String, Label)> = union_build(initial_build, &[]);
    let mut current: Option<TrainedEnsemble> = None;
    let mut carry: Vec<StreamApp> = Vec::new();
    let mut reports = Vec::with_capacity(epochs.len());
    for (epoch, arrivals) in epochs {
        let carried_over = carry.len();
        let stream: Vec<StreamApp> = carry.drain(..).chain(arrivals.iter().copied()).collect();
        if stream.is_empty() {
            return Err(Error::Degenerate(format!("epoch {epoch} has no apps")));
        }
        let active = current.as_ref().unwrap_or(frozen);
        let frozen_ys = scores(&frozen.ensemble, &stream)?;
        let m_nu = general_metrics(&frozen_ys, &stream, frozen.thresholds.zeta);
        let f1_no_update = m_nu.f1;
        let ys = if current.is_some() {
            scores(&active.ensemble, &stream)?
        } else {
            frozen_ys
        };
        let m_g = general_metrics(&ys, &stream, active.thresholds.zeta);
        let f1_general = m_g.f1;
        let conf = metrics(ys.iter().zip(&stream).map(|(&s, a)| {
            (
                confidence_verdict(s, active.thresholds.eta),
                a.truth.is_malware(),
            )
        }));
        let out = outcome(&ys, &stream, active.thresholds.eta);
        let truth: HashMap<&str, Label> = stream.iter().map(|a| (a.id, a.truth)).collect();
        let wrong = out
            .exten
            .iter()
            .filter(|(id, l)| truth[id.as_str()] != *l)
            .count();
        let thresholds = active.thresholds;

        build = union_build(&build, &out.exten);
        let split_seed = seed::derive_indexed(root, "adapt.split", u64::from(*epoch));
        let train = TrainConfig {
            seed: seed::derive_indexed(root, "adapt.train", u64::from(*epoch)),
            ..ctx.train.clone()
        };
        let round = BuildContext {
            train: &train,
            ..*ctx
        };
        let rebuilt = rebuild(&build, &round, split_seed)?;

        let absorbed: BTreeSet<&str> = out.exten.iter().map(|(id, _)| id.as_str()).collect();
        let update = revisit(&stream, &absorbed, &rebuilt.ensemble, &rebuilt.thresholds)?;
        let before = {
            let (ys, left): (Vec<f64>, Vec<StreamApp>) = ys
                .iter()
                .zip(&stream)
                .filter(|(_, a)| !absorbed.contains(a.id))
                .map(|(&y, a)| (y, *a))
                .unzip();
            (!left.is_empty()).then(|| general_metrics(&ys, &left, thresholds.zeta).f1)
        };
        let uncertain: BTreeSet<&str> = out.uncertain.iter().map(String::as_str).collect();
        carry = stream
            .iter()
            .filter(|a| uncertain.contains(a.id))
            .copied()
            .collect();

        let report = AdaptationEpochReport {
            epoch: *epoch,
            stream_size: stream.len(),
            carried_over,
            build_size: build.len(),
            exten_size: out.exten.len(),
            uncertain_size: out.uncertain.len(),
            f1_no_update,
            f1_general,
            f1_confidence: conf.f1,
            f1_update: update.map(|m| m.f1),
            f1_before_update: before,
            update_evaluated: stream.len() - absorbed.len(),
            coverage: conf.coverage,
            pseudo_label_error: if out.exten.is_empty() {
                0.0
            } else {
                wrong as f64 / out.exten.len() as f64
            },
            thresholds,
            refit_thresholds: rebuilt.thresholds,
        };
        log::info!(
            "adapt epoch {}: no-update {:.3} general {:.3} confidence {:.3} update {:?} coverage {:.3}",
            report.epoch,
            report.f1_no_update,
            report.f1_general,
            report.f1_confidence,
            report.f1_update,
            report.coverage
        );
        reports.push(report);
        current = Some(rebuilt);
    }
    Ok(reports)
}
