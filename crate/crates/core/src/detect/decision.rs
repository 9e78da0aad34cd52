//! Verdict rules, threshold fitting and detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Malware,
    Benign,
    Uncertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    General,
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// General threshold ζ: malware iff ŷ > ζ.
    pub zeta: f64,
    /// Confidence threshold η ∈ [0.5, 1].
    pub eta: f64,
    pub target_error: f64,
    /// No η on the grid met the error bound; `eta` is then 1.
    pub eta_unqualified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub prob_mal: f64,
    pub prob_ben: f64,
}

pub fn decide(y_hat: f64, thresholds: &Thresholds, strategy: Strategy) -> Decision {
    let (pm, pb) = (y_hat, 1.0 - y_hat);
    let verdict = match strategy {
        Strategy::General => general_verdict(y_hat, thresholds.zeta),
        Strategy::Confidence => confidence_verdict(y_hat, thresholds.eta),
    };
    Decision {
        verdict,
        prob_mal: pm,
        prob_ben: pb,
    }
}

pub fn general_verdict(y_hat: f64, zeta: f64) -> Verdict {
    if y_hat > zeta {
        Verdict::Malware
    } else {
        Verdict::Benign
    }
}

pub fn confidence_verdict(y_hat: f64, eta: f64) -> Verdict {
    let (pm, pb) = (y_hat, 1.0 - y_hat);
    if pm >= eta && pm > pb {
        Verdict::Malware
    } else if pb >= eta && pb > pm {
        Verdict::Benign
    } else {
        Verdict::Uncertain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Confident decisions over all decisions.
    pub coverage: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub uncertain: usize,
    /// Nothing was predicted malware; precision reported as 0.
    pub no_positive_predictions: bool,
    /// No malware among confident decisions; recall reported as 0.
    pub no_positive_labels: bool,
}

impl Metrics {
    pub fn false_positive_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn false_negative_rate(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.uncertain
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// P/R/F1 over confident decisions, coverage over all. `truth` is true for malware.
pub fn metrics<I>(pairs: I) -> Metrics
where
    I: IntoIterator<Item = (Verdict, bool)>,
{
    let mut m = Metrics::default();
    for (v, truth) in pairs {
        match (v, truth) {
            (Verdict::Malware, true) => m.tp += 1,
            (Verdict::Malware, false) => m.fp += 1,
            (Verdict::Benign, false) => m.tn += 1,
            (Verdict::Benign, true) => m.fn_ += 1,
            (Verdict::Uncertain, _) => m.uncertain += 1,
        }
    }
    let total = m.total();
    m.coverage = if total == 0 {
        0.0
    } else {
        (total - m.uncertain) as f64 / total as f64
    };
    m.no_positive_predictions = m.tp + m.fp == 0;
    m.no_positive_labels = m.tp + m.fn_ == 0;
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn_);
    m.f1 = if m.precision + m.recall == 0.0 {
        0.0
    } else {
        2.0 * m.precision * m.recall / (m.precision + m.recall)
    };
    m
}

/// F1 of the general rule at threshold `zeta`.
pub fn general_f1(scores: &[f64], labels: &[bool], zeta: f64) -> f64 {
    metrics(
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &y)| (general_verdict(s, zeta), y)),
    )
    .f1
}

/// Candidate general thresholds: 0, 1 and midpoints between consecutive
/// distinct scores.
pub fn general_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut c = vec![0.0, 1.0];
    c.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

/// ζ maximizing F1 on the validation scores; ties go to the smaller ζ.
pub fn fit_general_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !labels.iter().any(|&y| y) {
        return Err(Error::Degenerate(
            "validation set contains no malware".into(),
        ));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for z in general_candidates(scores) {
        let f1 = general_f1(scores, labels, z);
        if f1 > best.0 {
            best = (f1, z);
        }
    }
    Ok(best.1)
}

/// The η grid `0.500, 0.501, …, 1.000`.
pub fn eta_grid() -> impl Iterator<Item = f64> {
    (500..=1000).map(|i| i as f64 / 1000.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceFit {
    pub eta: f64,
    pub f1: f64,
    pub coverage: f64,
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    pub qualified: bool,
}

pub fn confidence_metrics(scores: &[f64], labels: &[bool], eta: f64) -> Metrics {
    metrics(
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &y)| (confidence_verdict(s, eta), y)),
    )
}

/// η whose confident subset keeps FPR and FNR below `target_error` with the
/// highest F1; ties go to larger coverage, then smaller η.
pub fn fit_confidence_threshold(
    scores: &[f64],
    labels: &[bool],
    target_error: f64,
) -> Result<ConfidenceFit> {
    check_inputs(scores, labels)?;
    if !(target_error > 0.0) {
        return Err(Error::invalid("target error must be positive"));
    }
    let mut best: Option<ConfidenceFit> = None;
    for eta in eta_grid() {
        let m = confidence_metrics(scores, labels, eta);
        let (fpr, fnr) = (m.false_positive_rate(), m.false_negative_rate());
        // a threshold that abstains on every malware app has no defined F1
        if fpr >= target_error || fnr >= target_error || m.no_positive_labels {
            continue;
        }
        let cand = ConfidenceFit {
            eta,
            f1: m.f1,
            coverage: m.coverage,
            false_positive_rate: fpr,
            false_negative_rate: fnr,
            qualified: true,
        };
        let better = match &best {
            None => true,
            Some(b) => cand.f1 > b.f1 || (cand.f1 == b.f1 && cand.coverage > b.coverage),
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.unwrap_or_else(|| {
        let m = confidence_metrics(scores, labels, 1.0);
        ConfidenceFit {
            eta: 1.0,
            f1: m.f1,
            coverage: m.coverage,
            false_positive_rate: m.false_positive_rate(),
            false_negative_rate: m.false_negative_rate(),
            qualified: false,
        }
    }))
}

/// Both thresholds from one validation set.
pub fn fit_thresholds(scores: &[f64], labels: &[bool], target_error: f64) -> Result<Thresholds> {
    let zeta = fit_general_threshold(scores, labels)?;
    let fit = fit_confidence_threshold(scores, labels, target_error)?;
    Ok(Thresholds {
        zeta,
        eta: fit.eta,
        target_error,
        eta_unqualified: !fit.qualified,
    })
}
