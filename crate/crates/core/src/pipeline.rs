//! Pipeline stages over a run directory.
//!
//! Layout (every stage directory also holds `config.json`, the configuration
//! it ran with):
//!
//! ```text
//! <run>/config.json            last configuration used
//! <run>/corpus/                gen-corpus: manifest.jsonl, apps/, platform_assets.txt, profile.json
//! <run>/vocab/                 build-vocab: vocab.json, split.json
//! <run>/embed/                 train-embed: inst2vec.ckpt
//! <run>/ensemble/              train-detect: member_<i>.ckpt, ensemble.json
//! <run>/detect/                detect: general.jsonl, confidence.jsonl, metrics.json
//! <run>/cluster/               cluster: report.json, autoencoder.ckpt
//! <run>/adapt/                 adapt: epochs.jsonl
//! <run>/transformed/<kind>/    transform: a corpus holding the rewritten test apps
//! ```
//!
//! Stages only communicate through these files. A stage builds its output
//! in a hidden sibling directory and renames it into place on success, so a
//! failed stage leaves no partial output behind.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dexprint_nn::{Checkpoint, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{run_adaptation, AdaptationEpochReport, BuildContext, StreamApp};
use crate::asmparse::{parse, platform_assets, tokenize, AppRepresentation, Vocabulary};
use crate::cluster::{self, ClusterReport};
use crate::config::RunConfig;
use crate::corpus::{
    self, generate_corpus, load_corpus, split_dataset, transform, AppRecord, DatasetSplit, Label,
    TransformKind,
};
use crate::detect::{
    confidence_verdict, general_verdict, member_file, metrics, train_ensemble, Ensemble,
    EnsembleConfig, Metrics, SnapshotSummary, Strategy, Thresholds, TrainedEnsemble, Verdict,
};
use crate::digest::{self, AutoEncoder};
use crate::error::{Error, Result};
use crate::featurize::{featurize, CollisionReport};
use crate::inst2vec::{train_embeddings, EmbeddingTable};
use crate::seed;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SPLIT_FILE: &str = "split.json";
pub const EMBED_FILE: &str = "inst2vec.ckpt";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const CLUSTER_FILE: &str = "report.json";
pub const AUTOENCODER_FILE: &str = "autoencoder.ckpt";
pub const ADAPT_FILE: &str = "epochs.jsonl";

/// Paths of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> RunDir {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn vocab_dir(&self) -> PathBuf {
        self.root.join("vocab")
    }

    pub fn vocab(&self) -> PathBuf {
        self.vocab_dir().join(VOCAB_FILE)
    }

    pub fn split(&self) -> PathBuf {
        self.vocab_dir().join(SPLIT_FILE)
    }

    pub fn embed_dir(&self) -> PathBuf {
        self.root.join("embed")
    }

    pub fn embed(&self) -> PathBuf {
        self.embed_dir().join(EMBED_FILE)
    }

    pub fn ensemble(&self) -> PathBuf {
        self.root.join("ensemble")
    }

    pub fn detect(&self) -> PathBuf {
        self.root.join("detect")
    }

    pub fn report(&self, detect_dir: &Path, strategy: Strategy) -> PathBuf {
        detect_dir.join(match strategy {
            Strategy::General => "general.jsonl",
            Strategy::Confidence => "confidence.jsonl",
        })
    }

    pub fn cluster(&self) -> PathBuf {
        self.root.join("cluster")
    }

    pub fn adapt(&self) -> PathBuf {
        self.root.join("adapt")
    }

    pub fn transformed(&self, kind: TransformKind) -> PathBuf {
        self.root.join("transformed").join(kind.name())
    }
}

/// Runs `body` against a fresh hidden directory next to `target` and moves
/// it into place on success; on failure the hidden directory is removed.
fn staged<T>(target: &Path, cfg: &RunConfig, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let parent = target.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stage".into());
    let tmp = parent.join(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let result = cfg.save(&tmp.join(CONFIG_FILE)).and_then(|_| body(&tmp));
    match result {
        Ok(v) => {
            if target.exists() {
                fs::remove_dir_all(target).map_err(|e| Error::io(target, e))?;
            }
            fs::rename(&tmp, target).map_err(|e| Error::io(target, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Records the configuration at the top of the run directory.
pub fn snapshot_config(run: &RunDir, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    cfg.save(&run.config())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub apps: usize,
    pub malware: usize,
    pub benign: usize,
    pub assets: usize,
    pub epochs: u32,
}

/// gen-corpus: draws the synthetic corpus into `<run>/corpus`.
pub fn gen_corpus(run: &RunDir, cfg: &RunConfig) -> Result<CorpusSummary> {
    cfg.validate()?;
    snapshot_config(run, cfg)?;
    let c = &cfg.corpus;
    let (records, world) = generate_corpus(
        &c.profile,
        c.malware,
        c.benign,
        c.families,
        cfg.stage_seed("corpus"),
    )?;
    let assets = world.assets();
    staged(&run.corpus(), cfg, |dir| {
        corpus::write_corpus(dir, &records, &assets)?;
        write_json(&dir.join(corpus::PROFILE_FILE), &c.profile)?;
        Ok(CorpusSummary {
            apps: records.len(),
            malware: records.iter().filter(|r| r.label.is_malware()).count(),
            benign: records.iter().filter(|r| !r.label.is_malware()).count(),
            assets: assets.len(),
            epochs: c.profile.epochs,
        })
    })
}

fn initial_records(records: &[AppRecord]) -> Vec<AppRecord> {
    records
        .iter()
        .filter(|r| r.epoch_tag == 0)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSummary {
    pub assets: usize,
    pub table_rows: usize,
    /// Where the names came from: the asset list or the build apps.
    pub source: String,
    pub build: usize,
    pub test: usize,
}

/// build-vocab: splits the epoch-0 apps into build and test halves and maps
/// platform assets to ids. The asset list shipped with the corpus is used
/// when present; otherwise the assets referenced by build apps are.
pub fn build_vocab(run: &RunDir, cfg: &RunConfig) -> Result<VocabSummary> {
    cfg.validate()?;
    snapshot_config(run, cfg)?;
    let corpus_dir = run.corpus();
    let records = load_corpus(&corpus_dir)?;
    let split = split_dataset(
        &initial_records(&records),
        cfg.build_ratio,
        cfg.stage_seed("split"),
    )?;
    let assets_path = corpus_dir.join(corpus::ASSETS_FILE);
    let (vocab, source) = if assets_path.exists() {
        let text = fs::read_to_string(&assets_path).map_err(|e| Error::io(&assets_path, e))?;
        (Vocabulary::from_asset_list(&text), "asset_list")
    } else {
        let by_id: HashMap<&str, &AppRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut names = std::collections::BTreeSet::new();
        for id in &split.build_ids {
            names.extend(platform_assets(&parse(&by_id[id.as_str()].source_text)?));
        }
        (Vocabulary::from_names(names), "build_apps")
    };
    if vocab.is_empty() {
        return Err(Error::Vocabulary("no platform assets found".into()));
    }
    staged(&run.vocab_dir(), cfg, |dir| {
        vocab.save(&dir.join(VOCAB_FILE))?;
        write_json(&dir.join(SPLIT_FILE), &split)?;
        Ok(VocabSummary {
            assets: vocab.len(),
            table_rows: vocab.table_size(),
            source: source.into(),
            build: split.build_ids.len(),
            test: split.test_ids.len(),
        })
    })
}

/// Everything later stages load from earlier ones.
pub struct Loaded {
    pub records: Vec<AppRecord>,
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub reps: HashMap<String, AppRepresentation>,
}

impl Loaded {
    pub fn record(&self, id: &str) -> Result<&AppRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Data(format!("unknown app `{id}`")))
    }

    pub fn rep(&self, id: &str) -> Result<&AppRepresentation> {
        self.reps
            .get(id)
            .ok_or_else(|| Error::Data(format!("unknown app `{id}`")))
    }

    fn labels(&self) -> HashMap<&str, Label> {
        self.records
            .iter()
            .map(|r| (r.id.as_str(), r.label))
            .collect()
    }
}

/// Parses and tokenizes every record in parallel.
pub fn represent(
    records: &[AppRecord],
    vocab: &Vocabulary,
) -> Result<HashMap<String, AppRepresentation>> {
    records
        .par_iter()
        .map(|r| {
            let program = parse(&r.source_text).map_err(|e| match e {
                Error::Parse { line, message } => Error::Parse {
                    line,
                    message: format!("app `{}`: {message}", r.id),
                },
                other => other,
            })?;
            Ok((r.id.clone(), tokenize(&program, vocab)))
        })
        .collect()
}

pub fn load_inputs(run: &RunDir) -> Result<Loaded> {
    let vocab = Vocabulary::load(&run.vocab())?;
    let split: DatasetSplit = read_json(&run.split())?;
    let records = load_corpus(&run.corpus())?;
    let reps = represent(&records, &vocab)?;
    Ok(Loaded {
        records,
        split,
        vocab,
        reps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub rows: usize,
    pub dim: usize,
    pub streams: usize,
    pub epoch_losses: Vec<f64>,
}

/// train-embed: skip-gram embeddings over the method sequences of the build apps.
pub fn train_embed(run: &RunDir, cfg: &RunConfig) -> Result<EmbedSummary> {
    cfg.validate()?;
    snapshot_config(run, cfg)?;
    let data = load_inputs(run)?;
    let mut streams: Vec<&[u32]> = Vec::new();
    for id in &data.split.build_ids {
        streams.extend(data.rep(id)?.token_streams());
    }
    let table = train_embeddings(&streams, data.vocab.table_size(), &cfg.inst2vec())?;
    staged(&run.embed_dir(), cfg, |dir| {
        let path = dir.join(EMBED_FILE);
        table
            .to_checkpoint()
            .save(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(EmbedSummary {
            rows: table.rows(),
            dim: table.dim(),
            streams: streams.len(),
            epoch_losses: table.epoch_losses.clone(),
        })
    })
}

pub fn load_embedding(run: &RunDir) -> Result<EmbeddingTable> {
    let path = run.embed();
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let ck =
        Checkpoint::load(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    EmbeddingTable::from_checkpoint(&ck)
}

/// Fragment seed of an app; keyed by id so that it does not depend on order.
pub fn fragment_seed(cfg: &RunConfig, id: &str) -> u64 {
    seed::derive_seed(cfg.stage_seed("score"), id)
}

fn ensemble_config(cfg: &RunConfig) -> EnsembleConfig {
    EnsembleConfig {
        runs: cfg.detect.runs,
        phi: cfg.detect.phi,
        per_app: cfg.detect.per_app,
        target_error: cfg.detect.target_error,
    }
}

/// Contents of `ensemble.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleInfo {
    pub phi: usize,
    pub fragment_len: usize,
    pub per_app: usize,
    pub thresholds: Thresholds,
    pub members: Vec<SnapshotSummary>,
    pub snapshots: Vec<SnapshotSummary>,
    pub valid_general: Metrics,
    pub valid_confidence: Metrics,
}

fn verdict_metrics(scores: &[f64], labels: &[bool], strategy: Strategy, t: &Thresholds) -> Metrics {
    metrics(scores.iter().zip(labels).map(|(&s, &y)| {
        let v = match strategy {
            Strategy::General => general_verdict(s, t.zeta),
            Strategy::Confidence => confidence_verdict(s, t.eta),
        };
        (v, y)
    }))
}

fn train_on(
    data: &Loaded,
    train_ids: &[String],
    valid_ids: &[String],
    table: &Tensor<f32>,
    cfg: &RunConfig,
) -> Result<(TrainedEnsemble, Vec<bool>)> {
    let labels = data.labels();
    let gather = |ids: &[String]| -> Result<(Vec<&AppRepresentation>, Vec<bool>)> {
        let mut reps = Vec::with_capacity(ids.len());
        let mut ys = Vec::with_capacity(ids.len());
        for id in ids {
            reps.push(data.rep(id)?);
            ys.push(labels[id.as_str()].is_malware());
        }
        Ok((reps, ys))
    };
    let (train, train_y) = gather(train_ids)?;
    let (valid, valid_y) = gather(valid_ids)?;
    let seeds: Vec<u64> = valid_ids.iter().map(|id| fragment_seed(cfg, id)).collect();
    let trained = train_ensemble(
        &train,
        &train_y,
        &valid,
        &valid_y,
        &seeds,
        table,
        &cfg.train("detect"),
        &ensemble_config(cfg),
    )?;
    Ok((trained, valid_y))
}

/// train-detect: trains the CNN, selects the ensemble and fits ζ and η on
/// the validation apps.
pub fn train_detect(run: &RunDir, cfg: &RunConfig) -> Result<EnsembleInfo> {
    cfg.validate()?;
    snapshot_config(run, cfg)?;
    let data = load_inputs(run)?;
    let table = load_embedding(run)?;
    if table.rows() != data.vocab.table_size() {
        return Err(Error::Data(format!(
            "embedding has {} rows but the vocabulary needs {}",
            table.rows(),
            data.vocab.table_size()
        )));
    }
    let (trained, valid_y) = train_on(
        &data,
        &data.split.train_ids,
        &data.split.valid_ids,
        &table.input,
        cfg,
    )?;
    let info = ensemble_info(&trained, &valid_y);
    staged(&run.ensemble(), cfg, |dir| {
        trained.ensemble.save(dir)?;
        write_json(&dir.join(ENSEMBLE_FILE), &info)?;
        Ok(info.clone())
    })
}

fn ensemble_info(trained: &TrainedEnsemble, valid_y: &[bool]) -> EnsembleInfo {
    let e = &trained.ensemble;
    EnsembleInfo {
        phi: e.len(),
        fragment_len: e.fragment_len,
        per_app: e.per_app,
        thresholds: trained.thresholds,
        members: e.members.iter().map(|m| m.summary()).collect(),
        snapshots: trained.snapshots.clone(),
        valid_general: verdict_metrics(
            &trained.valid_scores,
            valid_y,
            Strategy::General,
            &trained.thresholds,
        ),
        valid_confidence: verdict_metrics(
            &trained.valid_scores,
            valid_y,
            Strategy::Confidence,
            &trained.thresholds,
        ),
    }
}

/// Loads the trained ensemble and its thresholds.
pub fn load_ensemble(run: &RunDir) -> Result<(Ensemble, EnsembleInfo)> {
    let dir = run.ensemble();
    let first = dir.join(member_file(0));
    if !first.exists() {
        return Err(Error::MissingInput(first));
    }
    let info_path = dir.join(ENSEMBLE_FILE);
    if !info_path.exists() {
        return Err(Error::MissingInput(info_path));
    }
    let info: EnsembleInfo = read_json(&info_path)?;
    let table = load_embedding(run)?;
    let ensemble = Ensemble::load(&dir, info.phi, &table.input)?;
    Ok((ensemble, info))
}

/// One line of a detection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub id: String,
    pub y_hat: f64,
    pub verdict: Verdict,
    pub strategy: Strategy,
    pub member_means: Vec<f64>,
    /// The app had no in-vocabulary token and was scored on padding.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub apps: usize,
    pub general: Metrics,
    pub confidence: Metrics,
}

/// Scores `records` and returns the general and confidence report lines.
pub fn score_records(
    ensemble: &Ensemble,
    thresholds: &Thresholds,
    records: &[&AppRecord],
    vocab: &Vocabulary,
    cfg: &RunConfig,
) -> Result<(Vec<ReportLine>, Vec<ReportLine>)> {
    let owned: Vec<AppRecord> = records.iter().map(|r| (*r).clone()).collect();
    let reps = represent(&owned, vocab)?;
    let apps: Vec<&AppRepresentation> = records.iter().map(|r| &reps[&r.id]).collect();
    let seeds: Vec<u64> = records.iter().map(|r| fragment_seed(cfg, &r.id)).collect();
    let scored = ensemble.score_all(&apps, &seeds)?;
    let mut general = Vec::with_capacity(records.len());
    let mut confidence = Vec::with_capacity(records.len());
    for (r, (score, degenerate)) in records.iter().zip(scored) {
        let line = |strategy, verdict| ReportLine {
            id: r.id.clone(),
            y_hat: score.y_hat,
            verdict,
            strategy,
            member_means: score.member_means.clone(),
            degenerate,
        };
        general.push(line(
            Strategy::General,
            general_verdict(score.y_hat, thresholds.zeta),
        ));
        confidence.push(line(
            Strategy::Confidence,
            confidence_verdict(score.y_hat, thresholds.eta),
        ));
    }
    Ok((general, confidence))
}

/// Metrics of report lines against true labels.
pub fn report_metrics(lines: &[ReportLine], labels: &HashMap<String, Label>) -> Result<Metrics> {
    let pairs = lines
        .iter()
        .map(|l| {
            labels
                .get(&l.id)
                .map(|lab| (l.verdict, lab.is_malware()))
                .ok_or_else(|| Error::Data(format!("app `{}` is not in the manifest", l.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics(pairs))
}

/// detect: scores the test apps, or every app of `input` that is not in the
/// build set, and writes both reports into `out` (default `<run>/detect`).
pub fn detect(
    run: &RunDir,
    cfg: &RunConfig,
    input: Option<&Path>,
    out: Option<&Path>,
) -> Result<DetectSummary> {
    cfg.validate()?;
    let (ensemble, info) = load_ensemble(run)?;
    snapshot_config(run, cfg)?;
    let vocab = Vocabulary::load(&run.vocab())?;
    let split: DatasetSplit = read_json(&run.split())?;
    let records = match input {
        Some(dir) => load_corpus(dir)?,
        None => load_corpus(&run.corpus())?,
    };
    let chosen: Vec<&AppRecord> = match input {
        Some(_) => records
            .iter()
            .filter(|r| split.build_ids.binary_search(&r.id).is_err())
            .collect(),
        None => {
            let by_id: HashMap<&str, &AppRecord> =
                records.iter().map(|r| (r.id.as_str(), r)).collect();
            split
                .test_ids
                .iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::Data(format!("test app `{id}` is not in the corpus")))
                })
                .collect::<Result<_>>()?
        }
    };
    if chosen.is_empty() {
        return Err(Error::Degenerate("no apps to detect".into()));
    }
    let (general, confidence) = score_records(&ensemble, &info.thresholds, &chosen, &vocab, cfg)?;
    let labels: HashMap<String, Label> = chosen.iter().map(|r| (r.id.clone(), r.label)).collect();
    let summary = DetectSummary {
        apps: chosen.len(),
        general: report_metrics(&general, &labels)?,
        confidence: report_metrics(&confidence, &labels)?,
    };
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| run.detect());
    staged(&target, cfg, |dir| {
        write_jsonl(&run.report(dir, Strategy::General), &general)?;
        write_jsonl(&run.report(dir, Strategy::Confidence), &confidence)?;
        write_json(&dir.join(METRICS_FILE), &summary)?;
        Ok(summary.clone())
    })
}

pub fn read_report(path: &Path) -> Result<Vec<ReportLine>> {
    read_jsonl(path)
}

/// eval: metrics of a detection report against a corpus manifest.
pub fn evaluate(report: &Path, manifest: &Path) -> Result<Metrics> {
    let lines = read_report(report)?;
    let labels: HashMap<String, Label> = corpus::read_manifest(manifest)?
        .into_iter()
        .map(|e| (e.id, e.label))
        .collect();
    report_metrics(&lines, &labels)
}

/// Contents of `<run>/cluster/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutput {
    pub apps: usize,
    pub hash_dim: usize,
    pub n: usize,
    /// Family per clustered app; `benign` marks a false positive.
    pub families: Vec<String>,
    pub collisions: CollisionReport,
    pub digest_losses: Vec<f64>,
    pub clustering: ClusterReport,
}

/// Family label of a detected app; false positives form their own group.
pub const FALSE_POSITIVE_FAMILY: &str = "benign";

/// cluster: hashes the apps detected as malware under the general strategy,
/// compresses them with the auto-encoder and clusters the digests.
pub fn cluster(run: &RunDir, cfg: &RunConfig) -> Result<ClusterOutput> {
    cfg.validate()?;
    let report_path = run.report(&run.detect(), Strategy::General);
    if !report_path.exists() {
        return Err(Error::MissingInput(report_path));
    }
    snapshot_config(run, cfg)?;
    let lines = read_report(&report_path)?;
    let vocab = Vocabulary::load(&run.vocab())?;
    let records = load_corpus(&run.corpus())?;
    let by_id: HashMap<&str, &AppRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let detected: Vec<AppRecord> = lines
        .iter()
        .filter(|l| l.verdict == Verdict::Malware)
        .map(|l| {
            by_id
                .get(l.id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Data(format!("reported app `{}` is not in the corpus", l.id)))
        })
        .collect::<Result<_>>()?;
    if detected.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} detected malware app(s); clustering needs at least 2",
            detected.len()
        )));
    }
    let reps = represent(&detected, &vocab)?;
    let hash = cfg.hash(vocab.len());
    let n = cfg.featurize.n;
    let vectors = detected
        .par_iter()
        .map(|r| featurize(&reps[&r.id], n, hash))
        .collect::<Result<Vec<_>>>()?;
    let collisions =
        crate::featurize::collision_report(detected.iter().map(|r| &reps[&r.id]), n, hash)?;
    let rows: Vec<&[f32]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let ae = digest::train_autoencoder(&rows, &cfg.digest())?;
    let digests = ae.encode_batch(&rows)?;
    let points: Vec<&[f32]> = digests.iter().map(Vec::as_slice).collect();
    let ids: Vec<String> = detected.iter().map(|r| r.id.clone()).collect();
    let families: Vec<String> = detected
        .iter()
        .map(|r| {
            r.family
                .clone()
                .unwrap_or_else(|| FALSE_POSITIVE_FAMILY.into())
        })
        .collect();
    let clustering = cluster::report(
        &ids,
        &points,
        Some(&families),
        cfg.cluster.eps,
        cfg.cluster.min_pts,
        cfg.cluster.knee,
    )?;
    let output = ClusterOutput {
        apps: ids.len(),
        hash_dim: hash.dim,
        n,
        families,
        collisions,
        digest_losses: ae.epoch_losses.clone(),
        clustering,
    };
    staged(&run.cluster(), cfg, |dir| {
        let path = dir.join(AUTOENCODER_FILE);
        ae.to_checkpoint()
            .save(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        write_json(&dir.join(CLUSTER_FILE), &output)?;
        Ok(output.clone())
    })
}

pub fn load_autoencoder(path: &Path) -> Result<AutoEncoder> {
    let ck = Checkpoint::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    AutoEncoder::from_checkpoint(&ck)
}

/// transform: rewrites the test apps with `kind` into a new corpus directory
/// (default `<run>/transformed/<kind>`) that shares the asset list.
pub fn transform_corpus(
    run: &RunDir,
    cfg: &RunConfig,
    kind: TransformKind,
    out: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let split: DatasetSplit = read_json(&run.split())?;
    let records = load_corpus(&run.corpus())?;
    let root = cfg.stage_seed("transform");
    let rewritten = records
        .par_iter()
        .filter(|r| split.test_ids.binary_search(&r.id).is_ok())
        .map(|r| transform(r, kind, seed::derive_seed(root, &r.id)))
        .collect::<Result<Vec<_>>>()?;
    let assets_path = run.corpus().join(corpus::ASSETS_FILE);
    let assets: Vec<String> = match fs::read_to_string(&assets_path) {
        Ok(text) => text.lines().map(str::to_string).collect(),
        Err(_) => Vec::new(),
    };
    let target = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.transformed(kind));
    staged(&target, cfg, |dir| {
        corpus::write_corpus(dir, &rewritten, &assets)
    })?;
    Ok(target)
}

/// adapt: self-training over the drift epochs of the corpus (epoch tags ≥ 1),
/// starting from the trained ensemble and the build set.
pub fn adapt(run: &RunDir, cfg: &RunConfig) -> Result<Vec<AdaptationEpochReport>> {
    cfg.validate()?;
    let (ensemble, info) = load_ensemble(run)?;
    snapshot_config(run, cfg)?;
    let data = load_inputs(run)?;
    let table = load_embedding(run)?;
    let labels = data.labels();
    let mut epochs: BTreeMap<u32, Vec<&AppRecord>> = BTreeMap::new();
    for r in data.records.iter().filter(|r| r.epoch_tag > 0) {
        epochs.entry(r.epoch_tag).or_default().push(r);
    }
    if epochs.is_empty() {
        return Err(Error::Degenerate(
            "the corpus has no drift epochs (epoch_tag > 0)".into(),
        ));
    }
    let streams: Vec<(u32, Vec<StreamApp>)> = epochs
        .iter()
        .map(|(&t, rs)| {
            let apps = rs
                .iter()
                .map(|r| StreamApp {
                    id: &r.id,
                    rep: &data.reps[&r.id],
                    truth: r.label,
                    fragment_seed: fragment_seed(cfg, &r.id),
                })
                .collect();
            (t, apps)
        })
        .collect();
    let build: Vec<(String, Label)> = data
        .split
        .build_ids
        .iter()
        .map(|id| (id.clone(), labels[id.as_str()]))
        .collect();
    let valid_scores = Vec::new();
    let initial = TrainedEnsemble {
        ensemble,
        thresholds: info.thresholds,
        valid_scores,
        snapshots: info.snapshots.clone(),
    };
    let seed_of = |id: &str| fragment_seed(cfg, id);
    let train = cfg.train("adapt");
    let ens = ensemble_config(cfg);
    let ctx = BuildContext {
        reps: &data.reps,
        table: &table.input,
        train: &train,
        ensemble: &ens,
        fragment_seed: &seed_of,
    };
    let reports = run_adaptation(&streams, &build, initial, &ctx, cfg.stage_seed("adapt"))?;
    staged(&run.adapt(), cfg, |dir| {
        write_jsonl(&dir.join(ADAPT_FILE), &reports)?;
        Ok(reports.clone())
    })
}

pub fn read_adaptation(path: &Path) -> Result<Vec<AdaptationEpochReport>> {
    read_jsonl(path)
}

/// Runs gen-corpus through cluster in order.
pub fn run_all(run: &RunDir, cfg: &RunConfig) -> Result<(DetectSummary, ClusterOutput)> {
    gen_corpus(run, cfg)?;
    build_vocab(run, cfg)?;
    train_embed(run, cfg)?;
    train_detect(run, cfg)?;
    let d = detect(run, cfg, None, None)?;
    let c = cluster(run, cfg)?;
    Ok((d, c))
}
