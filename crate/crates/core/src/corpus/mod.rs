//! Synthetic labeled corpora, dataset splits and obfuscation-style rewrites.
//!
//! A corpus directory holds one assembly file per app under `apps/`, a
//! JSON-lines `manifest.jsonl` with the fields `id`, `label`, `family`,
//! `epoch_tag` and `path`, the platform asset list `platform_assets.txt`
//! (one canonical name per line) and the generator profile used.

mod generator;
mod split;
mod transform;

pub use generator::{generate_corpus, GeneratorProfile, World};
pub use split::{split_dataset, split_train_valid, DatasetSplit, TRAIN_SHARE};
pub use transform::{junk_insertion, transform, TransformKind, DEFAULT_JUNK_RATE};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ASSETS_FILE: &str = "platform_assets.txt";
pub const PROFILE_FILE: &str = "profile.json";
pub const APPS_DIR: &str = "apps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Malware,
    Benign,
}

impl Label {
    pub fn is_malware(self) -> bool {
        self == Label::Malware
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppRecord {
    pub id: String,
    pub label: Label,
    /// Present exactly for malware.
    pub family: Option<String>,
    pub epoch_tag: u32,
    pub source_text: String,
}

impl AppRecord {
    pub fn validate(&self) -> Result<()> {
        if self.family.is_some() != self.label.is_malware() {
            return Err(Error::Data(format!(
                "app `{}`: a family must be given exactly for malware",
                self.id
            )));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub family: Option<String>,
    pub epoch_tag: u32,
    /// Relative to the corpus directory.
    pub path: String,
}

impl ManifestEntry {
    pub fn of(record: &AppRecord) -> ManifestEntry {
        ManifestEntry {
            id: record.id.clone(),
            label: record.label,
            family: record.family.clone(),
            epoch_tag: record.epoch_tag,
            path: format!("{APPS_DIR}/{}.dasm", record.id),
        }
    }
}

/// Writes apps, manifest and asset list into `dir`.
pub fn write_corpus(dir: &Path, records: &[AppRecord], assets: &[String]) -> Result<()> {
    let apps = dir.join(APPS_DIR);
    fs::create_dir_all(&apps).map_err(|e| Error::io(&apps, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = Vec::new();
    for r in records {
        r.validate()?;
        let entry = ManifestEntry::of(r);
        let path = dir.join(&entry.path);
        fs::write(&path, &r.source_text).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let assets_path = dir.join(ASSETS_FILE);
    let mut f = fs::File::create(&assets_path).map_err(|e| Error::io(&assets_path, e))?;
    for a in assets {
        writeln!(f, "{a}").map_err(|e| Error::io(&assets_path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: bad manifest line: {e}",
                path.display(),
                i + 1
            ))
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Reads every app listed in `dir`'s manifest.
pub fn load_corpus(dir: &Path) -> Result<Vec<AppRecord>> {
    read_manifest(&dir.join(MANIFEST_FILE))?
        .into_iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            let source_text = fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
            let r = AppRecord {
                id: e.id,
                label: e.label,
                family: e.family,
                epoch_tag: e.epoch_tag,
                source_text,
            };
            r.validate()?;
            Ok(r)
        })
        .collect()
}
