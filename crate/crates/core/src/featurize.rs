//! N-gram bags hashed into fixed-length, L2-normalized vectors.
//!
//! Hash contract: an n-gram is encoded as the little-endian `u32` bytes of
//! its token ids, concatenated. The bucket is `xxh64(bytes, seed) mod L`; the
//! sign is `−1` when bit 63 of `xxh64(bytes, seed + 0x9E3779B97F4A7C15)` is
//! set and `+1` otherwise. Windows never cross method boundaries.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::asmparse::AppRepresentation;
use crate::error::{Error, Result};

pub const SIGN_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashConfig {
    pub dim: usize,
    pub seed: u64,
    /// Unsigned counting when false.
    pub signed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashVector {
    pub values: Vec<f32>,
    /// Zero vector of an app without any n-gram.
    pub degenerate: bool,
}

/// Windows of `n` consecutive tokens inside each method, with their counts
/// over the whole app.
pub fn ngrams(app: &AppRepresentation, n: usize) -> Result<BTreeMap<Vec<u32>, u64>> {
    if n == 0 {
        return Err(Error::invalid("n-gram size must be at least 1"));
    }
    let mut out = BTreeMap::new();
    for seq in app.token_streams() {
        for w in seq.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    Ok(out)
}

fn encode(gram: &[u32], buf: &mut Vec<u8>) {
    buf.clear();
    for t in gram {
        buf.extend_from_slice(&t.to_le_bytes());
    }
}

/// Bucket index and sign of one n-gram.
pub fn hash_ngram(gram: &[u32], dim: usize, seed: u64) -> (usize, f64) {
    let mut buf = Vec::with_capacity(gram.len() * 4);
    encode(gram, &mut buf);
    bucket(&buf, dim, seed)
}

fn bucket(bytes: &[u8], dim: usize, seed: u64) -> (usize, f64) {
    let idx = (xxh64(bytes, seed) % dim as u64) as usize;
    let sign = if xxh64(bytes, seed.wrapping_add(SIGN_SEED_OFFSET)) >> 63 == 0 {
        1.0
    } else {
        -1.0
    };
    (idx, sign)
}

/// Streaming accumulator; additions commute exactly because integer counts
/// are summed in `f64`.
#[derive(Debug, Clone)]
pub struct HashAccumulator {
    cfg: HashConfig,
    acc: Vec<f64>,
    buf: Vec<u8>,
}

impl HashAccumulator {
    pub fn new(cfg: HashConfig) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::invalid("hash vector length must be positive"));
        }
        Ok(HashAccumulator {
            cfg,
            acc: vec![0.0; cfg.dim],
            buf: Vec::new(),
        })
    }

    pub fn add(&mut self, gram: &[u32], count: u64) {
        encode(gram, &mut self.buf);
        let (idx, sign) = bucket(&self.buf, self.cfg.dim, self.cfg.seed);
        let sign = if self.cfg.signed { sign } else { 1.0 };
        self.acc[idx] += sign * count as f64;
    }

    pub fn merge(&mut self, other: &HashAccumulator) {
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            *a += b;
        }
    }

    pub fn finish(self) -> HashVector {
        let norm = self.acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return HashVector {
                values: vec![0.0; self.cfg.dim],
                degenerate: true,
            };
        }
        HashVector {
            values: self.acc.iter().map(|v| (v / norm) as f32).collect(),
            degenerate: false,
        }
    }
}

/// Hashes an `(n-gram, count)` stream into a unit vector.
pub fn hash_vectorize<'a, I>(grams: I, cfg: HashConfig) -> Result<HashVector>
where
    I: IntoIterator<Item = (&'a [u32], u64)>,
{
    let mut acc = HashAccumulator::new(cfg)?;
    for (g, c) in grams {
        acc.add(g, c);
    }
    Ok(acc.finish())
}

/// N-gram extraction and hashing in one pass over the app.
pub fn featurize(app: &AppRepresentation, n: usize, cfg: HashConfig) -> Result<HashVector> {
    if n == 0 {
        return Err(Error::invalid("n-gram size must be at least 1"));
    }
    let mut acc = HashAccumulator::new(cfg)?;
    for seq in app.token_streams() {
        for w in seq.windows(n) {
            acc.add(w, 1);
        }
    }
    Ok(acc.finish())
}

/// How many distinct n-grams share a bucket with another distinct n-gram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub distinct_ngrams: usize,
    pub occupied_buckets: usize,
    pub colliding_ngrams: usize,
    pub collision_rate: f64,
}

pub fn collision_report<'a, I>(apps: I, n: usize, cfg: HashConfig) -> Result<CollisionReport>
where
    I: IntoIterator<Item = &'a AppRepresentation>,
{
    if cfg.dim == 0 || n == 0 {
        return Err(Error::invalid("hash length and n must be positive"));
    }
    let mut seen: HashMap<Vec<u32>, usize> = HashMap::new();
    for app in apps {
        for seq in app.token_streams() {
            for w in seq.windows(n) {
                if !seen.contains_key(w) {
                    seen.insert(w.to_vec(), hash_ngram(w, cfg.dim, cfg.seed).0);
                }
            }
        }
    }
    let mut per_bucket: HashMap<usize, usize> = HashMap::new();
    for &b in seen.values() {
        *per_bucket.entry(b).or_insert(0) += 1;
    }
    let colliding: usize = per_bucket.values().filter(|&&c| c > 1).sum();
    Ok(CollisionReport {
        distinct_ngrams: seen.len(),
        occupied_buckets: per_bucket.len(),
        colliding_ngrams: colliding,
        collision_rate: if seen.is_empty() {
            0.0
        } else {
            colliding as f64 / seen.len() as f64
        },
    })
}
