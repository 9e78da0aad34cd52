//! Randomized fixed-length fragments: the method sequences of an app are
//! arranged in a fresh random order, concatenated, truncated and padded.

use num_bigint::BigUint;
use rand::Rng;
use rayon::prelude::*;

use crate::asmparse::{AppRepresentation, PAD_ID};
use crate::error::{Error, Result};
use crate::seed;

/// Where one method sequence landed inside a fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    /// Index into `AppRepresentation::sequences`.
    pub sequence: usize,
    pub start: usize,
    pub len: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub tokens: Vec<u32>,
    pub pad_count: usize,
    pub segments: Vec<Segment>,
    /// Set for the all-PAD fragment of an app without sequences.
    pub degenerate: bool,
}

impl Fragment {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sequence indices in the order they were placed.
    pub fn order(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.sequence).collect()
    }
}

/// Draws sequences without replacement (partial Fisher–Yates) until the
/// concatenation covers `fragment_len`, so the placed prefix follows the
/// uniform law over ordered selections.
pub fn make_fragment<R: Rng + ?Sized>(
    app: &AppRepresentation,
    fragment_len: usize,
    rng: &mut R,
) -> Result<Fragment> {
    if fragment_len == 0 {
        return Err(Error::invalid("fragment length must be at least 1"));
    }
    let mut tokens = Vec::with_capacity(fragment_len);
    let mut segments = Vec::new();
    let h = app.sequences.len();
    let mut order: Vec<usize> = (0..h).collect();
    for i in 0..h {
        if tokens.len() >= fragment_len {
            break;
        }
        let j = rng.gen_range(i..h);
        order.swap(i, j);
        let seq = &app.sequences[order[i]].tokens;
        let room = fragment_len - tokens.len();
        let take = seq.len().min(room);
        segments.push(Segment {
            sequence: order[i],
            start: tokens.len(),
            len: take,
            truncated: take < seq.len(),
        });
        tokens.extend_from_slice(&seq[..take]);
    }
    let pad_count = fragment_len - tokens.len();
    tokens.resize(fragment_len, PAD_ID);
    Ok(Fragment {
        tokens,
        pad_count,
        segments,
        degenerate: app.total_tokens() == 0,
    })
}

/// Number of ordered selections of `k` out of `h` sequences, `h!/(h−k)!`.
pub fn permutation_count(h: u64, k: u64) -> Result<BigUint> {
    if k > h {
        return Err(Error::invalid(format!(
            "cannot select {k} of {h} sequences"
        )));
    }
    Ok(((h - k + 1)..=h).fold(BigUint::from(1u32), |acc, x| acc * x))
}

/// `per_app` independent fragments for every app, tagged with the app index.
///
/// App `i` draws from its own stream derived from `seed`, so the result does
/// not depend on the number of worker threads.
pub fn fragment_batch(
    apps: &[&AppRepresentation],
    fragment_len: usize,
    per_app: usize,
    seed: u64,
) -> Result<Vec<(usize, Fragment)>> {
    if per_app == 0 {
        return Err(Error::invalid("per_app must be at least 1"));
    }
    let nested: Vec<Vec<(usize, Fragment)>> = apps
        .par_iter()
        .enumerate()
        .map(|(i, app)| {
            let mut rng = seed::rng(seed::derive_indexed(seed, "fragment", i as u64));
            (0..per_app)
                .map(|_| make_fragment(app, fragment_len, &mut rng).map(|f| (i, f)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}
