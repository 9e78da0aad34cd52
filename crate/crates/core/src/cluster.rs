//! Density clustering of malware digests into families.
//!
//! Classic DBSCAN over Euclidean distance, a k-distance knee heuristic for
//! the radius, homogeneity and coverage metrics, and centroid-based family
//! matching for the points DBSCAN leaves as noise.
//!
//! Cluster ids are canonical: clusters are numbered by the lexicographically
//! smallest core point they contain. The partition and the numbering then
//! depend only on the set of points, never on input order, and border points
//! claimed by several clusters go to the lowest id.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `None` marks noise.
pub type Assignment = Option<usize>;

pub const DEFAULT_MIN_PTS: usize = 5;

pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn check_points(points: &[&[f32]]) -> Result<usize> {
    let Some(first) = points.first() else {
        return Err(Error::invalid("clustering needs at least one point"));
    };
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points have inconsistent dimensions"));
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("points must be finite"));
    }
    Ok(dim)
}

fn lex_cmp(a: &[f32], b: &[f32]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Neighbors within `eps` (inclusive), each list including the point itself.
fn neighborhoods(points: &[&[f32]], eps: f64) -> Vec<Vec<usize>> {
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            (0..points.len())
                .filter(|&j| distance(points[i], points[j]) <= eps)
                .collect()
        })
        .collect()
}

/// DBSCAN with inclusive radius and self-counting neighborhoods.
pub fn dbscan(points: &[&[f32]], eps: f64, min_pts: usize) -> Result<Vec<Assignment>> {
    check_points(points)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::invalid("min_pts must be at least 1"));
    }
    let n = points.len();
    let nbrs = neighborhoods(points, eps);
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= min_pts).collect();

    // connected components of the core graph
    let mut comp = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if !core[start] || comp[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut head = 0;
        while head < members.len() {
            let p = members[head];
            head += 1;
            for &q in &nbrs[p] {
                if core[q] && comp[q] == usize::MAX {
                    comp[q] = id;
                    members.push(q);
                }
            }
        }
        comps.push(members);
    }

    // canonical numbering by smallest core point
    let keys: Vec<usize> = comps
        .iter()
        .map(|m| {
            *m.iter()
                .min_by(|&&a, &&b| lex_cmp(points[a], points[b]).then(a.cmp(&b)))
                .expect("non-empty")
        })
        .collect();
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(points[keys[a]], points[keys[b]]));
    let mut canonical = vec![0; comps.len()];
    for (new, &old) in order.iter().enumerate() {
        canonical[old] = new;
    }

    Ok((0..n)
        .map(|i| {
            if core[i] {
                Some(canonical[comp[i]])
            } else {
                nbrs[i]
                    .iter()
                    .filter(|&&q| core[q])
                    .map(|&q| canonical[comp[q]])
                    .min()
            }
        })
        .collect())
}

/// Sorted distances from each point to its `k`-th nearest other point.
pub fn k_distances(points: &[&[f32]], k: usize) -> Result<Vec<f64>> {
    check_points(points)?;
    if k == 0 || points.len() < k + 1 {
        return Err(Error::invalid(format!(
            "k-distance with k = {k} needs at least {} points, got {}",
            k + 1,
            points.len()
        )));
    }
    let mut d: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<f64> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| distance(points[i], points[j]))
                .collect();
            row.select_nth_unstable_by(k - 1, f64::total_cmp);
            row[k - 1]
        })
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// How the knee of the sorted k-distance curve is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KneeRule {
    /// Largest second difference.
    SecondDifference,
    /// Largest gap below the chord from the first to the last point, on the
    /// curve rescaled to the unit square (the Kneedle rule).
    #[default]
    Chord,
}

/// Radius at the knee of the sorted `min_pts`-distance curve, taken as the
/// point of largest second difference.
pub fn choose_eps(points: &[&[f32]], min_pts: usize) -> Result<f64> {
    choose_eps_by(points, min_pts, KneeRule::SecondDifference)
}

pub fn choose_eps_by(points: &[&[f32]], min_pts: usize, rule: KneeRule) -> Result<f64> {
    let d = k_distances(points, min_pts)?;
    let eps = d[knee_index(&d, rule)];
    if eps > 0.0 {
        Ok(eps)
    } else {
        // duplicates collapse the curve; any positive radius groups them
        Ok(d.iter()
            .copied()
            .find(|&v| v > 0.0)
            .unwrap_or(f64::MIN_POSITIVE))
    }
}

/// Knee of an ascending curve; ties go to the earlier index.
fn knee_index(d: &[f64], rule: KneeRule) -> usize {
    let n = d.len();
    if n < 3 {
        return n - 1;
    }
    let score: Box<dyn Fn(usize) -> f64> = match rule {
        KneeRule::SecondDifference => Box::new(|i| d[i + 1] - 2.0 * d[i] + d[i - 1]),
        KneeRule::Chord => {
            let span = d[n - 1] - d[0];
            if span <= 0.0 {
                return n - 1;
            }
            Box::new(move |i| i as f64 / (n - 1) as f64 - (d[i] - d[0]) / span)
        }
    };
    (1..n - 1)
        .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
        .expect("range is non-empty")
}

/// Fraction of points that belong to a cluster.
pub fn coverage(assignments: &[Assignment]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    assignments.iter().filter(|a| a.is_some()).count() as f64 / assignments.len() as f64
}

fn entropy<'a>(counts: impl Iterator<Item = &'a usize>, total: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// `1 − H(family | cluster) / H(family)` over clustered points; 1 when the
/// clustered points all share one family (or there are none).
pub fn homogeneity<F: Ord>(assignments: &[Assignment], families: &[F]) -> Result<f64> {
    if assignments.len() != families.len() {
        return Err(Error::invalid("assignments and families differ in length"));
    }
    let mut joint: BTreeMap<usize, BTreeMap<&F, usize>> = BTreeMap::new();
    let mut marginal: BTreeMap<&F, usize> = BTreeMap::new();
    let mut total = 0usize;
    for (a, f) in assignments.iter().zip(families) {
        if let Some(c) = a {
            *joint.entry(*c).or_default().entry(f).or_default() += 1;
            *marginal.entry(f).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    let n = total as f64;
    let h_fam = entropy(marginal.values(), n);
    if h_fam <= 0.0 {
        return Ok(1.0);
    }
    let h_cond: f64 = joint
        .values()
        .map(|fams| {
            let size: usize = fams.values().sum();
            size as f64 / n * entropy(fams.values(), size as f64)
        })
        .sum();
    Ok((1.0 - h_cond / h_fam).clamp(0.0, 1.0))
}

/// Homogeneity with single-member clusters treated as noise.
pub fn homogeneity_without_singletons<F: Ord>(
    assignments: &[Assignment],
    families: &[F],
) -> Result<f64> {
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for c in assignments.iter().flatten() {
        *sizes.entry(*c).or_default() += 1;
    }
    let pruned: Vec<Assignment> = assignments
        .iter()
        .map(|a| a.filter(|c| sizes[c] > 1))
        .collect();
    homogeneity(&pruned, families)
}

/// Mean digest of each cluster, indexed by cluster id.
pub fn centroids(assignments: &[Assignment], points: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    let dim = check_points(points)?;
    if assignments.len() != points.len() {
        return Err(Error::invalid("assignments and points differ in length"));
    }
    let k = assignments.iter().flatten().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (a, p) in assignments.iter().zip(points) {
        if let Some(c) = a {
            counts[*c] += 1;
            for (s, &v) in sums[*c].iter_mut().zip(*p) {
                *s += f64::from(v);
            }
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok(sums)
}

/// Assigns every noise point to the cluster with the nearest centroid;
/// ties go to the lower id.
pub fn family_match(assignments: &[Assignment], points: &[&[f32]]) -> Result<Vec<usize>> {
    let cents = centroids(assignments, points)?;
    if cents.is_empty() {
        return Err(Error::Degenerate(
            "no clusters to match noise points against".into(),
        ));
    }
    Ok(assignments
        .iter()
        .zip(points)
        .map(|(a, p)| {
            a.unwrap_or_else(|| {
                let mut best = (f64::INFINITY, 0);
                for (c, cent) in cents.iter().enumerate() {
                    let d: f64 = cent
                        .iter()
                        .zip(*p)
                        .map(|(&m, &v)| (m - f64::from(v)).powi(2))
                        .sum();
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedReport {
    pub assignments: Vec<usize>,
    pub homogeneity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub eps: f64,
    pub min_pts: usize,
    pub ids: Vec<String>,
    pub assignments: Vec<Assignment>,
    pub clusters: usize,
    pub noise: usize,
    pub coverage: f64,
    /// Only present when true families are known.
    pub homogeneity: Option<f64>,
    pub homogeneity_without_singletons: Option<f64>,
    pub centroids: Vec<Vec<f64>>,
    /// Absent when DBSCAN found no cluster at all.
    pub matched: Option<MatchedReport>,
}

/// Clusters `points`, choosing eps by the knee rule unless given, and
/// scores the result against `families` when provided.
pub fn report(
    ids: &[String],
    points: &[&[f32]],
    families: Option<&[String]>,
    eps: Option<f64>,
    min_pts: usize,
    knee: KneeRule,
) -> Result<ClusterReport> {
    if ids.len() != points.len() || families.is_some_and(|f| f.len() != points.len()) {
        return Err(Error::invalid("ids, points and families must align"));
    }
    let eps = match eps {
        Some(e) => e,
        None => choose_eps_by(points, min_pts, knee)?,
    };
    let assignments = dbscan(points, eps, min_pts)?;
    let cents = centroids(&assignments, points)?;
    let matched = if cents.is_empty() {
        None
    } else {
        let full = family_match(&assignments, points)?;
        let h = match families {
            Some(f) => Some(homogeneity(
                &full.iter().map(|&c| Some(c)).collect::<Vec<_>>(),
                f,
            )?),
            None => None,
        };
        Some(MatchedReport {
            assignments: full,
            homogeneity: h,
        })
    };
    Ok(ClusterReport {
        eps,
        min_pts,
        ids: ids.to_vec(),
        clusters: cents.len(),
        noise: assignments.iter().filter(|a| a.is_none()).count(),
        coverage: coverage(&assignments),
        homogeneity: families.map(|f| homogeneity(&assignments, f)).transpose()?,
        homogeneity_without_singletons: families
            .map(|f| homogeneity_without_singletons(&assignments, f))
            .transpose()?,
        centroids: cents,
        assignments,
        matched,
    })
}
