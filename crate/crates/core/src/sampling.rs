//! Epoch construction: random, sequential and debiased (single-source)
//! batches, plus k-means virtual sources for single-dataset debiasing.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::numerics::{Matrix, SeedContext};

pub type SourceId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCatalog {
    sources: Vec<(SourceId, Vec<usize>)>,
}

impl SourceCatalog {
    /// Sources must have distinct ids and disjoint index lists.
    pub fn new(sources: Vec<(SourceId, Vec<usize>)>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for (id, idx) in &sources {
            if !ids.insert(*id) {
                return Err(invalid(format!("source id {id} listed twice")));
            }
            for &i in idx {
                if !seen.insert(i) {
                    return Err(invalid(format!("sample {i} belongs to more than one source")));
                }
            }
        }
        Ok(Self { sources })
    }

    /// Groups sample positions by tag, ordered by source id.
    pub fn from_tags(tags: &[SourceId]) -> Self {
        let ids: BTreeSet<SourceId> = tags.iter().copied().collect();
        let sources = ids
            .into_iter()
            .map(|id| (id, tags.iter().enumerate().filter(|(_, &t)| t == id).map(|(i, _)| i).collect()))
            .collect();
        Self { sources }
    }

    pub fn sources(&self) -> &[(SourceId, Vec<usize>)] {
        &self.sources
    }

    pub fn ids(&self) -> Vec<SourceId> {
        self.sources.iter().map(|(id, _)| *id).collect()
    }

    pub fn sizes(&self) -> Vec<(SourceId, usize)> {
        self.sources.iter().map(|(id, v)| (*id, v.len())).collect()
    }

    pub fn total(&self) -> usize {
        self.sources.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn indices(&self, id: SourceId) -> Option<&[usize]> {
        self.sources.iter().find(|(s, _)| *s == id).map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSource {
    Single(SourceId),
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBatch {
    pub indices: Vec<usize>,
    pub source: BatchSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub batch_size: usize,
    pub batches: Vec<PlannedBatch>,
}

impl EpochPlan {
    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(|b| b.indices.len()).sum()
    }

    pub fn single_source_fraction(&self) -> f64 {
        if self.batches.is_empty() {
            return 1.0;
        }
        let single = self.batches.iter().filter(|b| matches!(b.source, BatchSource::Single(_))).count();
        single as f64 / self.batches.len() as f64
    }

    pub fn batches_per_source(&self) -> Vec<(SourceId, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for b in &self.batches {
            if let BatchSource::Single(s) = b.source {
                *counts.entry(s).or_insert(0) += 1;
            }
        }
        counts.into_iter().collect()
    }

    /// One line per batch: `index<TAB>source<TAB>space-separated sample ids`,
    /// where source is a numeric id or `mixed`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# epoch-plan v1 batch_size={} batches={}\n", self.batch_size, self.batches.len());
        for (i, b) in self.batches.iter().enumerate() {
            let src = match b.source {
                BatchSource::Single(s) => s.to_string(),
                BatchSource::Mixed => "mixed".to_string(),
            };
            let ids: Vec<String> = b.indices.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{i}\t{src}\t{}", ids.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| LabError::Parse { line, message };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty plan".into()))?;
        let batch_size = header
            .split_whitespace()
            .find_map(|t| t.strip_prefix("batch_size="))
            .ok_or_else(|| parse_err(1, "header lacks batch_size=".into()))?
            .parse::<usize>()
            .map_err(|e| parse_err(1, e.to_string()))?;
        let mut batches = Vec::new();
        for (n, line) in lines {
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let idx: usize = cols
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|e| parse_err(lineno, format!("batch index: {e}")))?;
            if idx != batches.len() {
                return Err(parse_err(lineno, format!("batch index {idx} out of order")));
            }
            let source = match cols.next() {
                Some("mixed") => BatchSource::Mixed,
                Some(s) => BatchSource::Single(s.parse().map_err(|e| parse_err(lineno, format!("source id: {e}")))?),
                None => return Err(parse_err(lineno, "missing source column".into())),
            };
            let indices = cols
                .next()
                .ok_or_else(|| parse_err(lineno, "missing indices column".into()))?
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| parse_err(lineno, format!("sample id: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            batches.push(PlannedBatch { indices, source });
        }
        Ok(Self { batch_size, batches })
    }
}

fn chunk_source(indices: &[usize], batch_size: usize, id: SourceId, rng: &mut impl Rng) -> Vec<PlannedBatch> {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    shuffled
        .chunks_exact(batch_size)
        .map(|c| PlannedBatch {
            indices: c.to_vec(),
            source: BatchSource::Single(id),
        })
        .collect()
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        Err(invalid("batch size must be positive"))
    } else {
        Ok(())
    }
}

/// Global shuffle of every sample, chunked; the trailing partial batch is dropped.
pub fn build_random_epoch(cat: &SourceCatalog, batch_size: usize, ctx: &SeedContext) -> Result<EpochPlan> {
    check_batch_size(batch_size)?;
    let total = cat.total();
    if batch_size > total {
        return Err(invalid(format!("batch size {batch_size} exceeds corpus size {total}")));
    }
    let mut all: Vec<usize> = cat.sources.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    all.shuffle(&mut ctx.rng());
    let batches = all
        .chunks_exact(batch_size)
        .map(|c| PlannedBatch {
            indices: c.to_vec(),
            source: BatchSource::Mixed,
        })
        .collect();
    Ok(EpochPlan { batch_size, batches })
}

/// Per-source shuffled batches, emitted source by source in `order`.
pub fn build_sequential_epoch(
    cat: &SourceCatalog,
    order: &[SourceId],
    batch_size: usize,
    ctx: &SeedContext,
) -> Result<EpochPlan> {
    check_batch_size(batch_size)?;
    let mut want = cat.ids();
    let mut got = order.to_vec();
    want.sort_unstable();
    got.sort_unstable();
    if want != got {
        return Err(invalid(format!("sequential order {order:?} is not a permutation of sources {want:?}")));
    }
    let mut batches = Vec::new();
    for &id in order {
        let idx = cat.indices(id).unwrap_or_default();
        batches.extend(chunk_source(idx, batch_size, id, &mut ctx.derive(format_args!("source-{id}")).rng()));
    }
    Ok(EpochPlan { batch_size, batches })
}

/// Single-source batches from every source, globally shuffled.
pub fn build_debiased_epoch(cat: &SourceCatalog, batch_size: usize, ctx: &SeedContext) -> Result<EpochPlan> {
    check_batch_size(batch_size)?;
    let largest = cat.sources.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    if largest < batch_size {
        return Err(invalid(format!(
            "no source reaches batch size {batch_size} (largest source has {largest} samples)"
        )));
    }
    let mut batches = Vec::new();
    for (id, idx) in &cat.sources {
        batches.extend(chunk_source(idx, batch_size, *id, &mut ctx.derive(format_args!("source-{id}")).rng()));
    }
    batches.shuffle(&mut ctx.derive("order").rng());
    Ok(EpochPlan { batch_size, batches })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    /// Within-cluster sum of squares after each assignment step.
    pub objectives: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means with seeded farthest-first initialization.
///
/// The first centroid is a seeded random point; each next one is the point
/// farthest from its nearest chosen centroid. A cluster left empty by an
/// update is re-seeded at the point farthest from its current centroid.
pub fn kmeans(points: &Matrix, k: usize, iters: usize, ctx: &SeedContext) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} must lie in [1, {n}]")));
    }
    if iters == 0 {
        return Err(invalid("k-means needs at least one iteration"));
    }
    let first = ctx.rng().random_range(0..n);
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    while chosen.len() < k {
        let mut far = 0;
        for i in 1..n {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        chosen.push(far);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(far)));
        }
    }
    let mut centroids = points.select_rows(&chosen);
    let mut assignments = vec![usize::MAX; n];
    let mut objectives = Vec::new();
    for _ in 0..iters {
        let mut changed = false;
        let mut objective = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            changed |= assignments[i] != c;
            assignments[i] = c;
            dists[i] = d;
            objective += d;
        }
        objectives.push(objective);
        if !changed && objectives.len() > 1 {
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, &x) in sums.row_mut(assignments[i]).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let mut far = 0;
                for i in 1..n {
                    if dists[i] > dists[far] {
                        far = i;
                    }
                }
                centroids.row_mut(c).copy_from_slice(points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objectives,
    })
}

/// Clusters embeddings and returns one virtual source per non-empty cluster.
pub fn cluster_into_virtual_sources(emb: &Matrix, k: usize, iters: usize, ctx: &SeedContext) -> Result<SourceCatalog> {
    let result = kmeans(emb, k, iters, ctx)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in result.assignments.iter().enumerate() {
        groups[c].push(i);
    }
    SourceCatalog::new(
        groups
            .into_iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(c, g)| (c as SourceId, g))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(sizes: &[usize]) -> SourceCatalog {
        let mut start = 0;
        SourceCatalog::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let v = (start..start + s).collect();
                    start += s;
                    (i as SourceId, v)
                })
                .collect(),
        )
        .unwrap()
    }

    fn no_repeats(plan: &EpochPlan) -> bool {
        let mut seen = BTreeSet::new();
        plan.batches.iter().flat_map(|b| &b.indices).all(|i| seen.insert(*i))
    }

    #[test]
    fn random_epoch_counts() {
        let plan = build_random_epoch(&catalog(&[1000, 1000, 1000]), 256, &SeedContext::new(1, "e")).unwrap();
        assert_eq!(plan.batches.len(), 11);
        assert_eq!(plan.sample_count(), 2816);
        assert!(no_repeats(&plan));
        assert!(plan.batches.iter().all(|b| b.indices.len() == 256));
    }

    #[test]
    fn random_epoch_is_seeded() {
        let cat = catalog(&[50, 70]);
        let ctx = SeedContext::new(3, "e");
        assert_eq!(build_random_epoch(&cat, 16, &ctx).unwrap(), build_random_epoch(&cat, 16, &ctx).unwrap());
    }

    #[test]
    fn random_epoch_with_one_source_matches_debiased_up_to_order() {
        let cat = catalog(&[100]);
        let r = build_random_epoch(&cat, 10, &SeedContext::new(1, "e")).unwrap();
        let d = build_debiased_epoch(&cat, 10, &SeedContext::new(1, "e")).unwrap();
        let mut a: Vec<usize> = r.batches.iter().flat_map(|b| b.indices.clone()).collect();
        let mut b: Vec<usize> = d.batches.iter().flat_map(|b| b.indices.clone()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(build_random_epoch(&catalog(&[10]), 11, &SeedContext::new(1, "e")).is_err());
    }

    #[test]
    fn sequential_respects_order() {
        let cat = catalog(&[1000, 500]);
        let plan = build_sequential_epoch(&cat, &[1, 0], 256, &SeedContext::new(1, "e")).unwrap();
        assert_eq!(plan.batches.len(), 4);
        let srcs: Vec<BatchSource> = plan.batches.iter().map(|b| b.source).collect();
        assert_eq!(
            srcs,
            vec![BatchSource::Single(1), BatchSource::Single(0), BatchSource::Single(0), BatchSource::Single(0)]
        );
        assert!(no_repeats(&plan));
    }

    #[test]
    fn sequential_rejects_non_permutation() {
        let cat = catalog(&[10, 10]);
        assert!(build_sequential_epoch(&cat, &[0, 0], 5, &SeedContext::new(1, "e")).is_err());
        assert!(build_sequential_epoch(&cat, &[0], 5, &SeedContext::new(1, "e")).is_err());
    }

    #[test]
    fn debiased_counts_are_floor_divisions() {
        let cat = catalog(&[1000, 300, 64]);
        for seed in 0..3 {
            let plan = build_debiased_epoch(&cat, 128, &SeedContext::new(seed, "e")).unwrap();
            assert_eq!(plan.single_source_fraction(), 1.0);
            assert_eq!(plan.batches_per_source(), vec![(0, 7), (1, 2)]);
            assert!(no_repeats(&plan));
        }
    }

    #[test]
    fn debiased_order_varies_with_seed() {
        let cat = catalog(&[640, 640]);
        let a = build_debiased_epoch(&cat, 64, &SeedContext::new(1, "e")).unwrap();
        let b = build_debiased_epoch(&cat, 64, &SeedContext::new(2, "e")).unwrap();
        let order = |p: &EpochPlan| p.batches.iter().map(|b| b.source).collect::<Vec<_>>();
        assert_ne!(order(&a), order(&b));
        assert_eq!(a.batches_per_source(), b.batches_per_source());
    }

    #[test]
    fn debiased_error_names_largest_source() {
        let err = build_debiased_epoch(&catalog(&[5, 9]), 10, &SeedContext::new(1, "e")).unwrap_err();
        assert!(err.to_string().contains("largest source has 9"), "{err}");
    }

    #[test]
    fn catalog_rejects_overlap() {
        assert!(SourceCatalog::new(vec![(0, vec![1, 2]), (1, vec![2, 3])]).is_err());
        assert!(SourceCatalog::new(vec![(0, vec![1]), (0, vec![2])]).is_err());
    }

    #[test]
    fn plan_text_round_trip() {
        let plan = build_debiased_epoch(&catalog(&[30, 20]), 10, &SeedContext::new(4, "e")).unwrap();
        let text = plan.to_text();
        assert_eq!(EpochPlan::from_text(&text).unwrap(), plan);
        let mixed = build_random_epoch(&catalog(&[30, 20]), 10, &SeedContext::new(4, "e")).unwrap();
        assert_eq!(EpochPlan::from_text(&mixed.to_text()).unwrap(), mixed);
    }

    #[test]
    fn single_cluster_holds_everything() {
        let pts = Matrix::random_uniform(20, 3, 1.0, &SeedContext::new(1, "p"));
        let cat = cluster_into_virtual_sources(&pts, 1, 5, &SeedContext::new(2, "k")).unwrap();
        assert_eq!(cat.sources().len(), 1);
        assert_eq!(cat.total(), 20);
    }

    #[test]
    fn kmeans_objective_is_monotone() {
        let pts = Matrix::random_uniform(200, 4, 1.0, &SeedContext::new(5, "p"));
        let r = kmeans(&pts, 7, 50, &SeedContext::new(6, "k")).unwrap();
        for w in r.objectives.windows(2) {
            assert!(w[1] <= w[0], "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts = Matrix::zeros(3, 2);
        assert!(kmeans(&pts, 4, 1, &SeedContext::new(0, "k")).is_err());
        assert!(kmeans(&pts, 0, 1, &SeedContext::new(0, "k")).is_err());
    }
}
