//! Synthetic taxonomies and pseudo-embeddings for benchmarks and tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, rank_queries, MetricOptions, MetricReport, RankedPrediction, Scorer};
use crate::geometry::GaussBox;
use crate::projection::{EmbeddingTable, ProjectionParams};
use crate::taxonomy::{ConceptRecord, NodeId, SplitResult, TaxonomyGraph};
use crate::trainer::{train, TrainConfig, TrainHistory};

/// Complete tree with `levels` generations below a single root. Ids encode the
/// path: `n`, `n0`, `n01`, … (digits in base 36, so branching ≤ 36).
pub fn balanced_tree(branching: usize, levels: usize) -> Result<TaxonomyGraph> {
    if !(1..=36).contains(&branching) {
        return Err(Error::InvalidArgument(format!(
            "branching must lie in [1, 36], got {branching}"
        )));
    }
    let mut ids = vec!["n".to_string()];
    let mut edges = Vec::new();
    let mut frontier = vec!["n".to_string()];
    for _ in 0..levels {
        let mut next = Vec::with_capacity(frontier.len() * branching);
        for p in &frontier {
            for b in 0..branching {
                let c = format!("{p}{}", char::from_digit(b as u32, 36).unwrap());
                edges.push((NodeId::new(p.as_str())?, NodeId::new(c.as_str())?));
                next.push(c);
            }
        }
        ids.extend(next.iter().cloned());
        frontier = next;
    }
    let records = ids
        .iter()
        .map(|id| ConceptRecord::new(id, &format!("concept {id}"), ""))
        .collect::<Result<Vec<_>>>()?;
    TaxonomyGraph::new(records, edges)
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("embedding dim must be >= 2, got {dim}")));
    }
    Ok(())
}

fn id_rng(id: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit vector drawn from a generator keyed by `sha256(seed ‖ id)`; stable
/// across platforms and independent of which other ids are present.
pub fn hash_vector(id: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = id_rng(id, seed);
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-12 {
            normalize(&mut v);
            return v;
        }
    }
}

pub fn hash_embeddings<'a>(
    ids: impl IntoIterator<Item = &'a NodeId>,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    check_dim(dim)?;
    let mut t = EmbeddingTable::new(dim);
    for id in ids {
        t.insert(id.clone(), hash_vector(id.as_str(), dim, seed))?;
    }
    Ok(t)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Minimum gap between mean parent/child cosine and mean random-pair cosine.
pub const MIN_COSINE_GAP: f64 = 0.2;
pub const DEFAULT_NOISE: f64 = 0.5;

/// Mean cosine over edges and over (up to 20k, seeded) random distinct pairs.
pub fn cosine_gap(g: &TaxonomyGraph, t: &EmbeddingTable, seed: u64) -> Result<(f64, f64)> {
    let edges: Vec<_> = g.edges().collect();
    if edges.is_empty() || g.len() < 2 {
        return Err(Error::TooSmall("need at least one edge to measure cosine gap".into()));
    }
    let edge_mean = edges
        .iter()
        .map(|(p, c)| Ok(cosine(t.get(p.as_str())?, t.get(c.as_str())?)))
        .sum::<Result<f64>>()?
        / edges.len() as f64;
    let ids: Vec<&NodeId> = g.node_ids().collect();
    let n = ids.len();
    let all_pairs = n * (n - 1) / 2;
    let (sum, count) = if all_pairs <= 20_000 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += cosine(t.get(ids[i].as_str())?, t.get(ids[j].as_str())?);
            }
        }
        (s, all_pairs)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = 0.0;
        for _ in 0..20_000 {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            s += cosine(t.get(ids[i].as_str())?, t.get(ids[j].as_str())?);
        }
        (s, 20_000)
    };
    Ok((edge_mean, sum / count as f64))
}

/// Tree-correlated unit vectors: roots get hash vectors, every other node is
/// `normalize(mean(parents) + noise · hash(id))`, visited by depth.
///
/// The parent/child vs random-pair cosine gap is not monotone in the noise
/// scale (too little noise collapses everything onto the roots), so when the
/// requested scale misses [`MIN_COSINE_GAP`] the scales `noise · 2^(±j/2)`
/// are tried in turn, nearest first.
pub fn clustered_embeddings(g: &TaxonomyGraph, dim: usize, seed: u64, noise: f64) -> Result<EmbeddingTable> {
    check_dim(dim)?;
    if !(noise.is_finite() && noise > 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be positive, got {noise}")));
    }
    if g.edge_count() == 0 {
        return Err(Error::TooSmall("clustered embeddings need a taxonomy with edges".into()));
    }
    let mut order: Vec<&NodeId> = g.node_ids().collect();
    order.sort_by_key(|id| g.depth(id.as_str()).unwrap_or(0));
    let scales = std::iter::once(0i32).chain((1..=16).flat_map(|j| [-j, j]));
    for j in scales {
        let alpha = noise * 2f64.powf(j as f64 / 2.0);
        let mut vecs: BTreeMap<&NodeId, Vec<f64>> = BTreeMap::new();
        for id in &order {
            let parents = g.parents(id.as_str())?;
            let own = hash_vector(id.as_str(), dim, seed);
            let v = if parents.is_empty() {
                own
            } else {
                let mut v = vec![0.0; dim];
                for p in parents {
                    for (a, b) in v.iter_mut().zip(&vecs[p]) {
                        *a += b / parents.len() as f64;
                    }
                }
                normalize(&mut v);
                for (a, b) in v.iter_mut().zip(&own) {
                    *a += alpha * b;
                }
                normalize(&mut v);
                v
            };
            vecs.insert(id, v);
        }
        let mut t = EmbeddingTable::new(dim);
        for (id, v) in vecs {
            t.insert(id.clone(), v)?;
        }
        let (edge, random) = cosine_gap(g, &t, seed)?;
        if edge - random >= MIN_COSINE_GAP {
            return Ok(t);
        }
    }
    Err(Error::InvalidArgument(
        "could not reach the required parent/child cosine gap".into(),
    ))
}

/// Unordered pairs `(i, j)`, `i < j`, whose boxes intersect.
pub fn count_overlapping_pairs(boxes: &[GaussBox]) -> usize {
    let mut n = 0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes[i].overlaps(&boxes[j]) {
                n += 1;
            }
        }
    }
    n
}

/// Unordered pairs in which either box contains the other.
pub fn count_containing_pairs(boxes: &[GaussBox]) -> usize {
    let mut n = 0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if boxes[i].contains(&boxes[j]) || boxes[j].contains(&boxes[i]) {
                n += 1;
            }
        }
    }
    n
}

// ---------------------------------------------------------------------------
// End-to-end benchmark
// ---------------------------------------------------------------------------

/// Balanced tree + clustered pseudo-embeddings + leaf holdout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSpec {
    pub branching: usize,
    pub levels: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub fraction: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            branching: 4,
            levels: 3,
            input_dim: 64,
            noise: DEFAULT_NOISE,
            fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkData {
    pub full: TaxonomyGraph,
    pub split: SplitResult,
    pub embeddings: EmbeddingTable,
}

impl BenchmarkSpec {
    /// Embeddings and split both derive from `seed`.
    pub fn generate(&self, seed: u64) -> Result<BenchmarkData> {
        let full = balanced_tree(self.branching, self.levels)?;
        let embeddings = clustered_embeddings(&full, self.input_dim, seed, self.noise)?;
        let split = full.split_leaves(self.fraction, seed)?;
        Ok(BenchmarkData {
            full,
            split,
            embeddings,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub params: ProjectionParams,
    pub history: TrainHistory,
    pub predictions: Vec<(Scorer, Vec<RankedPrediction>)>,
    pub reports: Vec<(Scorer, MetricReport)>,
}

impl BenchmarkRun {
    pub fn report(&self, s: Scorer) -> &MetricReport {
        &self.reports.iter().find(|(k, _)| *k == s).expect("both scorers evaluated").1
    }
}

impl BenchmarkData {
    /// Trains on the seed taxonomy and evaluates held-out leaves with both
    /// scorers.
    pub fn run(&self, cfg: &TrainConfig, ks: &[usize]) -> Result<BenchmarkRun> {
        let seed = &self.split.seed;
        let (params, history) = train(cfg, seed, &self.embeddings)?;
        let mut predictions = Vec::new();
        let mut reports = Vec::new();
        for s in Scorer::ALL {
            let preds = rank_queries(&params, &self.embeddings, seed, &self.split.queries, s)?;
            let m = compute_metrics(&preds, ks, seed, seed.is_single_parent(), MetricOptions::default())?;
            predictions.push((s, preds));
            reports.push((s, m));
        }
        Ok(BenchmarkRun {
            params,
            history,
            predictions,
            reports,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_shape() {
        let g = balanced_tree(4, 3).unwrap();
        assert_eq!(g.len(), 85);
        assert_eq!(g.edge_count(), 84);
        assert_eq!(g.leaves().len(), 64);
        assert!(g.is_single_parent());
        assert_eq!(g.depth("n123").unwrap(), 4);
        assert!(g.has_edge("n12", "n123"));
        assert!(balanced_tree(0, 2).is_err());
    }

    #[test]
    fn hash_vectors_stable_and_unit() {
        let a = hash_vector("x", 16, 7);
        assert_eq!(a, hash_vector("x", 16, 7));
        assert_ne!(a, hash_vector("x", 16, 8));
        assert_ne!(a, hash_vector("y", 16, 7));
        let g = balanced_tree(3, 2).unwrap();
        let t = hash_embeddings(g.node_ids(), 8, 1).unwrap();
        for (_, v) in t.iter() {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(hash_embeddings(g.node_ids(), 1, 1).is_err());
    }

    #[test]
    fn clustered_gap_on_hundred_node_tree() {
        // 1 + 3 + 9 + 27 + 81 = 121 ≥ 100
        let g = balanced_tree(3, 4).unwrap();
        for seed in 0..3 {
            let t = clustered_embeddings(&g, 64, seed, DEFAULT_NOISE).unwrap();
            let (edge, random) = cosine_gap(&g, &t, 0).unwrap();
            assert!(edge - random >= 0.2, "gap {}", edge - random);
            for (_, v) in t.iter() {
                assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            }
        }
        // scales too large or too small are steered back into range
        for noise in [50.0, 0.05] {
            let t = clustered_embeddings(&g, 64, 0, noise).unwrap();
            let (edge, random) = cosine_gap(&g, &t, 0).unwrap();
            assert!(edge - random >= 0.2, "noise {noise}");
        }
    }

    #[test]
    fn pair_counts() {
        let b = |c: f64, o: f64| GaussBox::new(vec![c], vec![o]).unwrap();
        let boxes = [b(0.0, 2.0), b(0.5, 0.5), b(2.4, 0.5), b(10.0, 1.0)];
        assert_eq!(count_overlapping_pairs(&boxes), 2);
        assert_eq!(count_containing_pairs(&boxes), 1);
    }
}
