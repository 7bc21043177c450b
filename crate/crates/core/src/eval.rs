//! Anchor scoring, ranking, ranking metrics and Fisher's p-value combination.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{bhattacharyya_unchecked, kl_unchecked, DiagGaussian};
use crate::projection::{EmbeddingTable, ProjectionParams};
use crate::taxonomy::{NodeId, SplitQuery, TaxonomyGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scorer {
    /// Bhattacharyya coefficient `BC(anchor, query)`.
    Bc,
    /// Negated `KL(query ‖ anchor)`.
    NegKl,
}

impl Scorer {
    pub const ALL: [Scorer; 2] = [Scorer::Bc, Scorer::NegKl];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Bc => "bc",
            Scorer::NegKl => "kl",
        }
    }

    /// Score plus the key used for ordering. For BC the key is `ln BC`, so
    /// anchors whose coefficient underflows to 0 still order by distance.
    fn score_and_key(self, query: &DiagGaussian, anchor: &DiagGaussian) -> (f64, f64) {
        match self {
            Scorer::Bc => {
                let db = bhattacharyya_unchecked(anchor, query);
                ((-db).exp(), -db)
            }
            Scorer::NegKl => {
                let s = -kl_unchecked(query, anchor);
                (s, s)
            }
        }
    }
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bc" => Ok(Scorer::Bc),
            "kl" | "neg_kl" => Ok(Scorer::NegKl),
            other => Err(Error::InvalidArgument(format!(
                "unknown scorer `{other}` (expected bc or kl)"
            ))),
        }
    }
}

impl std::fmt::Display for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Higher is better for both scorers.
pub fn score_anchor(s: Scorer, query: &DiagGaussian, anchor: &DiagGaussian) -> Result<f64> {
    if query.dim() != anchor.dim() {
        return Err(Error::DimensionMismatch {
            expected: query.dim(),
            actual: anchor.dim(),
        });
    }
    Ok(s.score_and_key(query, anchor).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub query: NodeId,
    /// Anchors by descending score, ties by ascending id.
    pub ranked_anchors: Vec<(NodeId, f64)>,
    /// 1-based ranks of the gold parents, ascending.
    pub gold_ranks: Vec<usize>,
}

impl RankedPrediction {
    pub fn best_rank(&self) -> usize {
        self.gold_ranks[0]
    }

    /// Predictions TSV rows `query<TAB>rank<TAB>anchor<TAB>score`, optionally
    /// truncated to the first `top` anchors.
    pub fn write_tsv(&self, top: Option<usize>, mut out: impl Write) -> Result<()> {
        let n = top.unwrap_or(usize::MAX);
        for (i, (a, s)) in self.ranked_anchors.iter().take(n).enumerate() {
            writeln!(out, "{}\t{}\t{}\t{:e}", self.query, i + 1, a, s)?;
        }
        Ok(())
    }
}

/// Seed-taxonomy anchors with their Gaussians, projected once.
#[derive(Debug, Clone)]
pub struct AnchorIndex {
    anchors: Vec<(NodeId, DiagGaussian)>,
}

impl AnchorIndex {
    pub fn from_gaussians(anchors: impl IntoIterator<Item = (NodeId, DiagGaussian)>) -> Result<Self> {
        let mut anchors: Vec<_> = anchors.into_iter().collect();
        anchors.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some((_, g)) = anchors.first() {
            let d = g.dim();
            if let Some((_, bad)) = anchors.iter().find(|(_, g)| g.dim() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: bad.dim(),
                });
            }
        }
        Ok(AnchorIndex { anchors })
    }

    /// Projects every seed node (eval mode).
    pub fn project(params: &ProjectionParams, embeddings: &EmbeddingTable, seed: &TaxonomyGraph) -> Result<Self> {
        let ids: Vec<&NodeId> = seed.node_ids().collect();
        let anchors = ids
            .par_iter()
            .map(|id| {
                let g = params.forward_eval(embeddings.get(id.as_str())?)?.to_gaussian();
                Ok(((*id).clone(), g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AnchorIndex { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DiagGaussian> {
        self.anchors
            .binary_search_by(|(a, _)| a.as_str().cmp(id))
            .ok()
            .map(|i| &self.anchors[i].1)
    }

    /// Ranks every anchor not in `exclude` for a query Gaussian.
    pub fn rank(
        &self,
        query: &NodeId,
        query_g: &DiagGaussian,
        gold: &BTreeSet<NodeId>,
        scorer: Scorer,
        exclude: Option<&BTreeSet<NodeId>>,
    ) -> Result<RankedPrediction> {
        if let Some((_, g)) = self.anchors.first() {
            if g.dim() != query_g.dim() {
                return Err(Error::DimensionMismatch {
                    expected: g.dim(),
                    actual: query_g.dim(),
                });
            }
        }
        let mut scored: Vec<(&NodeId, f64, f64)> = self
            .anchors
            .par_iter()
            .filter(|(id, _)| exclude.is_none_or(|ex| !ex.contains(id)))
            .map(|(id, g)| {
                let (s, key) = scorer.score_and_key(query_g, g);
                (id, s, key)
            })
            .collect();
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(b.0)));
        let gold_ranks: Vec<usize> = scored
            .iter()
            .enumerate()
            .filter(|(_, (id, _, _))| gold.contains(*id))
            .map(|(i, _)| i + 1)
            .collect();
        if gold_ranks.len() != gold.len() {
            let missing = gold
                .iter()
                .find(|g| !scored.iter().any(|(id, _, _)| id == g))
                .unwrap();
            return Err(Error::UnknownNode(missing.to_string()));
        }
        Ok(RankedPrediction {
            query: query.clone(),
            ranked_anchors: scored.into_iter().map(|(id, s, _)| (id.clone(), s)).collect(),
            gold_ranks,
        })
    }
}

/// Projects the query and every seed anchor, then ranks.
pub fn rank_anchors(
    params: &ProjectionParams,
    embeddings: &EmbeddingTable,
    query: &NodeId,
    gold: &BTreeSet<NodeId>,
    seed: &TaxonomyGraph,
    scorer: Scorer,
) -> Result<RankedPrediction> {
    let q = params.forward_eval(embeddings.get(query.as_str())?)?.to_gaussian();
    AnchorIndex::project(params, embeddings, seed)?.rank(query, &q, gold, scorer, None)
}

/// Ranks every query against all seed anchors, projecting the anchors once.
pub fn rank_queries(
    params: &ProjectionParams,
    embeddings: &EmbeddingTable,
    seed: &TaxonomyGraph,
    queries: &[SplitQuery],
    scorer: Scorer,
) -> Result<Vec<RankedPrediction>> {
    if let Some(q) = queries.iter().find(|q| seed.contains(q.query.as_str())) {
        return Err(Error::InvalidArgument(format!(
            "query `{}` is already a seed node",
            q.query
        )));
    }
    let index = AnchorIndex::project(params, embeddings, seed)?;
    queries
        .iter()
        .map(|q| {
            let g = params.forward_eval(embeddings.get(q.query.as_str())?)?.to_gaussian();
            index.rank(&q.query, &g, &q.gold_parents, scorer, None)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// How multiple gold parents collapse into one rank per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankReduce {
    Best,
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricOptions {
    /// MR per query: mean of gold ranks (default) or best.
    pub mr: RankReduce,
    /// MRR per query: reciprocal of the best rank (default) or mean reciprocal.
    pub mrr: RankReduce,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            mr: RankReduce::Mean,
            mrr: RankReduce::Best,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query: NodeId,
    pub best_rank: usize,
    pub mean_rank: f64,
    pub top1: NodeId,
    pub gold_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mr: f64,
    pub mrr: f64,
    pub recall: Vec<(usize, f64)>,
    pub hit: Vec<(usize, f64)>,
    pub wu_palmer: Option<f64>,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn hit_at(&self, k: usize) -> Option<f64> {
        self.hit.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    /// `metric,k,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k,value\n");
        writeln!(s, "mr,,{}", self.mr).unwrap();
        writeln!(s, "mrr,,{}", self.mrr).unwrap();
        for (k, v) in &self.recall {
            writeln!(s, "recall,{k},{v}").unwrap();
        }
        for (k, v) in &self.hit {
            writeln!(s, "hit,{k},{v}").unwrap();
        }
        if let Some(w) = self.wu_palmer {
            writeln!(s, "wu_palmer,,{w}").unwrap();
        }
        s
    }

    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        writeln!(s, "{title}").unwrap();
        writeln!(s, "  queries      {}", self.per_query.len()).unwrap();
        writeln!(s, "  MR           {:.4}", self.mr).unwrap();
        writeln!(s, "  MRR          {:.4}", self.mrr).unwrap();
        for (k, v) in &self.recall {
            writeln!(s, "  Recall@{k:<5}{v:.4}").unwrap();
        }
        for (k, v) in &self.hit {
            writeln!(s, "  Hit@{k:<8}{v:.4}").unwrap();
        }
        if let Some(w) = self.wu_palmer {
            writeln!(s, "  Wu&P         {w:.4}").unwrap();
        }
        s
    }
}

/// Aggregates per-query gold ranks into MR, MRR, Recall@k, Hit@k and (for
/// single-parent graphs) Wu & Palmer of the top-1 prediction against the gold
/// parent.
pub fn compute_metrics(
    preds: &[RankedPrediction],
    ks: &[usize],
    g: &TaxonomyGraph,
    single_parent: bool,
    opts: MetricOptions,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions to evaluate".into()));
    }
    if let Some(k) = ks.iter().find(|k| **k == 0) {
        return Err(Error::InvalidArgument(format!("k must be positive, got {k}")));
    }
    let n = preds.len() as f64;
    let mut mr = 0.0;
    let mut mrr = 0.0;
    let mut recall = vec![0.0; ks.len()];
    let mut hit = vec![0.0; ks.len()];
    let mut wu = 0.0;
    let mut per_query = Vec::with_capacity(preds.len());
    for p in preds {
        if p.gold_ranks.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "prediction for `{}` has no gold rank",
                p.query
            )));
        }
        let golds = p.gold_ranks.len() as f64;
        let best = *p.gold_ranks.iter().min().unwrap();
        let mean_rank = p.gold_ranks.iter().sum::<usize>() as f64 / golds;
        mr += match opts.mr {
            RankReduce::Mean => mean_rank,
            RankReduce::Best => best as f64,
        };
        mrr += match opts.mrr {
            RankReduce::Best => 1.0 / best as f64,
            RankReduce::Mean => p.gold_ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / golds,
        };
        for (i, &k) in ks.iter().enumerate() {
            let inside = p.gold_ranks.iter().filter(|r| **r <= k).count();
            recall[i] += inside as f64 / golds;
            if inside > 0 {
                hit[i] += 1.0;
            }
        }
        let top1 = p
            .ranked_anchors
            .first()
            .map(|(id, _)| id.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("empty ranking for `{}`", p.query)))?;
        if single_parent {
            let gold = &p.ranked_anchors[best - 1].0;
            wu += g.wu_palmer(top1.as_str(), gold.as_str())?;
        }
        per_query.push(QueryMetrics {
            query: p.query.clone(),
            best_rank: best,
            mean_rank,
            top1,
            gold_count: p.gold_ranks.len(),
        });
    }
    Ok(MetricReport {
        mr: mr / n,
        mrr: mrr / n,
        recall: ks.iter().copied().zip(recall.into_iter().map(|v| v / n)).collect(),
        hit: ks.iter().copied().zip(hit.into_iter().map(|v| v / n)).collect(),
        wu_palmer: single_parent.then_some(wu / n),
        per_query,
    })
}

// ---------------------------------------------------------------------------
// Fisher's method
// ---------------------------------------------------------------------------

/// `χ² = -2 Σ ln p_i` and its survival probability under `2k` degrees of
/// freedom.
pub fn fisher_combine(p_values: &[f64]) -> Result<(f64, f64)> {
    if p_values.is_empty() {
        return Err(Error::InvalidArgument("need at least one p-value".into()));
    }
    if let Some(p) = p_values.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside (0, 1]")));
    }
    let chi2 = -2.0 * p_values.iter().map(|p| p.ln()).sum::<f64>();
    let p = chi2_survival(chi2, 2 * p_values.len());
    Ok((chi2, p))
}

/// `P(X ≥ x)` for `X ~ χ²(dof)`.
pub fn chi2_survival(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    regularized_gamma_q(dof as f64 / 2.0, x / 2.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Upper regularized incomplete gamma `Q(a, x)`: series below `x = a + 1`,
/// Lentz continued fraction above.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        1.0 - sum * log_prefix.exp()
    } else {
        let tiny = f64::MIN_POSITIVE / EPS;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        log_prefix.exp() * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ConceptRecord;
    use proptest::prelude::*;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn g1(m: f64, v: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![v]).unwrap()
    }

    fn graph(nodes: &[&str], edges: &[(&str, &str)]) -> TaxonomyGraph {
        TaxonomyGraph::new(
            nodes.iter().map(|n| ConceptRecord::new(n, n, "").unwrap()),
            edges.iter().map(|(p, c)| (id(p), id(c))),
        )
        .unwrap()
    }

    #[test]
    fn query_equal_to_gold_ranks_first() {
        let anchors: Vec<(NodeId, DiagGaussian)> = (0..20)
            .map(|i| (id(&format!("a{i:02}")), DiagGaussian::new(vec![i as f64 * 0.3, 1.0], vec![0.5 + i as f64 * 0.1, 1.0]).unwrap()))
            .collect();
        let index = AnchorIndex::from_gaussians(anchors.clone()).unwrap();
        let g = graph(&["a00"], &[]);
        let mut preds = vec![];
        for s in Scorer::ALL {
            for (gid, gg) in &anchors {
                let gold = BTreeSet::from([gid.clone()]);
                preds.push(index.rank(&id("q"), gg, &gold, s, None).unwrap());
            }
        }
        let m = compute_metrics(&preds, &[1], &g, false, MetricOptions::default()).unwrap();
        assert_eq!(m.mrr, 1.0);
        assert_eq!(m.mr, 1.0);
    }

    #[test]
    fn scorer_examples() {
        let q = g1(0.0, 1.0);
        assert_eq!(score_anchor(Scorer::Bc, &q, &q).unwrap(), 1.0);
        assert_eq!(score_anchor(Scorer::NegKl, &q, &q).unwrap(), 0.0);
        let a = score_anchor(Scorer::NegKl, &q, &g1(1.0, 4.0)).unwrap();
        let b = score_anchor(Scorer::NegKl, &q, &g1(2.0, 4.0)).unwrap();
        assert!((a + 0.443147).abs() < 1e-6);
        assert!((b + 0.818147).abs() < 1e-6);
        assert!(a > b);
        assert!("xx".parse::<Scorer>().is_err());
    }

    #[test]
    fn ranking_ties_and_gold() {
        let q = g1(0.0, 1.0);
        let idx = AnchorIndex::from_gaussians(vec![
            (id("b"), g1(1.0, 1.0)),
            (id("a"), g1(-1.0, 1.0)),
            (id("c"), g1(0.0, 1.0)),
            (id("z"), g1(1e4, 1.0)),
            (id("y"), g1(2e4, 1.0)),
        ])
        .unwrap();
        let gold: BTreeSet<_> = [id("b")].into();
        for s in Scorer::ALL {
            let r = idx.rank(&id("q"), &q, &gold, s, None).unwrap();
            let order: Vec<&str> = r.ranked_anchors.iter().map(|(i, _)| i.as_str()).collect();
            // a and b tie; a wins on id. Underflowed BC still orders by distance.
            assert_eq!(order, ["c", "a", "b", "z", "y"]);
            assert_eq!(r.gold_ranks, vec![3]);
        }
        let missing: BTreeSet<_> = [id("nope")].into();
        assert!(idx.rank(&id("q"), &q, &missing, Scorer::Bc, None).is_err());

        let one = AnchorIndex::from_gaussians(vec![(id("only"), g1(5.0, 0.1))]).unwrap();
        let gold: BTreeSet<_> = [id("only")].into();
        assert_eq!(one.rank(&id("q"), &q, &gold, Scorer::Bc, None).unwrap().gold_ranks, vec![1]);
    }

    fn pred(q: &str, ranking: &[&str], gold: &[&str]) -> RankedPrediction {
        let ranked_anchors: Vec<(NodeId, f64)> = ranking
            .iter()
            .enumerate()
            .map(|(i, a)| (id(a), -(i as f64)))
            .collect();
        let gold_ranks = ranking
            .iter()
            .enumerate()
            .filter(|(_, a)| gold.contains(a))
            .map(|(i, _)| i + 1)
            .collect();
        RankedPrediction {
            query: id(q),
            ranked_anchors,
            gold_ranks,
        }
    }

    #[test]
    fn metric_examples() {
        let g = graph(
            &["r", "a", "b", "c", "d", "e"],
            &[("r", "a"), ("r", "b"), ("r", "c"), ("r", "d"), ("r", "e")],
        );
        let preds = vec![
            pred("q1", &["a", "b", "c", "d"], &["a"]),
            pred("q2", &["a", "b", "c", "d"], &["b"]),
            pred("q3", &["a", "b", "c", "d"], &["d"]),
        ];
        let m = compute_metrics(&preds, &[1, 5], &g, true, MetricOptions::default()).unwrap();
        assert!((m.mr - 7.0 / 3.0).abs() < 1e-12);
        assert!((m.mrr - 0.583333).abs() < 1e-6);

        let p = pred("q", &["a", "x1", "x2", "x3", "x4", "b"], &["a", "b"]);
        let m = compute_metrics(&[p], &[5], &g, false, MetricOptions::default()).unwrap();
        assert_eq!(m.recall_at(5), Some(0.5));
        assert_eq!(m.hit_at(5), Some(1.0));
        assert_eq!(m.wu_palmer, None);

        let perfect = vec![pred("q1", &["a", "b"], &["a"]), pred("q2", &["b", "a"], &["b"])];
        let m = compute_metrics(&perfect, &[1, 5, 10], &g, true, MetricOptions::default()).unwrap();
        assert_eq!((m.mr, m.mrr, m.wu_palmer), (1.0, 1.0, Some(1.0)));
        assert!(m.recall.iter().chain(&m.hit).all(|(_, v)| *v == 1.0));

        assert!(compute_metrics(&[], &[1], &g, true, MetricOptions::default()).is_err());
        assert!(compute_metrics(&perfect, &[0], &g, true, MetricOptions::default()).is_err());
    }

    #[test]
    fn fisher_examples() {
        let (c, p) = fisher_combine(&[1.0]).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(p, 1.0);
        let (c, p) = fisher_combine(&[0.05, 0.05]).unwrap();
        let closed = (-c / 2.0).exp() * (1.0 + c / 2.0);
        assert!((c - 11.9829).abs() < 1e-3);
        assert!((p - 0.01742).abs() < 1e-4);
        assert!((p - closed).abs() < 1e-12);
        assert!(fisher_combine(&[0.0]).is_err());
        assert!(fisher_combine(&[1.5]).is_err());
        assert!(fisher_combine(&[]).is_err());
    }

    #[test]
    fn gamma_q_matches_even_dof_closed_form() {
        // Q(k, y) = e^{-y} Σ_{j<k} y^j / j!
        for k in 1..12 {
            for &y in &[0.01, 0.5, 1.0, 3.7, 10.0, 25.0, 60.0] {
                let mut term = 1.0;
                let mut sum = 1.0;
                for j in 1..k {
                    term *= y / j as f64;
                    sum += term;
                }
                let closed = (-y).exp() * sum;
                let got = regularized_gamma_q(k as f64, y);
                assert!((got - closed).abs() < 1e-12, "k={k} y={y}: {got} vs {closed}");
            }
        }
    }

    proptest! {
        #[test]
        fn fisher_single_is_identity(p in 1e-12f64..=1.0) {
            let (c, q) = fisher_combine(&[p]).unwrap();
            prop_assert!((q - (-c / 2.0).exp()).abs() < 1e-10);
            prop_assert!((q - p).abs() < 1e-10);
        }
    }
}
