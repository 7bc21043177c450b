//! Taxonomy graph: loading, validation, leaf holdout and structural queries.
//!
//! A taxonomy is a DAG of hypernymy edges `parent -> child`. Everything is kept
//! in ordered maps so iteration order (and hence every RNG-driven procedure
//! built on top of it) is independent of file order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidArgument("node id must be non-empty".into()));
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptRecord {
    pub id: NodeId,
    pub surface: String,
    pub definition: String,
}

impl ConceptRecord {
    pub fn new(id: &str, surface: &str, definition: &str) -> Result<Self> {
        if surface.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "node `{id}` has an empty surface name"
            )));
        }
        Ok(ConceptRecord {
            id: NodeId::new(id)?,
            surface: surface.to_string(),
            definition: definition.to_string(),
        })
    }
}

/// Immutable, validated hypernymy DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyGraph {
    nodes: BTreeMap<NodeId, ConceptRecord>,
    parents: BTreeMap<NodeId, BTreeSet<NodeId>>,
    children: BTreeMap<NodeId, BTreeSet<NodeId>>,
    depth: BTreeMap<NodeId, usize>,
}

impl TaxonomyGraph {
    /// Builds a graph from records and `(parent, child)` edges, checking every
    /// structural invariant.
    pub fn new(
        records: impl IntoIterator<Item = ConceptRecord>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for rec in records {
            if nodes.contains_key(&rec.id) {
                return Err(Error::DuplicateNode(rec.id.to_string()));
            }
            nodes.insert(rec.id.clone(), rec);
        }
        let mut parents: BTreeMap<NodeId, BTreeSet<NodeId>> =
            nodes.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
        let mut children = parents.clone();
        for (p, c) in edges {
            for end in [&p, &c] {
                if !nodes.contains_key(end) {
                    return Err(Error::DanglingEdge {
                        parent: p.to_string(),
                        child: c.to_string(),
                        missing: end.to_string(),
                    });
                }
            }
            if p == c {
                return Err(Error::Cycle(vec![p.to_string(), c.to_string()]));
            }
            if !children.get_mut(&p).unwrap().insert(c.clone()) {
                return Err(Error::DuplicateEdge {
                    parent: p.to_string(),
                    child: c.to_string(),
                });
            }
            parents.get_mut(&c).unwrap().insert(p);
        }
        if let Some(cycle) = find_cycle(&children) {
            return Err(Error::Cycle(cycle));
        }
        if !nodes.is_empty() && parents.values().all(|ps| !ps.is_empty()) {
            return Err(Error::NoRoot);
        }
        let depth = shortest_depths(&parents, &children);
        Ok(TaxonomyGraph {
            nodes,
            parents,
            children,
            depth,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Option<&ConceptRecord> {
        self.nodes.get(id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    pub fn records(&self) -> impl Iterator<Item = &ConceptRecord> {
        self.nodes.values()
    }

    /// Edges as `(parent, child)`, ordered by parent then child.
    pub fn edges(&self) -> impl Iterator<Item = (&NodeId, &NodeId)> {
        self.children
            .iter()
            .flat_map(|(p, cs)| cs.iter().map(move |c| (p, c)))
    }

    pub fn edge_count(&self) -> usize {
        self.children.values().map(BTreeSet::len).sum()
    }

    pub fn has_edge(&self, parent: &str, child: &str) -> bool {
        self.children
            .get(parent)
            .is_some_and(|cs| cs.contains(child))
    }

    pub fn parents(&self, id: &str) -> Result<&BTreeSet<NodeId>> {
        self.parents
            .get(id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn children(&self, id: &str) -> Result<&BTreeSet<NodeId>> {
        self.children
            .get(id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn roots(&self) -> Vec<&NodeId> {
        self.parents
            .iter()
            .filter(|(_, ps)| ps.is_empty())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn leaves(&self) -> Vec<&NodeId> {
        self.children
            .iter()
            .filter(|(_, cs)| cs.is_empty())
            .map(|(id, _)| id)
            .collect()
    }

    /// True when every node has at most one parent.
    pub fn is_single_parent(&self) -> bool {
        self.parents.values().all(|ps| ps.len() <= 1)
    }

    /// Length of the shortest root-to-node path, counting the root as 1.
    pub fn depth(&self, id: &str) -> Result<usize> {
        self.depth
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Strict ancestors of `id`.
    pub fn ancestors(&self, id: &str) -> Result<BTreeSet<NodeId>> {
        self.reach(id, &self.parents)
    }

    /// Strict descendants of `id`.
    pub fn descendants(&self, id: &str) -> Result<BTreeSet<NodeId>> {
        self.reach(id, &self.children)
    }

    fn reach(&self, id: &str, adj: &BTreeMap<NodeId, BTreeSet<NodeId>>) -> Result<BTreeSet<NodeId>> {
        let start = adj.get(id).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&NodeId> = start.iter().collect();
        while let Some(n) = stack.pop() {
            if seen.insert(n.clone()) {
                stack.extend(adj[n].iter());
            }
        }
        Ok(seen)
    }

    /// Siblings, uncles, cousins and grandparents of `child`, minus the child
    /// and its direct parents.
    pub fn hard_negative_pool(&self, child: &str) -> Result<BTreeSet<NodeId>> {
        self.hard_negative_pool_with(child, false)
    }

    /// As [`hard_negative_pool`](Self::hard_negative_pool); with
    /// `exclude_ancestors` every ancestor of the child is also removed.
    pub fn hard_negative_pool_with(
        &self,
        child: &str,
        exclude_ancestors: bool,
    ) -> Result<BTreeSet<NodeId>> {
        let parents = self.parents(child)?;
        let mut pool = BTreeSet::new();
        let mut uncles = BTreeSet::new();
        for p in parents {
            // siblings
            pool.extend(self.children[p].iter().cloned());
            for gp in &self.parents[p] {
                pool.insert(gp.clone());
                for u in &self.children[gp] {
                    if u != p {
                        uncles.insert(u.clone());
                    }
                }
            }
        }
        for u in &uncles {
            // cousins
            pool.extend(self.children[u].iter().cloned());
        }
        pool.extend(uncles);
        pool.remove(child);
        for p in parents {
            pool.remove(p);
        }
        if exclude_ancestors {
            let anc = self.ancestors(child)?;
            pool.retain(|n| !anc.contains(n));
        }
        Ok(pool)
    }

    /// Common ancestor (inclusive) of greatest depth; ties resolved by id.
    pub fn lowest_common_ancestor(&self, a: &str, b: &str) -> Result<Option<NodeId>> {
        let mut anc_a = self.ancestors(a)?;
        anc_a.insert(NodeId(a.to_string()));
        let mut anc_b = self.ancestors(b)?;
        anc_b.insert(NodeId(b.to_string()));
        Ok(anc_a
            .intersection(&anc_b)
            .max_by(|x, y| self.depth[*x].cmp(&self.depth[*y]).then_with(|| y.cmp(x)))
            .cloned())
    }

    /// Wu & Palmer similarity `2·depth(lca) / (depth(a) + depth(b))`.
    ///
    /// Nodes in disconnected components share no ancestor and score 0.
    pub fn wu_palmer(&self, a: &str, b: &str) -> Result<f64> {
        let da = self.depth(a)?;
        let db = self.depth(b)?;
        let Some(lca) = self.lowest_common_ancestor(a, b)? else {
            return Ok(0.0);
        };
        Ok(2.0 * self.depth[&lca] as f64 / (da + db) as f64)
    }

    /// A copy of the graph with `removed` nodes and their incident edges dropped.
    pub fn without_nodes(&self, removed: &BTreeSet<NodeId>) -> Result<TaxonomyGraph> {
        let records = self
            .nodes
            .values()
            .filter(|r| !removed.contains(&r.id))
            .cloned();
        let edges = self
            .edges()
            .filter(|(p, c)| !removed.contains(*p) && !removed.contains(*c))
            .map(|(p, c)| (p.clone(), c.clone()))
            .collect::<Vec<_>>();
        TaxonomyGraph::new(records, edges)
    }

    /// Holds out `round(fraction · |leaves|)` leaves as queries.
    ///
    /// Leaves are visited in a seeded uniform shuffle; a candidate is skipped
    /// when holding it out would remove a gold parent of an already selected
    /// query, or when it has no parent to serve as gold.
    pub fn split_leaves(&self, fraction: f64, rng_seed: u64) -> Result<SplitResult> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let mut leaves: Vec<NodeId> = self.leaves().into_iter().cloned().collect();
        if leaves.len() < 2 {
            return Err(Error::TooSmall(format!(
                "need at least 2 leaves, found {}",
                leaves.len()
            )));
        }
        let target = (fraction * leaves.len() as f64).round() as usize;
        if target == 0 {
            return Err(Error::TooSmall(format!(
                "fraction {fraction} of {} leaves rounds to zero queries",
                leaves.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        leaves.shuffle(&mut rng);

        let mut selected: BTreeSet<NodeId> = BTreeSet::new();
        let mut gold_parents: BTreeSet<NodeId> = BTreeSet::new();
        let mut queries = Vec::new();
        for leaf in leaves {
            if queries.len() == target {
                break;
            }
            let parents = &self.parents[&leaf];
            if parents.is_empty()
                || gold_parents.contains(&leaf)
                || parents.iter().any(|p| selected.contains(p))
            {
                continue;
            }
            selected.insert(leaf.clone());
            gold_parents.extend(parents.iter().cloned());
            queries.push(SplitQuery {
                query: leaf,
                gold_parents: parents.clone(),
            });
        }
        if queries.is_empty() {
            return Err(Error::TooSmall(
                "no leaf can be held out while keeping its gold parents".into(),
            ));
        }
        queries.sort_by(|a, b| a.query.cmp(&b.query));
        let seed = self.without_nodes(&selected)?;
        Ok(SplitResult {
            seed,
            queries,
            split_seed: rng_seed,
            fraction,
        })
    }
}

fn find_cycle(children: &BTreeMap<NodeId, BTreeSet<NodeId>>) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark: BTreeMap<&NodeId, Mark> = children.keys().map(|k| (k, Mark::New)).collect();
    for start in children.keys() {
        if mark[start] != Mark::New {
            continue;
        }
        // (node, iterator over its children)
        let mut stack: Vec<(&NodeId, std::collections::btree_set::Iter<'_, NodeId>)> =
            vec![(start, children[start].iter())];
        mark.insert(start, Mark::Open);
        while let Some((node, iter)) = stack.last_mut() {
            match iter.next() {
                Some(next) => match mark[next] {
                    Mark::New => {
                        mark.insert(next, Mark::Open);
                        stack.push((next, children[next].iter()));
                    }
                    Mark::Open => {
                        let pos = stack.iter().position(|(n, _)| *n == next).unwrap();
                        let mut cycle: Vec<String> =
                            stack[pos..].iter().map(|(n, _)| n.to_string()).collect();
                        cycle.push(next.to_string());
                        return Some(cycle);
                    }
                    Mark::Done => {}
                },
                None => {
                    mark.insert(node, Mark::Done);
                    stack.pop();
                }
            }
        }
    }
    None
}

fn shortest_depths(
    parents: &BTreeMap<NodeId, BTreeSet<NodeId>>,
    children: &BTreeMap<NodeId, BTreeSet<NodeId>>,
) -> BTreeMap<NodeId, usize> {
    let mut depth = BTreeMap::new();
    let mut queue = VecDeque::new();
    for (id, ps) in parents {
        if ps.is_empty() {
            depth.insert(id.clone(), 1);
            queue.push_back(id);
        }
    }
    while let Some(n) = queue.pop_front() {
        let d = depth[n];
        for c in &children[n] {
            if !depth.contains_key(c) {
                depth.insert(c.clone(), d + 1);
                queue.push_back(c);
            }
        }
    }
    depth
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitQuery {
    pub query: NodeId,
    pub gold_parents: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub seed: TaxonomyGraph,
    pub queries: Vec<SplitQuery>,
    pub split_seed: u64,
    pub fraction: f64,
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(c) => return Err(format!("unknown escape `\\{c}`")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// Content lines of a TSV file as `(1-based line number, text)`, skipping
/// blank lines.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn read_nodes(path: &Path) -> Result<Vec<ConceptRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let un = |s: &str| unescape_field(s).map_err(|m| Error::parse(path, lineno, m));
        let id = un(fields[0])?;
        let surface = un(fields[1])?;
        let definition = fields.get(2).map(|s| un(s)).transpose()?.unwrap_or_default();
        if id.is_empty() {
            return Err(Error::parse(path, lineno, "empty node id"));
        }
        if surface.is_empty() {
            return Err(Error::parse(path, lineno, "empty surface name"));
        }
        out.push(ConceptRecord {
            id: NodeId(id),
            surface,
            definition,
        });
    }
    Ok(out)
}

pub fn read_edges(path: &Path) -> Result<Vec<(NodeId, NodeId)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::parse(path, lineno, "expected `parent<TAB>child`"));
        }
        out.push((NodeId(fields[0].to_string()), NodeId(fields[1].to_string())));
    }
    Ok(out)
}

pub fn load_taxonomy(nodes_path: &Path, edges_path: &Path) -> Result<TaxonomyGraph> {
    let nodes = read_nodes(nodes_path)?;
    let edges = read_edges(edges_path)?;
    TaxonomyGraph::new(nodes, edges)
}

pub fn write_nodes(g: &TaxonomyGraph, mut out: impl Write) -> Result<()> {
    for r in g.records() {
        writeln!(
            out,
            "{}\t{}\t{}",
            escape_field(r.id.as_str()),
            escape_field(&r.surface),
            escape_field(&r.definition)
        )?;
    }
    Ok(())
}

pub fn write_edges(g: &TaxonomyGraph, mut out: impl Write) -> Result<()> {
    for (p, c) in g.edges() {
        writeln!(out, "{p}\t{c}")?;
    }
    Ok(())
}

/// Query manifest: a `#fraction=..<TAB>rng_seed=..` header, then
/// `query<TAB>parent1,parent2,...` rows.
pub fn write_split_manifest(split: &SplitResult, mut out: impl Write) -> Result<()> {
    writeln!(out, "#fraction={}\trng_seed={}", split.fraction, split.split_seed)?;
    for q in &split.queries {
        let golds: Vec<&str> = q.gold_parents.iter().map(NodeId::as_str).collect();
        writeln!(out, "{}\t{}", q.query, golds.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryManifest {
    pub fraction: Option<f64>,
    pub rng_seed: Option<u64>,
    pub queries: Vec<SplitQuery>,
}

pub fn read_split_manifest(path: &Path) -> Result<QueryManifest> {
    let text = fs::read_to_string(path)?;
    let mut manifest = QueryManifest {
        fraction: None,
        rng_seed: None,
        queries: Vec::new(),
    };
    for (lineno, line) in data_lines(&text) {
        if let Some(header) = line.strip_prefix('#') {
            for kv in header.split('\t') {
                match kv.split_once('=') {
                    Some(("fraction", v)) => {
                        manifest.fraction = Some(v.parse().map_err(|_| {
                            Error::parse(path, lineno, format!("bad fraction `{v}`"))
                        })?)
                    }
                    Some(("rng_seed", v)) => {
                        manifest.rng_seed = Some(v.parse().map_err(|_| {
                            Error::parse(path, lineno, format!("bad rng_seed `{v}`"))
                        })?)
                    }
                    _ => {}
                }
            }
            continue;
        }
        let Some((q, golds)) = line.split_once('\t') else {
            return Err(Error::parse(path, lineno, "expected `query<TAB>gold,gold,...`"));
        };
        let gold_parents: BTreeSet<NodeId> = golds
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| NodeId(s.to_string()))
            .collect();
        if q.is_empty() || gold_parents.is_empty() {
            return Err(Error::parse(path, lineno, "query needs an id and at least one gold parent"));
        }
        manifest.queries.push(SplitQuery {
            query: NodeId(q.to_string()),
            gold_parents,
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    pub(crate) fn graph(nodes: &[&str], edges: &[(&str, &str)]) -> Result<TaxonomyGraph> {
        TaxonomyGraph::new(
            nodes.iter().map(|n| ConceptRecord::new(n, n, "").unwrap()),
            edges.iter().map(|(p, c)| (id(p), id(c))),
        )
    }

    fn set(ids: &[&str]) -> BTreeSet<NodeId> {
        ids.iter().map(|s| id(s)).collect()
    }

    #[test]
    fn smallest_tree() {
        let g = graph(&["a", "b", "c"], &[("a", "b"), ("a", "c")]).unwrap();
        assert_eq!(g.roots(), vec![&id("a")]);
        assert_eq!(g.leaves(), vec![&id("b"), &id("c")]);
    }

    #[test]
    fn two_cycle_rejected() {
        let err = graph(&["a", "b"], &[("a", "b"), ("b", "a")]).unwrap_err();
        match err {
            Error::Cycle(c) => {
                assert_eq!(c.first(), c.last());
                assert_eq!(c.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_and_duplicates() {
        assert!(matches!(
            graph(&["a"], &[("a", "x")]).unwrap_err(),
            Error::DanglingEdge { missing, .. } if missing == "x"
        ));
        assert!(matches!(
            graph(&["a", "a"], &[]).unwrap_err(),
            Error::DuplicateNode(_)
        ));
        assert!(matches!(
            graph(&["a", "b"], &[("a", "b"), ("a", "b")]).unwrap_err(),
            Error::DuplicateEdge { .. }
        ));
    }

    #[test]
    fn load_order_does_not_matter() {
        let a = graph(&["a", "b", "c"], &[("a", "b"), ("a", "c")]).unwrap();
        let b = graph(&["c", "b", "a"], &[("a", "c"), ("a", "b")]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_ten_leaves() {
        let mut nodes = vec!["r".to_string()];
        let mut edges = vec![];
        for i in 0..10 {
            nodes.push(format!("l{i}"));
            edges.push(("r".to_string(), format!("l{i}")));
        }
        let g = TaxonomyGraph::new(
            nodes.iter().map(|n| ConceptRecord::new(n, n, "").unwrap()),
            edges.iter().map(|(p, c)| (id(p), id(c))),
        )
        .unwrap();
        let s = g.split_leaves(0.2, 7).unwrap();
        assert_eq!(s.queries.len(), 2);
        assert_eq!(s.seed.len(), 9);
    }

    #[test]
    fn split_star() {
        let g = graph(
            &["root", "l1", "l2", "l3", "l4", "l5"],
            &[("root", "l1"), ("root", "l2"), ("root", "l3"), ("root", "l4"), ("root", "l5")],
        )
        .unwrap();
        let s = g.split_leaves(0.2, 1).unwrap();
        assert_eq!(s.queries.len(), 1);
        assert_eq!(s.seed.len(), 5);
        assert!(s.seed.contains("root"));
        assert_eq!(s.queries[0].gold_parents, set(&["root"]));
        assert!(!s.seed.contains(s.queries[0].query.as_str()));
        assert_eq!(s, g.split_leaves(0.2, 1).unwrap());
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let g = graph(&["a", "b", "c"], &[("a", "b"), ("a", "c")]).unwrap();
        assert!(matches!(g.split_leaves(1.5, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(g.split_leaves(0.0, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(g.split_leaves(0.1, 0), Err(Error::TooSmall(_))));
        let one = graph(&["a", "b"], &[("a", "b")]).unwrap();
        assert!(matches!(one.split_leaves(0.5, 0), Err(Error::TooSmall(_))));
    }

    #[test]
    fn pool_chain() {
        let g = graph(&["r", "p", "c"], &[("r", "p"), ("p", "c")]).unwrap();
        assert_eq!(g.hard_negative_pool("c").unwrap(), set(&["r"]));
        assert!(g.hard_negative_pool_with("c", true).unwrap().is_empty());
        assert!(g.hard_negative_pool("r").unwrap().is_empty());
        assert!(matches!(g.hard_negative_pool("zz"), Err(Error::UnknownNode(_))));
    }

    /// Brute-force relation enumeration straight from the definitions.
    fn brute_pool(g: &TaxonomyGraph, c: &str) -> BTreeSet<NodeId> {
        let all: Vec<&NodeId> = g.node_ids().collect();
        let is_parent = |p: &str, ch: &str| g.has_edge(p, ch);
        let mut out = BTreeSet::new();
        for x in &all {
            let x = x.as_str();
            let sibling = all.iter().any(|p| is_parent(p.as_str(), c) && is_parent(p.as_str(), x));
            let grandparent = all.iter().any(|p| is_parent(x, p.as_str()) && is_parent(p.as_str(), c));
            let uncle_of = |u: &str| {
                all.iter().any(|p| {
                    is_parent(p.as_str(), c)
                        && p.as_str() != u
                        && all.iter().any(|gp| is_parent(gp.as_str(), p.as_str()) && is_parent(gp.as_str(), u))
                })
            };
            let uncle = uncle_of(x);
            let cousin = all.iter().any(|u| uncle_of(u.as_str()) && is_parent(u.as_str(), x));
            if (sibling || grandparent || uncle || cousin) && x != c && !is_parent(x, c) {
                out.insert(id(x));
            }
        }
        out
    }

    #[test]
    fn pool_six_nodes() {
        let g = graph(
            &["r", "p", "u", "c", "s", "k"],
            &[("r", "p"), ("r", "u"), ("p", "c"), ("p", "s"), ("u", "k")],
        )
        .unwrap();
        let expected = brute_pool(&g, "c");
        assert_eq!(expected, set(&["s", "u", "k", "r"]));
        assert_eq!(g.hard_negative_pool("c").unwrap(), expected);
    }

    #[test]
    fn wu_palmer_examples() {
        // r -> a -> {x, y}
        let g = graph(&["r", "a", "x", "y"], &[("r", "a"), ("a", "x"), ("a", "y")]).unwrap();
        assert_eq!(g.depth("x").unwrap(), 3);
        assert_eq!(g.wu_palmer("x", "x").unwrap(), 1.0);
        assert!((g.wu_palmer("x", "y").unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((g.wu_palmer("r", "x").unwrap() - 2.0 / 4.0).abs() < 1e-15);
        assert_eq!(g.wu_palmer("r", "r").unwrap(), 1.0);
        assert!(g.wu_palmer("r", "q").is_err());
    }

    #[test]
    fn multi_parent_depth_is_shortest() {
        let g = graph(
            &["r", "a", "b", "c"],
            &[("r", "a"), ("a", "b"), ("b", "c"), ("r", "c")],
        )
        .unwrap();
        assert_eq!(g.depth("c").unwrap(), 2);
        assert_eq!(g.lowest_common_ancestor("b", "c").unwrap(), Some(id("b")));
        assert_eq!(g.lowest_common_ancestor("a", "c").unwrap(), Some(id("a")));
    }

    #[test]
    fn escaping_round_trips() {
        let raw = "tab\there\nnew \\ slash";
        assert_eq!(unescape_field(&escape_field(raw)).unwrap(), raw);
        assert!(unescape_field("bad\\q").is_err());
    }

    /// Random tree as parent indices: node i > 0 hangs under some j < i.
    fn tree_strategy() -> impl Strategy<Value = Vec<usize>> {
        (2usize..40).prop_flat_map(|n| {
            (1..n)
                .map(|i| (0..i).boxed())
                .collect::<Vec<_>>()
        })
    }

    fn tree_from(parents: &[usize]) -> (Vec<String>, Vec<(String, String)>) {
        let n = parents.len() + 1;
        let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let edges = parents
            .iter()
            .enumerate()
            .map(|(i, &p)| (nodes[p].clone(), nodes[i + 1].clone()))
            .collect();
        (nodes, edges)
    }

    fn build(nodes: &[String], edges: &[(String, String)]) -> Result<TaxonomyGraph> {
        TaxonomyGraph::new(
            nodes.iter().map(|n| ConceptRecord::new(n, n, "").unwrap()),
            edges.iter().map(|(p, c)| (id(p), id(c))),
        )
    }

    proptest! {
        #[test]
        fn trees_accepted_back_edges_rejected(parents in tree_strategy(), pick in any::<prop::sample::Index>()) {
            let (nodes, mut edges) = tree_from(&parents);
            let g = build(&nodes, &edges).unwrap();
            // back-edge from some non-root node to one of its ancestors (or itself)
            let child_idx = 1 + pick.index(parents.len());
            let mut anc = g.ancestors(&nodes[child_idx]).unwrap();
            anc.insert(id(&nodes[child_idx]));
            let target = anc.iter().next().unwrap().clone();
            edges.push((nodes[child_idx].clone(), target.to_string()));
            prop_assert!(matches!(build(&nodes, &edges), Err(Error::Cycle(_))));
        }

        #[test]
        fn pool_excludes_child_and_parents(parents in tree_strategy()) {
            let (nodes, edges) = tree_from(&parents);
            let g = build(&nodes, &edges).unwrap();
            for n in g.node_ids() {
                let pool = g.hard_negative_pool(n.as_str()).unwrap();
                prop_assert!(!pool.contains(n));
                for p in g.parents(n.as_str()).unwrap() {
                    prop_assert!(!pool.contains(p));
                }
                prop_assert_eq!(&pool, &brute_pool(&g, n.as_str()));
            }
        }

        #[test]
        fn wu_palmer_symmetric_and_one_iff_equal(parents in tree_strategy()) {
            let (nodes, edges) = tree_from(&parents);
            let g = build(&nodes, &edges).unwrap();
            for a in &nodes {
                for b in &nodes {
                    let ab = g.wu_palmer(a, b).unwrap();
                    prop_assert_eq!(ab, g.wu_palmer(b, a).unwrap());
                    prop_assert!(ab > 0.0 && ab <= 1.0);
                    prop_assert_eq!(ab == 1.0, a == b);
                }
            }
        }

        #[test]
        fn split_is_pure_and_keeps_gold(parents in tree_strategy(), seed in any::<u64>()) {
            let (nodes, edges) = tree_from(&parents);
            let g = build(&nodes, &edges).unwrap();
            if g.leaves().len() >= 5 {
                let a = g.split_leaves(0.2, seed).unwrap();
                prop_assert_eq!(&a, &g.split_leaves(0.2, seed).unwrap());
                let target = (0.2 * g.leaves().len() as f64).round() as usize;
                prop_assert_eq!(a.queries.len(), target);
                for q in &a.queries {
                    prop_assert!(g.children(q.query.as_str()).unwrap().is_empty());
                    prop_assert!(!a.seed.contains(q.query.as_str()));
                    for p in &q.gold_parents {
                        prop_assert!(a.seed.contains(p.as_str()));
                    }
                }
            }
        }
    }
}
