//! Merged ICD/ATC knowledge graph: construction, ancestor-closure
//! augmentation, and distance queries.
//!
//! Hierarchy file: tab-separated (child-code, parent-code, modality), no
//! header. Cross-link file: tab-separated (icd-code, atc-code), no header.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use crate::corpus::{Modality, Vocabulary};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    IcdHier,
    AtcHier,
    Cross,
    Augmented,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::IcdHier => "icd-hier",
            Relation::AtcHier => "atc-hier",
            Relation::Cross => "cross",
            Relation::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub code: String,
    pub modality: Modality,
    /// Depth in its hierarchy; roots are level 0.
    pub level: usize,
    pub is_leaf: bool,
    /// Parent within the same hierarchy, if any.
    pub parent: Option<usize>,
}

/// Parent-child pairs of one modality's rooted forest.
#[derive(Debug, Clone)]
pub struct HierarchySource {
    pub modality: Modality,
    /// (child-code, parent-code) pairs.
    pub pairs: Vec<(String, String)>,
}

impl HierarchySource {
    pub fn new(modality: Modality) -> Self {
        HierarchySource {
            modality,
            pairs: Vec::new(),
        }
    }
}

/// Undirected graph over the union of ICD and ATC codes.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub nodes: Vec<GraphNode>,
    /// Canonical edges with min(node-id) first; no duplicates, no self-loops.
    pub edges: Vec<(usize, usize, Relation)>,
    pub augmented: bool,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn node_id(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// All proper ancestors of a node, nearest first.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out
    }

    pub fn edge_counts(&self) -> HashMap<Relation, usize> {
        let mut counts = HashMap::new();
        for &(_, _, rel) in &self.edges {
            *counts.entry(rel).or_insert(0) += 1;
        }
        counts
    }

    pub fn stats_report(&self) -> String {
        let counts = self.edge_counts();
        let mut out = String::new();
        out.push_str(&format!("nodes\t{}\n", self.nodes.len()));
        let n_icd = self
            .nodes
            .iter()
            .filter(|n| n.modality == Modality::Icd)
            .count();
        out.push_str(&format!("icd-nodes\t{n_icd}\n"));
        out.push_str(&format!("atc-nodes\t{}\n", self.nodes.len() - n_icd));
        out.push_str(&format!("edges\t{}\n", self.edges.len()));
        for rel in [
            Relation::IcdHier,
            Relation::AtcHier,
            Relation::Cross,
            Relation::Augmented,
        ] {
            out.push_str(&format!(
                "{}-edges\t{}\n",
                rel.as_str(),
                counts.get(&rel).copied().unwrap_or(0)
            ));
        }
        out.push_str(&format!("augmented\t{}\n", self.augmented));
        out
    }

    /// Edge list export, one `code\tcode\trelation` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for &(u, v, rel) in &self.edges {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.nodes[u].code,
                self.nodes[v].code,
                rel.as_str()
            ));
        }
        out
    }

    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![BTreeSet::new(); self.nodes.len()];
        for &(u, v, _) in &self.edges {
            adj[u].insert(v);
            adj[v].insert(u);
        }
        self.adjacency = adj.into_iter().map(|s| s.into_iter().collect()).collect();
    }
}

fn canonical(u: usize, v: usize) -> (usize, usize) {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

/// Build the merged unaugmented graph from both hierarchies plus cross links.
pub fn build_graph(
    icd_hier: &HierarchySource,
    atc_hier: &HierarchySource,
    cross_links: &[(String, String)],
) -> Result<KnowledgeGraph> {
    let mut nodes: Vec<GraphNode> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<(usize, usize, Relation)> = Vec::new();
    let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();

    for source in [icd_hier, atc_hier] {
        let modality = source.modality;
        let rel = match modality {
            Modality::Icd => Relation::IcdHier,
            Modality::Atc => Relation::AtcHier,
        };
        let intern = |code: &str,
                          nodes: &mut Vec<GraphNode>,
                          index: &mut HashMap<String, usize>|
         -> Result<usize> {
            if let Some(&id) = index.get(code) {
                if nodes[id].modality != modality {
                    return Err(Error::Graph(format!(
                        "code {code:?} appears in both hierarchies"
                    )));
                }
                return Ok(id);
            }
            let id = nodes.len();
            nodes.push(GraphNode {
                code: code.to_string(),
                modality,
                level: 0,
                is_leaf: true,
                parent: None,
            });
            index.insert(code.to_string(), id);
            Ok(id)
        };
        for (child, parent) in &source.pairs {
            let c = intern(child, &mut nodes, &mut index)?;
            let p = intern(parent, &mut nodes, &mut index)?;
            if c == p {
                return Err(Error::Graph(format!("self-parent on code {child:?}")));
            }
            if let Some(prev) = nodes[c].parent {
                if prev != p {
                    return Err(Error::Graph(format!(
                        "code {child:?} has two parents: {:?} and {parent:?}",
                        nodes[prev].code
                    )));
                }
                continue;
            }
            nodes[c].parent = Some(p);
            nodes[p].is_leaf = false;
            let key = canonical(c, p);
            if edge_set.insert(key) {
                edges.push((key.0, key.1, rel));
            }
        }
    }

    for (id, node) in nodes.iter().enumerate() {
        let mut seen = vec![id];
        let mut cur = node.parent;
        while let Some(p) = cur {
            if seen.contains(&p) {
                return Err(Error::Graph(format!(
                    "cycle in {} hierarchy through code {:?}",
                    node.modality, node.code
                )));
            }
            seen.push(p);
            cur = nodes[p].parent;
        }
    }

    let mut depths: Vec<Option<usize>> = vec![None; nodes.len()];
    fn depth_of(i: usize, nodes: &[GraphNode], depths: &mut Vec<Option<usize>>) -> usize {
        if let Some(d) = depths[i] {
            return d;
        }
        let d = match nodes[i].parent {
            None => 0,
            Some(p) => depth_of(p, nodes, depths) + 1,
        };
        depths[i] = Some(d);
        d
    }
    for i in 0..nodes.len() {
        let d = depth_of(i, &nodes, &mut depths);
        nodes[i].level = d;
    }

    for (icd_code, atc_code) in cross_links {
        let u = *index.get(icd_code.as_str()).ok_or_else(|| {
            Error::Graph(format!("cross link references unknown code {icd_code:?}"))
        })?;
        let v = *index.get(atc_code.as_str()).ok_or_else(|| {
            Error::Graph(format!("cross link references unknown code {atc_code:?}"))
        })?;
        if nodes[u].modality != Modality::Icd || nodes[v].modality != Modality::Atc {
            return Err(Error::Graph(format!(
                "cross link ({icd_code:?}, {atc_code:?}) must join an ICD code to an ATC code"
            )));
        }
        let key = canonical(u, v);
        if edge_set.insert(key) {
            edges.push((key.0, key.1, Relation::Cross));
        }
    }

    let mut g = KnowledgeGraph {
        nodes,
        edges,
        augmented: false,
        index,
        adjacency: Vec::new(),
    };
    g.rebuild_adjacency();
    Ok(g)
}

/// Connect every node to all of its proper ancestors.
pub fn augment_ancestors(g: &KnowledgeGraph) -> Result<KnowledgeGraph> {
    if g.augmented {
        return Err(Error::Graph("graph is already augmented".into()));
    }
    let mut out = g.clone();
    let mut edge_set: BTreeSet<(usize, usize)> =
        out.edges.iter().map(|&(u, v, _)| (u, v)).collect();
    for node in 0..out.nodes.len() {
        for anc in out.ancestors(node) {
            let key = canonical(node, anc);
            if edge_set.insert(key) {
                out.edges.push((key.0, key.1, Relation::Augmented));
            }
        }
    }
    out.augmented = true;
    out.rebuild_adjacency();
    Ok(out)
}

/// Minimum unweighted path length from `from` to any node in `to_set`.
pub fn shortest_distance(
    g: &KnowledgeGraph,
    from: usize,
    to_set: &BTreeSet<usize>,
) -> Result<Option<usize>> {
    if from >= g.nodes.len() {
        return Err(Error::Graph(format!("unknown node id {from}")));
    }
    if to_set.is_empty() {
        return Err(Error::Graph("empty distance target set".into()));
    }
    if let Some(&bad) = to_set.iter().find(|&&t| t >= g.nodes.len()) {
        return Err(Error::Graph(format!("unknown node id {bad}")));
    }
    if to_set.contains(&from) {
        return Ok(Some(0));
    }
    let mut dist = vec![usize::MAX; g.nodes.len()];
    dist[from] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                if to_set.contains(&v) {
                    return Ok(Some(dist[v]));
                }
                queue.push_back(v);
            }
        }
    }
    Ok(None)
}

/// Map each leaf to its parent and every other node to itself.
pub fn collapse_last_level(g: &KnowledgeGraph) -> Result<Vec<usize>> {
    if g.augmented {
        return Err(Error::Graph(
            "last-level collapse is defined on the unaugmented graph".into(),
        ));
    }
    let mapping = (0..g.nodes.len())
        .map(|i| {
            let n = &g.nodes[i];
            if n.is_leaf {
                n.parent.unwrap_or(i)
            } else {
                i
            }
        })
        .collect();
    Ok(mapping)
}

/// BFS distance between collapsed node classes, traversing g's edges with
/// both endpoints mapped through `collapse`.
pub fn collapsed_distance(
    g: &KnowledgeGraph,
    collapse: &[usize],
    from: usize,
    to_set: &BTreeSet<usize>,
) -> Result<Option<usize>> {
    let start = collapse[from];
    let targets: BTreeSet<usize> = to_set.iter().map(|&t| collapse[t]).collect();
    if targets.contains(&start) {
        return Ok(Some(0));
    }
    let mut class_adj: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for &(u, v, _) in &g.edges {
        let (cu, cv) = (collapse[u], collapse[v]);
        if cu != cv {
            class_adj.entry(cu).or_default().insert(cv);
            class_adj.entry(cv).or_default().insert(cu);
        }
    }
    let mut dist: HashMap<usize, usize> = HashMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        if let Some(nbrs) = class_adj.get(&u) {
            for &v in nbrs {
                if !dist.contains_key(&v) {
                    dist.insert(v, du + 1);
                    if targets.contains(&v) {
                        return Ok(Some(du + 1));
                    }
                    queue.push_back(v);
                }
            }
        }
    }
    Ok(None)
}

pub fn load_hierarchy(path: &Path) -> Result<(HierarchySource, HierarchySource)> {
    let text = util::read_to_string(path)?;
    let mut icd = HierarchySource::new(Modality::Icd);
    let mut atc = HierarchySource::new(Modality::Atc);
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                path.display().to_string(),
                lineno,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let modality = Modality::parse(fields[2]).ok_or_else(|| {
            Error::format(
                path.display().to_string(),
                lineno,
                format!("unknown modality {:?}", fields[2]),
            )
        })?;
        let pair = (fields[0].to_string(), fields[1].to_string());
        match modality {
            Modality::Icd => icd.pairs.push(pair),
            Modality::Atc => atc.pairs.push(pair),
        }
    }
    Ok((icd, atc))
}

pub fn load_cross_links(path: &Path) -> Result<Vec<(String, String)>> {
    let text = util::read_to_string(path)?;
    let mut links = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::format(
                path.display().to_string(),
                lineno,
                format!("expected 2 tab-separated fields, got {}", fields.len()),
            ));
        }
        links.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(links)
}

pub fn hierarchy_to_tsv(sources: &[&HierarchySource]) -> String {
    let mut out = String::new();
    for src in sources {
        for (child, parent) in &src.pairs {
            out.push_str(&format!("{child}\t{parent}\t{}\n", src.modality.as_str()));
        }
    }
    out
}

pub fn cross_links_to_tsv(links: &[(String, String)]) -> String {
    let mut out = String::new();
    for (icd, atc) in links {
        out.push_str(&format!("{icd}\t{atc}\n"));
    }
    out
}

/// Check that every vocabulary code names a leaf graph node, and return the
/// graph node ids of the vocabulary, ICD block first.
pub fn vocab_node_ids(g: &KnowledgeGraph, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(vocab.len(Modality::Icd) + vocab.len(Modality::Atc));
    for modality in [Modality::Icd, Modality::Atc] {
        for entry in vocab.entries(modality) {
            let id = g.node_id(&entry.code).ok_or_else(|| {
                Error::Graph(format!(
                    "vocabulary code {:?} is missing from the knowledge graph",
                    entry.code
                ))
            })?;
            if g.nodes[id].modality != modality {
                return Err(Error::Graph(format!(
                    "vocabulary code {:?} has modality {} in the graph",
                    entry.code, g.nodes[id].modality
                )));
            }
            ids.push(id);
        }
    }
    Ok(ids)
}
