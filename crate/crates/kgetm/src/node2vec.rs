//! Code-embedding pretraining: biased second-order random walks over the
//! knowledge graph plus skip-gram training with negative sampling.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct WalkConfig {
    /// Return parameter: 1/p weights stepping back to the previous node.
    pub p: f64,
    /// In-out parameter: 1/q weights stepping away from the previous node.
    pub q: f64,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub window: usize,
    pub negatives: usize,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            p: 1.0,
            q: 1.0,
            walk_length: 40,
            walks_per_node: 10,
            window: 5,
            negatives: 5,
            dim: 256,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p <= 0.0 || self.q <= 0.0 {
            return Err(Error::Config("walk parameters p and q must be positive".into()));
        }
        if self.walk_length < 2 {
            return Err(Error::Config("walk length must be at least 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        if self.walks_per_node == 0 || self.window == 0 {
            return Err(Error::Config("walks per node and window must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn is_neighbor(g: &KnowledgeGraph, u: usize, v: usize) -> bool {
    g.neighbors(u).binary_search(&v).is_ok()
}

/// Generate `walks_per_node` biased walks starting from every graph node.
pub fn generate_walks(g: &KnowledgeGraph, cfg: &WalkConfig) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let n = g.node_count();
    let mut walks = Vec::with_capacity(n * cfg.walks_per_node);
    let mut weights: Vec<f64> = Vec::new();
    for start in 0..n {
        if g.degree(start) == 0 {
            log::warn!(
                "node {:?} is isolated; emitting length-1 walks",
                g.nodes[start].code
            );
        }
        for w in 0..cfg.walks_per_node {
            let mut rng = util::derived_rng(cfg.seed, &format!("n2v-walk:{start}:{w}"));
            let mut walk = Vec::with_capacity(cfg.walk_length);
            walk.push(start);
            while walk.len() < cfg.walk_length {
                let cur = *walk.last().unwrap();
                let nbrs = g.neighbors(cur);
                if nbrs.is_empty() {
                    break;
                }
                let next = if walk.len() == 1 {
                    nbrs[rng.random_range(0..nbrs.len())]
                } else {
                    let prev = walk[walk.len() - 2];
                    weights.clear();
                    let mut total = 0.0;
                    for &x in nbrs {
                        let w = if x == prev {
                            1.0 / cfg.p
                        } else if is_neighbor(g, x, prev) {
                            1.0
                        } else {
                            1.0 / cfg.q
                        };
                        total += w;
                        weights.push(total);
                    }
                    let u: f64 = rng.random::<f64>() * total;
                    let idx = weights.partition_point(|&c| c <= u).min(nbrs.len() - 1);
                    nbrs[idx]
                };
                walk.push(next);
            }
            walks.push(walk);
        }
    }
    Ok(walks)
}

/// Uniform initialization in (-0.5/sqrt(dim), 0.5/sqrt(dim)) per entry, so
/// every column norm is below 0.5 at initialization.
pub fn init_embeddings(n_nodes: usize, cfg: &WalkConfig) -> Array2<f64> {
    let mut rng = util::derived_rng(cfg.seed, "n2v-init");
    let half = 0.5 / (cfg.dim as f64).sqrt();
    Array2::from_shape_fn((cfg.dim, n_nodes), |_| rng.random_range(-half..half))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling over the walk corpus; single-threaded
/// and deterministic. Returns the center-embedding matrix dim x n_nodes.
pub fn train_skipgram(
    walks: &[Vec<usize>],
    n_nodes: usize,
    cfg: &WalkConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if walks.is_empty() {
        return Err(Error::Invalid("walk corpus is empty".into()));
    }
    let mut center = init_embeddings(n_nodes, cfg);
    if cfg.epochs == 0 {
        return Ok(center);
    }
    let mut context: Array2<f64> = Array2::zeros((cfg.dim, n_nodes));

    let mut counts = vec![0u64; n_nodes];
    for walk in walks {
        for &node in walk {
            if node >= n_nodes {
                return Err(Error::Invalid(format!(
                    "walk references node {node} outside 0..{n_nodes}"
                )));
            }
            counts[node] += 1;
        }
    }
    let mut neg_cum = Vec::with_capacity(n_nodes);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        neg_cum.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::Invalid("walk corpus has no tokens".into()));
    }
    let neg_total = acc;

    let total_centers: u64 =
        cfg.epochs as u64 * walks.iter().map(|w| w.len() as u64).sum::<u64>();
    let mut processed: u64 = 0;
    let mut rng = util::derived_rng(cfg.seed, "n2v-sgns");
    let mut grad_center = Array1::zeros(cfg.dim);

    for _ in 0..cfg.epochs {
        for walk in walks {
            for (i, &c) in walk.iter().enumerate() {
                let lr = cfg.learning_rate
                    * (1.0 - processed as f64 / total_centers as f64).max(1e-4);
                processed += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(walk.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let target = walk[j];
                    grad_center.fill(0.0);
                    {
                        let vc = center.column(c).to_owned();
                        for (label, o) in std::iter::once((1.0, target)).chain(
                            (0..cfg.negatives).filter_map(|_| {
                                let u: f64 = rng.random::<f64>() * neg_total;
                                let neg = neg_cum
                                    .partition_point(|&x| x <= u)
                                    .min(n_nodes - 1);
                                (neg != target).then_some((0.0, neg))
                            }),
                        ) {
                            let uo = context.column(o);
                            let score = vc.dot(&uo);
                            let g = (label - sigmoid(score)) * lr;
                            grad_center.scaled_add(g, &uo);
                            context.column_mut(o).scaled_add(g, &vc);
                        }
                    }
                    center.column_mut(c).zip_mut_with(&grad_center, |a, &b| *a += b);
                }
            }
        }
    }
    util::ensure_finite(&center, "node2vec embeddings")?;
    Ok(center)
}

/// Walks plus skip-gram in one call, in graph node order.
pub fn pretrain(g: &KnowledgeGraph, cfg: &WalkConfig) -> Result<Array2<f64>> {
    let walks = generate_walks(g, cfg)?;
    train_skipgram(&walks, g.node_count(), cfg)
}

/// Embedding file: header line `embedding\t<dim>\t<n>`, then one line per
/// node (`code\tv1..vdim`, tab-separated, shortest round-trip floats), in
/// graph node order.
pub fn write_embeddings(path: &Path, codes: &[String], emb: &Array2<f64>) -> Result<()> {
    let (dim, n) = emb.dim();
    if codes.len() != n {
        return Err(Error::Shape(format!(
            "{} codes but {} embedding columns",
            codes.len(),
            n
        )));
    }
    let mut out = format!("embedding\t{dim}\t{n}\n");
    for (i, code) in codes.iter().enumerate() {
        out.push_str(code);
        for d in 0..dim {
            out.push('\t');
            out.push_str(&util::fmt_f64(emb[(d, i)]));
        }
        out.push('\n');
    }
    util::atomic_write(path, out.as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let text = util::read_to_string(path)?;
    let origin = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(&origin, 1, "empty embedding file"))?;
    let head: Vec<&str> = header.split('\t').collect();
    if head.len() != 3 || head[0] != "embedding" {
        return Err(Error::format(&origin, 1, "bad embedding header"));
    }
    let dim: usize = head[1]
        .parse()
        .map_err(|_| Error::format(&origin, 1, "bad dimension"))?;
    let n: usize = head[2]
        .parse()
        .map_err(|_| Error::format(&origin, 1, "bad node count"))?;
    let mut codes = Vec::with_capacity(n);
    let mut emb = Array2::zeros((dim, n));
    let mut filled = 0;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != dim + 1 {
            return Err(Error::format(
                &origin,
                i + 1,
                format!("expected {} fields, got {}", dim + 1, fields.len()),
            ));
        }
        if filled >= n {
            return Err(Error::format(&origin, i + 1, "more rows than header declares"));
        }
        codes.push(fields[0].to_string());
        for d in 0..dim {
            emb[(d, filled)] = fields[d + 1]
                .parse()
                .map_err(|_| Error::format(&origin, i + 1, format!("bad float {:?}", fields[d + 1])))?;
        }
        filled += 1;
    }
    if filled != n {
        return Err(Error::Format {
            path: origin,
            line: 0,
            msg: format!("header declares {n} rows, found {filled}"),
        });
    }
    Ok((codes, emb))
}
