//! Multi-layer multi-head graph attention over code embeddings.
//!
//! Each layer transforms the previous embedding with per-head linear maps,
//! weights every node's self-inclusive neighborhood by softmaxed
//! LeakyReLU attention scores, aggregates, and averages heads. The final
//! embedding is the elementwise maximum over all layer outputs.

use std::rc::Rc;

use ndarray::{s, Array2};
use rand::Rng;

use crate::autodiff::{self_adjacency, SelfAdjacency, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::util;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    /// Linear transform, dim x dim.
    pub w: Array2<f64>,
    /// Attention vector, 1 x 2*dim; first half scores the center node,
    /// second half the neighbor.
    pub a: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GatParameters {
    /// Outer index: layer; inner: head.
    pub layers: Vec<Vec<GatHead>>,
}

impl GatParameters {
    pub fn dim(&self) -> Option<usize> {
        self.layers.first()?.first().map(|h| h.w.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(Error::Invalid(format!("layer {i} has no heads")));
            }
            for (h, head) in layer.iter().enumerate() {
                let l = head.w.nrows();
                if head.w.ncols() != l {
                    return Err(Error::Shape(format!(
                        "layer {i} head {h}: transform is {}x{}, expected square",
                        head.w.nrows(),
                        head.w.ncols()
                    )));
                }
                if head.a.dim() != (1, 2 * l) {
                    return Err(Error::Shape(format!(
                        "layer {i} head {h}: attention vector is {:?}, expected (1, {})",
                        head.a.dim(),
                        2 * l
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Uniform Glorot-style initialization of all layers and heads.
pub fn init_gat(n_layers: usize, n_heads: usize, dim: usize, seed: u64) -> GatParameters {
    let mut layers = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut heads = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let mut rng = util::derived_rng(seed, &format!("gat-init:{layer}:{head}"));
            let wb = (6.0 / (2.0 * dim as f64)).sqrt();
            let ab = (6.0 / (2.0 * dim as f64 + 1.0)).sqrt();
            heads.push(GatHead {
                w: Array2::from_shape_fn((dim, dim), |_| rng.random_range(-wb..wb)),
                a: Array2::from_shape_fn((1, 2 * dim), |_| rng.random_range(-ab..ab)),
            });
        }
        layers.push(heads);
    }
    GatParameters { layers }
}

/// Self-prepended neighbor lists of a knowledge graph.
pub fn graph_adjacency(g: &KnowledgeGraph) -> SelfAdjacency {
    let lists: Vec<Vec<usize>> = (0..g.node_count())
        .map(|n| g.neighbors(n).to_vec())
        .collect();
    self_adjacency(&lists)
}

/// Attention weights of one head over node c's self-inclusive neighborhood,
/// given the previous layer's embedding.
pub fn attention_coefficients(
    head: &GatHead,
    rho_prev: &Array2<f64>,
    adj: &SelfAdjacency,
    c: usize,
    slope: f64,
) -> Vec<(usize, f64)> {
    let dim = head.w.nrows();
    let h = head.w.dot(rho_prev);
    let a1 = head.a.slice(s![.., 0..dim]);
    let a2 = head.a.slice(s![.., dim..2 * dim]);
    let s1c: f64 = a1.row(0).dot(&h.column(c));
    let scores: Vec<f64> = adj[c]
        .iter()
        .map(|&j| {
            let z = s1c + a2.row(0).dot(&h.column(j));
            if z >= 0.0 {
                z
            } else {
                slope * z
            }
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    adj[c].iter().copied().zip(w).collect()
}

/// Full forward pass: per-layer attention aggregation, head averaging, and
/// cross-layer elementwise max.
pub fn gat_forward(
    params: &GatParameters,
    adj: &SelfAdjacency,
    rho0: &Array2<f64>,
    slope: f64,
) -> Result<Array2<f64>> {
    params.validate()?;
    if params.layers.is_empty() {
        return Ok(rho0.clone());
    }
    let (dim, n) = rho0.dim();
    if adj.len() != n {
        return Err(Error::Shape(format!(
            "{} adjacency rows for {n} embedding columns",
            adj.len()
        )));
    }
    let mut prev = rho0.clone();
    let mut pooled: Option<Array2<f64>> = None;
    for (li, layer) in params.layers.iter().enumerate() {
        let mut layer_out = Array2::zeros((dim, n));
        for (hi, head) in layer.iter().enumerate() {
            let h = head.w.dot(&prev);
            let a1 = head.a.slice(s![.., 0..dim]);
            let a2 = head.a.slice(s![.., dim..2 * dim]);
            let s1 = a1.dot(&h);
            let s2 = a2.dot(&h);
            for (c, nbrs) in adj.iter().enumerate() {
                let scores: Vec<f64> = nbrs
                    .iter()
                    .map(|&j| {
                        let z = s1[(0, c)] + s2[(0, j)];
                        if z >= 0.0 {
                            z
                        } else {
                            slope * z
                        }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut w: Vec<f64> = scores.iter().map(|&x| (x - m).exp()).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                let mut out_col = layer_out.column_mut(c);
                for (&j, &wj) in nbrs.iter().zip(w.iter()) {
                    out_col.scaled_add(wj, &h.column(j));
                }
            }
            if !layer_out.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "attention output at layer {li}, head {hi}"
                )));
            }
        }
        layer_out /= layer.len() as f64;
        prev = layer_out.clone();
        pooled = Some(match pooled {
            None => layer_out,
            Some(mut p) => {
                p.zip_mut_with(&layer_out, |x, &y| *x = x.max(y));
                p
            }
        });
    }
    Ok(pooled.unwrap())
}

/// Tape variables of one GAT forward build.
pub struct GatTape {
    /// Per layer, per head: the (transform, attention) leaves.
    pub heads: Vec<Vec<(Var, Var)>>,
    pub rho0: Var,
    /// Maxpooled final embedding.
    pub rho: Var,
}

/// Build the GAT forward pass on the tape; parameter leaves are returned
/// for gradient extraction.
pub fn gat_forward_tape(
    tape: &mut Tape,
    params: &GatParameters,
    adj: &SelfAdjacency,
    rho0_value: Array2<f64>,
    slope: f64,
) -> Result<GatTape> {
    params.validate()?;
    let dim = rho0_value.nrows();
    let rho0 = tape.constant(rho0_value);
    if params.layers.is_empty() {
        return Ok(GatTape {
            heads: Vec::new(),
            rho0,
            rho: rho0,
        });
    }
    let first_half = Rc::new((0..dim).collect::<Vec<_>>());
    let second_half = Rc::new((dim..2 * dim).collect::<Vec<_>>());
    let mut heads = Vec::with_capacity(params.layers.len());
    let mut prev = rho0;
    let mut pooled: Option<Var> = None;
    for layer in &params.layers {
        let mut layer_heads = Vec::with_capacity(layer.len());
        let mut head_sum: Option<Var> = None;
        for head in layer {
            let w = tape.leaf(head.w.clone());
            let a = tape.leaf(head.a.clone());
            layer_heads.push((w, a));
            let h = tape.matmul(w, prev);
            let a1 = tape.gather_cols(a, first_half.clone());
            let a2 = tape.gather_cols(a, second_half.clone());
            let s1 = tape.matmul(a1, h);
            let s2 = tape.matmul(a2, h);
            let agg = tape.edge_softmax_aggregate(h, s1, s2, adj.clone(), slope);
            head_sum = Some(match head_sum {
                None => agg,
                Some(s) => tape.add(s, agg),
            });
        }
        let layer_out = tape.scale(head_sum.unwrap(), 1.0 / layer.len() as f64);
        prev = layer_out;
        pooled = Some(match pooled {
            None => layer_out,
            Some(p) => tape.emax(p, layer_out),
        });
        heads.push(layer_heads);
    }
    Ok(GatTape {
        heads,
        rho0,
        rho: pooled.unwrap(),
    })
}
