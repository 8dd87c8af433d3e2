//! Tape-based reverse-mode automatic differentiation over dense f64
//! matrices.
//!
//! Forward values are computed eagerly as the expression graph is built;
//! `backward_scalar` then accumulates gradients in reverse tape order.
//! Vectors are represented as n x 1 matrices. The op set is exactly what
//! the model needs, including a fused attention-softmax-aggregation op for
//! graph attention layers.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Neighbor lists with each node itself prepended, shared across layers.
pub type SelfAdjacency = Rc<Vec<Vec<usize>>>;

/// Build the self-prepended neighbor lists GAT attention softmaxes over.
pub fn self_adjacency(neighbors: &[Vec<usize>]) -> SelfAdjacency {
    Rc::new(
        neighbors
            .iter()
            .enumerate()
            .map(|(c, nbrs)| {
                let mut list = Vec::with_capacity(nbrs.len() + 1);
                list.push(c);
                list.extend(nbrs.iter().copied().filter(|&n| n != c));
                list
            })
            .collect(),
    )
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddColVec(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    LogClamped(usize),
    SoftmaxCols(usize),
    SumAll(usize),
    GatherCols(usize, Rc<Vec<usize>>),
    EMax(usize, usize),
    EdgeSoftmax {
        h: usize,
        s1: usize,
        s2: usize,
        adj: SelfAdjacency,
        slope: f64,
        z: Vec<Vec<f64>>,
        w: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a variable, zeros when it was never reached.
    pub fn of(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.value(v).dim()),
        }
    }
}

fn accum(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn binary_shapes(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.dim(),
            self.nodes[b.0].value.dim(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes(a, b, "add");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes(a, b, "sub");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes(a, b, "mul");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddScalar(a.0))
    }

    /// Broadcast-add a column vector (n x 1) to every column of a (n x m).
    pub fn add_col_vec(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.nodes[a.0].value.dim();
        assert_eq!(
            self.nodes[col.0].value.dim(),
            (n, 1),
            "add_col_vec: column shape mismatch"
        );
        let value = &self.nodes[a.0].value + &self.nodes[col.0].value;
        self.push(value, Op::AddColVec(a.0, col.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub const LOG_EPS: f64 = 1e-12;

    /// Natural log with inputs clamped at `LOG_EPS`; clamped entries get
    /// zero gradient.
    pub fn log_clamped(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(Self::LOG_EPS).ln());
        self.push(value, Op::LogClamped(a.0))
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let value = crate::util::softmax_columns(&self.nodes[a.0].value);
        self.push(value, Op::SoftmaxCols(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a.0))
    }

    pub fn gather_cols(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Var {
        let src = &self.nodes[a.0].value;
        let (n, _) = src.dim();
        let mut value = Array2::zeros((n, indices.len()));
        for (j, &idx) in indices.iter().enumerate() {
            value.column_mut(j).assign(&src.column(idx));
        }
        self.push(value, Op::GatherCols(a.0, indices))
    }

    pub fn emax(&mut self, a: Var, b: Var) -> Var {
        self.binary_shapes(a, b, "emax");
        let mut value = self.nodes[a.0].value.clone();
        value.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x = x.max(y));
        self.push(value, Op::EMax(a.0, b.0))
    }

    /// Fused attention softmax and neighborhood aggregation.
    ///
    /// For each node c with self-prepended neighbors n_j: raw scores
    /// z_j = s1[c] + s2[n_j], e_j = LeakyReLU(z_j), w = softmax(e), and
    /// output column c = sum_j w_j h[:, n_j].
    pub fn edge_softmax_aggregate(
        &mut self,
        h: Var,
        s1: Var,
        s2: Var,
        adj: SelfAdjacency,
        slope: f64,
    ) -> Var {
        let hv = &self.nodes[h.0].value;
        let s1v = &self.nodes[s1.0].value;
        let s2v = &self.nodes[s2.0].value;
        let (dim, n) = hv.dim();
        assert_eq!(s1v.dim(), (1, n), "edge_softmax: s1 shape");
        assert_eq!(s2v.dim(), (1, n), "edge_softmax: s2 shape");
        assert_eq!(adj.len(), n, "edge_softmax: adjacency size");

        let mut value = Array2::zeros((dim, n));
        let mut zs = Vec::with_capacity(n);
        let mut ws = Vec::with_capacity(n);
        for (c, nbrs) in adj.iter().enumerate() {
            let z: Vec<f64> = nbrs.iter().map(|&j| s1v[(0, c)] + s2v[(0, j)]).collect();
            let e: Vec<f64> = z
                .iter()
                .map(|&x| if x >= 0.0 { x } else { slope * x })
                .collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut w: Vec<f64> = e.iter().map(|&x| (x - m).exp()).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= total);
            for (&j, &wj) in nbrs.iter().zip(w.iter()) {
                let col = hv.column(j);
                let mut out = value.column_mut(c);
                out.zip_mut_with(&col, |o, &v| *o += wj * v);
            }
            zs.push(z);
            ws.push(w);
        }
        self.push(
            value,
            Op::EdgeSoftmax {
                h: h.0,
                s1: s1.0,
                s2: s2.0,
                adj,
                slope,
                z: zs,
                w: ws,
            },
        )
    }

    /// Backpropagate from a 1 x 1 scalar with seed gradient 1.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients> {
        let seed = Array2::from_elem((1, 1), 1.0);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Backpropagate from explicitly seeded output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Array2<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (var, seed) in seeds {
            if seed.dim() != self.nodes[var.0].value.dim() {
                return Err(Error::Shape(format!(
                    "backward seed shape {:?} does not match value shape {:?}",
                    seed.dim(),
                    self.nodes[var.0].value.dim()
                )));
            }
            accum(&mut grads[var.0], seed.clone());
        }

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(&mut before[*a], g.clone());
                    accum(&mut before[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut before[*a], g.clone());
                    accum(&mut before[*b], -g);
                }
                Op::Mul(a, b) => {
                    accum(&mut before[*a], g * &self.nodes[*b].value);
                    accum(&mut before[*b], g * &self.nodes[*a].value);
                }
                Op::Scale(a, c) => {
                    accum(&mut before[*a], g * *c);
                }
                Op::AddScalar(a) => {
                    accum(&mut before[*a], g.clone());
                }
                Op::AddColVec(a, col) => {
                    accum(&mut before[*a], g.clone());
                    let summed = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accum(&mut before[*col], summed);
                }
                Op::MatMul(a, b) => {
                    accum(&mut before[*a], g.dot(&self.nodes[*b].value.t()));
                    accum(&mut before[*b], self.nodes[*a].value.t().dot(g));
                }
                Op::Transpose(a) => {
                    accum(&mut before[*a], g.t().to_owned());
                }
                Op::Relu(a) => {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    accum(&mut before[*a], d);
                }
                Op::Exp(a) => {
                    accum(&mut before[*a], g * &self.nodes[i].value);
                }
                Op::LogClamped(a) => {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |gi, &x| {
                        if x > Self::LOG_EPS {
                            *gi /= x;
                        } else {
                            *gi = 0.0;
                        }
                    });
                    accum(&mut before[*a], d);
                }
                Op::SoftmaxCols(a) => {
                    let y = &self.nodes[i].value;
                    let gy = g * y;
                    let colsums = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let d = &gy - &(y * &colsums);
                    accum(&mut before[*a], d);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(self.nodes[*a].value.dim(), g[(0, 0)]);
                    accum(&mut before[*a], d);
                }
                Op::GatherCols(a, indices) => {
                    let mut d = Array2::zeros(self.nodes[*a].value.dim());
                    for (j, &idx) in indices.iter().enumerate() {
                        let mut col = d.column_mut(idx);
                        col += &g.column(j);
                    }
                    accum(&mut before[*a], d);
                }
                Op::EMax(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(bv.dim());
                    for ((idx, &gi), (&x, &y)) in
                        g.indexed_iter().zip(av.iter().zip(bv.iter()))
                    {
                        if x >= y {
                            da[idx] = gi;
                        } else {
                            db[idx] = gi;
                        }
                    }
                    accum(&mut before[*a], da);
                    accum(&mut before[*b], db);
                }
                Op::EdgeSoftmax {
                    h,
                    s1,
                    s2,
                    adj,
                    slope,
                    z,
                    w,
                } => {
                    let hv = &self.nodes[*h].value;
                    let mut dh = Array2::zeros(hv.dim());
                    let mut ds1 = Array2::zeros(self.nodes[*s1].value.dim());
                    let mut ds2 = Array2::zeros(self.nodes[*s2].value.dim());
                    for (c, nbrs) in adj.iter().enumerate() {
                        let gc = g.column(c);
                        let dw: Vec<f64> = nbrs
                            .iter()
                            .map(|&j| gc.dot(&hv.column(j)))
                            .collect();
                        let inner: f64 = w[c]
                            .iter()
                            .zip(dw.iter())
                            .map(|(&wk, &dk)| wk * dk)
                            .sum();
                        for (j_pos, &j) in nbrs.iter().enumerate() {
                            let de = w[c][j_pos] * (dw[j_pos] - inner);
                            let dz = if z[c][j_pos] >= 0.0 { de } else { slope * de };
                            ds1[(0, c)] += dz;
                            ds2[(0, j)] += dz;
                            let mut dh_col = dh.column_mut(j);
                            dh_col.scaled_add(w[c][j_pos], &gc);
                        }
                    }
                    accum(&mut before[*h], dh);
                    accum(&mut before[*s1], ds1);
                    accum(&mut before[*s2], ds2);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;

    /// Central finite differences against analytic gradients for every leaf.
    fn fd_check<F>(shapes: &[(usize, usize)], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        use rand::Rng;
        let mut rng = util::derived_rng(seed, "fd-check");
        let values: Vec<Array2<f64>> = shapes
            .iter()
            .map(|&(r, c)| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0)))
            .collect();

        let eval = |values: &[Array2<f64>]| -> (Tape, Vec<Var>, Var) {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
            let loss = build(&mut tape, &leaves);
            assert_eq!(tape.value(loss).dim(), (1, 1), "loss must be scalar");
            (tape, leaves, loss)
        };

        let (tape, leaves, loss) = eval(&values);
        let grads = tape.backward_scalar(loss).unwrap();

        let h = 1e-5;
        for (li, shape) in shapes.iter().enumerate() {
            let analytic = grads.of(&tape, leaves[li]);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = values.clone();
                    plus[li][(r, c)] += h;
                    let (tp, _, lp) = eval(&plus);
                    let mut minus = values.clone();
                    minus[li][(r, c)] -= h;
                    let (tm, _, lm) = eval(&minus);
                    let fd = (tp.value(lp)[(0, 0)] - tm.value(lm)[(0, 0)]) / (2.0 * h);
                    let a = analytic[(r, c)];
                    let denom = (a.abs() + fd.abs()).max(1e-6);
                    let rel = (a - fd).abs() / denom;
                    assert!(
                        rel <= 1e-4,
                        "leaf {li} entry ({r},{c}): analytic {a} vs fd {fd} (rel {rel})"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_add_sub_mul_scale() {
        fd_check(&[(3, 2), (3, 2), (3, 2)], 1, |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[2]);
            let m = t.mul(d, v[0]);
            let sc = t.scale(m, 0.7);
            let a = t.add_scalar(sc, 0.3);
            t.sum_all(a)
        });
    }

    #[test]
    fn grad_matmul_transpose() {
        fd_check(&[(3, 4), (4, 2)], 2, |t, v| {
            let p = t.matmul(v[0], v[1]);
            let pt = t.transpose(p);
            let m = t.matmul(pt, v[0]);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_relu_exp_log() {
        fd_check(&[(4, 3)], 3, |t, v| {
            let r = t.relu(v[0]);
            let e = t.exp(r);
            let l = t.log_clamped(e);
            let m = t.mul(l, e);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_softmax_cols() {
        fd_check(&[(5, 3), (5, 3)], 4, |t, v| {
            let y = t.softmax_cols(v[0]);
            let m = t.mul(y, v[1]);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_add_col_vec() {
        fd_check(&[(4, 3), (4, 1)], 5, |t, v| {
            let s = t.add_col_vec(v[0], v[1]);
            let m = t.mul(s, s);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_gather_cols() {
        let idx = Rc::new(vec![0, 2, 2, 1]);
        fd_check(&[(3, 4), (3, 4)], 6, move |t, v| {
            let gathered = t.gather_cols(v[0], idx.clone());
            let m = t.mul(gathered, v[1]);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_emax() {
        fd_check(&[(4, 3), (4, 3), (4, 3)], 7, |t, v| {
            let m1 = t.emax(v[0], v[1]);
            let m2 = t.emax(m1, v[2]);
            let sq = t.mul(m2, m2);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_edge_softmax() {
        let adj = self_adjacency(&[vec![1, 2], vec![0], vec![0]]);
        fd_check(&[(4, 3), (1, 3), (1, 3), (4, 3)], 8, move |t, v| {
            let agg = t.edge_softmax_aggregate(v[0], v[1], v[2], adj.clone(), 0.2);
            let m = t.mul(agg, v[3]);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_composite_encoder_like() {
        fd_check(&[(3, 4), (3, 1), (2, 3), (4, 2)], 9, |t, v| {
            let biased = t.add_col_vec(v[0], v[1]);
            let hidden = t.relu(biased);
            let out = t.matmul(v[2], hidden);
            let sm = t.softmax_cols(out);
            let lg = t.log_clamped(sm);
            let mixed = t.matmul(v[3], lg);
            t.sum_all(mixed)
        });
    }

    #[test]
    fn edge_softmax_weights_sum_to_one() {
        let adj = self_adjacency(&[vec![1, 2], vec![0, 2], vec![0, 1]]);
        let mut tape = Tape::new();
        let h = tape.leaf(Array2::from_shape_fn((4, 3), |(r, c)| (r * 3 + c) as f64 * 0.1));
        let s1 = tape.leaf(Array2::from_shape_fn((1, 3), |(_, c)| c as f64 * 0.3));
        let s2 = tape.leaf(Array2::from_shape_fn((1, 3), |(_, c)| -(c as f64) * 0.2));
        let out = tape.edge_softmax_aggregate(h, s1, s2, adj, 0.2);
        let Op::EdgeSoftmax { w, .. } = &tape.nodes[out.0].op else {
            panic!("expected edge softmax node");
        };
        for weights in w {
            let s: f64 = weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(weights.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn uniform_scores_give_uniform_attention() {
        let adj = self_adjacency(&[vec![1, 2], vec![0, 2], vec![0, 1]]);
        let mut tape = Tape::new();
        let h = tape.leaf(Array2::from_elem((2, 3), 1.0));
        let s1 = tape.leaf(Array2::zeros((1, 3)));
        let s2 = tape.leaf(Array2::zeros((1, 3)));
        let out = tape.edge_softmax_aggregate(h, s1, s2, adj, 0.2);
        let Op::EdgeSoftmax { w, .. } = &tape.nodes[out.0].op else {
            panic!("expected edge softmax node");
        };
        for weights in w {
            for &x in weights {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        assert!(tape.value(out).iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn backward_seed_shape_is_checked() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::zeros((2, 2)));
        let bad = Array2::zeros((3, 1));
        assert!(tape.backward_seeded(&[(a, bad)]).is_err());
    }

    #[test]
    fn multi_seed_accumulates() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::from_elem((2, 2), 2.0));
        let b = tape.scale(a, 3.0);
        let c = tape.scale(a, 5.0);
        let seeds = vec![
            (b, Array2::from_elem((2, 2), 1.0)),
            (c, Array2::from_elem((2, 2), 1.0)),
        ];
        let grads = tape.backward_seeded(&seeds).unwrap();
        let ga = grads.get(a).unwrap();
        assert!(ga.iter().all(|&x| (x - 8.0).abs() < 1e-12));
    }
}
