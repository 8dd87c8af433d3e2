//! End-to-end optimization: per-minibatch (default) or per-epoch topic
//! matrix recomputation, Adam with decoupled L2 on the encoder only,
//! model variants for ablations, and versioned binary checkpoints.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::Distribution;

use crate::autodiff::{SelfAdjacency, Tape, Var};
use crate::corpus::{CorpusSplit, Modality, PatientDocument, Vocabulary};
use crate::error::{Error, Result};
use crate::gat::{self, GatParameters, LEAKY_SLOPE};
use crate::graph::{vocab_node_ids, KnowledgeGraph};
use crate::model::{
    self, EncoderParameters, ModelDims, NoiseMode, TopicEmbeddings, TopicMatrices,
};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoInit,
    NoAug,
    FixedEmbedding,
    FreeEmbedding,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoInit => "no-init",
            Variant::NoAug => "no-aug",
            Variant::FixedEmbedding => "fixed-embedding",
            Variant::FreeEmbedding => "free-embedding",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no-init" => Ok(Variant::NoInit),
            "no-aug" => Ok(Variant::NoAug),
            "fixed-embedding" => Ok(Variant::FixedEmbedding),
            "free-embedding" => Ok(Variant::FreeEmbedding),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::Full,
            Variant::NoInit,
            Variant::NoAug,
            Variant::FixedEmbedding,
            Variant::FreeEmbedding,
        ]
    }

    pub fn uses_graph(&self) -> bool {
        !matches!(self, Variant::FreeEmbedding)
    }

    pub fn uses_gat(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoInit | Variant::NoAug)
    }

    /// Whether the knowledge graph fed to this variant must carry the
    /// ancestor-closure edges.
    pub fn wants_augmented(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoInit | Variant::FixedEmbedding)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled L2, applied to encoder parameters only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k: usize,
    pub l: usize,
    pub hidden: usize,
    pub trunk_depth: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub shared_alpha: bool,
    /// Recompute the topic matrices once per epoch instead of per
    /// minibatch; minibatch gradients then flow through the stale matrices.
    pub beta_per_epoch: bool,
    pub zero_noise: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            weight_decay: 1.2e-6,
            batch_size: 512,
            epochs: 10,
            k: 100,
            l: 256,
            hidden: 128,
            trunk_depth: 1,
            n_layers: 3,
            n_heads: 4,
            shared_alpha: false,
            beta_per_epoch: false,
            zero_noise: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.k == 0 || self.l == 0 || self.hidden == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if self.variant.uses_gat() && (self.n_layers == 0 || self.n_heads == 0) {
            return Err(Error::Config(
                "attention layers and heads must be positive for GAT variants".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config("Adam hyperparameters out of range".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab: &Vocabulary) -> ModelDims {
        ModelDims {
            v_icd: vocab.len(Modality::Icd),
            v_atc: vocab.len(Modality::Atc),
            k: self.k,
            l: self.l,
            hidden: self.hidden,
            trunk_depth: self.trunk_depth,
            shared_alpha: self.shared_alpha,
        }
    }

    /// Canonical field=value rendering; the checkpoint stores this string
    /// and its hash.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("adam_beta1", util::fmt_f64(self.adam_beta1));
        kv("adam_beta2", util::fmt_f64(self.adam_beta2));
        kv("adam_eps", util::fmt_f64(self.adam_eps));
        kv("batch_size", self.batch_size.to_string());
        kv("beta_per_epoch", self.beta_per_epoch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("hidden", self.hidden.to_string());
        kv("k", self.k.to_string());
        kv("l", self.l.to_string());
        kv("learning_rate", util::fmt_f64(self.learning_rate));
        kv("n_heads", self.n_heads.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("seed", self.seed.to_string());
        kv("shared_alpha", self.shared_alpha.to_string());
        kv("trunk_depth", self.trunk_depth.to_string());
        kv("variant", self.variant.as_str().to_string());
        kv("weight_decay", util::fmt_f64(self.weight_decay));
        kv("zero_noise", self.zero_noise.to_string());
        s
    }

    pub fn from_canonical_string(s: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in s.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} is not key=value", i + 1))
            })?;
            let bad =
                |what: &str| Error::Config(format!("config field {key}: invalid {what}"));
            match key {
                "adam_beta1" => cfg.adam_beta1 = value.parse().map_err(|_| bad("number"))?,
                "adam_beta2" => cfg.adam_beta2 = value.parse().map_err(|_| bad("number"))?,
                "adam_eps" => cfg.adam_eps = value.parse().map_err(|_| bad("number"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("size"))?,
                "beta_per_epoch" => {
                    cfg.beta_per_epoch = value.parse().map_err(|_| bad("bool"))?
                }
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("size"))?,
                "hidden" => cfg.hidden = value.parse().map_err(|_| bad("size"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("size"))?,
                "l" => cfg.l = value.parse().map_err(|_| bad("size"))?,
                "learning_rate" => {
                    cfg.learning_rate = value.parse().map_err(|_| bad("number"))?
                }
                "n_heads" => cfg.n_heads = value.parse().map_err(|_| bad("size"))?,
                "n_layers" => cfg.n_layers = value.parse().map_err(|_| bad("size"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "shared_alpha" => cfg.shared_alpha = value.parse().map_err(|_| bad("bool"))?,
                "trunk_depth" => cfg.trunk_depth = value.parse().map_err(|_| bad("size"))?,
                "variant" => cfg.variant = Variant::parse(value)?,
                "weight_decay" => {
                    cfg.weight_decay = value.parse().map_err(|_| bad("number"))?
                }
                "zero_noise" => cfg.zero_noise = value.parse().map_err(|_| bad("bool"))?,
                other => {
                    return Err(Error::Config(format!("unknown config field {other:?}")))
                }
            }
            seen.insert(key.to_string());
        }
        if seen.len() != 18 {
            return Err(Error::Config(format!(
                "config string has {} of 18 required fields",
                seen.len()
            )));
        }
        Ok(cfg)
    }

    pub fn config_hash(&self) -> u64 {
        util::fnv1a(self.canonical_string().as_bytes())
    }
}

/// How the code embedding matrix rho is produced and trained.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingState {
    /// rho0 over all graph nodes, refined by trainable attention layers;
    /// vocabulary columns are gathered out of the refined matrix.
    Gat {
        rho0: Array2<f64>,
        gat: GatParameters,
        adj: SelfAdjacency,
        vocab_ids: Vec<usize>,
        n_icd: usize,
    },
    /// rho frozen at its initialization.
    Fixed {
        rho_icd: Array2<f64>,
        rho_atc: Array2<f64>,
    },
    /// rho is itself a trainable parameter; no graph involved.
    Free {
        rho_icd: Array2<f64>,
        rho_atc: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub embedding: EmbeddingState,
    pub alpha: TopicEmbeddings,
    pub encoder: EncoderParameters,
}

impl ModelParameters {
    /// Trainable tensors with their stable names.
    pub fn named(&self, shared_alpha: bool) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        match &self.embedding {
            EmbeddingState::Gat { gat, .. } => {
                for (li, layer) in gat.layers.iter().enumerate() {
                    for (hi, head) in layer.iter().enumerate() {
                        out.push((format!("gat.l{li}.h{hi}.w"), &head.w));
                        out.push((format!("gat.l{li}.h{hi}.a"), &head.a));
                    }
                }
            }
            EmbeddingState::Fixed { .. } => {}
            EmbeddingState::Free { rho_icd, rho_atc } => {
                out.push(("rho.icd".to_string(), rho_icd));
                out.push(("rho.atc".to_string(), rho_atc));
            }
        }
        out.push(("alpha.icd".to_string(), &self.alpha.alpha_icd));
        if !shared_alpha {
            out.push(("alpha.atc".to_string(), &self.alpha.alpha_atc));
        }
        for (name, p) in self.encoder.params() {
            out.push((name, p));
        }
        out
    }

    pub fn named_mut(&mut self, shared_alpha: bool) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        match &mut self.embedding {
            EmbeddingState::Gat { gat, .. } => {
                for (li, layer) in gat.layers.iter_mut().enumerate() {
                    for (hi, head) in layer.iter_mut().enumerate() {
                        out.push((format!("gat.l{li}.h{hi}.w"), &mut head.w));
                        out.push((format!("gat.l{li}.h{hi}.a"), &mut head.a));
                    }
                }
            }
            EmbeddingState::Fixed { .. } => {}
            EmbeddingState::Free { rho_icd, rho_atc } => {
                out.push(("rho.icd".to_string(), rho_icd));
                out.push(("rho.atc".to_string(), rho_atc));
            }
        }
        out.push(("alpha.icd".to_string(), &mut self.alpha.alpha_icd));
        if !shared_alpha {
            out.push(("alpha.atc".to_string(), &mut self.alpha.alpha_atc));
        }
        for (name, p) in self.encoder.params_mut() {
            out.push((name, p));
        }
        out
    }
}

/// Whether a named parameter group receives the decoupled L2 term.
pub fn decays(name: &str) -> bool {
    name.starts_with("enc.")
}

/// Set up parameter groups for a variant. `rho0` is the pretrained
/// node-embedding matrix (l x graph nodes); variants that do not use it
/// may pass `None`.
pub fn apply_variant(
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    graph: Option<&KnowledgeGraph>,
    rho0: Option<&Array2<f64>>,
) -> Result<ModelParameters> {
    cfg.validate()?;
    let dims = cfg.dims(vocab);
    dims.validate()?;

    fn need_graph_impl<'g>(
        g: Option<&'g KnowledgeGraph>,
        cfg: &TrainConfig,
    ) -> Result<&'g KnowledgeGraph> {
        let g = g.ok_or_else(|| {
            Error::Config(format!("variant {} requires a knowledge graph", cfg.variant))
        })?;
        if g.augmented != cfg.variant.wants_augmented() {
            return Err(Error::Config(format!(
                "variant {} expects {} graph",
                cfg.variant,
                if cfg.variant.wants_augmented() {
                    "an augmented"
                } else {
                    "an unaugmented"
                }
            )));
        }
        Ok(g)
    }
    let need_rho0 = |g: &KnowledgeGraph| -> Result<Array2<f64>> {
        let r = rho0.ok_or_else(|| {
            Error::Config(format!(
                "variant {} requires pretrained node embeddings",
                cfg.variant
            ))
        })?;
        if r.dim() != (cfg.l, g.node_count()) {
            return Err(Error::Shape(format!(
                "node embeddings are {:?}, expected ({}, {})",
                r.dim(),
                cfg.l,
                g.node_count()
            )));
        }
        Ok(r.clone())
    };

    let embedding = match cfg.variant {
        Variant::Full | Variant::NoAug | Variant::NoInit => {
            let g = need_graph_impl(graph, cfg)?;
            let rho0 = if cfg.variant == Variant::NoInit {
                let mut rng = util::derived_rng(cfg.seed, "rho0-random");
                let normal = rand_distr::Normal::new(0.0, 0.1).expect("positive sd");
                Array2::from_shape_fn((cfg.l, g.node_count()), |_| normal.sample(&mut rng))
            } else {
                need_rho0(g)?
            };
            EmbeddingState::Gat {
                rho0,
                gat: gat::init_gat(cfg.n_layers, cfg.n_heads, cfg.l, cfg.seed),
                adj: gat::graph_adjacency(g),
                vocab_ids: vocab_node_ids(g, vocab)?,
                n_icd: dims.v_icd,
            }
        }
        Variant::FixedEmbedding => {
            let g = need_graph_impl(graph, cfg)?;
            let rho0 = need_rho0(g)?;
            let ids = vocab_node_ids(g, vocab)?;
            let icd_ids = &ids[..dims.v_icd];
            let atc_ids = &ids[dims.v_icd..];
            EmbeddingState::Fixed {
                rho_icd: rho0.select(Axis(1), icd_ids),
                rho_atc: rho0.select(Axis(1), atc_ids),
            }
        }
        Variant::FreeEmbedding => {
            let normal = rand_distr::Normal::new(0.0, 0.1).expect("positive sd");
            let draw = |tag: &str, v: usize| {
                let mut rng = util::derived_rng(cfg.seed, tag);
                Array2::from_shape_fn((cfg.l, v), |_| normal.sample(&mut rng))
            };
            EmbeddingState::Free {
                rho_icd: draw("rho-free:icd", dims.v_icd),
                rho_atc: draw("rho-free:atc", dims.v_atc),
            }
        }
    };

    Ok(ModelParameters {
        embedding,
        alpha: model::init_topic_embeddings(&dims, cfg.seed),
        encoder: model::init_encoder(&dims, cfg.seed),
    })
}

/// Current vocabulary-level code embeddings (l x V per modality).
pub fn current_rho(params: &ModelParameters) -> Result<(Array2<f64>, Array2<f64>)> {
    match &params.embedding {
        EmbeddingState::Gat {
            rho0,
            gat,
            adj,
            vocab_ids,
            n_icd,
        } => {
            let rho = gat::gat_forward(gat, adj, rho0, LEAKY_SLOPE)?;
            let icd = rho.select(Axis(1), &vocab_ids[..*n_icd]);
            let atc = rho.select(Axis(1), &vocab_ids[*n_icd..]);
            Ok((icd, atc))
        }
        EmbeddingState::Fixed { rho_icd, rho_atc }
        | EmbeddingState::Free { rho_icd, rho_atc } => {
            Ok((rho_icd.clone(), rho_atc.clone()))
        }
    }
}

pub fn current_beta(params: &ModelParameters, shared_alpha: bool) -> Result<TopicMatrices> {
    let (rho_icd, rho_atc) = current_rho(params)?;
    model::compute_beta(&rho_icd, &rho_atc, &params.alpha, shared_alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub t: u64,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot_mut(&mut self, name: &str, shape: (usize, usize)) -> &mut AdamSlot {
        self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            t: 0,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        })
    }
}

/// One Adam update with optional decoupled L2 shrinkage (`wd` = 0 disables).
pub fn adam_step(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    slot: &mut AdamSlot,
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    slot.t += 1;
    let t = slot.t as i32;
    slot.m.zip_mut_with(grad, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
    slot.v
        .zip_mut_with(grad, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    ndarray::Zip::from(&mut *param)
        .and(&slot.m)
        .and(&slot.v)
        .for_each(|p, &m, &v| {
            let mhat = m / bc1;
            let vhat = v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps) + lr * wd * *p;
        });
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_elbo: f64,
    pub valid_nll: f64,
    pub wall_seconds: f64,
}

pub fn render_log(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("epoch\ttrain_elbo\tvalid_nll\twall_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.3}\n",
            r.epoch,
            util::fmt_f64(r.train_elbo),
            util::fmt_f64(r.valid_nll),
            r.wall_seconds
        ));
    }
    s
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KGETMCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained (or in-progress) model: every parameter group, the optimizer
/// moments, and the derived vocabulary-level embeddings, addressable by
/// stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub arrays: BTreeMap<String, Array2<f64>>,
    pub adam_t: BTreeMap<String, u64>,
    pub vocab_ids: Vec<usize>,
}

impl Checkpoint {
    pub fn from_state(
        cfg: &TrainConfig,
        epoch: usize,
        params: &ModelParameters,
        adam: &AdamState,
    ) -> Result<Checkpoint> {
        let mut arrays = BTreeMap::new();
        for (name, p) in params.named(cfg.shared_alpha) {
            arrays.insert(name, p.clone());
        }
        let mut vocab_ids = Vec::new();
        match &params.embedding {
            EmbeddingState::Gat {
                rho0, vocab_ids: ids, ..
            } => {
                arrays.insert("rho0".to_string(), rho0.clone());
                vocab_ids = ids.clone();
            }
            EmbeddingState::Fixed { rho_icd, rho_atc } => {
                arrays.insert("rho.fixed.icd".to_string(), rho_icd.clone());
                arrays.insert("rho.fixed.atc".to_string(), rho_atc.clone());
            }
            EmbeddingState::Free { .. } => {}
        }
        let (rho_icd, rho_atc) = current_rho(params)?;
        arrays.insert("rho.final.icd".to_string(), rho_icd);
        arrays.insert("rho.final.atc".to_string(), rho_atc);

        let mut adam_t = BTreeMap::new();
        for (name, slot) in &adam.slots {
            arrays.insert(format!("adam.m.{name}"), slot.m.clone());
            arrays.insert(format!("adam.v.{name}"), slot.v.clone());
            adam_t.insert(name.clone(), slot.t);
        }
        Ok(Checkpoint {
            config: cfg.clone(),
            epoch,
            arrays,
            adam_t,
            vocab_ids,
        })
    }

    fn array(&self, name: &str) -> Result<Array2<f64>> {
        self.arrays
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    }

    /// Final vocabulary-level embeddings (l x V per modality).
    pub fn rho_final(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((self.array("rho.final.icd")?, self.array("rho.final.atc")?))
    }

    pub fn topic_embeddings(&self) -> Result<TopicEmbeddings> {
        let alpha_icd = self.array("alpha.icd")?;
        let alpha_atc = if self.config.shared_alpha {
            alpha_icd.clone()
        } else {
            self.array("alpha.atc")?
        };
        Ok(TopicEmbeddings { alpha_icd, alpha_atc })
    }

    /// Topic-by-code matrices recomputed from the stored embeddings.
    pub fn beta(&self) -> Result<TopicMatrices> {
        let (rho_icd, rho_atc) = self.rho_final()?;
        model::compute_beta(
            &rho_icd,
            &rho_atc,
            &self.topic_embeddings()?,
            self.config.shared_alpha,
        )
    }

    pub fn encoder(&self) -> Result<EncoderParameters> {
        let trunk = (0..self.config.trunk_depth)
            .map(|i| {
                Ok((
                    self.array(&format!("enc.trunk{i}.w"))?,
                    self.array(&format!("enc.trunk{i}.b"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderParameters {
            w_icd: self.array("enc.w_icd")?,
            b_icd: self.array("enc.b_icd")?,
            w_atc: self.array("enc.w_atc")?,
            b_atc: self.array("enc.b_atc")?,
            trunk,
            w_mu: self.array("enc.w_mu")?,
            b_mu: self.array("enc.b_mu")?,
            w_sigma: self.array("enc.w_sigma")?,
            b_sigma: self.array("enc.b_sigma")?,
        })
    }

    /// Rebuild in-memory training state. GAT variants need the same graph
    /// the checkpoint was trained on.
    pub fn restore(
        &self,
        graph: Option<&KnowledgeGraph>,
    ) -> Result<(ModelParameters, AdamState)> {
        let cfg = &self.config;
        let n_icd = self.array("enc.w_icd")?.ncols();
        let embedding = match cfg.variant {
            Variant::Full | Variant::NoInit | Variant::NoAug => {
                let g = graph.ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "variant {} needs the knowledge graph to resume",
                        cfg.variant
                    ))
                })?;
                if g.augmented != cfg.variant.wants_augmented() {
                    return Err(Error::Checkpoint(format!(
                        "graph augmentation does not match variant {}",
                        cfg.variant
                    )));
                }
                let rho0 = self.array("rho0")?;
                if rho0.ncols() != g.node_count() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint has {} graph nodes, graph has {}",
                        rho0.ncols(),
                        g.node_count()
                    )));
                }
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for li in 0..cfg.n_layers {
                    let mut heads = Vec::with_capacity(cfg.n_heads);
                    for hi in 0..cfg.n_heads {
                        heads.push(gat::GatHead {
                            w: self.array(&format!("gat.l{li}.h{hi}.w"))?,
                            a: self.array(&format!("gat.l{li}.h{hi}.a"))?,
                        });
                    }
                    layers.push(heads);
                }
                EmbeddingState::Gat {
                    rho0,
                    gat: GatParameters { layers },
                    adj: gat::graph_adjacency(g),
                    vocab_ids: self.vocab_ids.clone(),
                    n_icd,
                }
            }
            Variant::FixedEmbedding => EmbeddingState::Fixed {
                rho_icd: self.array("rho.fixed.icd")?,
                rho_atc: self.array("rho.fixed.atc")?,
            },
            Variant::FreeEmbedding => EmbeddingState::Free {
                rho_icd: self.array("rho.icd")?,
                rho_atc: self.array("rho.atc")?,
            },
        };
        let params = ModelParameters {
            embedding,
            alpha: self.topic_embeddings()?,
            encoder: self.encoder()?,
        };

        let mut adam = AdamState::new();
        for (name, &t) in &self.adam_t {
            adam.slots.insert(
                name.clone(),
                AdamSlot {
                    t,
                    m: self.array(&format!("adam.m.{name}"))?,
                    v: self.array(&format!("adam.v.{name}"))?,
                },
            );
        }
        Ok((params, adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        let cfg = self.config.canonical_string();
        out.write_u64::<LittleEndian>(cfg.len() as u64).unwrap();
        out.extend_from_slice(cfg.as_bytes());
        out.write_u64::<LittleEndian>(util::fnv1a(cfg.as_bytes()))
            .unwrap();
        out.write_u64::<LittleEndian>(self.epoch as u64).unwrap();
        out.write_u64::<LittleEndian>(self.vocab_ids.len() as u64)
            .unwrap();
        for &id in &self.vocab_ids {
            out.write_u64::<LittleEndian>(id as u64).unwrap();
        }
        out.write_u64::<LittleEndian>(self.arrays.len() as u64)
            .unwrap();
        for (name, a) in &self.arrays {
            out.write_u64::<LittleEndian>(name.len() as u64).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u64::<LittleEndian>(a.nrows() as u64).unwrap();
            out.write_u64::<LittleEndian>(a.ncols() as u64).unwrap();
            for &x in a.iter() {
                out.write_f64::<LittleEndian>(x).unwrap();
            }
        }
        out.write_u64::<LittleEndian>(self.adam_t.len() as u64)
            .unwrap();
        for (name, &t) in &self.adam_t {
            out.write_u64::<LittleEndian>(name.len() as u64).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u64::<LittleEndian>(t).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        std::io::Read::read_exact(&mut cur, &mut magic)
            .map_err(|_| bad("file too short for magic header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic header"));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let read_string = |cur: &mut Cursor<&[u8]>| -> Result<String> {
            let len = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| bad("missing string length"))? as usize;
            let mut buf = vec![0u8; len];
            std::io::Read::read_exact(cur, &mut buf).map_err(|_| bad("truncated string"))?;
            String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
        };
        let cfg_str = read_string(&mut cur)?;
        let stored_hash = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("missing config hash"))?;
        if stored_hash != util::fnv1a(cfg_str.as_bytes()) {
            return Err(bad("config hash mismatch"));
        }
        let config = TrainConfig::from_canonical_string(&cfg_str)?;
        let epoch = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("missing epoch"))? as usize;
        let n_ids = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("missing id count"))? as usize;
        let mut vocab_ids = Vec::with_capacity(n_ids);
        for _ in 0..n_ids {
            vocab_ids.push(
                cur.read_u64::<LittleEndian>()
                    .map_err(|_| bad("truncated ids"))? as usize,
            );
        }
        let n_arrays = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("missing array count"))? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..n_arrays {
            let name = read_string(&mut cur)?;
            let rows = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| bad("missing rows"))? as usize;
            let cols = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| bad("missing cols"))? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(
                    cur.read_f64::<LittleEndian>()
                        .map_err(|_| bad("truncated array data"))?,
                );
            }
            let a = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(format!("array {name:?}: {e}")))?;
            arrays.insert(name, a);
        }
        let n_t = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| bad("missing moment count"))? as usize;
        let mut adam_t = BTreeMap::new();
        for _ in 0..n_t {
            let name = read_string(&mut cur)?;
            let t = cur
                .read_u64::<LittleEndian>()
                .map_err(|_| bad("truncated moment steps"))?;
            adam_t.insert(name, t);
        }
        if cur.position() != bytes.len() as u64 {
            return Err(bad("trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint {
            config,
            epoch,
            arrays,
            adam_t,
            vocab_ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint of the epoch with the lowest validation NLL.
    pub best: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Per-token negative log-likelihood with theta = softmax(mu).
pub fn validation_nll(
    docs: &[&PatientDocument],
    enc: &EncoderParameters,
    beta: &TopicMatrices,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let v_icd = beta.beta_icd.nrows();
    let v_atc = beta.beta_atc.nrows();
    let (xi, xa) = model::bow_matrix(docs, v_icd, v_atc);
    let (mu, _) = model::encode(enc, &xi, &xa);
    let theta = util::softmax_columns(&mu);
    let mut total_ll = 0.0;
    let mut tokens = 0u64;
    for (j, doc) in docs.iter().enumerate() {
        let (ll, _) = model::log_likelihood(doc, &theta.column(j).to_owned(), beta);
        total_ll += ll;
        tokens += doc.total_tokens();
    }
    if tokens == 0 {
        return Err(Error::Invalid("validation set has no tokens".into()));
    }
    Ok(-total_ll / tokens as f64)
}

/// Zero-noise batch-sum ELBO over a document set.
pub fn deterministic_elbo(
    docs: &[&PatientDocument],
    enc: &EncoderParameters,
    beta: &TopicMatrices,
) -> Result<f64> {
    Ok(model::elbo_minibatch(docs, enc, beta, docs.len(), NoiseMode::Zero)?.unscaled)
}

struct StepTape {
    tape: Tape,
    leaves: Vec<(String, Var)>,
    elbo: Var,
}

/// Zero-noise batch ELBO and its gradient for every trainable parameter.
pub fn elbo_gradients(
    params: &ModelParameters,
    cfg: &TrainConfig,
    docs: &[&PatientDocument],
    dims: &ModelDims,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    let (xi, xa) = model::bow_matrix(docs, dims.v_icd, dims.v_atc);
    let ci = model::count_matrix(docs, dims.v_icd, Modality::Icd);
    let ca = model::count_matrix(docs, dims.v_atc, Modality::Atc);
    let noise = model::draw_noise(cfg.k, docs.len(), NoiseMode::Zero, "grads");
    let st = build_full_tape(params, cfg, xi, xa, ci, ca, noise)?;
    let value = st.tape.value(st.elbo)[(0, 0)];
    let grads = st.tape.backward_scalar(st.elbo)?;
    Ok((value, collect_grads(&st.tape, &st.leaves, &grads)))
}

fn build_full_tape(
    params: &ModelParameters,
    cfg: &TrainConfig,
    xi: Array2<f64>,
    xa: Array2<f64>,
    ci: Array2<f64>,
    ca: Array2<f64>,
    noise: Array2<f64>,
) -> Result<StepTape> {
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let (rho_icd_var, rho_atc_var) =
        embedding_tape(&mut tape, &mut leaves, &params.embedding)?;
    let bt = model::beta_tape(
        &mut tape,
        rho_icd_var,
        rho_atc_var,
        &params.alpha,
        cfg.shared_alpha,
    );
    leaves.push(("alpha.icd".to_string(), bt.alpha_icd));
    if let Some(v) = bt.alpha_atc {
        leaves.push(("alpha.atc".to_string(), v));
    }
    let et = model::encoder_tape(&mut tape, &params.encoder, xi, xa);
    leaves.extend(et.leaves);
    let lt = model::elbo_tape(
        &mut tape, bt.beta_icd, bt.beta_atc, et.mu, et.log_sigma, noise, ci, ca,
    );
    Ok(StepTape {
        tape,
        leaves,
        elbo: lt.elbo,
    })
}

fn embedding_tape(
    tape: &mut Tape,
    leaves: &mut Vec<(String, Var)>,
    embedding: &EmbeddingState,
) -> Result<(Var, Var)> {
    match embedding {
        EmbeddingState::Gat {
            rho0,
            gat,
            adj,
            vocab_ids,
            n_icd,
        } => {
            let gt = gat::gat_forward_tape(tape, gat, adj, rho0.clone(), LEAKY_SLOPE)?;
            for (li, layer) in gt.heads.iter().enumerate() {
                for (hi, &(w, a)) in layer.iter().enumerate() {
                    leaves.push((format!("gat.l{li}.h{hi}.w"), w));
                    leaves.push((format!("gat.l{li}.h{hi}.a"), a));
                }
            }
            let icd_ids = Rc::new(vocab_ids[..*n_icd].to_vec());
            let atc_ids = Rc::new(vocab_ids[*n_icd..].to_vec());
            Ok((
                tape.gather_cols(gt.rho, icd_ids),
                tape.gather_cols(gt.rho, atc_ids),
            ))
        }
        EmbeddingState::Fixed { rho_icd, rho_atc } => Ok((
            tape.constant(rho_icd.clone()),
            tape.constant(rho_atc.clone()),
        )),
        EmbeddingState::Free { rho_icd, rho_atc } => {
            let ri = tape.leaf(rho_icd.clone());
            let ra = tape.leaf(rho_atc.clone());
            leaves.push(("rho.icd".to_string(), ri));
            leaves.push(("rho.atc".to_string(), ra));
            Ok((ri, ra))
        }
    }
}

/// Epoch-level tape stopping at the topic matrices (per-epoch mode).
struct EpochBetaTape {
    tape: Tape,
    leaves: Vec<(String, Var)>,
    beta_icd: Var,
    beta_atc: Var,
}

fn build_beta_tape(params: &ModelParameters, cfg: &TrainConfig) -> Result<EpochBetaTape> {
    let mut tape = Tape::new();
    let mut leaves = Vec::new();
    let (rho_icd_var, rho_atc_var) =
        embedding_tape(&mut tape, &mut leaves, &params.embedding)?;
    let bt = model::beta_tape(
        &mut tape,
        rho_icd_var,
        rho_atc_var,
        &params.alpha,
        cfg.shared_alpha,
    );
    leaves.push(("alpha.icd".to_string(), bt.alpha_icd));
    if let Some(v) = bt.alpha_atc {
        leaves.push(("alpha.atc".to_string(), v));
    }
    Ok(EpochBetaTape {
        tape,
        leaves,
        beta_icd: bt.beta_icd,
        beta_atc: bt.beta_atc,
    })
}

fn apply_updates(
    params: &mut ModelParameters,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    grads: &BTreeMap<String, Array2<f64>>,
) -> Result<()> {
    for (name, param) in params.named_mut(cfg.shared_alpha) {
        if let Some(g) = grads.get(&name) {
            util::ensure_finite(g, &format!("gradient of {name}"))?;
            let slot = adam.slot_mut(&name, param.dim());
            let wd = if decays(&name) { cfg.weight_decay } else { 0.0 };
            adam_step(
                param,
                g,
                slot,
                cfg.learning_rate,
                wd,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            );
        }
    }
    Ok(())
}

fn collect_grads(
    tape: &Tape,
    leaves: &[(String, Var)],
    grads: &crate::autodiff::Gradients,
) -> BTreeMap<String, Array2<f64>> {
    leaves
        .iter()
        .map(|(n, v)| (n.clone(), grads.of(tape, *v)))
        .collect()
}

fn select_checked<'a>(
    docs: &'a [PatientDocument],
    ids: &[String],
    part: &str,
) -> Result<Vec<&'a PatientDocument>> {
    let by_id: std::collections::HashMap<&str, &PatientDocument> =
        docs.iter().map(|d| (d.patient_id.as_str(), d)).collect();
    ids.iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                Error::Invalid(format!("{part} split id {id:?} has no document"))
            })
        })
        .collect()
}

fn write_diag(
    cfg: &TrainConfig,
    epoch: usize,
    params: &ModelParameters,
    adam: &AdamState,
    diag_dir: Option<&Path>,
) -> Option<std::path::PathBuf> {
    let dir = diag_dir?;
    let path = dir.join("diagnostic.ckpt");
    match Checkpoint::from_state(cfg, epoch, params, adam)
        .and_then(|ck| ck.save(&path))
    {
        Ok(()) => Some(path),
        Err(e) => {
            log::warn!("could not write diagnostic snapshot: {e}");
            None
        }
    }
}

/// Run the optimization loop over `cfg.epochs` epochs (continuing from
/// `resume` if given) and return the final checkpoint, the
/// best-validation checkpoint, and the per-epoch log.
#[allow(clippy::too_many_arguments)]
pub fn train(
    docs: &[PatientDocument],
    split: &CorpusSplit,
    vocab: &Vocabulary,
    graph: Option<&KnowledgeGraph>,
    rho0: Option<&Array2<f64>>,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    diag_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_docs = select_checked(docs, &split.train, "train")?;
    let valid_docs = select_checked(docs, &split.valid, "valid")?;
    if train_docs.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let n_train = train_docs.len();
    let dims = cfg.dims(vocab);
    dims.validate()?;

    let (mut params, mut adam, start_epoch) = match resume {
        Some(ck) => {
            let mut stored = ck.config.clone();
            stored.epochs = cfg.epochs;
            if stored != *cfg {
                return Err(Error::Checkpoint(
                    "resume config differs from checkpoint config".into(),
                ));
            }
            if ck.epoch > cfg.epochs {
                return Err(Error::Checkpoint(format!(
                    "checkpoint is at epoch {}, beyond the requested {}",
                    ck.epoch, cfg.epochs
                )));
            }
            let (p, a) = ck.restore(graph)?;
            (p, a, ck.epoch)
        }
        None => (apply_variant(cfg, vocab, graph, rho0)?, AdamState::new(), 0),
    };

    let mut log_rows = Vec::new();
    let metrics = |params: &ModelParameters| -> Result<(f64, f64)> {
        let beta = current_beta(params, cfg.shared_alpha)?;
        let elbo = deterministic_elbo(&train_docs, &params.encoder, &beta)?;
        let nll = validation_nll(&valid_docs, &params.encoder, &beta)?;
        if !elbo.is_finite() || !nll.is_finite() {
            return Err(Error::Train(format!(
                "non-finite epoch metrics (ELBO {elbo}, NLL {nll})"
            )));
        }
        Ok((elbo, nll))
    };

    let (elbo0, nll0) = metrics(&params).map_err(|e| {
        match write_diag(cfg, start_epoch, &params, &adam, diag_dir) {
            Some(p) => {
                Error::Train(format!("{e}; diagnostic snapshot at {}", p.display()))
            }
            None => e,
        }
    })?;
    if start_epoch == 0 {
        log_rows.push(TrainLogRow {
            epoch: 0,
            train_elbo: elbo0,
            valid_nll: nll0,
            wall_seconds: 0.0,
        });
    }
    let mut best_nll = nll0;
    let mut best = Checkpoint::from_state(cfg, start_epoch, &params, &adam)?;

    for epoch in start_epoch + 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut util::derived_rng(cfg.seed, &format!("shuffle:{epoch}")));

        let mut epoch_tape = if cfg.beta_per_epoch {
            Some(build_beta_tape(&params, cfg)?)
        } else {
            None
        };
        let mut beta_grad_acc: Option<(Array2<f64>, Array2<f64>)> = None;

        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PatientDocument> =
                chunk.iter().map(|&i| train_docs[i]).collect();
            let (xi, xa) = model::bow_matrix(&batch, dims.v_icd, dims.v_atc);
            let ci = model::count_matrix(&batch, dims.v_icd, Modality::Icd);
            let ca = model::count_matrix(&batch, dims.v_atc, Modality::Atc);
            let mode = if cfg.zero_noise {
                NoiseMode::Zero
            } else {
                NoiseMode::Seeded(cfg.seed)
            };
            let noise = model::draw_noise(cfg.k, batch.len(), mode, &format!("noise:{epoch}:{bi}"));
            let scale = n_train as f64 / batch.len() as f64;

            let abort = |what: String,
                         params: &ModelParameters,
                         adam: &AdamState|
             -> Error {
                let snap = write_diag(cfg, epoch - 1, params, adam, diag_dir);
                let suffix = match snap {
                    Some(p) => format!("; diagnostic snapshot at {}", p.display()),
                    None => String::new(),
                };
                Error::Train(format!(
                    "epoch {epoch} batch {bi}: {what}{suffix}"
                ))
            };

            if let Some(ep) = epoch_tape.as_mut() {
                let beta_icd_val = ep.tape.value(ep.beta_icd).clone();
                let beta_atc_val = ep.tape.value(ep.beta_atc).clone();
                let mut tape = Tape::new();
                let bi_var = tape.leaf(beta_icd_val);
                let ba_var = tape.leaf(beta_atc_val);
                let et = model::encoder_tape(&mut tape, &params.encoder, xi, xa);
                let enc_leaves = et.leaves.clone();
                let lt = model::elbo_tape(
                    &mut tape, bi_var, ba_var, et.mu, et.log_sigma, noise, ci, ca,
                );
                let loss = tape.scale(lt.elbo, -scale);
                let loss_val = tape.value(loss)[(0, 0)];
                if !loss_val.is_finite() {
                    return Err(abort(
                        format!("non-finite loss {loss_val}"),
                        &params,
                        &adam,
                    ));
                }
                let grads = tape.backward_scalar(loss)?;
                let grad_map = collect_grads(&tape, &enc_leaves, &grads);
                apply_updates(&mut params, &mut adam, cfg, &grad_map)
                    .map_err(|e| abort(e.to_string(), &params, &adam))?;
                let gbi = grads.of(&tape, bi_var);
                let gba = grads.of(&tape, ba_var);
                match beta_grad_acc.as_mut() {
                    Some((ai, aa)) => {
                        *ai += &gbi;
                        *aa += &gba;
                    }
                    None => beta_grad_acc = Some((gbi, gba)),
                }
            } else {
                let st = build_full_tape(&params, cfg, xi, xa, ci, ca, noise)?;
                let mut tape = st.tape;
                let loss = tape.scale(st.elbo, -scale);
                let loss_val = tape.value(loss)[(0, 0)];
                if !loss_val.is_finite() {
                    return Err(abort(
                        format!("non-finite loss {loss_val}"),
                        &params,
                        &adam,
                    ));
                }
                let grads = tape.backward_scalar(loss)?;
                let grad_map = collect_grads(&tape, &st.leaves, &grads);
                apply_updates(&mut params, &mut adam, cfg, &grad_map)
                    .map_err(|e| abort(e.to_string(), &params, &adam))?;
            }
        }

        if let (Some(ep), Some((gi, ga))) = (epoch_tape.take(), beta_grad_acc.take()) {
            let grads = ep
                .tape
                .backward_seeded(&[(ep.beta_icd, gi), (ep.beta_atc, ga)])?;
            let grad_map = collect_grads(&ep.tape, &ep.leaves, &grads);
            apply_updates(&mut params, &mut adam, cfg, &grad_map)?;
        }

        let wall = t0.elapsed().as_secs_f64();
        let (train_elbo, valid_nll) = metrics(&params).map_err(|e| {
            let snap = write_diag(cfg, epoch, &params, &adam, diag_dir);
            match snap {
                Some(p) => Error::Train(format!(
                    "epoch {epoch}: {e}; diagnostic snapshot at {}",
                    p.display()
                )),
                None => Error::Train(format!("epoch {epoch}: {e}")),
            }
        })?;
        log_rows.push(TrainLogRow {
            epoch,
            train_elbo,
            valid_nll,
            wall_seconds: wall,
        });
        if valid_nll < best_nll {
            best_nll = valid_nll;
            best = Checkpoint::from_state(cfg, epoch, &params, &adam)?;
        }
    }

    let last = Checkpoint::from_state(cfg, cfg.epochs, &params, &adam)?;
    Ok(TrainOutcome {
        last,
        best,
        log: log_rows,
    })
}
