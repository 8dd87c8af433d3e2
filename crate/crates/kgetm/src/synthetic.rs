//! Synthetic EHR corpus generator with planted graph-local topics.
//!
//! The taxonomy builder emits paired ICD/ATC hierarchies (root, first-level
//! groups, categories, leaves) plus cross links joining aligned groups. The
//! corpus generator plants one topic per first-level ICD group: a topic's
//! probable codes are the leaves of that group and the ATC leaves they are
//! cross-linked to, so topics are local in the knowledge graph.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::corpus::{sample_categorical, Modality, PatientDocument, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{HierarchySource, KnowledgeGraph, Relation};
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_topics: usize,
    pub icd_groups: usize,
    pub icd_categories_per_group: usize,
    pub icd_leaves_per_category: usize,
    pub atc_groups: usize,
    pub atc_categories_per_group: usize,
    pub atc_leaves_per_category: usize,
    /// Inclusive per-document token range for each modality.
    pub icd_tokens: (u32, u32),
    pub atc_tokens: (u32, u32),
    /// Dirichlet concentration of a topic's distribution over its local codes.
    pub concentration: f64,
    /// Uniform probability mass spread over the whole vocabulary.
    pub background: f64,
    /// Standard deviation of the logistic-normal topic-mixture prior.
    pub theta_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 2000,
            n_topics: 5,
            icd_groups: 10,
            icd_categories_per_group: 4,
            icd_leaves_per_category: 5,
            atc_groups: 10,
            atc_categories_per_group: 2,
            atc_leaves_per_category: 5,
            icd_tokens: (15, 40),
            atc_tokens: (8, 20),
            concentration: 0.2,
            background: 0.02,
            theta_scale: 3.0,
        }
    }
}

impl GeneratorConfig {
    pub fn v_icd(&self) -> usize {
        self.icd_groups * self.icd_categories_per_group * self.icd_leaves_per_category
    }

    pub fn v_atc(&self) -> usize {
        self.atc_groups * self.atc_categories_per_group * self.atc_leaves_per_category
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.n_topics == 0 {
            return Err(Error::Config("n_patients and n_topics must be positive".into()));
        }
        if self.icd_groups == 0
            || self.icd_categories_per_group == 0
            || self.icd_leaves_per_category == 0
            || self.atc_groups == 0
            || self.atc_categories_per_group == 0
            || self.atc_leaves_per_category == 0
        {
            return Err(Error::Config("taxonomy dimensions must be positive".into()));
        }
        if self.icd_tokens.0 > self.icd_tokens.1 || self.atc_tokens.0 > self.atc_tokens.1 {
            return Err(Error::Config("token range minimum exceeds maximum".into()));
        }
        if self.icd_tokens.1 == 0 && self.atc_tokens.1 == 0 {
            return Err(Error::Config("token ranges permit only empty documents".into()));
        }
        if self.concentration <= 0.0 {
            return Err(Error::Config("concentration must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.background) {
            return Err(Error::Config("background mass must lie in [0, 1)".into()));
        }
        if self.theta_scale <= 0.0 {
            return Err(Error::Config("theta_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Planted generator state returned alongside the corpus.
#[derive(Debug, Clone)]
pub struct SyntheticGroundTruth {
    /// Row k is topic k's distribution over the ICD vocabulary.
    pub beta_icd: Array2<f64>,
    pub beta_atc: Array2<f64>,
    /// Row p is patient p's topic mixture.
    pub theta: Array2<f64>,
    pub seed: u64,
}

impl SyntheticGroundTruth {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("beta_icd", &self.beta_icd),
            ("beta_atc", &self.beta_atc),
            ("theta", &self.theta),
        ] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid(format!(
                        "{name} row {i} sums to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub vocab: Vocabulary,
    pub icd_hier: HierarchySource,
    pub atc_hier: HierarchySource,
    pub cross_links: Vec<(String, String)>,
}

/// Deterministically build the paired hierarchies, vocabulary, and cross
/// links implied by the config.
pub fn build_taxonomy(cfg: &GeneratorConfig) -> Result<Taxonomy> {
    cfg.validate()?;
    let mut vocab = Vocabulary::new();
    let mut icd_hier = HierarchySource::new(Modality::Icd);
    let mut atc_hier = HierarchySource::new(Modality::Atc);

    let mut leaves_by_group: HashMap<(Modality, usize), Vec<String>> = HashMap::new();
    let mut emit = |modality: Modality,
                    hier: &mut HierarchySource,
                    root: &str,
                    prefix: &str,
                    groups: usize,
                    cats: usize,
                    leaves: usize,
                    vocab: &mut Vocabulary|
     -> Result<()> {
        for g in 0..groups {
            let group_code = format!("{prefix}{g:02}");
            hier.pairs.push((group_code.clone(), root.to_string()));
            for c in 0..cats {
                let cat_code = format!("{group_code}.{c:02}");
                hier.pairs.push((cat_code.clone(), group_code.clone()));
                for l in 0..leaves {
                    let leaf_code = format!("{cat_code}.{l:02}");
                    hier.pairs.push((leaf_code.clone(), cat_code.clone()));
                    vocab.push(&leaf_code, modality, g)?;
                    leaves_by_group
                        .entry((modality, g))
                        .or_default()
                        .push(leaf_code);
                }
            }
        }
        Ok(())
    };

    emit(
        Modality::Icd,
        &mut icd_hier,
        "icd-root",
        "d",
        cfg.icd_groups,
        cfg.icd_categories_per_group,
        cfg.icd_leaves_per_category,
        &mut vocab,
    )?;
    emit(
        Modality::Atc,
        &mut atc_hier,
        "atc-root",
        "a",
        cfg.atc_groups,
        cfg.atc_categories_per_group,
        cfg.atc_leaves_per_category,
        &mut vocab,
    )?;

    let mut cross_links = Vec::new();
    for g in 0..cfg.icd_groups {
        let aligned = g % cfg.atc_groups;
        let icd_leaves = &leaves_by_group[&(Modality::Icd, g)];
        let atc_leaves = &leaves_by_group[&(Modality::Atc, aligned)];
        for (i, icd_code) in icd_leaves.iter().enumerate() {
            let atc_code = &atc_leaves[i % atc_leaves.len()];
            cross_links.push((icd_code.clone(), atc_code.clone()));
        }
    }

    Ok(Taxonomy {
        vocab,
        icd_hier,
        atc_hier,
        cross_links,
    })
}

fn dirichlet_over(ids: &[usize], concentration: f64, len: usize, rng: &mut impl Rng) -> Array1<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut weights: Vec<f64> = ids.iter().map(|_| gamma.sample(rng)).collect();
    let sum: f64 = weights.iter().sum();
    if sum <= 1e-300 {
        let lucky = rng.random_range(0..weights.len());
        weights.iter_mut().for_each(|w| *w = 0.0);
        weights[lucky] = 1.0;
    } else {
        weights.iter_mut().for_each(|w| *w /= sum);
    }
    let mut out = Array1::zeros(len);
    for (&id, &w) in ids.iter().zip(weights.iter()) {
        out[id] = w;
    }
    out
}

/// Generate a corpus of `cfg.n_patients` documents with planted topics.
///
/// Topic k occupies the k-th first-level ICD group (sorted by category id)
/// plus the ATC codes reachable from that group's leaves over cross edges.
pub fn generate_synthetic_corpus(
    cfg: &GeneratorConfig,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(Vec<PatientDocument>, SyntheticGroundTruth)> {
    cfg.validate()?;
    let v_icd = vocab.len(Modality::Icd);
    let v_atc = vocab.len(Modality::Atc);
    if v_icd == 0 || v_atc == 0 {
        return Err(Error::Invalid("vocabulary has an empty modality".into()));
    }

    let groups: Vec<usize> = vocab
        .entries(Modality::Icd)
        .iter()
        .map(|e| e.category)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if cfg.n_topics > groups.len() {
        return Err(Error::Invalid(format!(
            "{} topics requested but only {} first-level ICD groups exist",
            cfg.n_topics,
            groups.len()
        )));
    }

    let mut cross_adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(u, v, rel) in &graph.edges {
        if rel == Relation::Cross {
            cross_adj.entry(u).or_default().push(v);
            cross_adj.entry(v).or_default().push(u);
        }
    }

    let k = cfg.n_topics;
    let mut beta_icd = Array2::zeros((k, v_icd));
    let mut beta_atc = Array2::zeros((k, v_atc));
    let mut rng_beta = util::derived_rng(seed, "synth-beta");
    for (t, &group) in groups.iter().take(k).enumerate() {
        let icd_local: Vec<usize> = vocab
            .entries(Modality::Icd)
            .iter()
            .enumerate()
            .filter(|(_, e)| e.category == group)
            .map(|(id, _)| id)
            .collect();
        let mut atc_local: BTreeSet<usize> = BTreeSet::new();
        for &icd_id in &icd_local {
            let code = vocab.code(Modality::Icd, icd_id);
            let node = graph.node_id(code).ok_or_else(|| {
                Error::Graph(format!("vocabulary code {code:?} missing from graph"))
            })?;
            for &nbr in cross_adj.get(&node).map(Vec::as_slice).unwrap_or(&[]) {
                if let Some((Modality::Atc, atc_id)) = vocab.lookup(&graph.nodes[nbr].code) {
                    atc_local.insert(atc_id);
                }
            }
        }
        if atc_local.is_empty() {
            return Err(Error::Graph(format!(
                "topic {t} (ICD group {group}) reaches no cross-linked ATC codes"
            )));
        }
        let atc_local: Vec<usize> = atc_local.into_iter().collect();

        let bg = cfg.background;
        let local_icd = dirichlet_over(&icd_local, cfg.concentration, v_icd, &mut rng_beta);
        let local_atc = dirichlet_over(&atc_local, cfg.concentration, v_atc, &mut rng_beta);
        for v in 0..v_icd {
            beta_icd[(t, v)] = (1.0 - bg) * local_icd[v] + bg / v_icd as f64;
        }
        for v in 0..v_atc {
            beta_atc[(t, v)] = (1.0 - bg) * local_atc[v] + bg / v_atc as f64;
        }
    }

    let mut theta = Array2::zeros((cfg.n_patients, k));
    let mut rng_theta = util::derived_rng(seed, "synth-theta");
    let normal = Normal::new(0.0, cfg.theta_scale).expect("positive scale");
    for p in 0..cfg.n_patients {
        let delta = Array1::from_iter((0..k).map(|_| normal.sample(&mut rng_theta)));
        theta.row_mut(p).assign(&util::softmax(&delta));
    }

    let mut docs = Vec::with_capacity(cfg.n_patients);
    let mut rng_tokens = util::derived_rng(seed, "synth-tokens");
    let width = (cfg.n_patients.max(2) - 1).to_string().len();
    for p in 0..cfg.n_patients {
        let mut doc = PatientDocument::new(format!("p{:0width$}", p));
        let theta_p = theta.row(p).to_owned();
        for (modality, beta, range) in [
            (Modality::Icd, &beta_icd, cfg.icd_tokens),
            (Modality::Atc, &beta_atc, cfg.atc_tokens),
        ] {
            let n = rng_tokens.random_range(range.0..=range.1) as usize;
            if n == 0 {
                continue;
            }
            let probs = beta.t().dot(&theta_p);
            for (id, count) in sample_categorical(&probs, n, &mut rng_tokens) {
                doc.add(modality, id, count);
            }
        }
        docs.push(doc);
    }

    let truth = SyntheticGroundTruth {
        beta_icd,
        beta_atc,
        theta,
        seed,
    };
    truth.validate()?;
    Ok((docs, truth))
}

/// Average per-token log-likelihood of the corpus under row-stochastic
/// per-topic code distributions and per-patient mixtures.
pub fn corpus_loglik_per_token(
    docs: &[PatientDocument],
    beta_icd: &Array2<f64>,
    beta_atc: &Array2<f64>,
    theta: &Array2<f64>,
) -> f64 {
    let mut total = 0.0;
    let mut tokens = 0u64;
    for (p, doc) in docs.iter().enumerate() {
        let theta_p = theta.row(p).to_owned();
        for (modality, beta) in [(Modality::Icd, beta_icd), (Modality::Atc, beta_atc)] {
            let probs = beta.t().dot(&theta_p);
            for (&id, &count) in doc.counts(modality) {
                total += count as f64 * probs[id].max(1e-300).ln();
                tokens += count as u64;
            }
        }
    }
    if tokens == 0 {
        0.0
    } else {
        total / tokens as f64
    }
}

pub fn matrix_to_tsv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|&v| util::fmt_f64(v)).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}
