//! Evaluation metrics: document-completion likelihood, topic
//! coherence/diversity/quality, drug-imputation accuracy (patient-wise
//! and frequency-binned drug-wise), and graph-distance profiles of
//! imputed drugs.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};

use crate::corpus::{self, CorpusSplit, Modality, PatientDocument, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{collapse_last_level, collapsed_distance, KnowledgeGraph};
use crate::model::{self, EncoderParameters, TopicMatrices};
use crate::trainer::Checkpoint;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionNll {
    /// Per-held-out-token NLL averaged over evaluated documents.
    pub nll: f64,
    pub evaluated: usize,
    /// Documents with fewer than two tokens, which cannot be halved.
    pub skipped: usize,
}

/// Document-completion negative log-likelihood: encode the first half of
/// each document, take theta = softmax(mu), and score the second half.
pub fn completion_nll(
    docs: &[&PatientDocument],
    enc: &EncoderParameters,
    beta: &TopicMatrices,
    seed: u64,
) -> Result<CompletionNll> {
    let v_icd = beta.beta_icd.nrows();
    let v_atc = beta.beta_atc.nrows();
    let mut total = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for doc in docs {
        if doc.total_tokens() < 2 {
            skipped += 1;
            continue;
        }
        let (first, second) = corpus::halve_document(doc, seed)?;
        let theta = infer_theta(&first, enc, v_icd, v_atc);
        let (ll, _) = model::log_likelihood(&second, &theta, beta);
        let tokens = second.total_tokens();
        total += -ll / tokens as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Invalid(
            "no document has enough tokens for completion scoring".into(),
        ));
    }
    Ok(CompletionNll {
        nll: total / evaluated as f64,
        evaluated,
        skipped,
    })
}

fn infer_theta(
    doc: &PatientDocument,
    enc: &EncoderParameters,
    v_icd: usize,
    v_atc: usize,
) -> Array1<f64> {
    let (xi, xa) = corpus::normalize_bow(doc, v_icd, v_atc);
    let xi = xi.insert_axis(Axis(1));
    let xa = xa.insert_axis(Axis(1));
    let (mu, _) = model::encode(enc, &xi, &xa);
    util::softmax_columns(&mu).column(0).to_owned()
}

/// Top-`s` code ids of one topic, ties broken by ascending id.
pub fn top_codes(beta: &Array2<f64>, topic: usize, s: usize) -> Vec<usize> {
    let col = beta.column(topic);
    let mut ids: Vec<usize> = (0..beta.nrows()).collect();
    ids.sort_by(|&a, &b| {
        col[b]
            .partial_cmp(&col[a])
            .expect("finite topic probabilities")
            .then(a.cmp(&b))
    });
    ids.truncate(s);
    ids
}

/// Normalized pointwise mutual information over the top-`s` codes of each
/// topic, with document frequencies taken from `docs`.
pub fn topic_coherence(
    beta: &Array2<f64>,
    docs: &[&PatientDocument],
    modality: Modality,
    s: usize,
) -> Result<f64> {
    if s < 2 {
        return Err(Error::Invalid("coherence needs at least 2 top codes".into()));
    }
    if docs.is_empty() {
        return Err(Error::Invalid("coherence reference corpus is empty".into()));
    }
    let v = beta.nrows();
    if s > v {
        return Err(Error::Invalid(format!(
            "top-{s} codes requested from a {v}-code vocabulary"
        )));
    }
    let n = docs.len() as f64;
    let presence: Vec<BTreeSet<usize>> = docs
        .iter()
        .map(|d| d.counts(modality).keys().copied().collect())
        .collect();
    let df = |w: usize| presence.iter().filter(|p| p.contains(&w)).count() as f64;
    let df2 = |wi: usize, wj: usize| {
        presence
            .iter()
            .filter(|p| p.contains(&wi) && p.contains(&wj))
            .count() as f64
    };

    let mut topic_sum = 0.0;
    for k in 0..beta.ncols() {
        let top = top_codes(beta, k, s);
        let mut pair_sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..s {
            for j in i + 1..s {
                let p_ij = df2(top[i], top[j]) / n;
                let term = if p_ij <= 0.0 {
                    -1.0
                } else if p_ij >= 1.0 {
                    1.0
                } else {
                    let p_i = df(top[i]) / n;
                    let p_j = df(top[j]) / n;
                    (p_ij / (p_i * p_j)).ln() / -p_ij.ln()
                };
                assert!(
                    (-1.0 - 1e-9..=1.0 + 1e-9).contains(&term),
                    "NPMI pair term {term} out of range"
                );
                pair_sum += term;
                pairs += 1;
            }
        }
        topic_sum += pair_sum / pairs as f64;
    }
    Ok(topic_sum / beta.ncols() as f64)
}

/// Fraction of unique codes among the top-`r` codes of every topic.
pub fn topic_diversity(beta: &Array2<f64>, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::Invalid("diversity needs at least 1 top code".into()));
    }
    let v = beta.nrows();
    if r > v {
        return Err(Error::Invalid(format!(
            "top-{r} codes requested from a {v}-code vocabulary"
        )));
    }
    let k = beta.ncols();
    let mut union = BTreeSet::new();
    for topic in 0..k {
        union.extend(top_codes(beta, topic, r));
    }
    let td = union.len() as f64 / (k * r) as f64;
    assert!(
        td >= 1.0 / k as f64 - 1e-12 && td <= 1.0 + 1e-12,
        "topic diversity {td} outside [1/K, 1]"
    );
    Ok(td)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopicQuality {
    pub tq_icd: f64,
    pub tq_atc: f64,
    pub tq_average: f64,
}

pub fn topic_quality(tc_icd: f64, td_icd: f64, tc_atc: f64, td_atc: f64) -> TopicQuality {
    let tq_icd = tc_icd * td_icd;
    let tq_atc = tc_atc * td_atc;
    TopicQuality {
        tq_icd,
        tq_atc,
        tq_average: (tq_icd + tq_atc) / 2.0,
    }
}

/// Rank ATC codes for one patient from ICD codes alone: the ATC branch of
/// the encoder is fed a zero vector, theta = softmax(mu), and codes are
/// scored by beta_atc * theta, descending with ascending-id tie-break.
pub fn impute_drugs(
    doc: &PatientDocument,
    enc: &EncoderParameters,
    beta: &TopicMatrices,
) -> Result<Vec<(usize, f64)>> {
    if doc.token_total(Modality::Icd) == 0 {
        return Err(Error::Invalid(format!(
            "patient {:?} has no ICD codes to impute from",
            doc.patient_id
        )));
    }
    let v_icd = beta.beta_icd.nrows();
    let v_atc = beta.beta_atc.nrows();
    let (xi, _) = corpus::normalize_bow(doc, v_icd, v_atc);
    let xi = xi.insert_axis(Axis(1));
    let xa = Array2::zeros((v_atc, 1));
    let (mu, _) = model::encode(enc, &xi, &xa);
    let theta = util::softmax_columns(&mu).column(0).to_owned();
    let scores = beta.beta_atc.dot(&theta);
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite imputation scores")
            .then(a.0.cmp(&b.0))
    });
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopkMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub evaluated: usize,
    /// Patients excluded for having fewer than 5 distinct true ATC codes.
    pub filtered: usize,
}

/// Patient-wise top-k precision/recall/F1 averaged over patients with at
/// least 5 distinct true ATC codes.
pub fn patientwise_topk(
    ranked: &[Vec<usize>],
    truth: &[&PatientDocument],
    k: usize,
) -> Result<TopkMetrics> {
    if ranked.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} truth documents",
            ranked.len(),
            truth.len()
        )));
    }
    if k == 0 {
        return Err(Error::Invalid("top-k needs k >= 1".into()));
    }
    let mut psum = 0.0;
    let mut rsum = 0.0;
    let mut fsum = 0.0;
    let mut evaluated = 0usize;
    let mut filtered = 0usize;
    for (list, doc) in ranked.iter().zip(truth.iter()) {
        let truth_set: BTreeSet<usize> = doc.counts(Modality::Atc).keys().copied().collect();
        if truth_set.len() < 5 {
            filtered += 1;
            continue;
        }
        let hits = list
            .iter()
            .take(k)
            .filter(|id| truth_set.contains(id))
            .count() as f64;
        let prec = hits / k as f64;
        let rec = hits / truth_set.len() as f64;
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        if truth_set.len() >= k {
            assert!(
                prec >= rec - 1e-12,
                "precision {prec} below recall {rec} with |truth| >= k"
            );
        }
        psum += prec;
        rsum += rec;
        fsum += f1;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Invalid(
            "no patient has 5 or more distinct ATC codes".into(),
        ));
    }
    let n = evaluated as f64;
    Ok(TopkMetrics {
        precision: psum / n,
        recall: rsum / n,
        f1: fsum / n,
        evaluated,
        filtered,
    })
}

/// Total ATC token counts over a training corpus, indexed by code id.
pub fn atc_frequencies(train: &[&PatientDocument], v_atc: usize) -> Vec<u64> {
    let mut freqs = vec![0u64; v_atc];
    for doc in train {
        for (&id, &c) in doc.counts(Modality::Atc) {
            freqs[id] += c as u64;
        }
    }
    freqs
}

pub fn quintile_label(bin: usize, n_bins: usize) -> String {
    format!("{}-{}%", 100 * bin / n_bins, 100 * (bin + 1) / n_bins)
}

/// Recall per frequency bin: codes are sorted by training frequency into
/// `n_bins` quantiles; a code's recall is the fraction of truth patients
/// whose top-`k` imputations contain it; bins average member codes'
/// recalls weighted by frequency. Bins with no scored codes are absent.
pub fn drugwise_binned_recall(
    ranked: &[Vec<usize>],
    truth: &[&PatientDocument],
    freqs: &[u64],
    n_bins: usize,
    k: usize,
) -> Result<BTreeMap<String, f64>> {
    if ranked.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} truth documents",
            ranked.len(),
            truth.len()
        )));
    }
    if n_bins == 0 || k == 0 {
        return Err(Error::Invalid("bins and k must be positive".into()));
    }
    let v = freqs.len();
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by_key(|&id| (freqs[id], id));
    let mut bin_of = vec![0usize; v];
    for (rank, &id) in order.iter().enumerate() {
        bin_of[id] = rank * n_bins / v;
    }

    let mut denom = vec![0u64; v];
    let mut hits = vec![0u64; v];
    for (list, doc) in ranked.iter().zip(truth.iter()) {
        let topk: BTreeSet<usize> = list.iter().take(k).copied().collect();
        for &id in doc.counts(Modality::Atc).keys() {
            denom[id] += 1;
            if topk.contains(&id) {
                hits[id] += 1;
            }
        }
    }

    let mut out = BTreeMap::new();
    for bin in 0..n_bins {
        let members: Vec<usize> = (0..v)
            .filter(|&id| bin_of[id] == bin && denom[id] > 0)
            .collect();
        if members.is_empty() {
            continue;
        }
        let weight: u64 = members.iter().map(|&id| freqs[id]).sum();
        let value = if weight > 0 {
            members
                .iter()
                .map(|&id| freqs[id] as f64 * hits[id] as f64 / denom[id] as f64)
                .sum::<f64>()
                / weight as f64
        } else {
            members
                .iter()
                .map(|&id| hits[id] as f64 / denom[id] as f64)
                .sum::<f64>()
                / members.len() as f64
        };
        out.insert(quintile_label(bin, n_bins), value);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceEntry {
    pub atc_code: String,
    pub probability: f64,
    /// Hops between collapsed nodes; None when disconnected.
    pub distance: Option<usize>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile {
    pub patient_id: String,
    pub entries: Vec<DistanceEntry>,
    /// Mean collapsed distance from every ATC code to the observed set.
    pub baseline: f64,
}

/// Graph-distance profile of the top-`m` imputed ATC codes: collapsed
/// BFS distance from each code to the set of observed ICD codes on the
/// unaugmented graph, plus the all-ATC average as a baseline.
pub fn distance_profile(
    ranked: &[(usize, f64)],
    doc: &PatientDocument,
    g: &KnowledgeGraph,
    vocab: &Vocabulary,
    m: usize,
) -> Result<DistanceProfile> {
    let collapse = collapse_last_level(g)?;
    let mut observed = BTreeSet::new();
    for &id in doc.counts(Modality::Icd).keys() {
        let code = vocab.code(Modality::Icd, id);
        let node = g
            .node_id(code)
            .ok_or_else(|| Error::Graph(format!("ICD code {code:?} is not in the graph")))?;
        observed.insert(node);
    }
    if observed.is_empty() {
        return Err(Error::Invalid(format!(
            "patient {:?} has no observed ICD codes",
            doc.patient_id
        )));
    }

    let atc_node = |id: usize| -> Result<usize> {
        let code = vocab.code(Modality::Atc, id);
        g.node_id(code)
            .ok_or_else(|| Error::Graph(format!("ATC code {code:?} is not in the graph")))
    };

    let mut entries = Vec::new();
    for &(id, prob) in ranked.iter().take(m) {
        let distance = collapsed_distance(g, &collapse, atc_node(id)?, &observed)?;
        entries.push(DistanceEntry {
            atc_code: vocab.code(Modality::Atc, id).to_string(),
            probability: prob,
            distance,
            correct: doc.counts(Modality::Atc).contains_key(&id),
        });
    }

    let mut sum = 0usize;
    let mut finite = 0usize;
    for id in 0..vocab.len(Modality::Atc) {
        if let Some(d) = collapsed_distance(g, &collapse, atc_node(id)?, &observed)? {
            sum += d;
            finite += 1;
        }
    }
    let baseline = if finite > 0 {
        sum as f64 / finite as f64
    } else {
        f64::INFINITY
    };
    Ok(DistanceProfile {
        patient_id: doc.patient_id.clone(),
        entries,
        baseline,
    })
}

pub fn render_distance_profile(p: &DistanceProfile) -> String {
    let mut s = format!(
        "# patient\t{}\n# baseline_mean_distance\t{}\n",
        p.patient_id,
        util::fmt_f64(p.baseline)
    );
    s.push_str("atc_code\tprobability\tdistance\tcorrect\n");
    for e in &p.entries {
        let d = match e.distance {
            Some(d) => d.to_string(),
            None => "inf".to_string(),
        };
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.atc_code,
            util::fmt_f64(e.probability),
            d,
            e.correct as u8
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Top codes per topic for coherence.
    pub s: usize,
    /// Top codes per topic for diversity.
    pub r: usize,
    /// Cutoff for patient-wise precision/recall/F1.
    pub patient_k: usize,
    /// Cutoff for drug-wise binned recall.
    pub drug_k: usize,
    /// Imputed codes per distance profile.
    pub top_m: usize,
    pub n_bins: usize,
    /// Number of test patients to emit distance profiles for.
    pub profile_patients: usize,
    /// Seed for document halving.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            s: 3,
            r: 3,
            patient_k: 5,
            drug_k: 30,
            top_m: 10,
            n_bins: 5,
            profile_patients: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub completion_nll: f64,
    pub completion_evaluated: usize,
    pub completion_skipped: usize,
    pub tc_icd: f64,
    pub tc_atc: f64,
    pub td_icd: f64,
    pub td_atc: f64,
    pub tq_icd: f64,
    pub tq_atc: f64,
    pub tq_average: f64,
    pub patient_k: usize,
    pub prec_at_k: f64,
    pub recall_at_k: f64,
    pub f1_at_k: f64,
    pub imputation_evaluated: usize,
    pub imputation_filtered: usize,
    /// Test patients without ICD codes, excluded before imputation.
    pub imputation_no_icd: usize,
    pub drug_k: usize,
    pub binned_recall: BTreeMap<String, f64>,
    pub distance_profiles: Vec<DistanceProfile>,
}

/// Run the full metric suite for a trained checkpoint. The knowledge
/// graph, when given, must be unaugmented; it feeds the distance
/// profiles only.
pub fn evaluate(
    docs: &[PatientDocument],
    split: &CorpusSplit,
    vocab: &Vocabulary,
    ck: &Checkpoint,
    graph: Option<&KnowledgeGraph>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let beta = ck.beta()?;
    let enc = ck.encoder()?;
    let train_docs = CorpusSplit::select(docs, &split.train);
    let test_docs = CorpusSplit::select(docs, &split.test);
    if test_docs.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }

    let completion = completion_nll(&test_docs, &enc, &beta, cfg.seed)?;
    let tc_icd = topic_coherence(&beta.beta_icd, &test_docs, Modality::Icd, cfg.s)?;
    let tc_atc = topic_coherence(&beta.beta_atc, &test_docs, Modality::Atc, cfg.s)?;
    let td_icd = topic_diversity(&beta.beta_icd, cfg.r)?;
    let td_atc = topic_diversity(&beta.beta_atc, cfg.r)?;
    let tq = topic_quality(tc_icd, td_icd, tc_atc, td_atc);

    let mut ranked = Vec::new();
    let mut truth = Vec::new();
    let mut no_icd = 0usize;
    for doc in &test_docs {
        if doc.token_total(Modality::Icd) == 0 {
            no_icd += 1;
            continue;
        }
        ranked.push(impute_drugs(doc, &enc, &beta)?);
        truth.push(*doc);
    }
    let id_lists: Vec<Vec<usize>> = ranked
        .iter()
        .map(|r| r.iter().map(|&(id, _)| id).collect())
        .collect();
    let topk = patientwise_topk(&id_lists, &truth, cfg.patient_k)?;
    let freqs = atc_frequencies(&train_docs, vocab.len(Modality::Atc));
    let binned = drugwise_binned_recall(&id_lists, &truth, &freqs, cfg.n_bins, cfg.drug_k)?;

    let mut profiles = Vec::new();
    if let Some(g) = graph {
        for (list, doc) in ranked.iter().zip(truth.iter()).take(cfg.profile_patients) {
            profiles.push(distance_profile(list, doc, g, vocab, cfg.top_m)?);
        }
    }

    Ok(MetricsReport {
        completion_nll: completion.nll,
        completion_evaluated: completion.evaluated,
        completion_skipped: completion.skipped,
        tc_icd,
        tc_atc,
        td_icd,
        td_atc,
        tq_icd: tq.tq_icd,
        tq_atc: tq.tq_atc,
        tq_average: tq.tq_average,
        patient_k: cfg.patient_k,
        prec_at_k: topk.precision,
        recall_at_k: topk.recall,
        f1_at_k: topk.f1,
        imputation_evaluated: topk.evaluated,
        imputation_filtered: topk.filtered,
        imputation_no_icd: no_icd,
        drug_k: cfg.drug_k,
        binned_recall: binned,
        distance_profiles: profiles,
    })
}

pub fn render_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str("== document completion ==\n");
    s.push_str(&format!(
        "per-token NLL  {:.6}  ({} documents, {} skipped)\n",
        r.completion_nll, r.completion_evaluated, r.completion_skipped
    ));
    s.push_str("\n== topic quality ==\n");
    s.push_str(&format!(
        "ICD  TC {:.4}  TD {:.4}  TQ {:.4}\n",
        r.tc_icd, r.td_icd, r.tq_icd
    ));
    s.push_str(&format!(
        "ATC  TC {:.4}  TD {:.4}  TQ {:.4}\n",
        r.tc_atc, r.td_atc, r.tq_atc
    ));
    s.push_str(&format!("TQ average  {:.4}\n", r.tq_average));
    s.push_str("\n== drug imputation ==\n");
    s.push_str(&format!(
        "prec@{k} {:.4}  recall@{k} {:.4}  f1@{k} {:.4}  ({} patients, {} filtered, {} without ICD)\n",
        r.prec_at_k,
        r.recall_at_k,
        r.f1_at_k,
        r.imputation_evaluated,
        r.imputation_filtered,
        r.imputation_no_icd,
        k = r.patient_k
    ));
    s.push_str(&format!("binned recall@{} by training frequency:\n", r.drug_k));
    for (bin, v) in &r.binned_recall {
        s.push_str(&format!("  {bin:>8}  {v:.4}\n"));
    }
    if !r.distance_profiles.is_empty() {
        s.push_str("\n== distance profiles ==\n");
        for p in &r.distance_profiles {
            s.push_str(&format!(
                "patient {}  baseline {:.3}\n",
                p.patient_id, p.baseline
            ));
            for e in &p.entries {
                let d = match e.distance {
                    Some(d) => d.to_string(),
                    None => "inf".to_string(),
                };
                s.push_str(&format!(
                    "  {}  p={:.5}  distance {}  {}\n",
                    e.atc_code,
                    e.probability,
                    d,
                    if e.correct { "correct" } else { "incorrect" }
                ));
            }
        }
    }
    s
}

pub fn render_key_values(r: &MetricsReport) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("completion_nll", util::fmt_f64(r.completion_nll));
    kv("completion_evaluated", r.completion_evaluated.to_string());
    kv("completion_skipped", r.completion_skipped.to_string());
    kv("tc_icd", util::fmt_f64(r.tc_icd));
    kv("tc_atc", util::fmt_f64(r.tc_atc));
    kv("td_icd", util::fmt_f64(r.td_icd));
    kv("td_atc", util::fmt_f64(r.td_atc));
    kv("tq_icd", util::fmt_f64(r.tq_icd));
    kv("tq_atc", util::fmt_f64(r.tq_atc));
    kv("tq_average", util::fmt_f64(r.tq_average));
    kv("patient_k", r.patient_k.to_string());
    kv("prec_at_k", util::fmt_f64(r.prec_at_k));
    kv("recall_at_k", util::fmt_f64(r.recall_at_k));
    kv("f1_at_k", util::fmt_f64(r.f1_at_k));
    kv("imputation_evaluated", r.imputation_evaluated.to_string());
    kv("imputation_filtered", r.imputation_filtered.to_string());
    kv("imputation_no_icd", r.imputation_no_icd.to_string());
    kv("drug_k", r.drug_k.to_string());
    for (bin, v) in &r.binned_recall {
        kv(&format!("binned_recall.{bin}"), util::fmt_f64(*v));
    }
    s
}
