//! EHR corpus data model and I/O.
//!
//! A corpus file is UTF-8, tab-separated, one line per (patient-id, code,
//! count) with the header `patient\tcode\tcount`. Counts for duplicate
//! (patient, code) lines are aggregated. A vocabulary file is tab-separated
//! (code, modality, category-id) with no header.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::util;

/// Code modality: diagnosis codes or drug-ingredient codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Icd,
    Atc,
}

impl Modality {
    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_lowercase().as_str() {
            "icd" => Some(Modality::Icd),
            "atc" => Some(Modality::Atc),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Icd => "icd",
            Modality::Atc => "atc",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct VocabEntry {
    pub code: String,
    pub modality: Modality,
    /// Index of the first-level taxonomy group this code belongs to.
    pub category: usize,
}

/// Ordered code vocabulary with dense per-modality ids.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    icd: Vec<VocabEntry>,
    atc: Vec<VocabEntry>,
    index: HashMap<String, (Modality, usize)>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append an entry, assigning the next dense id in its modality.
    pub fn push(&mut self, code: &str, modality: Modality, category: usize) -> Result<usize> {
        if self.index.contains_key(code) {
            return Err(Error::Invalid(format!("duplicate vocabulary code {code:?}")));
        }
        let list = match modality {
            Modality::Icd => &mut self.icd,
            Modality::Atc => &mut self.atc,
        };
        let id = list.len();
        list.push(VocabEntry {
            code: code.to_string(),
            modality,
            category,
        });
        self.index.insert(code.to_string(), (modality, id));
        Ok(id)
    }

    pub fn from_file(path: &Path) -> Result<Vocabulary> {
        let text = util::read_to_string(path)?;
        let mut vocab = Vocabulary::new();
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
            let modality = Modality::parse(fields[1]).ok_or_else(|| {
                Error::format(
                    path.display().to_string(),
                    lineno,
                    format!("unknown modality {:?}", fields[1]),
                )
            })?;
            let category: usize = fields[2].trim().parse().map_err(|_| {
                Error::format(
                    path.display().to_string(),
                    lineno,
                    format!("bad category id {:?}", fields[2]),
                )
            })?;
            vocab.push(fields[0], modality, category).map_err(|e| {
                Error::format(path.display().to_string(), lineno, e.to_string())
            })?;
        }
        Ok(vocab)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in self.icd.iter().chain(self.atc.iter()) {
            out.push_str(&format!("{}\t{}\t{}\n", e.code, e.modality, e.category));
        }
        out
    }

    pub fn lookup(&self, code: &str) -> Option<(Modality, usize)> {
        self.index.get(code).copied()
    }

    pub fn entry(&self, modality: Modality, id: usize) -> &VocabEntry {
        match modality {
            Modality::Icd => &self.icd[id],
            Modality::Atc => &self.atc[id],
        }
    }

    pub fn code(&self, modality: Modality, id: usize) -> &str {
        &self.entry(modality, id).code
    }

    pub fn len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Icd => self.icd.len(),
            Modality::Atc => self.atc.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.icd.is_empty() && self.atc.is_empty()
    }

    pub fn entries(&self, modality: Modality) -> &[VocabEntry] {
        match modality {
            Modality::Icd => &self.icd,
            Modality::Atc => &self.atc,
        }
    }
}

/// One patient's collapsed EHR history: sparse per-modality code counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientDocument {
    pub patient_id: String,
    pub icd: BTreeMap<usize, u32>,
    pub atc: BTreeMap<usize, u32>,
}

impl PatientDocument {
    pub fn new(patient_id: impl Into<String>) -> Self {
        PatientDocument {
            patient_id: patient_id.into(),
            icd: BTreeMap::new(),
            atc: BTreeMap::new(),
        }
    }

    pub fn counts(&self, modality: Modality) -> &BTreeMap<usize, u32> {
        match modality {
            Modality::Icd => &self.icd,
            Modality::Atc => &self.atc,
        }
    }

    pub fn counts_mut(&mut self, modality: Modality) -> &mut BTreeMap<usize, u32> {
        match modality {
            Modality::Icd => &mut self.icd,
            Modality::Atc => &mut self.atc,
        }
    }

    pub fn add(&mut self, modality: Modality, id: usize, count: u32) {
        if count == 0 {
            return;
        }
        *self.counts_mut(modality).entry(id).or_insert(0) += count;
    }

    /// Token total of one modality.
    pub fn token_total(&self, modality: Modality) -> u64 {
        self.counts(modality).values().map(|&c| c as u64).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.token_total(Modality::Icd) + self.token_total(Modality::Atc)
    }

    /// Count-expanded token list, deterministic order (modality, id, repeats).
    pub fn expand_tokens(&self) -> Vec<(Modality, usize)> {
        let mut tokens = Vec::with_capacity(self.total_tokens() as usize);
        for modality in [Modality::Icd, Modality::Atc] {
            for (&id, &count) in self.counts(modality) {
                for _ in 0..count {
                    tokens.push((modality, id));
                }
            }
        }
        tokens
    }
}

/// Disjoint train/valid/test patient-id partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusSplit {
    /// Select the documents named by `ids`, in `ids` order.
    pub fn select<'a>(docs: &'a [PatientDocument], ids: &[String]) -> Vec<&'a PatientDocument> {
        let by_id: HashMap<&str, &PatientDocument> =
            docs.iter().map(|d| (d.patient_id.as_str(), d)).collect();
        ids.iter().map(|id| by_id[id.as_str()]).collect()
    }
}

/// Load a corpus file, aggregating duplicate (patient, code) lines.
///
/// Documents are returned in order of first appearance of each patient id.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<PatientDocument>> {
    let text = util::read_to_string(path)?;
    parse_corpus(&text, vocab, &path.display().to_string())
}

pub fn parse_corpus(text: &str, vocab: &Vocabulary, origin: &str) -> Result<Vec<PatientDocument>> {
    let mut docs: Vec<PatientDocument> = Vec::new();
    let mut by_patient: HashMap<String, usize> = HashMap::new();
    let mut lines = text.lines().enumerate();

    match lines.next() {
        None => return Ok(docs),
        Some((_, header)) => {
            if header != "patient\tcode\tcount" {
                return Err(Error::format(
                    origin,
                    1,
                    format!("expected header \"patient\\tcode\\tcount\", got {header:?}"),
                ));
            }
        }
    }

    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                origin,
                lineno,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let (patient, code, count_str) = (fields[0], fields[1], fields[2]);
        let count: i64 = count_str.trim().parse().map_err(|_| {
            Error::format(origin, lineno, format!("bad count {count_str:?}"))
        })?;
        if count <= 0 {
            return Err(Error::format(
                origin,
                lineno,
                format!("count must be a positive integer, got {count}"),
            ));
        }
        let (modality, id) = vocab.lookup(code).ok_or_else(|| {
            Error::format(origin, lineno, format!("unknown code {code:?}"))
        })?;
        let idx = *by_patient.entry(patient.to_string()).or_insert_with(|| {
            docs.push(PatientDocument::new(patient));
            docs.len() - 1
        });
        docs[idx].add(modality, id, count as u32);
    }
    Ok(docs)
}

pub fn corpus_to_tsv(docs: &[PatientDocument], vocab: &Vocabulary) -> String {
    let mut out = String::from("patient\tcode\tcount\n");
    for doc in docs {
        for modality in [Modality::Icd, Modality::Atc] {
            for (&id, &count) in doc.counts(modality) {
                out.push_str(&format!(
                    "{}\t{}\t{}\n",
                    doc.patient_id,
                    vocab.code(modality, id),
                    count
                ));
            }
        }
    }
    out
}

/// Deterministically partition patient ids by the given ratio.
pub fn split_corpus(
    docs: &[PatientDocument],
    ratio: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit> {
    let (r_train, r_valid, r_test) = ratio;
    if r_train <= 0.0 || r_valid <= 0.0 || r_test <= 0.0 {
        return Err(Error::Invalid("split ratios must be positive".into()));
    }
    if ((r_train + r_valid + r_test) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios must sum to 1, got {}",
            r_train + r_valid + r_test
        )));
    }
    let n = docs.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 patients to split, got {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = util::derived_rng(seed, "corpus-split");
    order.shuffle(&mut rng);

    let n_train = (r_train * n as f64).round() as usize;
    let n_valid = ((r_valid * n as f64).round() as usize).min(n - n_train);
    let take = |slice: &[usize]| -> Vec<String> {
        slice.iter().map(|&i| docs[i].patient_id.clone()).collect()
    };
    Ok(CorpusSplit {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}

pub fn split_to_tsv(split: &CorpusSplit) -> String {
    let mut out = String::from("patient\tsubset\n");
    for (subset, ids) in [
        ("train", &split.train),
        ("valid", &split.valid),
        ("test", &split.test),
    ] {
        for id in ids {
            out.push_str(&format!("{id}\t{subset}\n"));
        }
    }
    out
}

pub fn load_split(path: &Path) -> Result<CorpusSplit> {
    let text = util::read_to_string(path)?;
    parse_split(&text, &path.display().to_string())
}

pub fn parse_split(text: &str, origin: &str) -> Result<CorpusSplit> {
    let mut split = CorpusSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut lines = text.lines().enumerate();

    match lines.next() {
        None => return Err(Error::format(origin, 1, "empty split file")),
        Some((_, header)) => {
            if header != "patient\tsubset" {
                return Err(Error::format(
                    origin,
                    1,
                    format!("expected header \"patient\\tsubset\", got {header:?}"),
                ));
            }
        }
    }

    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::format(
                origin,
                lineno,
                format!("expected 2 tab-separated fields, got {}", fields.len()),
            ));
        }
        let (patient, subset) = (fields[0], fields[1]);
        if let Some(&first) = seen.get(patient) {
            return Err(Error::format(
                origin,
                lineno,
                format!("patient {patient:?} already assigned on line {first}"),
            ));
        }
        seen.insert(patient.to_string(), lineno);
        let bucket = match subset {
            "train" => &mut split.train,
            "valid" => &mut split.valid,
            "test" => &mut split.test,
            other => {
                return Err(Error::format(
                    origin,
                    lineno,
                    format!("subset must be train, valid, or test, got {other:?}"),
                ));
            }
        };
        bucket.push(patient.to_string());
    }
    Ok(split)
}

/// Randomly split a document's tokens into two near-equal halves.
///
/// The two halves differ in size by at most one token and their counts sum
/// back to the original document exactly.
pub fn halve_document(
    doc: &PatientDocument,
    seed: u64,
) -> Result<(PatientDocument, PatientDocument)> {
    let total = doc.total_tokens();
    if total < 2 {
        return Err(Error::Invalid(format!(
            "cannot halve document {:?} with {total} token(s)",
            doc.patient_id
        )));
    }
    let mut tokens = doc.expand_tokens();
    let mut rng = util::derived_rng(seed, &format!("halve:{}", doc.patient_id));
    tokens.shuffle(&mut rng);

    let cut = tokens.len().div_ceil(2);
    let mut first = PatientDocument::new(doc.patient_id.clone());
    let mut second = PatientDocument::new(doc.patient_id.clone());
    for (i, (modality, id)) in tokens.into_iter().enumerate() {
        let half = if i < cut { &mut first } else { &mut second };
        half.add(modality, id, 1);
    }
    Ok((first, second))
}

/// Per-modality normalized bag-of-words vectors.
///
/// A modality with zero tokens yields the all-zeros vector.
pub fn normalize_bow(
    doc: &PatientDocument,
    v_icd: usize,
    v_atc: usize,
) -> (Array1<f64>, Array1<f64>) {
    let mut icd = Array1::zeros(v_icd);
    let mut atc = Array1::zeros(v_atc);
    let n_icd = doc.token_total(Modality::Icd) as f64;
    let n_atc = doc.token_total(Modality::Atc) as f64;
    if n_icd > 0.0 {
        for (&id, &count) in &doc.icd {
            icd[id] = count as f64 / n_icd;
        }
    }
    if n_atc > 0.0 {
        for (&id, &count) in &doc.atc {
            atc[id] = count as f64 / n_atc;
        }
    }
    (icd, atc)
}

/// Draw `n` categorical samples from `probs` via cumulative inversion.
pub fn sample_categorical(
    probs: &Array1<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> BTreeMap<usize, u32> {
    let mut cum = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs.iter() {
        acc += p;
        cum.push(acc);
    }
    let total = acc;
    let mut counts = BTreeMap::new();
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * total;
        let idx = match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(cum.len() - 1),
        };
        *counts.entry(idx).or_insert(0) += 1;
    }
    counts
}
