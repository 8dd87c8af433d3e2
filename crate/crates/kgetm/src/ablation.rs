//! Multi-seed ablation harness: trains every model variant under a shared
//! base configuration and aggregates the evaluation metrics into one
//! comparative table.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::baselines::{self, KnnConfig};
use crate::corpus::{CorpusSplit, Modality, PatientDocument, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, MetricsReport};
use crate::graph::{augment_ancestors, KnowledgeGraph};
use crate::node2vec::{self, WalkConfig};
use crate::trainer::{self, TrainConfig, Variant};
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    /// Shared training configuration; variant and seed are overridden per
    /// run.
    pub base: TrainConfig,
    /// Node-embedding pretraining configuration; seed overridden per run.
    pub walk: WalkConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Train one seed's variants on rayon worker threads instead of
    /// sequentially; the report is identical either way.
    pub parallel: bool,
}

impl AblationConfig {
    pub fn new(base: TrainConfig, walk: WalkConfig, eval: EvalConfig, seeds: Vec<u64>) -> Self {
        AblationConfig {
            base,
            walk,
            eval,
            seeds,
            variants: Variant::all().to_vec(),
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("ablation needs at least one variant".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    /// Canonical training configuration the run used.
    pub config: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationCell {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub cells: BTreeMap<String, AblationCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

fn mean_sd(values: &[f64]) -> AblationCell {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    AblationCell { mean, sd }
}

fn scalar_metrics(m: &MetricsReport) -> Vec<(String, f64)> {
    let mut out = vec![
        ("completion_nll".to_string(), m.completion_nll),
        ("tc_icd".to_string(), m.tc_icd),
        ("td_icd".to_string(), m.td_icd),
        ("tq_icd".to_string(), m.tq_icd),
        ("tc_atc".to_string(), m.tc_atc),
        ("td_atc".to_string(), m.td_atc),
        ("tq_atc".to_string(), m.tq_atc),
        ("tq_average".to_string(), m.tq_average),
        ("prec_at_k".to_string(), m.prec_at_k),
        ("recall_at_k".to_string(), m.recall_at_k),
        ("f1_at_k".to_string(), m.f1_at_k),
    ];
    for (bin, v) in &m.binned_recall {
        out.push((format!("binned_recall.{bin}"), *v));
    }
    out
}

/// Canonical column order for the comparative table; bins come last in
/// frequency order.
pub fn metric_columns(rows: &[AblationRow]) -> Vec<String> {
    let mut cols = vec![
        "completion_nll".to_string(),
        "tc_icd".to_string(),
        "td_icd".to_string(),
        "tq_icd".to_string(),
        "tc_atc".to_string(),
        "td_atc".to_string(),
        "tq_atc".to_string(),
        "tq_average".to_string(),
        "prec_at_k".to_string(),
        "recall_at_k".to_string(),
        "f1_at_k".to_string(),
    ];
    let mut bins = std::collections::BTreeSet::new();
    for row in rows {
        for key in row.cells.keys() {
            if key.starts_with("binned_recall.") {
                bins.insert(key.clone());
            }
        }
    }
    cols.extend(bins);
    cols
}

/// Train and evaluate every requested variant for every seed.
///
/// `graph` must be the unaugmented knowledge graph; the harness derives
/// the augmented version and pretrains node embeddings on whichever graph
/// each variant consumes.
pub fn run_ablation_suite(
    docs: &[PatientDocument],
    split: &CorpusSplit,
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    cfg.validate()?;
    if graph.augmented {
        return Err(Error::Config(
            "ablation expects the unaugmented knowledge graph".into(),
        ));
    }
    let aug = augment_ancestors(graph)?;

    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut walk = cfg.walk.clone();
        walk.seed = seed;
        let needs_aug_rho0 = cfg
            .variants
            .iter()
            .any(|v| matches!(v, Variant::Full | Variant::FixedEmbedding));
        let rho0_aug = if needs_aug_rho0 {
            Some(node2vec::pretrain(&aug, &walk)?)
        } else {
            None
        };
        let rho0_unaug = if cfg.variants.contains(&Variant::NoAug) {
            Some(node2vec::pretrain(graph, &walk)?)
        } else {
            None
        };

        let run_one = |variant: Variant| -> Result<AblationRun> {
            let mut tc = cfg.base.clone();
            tc.variant = variant;
            tc.seed = seed;
            let (g, rho0) = match variant {
                Variant::Full | Variant::FixedEmbedding => {
                    (Some(&aug), rho0_aug.as_ref())
                }
                Variant::NoInit => (Some(&aug), None),
                Variant::NoAug => (Some(graph), rho0_unaug.as_ref()),
                Variant::FreeEmbedding => (None, None),
            };
            let out = trainer::train(docs, split, vocab, g, rho0, &tc, None, None)
                .map_err(|e| {
                    Error::Train(format!("variant {variant} (seed {seed}): {e}"))
                })?;
            let metrics = eval::evaluate(docs, split, vocab, &out.best, None, &cfg.eval)
                .map_err(|e| {
                    Error::Train(format!("variant {variant} (seed {seed}) evaluation: {e}"))
                })?;
            Ok(AblationRun {
                variant,
                seed,
                config: tc.canonical_string(),
                metrics,
            })
        };
        let seed_runs: Vec<AblationRun> = if cfg.parallel {
            cfg.variants.par_iter().map(|&v| run_one(v)).collect::<Result<_>>()?
        } else {
            cfg.variants.iter().map(|&v| run_one(v)).collect::<Result<_>>()?
        };
        runs.extend(seed_runs);
    }

    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        let variant_runs: Vec<&AblationRun> =
            runs.iter().filter(|r| r.variant == variant).collect();
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in &variant_runs {
            for (key, value) in scalar_metrics(&run.metrics) {
                by_metric.entry(key).or_default().push(value);
            }
        }
        let cells = by_metric
            .into_iter()
            .map(|(k, vs)| (k, mean_sd(&vs)))
            .collect();
        rows.push(AblationRow { variant, cells });
    }
    Ok(AblationReport { rows, runs })
}

/// Tab-separated comparative table: one row per variant, mean and sd
/// columns per metric.
pub fn render_ablation_table(report: &AblationReport) -> String {
    let cols = metric_columns(&report.rows);
    let mut s = String::from("variant");
    for c in &cols {
        s.push_str(&format!("\t{c}_mean\t{c}_sd"));
    }
    s.push('\n');
    for row in &report.rows {
        s.push_str(row.variant.as_str());
        for c in &cols {
            match row.cells.get(c) {
                Some(cell) => s.push_str(&format!(
                    "\t{}\t{}",
                    util::fmt_f64(cell.mean),
                    util::fmt_f64(cell.sd)
                )),
                None => s.push_str("\t\t"),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub name: String,
    /// Hyperparameters the row used, empty when there are none.
    pub selected: String,
    pub cells: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    pub rows: Vec<BaselineRow>,
}

fn select_docs<'a>(
    docs: &'a [PatientDocument],
    ids: &[String],
    subset: &str,
) -> Result<Vec<&'a PatientDocument>> {
    let by_id: BTreeMap<&str, &PatientDocument> =
        docs.iter().map(|d| (d.patient_id.as_str(), d)).collect();
    ids.iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                Error::Invalid(format!("{subset} split names unknown patient {id:?}"))
            })
        })
        .collect()
}

fn imputation_cells(
    ranked: &[Vec<usize>],
    test: &[&PatientDocument],
    freqs: &[u64],
    eval_cfg: &EvalConfig,
) -> Result<BTreeMap<String, f64>> {
    let topk = eval::patientwise_topk(ranked, test, eval_cfg.patient_k)?;
    let binned =
        eval::drugwise_binned_recall(ranked, test, freqs, eval_cfg.n_bins, eval_cfg.drug_k)?;
    let mut cells = BTreeMap::new();
    cells.insert("prec_at_k".to_string(), topk.precision);
    cells.insert("recall_at_k".to_string(), topk.recall);
    cells.insert("f1_at_k".to_string(), topk.f1);
    for (bin, v) in binned {
        cells.insert(format!("binned_recall.{bin}"), v);
    }
    Ok(cells)
}

/// Score the non-model imputation baselines on the test split.
///
/// The KNN row uses `knn.selected` when present and otherwise picks the
/// neighborhood size and metric by validation-split grid search.
pub fn run_baseline_comparison(
    docs: &[PatientDocument],
    split: &CorpusSplit,
    vocab: &Vocabulary,
    knn: &KnnConfig,
    eval_cfg: &EvalConfig,
) -> Result<BaselineReport> {
    knn.validate()?;
    let train = select_docs(docs, &split.train, "train")?;
    let valid = select_docs(docs, &split.valid, "valid")?;
    let test = select_docs(docs, &split.test, "test")?;
    let v_icd = vocab.len(Modality::Icd);
    let v_atc = vocab.len(Modality::Atc);
    let freqs = eval::atc_frequencies(&train, v_atc);

    let freq_order: Vec<usize> = baselines::frequency_impute(&train, v_atc)?
        .into_iter()
        .map(|(id, _)| id)
        .collect();
    let freq_ranked: Vec<Vec<usize>> = vec![freq_order; test.len()];
    let freq_row = BaselineRow {
        name: "frequency".to_string(),
        selected: String::new(),
        cells: imputation_cells(&freq_ranked, &test, &freqs, eval_cfg)?,
    };

    let (k, metric) = match knn.selected {
        Some(choice) => choice,
        None => baselines::select_knn(&valid, &train, knn, v_icd, v_atc)?,
    };
    let knn_ranked: Vec<Vec<usize>> = test
        .iter()
        .map(|d| {
            baselines::knn_impute(d, &train, k, metric, v_icd, v_atc)
                .map(|r| r.into_iter().map(|(id, _)| id).collect())
        })
        .collect::<Result<_>>()?;
    let knn_row = BaselineRow {
        name: "knn".to_string(),
        selected: format!("k={k} metric={metric}"),
        cells: imputation_cells(&knn_ranked, &test, &freqs, eval_cfg)?,
    };

    Ok(BaselineReport {
        rows: vec![freq_row, knn_row],
    })
}

/// Tab-separated baseline table with the same metric-naming scheme as the
/// ablation table.
pub fn render_baseline_table(report: &BaselineReport) -> String {
    let mut cols = vec![
        "prec_at_k".to_string(),
        "recall_at_k".to_string(),
        "f1_at_k".to_string(),
    ];
    let mut bins = std::collections::BTreeSet::new();
    for row in &report.rows {
        for key in row.cells.keys() {
            if key.starts_with("binned_recall.") {
                bins.insert(key.clone());
            }
        }
    }
    cols.extend(bins);

    let mut s = String::from("baseline\tselected");
    for c in &cols {
        s.push_str(&format!("\t{c}"));
    }
    s.push('\n');
    for row in &report.rows {
        s.push_str(&format!("{}\t{}", row.name, row.selected));
        for c in &cols {
            match row.cells.get(c) {
                Some(v) => s.push_str(&format!("\t{}", util::fmt_f64(*v))),
                None => s.push('\t'),
            }
        }
        s.push('\n');
    }
    s
}
