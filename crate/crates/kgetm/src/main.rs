//! Command-line pipeline: synthetic data, graph building, embedding
//! pretraining, model training, evaluation, imputation, and export.
//!
//! Every subcommand reads an optional key-value config file plus `--set`
//! overrides, writes its outputs atomically under `--out`, and drops the
//! fully resolved configuration next to them as `config.resolved`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kgetm::ablation::{self, AblationConfig};
use kgetm::config::RunConfig;
use kgetm::corpus::{self, CorpusSplit, Modality, PatientDocument, Vocabulary};
use kgetm::error::Error;
use kgetm::eval::{self, MetricsReport};
use kgetm::graph::{self, KnowledgeGraph};
use kgetm::node2vec;
use kgetm::synthetic;
use kgetm::trainer::{self, Checkpoint, TrainLogRow, Variant};
use kgetm::util;
use kgetm::Result;

use ndarray::Array2;

#[derive(Parser)]
#[command(
    name = "kgetm",
    version,
    about = "Knowledge-graph embedded topic model pipeline"
)]
struct Cli {
    /// Key-value configuration file applied before --set overrides.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Single KEY=VALUE override, repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override every stage seed (train, walk, eval, synth, split) at once.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Force single-threaded execution and timing-free logs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its taxonomy and ground truth.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build the knowledge graph; export edge lists and statistics.
    BuildGraph {
        #[arg(long, value_name = "FILE")]
        hierarchy: PathBuf,
        #[arg(long, value_name = "FILE")]
        cross_links: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Pretrain node embeddings with biased random walks.
    Pretrain {
        #[arg(long, value_name = "FILE")]
        hierarchy: PathBuf,
        #[arg(long, value_name = "FILE")]
        cross_links: PathBuf,
        /// Walk the unaugmented graph instead of the ancestor-augmented one.
        #[arg(long)]
        unaugmented: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the topic model and write checkpoints plus a log.
    Train {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        /// Patient split file; derived from config ratios when omitted.
        #[arg(long, value_name = "FILE")]
        split: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        hierarchy: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        cross_links: Option<PathBuf>,
        /// Pretrained node embeddings from the pretrain subcommand.
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        #[arg(long, value_name = "FILE")]
        split: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// With --cross-links, enables the distance-profile section.
        #[arg(long, value_name = "FILE")]
        hierarchy: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        cross_links: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Rank ATC codes for test patients from their ICD history.
    Impute {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        #[arg(long, value_name = "FILE")]
        split: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// With --cross-links, also writes distance-profile plot data.
        #[arg(long, value_name = "FILE")]
        hierarchy: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        cross_links: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Export labeled embeddings and per-topic top codes for plotting.
    Export {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train every model variant per seed and score the imputation
    /// baselines on one corpus.
    Ablation {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        vocab: PathBuf,
        #[arg(long, value_name = "FILE")]
        split: PathBuf,
        #[arg(long, value_name = "FILE")]
        hierarchy: PathBuf,
        #[arg(long, value_name = "FILE")]
        cross_links: PathBuf,
        /// Train one seed's variants on worker threads.
        #[arg(long)]
        parallel_variants: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Malformed or missing input exits 2; runtime failures exit 1.
fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Config(_)
        | Error::Graph(_)
        | Error::Checkpoint(_)
        | Error::Invalid(_) => ExitCode::from(2),
        Error::Shape(_) | Error::NonFinite(_) | Error::Train(_) => ExitCode::FAILURE,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for setting in &cli.set {
        cfg.apply_override(setting)?;
    }
    if let Some(seed) = cli.seed {
        cfg.override_seeds(seed);
    }
    cfg.validate()?;

    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, &out),
        Command::BuildGraph {
            hierarchy,
            cross_links,
            out,
        } => cmd_build_graph(&cfg, &hierarchy, &cross_links, &out),
        Command::Pretrain {
            hierarchy,
            cross_links,
            unaugmented,
            out,
        } => cmd_pretrain(&cfg, &hierarchy, &cross_links, unaugmented, &out),
        Command::Train {
            corpus,
            vocab,
            split,
            hierarchy,
            cross_links,
            embeddings,
            resume,
            out,
        } => cmd_train(
            &cfg,
            &corpus,
            &vocab,
            split.as_deref(),
            hierarchy.as_deref(),
            cross_links.as_deref(),
            embeddings.as_deref(),
            resume.as_deref(),
            &out,
            cli.deterministic,
        ),
        Command::Eval {
            corpus,
            vocab,
            split,
            checkpoint,
            hierarchy,
            cross_links,
            out,
        } => cmd_eval(
            &cfg,
            &corpus,
            &vocab,
            &split,
            &checkpoint,
            hierarchy.as_deref(),
            cross_links.as_deref(),
            &out,
        ),
        Command::Impute {
            corpus,
            vocab,
            split,
            checkpoint,
            hierarchy,
            cross_links,
            out,
        } => cmd_impute(
            &cfg,
            &corpus,
            &vocab,
            &split,
            &checkpoint,
            hierarchy.as_deref(),
            cross_links.as_deref(),
            &out,
        ),
        Command::Export {
            checkpoint,
            vocab,
            out,
        } => cmd_export(&cfg, &checkpoint, &vocab, &out),
        Command::Ablation {
            corpus,
            vocab,
            split,
            hierarchy,
            cross_links,
            parallel_variants,
            out,
        } => cmd_ablation(
            &cfg,
            &corpus,
            &vocab,
            &split,
            &hierarchy,
            &cross_links,
            parallel_variants,
            &out,
        ),
    }
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    util::atomic_write(path, content.as_bytes())
}

fn write_sidecar(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_text(&out.join("config.resolved"), &cfg.resolved_string())
}

fn load_graph(hierarchy: &Path, cross_links: &Path) -> Result<KnowledgeGraph> {
    let (icd, atc) = graph::load_hierarchy(hierarchy)?;
    let links = graph::load_cross_links(cross_links)?;
    graph::build_graph(&icd, &atc, &links)
}

fn load_corpus_inputs(
    corpus_path: &Path,
    vocab_path: &Path,
) -> Result<(Vec<PatientDocument>, Vocabulary)> {
    let vocab = Vocabulary::from_file(vocab_path)?;
    let docs = corpus::load_corpus(corpus_path, &vocab)?;
    Ok((docs, vocab))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let tax = synthetic::build_taxonomy(&cfg.synth)?;
    let g = graph::build_graph(&tax.icd_hier, &tax.atc_hier, &tax.cross_links)?;
    let aug = graph::augment_ancestors(&g)?;
    let (docs, truth) =
        synthetic::generate_synthetic_corpus(&cfg.synth, &aug, &tax.vocab, cfg.synth_seed)?;
    let split = corpus::split_corpus(&docs, cfg.split_ratio, cfg.split_seed)?;

    write_text(&out.join("vocab.tsv"), &tax.vocab.to_tsv())?;
    write_text(
        &out.join("hierarchy.tsv"),
        &graph::hierarchy_to_tsv(&[&tax.icd_hier, &tax.atc_hier]),
    )?;
    write_text(
        &out.join("cross_links.tsv"),
        &graph::cross_links_to_tsv(&tax.cross_links),
    )?;
    write_text(&out.join("corpus.tsv"), &corpus::corpus_to_tsv(&docs, &tax.vocab))?;
    write_text(&out.join("split.tsv"), &corpus::split_to_tsv(&split))?;
    write_text(
        &out.join("truth_beta_icd.tsv"),
        &synthetic::matrix_to_tsv(&truth.beta_icd),
    )?;
    write_text(
        &out.join("truth_beta_atc.tsv"),
        &synthetic::matrix_to_tsv(&truth.beta_atc),
    )?;
    write_text(&out.join("truth_theta.tsv"), &synthetic::matrix_to_tsv(&truth.theta))?;
    write_sidecar(cfg, out)?;
    println!(
        "synth: {} patients, {} ICD + {} ATC codes -> {}",
        docs.len(),
        cfg.synth.v_icd(),
        cfg.synth.v_atc(),
        out.display()
    );
    Ok(())
}

fn cmd_build_graph(
    cfg: &RunConfig,
    hierarchy: &Path,
    cross_links: &Path,
    out: &Path,
) -> Result<()> {
    let g = load_graph(hierarchy, cross_links)?;
    let aug = graph::augment_ancestors(&g)?;
    write_text(&out.join("graph.tsv"), &g.to_edge_list())?;
    write_text(&out.join("graph_augmented.tsv"), &aug.to_edge_list())?;
    let stats = format!(
        "== unaugmented ==\n{}\n== augmented ==\n{}",
        g.stats_report(),
        aug.stats_report()
    );
    write_text(&out.join("graph_stats.txt"), &stats)?;
    write_sidecar(cfg, out)?;
    print!("{stats}");
    Ok(())
}

fn cmd_pretrain(
    cfg: &RunConfig,
    hierarchy: &Path,
    cross_links: &Path,
    unaugmented: bool,
    out: &Path,
) -> Result<()> {
    let g = load_graph(hierarchy, cross_links)?;
    let g = if unaugmented {
        g
    } else {
        graph::augment_ancestors(&g)?
    };
    let emb = node2vec::pretrain(&g, &cfg.walk)?;
    let codes: Vec<String> = g.nodes.iter().map(|n| n.code.clone()).collect();
    node2vec::write_embeddings(&out.join("embeddings.tsv"), &codes, &emb)?;
    write_sidecar(cfg, out)?;
    println!(
        "pretrain: {} nodes embedded in {} dimensions -> {}",
        codes.len(),
        cfg.walk.dim,
        out.display()
    );
    Ok(())
}

/// Load pretrained embeddings and check them against the graph's node set.
fn load_rho0(path: &Path, g: &KnowledgeGraph) -> Result<Array2<f64>> {
    let (codes, emb) = node2vec::read_embeddings(path)?;
    if codes.len() != g.nodes.len() {
        return Err(Error::Config(format!(
            "embeddings file covers {} nodes, graph has {}",
            codes.len(),
            g.nodes.len()
        )));
    }
    for (i, code) in codes.iter().enumerate() {
        if *code != g.nodes[i].code {
            return Err(Error::Config(format!(
                "embeddings row {i} is for {code:?}, graph node {i} is {:?}",
                g.nodes[i].code
            )));
        }
    }
    Ok(emb)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    corpus_path: &Path,
    vocab_path: &Path,
    split_path: Option<&Path>,
    hierarchy: Option<&Path>,
    cross_links: Option<&Path>,
    embeddings: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
    deterministic: bool,
) -> Result<()> {
    let (docs, vocab) = load_corpus_inputs(corpus_path, vocab_path)?;
    let (split, derived_split) = match split_path {
        Some(p) => (corpus::load_split(p)?, false),
        None => (
            corpus::split_corpus(&docs, cfg.split_ratio, cfg.split_seed)?,
            true,
        ),
    };

    let variant = cfg.train.variant;
    let g = if variant.uses_graph() {
        let (h, c) = match (hierarchy, cross_links) {
            (Some(h), Some(c)) => (h, c),
            _ => {
                return Err(Error::Config(format!(
                    "variant {variant} needs --hierarchy and --cross-links"
                )))
            }
        };
        let g = load_graph(h, c)?;
        Some(if variant.wants_augmented() {
            graph::augment_ancestors(&g)?
        } else {
            g
        })
    } else {
        None
    };

    let needs_rho0 = matches!(
        variant,
        Variant::Full | Variant::FixedEmbedding | Variant::NoAug
    );
    let rho0 = match (embeddings, &g) {
        (Some(path), Some(g)) => Some(load_rho0(path, g)?),
        (Some(_), None) => {
            return Err(Error::Config(format!(
                "variant {variant} does not take --embeddings"
            )))
        }
        (None, _) if needs_rho0 => {
            return Err(Error::Config(format!(
                "variant {variant} needs --embeddings from the pretrain step"
            )))
        }
        (None, _) => None,
    };

    let resume_ck = resume.map(Checkpoint::load).transpose()?;
    let outcome = trainer::train(
        &docs,
        &split,
        &vocab,
        g.as_ref(),
        rho0.as_ref(),
        &cfg.train,
        resume_ck,
        Some(out),
    )?;

    outcome.last.save(&out.join("model.ckpt"))?;
    outcome.best.save(&out.join("model_best.ckpt"))?;
    let log: Vec<TrainLogRow> = if deterministic {
        outcome
            .log
            .iter()
            .map(|r| TrainLogRow {
                wall_seconds: 0.0,
                ..r.clone()
            })
            .collect()
    } else {
        outcome.log.clone()
    };
    write_text(&out.join("train_log.tsv"), &trainer::render_log(&log))?;
    if derived_split {
        write_text(&out.join("split.tsv"), &corpus::split_to_tsv(&split))?;
    }
    write_sidecar(cfg, out)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "train: epoch {} train_elbo {} valid_nll {} -> {}",
            last.epoch,
            util::fmt_f64(last.train_elbo),
            util::fmt_f64(last.valid_nll),
            out.display()
        );
    }
    Ok(())
}

fn profile_graph(
    hierarchy: Option<&Path>,
    cross_links: Option<&Path>,
) -> Result<Option<KnowledgeGraph>> {
    match (hierarchy, cross_links) {
        (Some(h), Some(c)) => Ok(Some(load_graph(h, c)?)),
        (None, None) => Ok(None),
        _ => Err(Error::Config(
            "distance profiles need both --hierarchy and --cross-links".into(),
        )),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    corpus_path: &Path,
    vocab_path: &Path,
    split_path: &Path,
    checkpoint: &Path,
    hierarchy: Option<&Path>,
    cross_links: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (docs, vocab) = load_corpus_inputs(corpus_path, vocab_path)?;
    let split = corpus::load_split(split_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    let g = profile_graph(hierarchy, cross_links)?;
    let report = eval::evaluate(&docs, &split, &vocab, &ck, g.as_ref(), &cfg.eval)?;
    write_text(&out.join("metrics.txt"), &eval::render_report(&report))?;
    write_text(&out.join("metrics.tsv"), &eval::render_key_values(&report))?;
    write_sidecar(cfg, out)?;
    print_metric_summary(&report);
    Ok(())
}

fn print_metric_summary(r: &MetricsReport) {
    println!(
        "eval: completion_nll {} tq_average {} f1@{} {}",
        util::fmt_f64(r.completion_nll),
        util::fmt_f64(r.tq_average),
        r.patient_k,
        util::fmt_f64(r.f1_at_k)
    );
}

#[allow(clippy::too_many_arguments)]
fn cmd_impute(
    cfg: &RunConfig,
    corpus_path: &Path,
    vocab_path: &Path,
    split_path: &Path,
    checkpoint: &Path,
    hierarchy: Option<&Path>,
    cross_links: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (docs, vocab) = load_corpus_inputs(corpus_path, vocab_path)?;
    let split = corpus::load_split(split_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    let beta = ck.beta()?;
    let enc = ck.encoder()?;
    let g = profile_graph(hierarchy, cross_links)?;

    let test_docs = CorpusSplit::select(&docs, &split.test);
    if test_docs.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    let mut table = String::from("patient\trank\tatc_code\tscore\n");
    let mut imputed = Vec::new();
    for doc in &test_docs {
        if doc.token_total(Modality::Icd) == 0 {
            log::warn!(
                "patient {:?} has no ICD codes; skipping imputation",
                doc.patient_id
            );
            continue;
        }
        let scores = eval::impute_drugs(doc, &enc, &beta)?;
        for (rank, &(id, score)) in scores.iter().take(cfg.eval.drug_k).enumerate() {
            table.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                doc.patient_id,
                rank + 1,
                vocab.code(Modality::Atc, id),
                util::fmt_f64(score)
            ));
        }
        imputed.push((*doc, scores));
    }
    if imputed.is_empty() {
        return Err(Error::Invalid(
            "no test patient has ICD codes to impute from".into(),
        ));
    }
    write_text(&out.join("imputations.tsv"), &table)?;

    if let Some(g) = &g {
        let mut profiles = String::new();
        for (doc, scores) in imputed.iter().take(cfg.eval.profile_patients) {
            let p = eval::distance_profile(scores, doc, g, &vocab, cfg.eval.top_m)?;
            profiles.push_str(&eval::render_distance_profile(&p));
        }
        write_text(&out.join("distance_profiles.tsv"), &profiles)?;
    }
    write_sidecar(cfg, out)?;
    println!(
        "impute: ranked drugs for {} of {} test patients -> {}",
        imputed.len(),
        test_docs.len(),
        out.display()
    );
    Ok(())
}

fn cmd_export(cfg: &RunConfig, checkpoint: &Path, vocab_path: &Path, out: &Path) -> Result<()> {
    let vocab = Vocabulary::from_file(vocab_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (rho_icd, rho_atc) = ck.rho_final()?;
    for (modality, rho) in [(Modality::Icd, &rho_icd), (Modality::Atc, &rho_atc)] {
        if rho.ncols() != vocab.len(modality) {
            return Err(Error::Config(format!(
                "checkpoint has {} {} embeddings, vocabulary has {}",
                rho.ncols(),
                modality.as_str(),
                vocab.len(modality)
            )));
        }
    }

    let l = rho_icd.nrows();
    let mut rho_table = String::from("code\tmodality\tcategory");
    for j in 0..l {
        rho_table.push_str(&format!("\tv{}", j + 1));
    }
    rho_table.push('\n');
    for (modality, rho) in [(Modality::Icd, &rho_icd), (Modality::Atc, &rho_atc)] {
        for (i, entry) in vocab.entries(modality).iter().enumerate() {
            rho_table.push_str(&format!(
                "{}\t{}\t{}",
                entry.code,
                modality.as_str(),
                entry.category
            ));
            for j in 0..l {
                rho_table.push_str(&format!("\t{}", util::fmt_f64(rho[[j, i]])));
            }
            rho_table.push('\n');
        }
    }
    write_text(&out.join("rho.tsv"), &rho_table)?;

    let beta = ck.beta()?;
    let mut topics = String::from("modality\ttopic\trank\tcode\tprobability\n");
    for (modality, b) in [(Modality::Icd, &beta.beta_icd), (Modality::Atc, &beta.beta_atc)] {
        for k in 0..b.ncols() {
            let top = eval::top_codes(b, k, cfg.export_top_codes.min(b.nrows()));
            for (rank, &id) in top.iter().enumerate() {
                topics.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    modality.as_str(),
                    k,
                    rank + 1,
                    vocab.code(modality, id),
                    util::fmt_f64(b[[id, k]])
                ));
            }
        }
    }
    write_text(&out.join("topics.tsv"), &topics)?;
    write_sidecar(cfg, out)?;
    println!(
        "export: {} codes, {} topics -> {}",
        vocab.len(Modality::Icd) + vocab.len(Modality::Atc),
        beta.beta_icd.ncols(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablation(
    cfg: &RunConfig,
    corpus_path: &Path,
    vocab_path: &Path,
    split_path: &Path,
    hierarchy: &Path,
    cross_links: &Path,
    parallel_variants: bool,
    out: &Path,
) -> Result<()> {
    let (docs, vocab) = load_corpus_inputs(corpus_path, vocab_path)?;
    let split = corpus::load_split(split_path)?;
    let g = load_graph(hierarchy, cross_links)?;

    let mut acfg = AblationConfig::new(
        cfg.train.clone(),
        cfg.walk.clone(),
        cfg.eval,
        cfg.ablation_seeds.clone(),
    );
    acfg.parallel = cfg.ablation_parallel || parallel_variants;

    let report = ablation::run_ablation_suite(&docs, &split, &vocab, &g, &acfg)?;
    write_text(&out.join("ablation.tsv"), &ablation::render_ablation_table(&report))?;
    for run in &report.runs {
        let run_dir = out.join("runs").join(format!("{}-seed{}", run.variant, run.seed));
        write_text(&run_dir.join("config.resolved"), &run.config)?;
        write_text(
            &run_dir.join("metrics.tsv"),
            &eval::render_key_values(&run.metrics),
        )?;
    }

    let baselines =
        ablation::run_baseline_comparison(&docs, &split, &vocab, &cfg.knn, &cfg.eval)?;
    write_text(
        &out.join("baselines.tsv"),
        &ablation::render_baseline_table(&baselines),
    )?;
    write_sidecar(cfg, out)?;
    println!(
        "ablation: {} runs across {} variants, {} baselines -> {}",
        report.runs.len(),
        report.rows.len(),
        baselines.rows.len(),
        out.display()
    );
    Ok(())
}
