//! Drug-imputation baselines: training-frequency ranking and exact
//! K-nearest-neighbor imputation with validation-driven selection of the
//! neighbor count and distance metric.

use crate::corpus::{Modality, PatientDocument};
use crate::error::{Error, Result};
use crate::eval;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Manhattan,
    /// Euclidean (Minkowski with p = 2).
    Minkowski,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Manhattan => "manhattan",
            Metric::Minkowski => "minkowski",
        }
    }

    pub fn parse(s: &str) -> Result<Metric> {
        match s {
            "manhattan" => Ok(Metric::Manhattan),
            "minkowski" => Ok(Metric::Minkowski),
            other => Err(Error::Config(format!("unknown distance metric {other:?}"))),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::Minkowski => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnConfig {
    pub k_grid: Vec<usize>,
    pub metric_grid: Vec<Metric>,
    pub selected: Option<(usize, Metric)>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k_grid: vec![100, 200, 500, 1000, 5000],
            metric_grid: vec![Metric::Manhattan, Metric::Minkowski],
            selected: None,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() || self.metric_grid.is_empty() {
            return Err(Error::Config("KNN grids must be non-empty".into()));
        }
        if self.k_grid.iter().any(|&k| k == 0) {
            return Err(Error::Config("neighbor counts must be positive".into()));
        }
        if let Some((k, m)) = self.selected {
            if !self.k_grid.contains(&k) || !self.metric_grid.contains(&m) {
                return Err(Error::Config(
                    "selected KNN hyperparameters are outside the grids".into(),
                ));
            }
        }
        Ok(())
    }
}

/// ATC codes ranked by total training count, descending with
/// ascending-id tie-break; the same list serves every test patient.
pub fn frequency_impute(train: &[&PatientDocument], v_atc: usize) -> Result<Vec<(usize, u64)>> {
    if train.is_empty() {
        return Err(Error::Invalid("frequency baseline needs training docs".into()));
    }
    let freqs = eval::atc_frequencies(train, v_atc);
    let mut ranked: Vec<(usize, u64)> = freqs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

fn icd_count_vector(doc: &PatientDocument, v_icd: usize) -> Vec<f64> {
    let mut v = vec![0.0; v_icd];
    for (&id, &c) in doc.counts(Modality::Icd) {
        v[id] = c as f64;
    }
    v
}

/// Rank ATC codes for one test patient as the mean of the k nearest
/// training patients' ATC count vectors. Distances are taken over ICD
/// counts only, so the prediction target never enters the neighbor
/// search.
pub fn knn_impute(
    test: &PatientDocument,
    train: &[&PatientDocument],
    k: usize,
    metric: Metric,
    v_icd: usize,
    v_atc: usize,
) -> Result<Vec<(usize, f64)>> {
    if train.is_empty() {
        return Err(Error::Invalid("KNN baseline needs training docs".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("KNN needs k >= 1".into()));
    }
    let k = if k > train.len() {
        log::warn!(
            "requested {k} neighbors from {} training docs; using all",
            train.len()
        );
        train.len()
    } else {
        k
    };
    let q = icd_count_vector(test, v_icd);
    let mut order: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, d)| (metric.distance(&q, &icd_count_vector(d, v_icd)), i))
        .collect();
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
    });
    let mut mean = vec![0.0; v_atc];
    for &(_, i) in order.iter().take(k) {
        for (&id, &c) in train[i].counts(Modality::Atc) {
            mean[id] += c as f64;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let mut ranked: Vec<(usize, f64)> = mean.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    Ok(ranked)
}

/// Grid-search (k, metric) maximizing f1@5 on the validation split. Ties
/// prefer the smaller k, then the earlier metric in the grid.
pub fn select_knn(
    valid: &[&PatientDocument],
    train: &[&PatientDocument],
    cfg: &KnnConfig,
    v_icd: usize,
    v_atc: usize,
) -> Result<(usize, Metric)> {
    cfg.validate()?;
    if valid.is_empty() {
        return Err(Error::Invalid("KNN selection needs validation docs".into()));
    }
    let mut ks = cfg.k_grid.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut best: Option<((usize, Metric), f64)> = None;
    for &k in &ks {
        for &metric in &cfg.metric_grid {
            let ranked: Vec<Vec<usize>> = valid
                .iter()
                .map(|d| {
                    knn_impute(d, train, k, metric, v_icd, v_atc)
                        .map(|r| r.into_iter().map(|(id, _)| id).collect())
                })
                .collect::<Result<_>>()?;
            let f1 = match eval::patientwise_topk(&ranked, valid, 5) {
                Ok(m) => m.f1,
                Err(_) => f64::NEG_INFINITY,
            };
            if best.is_none_or(|(_, b)| f1 > b) {
                best = Some(((k, metric), f1));
            }
        }
    }
    Ok(best.expect("non-empty grids").0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, icd: &[(usize, u32)], atc: &[(usize, u32)]) -> PatientDocument {
        let mut d = PatientDocument::new(id);
        for &(v, c) in icd {
            d.add(Modality::Icd, v, c);
        }
        for &(v, c) in atc {
            d.add(Modality::Atc, v, c);
        }
        d
    }

    #[test]
    fn frequency_ranking_breaks_ties_by_id() {
        // counts: code 0 -> 5, code 2 -> 3, code 1 -> 3
        let docs = vec![
            doc("p0", &[], &[(0, 3), (2, 3)]),
            doc("p1", &[], &[(0, 2), (1, 3)]),
        ];
        let refs: Vec<&PatientDocument> = docs.iter().collect();
        let ranked = frequency_impute(&refs, 4).unwrap();
        let ids: Vec<usize> = ranked.iter().map(|&(id, _)| id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(ranked[0].1, 5);
        assert_eq!(ranked[3].1, 0);
        assert!(frequency_impute(&[], 4).is_err());
    }

    #[test]
    fn frequency_single_code_corpus() {
        let docs = vec![doc("p0", &[], &[(0, 2)])];
        let refs: Vec<&PatientDocument> = docs.iter().collect();
        let ranked = frequency_impute(&refs, 1).unwrap();
        assert_eq!(ranked, vec![(0, 2)]);
    }

    #[test]
    fn frequency_matches_sort_oracle_and_patient_order() {
        let v = 20usize;
        let mut rng = crate::util::derived_rng(4, "freq-docs");
        let docs: Vec<PatientDocument> = (0..15)
            .map(|i| {
                let mut d = PatientDocument::new(&format!("p{i}"));
                for code in 0..v {
                    let c = rand::Rng::random_range(&mut rng, 0..4u32);
                    d.add(Modality::Atc, code, c);
                }
                d
            })
            .collect();
        let refs: Vec<&PatientDocument> = docs.iter().collect();
        let ranked = frequency_impute(&refs, v).unwrap();

        let mut counts = vec![0u64; v];
        for d in &docs {
            for (&id, &c) in d.counts(Modality::Atc) {
                counts[id] += c as u64;
            }
        }
        let mut oracle: Vec<usize> = (0..v).collect();
        oracle.sort_by_key(|&id| (std::cmp::Reverse(counts[id]), id));
        let ids: Vec<usize> = ranked.iter().map(|&(id, _)| id).collect();
        assert_eq!(ids, oracle);

        let mut shuffled: Vec<&PatientDocument> = refs.clone();
        shuffled.reverse();
        assert_eq!(frequency_impute(&shuffled, v).unwrap(), ranked);
    }

    #[test]
    fn knn_degenerate_k_equals_global_mean() {
        let docs = vec![
            doc("p0", &[(0, 1)], &[(0, 4), (1, 1)]),
            doc("p1", &[(1, 2)], &[(1, 3), (2, 2)]),
            doc("p2", &[(2, 3)], &[(0, 1), (2, 5)]),
        ];
        let refs: Vec<&PatientDocument> = docs.iter().collect();
        let test = doc("q", &[(0, 2)], &[]);
        let ranked = knn_impute(&test, &refs, 3, Metric::Manhattan, 3, 3).unwrap();
        // totals: code 0 -> 5, code 1 -> 4, code 2 -> 7
        let ids: Vec<usize> = ranked.iter().map(|&(id, _)| id).collect();
        assert_eq!(ids, vec![2, 0, 1]);
        assert!((ranked[0].1 - 7.0 / 3.0).abs() < 1e-12);

        // k beyond the corpus degrades to the same answer
        let over = knn_impute(&test, &refs, 50, Metric::Manhattan, 3, 3).unwrap();
        assert_eq!(over, ranked);
    }

    #[test]
    fn knn_single_identical_neighbor_dominates() {
        let docs = vec![
            doc("p0", &[(0, 5), (1, 2)], &[(3, 9), (0, 1)]),
            doc("p1", &[(2, 7)], &[(1, 8)]),
            doc("p2", &[(1, 1)], &[(2, 6)]),
        ];
        let refs: Vec<&PatientDocument> = docs.iter().collect();
        let test = doc("q", &[(0, 5), (1, 2)], &[]);
        for metric in [Metric::Manhattan, Metric::Minkowski] {
            let ranked = knn_impute(&test, &refs, 1, metric, 3, 4).unwrap();
            let ids: Vec<usize> = ranked.iter().map(|&(id, _)| id).collect();
            assert_eq!(ids, vec![3, 0, 1, 2], "metric {metric}");
        }
    }

    #[test]
    fn knn_matches_brute_force_under_both_metrics() {
        let (v_icd, v_atc) = (4usize, 5usize);
        let docs = vec![
            doc("p0", &[(0, 2), (1, 1)], &[(0, 1), (3, 2)]),
            doc("p1", &[(1, 3)], &[(1, 4)]),
            doc("p2", &[(2, 2), (3, 2)], &[(2, 2), (4, 1)]),
            doc("p3", &[(0, 1), (3, 1)], &[(0, 2), (1, 1)]),
            doc("p4", &[(2, 4)], &[(3, 3), (4, 2)]),
        ];
        let refs: Vec<&PatientDocument> = docs.iter().collect();
        let test = doc("q", &[(0, 1), (2, 2)], &[]);
        for metric in [Metric::Manhattan, Metric::Minkowski] {
            for k in 1..=5usize {
                let ranked = knn_impute(&test, &refs, k, metric, v_icd, v_atc).unwrap();

                let q = icd_count_vector(&test, v_icd);
                let mut dists: Vec<(f64, usize)> = refs
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let x = icd_count_vector(d, v_icd);
                        let dd = match metric {
                            Metric::Manhattan => q
                                .iter()
                                .zip(&x)
                                .map(|(a, b)| (a - b).abs())
                                .sum::<f64>(),
                            Metric::Minkowski => q
                                .iter()
                                .zip(&x)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt(),
                        };
                        (dd, i)
                    })
                    .collect();
                dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let mut mean = vec![0.0; v_atc];
                for &(_, i) in dists.iter().take(k) {
                    for (&id, &c) in refs[i].counts(Modality::Atc) {
                        mean[id] += c as f64 / k as f64;
                    }
                }
                let mut oracle: Vec<usize> = (0..v_atc).collect();
                oracle.sort_by(|&a, &b| {
                    mean[b].partial_cmp(&mean[a]).unwrap().then(a.cmp(&b))
                });
                let ids: Vec<usize> = ranked.iter().map(|&(id, _)| id).collect();
                assert_eq!(ids, oracle, "metric {metric} k {k}");
            }
        }
    }

    #[test]
    fn knn_manhattan_ignores_all_zero_coordinates() {
        let docs = vec![
            doc("p0", &[(0, 2)], &[(0, 3), (1, 1), (2, 1)]),
            doc("p1", &[(1, 4)], &[(1, 2), (2, 2)]),
            doc("p2", &[(0, 1), (1, 1)], &[(0, 1), (2, 4)]),
        ];
        let refs: Vec<&PatientDocument> = docs.iter().collect();
        let test = doc("q", &[(0, 2), (1, 1)], &[]);
        let narrow = knn_impute(&test, &refs, 2, Metric::Manhattan, 2, 3).unwrap();
        let padded = knn_impute(&test, &refs, 2, Metric::Manhattan, 10, 3).unwrap();
        assert_eq!(narrow, padded);
    }

    #[test]
    fn select_singleton_grids() {
        let train = vec![
            doc("t0", &[(0, 1)], &[(0, 1), (1, 1), (2, 1), (3, 1), (4, 1)]),
            doc("t1", &[(1, 1)], &[(5, 1), (6, 1)]),
        ];
        let valid = vec![doc(
            "v0",
            &[(0, 1)],
            &[(0, 1), (1, 1), (2, 1), (3, 1), (4, 1)],
        )];
        let train_refs: Vec<&PatientDocument> = train.iter().collect();
        let valid_refs: Vec<&PatientDocument> = valid.iter().collect();
        let cfg = KnnConfig {
            k_grid: vec![2],
            metric_grid: vec![Metric::Minkowski],
            selected: None,
        };
        let sel = select_knn(&valid_refs, &train_refs, &cfg, 2, 8).unwrap();
        assert_eq!(sel, (2, Metric::Minkowski));
    }

    #[test]
    fn select_prefers_planted_small_k() {
        let (v_icd, v_atc) = (3usize, 10usize);
        // one training patient mirrors the validation patient exactly;
        // the rest share no drugs and sit farther away in ICD space
        let mut train = vec![doc(
            "twin",
            &[(0, 5)],
            &[(0, 1), (1, 1), (2, 1), (3, 1), (4, 1)],
        )];
        for i in 0..6 {
            train.push(doc(
                &format!("junk{i}"),
                &[(1, 5), (2, 5)],
                &[(5, 9), (6, 9), (7, 9), (8, 9), (9, 9)],
            ));
        }
        let valid = vec![doc(
            "v0",
            &[(0, 5)],
            &[(0, 1), (1, 1), (2, 1), (3, 1), (4, 1)],
        )];
        let train_refs: Vec<&PatientDocument> = train.iter().collect();
        let valid_refs: Vec<&PatientDocument> = valid.iter().collect();
        let cfg = KnnConfig {
            k_grid: vec![1, 5],
            metric_grid: vec![Metric::Manhattan, Metric::Minkowski],
            selected: None,
        };
        let sel = select_knn(&valid_refs, &train_refs, &cfg, v_icd, v_atc).unwrap();
        assert_eq!(sel, (1, Metric::Manhattan));

        let again = select_knn(&valid_refs, &train_refs, &cfg, v_icd, v_atc).unwrap();
        assert_eq!(sel, again);
    }

    #[test]
    fn config_validation_rejects_bad_grids() {
        let empty = KnnConfig {
            k_grid: vec![],
            ..KnnConfig::default()
        };
        assert!(empty.validate().is_err());
        let zero = KnnConfig {
            k_grid: vec![0, 5],
            ..KnnConfig::default()
        };
        assert!(zero.validate().is_err());
        let outside = KnnConfig {
            selected: Some((7, Metric::Manhattan)),
            ..KnnConfig::default()
        };
        assert!(outside.validate().is_err());
        let good = KnnConfig {
            selected: Some((100, Metric::Minkowski)),
            ..KnnConfig::default()
        };
        good.validate().unwrap();
    }
}
