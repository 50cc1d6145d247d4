//! Evaluation of candidate generation and of attribute clustering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Clusters, Span};
use crate::error::{Error, Result};

/// Micro-averaged entity precision, recall and F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

/// Exact-boundary span matching, pooled over all products in `gold`.
pub fn entity_prf(predicted: &BTreeMap<String, Vec<Span>>, gold: &BTreeMap<String, Vec<Span>>) -> Result<Prf> {
    if let Some(id) = predicted.keys().find(|id| !gold.contains_key(*id)) {
        return Err(Error::UnknownProduct(id.clone()));
    }
    let (mut correct, mut n_pred, mut n_gold) = (0, 0, 0);
    for (id, g) in gold {
        let g: BTreeSet<Span> = g.iter().copied().collect();
        n_gold += g.len();
        if let Some(p) = predicted.get(id) {
            let p: BTreeSet<Span> = p.iter().copied().collect();
            n_pred += p.len();
            correct += p.intersection(&g).count();
        }
    }
    Ok(Prf::from_counts(correct, n_pred, n_gold))
}

/// Share of gold values that appear among the predicted values.
pub fn corpus_recall(predicted: &BTreeSet<String>, gold: &BTreeSet<String>) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("gold value set".into()));
    }
    Ok(gold.intersection(predicted).count() as f64 / gold.len() as f64)
}

/// Value to cluster id for the values placed in a non-noise cluster, per product type.
pub type Assignments = BTreeMap<String, BTreeMap<String, String>>;

/// Per product type gold value to attribute, first attribute wins.
fn gold_labels(gold: &BTreeMap<String, Vec<String>>) -> BTreeMap<&str, &str> {
    let mut out = BTreeMap::new();
    for (attribute, values) in gold {
        for v in values {
            out.entry(v.as_str()).or_insert(attribute.as_str());
        }
    }
    out
}

fn choose2(n: usize) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Contingency counts of one product type over its gold-labeled values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairCounts {
    pub n: usize,
    /// Pairs together in both clusterings.
    pub both: f64,
    /// Pairs together in the prediction.
    pub predicted: f64,
    /// Pairs together in the gold clustering.
    pub gold: f64,
    pub total: f64,
    pub nmi: f64,
}

/// Builds the contingency table for one type. Labeled values missing from
/// `predicted` become singleton clusters.
pub fn pair_counts(predicted: &BTreeMap<String, String>, gold: &BTreeMap<String, Vec<String>>) -> PairCounts {
    let labels = gold_labels(gold);
    let n = labels.len();
    let mut cells: HashMap<(Option<&str>, &str, usize), usize> = HashMap::new();
    let mut rows: HashMap<(Option<&str>, usize), usize> = HashMap::new();
    let mut cols: HashMap<&str, usize> = HashMap::new();
    for (i, (&value, &attribute)) in labels.iter().enumerate() {
        // unpredicted values get a private cluster keyed by their index
        let cluster = match predicted.get(value) {
            Some(c) => (Some(c.as_str()), 0),
            None => (None, i),
        };
        *cells.entry((cluster.0, attribute, cluster.1)).or_default() += 1;
        *rows.entry(cluster).or_default() += 1;
        *cols.entry(attribute).or_default() += 1;
    }
    let both = cells.values().map(|&c| choose2(c)).sum();
    let pred = rows.values().map(|&c| choose2(c)).sum();
    let gold_pairs = cols.values().map(|&c| choose2(c)).sum();

    let nf = n as f64;
    let entropy = |counts: &mut dyn Iterator<Item = usize>| -> f64 {
        counts
            .map(|c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_pred = entropy(&mut rows.values().copied());
    let h_gold = entropy(&mut cols.values().copied());
    let mut mi = 0.0;
    for (&(c, a, k), &count) in &cells {
        let nij = count as f64;
        let ai = rows[&(c, k)] as f64;
        let bj = cols[a] as f64;
        mi += nij / nf * (nf * nij / (ai * bj)).ln();
    }
    let denom = 0.5 * (h_pred + h_gold);
    let nmi = if denom <= 0.0 { 1.0 } else { (mi / denom).clamp(0.0, 1.0) };
    PairCounts {
        n,
        both,
        predicted: pred,
        gold: gold_pairs,
        total: choose2(n),
        nmi,
    }
}

impl PairCounts {
    pub fn ari(&self) -> f64 {
        let expected = self.predicted * self.gold / self.total;
        let max = 0.5 * (self.predicted + self.gold);
        if max - expected == 0.0 {
            // only reachable when both clusterings have the same pair structure
            1.0
        } else {
            (self.both - expected) / (max - expected)
        }
    }

    pub fn jaccard(&self) -> f64 {
        let union = self.predicted + self.gold - self.both;
        if union == 0.0 {
            1.0
        } else {
            self.both / union
        }
    }

    fn absorb(&mut self, other: &PairCounts) {
        self.n += other.n;
        self.both += other.both;
        self.predicted += other.predicted;
        self.gold += other.gold;
        self.total += other.total;
        self.nmi += other.nmi * other.total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub ari: f64,
    pub jaccard: f64,
    pub nmi: f64,
    pub n_labeled: usize,
}

/// ARI, pairwise Jaccard and NMI per product type, plus the pooled result
/// under the key `"*"`. Types with fewer than two labeled values are skipped.
pub fn clustering_quality_by_type(predicted: &Assignments, gold: &Clusters) -> Result<BTreeMap<String, ClusterQuality>> {
    let empty = BTreeMap::new();
    let mut pooled = PairCounts::default();
    let mut out = BTreeMap::new();
    for (t, g) in gold {
        let counts = pair_counts(predicted.get(t).unwrap_or(&empty), g);
        if counts.n < 2 {
            if counts.n == 1 {
                log::warn!("product type {t} has a single labeled value; clustering metrics skipped");
            }
            continue;
        }
        out.insert(
            t.clone(),
            ClusterQuality {
                ari: counts.ari(),
                jaccard: counts.jaccard(),
                nmi: counts.nmi,
                n_labeled: counts.n,
            },
        );
        pooled.absorb(&counts);
    }
    if out.is_empty() {
        return Err(Error::Undefined("no product type has two or more labeled values".into()));
    }
    let nmi = pooled.nmi / pooled.total;
    out.insert(
        "*".into(),
        ClusterQuality {
            ari: pooled.ari(),
            jaccard: pooled.jaccard(),
            nmi,
            n_labeled: pooled.n,
        },
    );
    Ok(out)
}

/// Pooled clustering quality over all product types.
pub fn clustering_quality(predicted: &Assignments, gold: &Clusters) -> Result<ClusterQuality> {
    Ok(clustering_quality_by_type(predicted, gold)?["*"])
}

/// Share of gold-labeled values placed in some non-noise cluster.
pub fn cluster_recall(predicted: &Assignments, gold: &Clusters) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for (t, g) in gold {
        let labels = gold_labels(g);
        n += labels.len();
        if let Some(p) = predicted.get(t) {
            hit += labels.keys().filter(|v| p.contains_key(**v)).count();
        }
    }
    if n == 0 {
        return Err(Error::Empty("gold clusters".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// One row of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "type")]
    pub product_type: String,
    pub metric: String,
    pub value: f64,
    pub n_labeled: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, product_type: &str, metric: &str, value: f64, n_labeled: usize) {
        self.rows.push(MetricRow {
            product_type: product_type.to_owned(),
            metric: metric.to_owned(),
            value,
            n_labeled,
        });
    }

    pub fn get(&self, product_type: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.product_type == product_type && r.metric == metric)
            .map(|r| r.value)
    }

    /// Clustering quality and recall rows, per type and pooled (`"*"`).
    pub fn clustering(predicted: &Assignments, gold: &Clusters) -> Result<Self> {
        let mut report = MetricsReport::default();
        for (t, q) in clustering_quality_by_type(predicted, gold)? {
            report.push(&t, "ari", q.ari, q.n_labeled);
            report.push(&t, "jaccard", q.jaccard, q.n_labeled);
            report.push(&t, "nmi", q.nmi, q.n_labeled);
        }
        for (t, g) in gold {
            let one: Clusters = [(t.clone(), g.clone())].into_iter().collect();
            if let Ok(r) = cluster_recall(predicted, &one) {
                report.push(t, "cluster_recall", r, gold_labels(g).len());
            }
        }
        let n = gold.values().map(|g| gold_labels(g).len()).sum();
        report.push("*", "cluster_recall", cluster_recall(predicted, gold)?, n);
        Ok(report)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>().map_err(csv_err)?;
        Ok(MetricsReport { rows })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gold(groups: &[(&str, &[&str])]) -> BTreeMap<String, Vec<String>> {
        groups
            .iter()
            .map(|(a, vs)| (a.to_string(), vs.iter().map(|v| v.to_string()).collect()))
            .collect()
    }

    fn assign(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(v, c)| (v.to_string(), c.to_string())).collect()
    }

    #[test]
    fn entity_examples() {
        let g: BTreeMap<String, Vec<Span>> = [(
            "p".to_string(),
            vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3), Span::new(3, 4)],
        )]
        .into_iter()
        .collect();
        let perfect = entity_prf(&g, &g).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));

        let p: BTreeMap<String, Vec<Span>> =
            [("p".to_string(), vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 4)])].into_iter().collect();
        let r = entity_prf(&p, &g).unwrap();
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-12);

        let none = entity_prf(&BTreeMap::new(), &g).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));

        let stray: BTreeMap<String, Vec<Span>> = [("q".to_string(), vec![])].into_iter().collect();
        assert!(matches!(entity_prf(&stray, &g), Err(Error::UnknownProduct(_))));
    }

    #[test]
    fn corpus_recall_examples() {
        let g: BTreeSet<String> = (0..50).map(|i| i.to_string()).collect();
        let p: BTreeSet<String> = (0..32).map(|i| i.to_string()).chain(["x".into()]).collect();
        assert!((corpus_recall(&p, &g).unwrap() - 0.64).abs() < 1e-12);
        assert_eq!(corpus_recall(&g, &g).unwrap(), 1.0);
        assert_eq!(corpus_recall(&BTreeSet::new(), &g).unwrap(), 0.0);
        assert!(corpus_recall(&g, &BTreeSet::new()).is_err());
    }

    #[test]
    fn crossed_pairs_example() {
        let g = gold(&[("A", &["a", "b"]), ("B", &["c", "d"])]);
        let p = assign(&[("a", "1"), ("c", "1"), ("b", "2"), ("d", "2")]);
        let c = pair_counts(&p, &g);
        assert_eq!(c.both, 0.0);
        assert!((c.ari() + 0.5).abs() < 1e-12);
        assert_eq!(c.jaccard(), 0.0);
    }

    #[test]
    fn identity_scores_one() {
        let g = gold(&[("A", &["a", "b", "e"]), ("B", &["c", "d"])]);
        let p = assign(&[("a", "x"), ("b", "x"), ("e", "x"), ("c", "y"), ("d", "y")]);
        let c = pair_counts(&p, &g);
        assert!((c.ari() - 1.0).abs() < 1e-12);
        assert!((c.jaccard() - 1.0).abs() < 1e-12);
        assert!((c.nmi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_values_are_singletons() {
        let g = gold(&[("A", &["a", "b"]), ("B", &["c", "d"])]);
        // nothing predicted: four singletons
        let c = pair_counts(&BTreeMap::new(), &g);
        assert_eq!(c.predicted, 0.0);
        let (ari, jac, nmi) = oracle::quality(&[0, 1, 2, 3], &[0, 0, 1, 1]);
        assert!((c.ari() - ari).abs() < 1e-12);
        assert!((c.jaccard() - jac).abs() < 1e-12);
        assert!((c.nmi - nmi).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        let values: Vec<String> = (0..40).map(|i| format!("v{i}")).collect();
        let gold: Clusters = [(
            "t".to_string(),
            [("A".to_string(), values.clone())].into_iter().collect(),
        )]
        .into_iter()
        .collect();
        let p: Assignments = [(
            "t".to_string(),
            values.iter().take(11).map(|v| (v.clone(), "c".to_string())).collect(),
        )]
        .into_iter()
        .collect();
        assert!((cluster_recall(&p, &gold).unwrap() - 0.275).abs() < 1e-12);
        assert_eq!(cluster_recall(&Assignments::new(), &gold).unwrap(), 0.0);
        assert!(cluster_recall(&p, &Clusters::new()).is_err());
    }

    #[test]
    fn single_value_types_are_skipped() {
        let both: Clusters = [
            ("solo".to_string(), gold(&[("A", &["a"])])),
            ("pair".to_string(), gold(&[("A", &["a", "b"])])),
        ]
        .into_iter()
        .collect();
        let q = clustering_quality_by_type(&Assignments::new(), &both).unwrap();
        assert!(!q.contains_key("solo"));
        assert!(q.contains_key("pair"));
        let only: Clusters = [("solo".to_string(), gold(&[("A", &["a"])]))].into_iter().collect();
        assert!(clustering_quality(&Assignments::new(), &only).is_err());
    }

    #[test]
    fn report_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricsReport::default();
        r.push("coffee, ground", "ari", 0.5, 10);
        r.push("*", "nmi", 1.0, 10);
        let path = dir.path().join("m.csv");
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("type,metric,value,n_labeled\n"));
        assert_eq!(MetricsReport::read_csv(&path).unwrap(), r);
    }

    fn to_maps(pred: &[usize], gold_ids: &[usize], unpredicted: &[bool]) -> (BTreeMap<String, String>, BTreeMap<String, Vec<String>>) {
        let mut g: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut p = BTreeMap::new();
        for (i, (&c, &a)) in pred.iter().zip(gold_ids).enumerate() {
            g.entry(format!("attr{a}")).or_default().push(format!("v{i}"));
            if !unpredicted[i] {
                p.insert(format!("v{i}"), format!("c{c}"));
            }
        }
        (p, g)
    }

    proptest! {
        #[test]
        fn matches_oracle(
            labels in proptest::collection::vec((0usize..6, 0usize..5, proptest::bool::weighted(0.15)), 2..100)
        ) {
            let pred: Vec<usize> = labels.iter().map(|l| l.0).collect();
            let gold_ids: Vec<usize> = labels.iter().map(|l| l.1).collect();
            let missing: Vec<bool> = labels.iter().map(|l| l.2).collect();
            let (p, g) = to_maps(&pred, &gold_ids, &missing);
            // oracle sees unpredicted values as their own clusters
            let oracle_pred: Vec<usize> = pred
                .iter()
                .enumerate()
                .map(|(i, &c)| if missing[i] { 100 + i } else { c })
                .collect();
            let (ari, jac, nmi) = oracle::quality(&oracle_pred, &gold_ids);
            let c = pair_counts(&p, &g);
            prop_assert!((c.ari() - ari).abs() < 1e-9);
            prop_assert!((c.jaccard() - jac).abs() < 1e-9);
            prop_assert!((c.nmi - nmi).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&c.jaccard()));
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&c.ari()));
        }

        #[test]
        fn ari_ignores_relabeling(labels in proptest::collection::vec((0usize..5, 0usize..4), 2..60), shift in 1usize..7) {
            let pred: Vec<usize> = labels.iter().map(|l| l.0).collect();
            let gold_ids: Vec<usize> = labels.iter().map(|l| l.1).collect();
            let relabeled: Vec<usize> = pred.iter().map(|c| (c + shift) % 5 + 10).collect();
            let none = vec![false; pred.len()];
            let (p1, g) = to_maps(&pred, &gold_ids, &none);
            let (p2, _) = to_maps(&relabeled, &gold_ids, &none);
            prop_assert!((pair_counts(&p1, &g).ari() - pair_counts(&p2, &g).ari()).abs() < 1e-12);
        }

        #[test]
        fn self_agreement_is_perfect(gold_ids in proptest::collection::vec(0usize..5, 2..60)) {
            let none = vec![false; gold_ids.len()];
            let (p, g) = to_maps(&gold_ids, &gold_ids, &none);
            let c = pair_counts(&p, &g);
            prop_assert!((c.ari() - 1.0).abs() < 1e-12);
            prop_assert!((c.nmi - 1.0).abs() < 1e-12);
        }

        #[test]
        fn adding_a_correct_span_never_hurts(
            gold_spans in proptest::collection::btree_set((0usize..20, 1usize..4), 1..10),
            take in proptest::collection::vec(any::<bool>(), 10),
        ) {
            let g: Vec<Span> = gold_spans.iter().map(|&(s, l)| Span::new(s, s + l)).collect();
            let chosen: Vec<Span> = g.iter().zip(&take).filter(|(_, t)| **t).map(|(s, _)| *s).collect();
            let Some(extra) = g.iter().find(|s| !chosen.contains(s)).copied() else { return Ok(()); };
            let gm: BTreeMap<String, Vec<Span>> = [("p".to_string(), g.clone())].into_iter().collect();
            let before = entity_prf(&[("p".to_string(), chosen.clone())].into_iter().collect(), &gm).unwrap();
            let mut more = chosen.clone();
            more.push(extra);
            let after = entity_prf(&[("p".to_string(), more)].into_iter().collect(), &gm).unwrap();
            prop_assert!(after.recall >= before.recall);
            prop_assert!(after.f1 >= before.f1);
            prop_assert!(after.precision >= before.precision);
        }
    }
}
