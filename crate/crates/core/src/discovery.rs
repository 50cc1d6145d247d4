//! Self-ensemble inference and the iterative training loop.
//!
//! Density clustering of candidate embeddings proposes attribute clusters
//! and rejects noise. The classifier then rescues noise values into the
//! clusters whose labels it knows. Confident predictions become training
//! clusters for the next iteration.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Clusters, ProductIndex, SeedMatches, SeedSets, ValueOccurrence, NOISE_CLUSTER};
use crate::encoder::{
    classification_sequence, pair_similarity, ClassifierHead, ContextEncoder, Label, LabelTable, TinyEncoder,
};
use crate::error::{Error, Result};
use crate::metrics::{Assignments, MetricsReport};
use crate::scalar::Scalar;
use crate::seeding::stage_rng;
use crate::segmenter::{CandidateSet, Candidates};
use crate::trainer::{
    build_triplets, classification_examples, sample_pairs, train, PairExample, StepRecord, TrainConfig,
    TrainingClusters, TrainingData, ValueOccurrences,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    /// Cosine-distance radius of a neighbourhood.
    pub eps: f64,
    /// Neighbourhood size, the point itself included, that makes a core point.
    pub min_pts: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig { eps: 0.3, min_pts: 4 }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 2.0) {
            return Err(Error::config("clustering.eps", "must be within (0, 2]"));
        }
        if self.min_pts < 2 {
            return Err(Error::config("clustering.min_pts", "must be at least 2"));
        }
        Ok(())
    }
}

/// How the clustering radius is chosen in each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsSelection {
    /// Always the configured `clustering.eps`.
    Fixed,
    /// One minus the similarity cutoff with the best accuracy on held-out
    /// occurrence pairs.
    PairThreshold,
    /// Per product type, the grid radius whose clusters best agree with
    /// value pairs known to share or not share an attribute.
    Clustering,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    #[serde(skip)]
    pub clustering: ClusteringConfig,
    pub eps_selection: EpsSelection,
    /// Largest eps tried by [`EpsSelection::Clustering`].
    pub eps_max: f64,
    /// Grid points in `(0, eps_max]` tried by [`EpsSelection::Clustering`].
    pub eps_steps: usize,
    /// Share of sampled pairs held out for [`EpsSelection::PairThreshold`].
    pub holdout_fraction: f64,
    /// Classifier rescues below this confidence stay in noise.
    pub confidence_floor: f64,
    /// Share of each predicted cluster kept for the next iteration.
    pub rho: f64,
    /// Occurrences sampled per value when embedding or classifying.
    pub occurrence_cap: usize,
    /// Stop once fewer than this share of values change assignment.
    pub min_change: f64,
    /// Train the classifier on seeded attributes already in the first iteration.
    pub classify_first_iteration: bool,
    #[serde(skip)]
    pub train: TrainConfig,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            clustering: ClusteringConfig::default(),
            eps_selection: EpsSelection::Clustering,
            eps_max: 0.6,
            eps_steps: 30,
            holdout_fraction: 0.2,
            confidence_floor: 0.6,
            rho: 0.8,
            occurrence_cap: 20,
            min_change: 0.01,
            classify_first_iteration: true,
            train: TrainConfig::default(),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        self.clustering.validate()?;
        self.train.validate()?;
        if !(self.eps_max > 0.0 && self.eps_max <= 2.0) {
            return Err(Error::config("discovery.eps_max", "must be within (0, 2]"));
        }
        if self.eps_steps == 0 {
            return Err(Error::config("discovery.eps_steps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("discovery.holdout_fraction", "must be within [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return Err(Error::config("discovery.confidence_floor", "must be within [0, 1]"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("discovery.rho", "must be within (0, 1]"));
        }
        if self.occurrence_cap == 0 {
            return Err(Error::config("discovery.occurrence_cap", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Density,
    Classifier,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Density => "density",
            Provenance::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub cluster: String,
    pub confidence: f64,
    pub provenance: Provenance,
}

/// Predicted clusters of one product type. A value is either assigned to
/// exactly one cluster or in noise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub product_type: String,
    pub assigned: BTreeMap<String, Assignment>,
    pub noise: BTreeSet<String>,
}

impl PredictionSet {
    pub fn clusters(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (v, a) in &self.assigned {
            out.entry(a.cluster.clone()).or_default().insert(v.clone());
        }
        out
    }

    /// Share of values placed in some cluster.
    pub fn coverage(&self) -> f64 {
        let n = self.assigned.len() + self.noise.len();
        if n == 0 {
            0.0
        } else {
            self.assigned.len() as f64 / n as f64
        }
    }

    /// Only the density-clustering part of the prediction.
    pub fn density_only(&self) -> PredictionSet {
        let mut out = self.clone();
        let rescued: Vec<String> = out
            .assigned
            .iter()
            .filter(|(_, a)| a.provenance == Provenance::Classifier)
            .map(|(v, _)| v.clone())
            .collect();
        for v in rescued {
            out.assigned.remove(&v);
            out.noise.insert(v);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.noise.iter().find(|v| self.assigned.contains_key(*v)) {
            return Err(Error::Schema(format!("value `{v}` is both clustered and noise")));
        }
        if let Some((v, _)) = self
            .assigned
            .iter()
            .find(|(_, a)| !(a.confidence.is_finite() && (0.0..=1.0).contains(&a.confidence)))
        {
            return Err(Error::Schema(format!("value `{v}` has an invalid confidence")));
        }
        Ok(())
    }
}

/// Cluster assignments of several prediction sets, keyed by product type.
pub fn assignments(sets: &[PredictionSet]) -> Assignments {
    sets.iter()
        .map(|s| {
            let m = s.assigned.iter().map(|(v, a)| (v.clone(), a.cluster.clone())).collect();
            (s.product_type.clone(), m)
        })
        .collect()
}

/// The cluster-file form of predictions, with noise under [`NOISE_CLUSTER`].
pub fn to_clusters(sets: &[PredictionSet]) -> Clusters {
    let mut out = Clusters::new();
    for s in sets {
        let entry = out.entry(s.product_type.clone()).or_default();
        for (c, values) in s.clusters() {
            entry.insert(c, values.into_iter().collect());
        }
        if !s.noise.is_empty() {
            entry.insert(NOISE_CLUSTER.to_owned(), s.noise.iter().cloned().collect());
        }
    }
    out
}

/// Writes `clusters.json` and `values.tsv` (type, cluster_id, value, confidence, provenance).
pub fn write_predictions(dir: impl AsRef<Path>, sets: &[PredictionSet]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::corpus::write_clusters(dir.join("clusters.json"), &to_clusters(sets))?;
    let path = dir.join("values.tsv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&path, e);
    writeln!(w, "type\tcluster_id\tvalue\tconfidence\tprovenance").map_err(io)?;
    for s in sets {
        for (v, a) in &s.assigned {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.6}\t{}",
                s.product_type,
                a.cluster,
                v,
                a.confidence,
                a.provenance.as_str()
            )
            .map_err(io)?;
        }
        for v in &s.noise {
            writeln!(w, "{}\t{}\t{}\t{:.6}\t{}", s.product_type, NOISE_CLUSTER, v, 0.0, "density").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Encodes each needed title once and returns the hidden states by product id.
fn encode_titles<'o, S: Scalar, E: ContextEncoder<S> + ?Sized>(
    encoder: &E,
    products: &ProductIndex<'_>,
    occurrences: impl Iterator<Item = &'o ValueOccurrence>,
    suffix: Option<&str>,
) -> Result<HashMap<String, Array2<S>>> {
    let ids: BTreeSet<&str> = occurrences.map(|o| o.product_id.as_str()).collect();
    let ids: Vec<&str> = ids.into_iter().collect();
    let encoded = ids
        .par_iter()
        .map(|id| {
            let p = products.get(id)?;
            let h = match suffix {
                Some(t) => encoder.encode(&classification_sequence(&p.tokens, t))?,
                None => encoder.encode(&p.tokens)?,
            };
            Ok((id.to_string(), h))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(encoded.into_iter().collect())
}

fn pool<S: Scalar>(hidden: &Array2<S>, occ: &ValueOccurrence) -> Result<Array1<S>> {
    crate::encoder::mean_pool(hidden, occ.span)
}

fn sample_occurrences<'a>(occs: &'a [ValueOccurrence], cap: usize, rng: &mut impl Rng) -> Vec<&'a ValueOccurrence> {
    if occs.len() <= cap {
        occs.iter().collect()
    } else {
        let mut picked = occs.iter().choose_multiple(rng, cap);
        picked.sort();
        picked
    }
}

/// Value embedding as the mean of at most `cap` sampled occurrence vectors.
pub fn embed_candidates<S: Scalar, E: ContextEncoder<S> + ?Sized>(
    encoder: &E,
    products: &ProductIndex<'_>,
    candidates: &CandidateSet,
    cap: usize,
    rng: &mut impl Rng,
) -> Result<BTreeMap<String, Array1<S>>> {
    let sampled: Vec<(&String, Vec<&ValueOccurrence>)> = candidates
        .iter()
        .filter(|(_, occs)| !occs.is_empty())
        .map(|(v, occs)| (v, sample_occurrences(occs, cap, rng)))
        .collect();
    let hidden = encode_titles(encoder, products, sampled.iter().flat_map(|(_, o)| o.iter().copied()), None)?;
    let mut out = BTreeMap::new();
    for (v, occs) in sampled {
        let mut sum = Array1::<S>::zeros(encoder.dim());
        for o in &occs {
            sum += &pool(&hidden[&o.product_id], o)?;
        }
        out.insert(v.clone(), sum / S::lit(occs.len() as f64));
    }
    Ok(out)
}

/// Pairwise cosine distances; a zero vector is at distance 1 from everything else.
fn distance_matrix<S: Scalar>(vectors: &[Array1<S>]) -> Vec<Vec<f64>> {
    let unit: Vec<Array1<f64>> = vectors
        .iter()
        .map(|v| {
            let v = v.mapv(|x| x.as_f64());
            let n = v.dot(&v).sqrt();
            if n > 0.0 {
                v / n
            } else {
                v
            }
        })
        .collect();
    let n = unit.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dij = (1.0 - unit[i].dot(&unit[j])).clamp(0.0, 2.0);
            d[i][j] = dij;
            d[j][i] = dij;
        }
    }
    d
}

/// Density clustering under cosine distance. Returns a cluster index per
/// point, `None` for noise.
///
/// A point is core when at least `min_pts` points, itself included, lie
/// within `eps`. Core points within `eps` of each other share a cluster;
/// every other point within `eps` of a core point joins the cluster of the
/// first such core point in input order. Cluster indices follow the order of
/// each cluster's first core point.
pub fn dbscan<S: Scalar>(vectors: &[Array1<S>], config: &ClusteringConfig) -> Result<Vec<Option<usize>>> {
    config.validate()?;
    Ok(dbscan_distances(&distance_matrix(vectors), config))
}

fn dbscan_distances(d: &[Vec<f64>], config: &ClusteringConfig) -> Vec<Option<usize>> {
    let n = d.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d[i][j] <= config.eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= config.min_pts).collect();
    let mut label = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(next);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if core[q] && label[q].is_none() {
                    label[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            label[i] = neighbours[i].iter().find(|&&j| core[j]).and_then(|&j| label[j]);
        }
    }
    label
}

/// Value pairs for choosing eps within one product type: same-cluster pairs
/// of the training clusters as positives; cross-cluster pairs and pairs of
/// distinct candidate values sharing a title as negatives.
pub fn eps_pairs(
    training: Option<&BTreeMap<String, ValueOccurrences>>,
    candidates: &CandidateSet,
) -> (Vec<(String, String)>, Vec<(String, String)>) {
    let mut label_of: BTreeMap<&str, &str> = BTreeMap::new();
    for (label, values) in training.into_iter().flatten() {
        for v in values.keys() {
            label_of.insert(v.as_str(), label.as_str());
        }
    }
    let mut positives = BTreeSet::new();
    let mut negatives = BTreeSet::new();
    let known: Vec<(&str, &str)> = label_of.iter().map(|(v, l)| (*v, *l)).collect();
    for (i, &(a, la)) in known.iter().enumerate() {
        for &(b, lb) in &known[i + 1..] {
            let pair = (a.to_owned(), b.to_owned());
            if la == lb {
                positives.insert(pair);
            } else {
                negatives.insert(pair);
            }
        }
    }
    let mut by_product: BTreeMap<&str, Vec<&ValueOccurrence>> = BTreeMap::new();
    for occ in candidates.values().flatten() {
        by_product.entry(occ.product_id.as_str()).or_default().push(occ);
    }
    for occs in by_product.values() {
        for (i, a) in occs.iter().enumerate() {
            for b in &occs[i + 1..] {
                if a.value_text == b.value_text || a.span.overlaps(&b.span) {
                    continue;
                }
                let (la, lb) = (label_of.get(a.value_text.as_str()), label_of.get(b.value_text.as_str()));
                if la.is_some() && la == lb {
                    continue;
                }
                let pair = if a.value_text < b.value_text {
                    (a.value_text.clone(), b.value_text.clone())
                } else {
                    (b.value_text.clone(), a.value_text.clone())
                };
                negatives.insert(pair);
            }
        }
    }
    (positives.into_iter().collect(), negatives.into_iter().collect())
}

/// The grid radius whose clustering best separates `negatives` while
/// keeping `positives` together, scored by balanced accuracy of the
/// "same cluster" decision. Ties go to the middle of the best run of grid
/// points. `None` when either pair list has no usable pair.
pub fn select_eps<S: Scalar>(
    vectors: &BTreeMap<String, Array1<S>>,
    positives: &[(String, String)],
    negatives: &[(String, String)],
    grid: &[f64],
    min_pts: usize,
) -> Option<f64> {
    let index: HashMap<&str, usize> = vectors.keys().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let resolve = |pairs: &[(String, String)]| -> Vec<(usize, usize)> {
        pairs
            .iter()
            .filter_map(|(a, b)| Some((*index.get(a.as_str())?, *index.get(b.as_str())?)))
            .collect()
    };
    let (pos, neg) = (resolve(positives), resolve(negatives));
    if pos.is_empty() || neg.is_empty() || grid.is_empty() {
        return None;
    }
    let points: Vec<Array1<S>> = vectors.values().cloned().collect();
    let d = distance_matrix(&points);
    let scores: Vec<f64> = grid
        .iter()
        .map(|&eps| {
            let labels = dbscan_distances(&d, &ClusteringConfig { eps, min_pts });
            let same = |&(a, b): &(usize, usize)| labels[a].is_some() && labels[a] == labels[b];
            let tpr = pos.iter().filter(|p| same(p)).count() as f64 / pos.len() as f64;
            let tnr = neg.iter().filter(|p| !same(p)).count() as f64 / neg.len() as f64;
            0.5 * (tpr + tnr)
        })
        .collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = scores.iter().position(|&s| s == best)?;
    let run = scores[first..].iter().take_while(|&&s| s == best).count();
    Some(grid[first + (run - 1) / 2])
}

/// Evenly spaced radii `max/steps, 2*max/steps, ..., max`.
pub fn eps_grid(max: f64, steps: usize) -> Vec<f64> {
    (1..=steps).map(|i| max * i as f64 / steps as f64).collect()
}

/// [`dbscan`] over named vectors: clusters as value lists, and the noise.
pub fn dbscan_values<S: Scalar>(
    vectors: &BTreeMap<String, Array1<S>>,
    config: &ClusteringConfig,
) -> Result<(Vec<Vec<String>>, Vec<String>)> {
    let names: Vec<&String> = vectors.keys().collect();
    let points: Vec<Array1<S>> = vectors.values().cloned().collect();
    let labels = dbscan(&points, config)?;
    let k = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut clusters = vec![Vec::new(); k];
    let mut noise = Vec::new();
    for (name, l) in names.into_iter().zip(labels) {
        match l {
            Some(c) => clusters[c].push(name.clone()),
            None => noise.push(name.clone()),
        }
    }
    Ok((clusters, noise))
}

/// Classifier votes over noise values.
///
/// Each sampled occurrence votes for its most probable label among
/// `targets` (label index to cluster id). The label with most votes wins;
/// equal counts go to the higher mean winning probability, and a remaining
/// tie leaves the value in noise. The value's confidence is the mean
/// probability of the winning votes; values below `floor` stay in noise.
#[allow(clippy::too_many_arguments)]
pub fn classify_noise<S: Scalar, E: ContextEncoder<S> + ?Sized>(
    encoder: &E,
    head: &ClassifierHead<S>,
    products: &ProductIndex<'_>,
    product_type: &str,
    noise: &BTreeMap<String, Vec<ValueOccurrence>>,
    targets: &BTreeMap<usize, String>,
    floor: f64,
    cap: usize,
    rng: &mut impl Rng,
) -> Result<BTreeMap<String, (String, f64)>> {
    if head.num_labels() == 0 {
        return Err(Error::Empty("classifier has no labels".into()));
    }
    if let Some(&bad) = targets.keys().find(|&&k| k >= head.num_labels()) {
        return Err(Error::UnknownLabel {
            index: bad,
            len: head.num_labels(),
        });
    }
    let mut out = BTreeMap::new();
    if targets.is_empty() {
        return Ok(out);
    }
    let sampled: Vec<(&String, Vec<&ValueOccurrence>)> = noise
        .iter()
        .filter(|(_, o)| !o.is_empty())
        .map(|(v, occs)| (v, sample_occurrences(occs, cap, rng)))
        .collect();
    let hidden = encode_titles(
        encoder,
        products,
        sampled.iter().flat_map(|(_, o)| o.iter().copied()),
        Some(product_type),
    )?;
    for (value, occs) in sampled {
        let mut votes: Vec<(usize, f64)> = Vec::with_capacity(occs.len());
        for o in occs {
            let p = head.probabilities(pool(&hidden[&o.product_id], o)?.view())?;
            let (best, prob) = targets
                .keys()
                .map(|&k| (k, p[k].as_f64()))
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            votes.push((best, prob));
        }
        if let Some((label, confidence)) = majority_vote(&votes) {
            if confidence >= floor {
                out.insert(value.clone(), (targets[&label].clone(), confidence));
            }
        }
    }
    Ok(out)
}

/// Winner of `(label, probability)` votes, with its mean probability.
pub fn majority_vote(votes: &[(usize, f64)]) -> Option<(usize, f64)> {
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(l, p) in votes {
        let e = tally.entry(l).or_default();
        e.0 += 1;
        e.1 += p;
    }
    let ranked: Vec<(usize, usize, f64)> = tally.into_iter().map(|(l, (c, s))| (l, c, s / c as f64)).collect();
    let best = ranked
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)))?;
    let tied = ranked.iter().filter(|r| r.1 == best.1 && r.2 == best.2).count();
    (tied == 1).then_some((best.0, best.2))
}

/// Next unused `new_k` attribute name of a type.
fn fresh_label(table: &LabelTable, product_type: &str) -> String {
    let k = table
        .for_type(product_type)
        .filter_map(|(_, l)| l.attribute.strip_prefix("new_").and_then(|n| n.parse::<usize>().ok()))
        .max()
        .unwrap_or(0);
    format!("new_{}", k + 1)
}

/// Names each cluster after the plurality label of its members that
/// already carry one in `known` (value to attribute). Clusters without
/// such members, or with a tied plurality, receive a fresh `new_k` label.
/// All labels are recorded in `table`.
pub fn align_clusters_to_labels(
    table: &mut LabelTable,
    product_type: &str,
    clusters: &[Vec<String>],
    known: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut out = Vec::with_capacity(clusters.len());
    for members in clusters {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for v in members {
            if let Some(l) = known.get(v) {
                *counts.entry(l.as_str()).or_default() += 1;
            }
        }
        let top = counts.values().copied().max().unwrap_or(0);
        let leaders: Vec<&str> = counts.iter().filter(|(_, &c)| c == top).map(|(l, _)| *l).collect();
        let name = match leaders.as_slice() {
            [single] if top > 0 => (*single).to_owned(),
            _ => {
                let name = fresh_label(table, product_type);
                if leaders.len() > 1 {
                    log::warn!(
                        "{product_type}: cluster matches {} equally; minted {name}",
                        leaders.join(", ")
                    );
                }
                name
            }
        };
        table.insert(Label::new(product_type, name.as_str()));
        out.push(name);
    }
    out
}

/// Training clusters for the next iteration: the `ceil(rho * size)` most
/// confident values of each cluster plus every seed. Seeds are kept under
/// their own attribute only.
pub fn filter_confident(
    predictions: &PredictionSet,
    rho: f64,
    seeds: &BTreeMap<String, String>,
) -> BTreeMap<String, Vec<String>> {
    let mut by_cluster: BTreeMap<&str, Vec<(&String, f64)>> = BTreeMap::new();
    for (v, a) in &predictions.assigned {
        by_cluster.entry(a.cluster.as_str()).or_default().push((v, a.confidence));
    }
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (cluster, mut members) in by_cluster {
        members.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = (rho * members.len() as f64).ceil() as usize;
        let kept = out.entry(cluster.to_owned()).or_default();
        for (v, _) in members.into_iter().take(keep) {
            if seeds.get(v).is_none_or(|a| a == cluster) {
                kept.insert(v.clone());
            }
        }
    }
    for (v, a) in seeds {
        out.entry(a.clone()).or_default().insert(v.clone());
    }
    out.into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(c, v)| (c, v.into_iter().collect()))
        .collect()
}

/// Cosine similarity of each member to its cluster centroid, floored at 0.
fn centroid_confidence<S: Scalar>(vectors: &BTreeMap<String, Array1<S>>, members: &[String]) -> BTreeMap<String, f64> {
    let dim = vectors.values().next().map_or(0, Array1::len);
    let mut centroid = Array1::<S>::zeros(dim);
    for m in members {
        centroid += &vectors[m];
    }
    members
        .iter()
        .map(|m| {
            let c = pair_similarity(vectors[m].view(), centroid.view()).map_or(0.0, |s| s.as_f64());
            (m.clone(), c.clamp(0.0, 1.0))
        })
        .collect()
}

/// Density clusters of one product type, named against `known`, with noise
/// values rescued by the classifier when a head is given.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_predict<S: Scalar, E: ContextEncoder<S> + ?Sized>(
    encoder: &E,
    head: Option<&ClassifierHead<S>>,
    products: &ProductIndex<'_>,
    product_type: &str,
    candidates: &CandidateSet,
    known: &BTreeMap<String, String>,
    table: &mut LabelTable,
    config: &DiscoveryConfig,
    rng: &mut impl Rng,
) -> Result<PredictionSet> {
    let vectors = embed_candidates(encoder, products, candidates, config.occurrence_cap, rng)?;
    predict_from_vectors(encoder, head, products, product_type, candidates, &vectors, known, table, config, rng)
}

/// [`ensemble_predict`] over value vectors computed beforehand.
#[allow(clippy::too_many_arguments)]
pub fn predict_from_vectors<S: Scalar, E: ContextEncoder<S> + ?Sized>(
    encoder: &E,
    head: Option<&ClassifierHead<S>>,
    products: &ProductIndex<'_>,
    product_type: &str,
    candidates: &CandidateSet,
    vectors: &BTreeMap<String, Array1<S>>,
    known: &BTreeMap<String, String>,
    table: &mut LabelTable,
    config: &DiscoveryConfig,
    rng: &mut impl Rng,
) -> Result<PredictionSet> {
    let (clusters, noise) = dbscan_values(vectors, &config.clustering)?;
    let names = align_clusters_to_labels(table, product_type, &clusters, known);

    let mut merged: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (name, members) in names.into_iter().zip(clusters) {
        merged.entry(name).or_default().extend(members);
    }
    let mut set = PredictionSet {
        product_type: product_type.to_owned(),
        ..PredictionSet::default()
    };
    for (name, members) in &merged {
        for (v, confidence) in centroid_confidence(vectors, members) {
            set.assigned.insert(
                v,
                Assignment {
                    cluster: name.clone(),
                    confidence,
                    provenance: Provenance::Density,
                },
            );
        }
    }
    set.noise = noise.into_iter().collect();

    if let Some(head) = head.filter(|h| h.num_labels() > 0) {
        let targets: BTreeMap<usize, String> = merged
            .keys()
            .filter_map(|name| head.labels().get(&Label::new(product_type, name.as_str())).map(|i| (i, name.clone())))
            .collect();
        let noise_occ: BTreeMap<String, Vec<ValueOccurrence>> = set
            .noise
            .iter()
            .filter_map(|v| candidates.get(v).map(|o| (v.clone(), o.clone())))
            .collect();
        let rescued = classify_noise(
            encoder,
            head,
            products,
            product_type,
            &noise_occ,
            &targets,
            config.confidence_floor,
            config.occurrence_cap,
            rng,
        )?;
        for (v, (cluster, confidence)) in rescued {
            set.noise.remove(&v);
            set.assigned.insert(
                v,
                Assignment {
                    cluster,
                    confidence,
                    provenance: Provenance::Classifier,
                },
            );
        }
    }
    set.validate()?;
    Ok(set)
}

/// eps from held-out pairs: one minus the similarity cutoff with the best
/// pair accuracy (ties to the lower cutoff). `None` when either class is absent.
pub fn calibrate_eps<S: Scalar>(
    encoder: &TinyEncoder<S>,
    products: &ProductIndex<'_>,
    held_out: &[PairExample],
) -> Result<Option<f64>> {
    if !held_out.iter().any(|p| p.label() > 0) || !held_out.iter().any(|p| p.label() < 0) {
        return Ok(None);
    }
    let occs = held_out.iter().flat_map(|p| [&p.u, &p.v]);
    let hidden = encode_titles(encoder, products, occs, None)?;
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(held_out.len());
    for p in held_out {
        let u = pool(&hidden[&p.u.product_id], &p.u)?;
        let v = pool(&hidden[&p.v.product_id], &p.v)?;
        let f = pair_similarity(u.view(), v.view()).map_or(0.0, |s| s.as_f64());
        scored.push((f, p.label() > 0));
    }
    Ok(Some(1.0 - best_cutoff(&mut scored)))
}

/// Cutoff `c` maximizing the accuracy of "positive iff f > c".
pub fn best_cutoff(scored: &mut [(f64, bool)]) -> f64 {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = scored.iter().filter(|s| s.1).count();
    // cutoff below every score: all predicted positive
    let mut correct = positives;
    let mut best = (correct, scored.first().map_or(0.0, |s| s.0 - 1e-6));
    for i in 0..scored.len() {
        if scored[i].1 {
            correct -= 1;
        } else {
            correct += 1;
        }
        if i + 1 < scored.len() && scored[i + 1].0 == scored[i].0 {
            continue;
        }
        let cut = match scored.get(i + 1) {
            Some(next) => 0.5 * (scored[i].0 + next.0),
            None => scored[i].0,
        };
        if correct > best.0 {
            best = (correct, cut);
        }
    }
    best.1
}

/// Result of one framework iteration.
#[derive(Clone, Debug)]
pub struct IterationReport {
    pub iteration: usize,
    /// Clustering radius used for each product type.
    pub eps: BTreeMap<String, f64>,
    pub training: TrainingData,
    pub training_clusters: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub history: Vec<StepRecord>,
    pub predictions: Vec<PredictionSet>,
    /// Share of candidate values whose assignment differs from the previous iteration.
    pub change_rate: f64,
    pub metrics: Option<MetricsReport>,
}

/// Mutable model state carried across iterations.
pub struct Model<S> {
    pub encoder: TinyEncoder<S>,
    pub head: ClassifierHead<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(encoder: TinyEncoder<S>) -> Self {
        let dim = encoder.config().dim;
        Model {
            encoder,
            head: ClassifierHead::new(LabelTable::new(), dim),
        }
    }
}

fn seed_lookup(seeds: &SeedSets) -> BTreeMap<String, BTreeMap<String, String>> {
    let mut out: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (t, a, values) in seeds.iter() {
        for v in values {
            out.entry(t.to_owned()).or_default().entry(v.clone()).or_insert_with(|| a.to_owned());
        }
    }
    out
}

/// Occurrences for every value of `clusters`: seed matches for seeds,
/// candidate occurrences otherwise.
fn attach_occurrences(
    clusters: &BTreeMap<String, BTreeMap<String, Vec<String>>>,
    seed_matches: &SeedMatches,
    seeds: &BTreeMap<String, BTreeMap<String, String>>,
    candidates: &Candidates,
) -> TrainingClusters {
    let mut out = TrainingClusters::new();
    for (t, by_label) in clusters {
        for (label, values) in by_label {
            let mut occ: ValueOccurrences = BTreeMap::new();
            for v in values {
                let seed_attr = seeds.get(t).and_then(|s| s.get(v));
                let found = match seed_attr {
                    Some(a) => seed_matches
                        .occurrences
                        .get(&(t.clone(), a.clone(), v.clone()))
                        .cloned()
                        .unwrap_or_default(),
                    None => candidates.get(t).and_then(|c| c.get(v)).cloned().unwrap_or_default(),
                };
                if !found.is_empty() {
                    occ.insert(v.clone(), found);
                }
            }
            if !occ.is_empty() {
                out.entry(t.clone()).or_default().insert(label.clone(), occ);
            }
        }
    }
    out
}

fn change_rate(previous: Option<&[PredictionSet]>, current: &[PredictionSet]) -> f64 {
    let Some(previous) = previous else {
        return 1.0;
    };
    let key = |sets: &[PredictionSet]| -> BTreeMap<(String, String), String> {
        let mut m = BTreeMap::new();
        for s in sets {
            for (v, a) in &s.assigned {
                m.insert((s.product_type.clone(), v.clone()), a.cluster.clone());
            }
            for v in &s.noise {
                m.insert((s.product_type.clone(), v.clone()), NOISE_CLUSTER.to_owned());
            }
        }
        m
    };
    let (a, b) = (key(previous), key(current));
    let all: BTreeSet<&(String, String)> = a.keys().chain(b.keys()).collect();
    if all.is_empty() {
        return 0.0;
    }
    let changed = all.iter().filter(|k| a.get(**k) != b.get(**k)).count();
    changed as f64 / all.len() as f64
}

/// Inputs of [`run_iterations`] that stay fixed across iterations.
pub struct RunInputs<'a> {
    pub products: &'a ProductIndex<'a>,
    pub seeds: &'a SeedSets,
    pub seed_matches: &'a SeedMatches,
    pub candidates: &'a Candidates,
    pub gold: Option<&'a Clusters>,
    pub seed: u64,
}

/// Alternates training and ensemble inference for up to `max_iter`
/// iterations. Each iteration trains on seeds plus the confident part of the
/// previous predictions, then predicts every product type afresh. Stops
/// early once fewer than `min_change` of the values move. `on_iteration`
/// observes each finished iteration together with the model.
pub fn run_iterations<S: Scalar>(
    model: &mut Model<S>,
    inputs: &RunInputs<'_>,
    config: &DiscoveryConfig,
    max_iter: usize,
    mut on_iteration: impl FnMut(&IterationReport, &Model<S>) -> Result<()>,
) -> Result<Vec<IterationReport>> {
    config.validate()?;
    if max_iter == 0 {
        return Err(Error::config("max_iter", "must be at least 1"));
    }
    let seeds = seed_lookup(inputs.seeds);
    let mut table = model.head.labels().clone();
    let mut reports: Vec<IterationReport> = Vec::new();
    for iteration in 1..=max_iter {
        let k = iteration as u64;
        let plain: BTreeMap<String, BTreeMap<String, Vec<String>>> = match reports.last() {
            None => inputs
                .seeds
                .iter()
                .fold(BTreeMap::new(), |mut acc, (t, a, values)| {
                    acc.entry(t.to_owned())
                        .or_insert_with(BTreeMap::new)
                        .insert(a.to_owned(), values.to_vec());
                    acc
                }),
            Some(prev) => prev
                .predictions
                .iter()
                .map(|p| {
                    let empty = BTreeMap::new();
                    let s = seeds.get(&p.product_type).unwrap_or(&empty);
                    (p.product_type.clone(), filter_confident(p, config.rho, s))
                })
                .chain(
                    // seeded types without candidates still keep their seeds
                    seeds.iter().map(|(t, s)| (t.clone(), filter_confident(&PredictionSet::default(), 1.0, s))),
                )
                .fold(BTreeMap::new(), |mut acc: BTreeMap<String, BTreeMap<String, Vec<String>>>, (t, c)| {
                    acc.entry(t).or_insert(c);
                    acc
                }),
        };
        let clusters = attach_occurrences(&plain, inputs.seed_matches, &seeds, inputs.candidates);
        for (t, by_label) in &clusters {
            for label in by_label.keys() {
                table.insert(Label::new(t.as_str(), label.as_str()));
            }
        }
        model.head.extend_labels(&table)?;

        let mut rng = stage_rng(inputs.seed, "sample", k);
        let (positives, negatives) = sample_pairs(&clusters, inputs.candidates, &config.train, &mut rng)?;
        let holdout = match config.eps_selection {
            EpsSelection::PairThreshold => config.holdout_fraction,
            EpsSelection::Fixed | EpsSelection::Clustering => 0.0,
        };
        let (train_pos, held_pos) = split(positives, holdout, &mut rng);
        let (train_neg, held_neg) = split(negatives, holdout, &mut rng);
        let (triplets, skipped) = build_triplets(&train_pos, &train_neg, config.train.negatives_per_anchor, &mut rng);
        if skipped > 0 {
            log::debug!("iteration {iteration}: {skipped} positives had no negative for a triplet");
        }
        let use_head = iteration > 1 || config.classify_first_iteration;
        let classification = if use_head {
            classification_examples(&clusters, &model.head, config.train.occurrences_per_value, &mut rng)
        } else {
            Vec::new()
        };
        let data = TrainingData {
            pairs: train_pos.into_iter().chain(train_neg).collect(),
            triplets,
            classification,
        };
        log::info!(
            "iteration {iteration}: {} pairs, {} triplets, {} classification examples",
            data.pairs.len(),
            data.triplets.len(),
            data.classification.len()
        );
        let mut rng = stage_rng(inputs.seed, "train", k);
        let head = use_head.then_some(&mut model.head);
        let history = train(&mut model.encoder, head, inputs.products, &data, &config.train, &mut rng)?;

        let held: Vec<PairExample> = held_pos.into_iter().chain(held_neg).collect();
        let mut clustering = config.clustering.clone();
        if config.eps_selection == EpsSelection::PairThreshold {
            if let Some(eps) = calibrate_eps(&model.encoder, inputs.products, &held)? {
                clustering.eps = eps.clamp(1e-3, 2.0);
            }
        }
        let grid = eps_grid(config.eps_max, config.eps_steps);

        let mut predictions = Vec::new();
        let mut eps_by_type = BTreeMap::new();
        for (t, set) in inputs.candidates {
            let known: BTreeMap<String, String> = clusters
                .get(t)
                .map(|by_label| {
                    by_label
                        .iter()
                        .flat_map(|(l, values)| values.keys().map(move |v| (v.clone(), l.clone())))
                        .collect()
                })
                .unwrap_or_default();
            let mut rng = stage_rng(inputs.seed, &format!("infer/{t}"), k);
            let vectors = embed_candidates(&model.encoder, inputs.products, set, config.occurrence_cap, &mut rng)?;
            let mut type_clustering = clustering.clone();
            if config.eps_selection == EpsSelection::Clustering {
                let (pos, neg) = eps_pairs(clusters.get(t), set);
                if let Some(eps) = select_eps(&vectors, &pos, &neg, &grid, clustering.min_pts) {
                    type_clustering.eps = eps;
                }
            }
            log::info!("iteration {iteration}: eps {:.4} for {t}", type_clustering.eps);
            eps_by_type.insert(t.clone(), type_clustering.eps);
            let infer_config = DiscoveryConfig {
                clustering: type_clustering,
                ..config.clone()
            };
            let head = use_head.then_some(&model.head);
            predictions.push(predict_from_vectors(
                &model.encoder,
                head,
                inputs.products,
                t,
                set,
                &vectors,
                &known,
                &mut table,
                &infer_config,
                &mut rng,
            )?);
        }
        model.head.extend_labels(&table)?;

        let change = change_rate(reports.last().map(|r| r.predictions.as_slice()), &predictions);
        let metrics = match inputs.gold {
            Some(gold) => Some(MetricsReport::clustering(&assignments(&predictions), gold)?),
            None => None,
        };
        let report = IterationReport {
            iteration,
            eps: eps_by_type,
            training: data,
            training_clusters: plain,
            history,
            predictions,
            change_rate: change,
            metrics,
        };
        on_iteration(&report, model)?;
        reports.push(report);
        if iteration > 1 && change < config.min_change {
            log::info!("iteration {iteration}: {:.2}% of values changed; stopping", 100.0 * change);
            break;
        }
    }
    Ok(reports)
}

fn split<T>(mut items: Vec<T>, fraction: f64, rng: &mut impl Rng) -> (Vec<T>, Vec<T>) {
    items.shuffle(rng);
    let held = (fraction * items.len() as f64).floor() as usize;
    let train = items.split_off(held);
    (train, items)
}
