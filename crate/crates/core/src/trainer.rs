//! Attribute-aware fine-tuning of the tiny encoder: pair and triplet
//! sampling, the binary, contrastive and classification losses, and the
//! multitask training loop.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProductIndex, ValueOccurrence};
use crate::encoder::{
    classification_sequence, clip_grad_norm, cosine_with_grad, softmax, Adam, ClassifierHead, Forward, TinyEncoder,
};
use crate::error::{Error, Result};
use crate::parallel::accumulate;
use crate::scalar::Scalar;
use crate::segmenter::Candidates;

/// Occurrences of each value, keyed by value text.
pub type ValueOccurrences = BTreeMap<String, Vec<ValueOccurrence>>;

/// `{product_type: {cluster label: {value: occurrences}}}`.
pub type TrainingClusters = BTreeMap<String, BTreeMap<String, ValueOccurrences>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Positive,
    /// Values of two different clusters of the same product type.
    CrossAttribute,
    /// Two different spans of one title.
    SameTitle,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairExample {
    pub product_type: String,
    /// For negatives this is the side drawn from a training cluster.
    pub u: ValueOccurrence,
    pub v: ValueOccurrence,
    pub kind: PairKind,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Positive => "positive",
            PairKind::CrossAttribute => "cross_attribute",
            PairKind::SameTitle => "same_title",
        }
    }
}

impl PairExample {
    pub fn label(&self) -> i8 {
        if self.kind == PairKind::Positive {
            1
        } else {
            -1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripletExample {
    pub product_type: String,
    pub anchor: ValueOccurrence,
    pub positive: ValueOccurrence,
    pub negative: ValueOccurrence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub occurrence: ValueOccurrence,
    pub product_type: String,
    /// Index into the classifier's label table.
    pub label: usize,
}

/// Multipliers applied to each task's batch loss before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub binary: f64,
    pub contrastive: f64,
    pub classification: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            binary: 1.0,
            contrastive: 1.0,
            classification: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Triplet margin.
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Negatives drawn per positive pair.
    pub negative_ratio: f64,
    /// Share of negatives taken from same-title spans when available.
    pub strong_fraction: f64,
    /// Negatives bound to each positive when building triplets.
    pub negatives_per_anchor: usize,
    pub positives_per_cluster: usize,
    /// Classification examples drawn per training value.
    pub occurrences_per_value: usize,
    /// Upper bound on the share of classification batches.
    pub max_classification_share: f64,
    pub task_weights: TaskWeights,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            lr: 1e-3,
            batch_size: 32,
            epochs: 3,
            negative_ratio: 3.0,
            strong_fraction: 0.5,
            negatives_per_anchor: 2,
            positives_per_cluster: 32,
            occurrences_per_value: 8,
            max_classification_share: 0.5,
            task_weights: TaskWeights::default(),
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 8] = [
            ("train.margin", self.margin > 0.0, "must be positive"),
            ("train.lr", self.lr > 0.0, "must be positive"),
            ("train.batch_size", self.batch_size > 0, "must be positive"),
            ("train.negative_ratio", self.negative_ratio >= 1.0, "must be at least 1"),
            ("train.strong_fraction", (0.0..=1.0).contains(&self.strong_fraction), "must be within [0, 1]"),
            ("train.positives_per_cluster", self.positives_per_cluster > 0, "must be positive"),
            (
                "train.max_classification_share",
                (0.0..1.0).contains(&self.max_classification_share),
                "must be within [0, 1)",
            ),
            ("train.grad_clip", self.grad_clip >= 0.0, "must not be negative"),
        ];
        for (field, ok, message) in checks {
            if !ok {
                return Err(Error::config(field, message));
            }
        }
        Ok(())
    }
}

/// Draws positive pairs inside clusters and negative pairs across clusters
/// and within titles.
///
/// Positives join occurrences of two distinct values of one cluster. Each
/// product type gets about `negative_ratio` negatives per positive, with at
/// least `strong_fraction` of them pairing two distinct spans of one title
/// when such spans exist.
pub fn sample_pairs(
    clusters: &TrainingClusters,
    candidates: &Candidates,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<PairExample>, Vec<PairExample>)> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (t, by_label) in clusters {
        let by_label: Vec<(&String, Vec<(&String, &Vec<ValueOccurrence>)>)> = by_label
            .iter()
            .map(|(l, values)| (l, values.iter().filter(|(_, o)| !o.is_empty()).collect::<Vec<_>>()))
            .filter(|(_, values)| !values.is_empty())
            .collect();

        let mut pos_t = BTreeSet::new();
        for (_, values) in &by_label {
            if values.len() < 2 {
                continue;
            }
            let mut found = BTreeSet::new();
            for _ in 0..config.positives_per_cluster * 4 {
                if found.len() == config.positives_per_cluster {
                    break;
                }
                let pair = rand::seq::index::sample(rng, values.len(), 2);
                let (a, b) = (values[pair.index(0)], values[pair.index(1)]);
                let (a, b) = if a.0 <= b.0 { (a, b) } else { (b, a) };
                let u = a.1.choose(rng).expect("non-empty occurrences").clone();
                let v = b.1.choose(rng).expect("non-empty occurrences").clone();
                found.insert((u, v));
            }
            pos_t.extend(found);
        }
        if pos_t.is_empty() {
            continue;
        }

        let n_neg = (config.negative_ratio * pos_t.len() as f64).round() as usize;
        let label_of: HashMap<&str, &str> = by_label
            .iter()
            .flat_map(|(l, values)| values.iter().map(move |(v, _)| (v.as_str(), l.as_str())))
            .collect();

        // same-title pool: any two distinct spans of one title, candidates or
        // cluster occurrences, unless both values sit in the same cluster
        let mut spans_by_product: BTreeMap<&str, BTreeSet<&ValueOccurrence>> = BTreeMap::new();
        let cluster_occurrences = by_label.iter().flat_map(|(_, values)| values.iter().flat_map(|(_, o)| o.iter()));
        let candidate_occurrences = candidates.get(t).into_iter().flat_map(|set| set.values().flatten());
        for occ in cluster_occurrences.chain(candidate_occurrences) {
            spans_by_product.entry(occ.product_id.as_str()).or_default().insert(occ);
        }
        let mut strong_pool = BTreeSet::new();
        for spans in spans_by_product.values() {
            let spans: Vec<&ValueOccurrence> = spans.iter().copied().collect();
            for (i, &a) in spans.iter().enumerate() {
                for &b in &spans[i + 1..] {
                    let la = label_of.get(a.value_text.as_str());
                    let same_cluster = la.is_some() && la == label_of.get(b.value_text.as_str());
                    if a.value_text != b.value_text && !a.span.overlaps(&b.span) && !same_cluster {
                        strong_pool.insert((a, b));
                    }
                }
            }
        }
        let cross_possible = by_label.len() >= 2;
        let want_strong = if cross_possible {
            (config.strong_fraction * n_neg as f64).ceil() as usize
        } else {
            n_neg
        };
        let strong: Vec<_> = strong_pool.iter().choose_multiple(rng, want_strong.min(strong_pool.len()));
        let mut neg_t: BTreeSet<PairExample> = strong
            .into_iter()
            .map(|(o, c)| PairExample {
                product_type: t.clone(),
                u: (*o).clone(),
                v: (*c).clone(),
                kind: PairKind::SameTitle,
            })
            .collect();
        if cross_possible {
            let want = n_neg.saturating_sub(neg_t.len());
            let mut tries = 0;
            while neg_t.len() < n_neg && tries < want * 4 {
                tries += 1;
                let pick = rand::seq::index::sample(rng, by_label.len(), 2);
                let (va, oa) = by_label[pick.index(0)].1.choose(rng).expect("non-empty cluster");
                let (vb, ob) = by_label[pick.index(1)].1.choose(rng).expect("non-empty cluster");
                if va == vb {
                    continue;
                }
                neg_t.insert(PairExample {
                    product_type: t.clone(),
                    u: oa.choose(rng).expect("non-empty occurrences").clone(),
                    v: ob.choose(rng).expect("non-empty occurrences").clone(),
                    kind: PairKind::CrossAttribute,
                });
            }
        }
        positives.extend(pos_t.into_iter().map(|(u, v)| PairExample {
            product_type: t.clone(),
            u,
            v,
            kind: PairKind::Positive,
        }));
        negatives.extend(neg_t);
    }
    if positives.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    Ok((positives, negatives))
}

/// Binds each positive pair to up to `k` negatives that share one of its
/// values as anchor. Returns the triplets and the number of positives that
/// found no negative.
pub fn build_triplets(
    positives: &[PairExample],
    negatives: &[PairExample],
    k: usize,
    rng: &mut impl Rng,
) -> (Vec<TripletExample>, usize) {
    // (type, anchor text) -> (anchor occurrence, other side)
    let mut by_anchor: HashMap<(&str, &str), Vec<(&ValueOccurrence, &ValueOccurrence)>> = HashMap::new();
    for n in negatives {
        by_anchor
            .entry((&n.product_type, &n.u.value_text))
            .or_default()
            .push((&n.u, &n.v));
        if n.kind == PairKind::CrossAttribute {
            by_anchor
                .entry((&n.product_type, &n.v.value_text))
                .or_default()
                .push((&n.v, &n.u));
        }
    }
    let mut triplets = Vec::new();
    let mut skipped = 0;
    for p in positives {
        let t = p.product_type.as_str();
        let mut options: Vec<TripletExample> = Vec::new();
        for (side, other) in [(&p.u, &p.v), (&p.v, &p.u)] {
            for (anchor, negative) in by_anchor.get(&(t, side.value_text.as_str())).into_iter().flatten() {
                options.push(TripletExample {
                    product_type: p.product_type.clone(),
                    anchor: (*anchor).clone(),
                    positive: other.clone(),
                    negative: (*negative).clone(),
                });
            }
        }
        if options.is_empty() {
            skipped += 1;
            continue;
        }
        triplets.extend(options.into_iter().choose_multiple(rng, k));
    }
    (triplets, skipped)
}

/// Distinct sequences of a batch, forwarded once, with the upstream gradient
/// collected per sequence so each is also backpropagated once.
struct SequenceBatch<'a, S> {
    encoder: &'a TinyEncoder<S>,
    slot: HashMap<&'a str, usize>,
    forwards: Vec<Forward<S>>,
    d_hidden: Vec<Array2<S>>,
}

impl<'a, S: Scalar> SequenceBatch<'a, S> {
    /// `suffix` appends `[SEP]` and the product type to each title.
    fn new(
        encoder: &'a TinyEncoder<S>,
        products: &ProductIndex<'a>,
        occurrences: impl IntoIterator<Item = (&'a ValueOccurrence, Option<&'a str>)>,
    ) -> Result<Self> {
        let mut slot = HashMap::new();
        let mut sequences = Vec::new();
        for (occ, suffix) in occurrences {
            if slot.contains_key(occ.product_id.as_str()) {
                continue;
            }
            let title = products.title_of(occ)?;
            let tokens = match suffix {
                Some(t) => classification_sequence(title, t),
                None => title.to_vec(),
            };
            slot.insert(occ.product_id.as_str(), sequences.len());
            sequences.push(encoder.ids(&tokens));
        }
        let forwards = sequences
            .par_iter()
            .map(|ids| encoder.forward(ids))
            .collect::<Result<Vec<_>>>()?;
        let d_hidden = forwards.iter().map(|f| Array2::zeros(f.hidden.raw_dim())).collect();
        Ok(SequenceBatch {
            encoder,
            slot,
            forwards,
            d_hidden,
        })
    }

    fn index(&self, occ: &ValueOccurrence) -> usize {
        self.slot[occ.product_id.as_str()]
    }

    fn pooled(&self, occ: &ValueOccurrence) -> Array1<S> {
        let h = &self.forwards[self.index(occ)].hidden;
        let rows = h.slice(ndarray::s![occ.span.start..occ.span.end, ..]);
        rows.sum_axis(ndarray::Axis(0)) / S::lit(occ.span.len() as f64)
    }

    /// Spreads a gradient on the pooled vector over the span's rows.
    fn add(&mut self, occ: &ValueOccurrence, d_pooled: ArrayView1<S>) {
        let i = self.index(occ);
        let scale = S::one() / S::lit(occ.span.len() as f64);
        for r in occ.span.start..occ.span.end {
            self.d_hidden[i].row_mut(r).scaled_add(scale, &d_pooled);
        }
    }

    fn backward(self, grad: &mut [S]) -> Result<()> {
        let items: Vec<(&Forward<S>, &Array2<S>)> = self.forwards.iter().zip(&self.d_hidden).collect();
        let encoder = self.encoder;
        let (_, g) = accumulate(&items, Some(grad.len()), |(fwd, dh), g| {
            if let Some(g) = g {
                encoder.backward(fwd, dh, g);
            }
            Ok(0.0)
        })?;
        for (o, v) in grad.iter_mut().zip(g.expect("gradient requested")) {
            *o += v;
        }
        Ok(())
    }
}

/// `sum over positives (1 - f)^2 + sum over negatives (-1 - f)^2` where `f`
/// is the cosine similarity of the two value embeddings. Adds the parameter
/// gradient to `grad` when given.
pub fn loss_binary<'a, S: Scalar>(
    encoder: &'a TinyEncoder<S>,
    products: &ProductIndex<'a>,
    batch: &'a [PairExample],
    grad: Option<&mut [S]>,
) -> Result<f64> {
    let mut sb = SequenceBatch::new(encoder, products, batch.iter().flat_map(|p| [(&p.u, None), (&p.v, None)]))?;
    let mut loss = 0.0;
    for p in batch {
        let (f, du, dv) = cosine_with_grad(sb.pooled(&p.u).view(), sb.pooled(&p.v).view());
        let y = S::lit(f64::from(p.label()));
        let r = y - f;
        loss += (r * r).as_f64();
        if grad.is_some() {
            let g = S::lit(-2.0) * r;
            sb.add(&p.u, (du * g).view());
            sb.add(&p.v, (dv * g).view());
        }
    }
    if let Some(grad) = grad {
        sb.backward(grad)?;
    }
    Ok(loss)
}

/// `max(delta_p^2 - delta_n^2 + margin, 0)`.
pub fn triplet_hinge<S: Scalar>(delta_p: S, delta_n: S, margin: S) -> S {
    (delta_p * delta_p - delta_n * delta_n + margin).max(S::zero())
}

/// `sum max(d(a,p)^2 - d(a,n)^2 + margin, 0)` with `d = 1 - cosine`.
pub fn loss_contrastive<'a, S: Scalar>(
    encoder: &'a TinyEncoder<S>,
    products: &ProductIndex<'a>,
    batch: &'a [TripletExample],
    margin: f64,
    grad: Option<&mut [S]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let occs = batch
        .iter()
        .flat_map(|t| [(&t.anchor, None), (&t.positive, None), (&t.negative, None)]);
    let mut sb = SequenceBatch::new(encoder, products, occs)?;
    let mut loss = 0.0;
    let two = S::lit(2.0);
    for t in batch {
        let a = sb.pooled(&t.anchor);
        let (fp, dap, dp) = cosine_with_grad(a.view(), sb.pooled(&t.positive).view());
        let (fn_, dan, dn) = cosine_with_grad(a.view(), sb.pooled(&t.negative).view());
        let (delta_p, delta_n) = (S::one() - fp, S::one() - fn_);
        let hinge = triplet_hinge(delta_p, delta_n, S::lit(margin));
        if hinge <= S::zero() {
            continue;
        }
        loss += hinge.as_f64();
        if grad.is_some() {
            // d hinge / d fp = -2 delta_p, d hinge / d fn = 2 delta_n
            let gp = -two * delta_p;
            let gn = two * delta_n;
            sb.add(&t.anchor, (dap * gp + dan * gn).view());
            sb.add(&t.positive, (dp * gp).view());
            sb.add(&t.negative, (dn * gn).view());
        }
    }
    if let Some(grad) = grad {
        sb.backward(grad)?;
    }
    Ok(loss)
}

/// Mean cross-entropy of the head's prediction on `title [SEP] type`.
/// `grads` receives the encoder and head gradients.
pub fn loss_classification<'a, S: Scalar>(
    encoder: &'a TinyEncoder<S>,
    head: &ClassifierHead<S>,
    products: &ProductIndex<'a>,
    batch: &'a [ClassificationExample],
    grads: Option<(&mut [S], &mut [S])>,
) -> Result<f64> {
    if head.num_labels() == 0 {
        return Err(Error::Empty("classifier has no labels".into()));
    }
    if batch.is_empty() {
        return Ok(0.0);
    }
    if let Some(bad) = batch.iter().find(|e| e.label >= head.num_labels()) {
        return Err(Error::UnknownLabel {
            index: bad.label,
            len: head.num_labels(),
        });
    }
    let occs = batch.iter().map(|e| (&e.occurrence, Some(e.product_type.as_str())));
    let mut sb = SequenceBatch::new(encoder, products, occs)?;
    let inv = S::lit(1.0 / batch.len() as f64);
    let mut loss = 0.0;
    let (mut g_enc, mut g_head) = match grads {
        Some((e, h)) => (Some(e), Some(h)),
        None => (None, None),
    };
    for e in batch {
        let h = sb.pooled(&e.occurrence);
        let p = softmax(head.logits(h.view()).view());
        loss -= p[e.label].max(S::min_positive_value()).as_f64().ln();
        if let Some(gh) = g_head.as_deref_mut() {
            let mut dlogits = p * inv;
            dlogits[e.label] -= inv;
            let dh = head.backward(h.view(), dlogits.view(), gh);
            sb.add(&e.occurrence, dh.view());
        }
    }
    if let Some(g) = g_enc.as_deref_mut() {
        sb.backward(g)?;
    }
    Ok(loss / batch.len() as f64)
}

/// Everything one call to [`train`] consumes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingData {
    /// Positive and negative pairs.
    pub pairs: Vec<PairExample>,
    pub triplets: Vec<TripletExample>,
    pub classification: Vec<ClassificationExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Contrastive,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub task: Task,
    pub loss: f64,
}

/// Classification examples for every occurrence sample of the training
/// clusters whose label is in the head's table.
pub fn classification_examples(
    clusters: &TrainingClusters,
    head: &ClassifierHead<impl Scalar>,
    per_value: usize,
    rng: &mut impl Rng,
) -> Vec<ClassificationExample> {
    let mut out = Vec::new();
    for (t, by_label) in clusters {
        for (label, values) in by_label {
            let Some(index) = head.labels().get(&crate::encoder::Label::new(t.as_str(), label.as_str())) else {
                continue;
            };
            for occs in values.values() {
                for occ in occs.choose_multiple(rng, per_value) {
                    out.push(ClassificationExample {
                        occurrence: occ.clone(),
                        product_type: t.clone(),
                        label: index,
                    });
                }
            }
        }
    }
    out
}

fn batches<T: Clone>(items: &[T], size: usize, rng: &mut impl Rng) -> Vec<Vec<T>> {
    let mut items = items.to_vec();
    items.shuffle(rng);
    items.chunks(size).map(<[T]>::to_vec).collect()
}

enum Batch {
    Pairs(Vec<PairExample>),
    Triplets(Vec<TripletExample>),
    Classification(Vec<ClassificationExample>),
}

/// Runs the shuffled multitask schedule for `config.epochs` epochs.
///
/// Each batch holds one task and takes one optimizer step. The head, when
/// present, is only touched by classification batches; without a head the
/// classification examples are ignored.
pub fn train<S: Scalar>(
    encoder: &mut TinyEncoder<S>,
    mut head: Option<&mut ClassifierHead<S>>,
    products: &ProductIndex<'_>,
    data: &TrainingData,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::Empty("training needs at least one binary pair".into()));
    }
    let mut opt = Adam::new(encoder.param_count(), config.lr);
    let mut head_opt = head.as_ref().map(|h| Adam::new(h.params().len(), config.lr));
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        let mut schedule: Vec<Batch> = batches(&data.pairs, config.batch_size, rng)
            .into_iter()
            .map(Batch::Pairs)
            .chain(batches(&data.triplets, config.batch_size, rng).into_iter().map(Batch::Triplets))
            .collect();
        if head.as_ref().is_some_and(|h| h.num_labels() > 0) {
            let share = config.max_classification_share;
            let cap = (share / (1.0 - share) * schedule.len() as f64).floor() as usize;
            let mut cls = batches(&data.classification, config.batch_size, rng);
            cls.truncate(cap);
            schedule.extend(cls.into_iter().map(Batch::Classification));
        }
        if schedule.is_empty() {
            return Err(Error::Empty("no training batches".into()));
        }
        schedule.shuffle(rng);
        for batch in &schedule {
            let mut grad = vec![S::zero(); encoder.param_count()];
            let (task, loss, weight) = match batch {
                Batch::Pairs(b) => (
                    Task::Binary,
                    loss_binary(encoder, products, b, Some(&mut grad))?,
                    config.task_weights.binary,
                ),
                Batch::Triplets(b) => (
                    Task::Contrastive,
                    loss_contrastive(encoder, products, b, config.margin, Some(&mut grad))?,
                    config.task_weights.contrastive,
                ),
                Batch::Classification(b) => {
                    let h = head.as_deref_mut().expect("classification batches need a head");
                    let mut hgrad = vec![S::zero(); h.params().len()];
                    let loss = loss_classification(encoder, h, products, b, Some((&mut grad, &mut hgrad)))?;
                    scale(&mut hgrad, weight_of(config.task_weights.classification));
                    clip_grad_norm(&mut hgrad, config.grad_clip);
                    if let Some(o) = head_opt.as_mut() {
                        o.step(h.params_mut(), &hgrad);
                    }
                    (Task::Classification, loss, config.task_weights.classification)
                }
            };
            scale(&mut grad, weight_of(weight));
            clip_grad_norm(&mut grad, config.grad_clip);
            opt.step(encoder.params_mut(), &grad);
            history.push(StepRecord {
                step: history.len(),
                epoch,
                task,
                loss,
            });
        }
        let mean = history.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).sum::<f64>()
            / history.iter().filter(|r| r.epoch == epoch).count() as f64;
        log::info!("epoch {epoch}: {} steps, mean batch loss {mean:.4}", schedule.len());
    }
    Ok(history)
}

fn weight_of(w: f64) -> f64 {
    w.max(0.0)
}

fn scale<S: Scalar>(grad: &mut [S], w: f64) {
    if w != 1.0 {
        let w = S::lit(w);
        grad.iter_mut().for_each(|g| *g *= w);
    }
}

fn occ_fields(o: &ValueOccurrence) -> String {
    format!("{}\t{}\t{}", o.product_id, o.span.start, o.span.end)
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `pairs.tsv`, `triplets.tsv` and `classification.tsv` into `dir`.
pub fn write_training_set(dir: impl AsRef<Path>, data: &TrainingData) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(
        &dir.join("pairs.tsv"),
        "type\tu_product\tu_start\tu_end\tv_product\tv_start\tv_end\tlabel\tkind",
        data.pairs.iter().map(|p| {
            format!(
                "{}\t{}\t{}\t{}\t{}",
                p.product_type,
                occ_fields(&p.u),
                occ_fields(&p.v),
                p.label(),
                p.kind.as_str()
            )
        }),
    )?;
    write_lines(
        &dir.join("triplets.tsv"),
        "type\ta_product\ta_start\ta_end\tp_product\tp_start\tp_end\tn_product\tn_start\tn_end",
        data.triplets.iter().map(|t| {
            format!(
                "{}\t{}\t{}\t{}",
                t.product_type,
                occ_fields(&t.anchor),
                occ_fields(&t.positive),
                occ_fields(&t.negative)
            )
        }),
    )?;
    write_lines(
        &dir.join("classification.tsv"),
        "type\tproduct\tstart\tend\tlabel",
        data.classification
            .iter()
            .map(|c| format!("{}\t{}\t{}", c.product_type, occ_fields(&c.occurrence), c.label)),
    )
}

/// Step-indexed loss records as JSON lines.
pub fn write_loss_history(path: impl AsRef<Path>, history: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
