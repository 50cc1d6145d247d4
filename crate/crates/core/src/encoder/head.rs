use std::collections::HashMap;
use std::fmt;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{mean_pool, ContextEncoder, SEP_TOKEN};
use crate::corpus::{tokenize, ValueOccurrence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A `(product_type, attribute)` class of the global label space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub product_type: String,
    pub attribute: String,
}

impl Label {
    pub fn new(product_type: impl Into<String>, attribute: impl Into<String>) -> Self {
        Label {
            product_type: product_type.into(),
            attribute: attribute.into(),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.product_type, self.attribute)
    }
}

/// Append-only mapping between class indices and labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<Label>", into = "Vec<Label>")]
pub struct LabelTable {
    labels: Vec<Label>,
    index: HashMap<Label, usize>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of `label`, adding it if new.
    pub fn insert(&mut self, label: Label) -> usize {
        if let Some(&i) = self.index.get(&label) {
            return i;
        }
        let i = self.labels.len();
        self.index.insert(label.clone(), i);
        self.labels.push(label);
        i
    }

    pub fn get(&self, label: &Label) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> Option<&Label> {
        self.labels.get(index)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Label> {
        self.labels.iter()
    }

    pub fn for_type<'a>(&'a self, product_type: &'a str) -> impl Iterator<Item = (usize, &'a Label)> + 'a {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.product_type == product_type)
    }
}

impl From<Vec<Label>> for LabelTable {
    fn from(labels: Vec<Label>) -> Self {
        let mut t = LabelTable::new();
        for l in labels {
            t.insert(l);
        }
        t
    }
}

impl From<LabelTable> for Vec<Label> {
    fn from(t: LabelTable) -> Self {
        t.labels
    }
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: ArrayView1<S>) -> Array1<S> {
    let max = logits.fold(S::neg_infinity(), |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Linear layer from the pooled value vector to one logit per label.
///
/// Parameters are stored row-wise, `[w_k (dim values), b_k]` per label, so
/// new labels append rows without disturbing trained ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<S> {
    labels: LabelTable,
    dim: usize,
    params: Vec<S>,
}

impl<S: Scalar> ClassifierHead<S> {
    /// All-zero head: uniform predictions until trained.
    pub fn new(labels: LabelTable, dim: usize) -> Self {
        let params = vec![S::zero(); labels.len() * (dim + 1)];
        ClassifierHead { labels, dim, params }
    }

    pub fn from_parts(labels: LabelTable, dim: usize, params: Vec<S>) -> Result<Self> {
        if params.len() != labels.len() * (dim + 1) {
            return Err(Error::Checkpoint(format!(
                "head expects {} parameters, found {}",
                labels.len() * (dim + 1),
                params.len()
            )));
        }
        Ok(ClassifierHead { labels, dim, params })
    }

    pub fn labels(&self) -> &LabelTable {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    /// Adopts a grown label table, adding zero rows for the new labels.
    pub fn extend_labels(&mut self, table: &LabelTable) -> Result<()> {
        for (i, l) in self.labels.iter().enumerate() {
            if table.label(i) != Some(l) {
                return Err(Error::Checkpoint(format!(
                    "label table is not an extension of the head's labels (mismatch at {l})"
                )));
            }
        }
        self.params.resize(table.len() * (self.dim + 1), S::zero());
        self.labels = table.clone();
        Ok(())
    }

    /// Sets the weights and bias of one label.
    pub fn set_row(&mut self, label: usize, weights: &[S], bias: S) {
        let w = self.dim + 1;
        self.params[label * w..label * w + self.dim].copy_from_slice(weights);
        self.params[label * w + self.dim] = bias;
    }

    pub fn logits(&self, h: ArrayView1<S>) -> Array1<S> {
        let w = self.dim + 1;
        Array1::from_iter((0..self.labels.len()).map(|k| {
            let row = &self.params[k * w..(k + 1) * w];
            row[..self.dim].iter().zip(h.iter()).map(|(&a, &b)| a * b).sum::<S>() + row[self.dim]
        }))
    }

    pub fn probabilities(&self, h: ArrayView1<S>) -> Result<Array1<S>> {
        if self.labels.is_empty() {
            return Err(Error::Empty("classifier has no labels".into()));
        }
        Ok(softmax(self.logits(h).view()))
    }

    /// Accumulates head gradients for upstream `dlogits`; returns d/dh.
    pub(crate) fn backward(&self, h: ArrayView1<S>, dlogits: ArrayView1<S>, grad: &mut [S]) -> Array1<S> {
        let w = self.dim + 1;
        let mut dh = Array1::<S>::zeros(self.dim);
        for (k, &g) in dlogits.iter().enumerate() {
            let row = &self.params[k * w..(k + 1) * w];
            let grow = &mut grad[k * w..(k + 1) * w];
            for j in 0..self.dim {
                grow[j] += g * h[j];
                dh[j] += g * row[j];
            }
            grow[self.dim] += g;
        }
        dh
    }
}

/// `title ++ [SEP] ++ product-type tokens`, the classifier's input.
pub fn classification_sequence(title: &[String], product_type: &str) -> Vec<String> {
    let mut seq = title.to_vec();
    seq.push(SEP_TOKEN.to_owned());
    seq.extend(tokenize(product_type));
    seq
}

/// Probability of each label for one occurrence, pooling the occurrence span
/// of the encoded `title [SEP] type` sequence.
pub fn classify<S: Scalar, E: ContextEncoder<S> + ?Sized>(
    encoder: &E,
    head: &ClassifierHead<S>,
    occurrence: &ValueOccurrence,
    title: &[String],
    product_type: &str,
) -> Result<Array1<S>> {
    if head.num_labels() == 0 {
        return Err(Error::Empty("classifier has no labels".into()));
    }
    occurrence.span.validate(title.len())?;
    let hidden = encoder.encode(&classification_sequence(title, product_type))?;
    head.probabilities(mean_pool(&hidden, occurrence.span)?.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn table(n: usize) -> LabelTable {
        (0..n).map(|i| Label::new("t", format!("a{i}"))).collect::<Vec<_>>().into()
    }

    #[test]
    fn zero_head_is_uniform() {
        let head = ClassifierHead::<f64>::new(table(4), 3);
        let p = head.probabilities(array![0.3, -2.0, 5.0].view()).unwrap();
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_set_logits() {
        let mut head = ClassifierHead::<f64>::new(table(4), 2);
        head.set_row(0, &[0.0, 0.0], 2.0);
        let p = head.probabilities(array![1.0, 1.0].view()).unwrap();
        let expected = [0.7113, 0.0962, 0.0962, 0.0962];
        for (a, b) in p.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        let mut head = ClassifierHead::<f64>::new(table(3), 2);
        head.set_row(1, &[100.0, 0.0], 0.0);
        let p = head.probabilities(array![1.0, 0.0].view()).unwrap();
        assert!(p[1] >= 1.0 - 1e-6);
    }

    #[test]
    fn empty_label_space_is_error() {
        let head = ClassifierHead::<f64>::new(LabelTable::new(), 2);
        assert!(head.probabilities(array![1.0, 0.0].view()).is_err());
    }

    #[test]
    fn extending_labels_keeps_trained_rows() {
        let mut head = ClassifierHead::<f64>::new(table(2), 2);
        head.set_row(1, &[1.0, 2.0], 3.0);
        let mut bigger = table(2);
        bigger.insert(Label::new("u", "new_1"));
        head.extend_labels(&bigger).unwrap();
        assert_eq!(head.num_labels(), 3);
        assert_eq!(&head.params()[3..6], &[1.0, 2.0, 3.0]);
        assert!(head.extend_labels(&table(1)).is_err());
    }

    #[test]
    fn label_table_is_append_only_and_idempotent() {
        let mut t = LabelTable::new();
        assert_eq!(t.insert(Label::new("coffee", "brand")), 0);
        assert_eq!(t.insert(Label::new("tea", "brand")), 1);
        assert_eq!(t.insert(Label::new("coffee", "brand")), 0);
        assert_eq!(t.label(1).unwrap().to_string(), "tea/brand");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..10),
            rot in 0usize..10,
        ) {
            let l = Array1::from(logits.clone());
            let p = softmax(l.view());
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let k = rot % logits.len();
            let mut rotated = logits.clone();
            rotated.rotate_left(k);
            let pr = softmax(Array1::from(rotated).view());
            for i in 0..logits.len() {
                prop_assert!((pr[i] - p[(i + k) % logits.len()]).abs() < 1e-12);
            }
        }
    }
}
