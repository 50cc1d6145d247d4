//! Synthetic product titles with known attribute structure.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Clusters, GoldSpan, GoldSpans, Product};
use crate::error::{Error, Result};

const MAX_VALUES_PER_TITLE: usize = 12;
const MAX_NOISE_PHRASES: usize = 2;

/// Attribute vocabularies of one product type.
pub type TypeSchema = BTreeMap<String, Vec<String>>;

/// Ground truth for the synthetic title generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSchema {
    pub types: BTreeMap<String, TypeSchema>,
    /// Attributes sampled per title; capped at the type's attribute count and 12.
    pub values_per_title: usize,
    /// Probability of appending each (up to two) filler phrase.
    pub noise_p: f64,
    /// Filler phrases, disjoint from every attribute vocabulary.
    pub noise_vocab: Vec<String>,
    pub seed: u64,
}

/// Titles plus the answers they were generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub products: Vec<Product>,
    /// `{type: {attribute: [values emitted]}}`.
    pub gold: Clusters,
    /// Every phrase of every title, filler phrases with `attribute: None`.
    pub spans: GoldSpans,
}

impl GroundTruthSchema {
    /// Random pseudo-word vocabularies: `n_types` types with `n_attributes`
    /// attributes of `n_values` values each.
    ///
    /// Each attribute owns a "unit" word; a `unit_fraction` share of its
    /// values are two tokens long and end in that unit, the way sizes end in
    /// "oz" or roasts end in "roast".
    pub fn random(
        n_types: usize,
        n_attributes: usize,
        n_values: usize,
        unit_fraction: f64,
        noise_p: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5c7e_a0a0_0001);
        let mut words = WordFactory::default();
        let mut types = BTreeMap::new();
        for _ in 0..n_types {
            let type_name = words.fresh(&mut rng, 3);
            let mut attrs = BTreeMap::new();
            for a in 0..n_attributes {
                let unit = words.fresh(&mut rng, 1);
                let mut values = Vec::with_capacity(n_values);
                for _ in 0..n_values {
                    let head = words.fresh(&mut rng, 2);
                    if rng.gen_bool(unit_fraction.clamp(0.0, 1.0)) {
                        values.push(format!("{head} {unit}"));
                    } else {
                        values.push(head);
                    }
                }
                attrs.insert(format!("attr{a}"), values);
            }
            types.insert(type_name, attrs);
        }
        let noise_vocab = (0..12)
            .map(|i| {
                if i % 3 == 0 {
                    format!("{} {}", words.fresh(&mut rng, 2), words.fresh(&mut rng, 1))
                } else {
                    words.fresh(&mut rng, 2)
                }
            })
            .collect();
        GroundTruthSchema {
            types,
            values_per_title: n_attributes,
            noise_p,
            noise_vocab,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(Error::Schema(format!("noise_p {} outside [0, 1]", self.noise_p)));
        }
        if self.noise_p > 0.0 && self.noise_vocab.is_empty() {
            return Err(Error::Schema("noise_p > 0 but noise vocabulary is empty".into()));
        }
        let noise_tokens: HashSet<&str> = self
            .noise_vocab
            .iter()
            .flat_map(|p| p.split_whitespace())
            .collect();
        for (t, attrs) in &self.types {
            let mut seen: HashSet<&str> = HashSet::new();
            for (a, values) in attrs {
                if values.is_empty() {
                    return Err(Error::Schema(format!("attribute `{t}/{a}` has an empty vocabulary")));
                }
                for v in values {
                    if !seen.insert(v) {
                        return Err(Error::Schema(format!(
                            "value `{v}` appears in more than one attribute of `{t}`"
                        )));
                    }
                    if v.split_whitespace().any(|tok| noise_tokens.contains(tok)) {
                        return Err(Error::Schema(format!(
                            "value `{v}` shares a token with the noise vocabulary"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Generates `n_products` titles; identical schemas give identical output.
///
/// Each title takes one value from each of a random subset of attributes,
/// optionally adds filler phrases, and shuffles the phrase order. No
/// attribute contributes two values to the same title.
pub fn generate_synthetic_corpus(schema: &GroundTruthSchema, n_products: usize) -> Result<SyntheticCorpus> {
    schema.validate()?;
    let mut out = SyntheticCorpus {
        products: Vec::with_capacity(n_products),
        gold: Clusters::new(),
        spans: GoldSpans::new(),
    };
    if n_products == 0 {
        return Ok(out);
    }
    let type_names: Vec<&String> = schema.types.keys().filter(|t| !schema.types[*t].is_empty()).collect();
    if type_names.is_empty() {
        return Err(Error::Schema("schema has no product type with attributes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schema.seed);
    let mut gold: BTreeMap<String, BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();

    for i in 0..n_products {
        let t = type_names[rng.gen_range(0..type_names.len())];
        let attrs: Vec<(&String, &Vec<String>)> = schema.types[t].iter().collect();
        let k = schema
            .values_per_title
            .clamp(1, MAX_VALUES_PER_TITLE)
            .min(attrs.len());
        let chosen: Vec<&(&String, &Vec<String>)> = attrs.choose_multiple(&mut rng, k).collect();
        let mut phrases: Vec<(String, Option<String>)> = Vec::with_capacity(k + MAX_NOISE_PHRASES);
        for (a, values) in chosen {
            let v = &values[rng.gen_range(0..values.len())];
            phrases.push((v.clone(), Some((*a).clone())));
        }
        let mut noise = 0;
        while noise < MAX_NOISE_PHRASES && schema.noise_p > 0.0 && rng.gen_bool(schema.noise_p) {
            let phrase = &schema.noise_vocab[rng.gen_range(0..schema.noise_vocab.len())];
            phrases.push((phrase.clone(), None));
            noise += 1;
        }
        phrases.shuffle(&mut rng);

        let id = format!("syn{i:06}");
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(phrases.len());
        for (phrase, attr) in phrases {
            let start = tokens.len();
            tokens.extend(phrase.split_whitespace().map(str::to_owned));
            if let Some(a) = &attr {
                gold.entry(t.clone())
                    .or_default()
                    .entry(a.clone())
                    .or_default()
                    .insert(phrase.clone());
            }
            spans.push(GoldSpan {
                start,
                end: tokens.len(),
                attribute: attr,
            });
        }
        out.spans.insert(id.clone(), spans);
        out.products.push(Product {
            id,
            product_type: t.clone(),
            tokens,
        });
    }
    out.gold = gold
        .into_iter()
        .map(|(t, attrs)| (t, attrs.into_iter().map(|(a, vs)| (a, vs.into_iter().collect())).collect()))
        .collect();
    Ok(out)
}

#[derive(Default)]
struct WordFactory {
    used: HashSet<String>,
}

impl WordFactory {
    const ONSETS: &'static [&'static str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr",
    ];
    const VOWELS: &'static [&'static str] = &["a", "e", "i", "o", "u", "ai", "ou"];

    fn fresh(&mut self, rng: &mut impl Rng, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables.max(1) {
                w.push_str(Self::ONSETS[rng.gen_range(0..Self::ONSETS.len())]);
                w.push_str(Self::VOWELS[rng.gen_range(0..Self::VOWELS.len())]);
            }
            if syllables == 1 {
                w.push(['n', 'x', 'k', 'm'][rng.gen_range(0..4)]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}
