//! Products, seed sets, value occurrences and the files that carry them.

mod io;
mod seeds;
mod synthetic;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_clusters, load_corpus, load_gold_spans, read_clusters, write_clusters, write_corpus,
    write_gold_spans, CorpusLoad, GoldSpan, GoldSpans,
};
pub use seeds::{load_seed_sets, match_seeds_to_occurrences, SeedMatches, SeedSets};
pub use synthetic::{generate_synthetic_corpus, GroundTruthSchema, SyntheticCorpus, TypeSchema};

/// Reserved cluster id for values that were not assigned to any attribute.
pub const NOISE_CLUSTER: &str = "__noise__";

/// Default cap on title length, in tokens.
pub const DEFAULT_MAX_TOKENS: usize = 64;

/// `{product_type: {cluster_id: [value, ...]}}`, the shape shared by gold,
/// prediction and training-cluster files.
pub type Clusters = BTreeMap<String, BTreeMap<String, Vec<String>>>;

/// A product title with its type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub product_type: String,
    pub tokens: Vec<String>,
}

impl Product {
    pub fn title(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Checks `start < end <= len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.start < self.end && self.end <= len {
            Ok(())
        } else {
            Err(Error::InvalidSpan {
                start: self.start,
                end: self.end,
                len,
            })
        }
    }
}

/// A value hypothesized (or known) to occur at `span` in a product title.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValueOccurrence {
    pub product_id: String,
    pub span: Span,
    pub value_text: String,
}

impl ValueOccurrence {
    /// Builds an occurrence from a product and span, deriving the text.
    pub fn from_product(product: &Product, span: Span) -> Result<Self> {
        span.validate(product.len())?;
        Ok(ValueOccurrence {
            product_id: product.id.clone(),
            span,
            value_text: product.tokens[span.start..span.end].join(" "),
        })
    }
}

/// Lowercases and splits on whitespace and punctuation.
///
/// A `.` or `,` between two digits is kept so that `4.5` stays one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let numeric_separator = (c == '.' || c == ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_whitespace() || (is_punctuation(c) && !numeric_separator) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            current.extend(c.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{00a1}' | '\u{00ab}' | '\u{00bb}' | '\u{00bf}' | '\u{3001}' | '\u{3002}'
        )
}

/// Normalizes a free-text value into the canonical space-joined token form.
pub fn normalize_value(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Index from product id to position in a corpus slice.
pub fn index_by_id(products: &[Product]) -> BTreeMap<&str, usize> {
    products
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect()
}

/// Borrowed lookup from product id to product.
#[derive(Clone, Debug, Default)]
pub struct ProductIndex<'a> {
    by_id: HashMap<&'a str, &'a Product>,
}

impl<'a> ProductIndex<'a> {
    pub fn new(products: &'a [Product]) -> Self {
        ProductIndex {
            by_id: products.iter().map(|p| (p.id.as_str(), p)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&'a Product> {
        self.by_id.get(id).copied().ok_or_else(|| Error::UnknownProduct(id.to_owned()))
    }

    /// Tokens covered by an occurrence, checked against the title.
    pub fn title_of(&self, occurrence: &ValueOccurrence) -> Result<&'a [String]> {
        let p = self.get(&occurrence.product_id)?;
        occurrence.span.validate(p.len())?;
        Ok(&p.tokens)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(tokenize("Starbucks Dark Roast"), ["starbucks", "dark", "roast"]);
        assert_eq!(
            tokenize("TCL 50-inch 4K UHD, (2021)"),
            ["tcl", "50", "inch", "4k", "uhd", "2021"]
        );
        assert_eq!(tokenize("4.5 oz, 1,000 ct"), ["4.5", "oz", "1,000", "ct"]);
        assert!(tokenize("  \t ").is_empty());
    }

    #[test]
    fn occurrence_text_matches_span() {
        let p = Product {
            id: "p1".into(),
            product_type: "coffee".into(),
            tokens: tokenize("starbucks dark roast"),
        };
        let occ = ValueOccurrence::from_product(&p, Span::new(1, 3)).unwrap();
        assert_eq!(occ.value_text, "dark roast");
        assert!(ValueOccurrence::from_product(&p, Span::new(2, 2)).is_err());
        assert!(ValueOccurrence::from_product(&p, Span::new(2, 4)).is_err());
    }
}
