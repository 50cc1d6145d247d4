use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{MASK_TOKEN, SEP_TOKEN, UNK_TOKEN};
use crate::corpus::{tokenize, Product};

/// Word-level vocabulary. Ids 0, 1 and 2 are `[UNK]`, `[MASK]` and `[SEP]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK: usize = 0;
    pub const MASK: usize = 1;
    pub const SEP: usize = 2;

    /// Every title token and product-type token, sorted.
    pub fn from_corpus(products: &[Product]) -> Self {
        let mut words = BTreeSet::new();
        for p in products {
            words.extend(p.tokens.iter().cloned());
            words.extend(tokenize(&p.product_type));
        }
        Self::from_words(words)
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![UNK_TOKEN.to_owned(), MASK_TOKEN.to_owned(), SEP_TOKEN.to_owned()];
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_unknown_maps_to_unk() {
        let v = Vocab::from_words(["b".to_string(), "a".to_string()]);
        assert_eq!(v.id(MASK_TOKEN), Vocab::MASK);
        assert_eq!(v.id(SEP_TOKEN), Vocab::SEP);
        assert_eq!(v.id("zzz"), Vocab::UNK);
        assert_eq!(v.token(3), Some("b"));
        assert_eq!(v.len(), 5);
    }
}
