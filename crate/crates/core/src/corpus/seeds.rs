use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use serde::de::{Deserialize, Deserializer, MapAccess, Visitor};

use super::{normalize_value, Product, Span, ValueOccurrence};
use crate::error::{Error, Result};

/// Known values per attribute per product type: the only supervision the
/// pipeline receives.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeedSets {
    types: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl SeedSets {
    /// Builds seed sets from raw strings, normalizing values.
    pub fn new<T, A, V>(types: impl IntoIterator<Item = (T, A)>) -> Result<Self>
    where
        T: Into<String>,
        A: IntoIterator<Item = (String, V)>,
        V: IntoIterator<Item = String>,
    {
        let mut out = BTreeMap::new();
        for (t, attrs) in types {
            let t = t.into();
            let mut map = BTreeMap::new();
            for (attr, values) in attrs {
                insert_attribute(&t, &mut map, attr, values.into_iter().collect())?;
            }
            if out.insert(t.clone(), map).is_some() {
                return Err(Error::Seeds(format!("duplicate product type `{t}`")));
            }
        }
        Ok(SeedSets { types: out })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: UniqueMap<UniqueMap<Vec<String>>> = serde_json::from_str(text)?;
        let mut types = BTreeMap::new();
        for (t, attrs) in raw.0 {
            let mut map = BTreeMap::new();
            for (attr, values) in attrs.0 {
                insert_attribute(&t, &mut map, attr, values)?;
            }
            if types.insert(t.clone(), map).is_some() {
                return Err(Error::Seeds(format!("duplicate product type `{t}`")));
            }
        }
        Ok(SeedSets { types })
    }

    pub fn product_types(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }

    pub fn attributes(&self, product_type: &str) -> Option<&BTreeMap<String, Vec<String>>> {
        self.types.get(product_type)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &[String])> {
        self.types.iter().flat_map(|(t, attrs)| {
            attrs
                .iter()
                .map(move |(a, vs)| (t.as_str(), a.as_str(), vs.as_slice()))
        })
    }

    pub fn as_map(&self) -> &BTreeMap<String, BTreeMap<String, Vec<String>>> {
        &self.types
    }

    /// Keeps only the listed attributes of each type (used to withhold
    /// attributes in held-out experiments).
    pub fn retain(&mut self, mut keep: impl FnMut(&str, &str) -> bool) {
        for (t, attrs) in self.types.iter_mut() {
            attrs.retain(|a, _| keep(t, a));
        }
        self.types.retain(|_, attrs| !attrs.is_empty());
    }
}

fn insert_attribute(
    product_type: &str,
    map: &mut BTreeMap<String, Vec<String>>,
    attr: String,
    values: Vec<String>,
) -> Result<()> {
    let name = attr.trim().to_lowercase();
    if name.is_empty() {
        return Err(Error::Seeds(format!("empty attribute name in `{product_type}`")));
    }
    let mut normalized: Vec<String> = Vec::with_capacity(values.len());
    for v in &values {
        let n = normalize_value(v);
        if n.is_empty() {
            return Err(Error::Seeds(format!(
                "seed `{v}` of `{product_type}/{name}` has no tokens"
            )));
        }
        if !normalized.contains(&n) {
            normalized.push(n);
        }
    }
    if normalized.is_empty() {
        return Err(Error::Seeds(format!(
            "attribute `{product_type}/{name}` has an empty seed list"
        )));
    }
    if normalized.len() > 5 {
        log::warn!(
            "attribute `{product_type}/{name}` has {} seeds; the method assumes a handful",
            normalized.len()
        );
    }
    if map.insert(name.clone(), normalized).is_some() {
        return Err(Error::Seeds(format!(
            "duplicate attribute `{name}` in product type `{product_type}`"
        )));
    }
    Ok(())
}

pub fn load_seed_sets(path: impl AsRef<Path>) -> Result<SeedSets> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SeedSets::from_json(&text)
}

/// JSON object read as an ordered list of entries so duplicate keys survive
/// long enough to be rejected.
struct UniqueMap<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for UniqueMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for EntriesVisitor<V> {
            type Value = UniqueMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<M: MapAccess<'de>>(self, mut access: M) -> std::result::Result<Self::Value, M::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, V>()? {
                    entries.push((k, v));
                }
                Ok(UniqueMap(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor(PhantomData))
    }
}

/// `(product_type, attribute, value)`.
pub type SeedKey = (String, String, String);

/// Corpus occurrences of every seed value.
#[derive(Clone, Debug, Default)]
pub struct SeedMatches {
    pub occurrences: BTreeMap<SeedKey, Vec<ValueOccurrence>>,
}

impl SeedMatches {
    /// Seeds that never occur in the corpus. They stay in the map with an
    /// empty list but cannot be used to build training pairs.
    pub fn unmatched(&self) -> impl Iterator<Item = &SeedKey> {
        self.occurrences
            .iter()
            .filter(|(_, occ)| occ.is_empty())
            .map(|(k, _)| k)
    }
}

/// String-matches every seed value against titles of its product type.
///
/// Overlapping matches in one title are resolved longest first, then
/// left-most, so returned occurrences for a product never overlap.
pub fn match_seeds_to_occurrences(seeds: &SeedSets, corpus: &[Product]) -> SeedMatches {
    let mut out = SeedMatches::default();
    // per type: first token -> [(value tokens, value text, attributes)]
    let mut index: HashMap<&str, HashMap<&str, Vec<(Vec<&str>, &str, Vec<&str>)>>> = HashMap::new();
    for (t, attr, values) in seeds.iter() {
        for v in values {
            out.occurrences
                .insert((t.to_owned(), attr.to_owned(), v.clone()), Vec::new());
            let toks: Vec<&str> = v.split(' ').collect();
            let bucket = index.entry(t).or_default().entry(toks[0]).or_default();
            match bucket.iter_mut().find(|(_, text, _)| *text == v.as_str()) {
                Some(entry) => entry.2.push(attr),
                None => bucket.push((toks, v.as_str(), vec![attr])),
            }
        }
    }

    for product in corpus {
        let Some(by_first) = index.get(product.product_type.as_str()) else {
            continue;
        };
        let mut found: Vec<(Span, &str, &[&str])> = Vec::new();
        for start in 0..product.len() {
            let Some(cands) = by_first.get(product.tokens[start].as_str()) else {
                continue;
            };
            for (toks, text, attrs) in cands {
                let end = start + toks.len();
                if end <= product.len()
                    && product.tokens[start..end].iter().zip(toks).all(|(a, b)| a == b)
                {
                    found.push((Span::new(start, end), text, attrs));
                }
            }
        }
        found.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.start.cmp(&b.0.start)));
        let mut taken: Vec<Span> = Vec::new();
        for (span, text, attrs) in found {
            if taken.iter().any(|s| s.overlaps(&span)) {
                continue;
            }
            taken.push(span);
            for attr in attrs {
                let key = (product.product_type.clone(), (*attr).to_owned(), text.to_owned());
                out.occurrences.entry(key).or_default().push(ValueOccurrence {
                    product_id: product.id.clone(),
                    span,
                    value_text: text.to_owned(),
                });
            }
        }
    }
    for ((t, a, v), occ) in &out.occurrences {
        if occ.is_empty() {
            log::warn!("seed `{v}` of `{t}/{a}` does not occur in the corpus");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    fn product(id: &str, t: &str, title: &str) -> Product {
        Product {
            id: id.into(),
            product_type: t.into(),
            tokens: tokenize(title),
        }
    }

    #[test]
    fn parses_nested_map() {
        let s = SeedSets::from_json(r#"{"coffee":{"brand":["Starbucks","folgers"]}}"#).unwrap();
        assert_eq!(s.product_types().count(), 1);
        assert_eq!(s.attributes("coffee").unwrap()["brand"], ["starbucks", "folgers"]);
    }

    #[test]
    fn rejects_empty_value_list() {
        assert!(matches!(
            SeedSets::from_json(r#"{"coffee":{"brand":[]}}"#),
            Err(Error::Seeds(_))
        ));
    }

    #[test]
    fn rejects_duplicate_attribute_in_type() {
        let r = SeedSets::from_json(r#"{"coffee":{"brand":["a"],"brand":["b"]}}"#);
        assert!(matches!(r, Err(Error::Seeds(_))), "{r:?}");
        let r = SeedSets::from_json(r#"{"coffee":{"brand":["a"],"Brand":["b"]}}"#);
        assert!(matches!(r, Err(Error::Seeds(_))), "{r:?}");
    }

    #[test]
    fn same_attribute_name_across_types_is_fine() {
        let s = SeedSets::from_json(r#"{"coffee":{"brand":["a"]},"tea":{"brand":["b"]}}"#).unwrap();
        assert_eq!(s.iter().count(), 2);
    }

    #[test]
    fn matches_multi_token_seed() {
        let seeds = SeedSets::from_json(r#"{"coffee":{"roast":["dark roast"],"misc":["decaf"]}}"#).unwrap();
        let corpus = vec![product("p1", "coffee", "Starbucks Dark Roast")];
        let m = match_seeds_to_occurrences(&seeds, &corpus);
        let occ = &m.occurrences[&("coffee".into(), "roast".into(), "dark roast".into())];
        assert_eq!(occ.len(), 1);
        assert_eq!(occ[0].span, Span::new(1, 3));
        let unmatched: Vec<_> = m.unmatched().collect();
        assert_eq!(unmatched, vec![&("coffee".to_string(), "misc".to_string(), "decaf".to_string())]);
    }

    #[test]
    fn longest_match_wins() {
        let seeds =
            SeedSets::from_json(r#"{"coffee":{"roast":["dark roast"],"kind":["roast"]}}"#).unwrap();
        let corpus = vec![
            product("p1", "coffee", "starbucks dark roast"),
            product("p2", "coffee", "light roast beans"),
        ];
        let m = match_seeds_to_occurrences(&seeds, &corpus);
        let roast = &m.occurrences[&("coffee".into(), "kind".into(), "roast".into())];
        assert_eq!(roast.len(), 1);
        assert_eq!(roast[0].product_id, "p2");
        assert_eq!(roast[0].span, Span::new(1, 2));
    }

    #[test]
    fn other_types_are_not_matched() {
        let seeds = SeedSets::from_json(r#"{"coffee":{"brand":["lipton"]}}"#).unwrap();
        let corpus = vec![product("p1", "tea", "lipton green tea")];
        let m = match_seeds_to_occurrences(&seeds, &corpus);
        assert_eq!(m.unmatched().count(), 1);
    }

    /// All exact token matches, enumerated over every span.
    fn all_exact_matches(tokens: &[String], values: &[String]) -> Vec<(Span, String)> {
        let mut out = Vec::new();
        for s in 0..tokens.len() {
            for e in s + 1..=tokens.len() {
                let text = tokens[s..e].join(" ");
                if values.contains(&text) {
                    out.push((Span::new(s, e), text));
                }
            }
        }
        out
    }

    /// Longest-first, left-most resolution applied to the full enumeration.
    fn resolve_longest_first(mut all: Vec<(Span, String)>) -> Vec<(Span, String)> {
        all.sort_by_key(|(s, _)| (std::cmp::Reverse(s.len()), s.start));
        let mut kept: Vec<(Span, String)> = Vec::new();
        for m in all {
            if kept.iter().all(|(s, _)| !s.overlaps(&m.0)) {
                kept.push(m);
            }
        }
        kept.sort();
        kept
    }

    proptest! {
        #[test]
        fn matching_agrees_with_enumeration(
            tokens in proptest::collection::vec("[abc]", 1..12),
            values in proptest::collection::btree_set(
                proptest::collection::vec("[abc]", 1..4).prop_map(|v| v.join(" ")), 1..5)
        ) {
            let values: Vec<String> = values.into_iter().collect();
            let seeds = SeedSets::new([(
                "t",
                values.iter().enumerate().map(|(i, v)| (format!("a{i}"), vec![v.clone()])).collect::<Vec<_>>(),
            )]).unwrap();
            let p = Product { id: "p".into(), product_type: "t".into(), tokens: tokens.clone() };
            let m = match_seeds_to_occurrences(&seeds, std::slice::from_ref(&p));
            let mut got: Vec<(Span, String)> = m.occurrences.values().flatten()
                .map(|o| (o.span, o.value_text.clone())).collect();
            got.sort();
            let all = all_exact_matches(&tokens, &values);
            for g in &got {
                prop_assert!(all.contains(g));
                prop_assert_eq!(&tokens[g.0.start..g.0.end].join(" "), &g.1);
            }
            for (i, a) in got.iter().enumerate() {
                for b in &got[i + 1..] {
                    prop_assert!(!a.0.overlaps(&b.0));
                }
            }
            prop_assert_eq!(got, resolve_longest_first(all));
        }
    }
}
