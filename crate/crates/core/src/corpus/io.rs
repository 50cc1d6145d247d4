use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_value, tokenize, Clusters, Product, Span};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct CorpusRecord {
    id: String,
    #[serde(alias = "type")]
    product_type: String,
    title: String,
}

#[derive(Serialize)]
struct CorpusRecordOut<'a> {
    id: &'a str,
    product_type: &'a str,
    title: String,
}

/// Products parsed from a corpus file, with counts of records that needed attention.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusLoad {
    pub products: Vec<Product>,
    /// Records whose title tokenized to nothing; these are dropped.
    pub rejected_empty: usize,
    /// Records cut down to the maximum title length.
    pub truncated: usize,
}

/// Reads a line-delimited JSON corpus (`id`, `product_type`, `title` per line).
pub fn load_corpus(path: impl AsRef<Path>, max_tokens: usize) -> Result<CorpusLoad> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(file, path, max_tokens)
}

pub(crate) fn parse_corpus(reader: impl Read, path: &Path, max_tokens: usize) -> Result<CorpusLoad> {
    let mut out = CorpusLoad::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let mut tokens = tokenize(&record.title);
        if tokens.is_empty() {
            out.rejected_empty += 1;
            continue;
        }
        if tokens.len() > max_tokens {
            tokens.truncate(max_tokens);
            out.truncated += 1;
        }
        out.products.push(Product {
            id: record.id,
            product_type: record.product_type,
            tokens,
        });
    }
    if out.rejected_empty > 0 {
        log::warn!("{}: rejected {} records with empty titles", path.display(), out.rejected_empty);
    }
    if out.truncated > 0 {
        log::warn!("{}: truncated {} titles to {max_tokens} tokens", path.display(), out.truncated);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, products: &[Product]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for p in products {
        let rec = CorpusRecordOut {
            id: &p.id,
            product_type: &p.product_type,
            title: p.title(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `{product_type: {cluster_id: [value, ...]}}` document.
///
/// Values are normalized with the corpus tokenizer so that they compare equal
/// to candidate texts.
pub fn load_clusters(path: impl AsRef<Path>) -> Result<Clusters> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_clusters(&text)
}

pub fn read_clusters(text: &str) -> Result<Clusters> {
    let raw: Clusters = serde_json::from_str(text)?;
    Ok(raw
        .into_iter()
        .map(|(t, clusters)| {
            let clusters = clusters
                .into_iter()
                .map(|(cid, values)| (cid, values.iter().map(|v| normalize_value(v)).collect()))
                .collect();
            (t, clusters)
        })
        .collect())
}

pub fn write_clusters(path: impl AsRef<Path>, clusters: &Clusters) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(clusters)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One annotated phrase of a title. `attribute` is `None` for filler phrases
/// that are segments but not attribute values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub attribute: Option<String>,
}

impl GoldSpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Per-product gold segmentation, keyed by product id.
pub type GoldSpans = BTreeMap<String, Vec<GoldSpan>>;

#[derive(Serialize, Deserialize)]
struct GoldSpanRecord {
    id: String,
    spans: Vec<GoldSpan>,
}

pub fn load_gold_spans(path: impl AsRef<Path>) -> Result<GoldSpans> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = GoldSpans::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GoldSpanRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.id, rec.spans);
    }
    Ok(out)
}

pub fn write_gold_spans(path: impl AsRef<Path>, spans: &GoldSpans) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (id, spans) in spans {
        let rec = GoldSpanRecord {
            id: id.clone(),
            spans: spans.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<CorpusLoad> {
        parse_corpus(text.as_bytes(), Path::new("mem"), 64)
    }

    #[test]
    fn parses_records_in_order() {
        let load = parse(
            r#"{"id":"p1","type":"coffee","title":"Starbucks Dark Roast"}
{"id":"p2","product_type":"tea","title":"Lipton Green Tea"}
"#,
        )
        .unwrap();
        assert_eq!(load.products.len(), 2);
        assert_eq!(load.products[0].tokens, ["starbucks", "dark", "roast"]);
        assert_eq!(load.products[0].product_type, "coffee");
        assert_eq!(load.products[1].id, "p2");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse("").unwrap().products.is_empty());
    }

    #[test]
    fn missing_title_names_the_line() {
        let err = parse(
            r#"{"id":"p1","product_type":"coffee","title":"a b"}
{"id":"p2","product_type":"coffee"}"#,
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_titles_are_rejected_and_counted() {
        let load = parse(
            r#"{"id":"p1","product_type":"coffee","title":" -- "}
{"id":"p2","product_type":"coffee","title":"ok"}"#,
        )
        .unwrap();
        assert_eq!(load.rejected_empty, 1);
        assert_eq!(load.products.len(), 1);
    }

    #[test]
    fn long_titles_are_truncated() {
        let title = vec!["w"; 70].join(" ");
        let load = parse(&format!(r#"{{"id":"p","product_type":"t","title":"{title}"}}"#)).unwrap();
        assert_eq!(load.products[0].len(), 64);
        assert_eq!(load.truncated, 1);
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(
            titles in proptest::collection::vec(
                proptest::collection::vec("[a-z0-9]{1,6}", 1..10), 0..20)
        ) {
            let products: Vec<Product> = titles
                .into_iter()
                .enumerate()
                .map(|(i, tokens)| Product {
                    id: format!("p{i}"),
                    product_type: if i % 2 == 0 { "a".into() } else { "b".into() },
                    tokens,
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_corpus(&path, &products).unwrap();
            let loaded = load_corpus(&path, 64).unwrap();
            prop_assert_eq!(loaded.products, products);
        }
    }
}
