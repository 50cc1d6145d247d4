//! Candidate value generation: probing phrase scores, threshold
//! segmentation, frequent-pattern merging and threshold calibration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Product, Span, ValueOccurrence};
use crate::encoder::{cosine_distance, ContextEncoder};
use crate::error::{Error, Result};
use crate::metrics::entity_prf;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    /// Adjacent words are merged when their phrase score exceeds this.
    pub threshold: f64,
    /// Per-type thresholds that override `threshold`.
    #[serde(default)]
    pub type_thresholds: BTreeMap<String, f64>,
    pub min_support: usize,
    pub max_pattern_len: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            threshold: 0.3,
            type_thresholds: BTreeMap::new(),
            min_support: 10,
            max_pattern_len: 4,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, tau) in std::iter::once(("segmentation.threshold", self.threshold))
            .chain(self.type_thresholds.values().map(|&t| ("segmentation.type_thresholds", t)))
        {
            if !(0.0..=2.0).contains(&tau) {
                return Err(Error::config(field, format!("{tau} outside [0, 2]")));
            }
        }
        if self.min_support < 2 {
            return Err(Error::config("segmentation.min_support", "must be at least 2"));
        }
        if self.max_pattern_len < 2 {
            return Err(Error::config("segmentation.max_pattern_len", "must be at least 2"));
        }
        Ok(())
    }

    pub fn threshold_for(&self, product_type: &str) -> f64 {
        self.type_thresholds.get(product_type).copied().unwrap_or(self.threshold)
    }
}

/// `scores[i]` is the phrase score between words `i` and `i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseScoreRow {
    pub product_id: String,
    pub scores: Vec<f64>,
}

/// How much word `i + 1` shapes the masked reconstruction of word `i`: the
/// cosine distance between position `i` encoded with only `i` masked and
/// with both `i` and `i + 1` masked.
pub fn phrase_score<S: Scalar, E: ContextEncoder<S> + ?Sized>(encoder: &E, tokens: &[String], i: usize) -> Result<f64> {
    if i + 1 >= tokens.len() {
        return Err(Error::OutOfRange {
            position: i,
            len: tokens.len().saturating_sub(1),
        });
    }
    let single = encoder.encode_masked(tokens, &[i])?;
    let pair = encoder.encode_masked(tokens, &[i, i + 1])?;
    Ok(cosine_distance(single.row(i), pair.row(i))?.as_f64())
}

/// Phrase scores for every adjacent pair of a title.
pub fn score_title<S: Scalar, E: ContextEncoder<S> + ?Sized>(encoder: &E, product: &Product) -> Result<PhraseScoreRow> {
    let scores = (0..product.len().saturating_sub(1))
        .map(|i| phrase_score(encoder, &product.tokens, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhraseScoreRow {
        product_id: product.id.clone(),
        scores,
    })
}

pub fn score_corpus<S: Scalar, E: ContextEncoder<S> + ?Sized>(encoder: &E, products: &[Product]) -> Result<Vec<PhraseScoreRow>> {
    products.par_iter().map(|p| score_title(encoder, p)).collect()
}

/// Splits a title of `len` tokens wherever the score does not exceed `tau`.
pub fn segment_title(len: usize, scores: &[f64], tau: f64) -> Result<Vec<Span>> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if scores.len() + 1 != len {
        return Err(Error::LengthMismatch {
            expected: len - 1,
            actual: scores.len(),
        });
    }
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s <= tau {
            spans.push(Span::new(start, i + 1));
            start = i + 1;
        }
    }
    spans.push(Span::new(start, len));
    Ok(spans)
}

/// Contiguous token sequences of length `2..=max_len` that occur at least
/// `min_support` times in `titles` and are cut by a segment boundary in at
/// least one occurrence.
///
/// `titles` pairs each title's tokens with its current segmentation; callers
/// mine one product type at a time.
pub fn mine_patterns(titles: &[(&[String], &[Span])], min_support: usize, max_len: usize) -> BTreeSet<Vec<String>> {
    let mut counts: HashMap<&[String], (usize, bool)> = HashMap::new();
    for (tokens, spans) in titles {
        let mut boundary = vec![false; tokens.len() + 1];
        for s in spans.iter() {
            boundary[s.start] = true;
            boundary[s.end] = true;
        }
        for start in 0..tokens.len() {
            for n in 2..=max_len.min(tokens.len() - start) {
                let crosses = (start + 1..start + n).any(|b| boundary[b]);
                let e = counts.entry(&tokens[start..start + n]).or_insert((0, false));
                e.0 += 1;
                e.1 |= crosses;
            }
        }
    }
    counts
        .into_iter()
        .filter(|(_, (c, crosses))| *c >= min_support && *crosses)
        .map(|(g, _)| g.to_vec())
        .collect()
}

/// Merges runs of adjacent spans whose joined tokens are exactly a mined
/// pattern. Runs are tried left to right, longest first, and the pass is
/// repeated until nothing changes. The output only coarsens the input.
pub fn merge_with_patterns(tokens: &[String], spans: &[Span], patterns: &BTreeSet<Vec<String>>) -> Vec<Span> {
    let max_len = patterns.iter().map(Vec::len).max().unwrap_or(0);
    let mut spans = spans.to_vec();
    if max_len < 2 {
        return spans;
    }
    loop {
        let mut changed = false;
        let mut out = Vec::with_capacity(spans.len());
        let mut j = 0;
        while j < spans.len() {
            let mut merged_to = None;
            let mut k = j + 1;
            while k < spans.len() && spans[k].end - spans[j].start <= max_len {
                k += 1;
            }
            // candidate runs j..=last, longest first
            for last in (j + 1..k).rev() {
                let run = &tokens[spans[j].start..spans[last].end];
                if patterns.contains(run) {
                    merged_to = Some(last);
                    break;
                }
            }
            match merged_to {
                Some(last) => {
                    out.push(Span::new(spans[j].start, spans[last].end));
                    j = last + 1;
                    changed = true;
                }
                None => {
                    out.push(spans[j]);
                    j += 1;
                }
            }
        }
        spans = out;
        if !changed {
            return spans;
        }
    }
}

/// A title's phrase scores with its gold segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub gold: Vec<Span>,
}

/// The grid threshold whose segmentation has the best entity F1 against the
/// gold spans; ties go to the smaller threshold.
pub fn calibrate_threshold(validation: &[LabeledScores], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid".into()));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let gold: BTreeMap<String, Vec<Span>> = validation
        .iter()
        .enumerate()
        .map(|(i, v)| (i.to_string(), v.gold.clone()))
        .collect();
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &tau in &grid {
        let mut predicted = BTreeMap::new();
        for (i, v) in validation.iter().enumerate() {
            predicted.insert(i.to_string(), segment_title(v.scores.len() + 1, &v.scores, tau)?);
        }
        let f1 = entity_prf(&predicted, &gold)?.f1;
        if f1 > best.0 {
            best = (f1, tau);
        }
    }
    Ok(best.1)
}

/// The grid threshold whose final candidate spans, after pattern merging,
/// have the best entity F1 on the products listed in `gold`; ties go to the
/// smaller threshold. Patterns are mined on all of `products` at every grid
/// point, exactly as [`generate_candidates`] does.
pub fn calibrate_candidate_threshold(
    products: &[Product],
    scores: &[PhraseScoreRow],
    config: &SegmentationConfig,
    gold: &BTreeMap<String, Vec<Span>>,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid".into()));
    }
    if gold.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &tau in &grid {
        let mut trial = config.clone();
        trial.threshold = tau;
        let (_, mut spans) = generate_candidates(products, scores, &trial)?;
        spans.retain(|id, _| gold.contains_key(id));
        let f1 = entity_prf(&spans, gold)?.f1;
        if f1 > best.0 {
            best = (f1, tau);
        }
    }
    Ok(best.1)
}

/// Evenly spaced thresholds over `[0, 2]`, `steps + 1` points.
pub fn default_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 2.0 * i as f64 / steps as f64).collect()
}

/// Distinct candidate values of one product type with all their occurrences.
pub type CandidateSet = BTreeMap<String, Vec<ValueOccurrence>>;

/// Per product type candidate sets.
pub type Candidates = BTreeMap<String, CandidateSet>;

/// Segments every title with its type's threshold, mines patterns per type,
/// merges, and gathers the resulting spans as candidates.
pub fn generate_candidates(
    products: &[Product],
    scores: &[PhraseScoreRow],
    config: &SegmentationConfig,
) -> Result<(Candidates, BTreeMap<String, Vec<Span>>)> {
    config.validate()?;
    if products.len() != scores.len() {
        return Err(Error::LengthMismatch {
            expected: products.len(),
            actual: scores.len(),
        });
    }
    let mut segmented: Vec<Vec<Span>> = Vec::with_capacity(products.len());
    for (p, row) in products.iter().zip(scores) {
        segmented.push(segment_title(p.len(), &row.scores, config.threshold_for(&p.product_type))?);
    }
    let mut by_type: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in products.iter().enumerate() {
        by_type.entry(p.product_type.as_str()).or_default().push(i);
    }
    let mut candidates = Candidates::new();
    let mut spans_by_product = BTreeMap::new();
    for (t, members) in by_type {
        let titles: Vec<(&[String], &[Span])> = members
            .iter()
            .map(|&i| (products[i].tokens.as_slice(), segmented[i].as_slice()))
            .collect();
        let patterns = mine_patterns(&titles, config.min_support, config.max_pattern_len);
        log::debug!("{t}: {} frequent patterns", patterns.len());
        let set = candidates.entry(t.to_owned()).or_default();
        for &i in &members {
            let p = &products[i];
            let merged = merge_with_patterns(&p.tokens, &segmented[i], &patterns);
            for &span in &merged {
                let occ = ValueOccurrence::from_product(p, span)?;
                set.entry(occ.value_text.clone()).or_default().push(occ);
            }
            spans_by_product.insert(p.id.clone(), merged);
        }
    }
    Ok((candidates, spans_by_product))
}

#[derive(Serialize, Deserialize)]
struct DumpOccurrence {
    product_id: String,
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct DumpRecord {
    product_type: String,
    value_text: String,
    occurrences: Vec<DumpOccurrence>,
}

/// Writes candidates as JSON lines, one distinct value per line.
pub fn write_candidates(path: impl AsRef<Path>, candidates: &Candidates) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (t, set) in candidates {
        for (value, occs) in set {
            let record = DumpRecord {
                product_type: t.clone(),
                value_text: value.clone(),
                occurrences: occs
                    .iter()
                    .map(|o| DumpOccurrence {
                        product_id: o.product_id.clone(),
                        start: o.span.start,
                        end: o.span.end,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &record)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_candidates(path: impl AsRef<Path>) -> Result<Candidates> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Candidates::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DumpRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let occs = record
            .occurrences
            .into_iter()
            .map(|o| ValueOccurrence {
                product_id: o.product_id,
                span: Span::new(o.start, o.end),
                value_text: record.value_text.clone(),
            })
            .collect();
        out.entry(record.product_type).or_default().insert(record.value_text, occs);
    }
    Ok(out)
}

pub fn write_phrase_scores(path: impl AsRef<Path>, rows: &[PhraseScoreRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    /// Returns a fixed vector for position 0 depending on how many positions
    /// are masked; every other row is constant.
    struct Stub {
        single: [f64; 2],
        pair: [f64; 2],
    }

    impl ContextEncoder<f64> for Stub {
        fn dim(&self) -> usize {
            2
        }
        fn max_len(&self) -> usize {
            16
        }
        fn encode_masked(&self, tokens: &[String], masked: &[usize]) -> Result<Array2<f64>> {
            crate::encoder::check_positions(masked, tokens.len())?;
            let mut out = Array2::from_elem((tokens.len(), 2), 1.0);
            let v = if masked.len() >= 2 { self.pair } else { self.single };
            out.row_mut(0).assign(&array![v[0], v[1]]);
            Ok(out)
        }
    }

    #[test]
    fn phrase_score_stub_examples() {
        let t = toks("a b c");
        let same = Stub {
            single: [0.3, 0.4],
            pair: [0.3, 0.4],
        };
        assert!(phrase_score(&same, &t, 0).unwrap().abs() < 1e-12);
        let ortho = Stub {
            single: [1.0, 0.0],
            pair: [0.0, 1.0],
        };
        assert!((phrase_score(&ortho, &t, 0).unwrap() - 1.0).abs() < 1e-12);
        let anti = Stub {
            single: [1.0, 0.0],
            pair: [-1.0, 0.0],
        };
        assert!((phrase_score(&anti, &t, 0).unwrap() - 2.0).abs() < 1e-12);
        assert!(phrase_score(&anti, &t, 2).is_err());
    }

    #[test]
    fn segmentation_examples() {
        let scores = [0.9, 0.1, 0.8];
        assert_eq!(
            segment_title(4, &scores, 0.5).unwrap(),
            vec![Span::new(0, 2), Span::new(2, 4)]
        );
        assert_eq!(segment_title(4, &scores, 0.95).unwrap().len(), 4);
        assert_eq!(segment_title(4, &scores, 0.05).unwrap(), vec![Span::new(0, 4)]);
        assert!(segment_title(4, &[0.1], 0.5).is_err());
        // strict comparison
        assert_eq!(segment_title(2, &[0.5], 0.5).unwrap().len(), 2);
    }

    #[test]
    fn mines_split_frequent_pattern() {
        let mut titles: Vec<(Vec<String>, Vec<Span>)> = Vec::new();
        for i in 0..50 {
            titles.push((
                toks(&format!("brand{} qled tv", i % 7)),
                vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)],
            ));
        }
        let view: Vec<(&[String], &[Span])> = titles.iter().map(|(t, s)| (t.as_slice(), s.as_slice())).collect();
        let p = mine_patterns(&view, 10, 4);
        assert!(p.contains(&toks("qled tv")));
        assert!(mine_patterns(&view, 51, 4).is_empty());
    }

    #[test]
    fn overlapping_patterns_both_survive() {
        // brute-force count check: "4k uhd" 30 times, "uhd tv" 12 times
        let mut titles = Vec::new();
        for i in 0..30 {
            let t = if i < 12 { "x 4k uhd tv" } else { "x 4k uhd y" };
            titles.push((toks(t), (0..4).map(|j| Span::new(j, j + 1)).collect::<Vec<_>>()));
        }
        let view: Vec<(&[String], &[Span])> = titles.iter().map(|(t, s)| (t.as_slice(), s.as_slice())).collect();
        let p = mine_patterns(&view, 10, 2);
        let count = |g: &[&str]| {
            titles
                .iter()
                .map(|(t, _)| t.windows(g.len()).filter(|w| w.iter().zip(g).all(|(a, b)| a == b)).count())
                .sum::<usize>()
        };
        assert_eq!(count(&["4k", "uhd"]), 30);
        assert_eq!(count(&["uhd", "tv"]), 12);
        assert!(p.contains(&toks("4k uhd")));
        assert!(p.contains(&toks("uhd tv")));
    }

    #[test]
    fn unsplit_patterns_are_not_reported() {
        let titles: Vec<(Vec<String>, Vec<Span>)> = (0..20).map(|_| (toks("qled tv"), vec![Span::new(0, 2)])).collect();
        let view: Vec<(&[String], &[Span])> = titles.iter().map(|(t, s)| (t.as_slice(), s.as_slice())).collect();
        assert!(mine_patterns(&view, 10, 4).is_empty());
    }

    #[test]
    fn merge_examples() {
        let t = toks("qled tv");
        let pats: BTreeSet<Vec<String>> = [toks("qled tv")].into_iter().collect();
        assert_eq!(
            merge_with_patterns(&t, &[Span::new(0, 1), Span::new(1, 2)], &pats),
            vec![Span::new(0, 2)]
        );
        let none: BTreeSet<Vec<String>> = [toks("foo bar")].into_iter().collect();
        assert_eq!(
            merge_with_patterns(&t, &[Span::new(0, 1), Span::new(1, 2)], &none),
            vec![Span::new(0, 1), Span::new(1, 2)]
        );
        let abc = toks("a b c");
        let chain: BTreeSet<Vec<String>> = [toks("a b"), toks("b c")].into_iter().collect();
        assert_eq!(
            merge_with_patterns(&abc, &[Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)], &chain),
            vec![Span::new(0, 2), Span::new(2, 3)]
        );
    }

    #[test]
    fn calibration_examples() {
        let v = vec![LabeledScores {
            scores: vec![0.9, 0.1],
            gold: vec![Span::new(0, 2), Span::new(2, 3)],
        }];
        assert_eq!(calibrate_threshold(&v, &[0.05, 0.5, 1.0]).unwrap(), 0.5);
        assert!(calibrate_threshold(&v, &[]).is_err());
        assert!(calibrate_threshold(&[], &[0.5]).is_err());

        let singles = vec![LabeledScores {
            scores: vec![0.4, 0.7],
            gold: vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)],
        }];
        assert_eq!(calibrate_threshold(&singles, &[0.1, 0.5, 0.8, 1.2]).unwrap(), 0.8);

        // 0.5 and 0.6 both give perfect F1; the smaller wins
        assert_eq!(calibrate_threshold(&v, &[0.6, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn candidate_calibration_accounts_for_merging() {
        // titles "x y c_i d_i u v" with gold [x y][c_i][d_i][u v]
        let mut products = Vec::new();
        let mut rows = Vec::new();
        let mut gold = BTreeMap::new();
        for i in 0..12 {
            let id = format!("p{i}");
            products.push(Product {
                id: id.clone(),
                product_type: "t".into(),
                tokens: toks(&format!("x y c{i} d{i} u v")),
            });
            rows.push(PhraseScoreRow {
                product_id: id.clone(),
                scores: vec![0.3, 0.1, 0.35, 0.1, 0.3],
            });
            gold.insert(id, vec![Span::new(0, 2), Span::new(2, 3), Span::new(3, 4), Span::new(4, 6)]);
        }
        let grid = [0.2, 0.5];
        let raw: Vec<LabeledScores> = rows
            .iter()
            .map(|r| LabeledScores { scores: r.scores.clone(), gold: gold[&r.product_id].clone() })
            .collect();
        // raw segmentation prefers 0.2: [x y][c d][u v] beats six singletons
        assert_eq!(calibrate_threshold(&raw, &grid).unwrap(), 0.2);
        // at 0.5 the frequent "x y" and "u v" are merged back, which is exact
        let config = SegmentationConfig { min_support: 10, ..SegmentationConfig::default() };
        assert_eq!(calibrate_candidate_threshold(&products, &rows, &config, &gold, &grid).unwrap(), 0.5);

        // without frequent patterns both rules agree
        let rare = SegmentationConfig { min_support: 100, ..config.clone() };
        assert_eq!(calibrate_candidate_threshold(&products, &rows, &rare, &gold, &grid).unwrap(), 0.2);

        assert!(calibrate_candidate_threshold(&products, &rows, &config, &gold, &[]).is_err());
        assert!(calibrate_candidate_threshold(&products, &rows, &config, &BTreeMap::new(), &grid).is_err());
    }

    #[test]
    fn candidate_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut c = Candidates::new();
        let occ = ValueOccurrence {
            product_id: "p1".into(),
            span: Span::new(1, 3),
            value_text: "dark roast".into(),
        };
        c.entry("coffee".into()).or_default().insert("dark roast".into(), vec![occ]);
        write_candidates(&path, &c).unwrap();
        assert_eq!(load_candidates(&path).unwrap(), c);
    }

    fn is_partition(spans: &[Span], len: usize) -> bool {
        let mut cursor = 0;
        for s in spans {
            if s.start != cursor || s.end <= s.start {
                return false;
            }
            cursor = s.end;
        }
        cursor == len
    }

    proptest! {
        #[test]
        fn segmentation_partitions_and_is_monotone(scores in proptest::collection::vec(0.0f64..2.0, 0..20)) {
            let len = scores.len() + 1;
            let mut prev = 0;
            for tau in default_grid(19) {
                let spans = segment_title(len, &scores, tau).unwrap();
                prop_assert!(is_partition(&spans, len));
                prop_assert!(spans.len() >= prev);
                prev = spans.len();
            }
        }

        #[test]
        fn merging_only_coarsens(
            tokens in proptest::collection::vec("[abc]", 1..14),
            cuts in proptest::collection::vec(any::<bool>(), 13),
            pats in proptest::collection::btree_set(proptest::collection::vec("[abc]", 2..4), 0..6),
        ) {
            let len = tokens.len();
            let mut spans = Vec::new();
            let mut start = 0;
            for i in 1..len {
                if cuts[i - 1] {
                    spans.push(Span::new(start, i));
                    start = i;
                }
            }
            spans.push(Span::new(start, len));
            let merged = merge_with_patterns(&tokens, &spans, &pats);
            prop_assert!(is_partition(&merged, len));
            for m in &merged {
                // each output span is a union of consecutive input spans
                prop_assert!(spans.iter().any(|s| s.start == m.start));
                prop_assert!(spans.iter().any(|s| s.end == m.end));
                prop_assert!(spans.iter().all(|s| !s.overlaps(m) || (s.start >= m.start && s.end <= m.end)));
            }
        }
    }
}
